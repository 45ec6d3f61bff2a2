//! Pose and trajectory error metrics. Inputs are metres, outputs millimetres.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::FeatureScene;
use crate::synth::{apply_occluder, OccluderMode, Rect};
use crate::tensor::Tensor;

const MM: f64 = 1000.0;

/// `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub s: f64,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.s * (self.r * x) + self.t
    }

    /// Applies the transform to every row of a `[K, 3]` tensor.
    pub fn apply_points(&self, pts: &Tensor) -> Tensor {
        let data = points(pts).iter().flat_map(|p| self.apply(p).as_slice().to_vec()).collect();
        Tensor::new(pts.shape().to_vec(), data).expect("same shape")
    }
}

fn points(t: &Tensor) -> Vec<Vector3<f64>> {
    t.data().chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor, rank: usize) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, pred.shape(), gt.shape()));
    }
    if pred.rank() != rank || pred.shape()[rank - 1] != 3 {
        return Err(Error::invalid(op, format!("expected a rank-{rank} tensor ending in 3, got {:?}", pred.shape())));
    }
    Ok(())
}

fn mean_distance(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred.len() as f64
}

/// Mean joint distance over `[N, J, 3]`.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mpjpe", pred, gt, 3)?;
    Ok(MM * mean_distance(&points(pred), &points(gt)))
}

/// Mean vertex distance over `[N, V, 3]`.
pub fn mpvpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mpvpe", pred, gt, 3)?;
    Ok(MM * mean_distance(&points(pred), &points(gt)))
}

/// Per-joint distances (mm) of one `[J, 3]` frame.
pub fn joint_errors(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    check_pair("joint_errors", pred, gt, 2)?;
    Ok(points(pred).iter().zip(points(gt)).map(|(a, b)| MM * (a - b).norm()).collect())
}

/// Least-squares similarity from `pred` onto `gt` (both `[J, 3]`) with
/// reflection correction.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<SimilarityTransform> {
    check_pair("procrustes_align", pred, gt, 2)?;
    let (p, g) = (points(pred), points(gt));
    if p.len() < 3 {
        return Err(Error::invalid("procrustes_align", "at least three points are needed"));
    }
    let n = p.len() as f64;
    let pm = p.iter().sum::<Vector3<f64>>() / n;
    let gm = g.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut scale = 0.0f64;
    for (a, b) in p.iter().zip(&g) {
        let (x, y) = (a - pm, b - gm);
        h += x * y.transpose();
        var_p += x.norm_squared();
        scale = scale.max(x.norm()).max(y.norm());
    }
    let svd = h.svd(true, true);
    let tol = 1e-12 * scale * scale * n;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < 2 || var_p <= tol {
        return Err(Error::RankDeficient { op: "procrustes_align", rank });
    }
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * dm * u.transpose();
    let s = (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / var_p;
    Ok(SimilarityTransform { s, r, t: gm - s * (r * pm) })
}

/// MPJPE after per-frame Procrustes alignment.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("pa_mpjpe", pred, gt, 3)?;
    let (n, j) = (pred.shape()[0], pred.shape()[1]);
    let mut total = 0.0;
    for f in 0..n {
        let frame = |t: &Tensor| Tensor::new(vec![j, 3], t.data()[f * j * 3..(f + 1) * j * 3].to_vec());
        let (pf, gf) = (frame(pred)?, frame(gt)?);
        let aligned = procrustes_align(&pf, &gf)?.apply_points(&pf);
        total += mean_distance(&points(&aligned), &points(&gf));
    }
    Ok(MM * total / n as f64)
}

/// Rotation by `psi` about +y.
pub fn yaw(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Yaw-and-translation alignment result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawAlignment {
    pub psi: f64,
    pub t: Vector3<f64>,
    /// The window had no horizontal spread, so only translation was fitted.
    pub translation_only: bool,
}

impl YawAlignment {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        yaw(self.psi) * x + self.t
    }
}

/// Closed-form least-squares yaw + translation taking `pred` onto `gt`.
pub fn fit_yaw(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> YawAlignment {
    let n = pred.len() as f64;
    let pm = pred.iter().sum::<Vector3<f64>>() / n;
    let gm = gt.iter().sum::<Vector3<f64>>() / n;
    let (mut a, mut b, mut spread) = (0.0, 0.0, 0.0f64);
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (p - pm, g - gm);
        a += g.x * p.x + g.z * p.z;
        b += g.x * p.z - g.z * p.x;
        spread = spread.max(p.x.hypot(p.z)).max(g.x.hypot(g.z));
    }
    let translation_only = a.hypot(b) <= 1e-12 * (spread * spread * n).max(f64::MIN_POSITIVE);
    let psi = if translation_only { 0.0 } else { b.atan2(a) };
    YawAlignment { psi, t: gm - yaw(psi) * pm, translation_only }
}

/// World-frame error with the alignment used to obtain it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldError {
    pub mm: f64,
    pub translation_only: bool,
}

fn world_error(op: &'static str, pred: &Tensor, gt: &Tensor, window: Option<usize>) -> Result<WorldError> {
    check_pair(op, pred, gt, 3)?;
    let (n, j) = (pred.shape()[0], pred.shape()[1]);
    if n < 2 {
        return Err(Error::invalid(op, "at least two frames are needed"));
    }
    let (p, g) = (points(pred), points(gt));
    let k = window.map_or(n, |w| w.min(n)) * j;
    let align = fit_yaw(&p[..k], &g[..k]);
    let aligned: Vec<Vector3<f64>> = p.iter().map(|x| align.apply(x)).collect();
    Ok(WorldError { mm: MM * mean_distance(&aligned, &g), translation_only: align.translation_only })
}

/// Alignment fitted on the first two frames, error over all frames.
pub fn w_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<WorldError> {
    world_error("w_mpjpe", pred, gt, Some(2))
}

/// Alignment fitted over the whole sequence.
pub fn wa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<WorldError> {
    world_error("wa_mpjpe", pred, gt, None)
}

/// Alignment conventions behind [`w_mpjpe`] and [`wa_mpjpe`], written next
/// to every report that quotes them.
pub fn world_protocol() -> serde_json::Value {
    serde_json::json!({
        "units": "mm",
        "gravity_axis": "+y",
        "alignment": "rotation about the gravity axis plus translation, least squares over all joints of the window",
        "w_mpjpe": { "window_frames": 2, "error_frames": "all" },
        "wa_mpjpe": { "window_frames": "all", "error_frames": "all" },
    })
}

/// Numeric `h x w` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<&[f64]> = self.values.chunks(self.w).collect();
        serde_json::to_string(&rows).expect("grid serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = serde_json::from_str(text)?;
        let w = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || w == 0 || rows.iter().any(|r| r.len() != w) {
            return Err(Error::invalid("Grid::from_json", "rows must be non-empty and of equal length"));
        }
        Ok(Grid { h: rows.len(), w, values: rows.concat() })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Slides a zeroing occluder of `occluder = (height, width)` pixels over
/// `scene` with the given stride and records, per position, the largest
/// joint error (mm) of `model` against `gt` `[24, 3]`.
pub fn occlusion_sensitivity_map<F>(model: F, scene: &FeatureScene, gt: &Tensor, occluder: (usize, usize), stride: usize) -> Result<Grid>
where
    F: Fn(&FeatureScene) -> Result<Tensor>,
{
    let (h, w) = (scene.height(), scene.width());
    let (oh, ow) = occluder;
    if oh == 0 || ow == 0 || oh > h || ow > w || stride == 0 {
        return Err(Error::invalid(
            "occlusion_sensitivity_map",
            format!("occluder {oh}x{ow} with stride {stride} does not fit a {h}x{w} scene"),
        ));
    }
    let (gh, gw) = ((h - oh) / stride + 1, (w - ow) / stride + 1);
    let mut values = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let rect = Rect { top: i * stride, left: j * stride, height: oh, width: ow };
            let pred = model(&apply_occluder(scene, rect, OccluderMode::Zero)?)?;
            values.push(joint_errors(&pred, gt)?.into_iter().fold(0.0, f64::max));
        }
    }
    Ok(Grid { h: gh, w: gw, values })
}
