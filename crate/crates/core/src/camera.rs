//! Weak-perspective projection, camera fitting and point-splat part masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Level, PartitionTable};
use crate::tensor::{Tensor, Var};

/// Scaled orthographic camera: `(u, v) = s (x, y) + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspectiveCam {
    pub s: f64,
    pub t: [f64; 2],
}

impl WeakPerspectiveCam {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !t.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("WeakPerspectiveCam", format!("scale must be positive and finite, got {s}")));
        }
        Ok(WeakPerspectiveCam { s, t })
    }

    pub fn from_tensor(cam: &Tensor) -> Result<Self> {
        if cam.shape() != [3] {
            return Err(Error::shape("WeakPerspectiveCam", &[3], cam.shape()));
        }
        let d = cam.data();
        WeakPerspectiveCam::new(d[0], [d[1], d[2]])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(vec![self.s, self.t[0], self.t[1]])
    }
}

/// `[K, 3] -> [K, 2]`; depth is dropped.
pub fn project(points: &Tensor, cam: &WeakPerspectiveCam) -> Result<Tensor> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(Error::shape("project", &[0, 3], points.shape()));
    }
    let out = points.data().chunks(3).flat_map(|p| [cam.s * p[0] + cam.t[0], cam.s * p[1] + cam.t[1]]).collect();
    Tensor::new(vec![points.shape()[0], 2], out)
}

/// Differentiable projection of `[..., K, 3]` points with `[..., 3]` cameras.
pub fn project_var<'t>(points: Var<'t>, cam: Var<'t>) -> Result<Var<'t>> {
    let ps = points.shape();
    let cs = cam.shape();
    if ps.len() < 2
        || ps[ps.len() - 1] != 3
        || cs.len() != ps.len() - 1
        || cs[cs.len() - 1] != 3
        || cs[..cs.len() - 1] != ps[..ps.len() - 2]
    {
        return Err(Error::shape("project_var", &ps, &cs));
    }
    let lead = &ps[..ps.len() - 2];
    let shaped = |tail: &[usize]| -> Vec<usize> { lead.iter().chain(tail).copied().collect() };
    let ax = cs.len() - 1;
    let s = cam.slice(ax, 0, 1)?.reshape(&shaped(&[1, 1]))?;
    let t = cam.slice(ax, 1, 2)?.reshape(&shaped(&[1, 2]))?;
    points.slice(ps.len() - 1, 0, 2)?.mul(s)?.add(t)
}

/// Least-squares `(s, t)` from 2D/3D correspondences via centred
/// covariances.
pub fn fit_cam(points2d: &Tensor, points3d: &Tensor) -> Result<WeakPerspectiveCam> {
    if points2d.rank() != 2 || points2d.shape()[1] != 2 || points3d.rank() != 2 || points3d.shape()[1] != 3 {
        return Err(Error::shape("fit_cam", points2d.shape(), points3d.shape()));
    }
    let k = points2d.shape()[0];
    if k != points3d.shape()[0] {
        return Err(Error::shape("fit_cam", points2d.shape(), points3d.shape()));
    }
    if k < 2 {
        return Err(Error::invalid("fit_cam", "at least two correspondences are needed"));
    }
    let uv = points2d.data();
    let xyz = points3d.data();
    let n = k as f64;
    let mut mx = [0.0; 2];
    let mut mu = [0.0; 2];
    for i in 0..k {
        for a in 0..2 {
            mx[a] += xyz[i * 3 + a] / n;
            mu[a] += uv[i * 2 + a] / n;
        }
    }
    let (mut sxx, mut sxu) = (0.0, 0.0);
    for i in 0..k {
        for a in 0..2 {
            let dx = xyz[i * 3 + a] - mx[a];
            sxx += dx * dx;
            sxu += dx * (uv[i * 2 + a] - mu[a]);
        }
    }
    let spread = (0..k * 3).map(|i| xyz[i].abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= 1e-20 * spread * spread {
        return Err(Error::Degenerate { op: "fit_cam", condition: sxx });
    }
    let s = sxu / sxx;
    if !(s > 0.0) {
        return Err(Error::invalid("fit_cam", format!("fitted scale {s} is not positive (the 2D points are mirrored or collapsed)")));
    }
    Ok(WeakPerspectiveCam { s, t: [mu[0] - s * mx[0], mu[1] - s * mx[1]] })
}

/// Label grid: 0 is background, `1..=parts` the parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u16>,
}

impl PartMask {
    pub fn background(h: usize, w: usize) -> Self {
        PartMask { h, w, labels: vec![0; h * w] }
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.labels[i * self.w + j]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Row-major JSON array of rows.
    pub fn to_json(&self) -> String {
        let rows: Vec<&[u16]> = self.labels.chunks(self.w).collect();
        serde_json::to_string(&rows).expect("mask serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<Vec<u16>> = serde_json::from_str(text)?;
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
            return Err(Error::invalid("PartMask::from_json", "rows must be non-empty and of equal length"));
        }
        Ok(PartMask { h, w, labels: rows.concat() })
    }

    /// Plain-text portable graymap (`P2`).
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n{}\n", self.w, self.h, self.max_label().max(1));
        for row in self.labels.chunks(self.w) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_pgm(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::invalid("PartMask::from_pgm", msg.to_string());
        let mut tokens = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
        if tokens.next() != Some("P2") {
            return Err(bad("missing P2 header"));
        }
        let mut num = |what: &str| -> Result<usize> {
            tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(&format!("could not read {what}")))
        };
        let w = num("width")?;
        let h = num("height")?;
        let maxval = num("maxval")?;
        let mut labels = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            let v = num("pixel")?;
            if v > maxval || v > u16::MAX as usize {
                return Err(bad("pixel exceeds maxval"));
            }
            labels.push(v as u16);
        }
        if h == 0 || w == 0 {
            return Err(bad("empty image"));
        }
        Ok(PartMask { h, w, labels })
    }
}

/// Pixel containing normalized image point `(u, v)`, if inside.
pub fn pixel_of(u: f64, v: f64, h: usize, w: usize) -> Option<(usize, usize)> {
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return None;
    }
    Some((cell(v, h), cell(u, w)))
}

/// Index `c` with `c / n <= x < (c + 1) / n`, exact under rounding.
fn cell(x: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut c = ((x * nf).floor() as usize).min(n - 1);
    if c > 0 && x < c as f64 / nf {
        c -= 1;
    } else if c + 1 < n && x >= (c + 1) as f64 / nf {
        c += 1;
    }
    c
}

/// Point-splat z-buffer: each pixel takes the label (`part + 1`) of the
/// nearest-depth vertex landing in it; ties go to the lower vertex index.
pub fn rasterize_part_masks(mesh2d: &Tensor, depth: &[f64], vertex_part: &[usize], h: usize, w: usize, parts: usize) -> Result<PartMask> {
    let v = depth.len();
    if mesh2d.shape() != [v, 2] || vertex_part.len() != v {
        return Err(Error::shape("rasterize_part_masks", mesh2d.shape(), &[v, vertex_part.len()]));
    }
    if let Some(i) = vertex_part.iter().position(|&p| p >= parts) {
        return Err(Error::invalid(
            "rasterize_part_masks",
            format!("vertex {i} has part {} but the level has {parts} parts", vertex_part[i]),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("rasterize_part_masks", "image must be non-empty"));
    }
    let mut mask = PartMask::background(h, w);
    let mut zbuf = vec![f64::INFINITY; h * w];
    let uv = mesh2d.data();
    for k in 0..v {
        if let Some((i, j)) = pixel_of(uv[k * 2], uv[k * 2 + 1], h, w) {
            let px = i * w + j;
            // strict comparison keeps the earlier vertex on ties
            if depth[k] < zbuf[px] {
                zbuf[px] = depth[k];
                mask.labels[px] = (vertex_part[k] + 1) as u16;
            }
        }
    }
    Ok(mask)
}

/// Masks for all four levels from per-vertex Indep (joint) labels.
pub fn rasterize_all_levels(
    mesh2d: &Tensor,
    depth: &[f64],
    vertex_joint: &[usize],
    h: usize,
    w: usize,
    table: &PartitionTable,
) -> Result<[PartMask; 4]> {
    let level_mask = |level: Level| {
        let parts: Vec<usize> = vertex_joint.iter().map(|&j| table.part_of(level, j)).collect();
        rasterize_part_masks(mesh2d, depth, &parts, h, w, level.part_count())
    };
    Ok([level_mask(Level::Indep)?, level_mask(Level::Inter)?, level_mask(Level::FulCo)?, level_mask(Level::WhoBo)?])
}
