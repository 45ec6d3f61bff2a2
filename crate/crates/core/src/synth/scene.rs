use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::kinematics::axis_angle;
use crate::body::{rot6d_to_rotmat, rotmat_to_rot6d, BodyParams, BodyTemplate, NUM_BETAS, NUM_JOINTS, ROT6D_IDENTITY};
use crate::camera::{project, rasterize_all_levels, WeakPerspectiveCam};
use crate::error::{Error, Result};
use crate::hierarchy::{Level, PartitionTable};
use crate::rope::{FeatureScene, SceneLabels};
use crate::tensor::Tensor;

/// Channel layout of the synthetic feature volume.
pub const IDENTITY_CHANNELS: usize = NUM_JOINTS;
pub const POSE_CHANNEL: usize = IDENTITY_CHANNELS;
pub const POSE_CHANNELS: usize = 6;
pub const FOREGROUND_CHANNEL: usize = POSE_CHANNEL + POSE_CHANNELS;
pub const MIN_CHANNELS: usize = FOREGROUND_CHANNEL + 1;

/// Number of latent angles driving [`hinge_params`].
pub const LATENT_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Levels whose inputs are filled; the others stay zero.
    pub active: [bool; 4],
    /// Std of the Gaussian noise added to foreground features.
    pub noise: f64,
    /// Scale of the ground-truth part hint written into the attention
    /// logits. Zero leaves them blank.
    pub att_hint: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { h: 16, w: 16, c: 64, active: [true; 4], noise: 0.05, att_hint: 0.0, seed: 0 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::invalid("SceneSpec", "image must be non-empty"));
        }
        if self.c < MIN_CHANNELS {
            return Err(Error::invalid("SceneSpec", format!("need at least {MIN_CHANNELS} channels, got {}", self.c)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.att_hint.is_finite() {
            return Err(Error::invalid("SceneSpec", "noise must be non-negative and finite"));
        }
        Ok(())
    }
}

/// Per joint: hinge axis and how strongly the joint follows its limb angle.
const HINGES: [([f64; 3], f64); NUM_JOINTS] = [
    ([1.0, 0.0, 0.0], 0.0),
    ([1.0, 0.0, 0.0], -1.0),
    ([1.0, 0.0, 0.0], -1.0),
    ([1.0, 0.0, 0.0], 0.3),
    ([1.0, 0.0, 0.0], 1.4),
    ([1.0, 0.0, 0.0], 1.4),
    ([1.0, 0.0, 0.0], 0.3),
    ([1.0, 0.0, 0.0], -0.5),
    ([1.0, 0.0, 0.0], -0.5),
    ([0.0, 1.0, 0.0], 0.4),
    ([1.0, 0.0, 0.0], 0.0),
    ([1.0, 0.0, 0.0], 0.0),
    ([1.0, 0.0, 0.0], 0.5),
    ([0.0, 0.0, 1.0], 0.2),
    ([0.0, 0.0, 1.0], -0.2),
    ([0.0, 1.0, 0.0], 0.8),
    ([0.0, 0.0, 1.0], -1.0),
    ([0.0, 0.0, 1.0], 1.0),
    ([0.0, 1.0, 0.0], 1.5),
    ([0.0, 1.0, 0.0], -1.5),
    ([0.0, 0.0, 1.0], -0.6),
    ([0.0, 0.0, 1.0], 0.6),
    ([0.0, 0.0, 1.0], 0.0),
    ([0.0, 0.0, 1.0], 0.0),
];

/// Pose driven by one angle per coarse limb group: every joint turns about
/// its own hinge by a fixed multiple of its group's angle, so joints of
/// the same limb move together.
pub fn hinge_theta(latent: &[f64; LATENT_DIM], table: &PartitionTable) -> Tensor {
    let data = (0..NUM_JOINTS)
        .flat_map(|j| {
            let (axis, gain) = HINGES[j];
            let angle = gain * latent[table.part_of(Level::FulCo, j)];
            if angle == 0.0 {
                ROT6D_IDENTITY
            } else {
                rotmat_to_rot6d(&axis_angle(&Vector3::from(axis), angle))
            }
        })
        .collect();
    Tensor::new(vec![NUM_JOINTS, 6], data).expect("static shape")
}

/// Spread of the per-group deviation from the coupled pose.
pub const LIMB_JITTER: f64 = 0.1;

/// Random limb angles and camera for a scene that fits a square image.
///
/// Limbs swing in opposition as in walking: one swing angle drives the
/// arms and legs with alternating signs and one lean angle drives head
/// and torso, each group adding its own small jitter.
pub fn hinge_params(rng: &mut ChaCha8Rng, table: &PartitionTable) -> BodyParams {
    let swing = rng.random_range(-0.7..0.7);
    let lean = rng.random_range(-0.7..0.7);
    let drive = [lean, lean, swing, -swing, -swing, swing];
    let latent: [f64; LATENT_DIM] = std::array::from_fn(|g| drive[g] + rng.random_range(-LIMB_JITTER..LIMB_JITTER));
    let s = rng.random_range(0.46..0.52);
    BodyParams {
        theta: hinge_theta(&latent, table),
        beta: Tensor::zeros([NUM_BETAS]),
        cam: Tensor::vector(vec![s, 0.5 + rng.random_range(-0.03..0.03), 0.08 + rng.random_range(-0.02..0.02)]),
    }
}

/// Axis-angle vector of each joint's local rotation, `[24][3]`.
fn rotation_vectors(theta: &Tensor) -> Result<Vec<[f64; 3]>> {
    theta
        .data()
        .chunks(6)
        .map(|r6| {
            let m = rot6d_to_rotmat(r6)?;
            let v = Rotation3::from_matrix_unchecked(m).scaled_axis();
            Ok([v.x, v.y, v.z])
        })
        .collect()
}

/// Renders the ground-truth body into per-level part masks and builds the
/// matching feature volumes.
///
/// A foreground pixel owned by joint `j` carries a one-hot of its part at
/// the level, `sin`/`cos` of joint `j`'s rotation vector and a foreground
/// flag; background pixels are zero. Noise is added on foreground pixels
/// only.
pub fn gen_feature_scene(
    spec: &SceneSpec,
    params: &BodyParams,
    body: &BodyTemplate,
    table: &PartitionTable,
) -> Result<(FeatureScene, SceneLabels)> {
    spec.validate()?;
    let out = body.forward_params(params)?;
    let cam = WeakPerspectiveCam::from_tensor(&params.cam)?;
    let mesh2d = project(&out.vertices, &cam)?;
    let depth: Vec<f64> = out.vertices.data().chunks(3).map(|p| -p[2]).collect();
    let masks = rasterize_all_levels(&mesh2d, &depth, &body.vertex_joint(), spec.h, spec.w, table)?;
    let rotvec = rotation_vectors(&params.theta)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, c) = (spec.h, spec.w, spec.c);
    let mut att: Vec<Tensor> = vec![];
    let mut feat: Vec<Tensor> = vec![];
    for level in Level::ALL {
        let parts = level.part_count();
        let mut a = vec![0.0; h * w * parts];
        let mut f = vec![0.0; h * w * c];
        if spec.active[level.index()] {
            for px in 0..h * w {
                let label = masks[Level::Indep.index()].labels[px] as usize;
                if label == 0 {
                    continue;
                }
                let joint = label - 1;
                let part = table.part_of(level, joint);
                let cell = &mut f[px * c..(px + 1) * c];
                cell[part] = 1.0;
                for (k, v) in rotvec[joint].iter().enumerate() {
                    cell[POSE_CHANNEL + 2 * k] = v.sin();
                    cell[POSE_CHANNEL + 2 * k + 1] = v.cos();
                }
                cell[FOREGROUND_CHANNEL] = 1.0;
                if spec.noise > 0.0 {
                    for x in cell.iter_mut() {
                        *x += spec.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                a[px * parts + part] = spec.att_hint;
            }
        }
        att.push(Tensor::new(vec![h, w, parts], a)?);
        feat.push(Tensor::new(vec![h, w, c], f)?);
    }
    let scene = FeatureScene::new(att.try_into().expect("four levels"), feat.try_into().expect("four levels"))?;
    let labels = SceneLabels { params: params.clone(), joints2d: project(&out.joints, &cam)?, joints3d: out.joints, masks };
    Ok((scene, labels))
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.top + self.height).contains(&i) && (self.left..self.left + self.width).contains(&j)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OccluderMode {
    Zero,
    /// Gaussian values with the given std, seeded.
    Noise {
        std: f64,
        seed: u64,
    },
}

/// Overwrites features and attention logits inside `rect` at every level.
pub fn apply_occluder(scene: &FeatureScene, rect: Rect, mode: OccluderMode) -> Result<FeatureScene> {
    let (h, w) = (scene.height(), scene.width());
    if rect.top + rect.height > h || rect.left + rect.width > w {
        return Err(Error::invalid("apply_occluder", format!("region {rect:?} exceeds the {h}x{w} image")));
    }
    let mut rng = match mode {
        OccluderMode::Noise { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        OccluderMode::Zero => None,
    };
    let mut fill = |t: &Tensor| -> Result<Tensor> {
        let depth = t.shape()[2];
        let mut d = t.to_vec();
        for i in rect.top..rect.top + rect.height {
            for j in rect.left..rect.left + rect.width {
                for x in &mut d[(i * w + j) * depth..(i * w + j + 1) * depth] {
                    *x = match (mode, rng.as_mut()) {
                        (OccluderMode::Noise { std, .. }, Some(r)) => std * r.sample::<f64, _>(StandardNormal),
                        _ => 0.0,
                    };
                }
            }
        }
        Tensor::new(t.shape().to_vec(), d)
    };
    let mut att = scene.att.clone();
    let mut feat = scene.feat.clone();
    for i in 0..4 {
        att[i] = fill(&scene.att[i])?;
        feat[i] = fill(&scene.feat[i])?;
    }
    Ok(FeatureScene { att, feat })
}

/// Generation recipe for one scene; [`SceneRecord::materialize`] rebuilds
/// the scene exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub params: BodyParams,
}

impl SceneRecord {
    /// Scene `index` of a dataset drawn from `base` and `seed`.
    pub fn sample(base: &SceneSpec, seed: u64, index: u64, table: &PartitionTable) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
        let params = hinge_params(&mut rng, table);
        SceneRecord { spec: SceneSpec { seed: rng.random(), ..base.clone() }, params }
    }

    pub fn materialize(&self, body: &BodyTemplate, table: &PartitionTable) -> Result<(FeatureScene, SceneLabels)> {
        gen_feature_scene(&self.spec, &self.params, body, table)
    }
}
