//! A small SMPL-style skinned body: template data, rot6d decoding, forward
//! kinematics, linear blend skinning and joint regression.
//!
//! Every operation exists twice: a plain `f64` route in [`kinematics`] and a
//! differentiable route in [`diff`] that records onto a [`Tape`](crate::Tape).

pub mod diff;
pub mod kinematics;
mod procedural;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kinematics::{forward_kinematics, regress_joints, rot6d_to_rotmat, rotmat_to_rot6d, shape_mesh, skin_mesh, RigidTransform};

pub const NUM_JOINTS: usize = 24;
pub const NUM_BETAS: usize = 10;

/// Standard 24-joint SMPL ordering.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const SMPL_PARENTS: [i64; NUM_JOINTS] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

pub const LEFT_ANKLE: usize = 7;
pub const RIGHT_ANKLE: usize = 8;
pub const LEFT_FOOT: usize = 10;
pub const RIGHT_FOOT: usize = 11;

/// Identity rotation in rot6d form.
pub const ROT6D_IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Pose, shape and weak-perspective camera of one body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// `[24, 6]` rot6d rows.
    pub theta: Tensor,
    /// `[10]`.
    pub beta: Tensor,
    /// `[3]`: scale, t_x, t_y.
    pub cam: Tensor,
}

impl BodyParams {
    pub fn identity() -> Self {
        BodyParams { theta: rest_pose(), beta: Tensor::zeros([NUM_BETAS]), cam: Tensor::vector(vec![1.0, 0.0, 0.0]) }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = |t: &Tensor, shape: &[usize]| {
            if t.shape() != shape {
                Err(Error::shape("BodyParams", shape, t.shape()))
            } else if !t.is_finite() {
                Err(Error::invalid("BodyParams", "non-finite entry"))
            } else {
                Ok(())
            }
        };
        expect(&self.theta, &[NUM_JOINTS, 6])?;
        expect(&self.beta, &[NUM_BETAS])?;
        expect(&self.cam, &[3])
    }
}

/// All joints at the identity rotation, `[24, 6]`.
pub fn rest_pose() -> Tensor {
    Tensor::new(vec![NUM_JOINTS, 6], ROT6D_IDENTITY.repeat(NUM_JOINTS)).expect("static shape")
}

/// Validated body template. Construct with [`BodyTemplate::procedural`],
/// [`BodyTemplate::from_json`] or [`BodyTemplate::load`].
#[derive(Debug, Clone, PartialEq)]
pub struct BodyTemplate {
    /// `[V, 3]` metres.
    pub vertices: Tensor,
    /// `[10, V, 3]`.
    pub shape_basis: Tensor,
    /// `[V, 24]`, rows sum to one.
    pub weights: Tensor,
    pub parents: Vec<Option<usize>>,
    /// `[24, 3]`: root rest position, then offsets from each parent.
    pub rest_offsets: Tensor,
    /// `[24, V]`, rows sum to one.
    pub joint_regressor: Tensor,
    order: Vec<usize>,
}

/// On-disk schema of a template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateFile {
    pub vertices: Vec<[f64; 3]>,
    pub shape_basis: Vec<Vec<[f64; 3]>>,
    pub weights: Vec<Vec<f64>>,
    pub parents: Vec<i64>,
    pub rest_offsets: Vec<[f64; 3]>,
    pub joint_regressor: Vec<Vec<f64>>,
}

fn schema(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Schema { line: 1, path: path.into(), msg: msg.into() }
}

fn check_prob_rows(name: &str, rows: &[Vec<f64>], width: usize) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(schema(format!("{name}[{i}]"), format!("expected {width} entries, found {}", row.len())));
        }
        if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(schema(format!("{name}[{i}]"), "entries must be finite and non-negative"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(schema(format!("{name}[{i}]"), format!("row sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Topological order from the root, or an error naming the problem.
fn tree_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let roots: Vec<usize> = (0..parents.len()).filter(|&j| parents[j].is_none()).collect();
    if roots.len() != 1 {
        return Err(schema("parents", format!("expected exactly one root, found {}", roots.len())));
    }
    let mut order = roots.clone();
    let mut head = 0;
    while head < order.len() {
        let p = order[head];
        order.extend((0..parents.len()).filter(|&j| parents[j] == Some(p)));
        head += 1;
    }
    if order.len() != parents.len() {
        return Err(schema("parents", "parent links contain a cycle or unreachable joint"));
    }
    Ok(order)
}

impl BodyTemplate {
    /// Desk-scale tube body with `vertex_count` vertices (a multiple of 8,
    /// at least 192).
    pub fn procedural(vertex_count: usize) -> Result<Self> {
        procedural::build(vertex_count)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.shape()[0]
    }

    /// Joints in an order where every parent precedes its children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Absolute rest joint positions, `[24, 3]`.
    pub fn rest_joints(&self) -> Tensor {
        let mut out = vec![0.0; NUM_JOINTS * 3];
        for &j in &self.order {
            for a in 0..3 {
                let base = self.parents[j].map_or(0.0, |p| out[p * 3 + a]);
                out[j * 3 + a] = base + self.rest_offsets.at(&[j, a]);
            }
        }
        Tensor::new(vec![NUM_JOINTS, 3], out).expect("static shape")
    }

    /// Joint carrying the largest skinning weight of each vertex; ties go to
    /// the higher joint index.
    pub fn vertex_joint(&self) -> Vec<usize> {
        let w = self.weights.data();
        w.chunks(NUM_JOINTS)
            .map(|row| {
                let mut best = 0;
                for j in 1..NUM_JOINTS {
                    if row[j] >= row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn from_file(f: TemplateFile) -> Result<Self> {
        let v = f.vertices.len();
        if v == 0 {
            return Err(schema("vertices", "template has no vertices"));
        }
        if f.vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(schema("vertices", "non-finite coordinate"));
        }
        if f.shape_basis.len() != NUM_BETAS {
            return Err(schema("shape_basis", format!("expected {NUM_BETAS} components, found {}", f.shape_basis.len())));
        }
        for (k, comp) in f.shape_basis.iter().enumerate() {
            if comp.len() != v {
                return Err(schema(format!("shape_basis[{k}]"), format!("expected {v} vertices, found {}", comp.len())));
            }
            if comp.iter().flatten().any(|x| !x.is_finite()) {
                return Err(schema(format!("shape_basis[{k}]"), "non-finite entry"));
            }
        }
        if f.weights.len() != v {
            return Err(schema("weights", format!("expected {v} rows, found {}", f.weights.len())));
        }
        check_prob_rows("weights", &f.weights, NUM_JOINTS)?;
        if f.joint_regressor.len() != NUM_JOINTS {
            return Err(schema("joint_regressor", format!("expected {NUM_JOINTS} rows, found {}", f.joint_regressor.len())));
        }
        check_prob_rows("joint_regressor", &f.joint_regressor, v)?;
        if f.parents.len() != NUM_JOINTS {
            return Err(schema("parents", format!("expected {NUM_JOINTS} entries, found {}", f.parents.len())));
        }
        let mut parents = Vec::with_capacity(NUM_JOINTS);
        for (j, &p) in f.parents.iter().enumerate() {
            parents.push(match p {
                -1 => None,
                p if p >= 0 && (p as usize) < NUM_JOINTS && p as usize != j => Some(p as usize),
                _ => return Err(schema(format!("parents[{j}]"), format!("invalid parent index {p}"))),
            });
        }
        let order = tree_order(&parents)?;
        if f.rest_offsets.len() != NUM_JOINTS || f.rest_offsets.iter().flatten().any(|x| !x.is_finite()) {
            return Err(schema("rest_offsets", format!("expected {NUM_JOINTS} finite 3-vectors")));
        }
        Ok(BodyTemplate {
            vertices: Tensor::new(vec![v, 3], f.vertices.iter().flatten().copied().collect())?,
            shape_basis: Tensor::new(vec![NUM_BETAS, v, 3], f.shape_basis.iter().flatten().flatten().copied().collect())?,
            weights: Tensor::new(vec![v, NUM_JOINTS], f.weights.concat())?,
            parents,
            rest_offsets: Tensor::new(vec![NUM_JOINTS, 3], f.rest_offsets.iter().flatten().copied().collect())?,
            joint_regressor: Tensor::new(vec![NUM_JOINTS, v], f.joint_regressor.concat())?,
            order,
        })
    }

    pub fn to_file(&self) -> TemplateFile {
        let v = self.vertex_count();
        let triples = |t: &Tensor| -> Vec<[f64; 3]> { t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
        TemplateFile {
            vertices: triples(&self.vertices),
            shape_basis: self.shape_basis.data().chunks(v * 3).map(|c| c.chunks(3).map(|x| [x[0], x[1], x[2]]).collect()).collect(),
            weights: self.weights.data().chunks(NUM_JOINTS).map(<[f64]>::to_vec).collect(),
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            rest_offsets: triples(&self.rest_offsets),
            joint_regressor: self.joint_regressor.data().chunks(v).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: TemplateFile =
            serde_json::from_str(text).map_err(|e| Error::Schema { line: e.line(), path: "$".into(), msg: e.to_string() })?;
        BodyTemplate::from_file(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("template serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BodyTemplate::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
