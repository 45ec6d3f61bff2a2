//! Plain `f64` body operations.

use nalgebra::{Matrix3, Vector3};

use super::{BodyParams, BodyTemplate, NUM_BETAS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this norm a rot6d column is treated as degenerate.
pub const ROT6D_EPS: f64 = 1e-8;

/// Rotation plus translation, applied as `x -> r x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { r: Matrix3::identity(), t: Vector3::zeros() }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform { r: self.r * other.r, t: self.r * other.t + self.t }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.r.transpose();
        RigidTransform { r: rt, t: -(rt * self.t) }
    }
}

/// Gram-Schmidt decoding of a 6-vector (two stacked columns) into a rotation.
pub fn rot6d_to_rotmat(r6: &[f64]) -> Result<Matrix3<f64>> {
    if r6.len() != 6 {
        return Err(Error::shape("rot6d_to_rotmat", &[6], &[r6.len()]));
    }
    let a = Vector3::new(r6[0], r6[1], r6[2]);
    let b = Vector3::new(r6[3], r6[4], r6[5]);
    let na = a.norm();
    if !(na > ROT6D_EPS) {
        return Err(Error::Degenerate { op: "rot6d_to_rotmat", condition: na });
    }
    let b1 = a / na;
    let resid = b - b1 * b1.dot(&b);
    let nr = resid.norm();
    if !(nr > ROT6D_EPS) {
        return Err(Error::Degenerate { op: "rot6d_to_rotmat", condition: nr });
    }
    let b2 = resid / nr;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// First two columns of `r`, the inverse of [`rot6d_to_rotmat`] on SO(3).
pub fn rotmat_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Rotation of `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

/// `template + Σ_k β_k basis_k`, `[V, 3]`.
pub fn shape_mesh(template: &BodyTemplate, beta: &[f64]) -> Result<Tensor> {
    if beta.len() != NUM_BETAS {
        return Err(Error::shape("shape_mesh", &[NUM_BETAS], &[beta.len()]));
    }
    let n = template.vertex_count() * 3;
    let mut out = template.vertices.to_vec();
    let basis = template.shape_basis.data();
    for (k, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (o, x) in out.iter_mut().zip(&basis[k * n..(k + 1) * n]) {
                *o += b * x;
            }
        }
    }
    Tensor::new(vec![template.vertex_count(), 3], out)
}

fn row3(t: &Tensor, i: usize) -> Vector3<f64> {
    let d = &t.data()[i * 3..i * 3 + 3];
    Vector3::new(d[0], d[1], d[2])
}

/// World transforms of all joints for rest joint positions `rest` (`[24, 3]`)
/// and local rotations `theta` (`[24, 6]` rot6d).
pub fn forward_kinematics_from_rest(
    parents: &[Option<usize>],
    order: &[usize],
    rest: &Tensor,
    theta: &Tensor,
) -> Result<Vec<RigidTransform>> {
    if theta.shape() != [NUM_JOINTS, 6] {
        return Err(Error::shape("forward_kinematics", &[NUM_JOINTS, 6], theta.shape()));
    }
    if rest.shape() != [NUM_JOINTS, 3] {
        return Err(Error::shape("forward_kinematics", &[NUM_JOINTS, 3], rest.shape()));
    }
    let mut world = vec![RigidTransform::identity(); NUM_JOINTS];
    for &j in order {
        let r = rot6d_to_rotmat(&theta.data()[j * 6..j * 6 + 6])?;
        world[j] = match parents[j] {
            None => RigidTransform { r, t: row3(rest, j) },
            Some(p) => {
                let local = RigidTransform { r, t: row3(rest, j) - row3(rest, p) };
                world[p].compose(&local)
            }
        };
    }
    Ok(world)
}

/// World transforms for the template skeleton; joint positions are the
/// translation parts.
pub fn forward_kinematics(template: &BodyTemplate, theta: &Tensor) -> Result<Vec<RigidTransform>> {
    forward_kinematics_from_rest(&template.parents, template.order(), &template.rest_joints(), theta)
}

/// Rest-pose transforms: identity rotation at each rest joint.
pub fn rest_transforms(rest: &Tensor) -> Vec<RigidTransform> {
    (0..NUM_JOINTS).map(|j| RigidTransform { r: Matrix3::identity(), t: row3(rest, j) }).collect()
}

/// Linear blend skinning relative to the rest pose.
pub fn skin_mesh(shaped: &Tensor, world: &[RigidTransform], rest: &[RigidTransform], weights: &Tensor) -> Result<Tensor> {
    let v = shaped.shape()[0];
    if weights.shape() != [v, NUM_JOINTS] || world.len() != NUM_JOINTS || rest.len() != NUM_JOINTS {
        return Err(Error::shape("skin_mesh", shaped.shape(), weights.shape()));
    }
    let rel: Vec<RigidTransform> = world.iter().zip(rest).map(|(w, r)| w.compose(&r.inverse())).collect();
    let mut out = Vec::with_capacity(v * 3);
    for i in 0..v {
        let x = row3(shaped, i);
        let mut acc = Vector3::zeros();
        for (j, a) in rel.iter().enumerate() {
            let w = weights.data()[i * NUM_JOINTS + j];
            if w != 0.0 {
                acc += w * a.apply(&x);
            }
        }
        out.extend_from_slice(acc.as_slice());
    }
    Tensor::new(vec![v, 3], out)
}

/// `J = W M`, `[24, 3]`.
pub fn regress_joints(mesh: &Tensor, regressor: &Tensor) -> Result<Tensor> {
    let v = mesh.shape()[0];
    if mesh.shape().len() != 2 || mesh.shape()[1] != 3 || regressor.shape() != [NUM_JOINTS, v] {
        return Err(Error::shape("regress_joints", regressor.shape(), mesh.shape()));
    }
    let mut out = vec![0.0; NUM_JOINTS * 3];
    for j in 0..NUM_JOINTS {
        for i in 0..v {
            let w = regressor.data()[j * v + i];
            if w != 0.0 {
                for a in 0..3 {
                    out[j * 3 + a] += w * mesh.data()[i * 3 + a];
                }
            }
        }
    }
    Tensor::new(vec![NUM_JOINTS, 3], out)
}

/// Posed mesh and joints of one body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyOutput {
    pub vertices: Tensor,
    pub joints: Tensor,
    pub transforms: Vec<RigidTransform>,
}

impl BodyTemplate {
    /// Full pipeline: shape, regress the shaped skeleton, pose, skin, regress.
    pub fn forward(&self, theta: &Tensor, beta: &[f64]) -> Result<BodyOutput> {
        let shaped = shape_mesh(self, beta)?;
        let rest = regress_joints(&shaped, &self.joint_regressor)?;
        let world = forward_kinematics_from_rest(&self.parents, self.order(), &rest, theta)?;
        let vertices = skin_mesh(&shaped, &world, &rest_transforms(&rest), &self.weights)?;
        let joints = regress_joints(&vertices, &self.joint_regressor)?;
        Ok(BodyOutput { vertices, joints, transforms: world })
    }

    pub fn forward_params(&self, params: &BodyParams) -> Result<BodyOutput> {
        params.validate()?;
        self.forward(&params.theta, params.beta.data())
    }
}
