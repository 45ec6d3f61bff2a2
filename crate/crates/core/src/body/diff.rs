//! Differentiable body operations on a tape. Every function accepts any
//! number of leading batch axes.

use super::{BodyTemplate, NUM_BETAS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

fn lead(shape: &[usize], trailing: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let k = trailing.len();
    if shape.len() < k || shape[shape.len() - k..] != *trailing {
        return Err(Error::shape(op, trailing, shape));
    }
    Ok(shape[..shape.len() - k].to_vec())
}

fn with(lead: &[usize], tail: &[usize]) -> Vec<usize> {
    let mut s = lead.to_vec();
    s.extend_from_slice(tail);
    s
}

/// `[..., 6] -> [..., 3, 3]` by Gram-Schmidt; rejects degenerate rows.
pub fn rot6d_to_rotmat<'t>(r6: Var<'t>) -> Result<Var<'t>> {
    let shape = r6.shape();
    let lead = lead(&shape, &[6], "rot6d_to_rotmat")?;
    for row in r6.value().data().chunks(6) {
        super::kinematics::rot6d_to_rotmat(row)?;
    }
    let ax = lead.len();
    let a = r6.slice(ax, 0, 3)?;
    let b = r6.slice(ax, 3, 3)?;
    let col_shape = with(&lead, &[1]);
    let b1 = a.div(a.norm_last()?.reshape(&col_shape)?)?;
    let dot = b1.mul(b)?.sum_axis(ax)?;
    let resid = b.sub(b1.mul(dot)?)?;
    let b2 = resid.div(resid.norm_last()?.reshape(&col_shape)?)?;
    let comp = |v: Var<'t>, i: usize| v.slice(ax, i, 1);
    let (x1, y1, z1) = (comp(b1, 0)?, comp(b1, 1)?, comp(b1, 2)?);
    let (x2, y2, z2) = (comp(b2, 0)?, comp(b2, 1)?, comp(b2, 2)?);
    let b3 = Var::concat(&[y1.mul(z2)?.sub(z1.mul(y2)?)?, z1.mul(x2)?.sub(x1.mul(z2)?)?, x1.mul(y2)?.sub(y1.mul(x2)?)?], ax)?;
    let col = |v: Var<'t>| v.reshape(&with(&lead, &[3, 1]));
    Var::concat(&[col(b1)?, col(b2)?, col(b3)?], ax + 1)
}

/// `[..., 10] -> [..., V, 3]`.
pub fn shape_mesh<'t>(template: &BodyTemplate, beta: Var<'t>) -> Result<Var<'t>> {
    let lead = lead(&beta.shape(), &[NUM_BETAS], "shape_mesh")?;
    let v = template.vertex_count();
    let tape = beta.tape();
    let basis = tape.constant(template.shape_basis.reshape([NUM_BETAS, v * 3])?);
    let flat_lead = lead.iter().product::<usize>();
    let offsets = beta.reshape(&[flat_lead, NUM_BETAS])?.matmul(basis)?;
    offsets.reshape(&with(&lead, &[v, 3]))?.add(tape.constant(template.vertices.clone()))
}

/// `J = W M` for `M: [..., V, 3]`, giving `[..., 24, 3]`.
pub fn regress_joints<'t>(mesh: Var<'t>, regressor: &Tensor) -> Result<Var<'t>> {
    let shape = mesh.shape();
    let v = regressor.shape()[1];
    let lead = lead(&shape, &[v, 3], "regress_joints")?;
    let w = mesh.tape().constant(regressor.clone());
    if lead.is_empty() {
        return w.matmul(mesh);
    }
    // (W M)^T = M^T W^T per batch, with W shared
    mesh.matmul_ex(w, true, true)?.transpose()
}

/// Forward kinematics from rest joints `[..., 24, 3]` and local rotations
/// `[..., 24, 3, 3]`. Returns world rotations `[..., 24, 3, 3]` and joint
/// positions `[..., 24, 3]`.
pub fn forward_kinematics<'t>(parents: &[Option<usize>], order: &[usize], rest: Var<'t>, rot: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let lead = lead(&rot.shape(), &[NUM_JOINTS, 3, 3], "forward_kinematics")?;
    if rest.shape() != with(&lead, &[NUM_JOINTS, 3]) {
        return Err(Error::shape("forward_kinematics", &rest.shape(), &rot.shape()));
    }
    let ax = lead.len();
    let mut glob: Vec<Option<Var<'t>>> = vec![None; NUM_JOINTS];
    let mut pos: Vec<Option<Var<'t>>> = vec![None; NUM_JOINTS];
    for &j in order {
        let r = rot.index_select(ax, &[j])?;
        let p_rest = rest.index_select(ax, &[j])?;
        match parents[j] {
            None => {
                glob[j] = Some(r);
                pos[j] = Some(p_rest);
            }
            Some(p) => {
                let gp = glob[p].expect("parent visited first");
                let offset = p_rest.sub(rest.index_select(ax, &[p])?)?.reshape(&with(&lead, &[1, 3, 1]))?;
                let moved = gp.matmul(offset)?.reshape(&with(&lead, &[1, 3]))?;
                glob[j] = Some(gp.matmul(r)?);
                pos[j] = Some(pos[p].expect("parent visited first").add(moved)?);
            }
        }
    }
    let collect = |v: Vec<Option<Var<'t>>>| -> Vec<Var<'t>> { v.into_iter().map(|x| x.expect("every joint visited")).collect() };
    Ok((Var::concat(&collect(glob), ax)?, Var::concat(&collect(pos), ax)?))
}

/// Linear blend skinning of `shaped: [..., V, 3]` with world rotations and
/// positions from [`forward_kinematics`] and rest joints `[..., 24, 3]`.
pub fn skin_mesh<'t>(shaped: Var<'t>, glob: Var<'t>, pos: Var<'t>, rest: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let v = weights.shape()[0];
    let lead = lead(&shaped.shape(), &[v, 3], "skin_mesh")?;
    // rest-relative transform of each joint: x -> G (x - rest) + pos
    let col = with(&lead, &[NUM_JOINTS, 3, 1]);
    let t = pos.reshape(&col)?.sub(glob.matmul(rest.reshape(&col)?)?)?;
    let a = Var::concat(&[glob, t], lead.len() + 2)?.reshape(&with(&lead, &[NUM_JOINTS, 12]))?;
    let w = shaped.tape().constant(weights.clone());
    let blended = if lead.is_empty() { w.matmul(a)? } else { a.matmul_ex(w, true, true)?.transpose()? };
    let blended = blended.reshape(&with(&lead, &[v, 3, 4]))?;
    let ax = lead.len() + 2;
    let rot = blended.slice(ax, 0, 3)?;
    let trans = blended.slice(ax, 3, 1)?;
    rot.matmul(shaped.reshape(&with(&lead, &[v, 3, 1]))?)?.add(trans)?.reshape(&with(&lead, &[v, 3]))
}

/// Differentiable outputs of the full body pipeline.
#[derive(Debug, Clone, Copy)]
pub struct BodyVars<'t> {
    pub vertices: Var<'t>,
    pub joints: Var<'t>,
}

/// `θ: [..., 24, 6]`, `β: [..., 10]` -> posed mesh and regressed joints.
pub fn body_forward<'t>(template: &BodyTemplate, theta: Var<'t>, beta: Var<'t>) -> Result<BodyVars<'t>> {
    let lead_t = lead(&theta.shape(), &[NUM_JOINTS, 6], "body_forward")?;
    let lead_b = lead(&beta.shape(), &[NUM_BETAS], "body_forward")?;
    if lead_t != lead_b {
        return Err(Error::shape("body_forward", &theta.shape(), &beta.shape()));
    }
    let shaped = shape_mesh(template, beta)?;
    let rest = regress_joints(shaped, &template.joint_regressor)?;
    let rot = rot6d_to_rotmat(theta)?;
    let (glob, pos) = forward_kinematics(&template.parents, template.order(), rest, rot)?;
    let vertices = skin_mesh(shaped, glob, pos, rest, &template.weights)?;
    let joints = regress_joints(vertices, &template.joint_regressor)?;
    Ok(BodyVars { vertices, joints })
}
