//! Procedural desk-scale template: rings of vertices around every joint and
//! along every bone of a T-posed skeleton.

use std::f64::consts::PI;

use super::{BodyTemplate, TemplateFile, NUM_BETAS, NUM_JOINTS, SMPL_PARENTS};
use crate::error::{Error, Result};

const RING: usize = 8;

/// Rest joint positions in metres, y up, body facing +z, left at +x.
const REST_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.95, 0.0],
    [0.09, 0.87, 0.0],
    [-0.09, 0.87, 0.0],
    [0.0, 1.05, 0.0],
    [0.10, 0.50, 0.0],
    [-0.10, 0.50, 0.0],
    [0.0, 1.18, 0.0],
    [0.10, 0.09, 0.0],
    [-0.10, 0.09, 0.0],
    [0.0, 1.30, 0.0],
    [0.10, 0.02, 0.12],
    [-0.10, 0.02, 0.12],
    [0.0, 1.50, 0.0],
    [0.07, 1.42, 0.0],
    [-0.07, 1.42, 0.0],
    [0.0, 1.62, 0.02],
    [0.18, 1.42, 0.0],
    [-0.18, 1.42, 0.0],
    [0.45, 1.42, 0.0],
    [-0.45, 1.42, 0.0],
    [0.70, 1.42, 0.0],
    [-0.70, 1.42, 0.0],
    [0.78, 1.42, 0.0],
    [-0.78, 1.42, 0.0],
];

const RADIUS: [f64; NUM_JOINTS] = [
    0.13, 0.08, 0.08, 0.13, 0.06, 0.06, 0.13, 0.045, 0.045, 0.13, 0.04, 0.04, 0.05, 0.06, 0.06, 0.09, 0.055, 0.055, 0.045, 0.045, 0.035,
    0.035, 0.035, 0.035,
];

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

struct Ring {
    center: [f64; 3],
    axis: [f64; 3],
    radius: f64,
    weights: Vec<(usize, f64)>,
    regress_joint: Option<usize>,
}

fn bone_axis(j: usize) -> [f64; 3] {
    if SMPL_PARENTS[j] < 0 {
        [0.0, 1.0, 0.0]
    } else {
        normalize(sub(REST_JOINTS[j], REST_JOINTS[SMPL_PARENTS[j] as usize]))
    }
}

pub(super) fn build(vertex_count: usize) -> Result<BodyTemplate> {
    if !vertex_count.is_multiple_of(RING) || vertex_count < RING * NUM_JOINTS {
        return Err(Error::invalid(
            "BodyTemplate::procedural",
            format!("vertex count must be a multiple of {RING} and at least {}", RING * NUM_JOINTS),
        ));
    }
    let mut rings = Vec::with_capacity(vertex_count / RING);
    for j in 0..NUM_JOINTS {
        let weights = match SMPL_PARENTS[j] {
            -1 => vec![(j, 1.0)],
            p => vec![(p as usize, 0.5), (j, 0.5)],
        };
        rings.push(Ring { center: REST_JOINTS[j], axis: bone_axis(j), radius: RADIUS[j], weights, regress_joint: Some(j) });
    }
    // spread the remaining rings over the 23 bones, round robin
    let extra = vertex_count / RING - NUM_JOINTS;
    let mut per_bone = [0usize; NUM_JOINTS];
    for i in 0..extra {
        per_bone[1 + i % (NUM_JOINTS - 1)] += 1;
    }
    for j in 1..NUM_JOINTS {
        let p = SMPL_PARENTS[j] as usize;
        let n = per_bone[j];
        for k in 0..n {
            let f = (k + 1) as f64 / (n + 1) as f64;
            let c = (0..3).map(|a| REST_JOINTS[p][a] + f * (REST_JOINTS[j][a] - REST_JOINTS[p][a])).collect::<Vec<_>>();
            rings.push(Ring {
                center: [c[0], c[1], c[2]],
                axis: bone_axis(j),
                radius: RADIUS[p] + f * (RADIUS[j] - RADIUS[p]),
                weights: vec![(p, 1.0)],
                regress_joint: None,
            });
        }
    }

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut radial = Vec::with_capacity(vertex_count);
    let mut owner = Vec::with_capacity(vertex_count);
    let mut weights = Vec::with_capacity(vertex_count);
    let mut regressor = vec![vec![0.0; vertex_count]; NUM_JOINTS];
    for ring in &rings {
        let reference = if ring.axis[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let u = normalize(cross(ring.axis, reference));
        let w = cross(ring.axis, u);
        for i in 0..RING {
            let phi = 2.0 * PI * i as f64 / RING as f64;
            let dir = [0, 1, 2].map(|a| phi.cos() * u[a] + phi.sin() * w[a]);
            let idx = vertices.len();
            vertices.push([0, 1, 2].map(|a| ring.center[a] + ring.radius * dir[a]));
            radial.push(dir.map(|d| ring.radius * d));
            let mut row = vec![0.0; NUM_JOINTS];
            for &(j, wt) in &ring.weights {
                row[j] += wt;
            }
            owner.push(ring.weights.last().map(|w| w.0).unwrap_or(0));
            weights.push(row);
            if let Some(j) = ring.regress_joint {
                regressor[j][idx] = 1.0 / RING as f64;
            }
        }
    }

    let shape_basis = (0..NUM_BETAS)
        .map(|k| vertices.iter().zip(&radial).zip(&owner).map(|((v, r), &j)| shape_component(k, *v, *r, j)).collect())
        .collect();

    let rest_offsets = (0..NUM_JOINTS)
        .map(|j| match SMPL_PARENTS[j] {
            -1 => REST_JOINTS[j],
            p => sub(REST_JOINTS[j], REST_JOINTS[p as usize]),
        })
        .collect();

    BodyTemplate::from_file(TemplateFile {
        vertices,
        shape_basis,
        weights,
        parents: SMPL_PARENTS.to_vec(),
        rest_offsets,
        joint_regressor: regressor,
    })
}

fn is_torso(j: usize) -> bool {
    matches!(j, 0 | 3 | 6 | 9)
}

/// Smooth per-vertex displacement fields, a few centimetres at unit β.
fn shape_component(k: usize, v: [f64; 3], r: [f64; 3], joint: usize) -> [f64; 3] {
    match k {
        0 => [0.0, 0.06 * v[1], 0.0],
        1 => r.map(|x| 0.3 * x),
        2 => [0.05 * v[0], 0.0, 0.0],
        3 => {
            if is_torso(joint) {
                r.map(|x| 0.4 * x)
            } else {
                [0.0; 3]
            }
        }
        4 => {
            let reach = (v[0].abs() - 0.18).max(0.0);
            [0.08 * reach * v[0].signum(), 0.0, 0.0]
        }
        5 => [0.0, 0.05 * (v[1] - 0.87).min(0.0), 0.0],
        _ => {
            let s = (k - 5) as f64;
            [0.01 * (3.0 * s * v[1] + s).sin(), 0.01 * (2.0 * s * v[0] + 0.5 * s).cos(), 0.01 * (s * (v[0] + v[1])).sin()]
        }
    }
}
