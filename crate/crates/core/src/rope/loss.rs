use serde::{Deserialize, Serialize};

use super::model::RopeForward;
use super::scene::SceneLabels;
use crate::body::diff::body_forward;
use crate::body::{BodyTemplate, NUM_BETAS, NUM_JOINTS};
use crate::camera::project_var;
use crate::error::{Error, Result};
use crate::hierarchy::Level;
use crate::tensor::{Tensor, Var};

/// Supervision stacked along a batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    /// `[B, 24, 6]`.
    pub theta: Tensor,
    /// `[B, 10]`.
    pub beta: Tensor,
    /// `[B, 24, 3]`.
    pub joints3d: Tensor,
    /// `[B, 24, 2]`.
    pub joints2d: Tensor,
    /// One-hot pixel classes `[B, H, W, J_x + 1]` per level, background first.
    pub masks: [Tensor; 4],
}

impl LabelBatch {
    pub fn new(labels: &[&SceneLabels]) -> Result<Self> {
        let first = labels.first().ok_or_else(|| Error::invalid("LabelBatch", "no labels"))?;
        let stack = |pick: &dyn Fn(&SceneLabels) -> &Tensor| -> Result<Tensor> {
            let mut shape = vec![labels.len()];
            shape.extend_from_slice(pick(first).shape());
            let mut data = Vec::with_capacity(shape.iter().product());
            for l in labels {
                if pick(l).shape() != pick(first).shape() {
                    return Err(Error::shape("LabelBatch", pick(first).shape(), pick(l).shape()));
                }
                data.extend_from_slice(pick(l).data());
            }
            Tensor::new(shape, data)
        };
        let mut masks = Vec::with_capacity(4);
        for level in Level::ALL {
            let m0 = &first.masks[level.index()];
            let classes = level.part_count() + 1;
            let mut data = vec![0.0; labels.len() * m0.h * m0.w * classes];
            for (b, l) in labels.iter().enumerate() {
                let m = &l.masks[level.index()];
                if (m.h, m.w) != (m0.h, m0.w) || m.labels.len() != m.h * m.w {
                    return Err(Error::shape("LabelBatch mask", &[m0.h, m0.w], &[m.h, m.w]));
                }
                for (px, &c) in m.labels.iter().enumerate() {
                    if c as usize >= classes {
                        return Err(Error::invalid(
                            "LabelBatch",
                            format!("label {c} exceeds {} parts at level {}", classes - 1, level.name()),
                        ));
                    }
                    data[(b * m.h * m.w + px) * classes + c as usize] = 1.0;
                }
            }
            masks.push(Tensor::new(vec![labels.len(), m0.h, m0.w, classes], data)?);
        }
        Ok(LabelBatch {
            theta: stack(&|l| &l.params.theta)?,
            beta: stack(&|l| &l.params.beta)?,
            joints3d: stack(&|l| &l.joints3d)?,
            joints2d: stack(&|l| &l.joints2d)?,
            masks: masks.try_into().expect("four levels"),
        })
    }

    pub fn len(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RopeLossConfig {
    pub w_smpl: f64,
    pub w_3d: f64,
    pub w_2d: f64,
    pub w_att: f64,
    /// From this epoch on the attention term is reported but not optimized.
    pub att_drop_epoch: usize,
}

impl Default for RopeLossConfig {
    fn default() -> Self {
        RopeLossConfig { w_smpl: 1.0, w_3d: 1.0, w_2d: 1.0, w_att: 1.0, att_drop_epoch: 10 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RopeLoss<'t> {
    pub total: Var<'t>,
    pub smpl: Var<'t>,
    pub j3d: Var<'t>,
    pub j2d: Var<'t>,
    pub att: Var<'t>,
    pub att_active: bool,
}

/// Mean per-pixel cross-entropy between the class softmax of `logits`
/// `[..., K]` and one-hot `target` of the same shape.
pub fn attention_ce<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let s = logits.shape();
    if s != target.shape() {
        return Err(Error::shape("attention_ce", &s, target.shape()));
    }
    let pixels = (target.numel() / s[s.len() - 1]) as f64;
    let t = logits.tape().constant(target.clone());
    Ok(logits.log_softmax(s.len() - 1)?.mul(t)?.sum().scale(-1.0 / pixels))
}

/// Sum of squared entries of `a - b` divided by `per_row` times the batch.
fn mean_sq<'t>(a: Var<'t>, b: Var<'t>, per_row: usize) -> Result<Var<'t>> {
    let batch = a.shape()[0];
    Ok(a.sub(b)?.square().sum().scale(1.0 / (batch * per_row) as f64))
}

pub fn rope_loss<'t>(
    out: &RopeForward<'t>,
    labels: &LabelBatch,
    template: &BodyTemplate,
    epoch: usize,
    config: &RopeLossConfig,
) -> Result<RopeLoss<'t>> {
    let tape = out.theta.tape();
    let smpl = mean_sq(out.theta, tape.constant(labels.theta.clone()), NUM_JOINTS)?.add(mean_sq(
        out.beta,
        tape.constant(labels.beta.clone()),
        NUM_BETAS,
    )?)?;
    let joints = body_forward(template, out.theta, out.beta)?.joints;
    let j3d = mean_sq(joints, tape.constant(labels.joints3d.clone()), NUM_JOINTS)?;
    let j2d = mean_sq(project_var(joints, out.cam)?, tape.constant(labels.joints2d.clone()), NUM_JOINTS)?;
    let mut att = tape.constant(Tensor::scalar(0.0));
    for (level, logits) in &out.logits {
        att = att.add(attention_ce(*logits, &labels.masks[level.index()])?)?;
    }
    if !out.logits.is_empty() {
        att = att.scale(1.0 / out.logits.len() as f64);
    }
    let att_active = epoch < config.att_drop_epoch;
    let mut total = smpl.scale(config.w_smpl).add(j3d.scale(config.w_3d))?.add(j2d.scale(config.w_2d))?;
    if att_active {
        total = total.add(att.scale(config.w_att))?;
    }
    Ok(RopeLoss { total, smpl, j3d, j2d, att, att_active })
}
