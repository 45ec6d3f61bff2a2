use serde::{Deserialize, Serialize};

use crate::body::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Global root path plus root-relative joints. The joints keep the world
/// orientation; only the root translation is removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub fps: f64,
    /// `[N, 3]` metres.
    pub r: Tensor,
    /// `[N, 24, 3]` metres, relative to `r`.
    pub p: Tensor,
    /// Per frame pair `(i, i + 1)`: left and right foot planted. `N - 1` rows.
    pub contacts: Option<Vec<[bool; 2]>>,
}

impl MotionSequence {
    pub fn new(fps: f64, r: Tensor, p: Tensor, contacts: Option<Vec<[bool; 2]>>) -> Result<Self> {
        let m = MotionSequence { fps, r, p, contacts };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.r.shape().first().copied().unwrap_or(0);
        if self.r.shape() != [n, 3] || n < 2 {
            return Err(Error::invalid("MotionSequence", format!("r must be [N >= 2, 3], got {:?}", self.r.shape())));
        }
        if self.p.shape() != [n, NUM_JOINTS, 3] {
            return Err(Error::shape("MotionSequence", &[n, NUM_JOINTS, 3], self.p.shape()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::invalid("MotionSequence", format!("fps must be positive, got {}", self.fps)));
        }
        if !self.r.is_finite() || !self.p.is_finite() {
            return Err(Error::invalid("MotionSequence", "non-finite coordinates"));
        }
        if let Some(c) = &self.contacts {
            if c.len() != n - 1 {
                return Err(Error::invalid("MotionSequence", format!("{} contact rows for {n} frames", c.len())));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.r.shape()[0]
    }

    /// `r + p`, `[N, 24, 3]`.
    pub fn world_joints(&self) -> Tensor {
        let n = self.frames();
        let r = self.r.data();
        let data = self
            .p
            .data()
            .chunks(3)
            .enumerate()
            .flat_map(|(k, q)| {
                let f = k / NUM_JOINTS;
                [q[0] + r[f * 3], q[1] + r[f * 3 + 1], q[2] + r[f * 3 + 2]]
            })
            .collect();
        Tensor::new(vec![n, NUM_JOINTS, 3], data).expect("validated shape")
    }

    /// World heights of the given joints, `[N, F]` row-major.
    pub fn joint_heights(&self, joints: &[usize]) -> Vec<f64> {
        let w = self.world_joints();
        (0..self.frames()).flat_map(|f| joints.iter().map(move |&j| (f, j))).map(|(f, j)| w.at(&[f, j, 1])).collect()
    }
}
