use serde::{Deserialize, Serialize};

use crate::body::BodyParams;
use crate::camera::PartMask;
use crate::error::{Error, Result};
use crate::hierarchy::Level;
use crate::tensor::Tensor;

/// Network input: per level, attention logits `[H, W, J_x]` and a feature
/// volume `[H, W, C]`. Indexed by [`Level::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScene {
    pub att: [Tensor; 4],
    pub feat: [Tensor; 4],
}

impl FeatureScene {
    pub fn new(att: [Tensor; 4], feat: [Tensor; 4]) -> Result<Self> {
        let s = FeatureScene { att, feat };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fs = self.feat[0].shape();
        if fs.len() != 3 || fs.contains(&0) {
            return Err(Error::invalid("FeatureScene", format!("features must be [H, W, C], got {fs:?}")));
        }
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        for level in Level::ALL {
            let i = level.index();
            if self.feat[i].shape() != [h, w, c] {
                return Err(Error::shape("FeatureScene", &[h, w, c], self.feat[i].shape()));
            }
            if self.att[i].shape() != [h, w, level.part_count()] {
                return Err(Error::shape("FeatureScene", &[h, w, level.part_count()], self.att[i].shape()));
            }
            if !self.feat[i].is_finite() || !self.att[i].is_finite() {
                return Err(Error::invalid("FeatureScene", format!("non-finite values at level {}", level.name())));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.feat[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.feat[0].shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.feat[0].shape()[2]
    }
}

/// Supervision for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub params: BodyParams,
    /// `[24, 3]`.
    pub joints3d: Tensor,
    /// `[24, 2]`.
    pub joints2d: Tensor,
    /// Indexed by [`Level::index`].
    pub masks: [PartMask; 4],
}

/// Scenes stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBatch {
    /// `[B, H, W, J_x]` per level.
    pub att: [Tensor; 4],
    /// `[B, H, W, C]` per level.
    pub feat: [Tensor; 4],
}

impl SceneBatch {
    pub fn new(scenes: &[&FeatureScene]) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::invalid("SceneBatch", "no scenes"))?;
        for s in scenes {
            s.validate()?;
            if s.feat[0].shape() != first.feat[0].shape() {
                return Err(Error::shape("SceneBatch", first.feat[0].shape(), s.feat[0].shape()));
            }
        }
        let stack = |pick: &dyn Fn(&FeatureScene) -> &Tensor| -> Result<Tensor> {
            let mut shape = vec![scenes.len()];
            shape.extend_from_slice(pick(first).shape());
            Tensor::new(shape, scenes.iter().flat_map(|s| pick(s).data().iter().copied()).collect())
        };
        let mut att = Vec::with_capacity(4);
        let mut feat = Vec::with_capacity(4);
        for i in 0..4 {
            att.push(stack(&|s| &s.att[i])?);
            feat.push(stack(&|s| &s.feat[i])?);
        }
        Ok(SceneBatch { att: att.try_into().expect("four levels"), feat: feat.try_into().expect("four levels") })
    }

    pub fn len(&self) -> usize {
        self.feat[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
