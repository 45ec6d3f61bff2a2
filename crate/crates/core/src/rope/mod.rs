//! Hierarchical part-attention regression of body parameters.

mod hagt;
mod loss;
mod model;
mod scene;
mod train;

pub use hagt::tokenize_hagt;
pub use loss::{attention_ce, rope_loss, LabelBatch, RopeLoss, RopeLossConfig};
pub use model::{init_rope, IclProjection, IslStage, RegressionHead, RopeConfig, RopeForward, RopeNet, RopeVariant, PART_LEVELS};
pub use scene::{FeatureScene, SceneBatch, SceneLabels};
pub use train::{
    argmax_mask, mask_iou, monotone_curve, rope_loss_csv, write_rope_loss_csv, OcclusionAugment, RopeDataset, RopeLossRecord,
    RopeTrainConfig, RopeTrainer,
};
