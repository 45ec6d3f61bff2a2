//! Deterministic synthetic data: walking sequences with exact foot
//! contacts, and rendered feature scenes with part masks.

pub mod dataset;
mod gait;
mod scene;

pub use dataset::{load_motion, load_scenes, save_motion, save_scenes, SCHEMA_VERSION};
pub use gait::{gen_locomotion, GaitSpec, Turn, STANCE_FRACTION, SWING_HEIGHT};
pub use scene::{
    apply_occluder, gen_feature_scene, hinge_params, hinge_theta, OccluderMode, Rect, SceneRecord, SceneSpec, FOREGROUND_CHANNEL,
    LATENT_DIM, LIMB_JITTER, MIN_CHANNELS, POSE_CHANNEL, POSE_CHANNELS,
};
