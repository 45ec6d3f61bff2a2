//! Diffusion prior over global root trajectories.

mod denoiser;
mod motion;
mod schedule;
mod train;

pub use denoiser::{sample, sample_trajectories, sinusoidal, Denoiser, DenoiserConfig};
pub use motion::MotionSequence;
pub use schedule::{build_schedule, ddim_step, ddim_timesteps, ddpm_step, eps_from_x0, predict_x0, q_sample, NoiseSchedule, ScheduleKind};
pub use train::{
    foot_contacts, loss_csv, traj_loss, write_loss_csv, FootTarget, LossRecord, TrajDataset, TrajLoss, TrajTrainConfig, TrajTrainer,
    DEFAULT_V_THRESH, FEET,
};
