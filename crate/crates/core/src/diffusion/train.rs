use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::denoiser::{sample_trajectories, Denoiser, DenoiserConfig};
use super::motion::MotionSequence;
use super::schedule::{build_schedule, q_sample, NoiseSchedule, ScheduleKind};
use crate::body::{LEFT_FOOT, NUM_JOINTS, RIGHT_FOOT};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Checkpoint, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const FEET: [usize; 2] = [LEFT_FOOT, RIGHT_FOOT];
pub const DEFAULT_V_THRESH: f64 = 0.005;

/// Contact flags from foot heights `[N, F]` (row-major): row `i` is set where
/// `|y[i+1] - y[i]| < v_thresh`. Returns `(N-1) x F` flags.
pub fn foot_contacts(heights: &[f64], feet: usize, v_thresh: f64) -> Result<Vec<Vec<bool>>> {
    if feet == 0 || !heights.len().is_multiple_of(feet) || heights.len() < 2 * feet {
        return Err(Error::invalid("foot_contacts", format!("{} heights do not form at least two frames of {feet} feet", heights.len())));
    }
    if !(v_thresh > 0.0) {
        return Err(Error::invalid("foot_contacts", format!("v_thresh must be positive, got {v_thresh}")));
    }
    Ok(heights.windows(2 * feet).step_by(feet).map(|w| (0..feet).map(|j| (w[feet + j] - w[j]).abs() < v_thresh).collect()).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct TrajLoss<'t> {
    pub total: Var<'t>,
    pub simple: Var<'t>,
    pub foot: Var<'t>,
}

/// Huber reconstruction plus contact-gated sliding of the positions
/// `x̂0 + offsets`.
///
/// Shapes: `x0_hat`, `r0` `[B, N, 3]`; `offsets` `[B, N, F, 3]`;
/// `contacts` `[B, N-1, F]` in {0, 1}.
pub fn traj_loss<'t>(
    x0_hat: Var<'t>,
    r0: Var<'t>,
    offsets: Var<'t>,
    contacts: Var<'t>,
    lambda_foot: f64,
    delta: f64,
) -> Result<TrajLoss<'t>> {
    let s = x0_hat.shape();
    let os = offsets.shape();
    if s.len() != 3 || s[2] != 3 || s[1] < 2 || r0.shape() != s {
        return Err(Error::shape("traj_loss", &s, &r0.shape()));
    }
    let (b, n, f) = (s[0], s[1], os.get(2).copied().unwrap_or(0));
    if os != [b, n, f, 3] || contacts.shape() != [b, n - 1, f] || f == 0 {
        return Err(Error::shape("traj_loss", &os, &contacts.shape()));
    }
    let simple = x0_hat.sub(r0)?.huber(delta)?;
    let pos = offsets.add(x0_hat.reshape(&[b, n, 1, 3])?)?;
    let slide = pos.slice(1, 1, n - 1)?.sub(pos.slice(1, 0, n - 1)?)?.norm_last()?;
    let foot = slide.mul(contacts)?.sum().scale(1.0 / ((n - 1) * f * b) as f64);
    Ok(TrajLoss { total: simple.add(foot.scale(lambda_foot))?, simple, foot })
}

/// Positions the foot term slides: the derived foot joints or the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FootTarget {
    Feet,
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajTrainConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub lambda_foot: f64,
    pub huber_delta: f64,
    pub v_thresh: f64,
    pub foot_target: FootTarget,
    /// When false the condition is zeroed throughout.
    pub conditioned: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrajTrainConfig {
    fn default() -> Self {
        TrajTrainConfig {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleKind::Linear,
            diffusion_steps: 1000,
            lr: 3e-5,
            batch: 256,
            lambda_foot: 0.1,
            huber_delta: 1.0,
            v_thresh: DEFAULT_V_THRESH,
            foot_target: FootTarget::Feet,
            conditioned: true,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrajTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.batch == 0 || !(self.lr >= 0.0) || !(self.huber_delta > 0.0) || !(self.lambda_foot >= 0.0) {
            return Err(Error::invalid("TrajTrainConfig", "batch, lr, huber_delta or lambda_foot out of range"));
        }
        Ok(())
    }
}

/// Equal-length sequences flattened for batching, with detected contacts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajDataset {
    pub frames: usize,
    pub len: usize,
    r: Vec<f64>,
    p: Vec<f64>,
    offsets: Vec<f64>,
    contacts: Vec<f64>,
}

impl TrajDataset {
    pub fn new(seqs: &[MotionSequence], target: FootTarget, v_thresh: f64) -> Result<Self> {
        let frames = seqs.first().map(|s| s.frames()).ok_or_else(|| Error::invalid("TrajDataset", "empty dataset"))?;
        let mut d = TrajDataset { frames, len: seqs.len(), r: vec![], p: vec![], offsets: vec![], contacts: vec![] };
        for (i, s) in seqs.iter().enumerate() {
            s.validate()?;
            if s.frames() != frames {
                return Err(Error::invalid("TrajDataset", format!("sequence {i} has {} frames, expected {frames}", s.frames())));
            }
            d.r.extend_from_slice(s.r.data());
            d.p.extend_from_slice(s.p.data());
            for f in 0..frames {
                for &j in &FEET {
                    match target {
                        FootTarget::Feet => d.offsets.extend((0..3).map(|k| s.p.at(&[f, j, k]))),
                        FootTarget::Root => d.offsets.extend([0.0; 3]),
                    }
                }
            }
            let flags = foot_contacts(&s.joint_heights(&FEET), FEET.len(), v_thresh)?;
            d.contacts.extend(flags.iter().flatten().map(|&c| if c { 1.0 } else { 0.0 }));
        }
        Ok(d)
    }

    fn gather(&self, src: &[f64], per: usize, idx: &[usize], shape: Vec<usize>) -> Tensor {
        let data = idx.iter().flat_map(|&i| src[i * per..(i + 1) * per].iter().copied()).collect();
        Tensor::new(shape, data).expect("gathered shape")
    }

    pub fn r(&self, idx: &[usize]) -> Tensor {
        self.gather(&self.r, self.frames * 3, idx, vec![idx.len(), self.frames, 3])
    }

    pub fn joints(&self, idx: &[usize]) -> Tensor {
        self.gather(&self.p, self.frames * NUM_JOINTS * 3, idx, vec![idx.len(), self.frames, NUM_JOINTS, 3])
    }

    pub fn offsets(&self, idx: &[usize]) -> Tensor {
        self.gather(&self.offsets, self.frames * FEET.len() * 3, idx, vec![idx.len(), self.frames, FEET.len(), 3])
    }

    pub fn contacts(&self, idx: &[usize]) -> Tensor {
        self.gather(&self.contacts, (self.frames - 1) * FEET.len(), idx, vec![idx.len(), self.frames - 1, FEET.len()])
    }

    /// Per-frame mean root trajectory, `[N, 3]`.
    pub fn mean_trajectory(&self) -> Tensor {
        let per = self.frames * 3;
        let mut out = vec![0.0; per];
        for c in self.r.chunks(per) {
            out.iter_mut().zip(c).for_each(|(o, x)| *o += x / self.len as f64);
        }
        Tensor::new(vec![self.frames, 3], out).expect("mean shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub simple: f64,
    pub foot: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,total,simple,foot\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.total, r.simple, r.foot);
    }
    out
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, loss_csv(records)).map_err(|e| Error::io(path, e))
}

const CHECKPOINT_KIND: &str = "traj_denoiser";

pub struct TrajTrainer {
    pub config: TrajTrainConfig,
    pub model: Denoiser,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub curve: Vec<LossRecord>,
    adam: Adam,
    step: usize,
}

impl TrajTrainer {
    pub fn new(config: TrajTrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Denoiser::new(config.denoiser.clone(), &mut store, &mut rng)?;
        let adam = Adam::new(AdamConfig { lr: config.lr, beta1: 0.0, clip_norm: config.clip_norm, ..AdamConfig::default() }, &store);
        Ok(TrajTrainer {
            schedule: build_schedule(config.diffusion_steps, config.schedule)?,
            config,
            model,
            store,
            curve: vec![],
            adam,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64 + 1);
        rng
    }

    fn condition(&self, data: &TrajDataset, idx: &[usize]) -> Tensor {
        if self.config.conditioned {
            data.joints(idx)
        } else {
            Tensor::zeros([idx.len(), data.frames, NUM_JOINTS, 3])
        }
    }

    /// One optimizer update on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &TrajDataset) -> Result<LossRecord> {
        let mut rng = self.step_rng();
        let b = self.config.batch;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len)).collect();
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let eps: Vec<f64> = (0..b * data.frames * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r0 = data.r(&idx);
        let r_t = self.noised(&r0, &t, &eps)?;

        let tape = Tape::new();
        let p = self.store.bind(&tape, true);
        let c = self.model.encode_condition(&p, tape.constant(self.condition(data, &idx)))?;
        let x0 = self.model.forward(&p, tape.constant(r_t), &t, c)?;
        let loss = traj_loss(
            x0,
            tape.constant(r0),
            tape.constant(data.offsets(&idx)),
            tape.constant(data.contacts(&idx)),
            self.config.lambda_foot,
            self.config.huber_delta,
        )?;
        let record = LossRecord {
            step: self.step,
            total: loss.total.value().item(),
            simple: loss.simple.value().item(),
            foot: loss.foot.value().item(),
        };
        if !record.total.is_finite() {
            let per = data.frames * 3;
            let bad = x0.value().data().chunks(per).position(|c| c.iter().any(|x| !x.is_finite())).unwrap_or(0);
            return Err(Error::Divergence { step: self.step, batch: idx[bad], loss: record.total });
        }
        let grads = p.grads(&tape.backward(loss.total)?);
        self.adam.step(&mut self.store, &grads)?;
        self.step += 1;
        self.curve.push(record);
        Ok(record)
    }

    fn noised(&self, r0: &Tensor, t: &[usize], eps: &[f64]) -> Result<Tensor> {
        let per = r0.numel() / t.len();
        let mut out = Vec::with_capacity(r0.numel());
        for (k, &tk) in t.iter().enumerate() {
            let x = Tensor::new(vec![per], r0.data()[k * per..(k + 1) * per].to_vec())?;
            let e = Tensor::new(vec![per], eps[k * per..(k + 1) * per].to_vec())?;
            out.extend_from_slice(q_sample(&x, tk, &e, &self.schedule)?.data());
        }
        Tensor::new(r0.shape().to_vec(), out)
    }

    /// Runs `steps` updates, calling `on_step` after each.
    pub fn train(&mut self, data: &TrajDataset, steps: usize, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        for _ in 0..steps {
            let r = self.train_step(data)?;
            on_step(&r);
        }
        Ok(())
    }

    /// Mean `L_simple` over `idx` at fixed timesteps and noise, without
    /// updating weights. `joints` overrides the stored condition.
    pub fn simple_loss(&self, data: &TrajDataset, idx: &[usize], joints: &Tensor, t: &[usize], eps: &[f64]) -> Result<f64> {
        let r0 = data.r(idx);
        let r_t = self.noised(&r0, t, eps)?;
        let joints = if self.config.conditioned { joints.clone() } else { Tensor::zeros(joints.shape()) };
        let x0 = self.model.predict(&self.store, &r_t, t, &joints)?;
        let tape = Tape::new();
        Ok(tape.constant(x0).sub(tape.constant(r0))?.huber(self.config.huber_delta)?.value().item())
    }

    /// DDIM samples `[B, N, 3]` for joints `[B, N, 24, 3]`.
    pub fn sample(&self, joints: &Tensor, steps: usize, seed: u64) -> Result<Tensor> {
        let joints = if self.config.conditioned { joints.clone() } else { Tensor::zeros(joints.shape()) };
        sample_trajectories(&self.model, &self.store, &joints, steps, &self.schedule, seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "step": self.step,
            "curve": self.curve,
        }));
        ck.extend("model.", self.store.named());
        let (_, m, v) = self.adam.state(&self.store);
        ck.extend("adam.m.", m.into_iter().enumerate().map(|(i, t)| (i.to_string(), t)));
        ck.extend("adam.v.", v.into_iter().enumerate().map(|(i, t)| (i.to_string(), t)));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ck.meta["kind"])));
        }
        let config: TrajTrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut tr = TrajTrainer::new(config)?;
        tr.store.load_named(&ck.section("model."))?;
        tr.step = serde_json::from_value(ck.meta["step"].clone())?;
        tr.curve = serde_json::from_value(ck.meta["curve"].clone())?;
        let moments = |prefix: &str| -> Vec<Tensor> {
            let mut named = ck.section(prefix);
            named.sort_by_key(|(n, _)| n.parse::<usize>().unwrap_or(usize::MAX));
            named.into_iter().map(|(_, t)| t).collect()
        };
        tr.adam.restore(tr.step as u64, &moments("adam.m."), &moments("adam.v."))?;
        Ok(tr)
    }
}
