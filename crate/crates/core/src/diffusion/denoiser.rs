use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{ddim_step, ddim_timesteps, eps_from_x0, NoiseSchedule};
use crate::body::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamStore, TransformerBlock};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub skips: bool,
    /// Adds a sinusoidal frame-index encoding to every token.
    pub positional: bool,
    /// Places condition tokens after the trajectory tokens along the
    /// sequence axis instead of fusing them per frame.
    pub sequence_concat: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { layers: 12, heads: 8, width: 128, skips: true, positional: true, sequence_concat: false }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || !self.layers.is_multiple_of(2) {
            return Err(Error::invalid("DenoiserConfig", format!("layers must be even and positive, got {}", self.layers)));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) || !self.width.is_multiple_of(2) {
            return Err(Error::invalid(
                "DenoiserConfig",
                format!("width {} must be even and divisible by {} heads", self.width, self.heads),
            ));
        }
        Ok(())
    }
}

/// `[sin(x ω_k), cos(x ω_k)]` with `ω_k = 10000^(-k / (D/2))`.
pub fn sinusoidal(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (x * w).sin();
        out[half + k] = (x * w).cos();
    }
    out
}

/// Transformer over frames predicting the clean root trajectory.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub cond: Linear,
    pub embed: Linear,
    pub fuse: Linear,
    pub blocks: Vec<TransformerBlock>,
    /// One per block in the second half, pairing block `i` with `L - 1 - i`.
    pub skip_fuse: Vec<Linear>,
    pub out_norm: LayerNorm,
    pub out: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let fuse_in = if config.sequence_concat { 2 * d } else { 3 * d };
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, &format!("denoiser.block{i}"), d, config.heads, 2 * d, rng))
            .collect::<Result<Vec<_>>>()?;
        let skip_fuse = if config.skips {
            (config.layers / 2..config.layers).map(|i| Linear::new(store, &format!("denoiser.skip{i}"), 2 * d, d, rng)).collect()
        } else {
            vec![]
        };
        Ok(Denoiser {
            cond: Linear::new(store, "denoiser.cond", NUM_JOINTS * 3, d, rng),
            embed: Linear::new(store, "denoiser.embed", 3, d, rng),
            fuse: Linear::new(store, "denoiser.fuse", fuse_in, d, rng),
            blocks,
            skip_fuse,
            out_norm: LayerNorm::new(store, "denoiser.out_norm", d),
            out: Linear::new(store, "denoiser.out", d, 3, rng),
            config,
        })
    }

    /// Root-relative joints `[..., N, 24, 3]` to per-frame conditions
    /// `[..., N, D]`.
    pub fn encode_condition<'t>(&self, p: &Bound<'t>, joints: Var<'t>) -> Result<Var<'t>> {
        let shape = joints.shape();
        if shape.len() < 3 || shape[shape.len() - 2..] != [NUM_JOINTS, 3] {
            return Err(Error::shape("encode_condition", &[0, NUM_JOINTS, 3], &shape));
        }
        let mut flat = shape[..shape.len() - 2].to_vec();
        flat.push(NUM_JOINTS * 3);
        self.cond.forward(p, joints.reshape(&flat)?)
    }

    /// `r_t: [B, N, 3]` (or `[N, 3]`), one timestep per batch row,
    /// `c: [B, N, D]` -> `x̂0` with the shape of `r_t`.
    pub fn forward<'t>(&self, p: &Bound<'t>, r_t: Var<'t>, t: &[usize], c: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_traced(p, r_t, t, c)?.0)
    }

    /// [`Denoiser::forward`] plus every block's attention weights.
    pub fn forward_traced<'t>(&self, p: &Bound<'t>, r_t: Var<'t>, t: &[usize], c: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let shape = r_t.shape();
        let unbatched = shape.len() == 2;
        let (r_t, c) = if unbatched {
            let n = shape[0];
            (r_t.reshape(&[1, n, 3])?, c.reshape(&[1, n, self.config.width])?)
        } else {
            (r_t, c)
        };
        let rs = r_t.shape();
        let (b, n, d) = (rs[0], rs[1], self.config.width);
        if rs.len() != 3 || rs[2] != 3 || c.shape() != [b, n, d] || t.len() != b {
            return Err(Error::shape("denoiser", &rs, &c.shape()));
        }
        let tape = r_t.tape();
        let temb: Vec<f64> = t.iter().flat_map(|&s| sinusoidal(s as f64, d).repeat(n)).collect();
        let temb = tape.constant(Tensor::new(vec![b, n, d], temb)?);
        let x = self.embed.forward(p, r_t)?;
        let pos = if self.config.positional {
            Some(tape.constant(Tensor::new(vec![n, d], (0..n).flat_map(|i| sinusoidal(i as f64, d)).collect())?))
        } else {
            None
        };
        let with_pos = |v: Var<'t>| -> Result<Var<'t>> { pos.map_or(Ok(v), |e| v.add(e)) };
        let mut h = if self.config.sequence_concat {
            let traj = with_pos(self.fuse.forward(p, Var::concat(&[x, temb], 2)?)?)?;
            Var::concat(&[traj, with_pos(c)?], 1)?
        } else {
            with_pos(self.fuse.forward(p, Var::concat(&[x, c, temb], 2)?)?)?
        };
        let half = self.config.layers / 2;
        let mut saved = vec![];
        let mut weights = vec![];
        for (i, block) in self.blocks.iter().enumerate() {
            if self.config.skips && i >= half {
                let partner: Var<'t> = saved[self.config.layers - 1 - i];
                h = self.skip_fuse[i - half].forward(p, Var::concat(&[h, partner], 2)?)?;
            }
            let (attn, w) = block.attn.forward_with_weights(p, block.ln1.forward(p, h)?)?;
            let x = h.add(attn)?;
            h = x.add(block.ffn.forward(p, block.ln2.forward(p, x)?)?)?;
            weights.push(w);
            if i < half {
                saved.push(h);
            }
        }
        if self.config.sequence_concat {
            h = h.slice(1, 0, n)?;
        }
        let out = self.out.forward(p, self.out_norm.forward(p, h)?)?;
        Ok((if unbatched { out.reshape(&[n, 3])? } else { out }, weights))
    }

    /// Clean-trajectory prediction without gradients: `joints` is
    /// `[B, N, 24, 3]`, `r_t` `[B, N, 3]`.
    pub fn predict(&self, store: &ParamStore, r_t: &Tensor, t: &[usize], joints: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let c = self.encode_condition(&p, tape.constant(joints.clone()))?;
        Ok(self.forward(&p, tape.constant(r_t.clone()), t, c)?.value())
    }
}

/// Deterministic DDIM sampling (`σ = 0`) from seeded Gaussian noise of the
/// given shape. `denoise(r_t, t)` returns the clean-signal estimate.
pub fn sample<F>(mut denoise: F, shape: &[usize], steps: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = ddim_timesteps(schedule.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let mut r = Tensor::new(shape.to_vec(), (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    for (k, &t) in ts.iter().enumerate() {
        let x0 = denoise(&r, t)?;
        if x0.shape() != shape {
            return Err(Error::shape("sample", shape, x0.shape()));
        }
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        if t_prev == 0 {
            return Ok(x0);
        }
        let eps = eps_from_x0(&r, t, &x0, schedule)?;
        r = ddim_step(&r, t, t_prev, &eps, schedule, 0.0, None)?;
    }
    unreachable!("the last timestep always steps to 0")
}

/// Samples root trajectories `[B, N, 3]` for root-relative joints
/// `[B, N, 24, 3]`.
pub fn sample_trajectories(
    model: &Denoiser,
    store: &ParamStore,
    joints: &Tensor,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let js = joints.shape();
    if js.len() != 4 || js[2..] != [NUM_JOINTS, 3] {
        return Err(Error::shape("sample_trajectories", &[0, 0, NUM_JOINTS, 3], js));
    }
    let (b, n) = (js[0], js[1]);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let c = model.encode_condition(&p, tape.constant(joints.clone()))?.value();
    sample(
        |r, t| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            Ok(model.forward(&p, tape.constant(r.clone()), &vec![t; b], tape.constant(c.clone()))?.value())
        },
        &[b, n, 3],
        steps,
        schedule,
        seed,
    )
}
