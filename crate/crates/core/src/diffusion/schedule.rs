use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid("ScheduleKind", format!("unknown schedule {other:?}; expected linear or cosine"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// `β_t` and `ᾱ_t` for `t = 1..=T`; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid("build_schedule", format!("need at least 2 steps, got {steps}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            (0..steps).map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64).collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, COSINE_MAX_BETA)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(op, format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| ca * x + cb * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `r_t = √ᾱ_t r0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(r0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t("q_sample", t)?;
    same_shape("q_sample", r0, eps)?;
    let ab = s.alpha_bar(t);
    Ok(combine(r0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Inverts [`q_sample`] for a given noise estimate.
pub fn predict_x0(r_t: &Tensor, t: usize, eps_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t("predict_x0", t)?;
    same_shape("predict_x0", r_t, eps_hat)?;
    let ab = s.alpha_bar(t);
    Ok(combine(r_t, 1.0 / ab.sqrt(), eps_hat, -(1.0 - ab).sqrt() / ab.sqrt()))
}

/// Noise implied by a clean-signal estimate.
pub fn eps_from_x0(r_t: &Tensor, t: usize, x0_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t("eps_from_x0", t)?;
    same_shape("eps_from_x0", r_t, x0_hat)?;
    let ab = s.alpha_bar(t);
    let k = 1.0 / (1.0 - ab).sqrt();
    Ok(combine(r_t, k, x0_hat, -ab.sqrt() * k))
}

/// One DDIM update from `t` to `t_prev`. `z` is required when `sigma > 0`.
pub fn ddim_step(
    r_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    sigma: f64,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    s.check_t("ddim_step", t)?;
    if t_prev >= t {
        return Err(Error::invalid("ddim_step", format!("t_prev {t_prev} must precede t {t}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("ddim_step", format!("sigma must be non-negative, got {sigma}")));
    }
    let ab_prev = s.alpha_bar(t_prev);
    let rest = 1.0 - ab_prev - sigma * sigma;
    if rest < 0.0 {
        return Err(Error::invalid("ddim_step", format!("1 - alpha_bar(t_prev) - sigma^2 = {rest} is negative")));
    }
    let x0 = predict_x0(r_t, t, eps_hat, s)?;
    let mut out = combine(&x0, ab_prev.sqrt(), eps_hat, rest.sqrt());
    if sigma > 0.0 {
        let z = z.ok_or_else(|| Error::invalid("ddim_step", "sigma > 0 needs a noise draw"))?;
        same_shape("ddim_step", r_t, z)?;
        out = combine(&out, 1.0, z, sigma);
    }
    Ok(out)
}

/// Ancestral step `t -> t - 1` with variance `β_t`.
pub fn ddpm_step(r_t: &Tensor, t: usize, eps_hat: &Tensor, s: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    s.check_t("ddpm_step", t)?;
    same_shape("ddpm_step", r_t, eps_hat)?;
    same_shape("ddpm_step", r_t, z)?;
    let (b, ab) = (s.beta(t), s.alpha_bar(t));
    let k = 1.0 / (1.0 - b).sqrt();
    let mean = combine(r_t, k, eps_hat, -k * b / (1.0 - ab).sqrt());
    Ok(combine(&mean, 1.0, z, b.sqrt()))
}

/// `steps` evenly spaced timesteps, descending, ending at `T`'s share:
/// `t_k = (k + 1) T / steps`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid("ddim_timesteps", format!("steps must lie in 1..={total}, got {steps}")));
    }
    Ok((0..steps).rev().map(|k| (k + 1) * total / steps).collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn two_step_linear_by_hand() {
        let s = build_schedule(2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[1e-4, 0.02]);
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert!((s.alpha_bar(2) - 0.9999 * 0.98).abs() < 1e-16);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn thousand_step_linear_ends_near_pure_noise() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        assert!(s.alpha_bar(1000) < 0.01);
        // running product in long double style: sum of logs
        let log: f64 = s.betas().iter().map(|b| (1.0 - b).ln()).sum();
        assert!((s.alpha_bar(1000) - log.exp()).abs() < 1e-15);
    }

    #[test]
    fn every_kind_is_strictly_decreasing_in_unit_range() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [2, 10, 1000] {
                let s = build_schedule(steps, kind).unwrap();
                assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
                let ab = s.alpha_bars();
                assert!(ab[0] < 1.0 && ab[0] > 0.0);
                assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0), "{kind} {steps}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        assert_eq!("cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
        assert!(build_schedule(1, ScheduleKind::Linear).is_err());
        let s = build_schedule(10, ScheduleKind::Linear).unwrap();
        let x = Tensor::zeros([4, 3]);
        assert!(q_sample(&x, 0, &x, &s).is_err());
        assert!(q_sample(&x, 11, &x, &s).is_err());
        assert!(ddpm_step(&x, 0, &x, &s, &x).is_err());
        assert!(ddim_step(&x, 5, 5, &x, &s, 0.0, None).is_err());
        // sigma^2 larger than the remaining variance
        assert!(ddim_step(&x, 2, 1, &x, &s, 0.5, Some(&x)).is_err());
        assert!(ddim_step(&x, 5, 1, &x, &s, 0.01, None).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r0 = randn(&mut rng, &[5, 3]);
        let zero = Tensor::zeros([5, 3]);
        let rt = q_sample(&r0, 300, &zero, &s).unwrap();
        assert!(rt.max_abs_diff(&r0.map(|x| x * s.alpha_bar(300).sqrt())) < 1e-15);
        let eps = randn(&mut rng, &[5, 3]);
        let bound = 0.01 * eps.data().iter().fold(0.0f64, |m, x| m.max(x.abs())) + 1e-4 * 3.0;
        assert!(q_sample(&r0, 1, &eps, &s).unwrap().max_abs_diff(&r0) < bound);
    }

    /// Chained single-step noising against the closed form, by moments.
    #[test]
    fn chained_steps_match_closed_form_in_distribution() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x0, t, trials) = (1.5, 50usize, 100_000);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..trials {
            let mut x: f64 = x0;
            for k in 1..=t {
                let b = s.beta(k);
                let z: f64 = StandardNormal.sample(&mut rng);
                x = (1.0 - b).sqrt() * x + b.sqrt() * z;
            }
            sum += x;
            sq += x * x;
        }
        let mean = sum / trials as f64;
        let var = sq / trials as f64 - mean * mean;
        let want_mean = s.alpha_bar(t).sqrt() * x0;
        let want_var = 1.0 - s.alpha_bar(t);
        assert!((mean - want_mean).abs() < 0.01 * want_mean.abs(), "{mean} vs {want_mean}");
        assert!((var - want_var).abs() < 0.01 * want_var.max(0.1), "{var} vs {want_var}");
    }

    #[test]
    fn predict_x0_examples() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r0 = randn(&mut rng, &[8, 3]);
        let eps = randn(&mut rng, &[8, 3]);
        for t in [1, 17, 500, 1000] {
            let rt = q_sample(&r0, t, &eps, &s).unwrap();
            assert!(predict_x0(&rt, t, &eps, &s).unwrap().max_abs_diff(&r0) < 1e-12 * (1.0 / s.alpha_bar(t).sqrt()).max(1.0));
            let zero = Tensor::zeros([8, 3]);
            let plain = predict_x0(&rt, t, &zero, &s).unwrap();
            assert!(plain.max_abs_diff(&rt.map(|x| x / s.alpha_bar(t).sqrt())) < 1e-12);
            // eps recovered from the true x0
            assert!(eps_from_x0(&rt, t, &r0, &s).unwrap().max_abs_diff(&eps) < 1e-9);
        }
        let rt = randn(&mut rng, &[8, 3]);
        let x0 = predict_x0(&rt, 250, &eps, &s).unwrap();
        assert!(q_sample(&x0, 250, &eps, &s).unwrap().max_abs_diff(&rt) < 1e-12);
    }

    #[test]
    fn ddim_step_examples() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r0 = randn(&mut rng, &[6, 3]);
        let eps = randn(&mut rng, &[6, 3]);
        let rt = q_sample(&r0, 700, &eps, &s).unwrap();
        let a = ddim_step(&rt, 700, 400, &eps, &s, 0.0, None).unwrap();
        assert_eq!(a, ddim_step(&rt, 700, 400, &eps, &s, 0.0, None).unwrap());
        assert!(a.max_abs_diff(&q_sample(&r0, 400, &eps, &s).unwrap()) < 1e-12);
        let end = ddim_step(&rt, 700, 0, &eps, &s, 0.0, None).unwrap();
        assert!(end.max_abs_diff(&predict_x0(&rt, 700, &eps, &s).unwrap()) < 1e-15);
    }

    #[test]
    fn ddpm_step_hand_case() {
        let s = build_schedule(2, ScheduleKind::Linear).unwrap();
        let (rt, e, z) = (Tensor::vector(vec![0.7]), Tensor::vector(vec![-0.2]), Tensor::vector(vec![0.3]));
        let got = ddpm_step(&rt, 2, &e, &s, &z).unwrap().item();
        let (b, ab) = (0.02f64, 0.9999 * 0.98);
        let want = (0.7 - b / (1.0 - ab as f64).sqrt() * -0.2) / (1.0 - b).sqrt() + b.sqrt() * 0.3;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn ddpm_without_noise_in_the_small_beta_limit_is_identity() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let rt = Tensor::vector(vec![0.4, -1.0]);
        let zero = Tensor::zeros([2]);
        let next = ddpm_step(&rt, 1, &zero, &s, &zero).unwrap();
        assert!(next.max_abs_diff(&rt) < 1e-4);
    }

    #[test]
    fn ddpm_and_ddim_agree_in_expectation() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let t = 100;
        let (rt, e) = (Tensor::vector(vec![0.8]), Tensor::vector(vec![0.5]));
        let sigma = s.beta(t).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut a, mut b) = (0.0, 0.0);
        let draws = 100_000;
        for _ in 0..draws {
            let z = Tensor::vector(vec![StandardNormal.sample(&mut rng)]);
            a += ddpm_step(&rt, t, &e, &s, &z).unwrap().item();
            let z = Tensor::vector(vec![StandardNormal.sample(&mut rng)]);
            b += ddim_step(&rt, t, t - 1, &e, &s, sigma, Some(&z)).unwrap().item();
        }
        assert!(((a - b) / draws as f64).abs() < 1e-2);
    }

    #[test]
    fn timesteps_are_even_and_descending() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        let ts = ddim_timesteps(1000, 100).unwrap();
        assert_eq!(ts.len(), 100);
        assert_eq!((ts[0], ts[99]), (1000, 10));
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 10));
        assert!(ddim_timesteps(10, 11).is_err());
    }
}
