use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Flat coordinate (across all inputs) where the max was attained.
    pub worst_coordinate: Option<usize>,
    /// Coordinates where the one-sided slopes disagree (a kink); excluded
    /// from `max_rel_error`.
    pub flagged: Vec<usize>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

const KINK_TOL: f64 = 1e-3;

/// Checks `f` (scalar-valued) at `point` with central differences of `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(point), step)
}

/// Multi-input form of [`grad_check`]; coordinates are numbered across the
/// inputs in order.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.var(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v).to_vec()).collect()
    };

    let eval = |pts: &[Tensor], coord: usize| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let y = f(&tape, &vars)?.value();
        if y.numel() != 1 {
            return Err(Error::invalid("grad_check", "function must be scalar-valued"));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check", index: coord });
        }
        Ok(y)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coordinate: None, flagged: vec![], coordinates: 0 };
    let mut flat = 0;
    for (which, p) in points.iter().enumerate() {
        for i in 0..p.numel() {
            let shifted = |delta: f64| -> Result<Vec<Tensor>> {
                let mut pts = points.to_vec();
                let mut data = p.to_vec();
                data[i] += delta;
                pts[which] = Tensor::new(p.shape().to_vec(), data)?;
                Ok(pts)
            };
            let fp = eval(&shifted(step)?, flat)?;
            let fm = eval(&shifted(-step)?, flat)?;
            let f0 = eval(points, flat)?;
            let central = (fp - fm) / (2.0 * step);
            let right = (fp - f0) / step;
            let left = (f0 - fm) / step;
            if (right - left).abs() > KINK_TOL * central.abs().max(1.0) {
                report.flagged.push(flat);
            } else {
                let err = (analytic[which][i] - central).abs() / central.abs().max(1.0);
                if report.worst_coordinate.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_coordinate = Some(flat);
                }
            }
            report.coordinates += 1;
            flat += 1;
        }
    }
    Ok(report)
}
