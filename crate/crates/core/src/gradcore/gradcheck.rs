//! Central finite-difference checking of tape gradients.

use serde::Serialize;

use super::params::ParamStore;
use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries whose central-difference stencil straddles a kink; these are
    /// compared against the closer one-sided difference instead.
    pub nonsmooth: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds an output from parameters bound out of `params`
/// (via [`Tape::param`]). Non-scalar outputs are projected onto a fixed
/// random direction so that every output component is exercised.
///
/// When the central difference disagrees with the analytic value and the
/// forward and backward one-sided differences also disagree with each
/// other, the stencil contains a point of non-differentiability (a ReLU or
/// `|x|` crossing zero, say). Such an entry is scored against the closer
/// one-sided difference and counted in `nonsmooth`. A wrong rule on a
/// smooth function still fails, since all three differences then agree.
pub fn check_gradients<F>(
    name: &str,
    params: &ParamStore,
    cfg: GradCheckConfig,
    rng: &mut Rng,
    fault: Option<&str>,
    f: F,
) -> Result<GradCheckResult>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut projection: Option<Tensor> = None;
    let mut eval = |tape: &mut Tape, store: &ParamStore, rng: &mut Rng| -> Result<Var> {
        let out = f(tape, store)?;
        let value = tape.value(out)?;
        if value.shape().is_scalar() {
            return Ok(out);
        }
        let dir = projection
            .get_or_insert_with(|| Tensor::from_fn(value.shape(), |_| rng.uniform(-1.0, 1.0)))
            .clone();
        let dir = tape.constant(dir);
        let prod = tape.mul(out, dir)?;
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_fault(op);
    }
    let loss = eval(&mut tape, params, rng)?;
    let center = tape.value(loss)?.item()?;
    tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.load_grads(&tape)?;

    let mut probe = params.clone();
    let mut result = GradCheckResult {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        nonsmooth: 0,
        tolerance: cfg.tolerance,
        passed: true,
        worst: None,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for pname in names {
        let n = params.get(&pname).expect("listed").numel();
        let grad = analytic
            .get(&pname)
            .and_then(|t| t.grad.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let indices: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = params.get(&pname).expect("listed").data()[i];
            let mut loss_at = |v: f64, rng: &mut Rng| -> Result<f64> {
                probe.get_mut(&pname).expect("listed").data_mut()[i] = v;
                let mut t = Tape::new();
                let l = eval(&mut t, &probe, rng)?;
                t.value(l)?.item()
            };
            let plus = loss_at(orig + cfg.step, rng)?;
            let minus = loss_at(orig - cfg.step, rng)?;
            probe.get_mut(&pname).expect("listed").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let mut rel = relative_error(grad[i], numeric, cfg.floor);
            let mut abs = (grad[i] - numeric).abs();
            if rel >= cfg.tolerance {
                let fwd = (plus - center) / cfg.step;
                let bwd = (center - minus) / cfg.step;
                if relative_error(fwd, bwd, cfg.floor) >= cfg.tolerance {
                    result.nonsmooth += 1;
                    let side = if (grad[i] - fwd).abs() < (grad[i] - bwd).abs() {
                        fwd
                    } else {
                        bwd
                    };
                    rel = relative_error(grad[i], side, cfg.floor);
                    abs = (grad[i] - side).abs();
                }
            }
            result.checked += 1;
            result.max_abs_error = result.max_abs_error.max(abs);
            if rel > result.max_rel_error || result.worst.is_none() {
                result.max_rel_error = result.max_rel_error.max(rel);
                result.worst = Some((pname.clone(), i));
            }
        }
    }
    result.passed = result.max_rel_error < cfg.tolerance;
    Ok(result)
}
