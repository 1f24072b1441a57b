//! Pixel-wise log-difference losses and total-loss assembly.

use crate::error::{shape_err, Error, Result};
use crate::gradcore::{Axis, Tape, Tensor, Var};
use crate::ordhead::ordinal_loss;
use crate::sid::RankTarget;

/// Added to absolute errors before the logarithm.
pub const LOG_OFFSET: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ordinal: f64,
    pub log: f64,
    pub grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ordinal: 1.0,
            log: 1.0,
            grad: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(ordinal: f64, log: f64, grad: f64) -> Result<Self> {
        let w = LossWeights { ordinal, log, grad };
        let all = [ordinal, log, grad];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || all.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative and not all zero, got {w:?}"
            )));
        }
        Ok(w)
    }
}

fn check_pair(tape: &Tape, op: &'static str, d: Var, gt: Var, mask: &Tensor) -> Result<()> {
    let (a, b) = (tape.value(d)?.shape(), tape.value(gt)?.shape());
    if a != b || a.channels() != 1 || mask.shape() != a {
        return Err(shape_err(
            op,
            format!("prediction {a}, target {b}, mask {}", mask.shape()),
        ));
    }
    if !mask.data().iter().any(|&m| m > 0.0) {
        return Err(Error::InvalidArgument(format!("{op}: mask has no valid pixel")));
    }
    Ok(())
}

/// `ln(|a - b| + 0.5)` elementwise.
fn log_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff)?;
    let shifted = tape.add_scalar(abs, LOG_OFFSET)?;
    tape.log(shifted)
}

/// Masked mean of `ln(|D - Dgt| + 0.5)`; minimum `ln 0.5` at `D = Dgt`.
pub fn loss_log(tape: &mut Tape, depth: Var, gt: Var, mask: &Tensor) -> Result<Var> {
    check_pair(tape, "loss_log", depth, gt, mask)?;
    let per_pixel = log_abs_diff(tape, depth, gt)?;
    tape.reduce_mean(per_pixel, Some(mask))
}

/// Validity of each forward-difference stencil: both pixels valid, or the
/// pixel itself on the replicated edge.
pub fn gradient_mask(mask: &Tensor, axis: Axis) -> Tensor {
    let s = mask.shape();
    Tensor::from_fn(s, |[b, c, h, w]| {
        let here = mask.get(b, c, h, w);
        let next = match axis {
            Axis::X if w + 1 < s.width() => mask.get(b, c, h, w + 1),
            Axis::Y if h + 1 < s.height() => mask.get(b, c, h + 1, w),
            _ => 1.0,
        };
        if here > 0.0 && next > 0.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Log loss on forward differences along x and y:
/// `mean_x ln(|dxD - dxDgt| + 0.5) + mean_y ln(|dyD - dyDgt| + 0.5)`.
///
/// Each term averages over its own stencil mask (see [`gradient_mask`]);
/// a direction with no valid stencil contributes nothing.
pub fn loss_grad(tape: &mut Tape, depth: Var, gt: Var, mask: &Tensor) -> Result<Var> {
    check_pair(tape, "loss_grad", depth, gt, mask)?;
    let mut terms = Vec::with_capacity(2);
    for axis in [Axis::X, Axis::Y] {
        let m = gradient_mask(mask, axis);
        if !m.data().iter().any(|&v| v > 0.0) {
            continue;
        }
        let dd = tape.forward_diff(depth, axis)?;
        let dg = tape.forward_diff(gt, axis)?;
        let per_pixel = log_abs_diff(tape, dd, dg)?;
        terms.push(tape.reduce_mean(per_pixel, Some(&m))?);
    }
    match terms.as_slice() {
        [x, y] => tape.add(*x, *y),
        [one] => Ok(*one),
        _ => Err(Error::InvalidArgument("loss_grad: no valid gradient stencil".into())),
    }
}

/// Handles of each weighted term, for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ordinal: Var,
    pub log: Option<Var>,
    pub grad: Option<Var>,
}

/// `w_ord * ordinal + w_log * loss_log(refined) + w_grad * loss_grad(refined)`.
///
/// Without a refined map (baseline mode) only the ordinal term is used.
/// Terms with zero weight are not evaluated.
pub fn total_loss(
    tape: &mut Tape,
    probs: Var,
    target: &RankTarget,
    refined: Option<Var>,
    gt: Var,
    mask: &Tensor,
    weights: LossWeights,
) -> Result<LossTerms> {
    let ordinal = ordinal_loss(tape, probs, target, mask)?;
    let mut total = tape.scale(ordinal, weights.ordinal)?;
    let mut log = None;
    let mut grad = None;
    if let Some(refined) = refined {
        if weights.log != 0.0 {
            let l = loss_log(tape, refined, gt, mask)?;
            let w = tape.scale(l, weights.log)?;
            total = tape.add(total, w)?;
            log = Some(l);
        }
        if weights.grad != 0.0 {
            let g = loss_grad(tape, refined, gt, mask)?;
            let w = tape.scale(g, weights.grad)?;
            total = tape.add(total, w)?;
            grad = Some(g);
        }
    }
    Ok(LossTerms {
        total,
        ordinal,
        log,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Shape;
    use crate::sid::{encode_rank, LabelMap};
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    fn eval(f: impl Fn(&mut Tape, Var, Var, &Tensor) -> Result<Var>, d: Tensor, g: Tensor, m: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let d = tape.leaf(d, true);
        let g = tape.constant(g);
        let l = f(&mut tape, d, g, m).unwrap();
        tape.value(l).unwrap().item().unwrap()
    }

    #[test]
    fn log_loss_values() {
        let d = row(&[1.0, 2.0, 3.0]);
        let m = Tensor::full(d.shape(), 1.0);
        let v = eval(loss_log, d.clone(), d.clone(), &m);
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
        let v = eval(loss_log, row(&[1.5, 2.5, 2.5]), d.clone(), &m);
        assert!(v.abs() < 1e-15);
        let v = eval(loss_log, row(&[0.0, 1.0, 3.0]), row(&[0.0, 0.0, 0.0]), &m);
        let want = (0.5f64.ln() + 1.5f64.ln() + 3.5f64.ln()) / 3.0;
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.3217).abs() < 1e-4);
    }

    #[test]
    fn grad_loss_values() {
        let d = Tensor::from_fn(Shape::new(1, 1, 3, 4), |[_, _, h, w]| (h * 4 + w * w) as f64 * 0.3);
        let m = Tensor::full(d.shape(), 1.0);
        let v = eval(loss_grad, d.clone(), d.clone(), &m);
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let shifted = Tensor::from_fn(d.shape(), |[b, c, h, w]| d.get(b, c, h, w) + 7.0);
        let v2 = eval(loss_grad, shifted, d.clone(), &m);
        assert!((v2 - v).abs() < 1e-12);

        // 1x3 row: x diffs [1, 2, 0], y diffs all 0
        let z = row(&[0.0, 0.0, 0.0]);
        let m = Tensor::full(z.shape(), 1.0);
        let v = eval(loss_grad, row(&[0.0, 1.0, 3.0]), z, &m);
        let want = (1.5f64.ln() + 2.5f64.ln() + 0.5f64.ln()) / 3.0 + 0.5f64.ln();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn grad_mask_drops_broken_stencils() {
        let m = row(&[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(gradient_mask(&m, Axis::X).data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(gradient_mask(&m, Axis::Y).data(), m.data());
    }

    #[test]
    fn empty_mask_rejected() {
        let d = row(&[1.0, 2.0]);
        let m = Tensor::zeros(d.shape());
        let mut tape = Tape::new();
        let a = tape.leaf(d.clone(), true);
        let b = tape.constant(d);
        assert!(loss_log(&mut tape, a, b, &m).is_err());
        assert!(loss_grad(&mut tape, a, b, &m).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0).is_err());
        assert!(LossWeights::new(1.0, 0.0, 0.0).is_ok());
    }

    fn total_for(weights: LossWeights, refined: &Tensor, gt: &Tensor) -> (f64, f64) {
        let shape = gt.shape();
        let mask = Tensor::full(shape, 1.0);
        let labels = LabelMap::new(shape, vec![1, 2, 0], mask.clone()).unwrap();
        let target = encode_rank(&labels, 4).unwrap();
        let mut tape = Tape::new();
        let probs = tape.leaf(
            Tensor::from_fn(shape.with_channels(3), |[_, c, _, w]| {
                0.1 + 0.25 * c as f64 + 0.05 * w as f64
            }),
            true,
        );
        let r = tape.leaf(refined.clone(), true);
        let g = tape.constant(gt.clone());
        let terms = total_loss(&mut tape, probs, &target, Some(r), g, &mask, weights).unwrap();
        (
            tape.value(terms.total).unwrap().item().unwrap(),
            tape.value(terms.ordinal).unwrap().item().unwrap(),
        )
    }

    #[test]
    fn total_loss_weight_selection() {
        let gt = row(&[1.0, 2.0, 3.0]);
        let refined = row(&[1.2, 2.5, 2.0]);
        let (t, ord) = total_for(LossWeights::new(1.0, 0.0, 0.0).unwrap(), &refined, &gt);
        assert_eq!(t, ord);
        let (t, _) = total_for(LossWeights::new(0.0, 1.0, 0.0).unwrap(), &gt, &gt);
        assert!((t - 0.5f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn log_loss_lower_bound(v in proptest::collection::vec(-5.0f64..5.0, 1..16)) {
            let d = row(&v);
            let g = row(&vec![0.0; v.len()]);
            let m = Tensor::full(d.shape(), 1.0);
            let l = eval(loss_log, d, g, &m);
            prop_assert!(l >= 0.5f64.ln() - 1e-12);
        }

        #[test]
        fn total_loss_is_additive_and_homogeneous(a in 0.1f64..3.0, b in 0.1f64..3.0, c in 0.1f64..3.0, s in 0.1f64..5.0) {
            let gt = row(&[1.0, 2.0, 3.0]);
            let refined = row(&[1.2, 2.5, 2.0]);
            let (full, _) = total_for(LossWeights::new(a, b, c).unwrap(), &refined, &gt);
            let (o, _) = total_for(LossWeights::new(a, 0.0, 0.0).unwrap(), &refined, &gt);
            let (l, _) = total_for(LossWeights::new(0.0, b, 0.0).unwrap(), &refined, &gt);
            let (g, _) = total_for(LossWeights::new(0.0, 0.0, c).unwrap(), &refined, &gt);
            prop_assert!((full - (o + l + g)).abs() < 1e-12);
            let (scaled, _) = total_for(LossWeights::new(a * s, b * s, c * s).unwrap(), &refined, &gt);
            prop_assert!((scaled - s * full).abs() < 1e-10 * (1.0 + scaled.abs()));
        }
    }
}
