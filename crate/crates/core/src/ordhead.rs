//! Differentiable ordinal regression head.
//!
//! The network emits `2(K-1)` logit channels; channels `(2k, 2k+1)` are
//! the two classes of binary classifier `k`, and channel `2k+1` is the
//! "depth greater than `t_k`" class. Softmax over each pair gives the rank
//! probabilities `P^k`.
//!
//! Treating `P^k` as a step function `f(x) = P^floor(x)` on `[0, K-1)`,
//! the expected label is the area under it, `p = sum_k P^k`, and the
//! confidence compares `f` with the ideal step at `p`:
//!
//! ```text
//! C = ( integral_0^p f  +  integral_p^{K-1} (1 - f) ) / (K - 1)
//! ```
//!
//! Both are ordinary tape operations, so the decoded depth is trainable
//! end to end.

use crate::error::{shape_err, Result};
use crate::gradcore::{sigmoid, Backward, Tape, Tensor, Var};
use crate::sid::{label_to_depth_var, RankTarget, SidThresholds};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

struct PairSoftmax;

impl Backward for PairSoftmax {
    fn name(&self) -> &'static str {
        "pair_softmax"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = output.shape();
        let plane = s.plane();
        let mut grad = vec![0.0; inputs[0].numel()];
        for b in 0..s.batch() {
            for k in 0..s.channels() {
                let o = s.index(b, k, 0, 0);
                let neg = inputs[0].shape().index(b, 2 * k, 0, 0);
                let pos = neg + plane;
                for px in 0..plane {
                    let p = output.data()[o + px];
                    let d = g[o + px] * p * (1.0 - p);
                    grad[pos + px] = d;
                    grad[neg + px] = -d;
                }
            }
        }
        vec![Some(grad)]
    }
}

/// `P^k = exp(z_{2k+1}) / (exp(z_{2k}) + exp(z_{2k+1}))`.
///
/// Evaluated as `sigmoid(z_{2k+1} - z_{2k})`, which is the pair softmax
/// with the pair maximum subtracted.
pub fn pair_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let z = tape.value(logits)?;
    let s = z.shape();
    if s.channels() % 2 != 0 || s.channels() < 2 {
        return Err(shape_err(
            "pair_softmax",
            format!("expected an even channel count 2(K-1), got {}", s.channels()),
        ));
    }
    let plane = s.plane();
    let out_shape = s.with_channels(s.channels() / 2);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..s.batch() {
        for k in 0..out_shape.channels() {
            let neg = s.index(b, 2 * k, 0, 0);
            let pos = neg + plane;
            data.extend((0..plane).map(|px| sigmoid(z.data()[pos + px] - z.data()[neg + px])));
        }
    }
    let out = Tensor::new(out_shape, data)?;
    tape.record(out, &[logits], Box::new(PairSoftmax))
}

/// Pixel-wise ordinal loss
/// `-sum_{k<l} ln P^k - sum_{k>=l} ln(1 - P^k)`, masked-mean over pixels.
///
/// `mask` is (B, 1, H, W).
pub fn ordinal_loss(tape: &mut Tape, probs: Var, target: &RankTarget, mask: &Tensor) -> Result<Var> {
    let ps = tape.value(probs)?.shape();
    let ts = target.tensor().shape();
    if ps != ts {
        return Err(shape_err("ordinal_loss", format!("probs {ps} vs target {ts}")));
    }
    let on = target.tensor().clone();
    let off = Tensor::from_fn(ts, |[b, c, h, w]| 1.0 - on.get(b, c, h, w));
    let on = tape.constant(on);
    let off = tape.constant(off);

    let clamped = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(clamped)?;
    let neg = tape.scale(clamped, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.mul(on, log_p)?;
    let b = tape.mul(off, log_q)?;
    let ll = tape.add(a, b)?;
    let per_pixel = tape.sum_channels(ll)?;
    let nll = tape.scale(per_pixel, -1.0)?;
    tape.reduce_mean(nll, Some(mask))
}

/// Expected label `p = sum_k P^k`, shape (B, 1, H, W).
pub fn expected_label(tape: &mut Tape, probs: Var) -> Result<Var> {
    tape.sum_channels(probs)
}

/// Closed-form confidence of one pixel; `probs` are the `K-1` rank
/// probabilities and `p` the expected label.
pub fn confidence_pixel(probs: &[f64], p: f64) -> f64 {
    let n = probs.len();
    let p = p.clamp(0.0, n as f64);
    let m = (p.floor() as usize).min(n);
    let frac = p - m as f64;
    let below: f64 = probs[..m].iter().sum();
    let area = if m < n { below + frac * probs[m] } else { below };
    let total: f64 = probs.iter().sum();
    ((2.0 * area + n as f64 - p - total) / n as f64).clamp(0.0, 1.0)
}

struct Confidence;

impl Backward for Confidence {
    fn name(&self) -> &'static str {
        "confidence"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (probs, label) = (inputs[0], inputs[1]);
        let s = probs.shape();
        let n = s.channels();
        let nf = n as f64;
        let plane = s.plane();
        let mut g_probs = needs[0].then(|| vec![0.0; probs.numel()]);
        let mut g_label = needs[1].then(|| vec![0.0; label.numel()]);
        for b in 0..s.batch() {
            for px in 0..plane {
                let i = b * plane + px;
                let p = label.data()[i].clamp(0.0, nf);
                let m = (p.floor() as usize).min(n);
                let frac = p - m as f64;
                let go = g[i];
                if let Some(gp) = g_probs.as_mut() {
                    for k in 0..n {
                        let d_area = if k < m {
                            1.0
                        } else if k == m {
                            frac
                        } else {
                            0.0
                        };
                        gp[s.index(b, k, 0, 0) + px] += go * (2.0 * d_area - 1.0) / nf;
                    }
                }
                if let Some(gl) = g_label.as_mut() {
                    let f_at_p = probs.data()[s.index(b, m.min(n - 1), 0, 0) + px];
                    gl[i] += go * (2.0 * f_at_p - 1.0) / nf;
                }
            }
        }
        vec![g_probs, g_label]
    }
}

/// Per-pixel confidence map in `[0, 1]`, shape (B, 1, H, W).
///
/// Differentiable with respect to both the probabilities and `p`.
pub fn confidence(tape: &mut Tape, probs: Var, p: Var) -> Result<Var> {
    let pt = tape.value(probs)?;
    let lt = tape.value(p)?;
    let s = pt.shape();
    if lt.shape() != s.with_channels(1) {
        return Err(shape_err(
            "confidence",
            format!("expected label {} vs probs {s}", lt.shape()),
        ));
    }
    let plane = s.plane();
    let mut buf = vec![0.0; s.channels()];
    let mut data = Vec::with_capacity(lt.numel());
    for b in 0..s.batch() {
        for px in 0..plane {
            for (k, v) in buf.iter_mut().enumerate() {
                *v = pt.data()[s.index(b, k, 0, 0) + px];
            }
            data.push(confidence_pixel(&buf, lt.data()[b * plane + px]));
        }
    }
    let out = Tensor::new(lt.shape(), data)?;
    tape.record(out, &[probs, p], Box::new(Confidence))
}

/// Coarse depth: `label_to_depth(expected_label(probs))`.
pub fn soft_decode(tape: &mut Tape, probs: Var, th: &SidThresholds) -> Result<Var> {
    let ps = tape.value(probs)?.shape();
    if ps.channels() != th.classifiers() {
        return Err(shape_err(
            "soft_decode",
            format!("{} channels for K = {}", ps.channels(), th.k()),
        ));
    }
    let p = expected_label(tape, probs)?;
    label_to_depth_var(tape, p, th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Shape;
    use crate::sid::{encode_rank, make_thresholds, LabelMap};
    use proptest::prelude::*;

    fn probs_tensor(v: &[f64]) -> Tensor {
        Tensor::new(Shape::new(1, v.len(), 1, 1), v.to_vec()).unwrap()
    }

    fn target(labels: &[usize], k: usize) -> RankTarget {
        let shape = Shape::new(1, 1, 1, labels.len());
        let lm = LabelMap::new(shape, labels.to_vec(), Tensor::full(shape, 1.0)).unwrap();
        encode_rank(&lm, k).unwrap()
    }

    #[test]
    fn softmax_pairs() {
        let mut tape = Tape::new();
        let z = tape.leaf(
            Tensor::new(Shape::new(1, 4, 1, 1), vec![0.3, 0.3, -2.0, 8.0]).unwrap(),
            true,
        );
        let p = pair_softmax(&mut tape, z).unwrap();
        let v = tape.value(p).unwrap().data().to_vec();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
        assert!((v[1] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_odd_channels() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)), true);
        assert!(pair_softmax(&mut tape, z).is_err());
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(
            Tensor::new(Shape::new(1, 4, 1, 1), vec![800.0, -800.0, -800.0, 800.0]).unwrap(),
            true,
        );
        let p = pair_softmax(&mut tape, z).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn ordinal_loss_symmetric_point() {
        let k = 5;
        for l in 0..k {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::full(Shape::new(1, k - 1, 1, 1), 0.5), true);
            let mask = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
            let loss = ordinal_loss(&mut tape, p, &target(&[l], k), &mask).unwrap();
            let v = tape.value(loss).unwrap().item().unwrap();
            assert!((v - 4.0 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ordinal_loss_perfect_and_worked_example() {
        let mut tape = Tape::new();
        let mask = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let p = tape.leaf(probs_tensor(&[1.0, 1.0, 0.0, 0.0]), true);
        let loss = ordinal_loss(&mut tape, p, &target(&[2], 5), &mask).unwrap();
        let v = tape.value(loss).unwrap().item().unwrap();
        assert!((v - 4.0 * -(1.0 - PROB_EPS).ln()).abs() < 1e-15);
        assert!(v < 1e-6);

        let p = tape.leaf(probs_tensor(&[0.8, 0.3]), true);
        let loss = ordinal_loss(&mut tape, p, &target(&[1], 3), &mask).unwrap();
        let v = tape.value(loss).unwrap().item().unwrap();
        assert!((v - (-(0.8f64.ln()) - 0.7f64.ln())).abs() < 1e-12);
        assert!((v - 0.5798).abs() < 1e-4);
    }

    #[test]
    fn ordinal_loss_masks_pixels() {
        let mut tape = Tape::new();
        let p = tape.leaf(
            Tensor::new(Shape::new(1, 2, 1, 2), vec![0.8, 0.5, 0.3, 0.5]).unwrap(),
            true,
        );
        let mask = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let loss = ordinal_loss(&mut tape, p, &target(&[1, 0], 3), &mask).unwrap();
        let v = tape.value(loss).unwrap().item().unwrap();
        assert!((v - (-(0.8f64.ln()) - 0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn expected_label_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(probs_tensor(&[0.9, 0.7, 0.2]), true);
        let e = expected_label(&mut tape, p).unwrap();
        assert!((tape.value(e).unwrap().data()[0] - 1.8).abs() < 1e-15);
        let h = tape.leaf(probs_tensor(&[0.5; 4]), true);
        let e = expected_label(&mut tape, h).unwrap();
        assert_eq!(tape.value(e).unwrap().data()[0], 2.0);
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_pixel(&[1.0, 1.0, 0.0, 0.0], 2.0), 1.0);
        assert_eq!(confidence_pixel(&[0.0; 4], 0.0), 1.0);
        assert_eq!(confidence_pixel(&[1.0; 4], 4.0), 1.0);
        assert_eq!(confidence_pixel(&[0.5; 4], 2.0), 0.5);
        // [0.9, 0.7, 0.2], p = 1.8:
        // integral_0^p f = 0.9 + 0.8 * 0.7 = 1.46
        // integral_p^3 (1 - f) = 0.2 * 0.3 + 0.8 = 0.86
        let c = confidence_pixel(&[0.9, 0.7, 0.2], 1.8);
        assert!((c - (1.46 + 0.86) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn soft_decode_examples() {
        let th = make_thresholds(0.5, 8.0, 4).unwrap();
        let mut tape = Tape::new();
        let half = tape.leaf(probs_tensor(&[0.5; 3]), true);
        let d = soft_decode(&mut tape, half, &th).unwrap();
        assert!((tape.value(d).unwrap().data()[0] - 0.5 * 2f64.powf(1.5)).abs() < 1e-12);
        for l in 0..4 {
            let bits: Vec<f64> = (0..3).map(|i| if i < l { 1.0 } else { 0.0 }).collect();
            let p = tape.leaf(probs_tensor(&bits), true);
            let d = soft_decode(&mut tape, p, &th).unwrap();
            assert_eq!(tape.value(d).unwrap().data()[0], th.t(l));
        }
    }

    #[test]
    fn confidence_gradient_has_both_paths() {
        let mut tape = Tape::new();
        let p = tape.leaf(probs_tensor(&[0.9, 0.7, 0.2]), true);
        let e = expected_label(&mut tape, p).unwrap();
        let c = confidence(&mut tape, p, e).unwrap();
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        // p = 1.8, m = 1, frac = 0.8; direct term (2 a_k - 1)/3, label term
        // (2 * P^1 - 1)/3 = 0.4/3 added to every P^k through p = sum P
        let g = tape.grad(p).unwrap();
        let direct = [1.0 / 3.0, (2.0 * 0.8 - 1.0) / 3.0, -1.0 / 3.0];
        for (gk, dk) in g.iter().zip(direct) {
            assert!((gk - (dk + 0.4 / 3.0)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn label_and_confidence_bounds(v in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
            let p: f64 = v.iter().sum();
            prop_assert!(p >= 0.0 && p <= v.len() as f64);
            let c = confidence_pixel(&v, p);
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn expected_label_strictly_increasing(
            v in proptest::collection::vec(0.0f64..0.99, 1..12),
            k in 0usize..12,
            bump in 1e-6f64..0.01,
        ) {
            let k = k % v.len();
            let before: f64 = v.iter().sum();
            let mut w = v.clone();
            w[k] += bump;
            let after: f64 = w.iter().sum();
            prop_assert!(after > before);
        }

        #[test]
        fn non_step_vectors_are_less_confident(v in proptest::collection::vec(0.01f64..0.99, 1..12)) {
            let p: f64 = v.iter().sum();
            prop_assert!(confidence_pixel(&v, p) < 1.0 - 1e-9);
        }
    }
}
