//! Elementwise, reduction and reshaping primitives.

use super::tape::{Backward, Tape, Var};
use super::tensor::{Shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Pointwise op whose derivative depends on the input `x` and output `y`.
struct Pointwise {
    name: &'static str,
    deriv: Box<dyn Fn(f64, f64) -> f64>,
}

impl Backward for Pointwise {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let grad = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(g)
            .map(|((&x, &y), &g)| g * (self.deriv)(x, y))
            .collect();
        vec![Some(grad)]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        match self {
            Binary::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Binary::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Binary::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let ga = needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect());
                let gb = needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }
        }
    }
}

struct SumAll;

impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct SumChannels;

impl Backward for SumChannels {
    fn name(&self) -> &'static str {
        "sum_channels"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].shape();
        let plane = s.plane();
        let mut grad = vec![0.0; s.numel()];
        for b in 0..s.batch() {
            let src = &g[b * plane..(b + 1) * plane];
            for c in 0..s.channels() {
                let off = (b * s.channels() + c) * plane;
                grad[off..off + plane].copy_from_slice(src);
            }
        }
        vec![Some(grad)]
    }
}

/// Weighted mean: `weights` already holds mask/count per element.
struct WeightedSum {
    weights: Vec<f64>,
}

impl Backward for WeightedSum {
    fn name(&self) -> &'static str {
        "reduce_mean"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.weights.iter().map(|w| w * g[0]).collect())]
    }
}

struct Concat {
    channels: Vec<usize>,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let out = output.shape();
        let plane = out.plane();
        let mut grads = Vec::with_capacity(inputs.len());
        let mut c0 = 0;
        for (i, &c) in self.channels.iter().enumerate() {
            if needs[i] {
                let mut grad = Vec::with_capacity(out.batch() * c * plane);
                for b in 0..out.batch() {
                    let start = out.index(b, c0, 0, 0);
                    grad.extend_from_slice(&g[start..start + c * plane]);
                }
                grads.push(Some(grad));
            } else {
                grads.push(None);
            }
            c0 += c;
        }
        grads
    }
}

struct Upsample {
    factor: usize,
}

impl Backward for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].shape();
        let ow = output.shape().width();
        let f = self.factor;
        let mut grad = vec![0.0; s.numel()];
        for bc in 0..s.batch() * s.channels() {
            let src = &g[bc * output.shape().plane()..(bc + 1) * output.shape().plane()];
            let dst = &mut grad[bc * s.plane()..(bc + 1) * s.plane()];
            for (oh, row) in src.chunks_exact(ow).enumerate() {
                let drow = &mut dst[(oh / f) * s.width()..(oh / f + 1) * s.width()];
                for (ox, v) in row.iter().enumerate() {
                    drow[ox / f] += v;
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Forward difference along width (`Axis::X`) or height (`Axis::Y`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

struct ForwardDiff {
    axis: Axis,
}

impl Backward for ForwardDiff {
    fn name(&self) -> &'static str {
        match self.axis {
            Axis::X => "diff_x",
            Axis::Y => "diff_y",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].shape();
        let mut grad = vec![0.0; s.numel()];
        for_each_diff(s, self.axis, |i, next| {
            grad[next] += g[i];
            grad[i] -= g[i];
        });
        vec![Some(grad)]
    }
}

/// Visits every (index, forward-neighbour index) pair; edge pixels are skipped.
fn for_each_diff(s: Shape, axis: Axis, mut f: impl FnMut(usize, usize)) {
    let [nb, nc, nh, nw] = s.0;
    for bc in 0..nb * nc {
        for h in 0..nh {
            for w in 0..nw {
                let i = (bc * nh + h) * nw + w;
                match axis {
                    Axis::X if w + 1 < nw => f(i, i + 1),
                    Axis::Y if h + 1 < nh => f(i, i + nw),
                    _ => {}
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    fn pointwise(
        &mut self,
        x: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let input = self.value(x)?;
        let data = input.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(input.shape(), data)?;
        self.record(
            out,
            &[x],
            Box::new(Pointwise {
                name,
                deriv: Box::new(deriv),
            }),
        )
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        same_shape(op.name(), ta, tb)?;
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.record(out, &[a, b], Box::new(op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, "relu", |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `|x|`; the subgradient at exactly 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, "exp", f64::exp, |_, y| y)
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x)?;
        if let Some((index, &value)) = input.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        self.pointwise(x, "log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.pointwise(x, "scale", move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.pointwise(x, "add_scalar", move |v| v + c, |_, _| 1.0)
    }

    /// Clamp into `[lo, hi]`; gradient is identity strictly inside, zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.pointwise(
            x,
            "clamp",
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x)?.data().iter().sum();
        self.record(Tensor::scalar(total), &[x], Box::new(SumAll))
    }

    /// Sums over the channel axis, keeping a single channel.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x)?;
        let s = input.shape();
        let plane = s.plane();
        let mut out = vec![0.0; s.batch() * plane];
        for b in 0..s.batch() {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for c in 0..s.channels() {
                let off = s.index(b, c, 0, 0);
                dst.iter_mut()
                    .zip(&input.data()[off..off + plane])
                    .for_each(|(d, v)| *d += v);
            }
        }
        let out = Tensor::new(s.with_channels(1), out)?;
        self.record(out, &[x], Box::new(SumChannels))
    }

    /// Mean over all entries, or over entries whose mask is 1.
    ///
    /// The mask has either the input's shape or a single channel, in which
    /// case it applies to every channel of the pixel.
    pub fn reduce_mean(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let input = self.value(x)?;
        let s = input.shape();
        let keep: Vec<f64> = match mask {
            None => vec![1.0; s.numel()],
            Some(m) => expand_mask(m, s)?,
        };
        let count = keep.iter().filter(|&&k| k > 0.0).count();
        if count == 0 {
            return Err(Error::InvalidArgument("reduce_mean: mask selects no element".into()));
        }
        let inv = 1.0 / count as f64;
        let weights: Vec<f64> = keep.iter().map(|&k| if k > 0.0 { inv } else { 0.0 }).collect();
        let total: f64 = input
            .data()
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k > 0.0)
            .map(|(v, _)| v)
            .sum();
        self.record(Tensor::scalar(total * inv), &[x], Box::new(WeightedSum { weights }))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels: no inputs".into()))?;
        let s0 = self.value(first)?.shape();
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x)?.shape();
            if (s.batch(), s.height(), s.width()) != (s0.batch(), s0.height(), s0.width()) {
                return Err(shape_err(
                    "concat_channels",
                    format!("batch/height/width of {s} differ from {s0}"),
                ));
            }
            channels.push(s.channels());
        }
        let total: usize = channels.iter().sum();
        let out_shape = s0.with_channels(total);
        let plane = s0.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s0.batch() {
            for (&x, &c) in xs.iter().zip(&channels) {
                let t = self.value(x)?;
                let off = b * c * plane;
                data.extend_from_slice(&t.data()[off..off + c * plane]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.record(out, xs, Box::new(Concat { channels }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let input = self.value(x)?;
        let s = input.shape();
        let (oh, ow) = (s.height() * factor, s.width() * factor);
        let out_shape = Shape::new(s.batch(), s.channels(), oh, ow);
        let mut data = Vec::with_capacity(out_shape.numel());
        for bc in 0..s.batch() * s.channels() {
            let src = &input.data()[bc * s.plane()..(bc + 1) * s.plane()];
            for h in 0..oh {
                let row = &src[(h / factor) * s.width()..(h / factor + 1) * s.width()];
                data.extend((0..ow).map(|w| row[w / factor]));
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.record(out, &[x], Box::new(Upsample { factor }))
    }

    /// `x[i+1] - x[i]` along `axis`; the last row/column is 0 (replicated edge).
    pub fn forward_diff(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let input = self.value(x)?;
        let mut out = Tensor::zeros(input.shape());
        {
            let src = input.data();
            let dst = out.data_mut();
            for_each_diff(input.shape(), axis, |i, next| dst[i] = src[next] - src[i]);
        }
        self.record(out, &[x], Box::new(ForwardDiff { axis }))
    }
}

/// Broadcasts a single-channel mask over `shape`'s channels.
pub(crate) fn expand_mask(mask: &Tensor, shape: Shape) -> Result<Vec<f64>> {
    let m = mask.shape();
    if m == shape {
        return Ok(mask.data().to_vec());
    }
    if m.channels() != 1 || (m.batch(), m.height(), m.width()) != (shape.batch(), shape.height(), shape.width()) {
        return Err(shape_err("mask", format!("mask {m} does not cover {shape}")));
    }
    let plane = shape.plane();
    let mut out = Vec::with_capacity(shape.numel());
    for b in 0..shape.batch() {
        let src = &mask.data()[b * plane..(b + 1) * plane];
        for _ in 0..shape.channels() {
            out.extend_from_slice(src);
        }
    }
    Ok(out)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::new(Shape(shape), data).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]), true);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).unwrap().data()[1], 0.5);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]), true);
        let r = tape.relu(x).unwrap();
        let l = tape.sum(r).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_rejects_non_positive_and_names_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 3], vec![1.0, 2.0, 0.0]), true);
        match tape.log(x) {
            Err(Error::Domain {
                op: "log", index: 2, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mean_and_masked_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]), true);
        let m = tape.reduce_mean(x, None).unwrap();
        assert_eq!(tape.value(m).unwrap().item().unwrap(), 3.0);

        let mask = t([1, 1, 2, 2], vec![0.0, 0.0, 1.0, 0.0]);
        let m = tape.reduce_mean(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(m).unwrap().item().unwrap(), 3.0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn all_zero_mask_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0), true);
        let mask = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(tape.reduce_mean(x, Some(&mask)).is_err());
    }

    #[test]
    fn single_channel_mask_broadcasts() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_fn(Shape::new(1, 2, 1, 2), |[_, c, _, w]| (c * 10 + w) as f64),
            true,
        );
        let mask = t([1, 1, 1, 2], vec![1.0, 0.0]);
        let m = tape.reduce_mean(x, Some(&mask)).unwrap();
        // entries (c=0,w=0)=0 and (c=1,w=0)=10
        assert_eq!(tape.value(m).unwrap().item().unwrap(), 5.0);
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(Shape::new(1, 2, 4, 4), 1.0), true);
        let b = tape.leaf(Tensor::full(Shape::new(1, 2, 4, 4), 2.0), true);
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).unwrap().shape(), Shape::new(1, 4, 4, 4));
        let one = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(one).unwrap().data(), tape.value(a).unwrap().data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)), true);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 2)), true);
        assert!(matches!(tape.concat_channels(&[a, b]), Err(Error::Shape { .. })));
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let u = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(u).unwrap().data(), &[5.0; 4]);
        let id = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.value(id).unwrap().data(), &[5.0]);
        let l = tape.sum(u).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn forward_diff_zero_at_edge() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 3], vec![0.0, 1.0, 3.0]), true);
        let d = tape.forward_diff(x, Axis::X).unwrap();
        assert_eq!(tape.value(d).unwrap().data(), &[1.0, 2.0, 0.0]);
        let d = tape.forward_diff(x, Axis::Y).unwrap();
        assert_eq!(tape.value(d).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 3], vec![3.0, -1.0, 0.5]), true);
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.exp(x).unwrap();
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap()[0];
        assert!((g - (3.0 + 2f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn backward_guards() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 2), 1.0), true);
        assert!(tape.backward(x).is_err(), "non-scalar loss");

        let c = tape.constant(Tensor::scalar(1.0));
        assert!(tape.backward(c).is_err(), "detached loss");

        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err(), "second backward");
        tape.reset_grads();
        tape.backward(l).unwrap();

        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(tape.backward(y).is_err(), "foreign handle");
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), true);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 3)), true);
        assert!(matches!(tape.add(a, b), Err(Error::Shape { op: "add", .. })));
    }
}
