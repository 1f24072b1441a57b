use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dimensions of a rank-4 array: (batch, channel, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape([batch, channels, height, width])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn height(&self) -> usize {
        self.0[2]
    }

    pub fn width(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Pixels per channel plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }

    pub fn with_channels(&self, channels: usize) -> Shape {
        Shape([self.0[0], channels, self.0[2], self.0[3]])
    }

    pub fn is_scalar(&self) -> bool {
        *self == Shape::SCALAR
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, c, h, w] = self.0;
        write!(f, "{b}x{c}x{h}x{w}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense row-major rank-4 array of `f64`.
///
/// `grad` is only populated for tensors owned by a
/// [`ParamStore`](super::ParamStore); values living on a tape keep their
/// gradients on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.0.contains(&0) {
            return Err(shape_err("tensor", format!("zero-sized dimension in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(shape_err(
                "tensor",
                format!("{} values for shape {shape} ({} expected)", data.len(), shape.numel()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [nb, nc, nh, nw] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..nb {
            for c in 0..nc {
                for h in 0..nh {
                    for w in 0..nw {
                        data.push(f([b, c, h, w]));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(b, c, h, w)]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.index(b, c, h, w);
        self.data[i] = value;
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err("item", format!("expected scalar, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extracts batch item `b` as a 1-batch tensor.
    pub fn batch_item(&self, b: usize) -> Result<Tensor> {
        let [nb, nc, nh, nw] = self.shape.0;
        if b >= nb {
            return Err(Error::InvalidArgument(format!("batch index {b} >= {nb}")));
        }
        let len = nc * nh * nw;
        Tensor::new(Shape::new(1, nc, nh, nw), self.data[b * len..(b + 1) * len].to_vec())
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            let [b, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(shape_err("stack", format!("{} vs {}", t.shape, first.shape)));
            }
            batch += b;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(batch, c, h, w), data)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
