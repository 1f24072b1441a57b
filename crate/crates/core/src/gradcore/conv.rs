//! 2-D cross-correlation lowered to matrix products (im2col).

use super::tape::{Backward, Tape, Var};
use super::tensor::{Shape, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    /// Fills `col` (rows x cols) from one image plane stack.
    fn im2col(&self, image: &[f64], col: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.in_c {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for kh in 0..self.k_h {
                for kw in 0..self.k_w {
                    let row = (c * self.k_h + kh) * self.k_w + kw;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oh in 0..self.out_h {
                        let out_row = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        match self.source(oh, kh, self.in_h) {
                            None => out_row.fill(0.0),
                            Some(ih) => {
                                let src = &plane[ih * self.in_w..(ih + 1) * self.in_w];
                                for (ow, d) in out_row.iter_mut().enumerate() {
                                    *d = self.source(ow, kw, self.in_w).map_or(0.0, |iw| src[iw]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back onto an image plane stack.
    fn col2im(&self, col: &[f64], image: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.in_c {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for kh in 0..self.k_h {
                for kw in 0..self.k_w {
                    let row = (c * self.k_h + kh) * self.k_w + kw;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oh in 0..self.out_h {
                        let Some(ih) = self.source(oh, kh, self.in_h) else {
                            continue;
                        };
                        let dst = &mut plane[ih * self.in_w..(ih + 1) * self.in_w];
                        for ow in 0..self.out_w {
                            if let Some(iw) = self.source(ow, kw, self.in_w) {
                                dst[iw] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every stride pair addresses only elements inside the given
    // slices for the stated m, k, n; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Conv2d {
    geo: Geometry,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (input, weight) = (inputs[0], inputs[1]);
        let geo = self.geo;
        let out_c = weight.shape().batch();
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = geo.in_c * geo.in_h * geo.in_w;
        let batch = input.shape().batch();
        debug_assert_eq!(output.numel(), batch * out_c * cols);

        let mut g_in = needs[0].then(|| vec![0.0; input.numel()]);
        let mut g_w = needs[1].then(|| vec![0.0; weight.numel()]);
        let g_b = needs[2].then(|| {
            let mut gb = vec![0.0; out_c];
            for (i, chunk) in g.chunks_exact(cols).enumerate() {
                gb[i % out_c] += chunk.iter().sum::<f64>();
            }
            gb
        });

        let mut col = vec![0.0; rows * cols];
        for b in 0..batch {
            let g_out = &g[b * out_c * cols..(b + 1) * out_c * cols];
            if let Some(gw) = g_w.as_mut() {
                geo.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut col);
                // gw (out_c x rows) += g_out (out_c x cols) * col^T (cols x rows)
                gemm(
                    out_c,
                    cols,
                    rows,
                    g_out,
                    (cols as isize, 1),
                    &col,
                    (1, cols as isize),
                    1.0,
                    gw,
                );
            }
            if let Some(gi) = g_in.as_mut() {
                // dcol (rows x cols) = W^T (rows x out_c) * g_out (out_c x cols)
                gemm(
                    rows,
                    out_c,
                    cols,
                    weight.data(),
                    (1, rows as isize),
                    g_out,
                    (cols as isize, 1),
                    0.0,
                    &mut col,
                );
                geo.col2im(&col, &mut gi[b * in_len..(b + 1) * in_len]);
            }
        }
        vec![g_in, g_w, g_b]
    }
}

impl Tape {
    /// Cross-correlation of `input` (B, inC, H, W) with `weight`
    /// (outC, inC, kH, kW) plus a per-output-channel `bias` (1, outC, 1, 1).
    ///
    /// Output size per axis is `(in + 2*padding - k) / stride + 1` (floor).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input)?;
        let w = self.value(weight)?;
        let bvals = self.value(bias)?;
        let [batch, in_c, in_h, in_w] = x.shape().0;
        let [out_c, w_in_c, k_h, k_w] = w.shape().0;
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!(
                "conv2d: stride {stride} not in {{1, 2}}"
            )));
        }
        if w_in_c != in_c {
            return Err(shape_err(
                "conv2d",
                format!("input channels {in_c} != weight input channels {w_in_c}"),
            ));
        }
        if bvals.shape() != Shape::new(1, out_c, 1, 1) {
            return Err(shape_err("conv2d", format!("bias {} != 1x{out_c}x1x1", bvals.shape())));
        }
        if in_h + 2 * padding < k_h || in_w + 2 * padding < k_w {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k_h}x{k_w} larger than padded input {in_h}x{in_w} (padding {padding})"),
            ));
        }
        let geo = Geometry {
            in_c,
            in_h,
            in_w,
            k_h,
            k_w,
            out_h: (in_h + 2 * padding - k_h) / stride + 1,
            out_w: (in_w + 2 * padding - k_w) / stride + 1,
            stride,
            padding,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = in_c * in_h * in_w;
        let out_shape = Shape::new(batch, out_c, geo.out_h, geo.out_w);
        let mut out = vec![0.0; out_shape.numel()];
        let mut col = vec![0.0; rows * cols];
        for b in 0..batch {
            let dst = &mut out[b * out_c * cols..(b + 1) * out_c * cols];
            for (o, chunk) in dst.chunks_exact_mut(cols).enumerate() {
                chunk.fill(bvals.data()[o]);
            }
            geo.im2col(&x.data()[b * in_len..(b + 1) * in_len], &mut col);
            gemm(
                out_c,
                rows,
                cols,
                w.data(),
                (rows as isize, 1),
                &col,
                (cols as isize, 1),
                1.0,
                dst,
            );
        }
        let out = Tensor::new(out_shape, out)?;
        self.record(out, &[input, weight, bias], Box::new(Conv2d { geo }))
    }
}
