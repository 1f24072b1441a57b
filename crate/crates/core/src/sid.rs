//! Spacing-increasing discretization of a depth range.
//!
//! The range `[alpha, beta]` is cut into `K` bins of equal width in log
//! space, so bins widen geometrically with depth. A depth in bin `l`
//! (i.e. in `(t_l, t_{l+1}]`) is encoded as the rank vector with `l`
//! leading ones followed by `K-1-l` zeros.

use crate::error::{shape_err, Error, Result};
use crate::gradcore::{Backward, Shape, Tape, Tensor, Var};

pub const DEFAULT_K: usize = 48;

/// Probability above which a classifier is counted as "1" by [`hard_decode`].
pub const HARD_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRange {
    alpha: f64,
    beta: f64,
}

impl DepthRange {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < beta && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "depth range requires 0 < alpha < beta, got [{alpha}, {beta}]"
            )));
        }
        Ok(DepthRange { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// The `K + 1` geometric thresholds `t_0 = alpha, ..., t_K = beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SidThresholds {
    range: DepthRange,
    k: usize,
    thresholds: Vec<f64>,
    log_alpha: f64,
    log_step: f64,
}

impl SidThresholds {
    /// `t_i = exp(ln alpha + i * ln(beta / alpha) / K)`.
    pub fn new(range: DepthRange, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("K must be >= 2, got {k}")));
        }
        let log_alpha = range.alpha.ln();
        let log_step = (range.beta / range.alpha).ln() / k as f64;
        let mut thresholds: Vec<f64> = (0..=k).map(|i| (log_alpha + i as f64 * log_step).exp()).collect();
        // endpoints exact
        thresholds[0] = range.alpha;
        thresholds[k] = range.beta;
        Ok(SidThresholds {
            range,
            k,
            thresholds,
            log_alpha,
            log_step,
        })
    }

    pub fn range(&self) -> DepthRange {
        self.range
    }

    /// Number of discretization levels `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of binary classifiers, `K - 1`.
    pub fn classifiers(&self) -> usize {
        self.k - 1
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn t(&self, i: usize) -> f64 {
        self.thresholds[i]
    }

    /// Log-space width of every bin.
    pub fn log_step(&self) -> f64 {
        self.log_step
    }

    /// Smallest `l` with `depth <= t_{l+1}`, clamped to `[0, K-1]`.
    pub fn depth_to_label(&self, depth: f64) -> Result<usize> {
        if !(depth > 0.0) {
            return Err(Error::Domain {
                op: "depth_to_label",
                index: 0,
                value: depth,
            });
        }
        // thresholds[1..] is sorted; count entries strictly below depth
        let l = self.thresholds[1..].partition_point(|&t| t < depth);
        Ok(l.min(self.k - 1))
    }

    /// Continuous label to depth, `exp(ln alpha + p * ln(beta/alpha) / K)`,
    /// with `p` clamped into `[0, K]`.
    pub fn label_to_depth(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, self.k as f64);
        if p == 0.0 {
            return self.range.alpha;
        }
        if p == self.k as f64 {
            return self.range.beta;
        }
        (self.log_alpha + p * self.log_step).exp()
    }

    /// Centre of bin `c` in linear depth, `(t_c + t_{c+1}) / 2`.
    pub fn bin_midpoint(&self, c: usize) -> f64 {
        0.5 * (self.thresholds[c] + self.thresholds[c + 1])
    }
}

/// Convenience constructor matching `make_thresholds(range, K)`.
pub fn make_thresholds(alpha: f64, beta: f64, k: usize) -> Result<SidThresholds> {
    SidThresholds::new(DepthRange::new(alpha, beta)?, k)
}

/// Rank vector with `label` leading ones, length `k - 1`.
pub fn rank_vector(label: usize, k: usize) -> Result<Vec<u8>> {
    if label >= k {
        return Err(Error::InvalidArgument(format!("label {label} outside [0, {}]", k - 1)));
    }
    Ok((0..k - 1).map(|i| u8::from(i < label)).collect())
}

/// Per-pixel integer depth labels plus a validity mask, shape (B, 1, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: Shape,
    labels: Vec<usize>,
    mask: Tensor,
}

impl LabelMap {
    pub fn new(shape: Shape, labels: Vec<usize>, mask: Tensor) -> Result<Self> {
        if shape.channels() != 1 || labels.len() != shape.numel() || mask.shape() != shape {
            return Err(shape_err(
                "label_map",
                format!("{} labels, mask {} for shape {shape}", labels.len(), mask.shape()),
            ));
        }
        Ok(LabelMap { shape, labels, mask })
    }

    /// Labels every valid pixel of a (B, 1, H, W) depth map.
    pub fn from_depth(depth: &Tensor, mask: &Tensor, th: &SidThresholds) -> Result<Self> {
        let shape = depth.shape();
        if mask.shape() != shape {
            return Err(shape_err(
                "label_map",
                format!("mask {} vs depth {shape}", mask.shape()),
            ));
        }
        let labels = depth
            .data()
            .iter()
            .zip(mask.data())
            .enumerate()
            .map(|(i, (&d, &m))| {
                if m > 0.0 {
                    th.depth_to_label(d).map_err(|_| Error::Domain {
                        op: "depth_to_label",
                        index: i,
                        value: d,
                    })
                } else {
                    Ok(0)
                }
            })
            .collect::<Result<_>>()?;
        Self::new(shape, labels, mask.clone())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }
}

/// Binary rank targets, shape (B, K-1, H, W); monotone non-increasing per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTarget {
    bits: Tensor,
}

impl RankTarget {
    /// Validates that every pixel's vector is binary and a prefix of ones.
    pub fn new(bits: Tensor) -> Result<Self> {
        let s = bits.shape();
        let plane = s.plane();
        for b in 0..s.batch() {
            for px in 0..plane {
                let mut prev = 1.0;
                for c in 0..s.channels() {
                    let v = bits.data()[s.index(b, c, 0, 0) + px];
                    if (v != 0.0 && v != 1.0) || v > prev {
                        return Err(Error::InvalidArgument(format!(
                            "rank target not a monotone binary vector at batch {b} pixel {px}"
                        )));
                    }
                    prev = v;
                }
            }
        }
        Ok(RankTarget { bits })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.bits
    }

    /// Number of ones per pixel, i.e. the encoded label, shape (B, 1, H, W).
    pub fn labels(&self) -> Vec<usize> {
        let s = self.bits.shape();
        let plane = s.plane();
        let mut out = vec![0; s.batch() * plane];
        for b in 0..s.batch() {
            for c in 0..s.channels() {
                let off = s.index(b, c, 0, 0);
                for px in 0..plane {
                    out[b * plane + px] += self.bits.data()[off + px] as usize;
                }
            }
        }
        out
    }
}

/// Bits `0..l` set for each pixel's label `l`.
pub fn encode_rank(labels: &LabelMap, k: usize) -> Result<RankTarget> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be >= 2, got {k}")));
    }
    let s = labels.shape;
    let plane = s.plane();
    if let Some((i, l)) = labels.labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {l} at pixel {i} outside [0, {}]",
            k - 1
        )));
    }
    let out_shape = s.with_channels(k - 1);
    let bits = Tensor::from_fn(out_shape, |[b, c, h, w]| {
        let l = labels.labels[b * plane + h * s.width() + w];
        if c < l {
            1.0
        } else {
            0.0
        }
    });
    Ok(RankTarget { bits })
}

/// DORN-style inference: binarize each classifier at 0.5 (strictly
/// greater counts as 1), count the ones `c`, output `(t_c + t_{c+1}) / 2`.
///
/// Not differentiable; used as the baseline decoder.
pub fn hard_decode(probs: &Tensor, th: &SidThresholds) -> Result<Tensor> {
    let s = probs.shape();
    if s.channels() != th.classifiers() {
        return Err(shape_err(
            "hard_decode",
            format!(
                "{} channels for K = {} (expected {})",
                s.channels(),
                th.k(),
                th.classifiers()
            ),
        ));
    }
    let plane = s.plane();
    let mut counts = vec![0usize; s.batch() * plane];
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            let off = s.index(b, c, 0, 0);
            for px in 0..plane {
                if probs.data()[off + px] > HARD_THRESHOLD {
                    counts[b * plane + px] += 1;
                }
            }
        }
    }
    let data = counts.into_iter().map(|c| th.bin_midpoint(c)).collect();
    Tensor::new(s.with_channels(1), data)
}

struct LabelToDepth {
    k: f64,
    log_step: f64,
}

impl Backward for LabelToDepth {
    fn name(&self) -> &'static str {
        "label_to_depth"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let grad = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(g)
            .map(|((&p, &d), &g)| {
                if (0.0..=self.k).contains(&p) {
                    g * d * self.log_step
                } else {
                    0.0
                }
            })
            .collect();
        vec![Some(grad)]
    }
}

/// Differentiable [`SidThresholds::label_to_depth`] on a tape:
/// `d depth / d p = depth * ln(beta/alpha) / K` inside `[0, K]`.
pub fn label_to_depth_var(tape: &mut Tape, p: Var, th: &SidThresholds) -> Result<Var> {
    let input = tape.value(p)?;
    let data = input.data().iter().map(|&v| th.label_to_depth(v)).collect();
    let out = Tensor::new(input.shape(), data)?;
    tape.record(
        out,
        &[p],
        Box::new(LabelToDepth {
            k: th.k() as f64,
            log_step: th.log_step(),
        }),
    )
}
