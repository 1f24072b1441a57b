//! Dense depth metrics: rel, log10, rms, threshold accuracies and the
//! single-plane directed depth error.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gradcore::Tensor;

pub const DEFAULT_DDE_PLANE: f64 = 3.0;
pub const DELTA_BASE: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub dde: f64,
    pub pixel_count: usize,
    /// Percent of pixels predicted beyond the plane while truly in front.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dde_over: Option<f64>,
    /// Percent of pixels predicted in front of the plane while truly beyond.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dde_under: Option<f64>,
}

/// Pooled per-pixel sums; merging accumulators is order independent up to
/// floating-point summation order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    n: usize,
    abs_rel: f64,
    abs_log10: f64,
    sq: f64,
    delta: [usize; 3],
    agree: usize,
    over: usize,
    under: usize,
}

fn check_inputs(op: &'static str, d: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<()> {
    if d.shape() != gt.shape() || d.shape() != mask.shape() {
        return Err(shape_err(
            op,
            format!(
                "prediction {}, ground truth {}, mask {}",
                d.shape(),
                gt.shape(),
                mask.shape()
            ),
        ));
    }
    Ok(())
}

fn valid(m: f64) -> bool {
    m > 0.0
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every masked pixel; `plane` is the DDE reference depth.
    pub fn add(&mut self, d: &Tensor, gt: &Tensor, mask: &Tensor, plane: f64) -> Result<()> {
        check_inputs("compute_metrics", d, gt, mask)?;
        check_plane(plane)?;
        let mut acc = *self;
        for (i, ((&p, &g), &m)) in d.data().iter().zip(gt.data()).zip(mask.data()).enumerate() {
            if !valid(m) {
                continue;
            }
            for v in [p, g] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Domain {
                        op: "compute_metrics",
                        index: i,
                        value: v,
                    });
                }
            }
            acc.n += 1;
            acc.abs_rel += (p - g).abs() / g;
            acc.abs_log10 += (p.log10() - g.log10()).abs();
            acc.sq += (p - g) * (p - g);
            let ratio = (p / g).max(g / p);
            let mut thr = 1.0;
            for slot in acc.delta.iter_mut() {
                thr *= DELTA_BASE;
                if ratio < thr {
                    *slot += 1;
                }
            }
            match (p <= plane, g <= plane) {
                (a, b) if a == b => acc.agree += 1,
                (false, true) => acc.over += 1,
                _ => acc.under += 1,
            }
        }
        *self = acc;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.n += other.n;
        self.abs_rel += other.abs_rel;
        self.abs_log10 += other.abs_log10;
        self.sq += other.sq;
        for (a, b) in self.delta.iter_mut().zip(other.delta) {
            *a += b;
        }
        self.agree += other.agree;
        self.over += other.over;
        self.under += other.under;
    }

    pub fn pixel_count(&self) -> usize {
        self.n
    }

    pub fn report(&self, directed: bool) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("metrics over an empty mask".into()));
        }
        let n = self.n as f64;
        let pct = |c: usize| 100.0 * c as f64 / n;
        Ok(MetricReport {
            rel: self.abs_rel / n,
            log10: self.abs_log10 / n,
            rms: (self.sq / n).sqrt(),
            delta1: pct(self.delta[0]),
            delta2: pct(self.delta[1]),
            delta3: pct(self.delta[2]),
            dde: pct(self.agree),
            pixel_count: self.n,
            dde_over: directed.then(|| pct(self.over)),
            dde_under: directed.then(|| pct(self.under)),
        })
    }
}

fn check_plane(plane: f64) -> Result<()> {
    if !(plane > 0.0 && plane.is_finite()) {
        return Err(Error::InvalidArgument(format!("DDE plane {plane} must be positive")));
    }
    Ok(())
}

/// Metrics over the masked pixels, DDE at the default plane.
pub fn compute_metrics(d: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<MetricReport> {
    compute_metrics_at(d, gt, mask, DEFAULT_DDE_PLANE, false)
}

pub fn compute_metrics_at(d: &Tensor, gt: &Tensor, mask: &Tensor, plane: f64, directed: bool) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.add(d, gt, mask, plane)?;
    acc.report(directed)
}

/// Percent of masked pixels on the same side of `plane` in both maps.
pub fn compute_dde(d: &Tensor, gt: &Tensor, mask: &Tensor, plane: f64) -> Result<f64> {
    check_inputs("compute_dde", d, gt, mask)?;
    check_plane(plane)?;
    let (mut n, mut agree) = (0usize, 0usize);
    for ((&p, &g), &m) in d.data().iter().zip(gt.data()).zip(mask.data()) {
        if valid(m) {
            n += 1;
            if (p <= plane) == (g <= plane) {
                agree += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("DDE over an empty mask".into()));
    }
    Ok(100.0 * agree as f64 / n as f64)
}
