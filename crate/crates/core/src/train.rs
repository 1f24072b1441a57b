//! Training loop and evaluation over in-memory samples.

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::data::{augment, stack_batch, SceneSample};
use crate::error::{Error, Result};
use crate::gradcore::{poly_lr, Adam, ParamStore, Rng, Tape, Tensor};
use crate::losses::total_loss;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::network::DepthNet;
use crate::sid::{encode_rank, hard_decode, LabelMap};

const INIT_STREAM: u64 = u64::MAX;
const ORDER_STREAM: u64 = u64::MAX - 1;
const AUGMENT_STREAM: u64 = u64::MAX - 2;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub ordinal: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad: Option<f64>,
    /// Batch rel of the model output (refined, or coarse in baseline mode).
    pub rel: f64,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<TrainRecord>,
}

/// Fresh parameters for `cfg`, seeded by `cfg.seed`.
pub fn init_params(cfg: &RunConfig) -> Result<ParamStore> {
    let net = DepthNet::new(cfg.network())?;
    net.init_params(&mut Rng::with_stream(cfg.seed, INIT_STREAM))
}

/// Epoch-shuffled batch indices.
struct BatchOrder {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, rng: Rng) -> Self {
        BatchOrder {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains from scratch on `samples`; `on_record` sees each log line as it
/// is produced.
pub fn train(
    cfg: &RunConfig,
    samples: &[SceneSample],
    mut on_record: impl FnMut(&TrainRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let net = DepthNet::new(cfg.network())?;
    let th = cfg.thresholds()?;
    let weights = cfg.loss_weights()?;
    let mut params = init_params(cfg)?;
    let mut adam = Adam::new(cfg.adam());
    let mut order = BatchOrder::new(samples.len(), Rng::with_stream(cfg.seed, ORDER_STREAM));
    let mut aug_rng = Rng::with_stream(cfg.seed, AUGMENT_STREAM);
    let mut log = Vec::with_capacity(cfg.max_iter);

    for iter in 0..cfg.max_iter {
        let idx = order.next_batch(cfg.batch_size);
        let batch: Vec<SceneSample> = if cfg.augment {
            idx.iter()
                .map(|&i| augment(&samples[i], (cfg.crop_height, cfg.crop_width), &mut aug_rng))
                .collect::<Result<_>>()?
        } else {
            idx.iter().map(|&i| samples[i].clone()).collect()
        };
        let refs: Vec<&SceneSample> = batch.iter().collect();
        let (image, depth, mask) = stack_batch(&refs)?;
        let target = encode_rank(&LabelMap::from_depth(&depth, &mask, &th)?, th.k())?;

        let mut tape = Tape::new();
        let x = tape.constant(image);
        let gt = tape.constant(depth.clone());
        let out = net.forward(&mut tape, &params, x, &th)?;
        let terms = total_loss(&mut tape, out.probs, &target, out.refined, gt, &mask, weights)?;
        let value = |v| -> Result<f64> { tape.value(v)?.item() };
        let loss = value(terms.total)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iter, value: loss });
        }
        let pred = tape.value(out.depth())?.clone();
        let rel = batch_rel(&pred, &depth, &mask);
        let record = TrainRecord {
            iter,
            lr: poly_lr(cfg.lr, iter, cfg.max_iter, cfg.power),
            loss,
            ordinal: value(terms.ordinal)?,
            log: terms.log.map(value).transpose()?,
            grad: terms.grad.map(value).transpose()?,
            rel,
        };
        tape.backward(terms.total)?;
        params.load_grads(&tape)?;
        adam.step(&mut params, record.lr)?;
        if !params.iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::Divergence { iter, value: f64::NAN });
        }
        on_record(&record)?;
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

/// Mean `|D - Dgt| / Dgt` over the mask; unlike the evaluation metrics it
/// accepts non-positive predictions.
fn batch_rel(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m > 0.0 {
            sum += (p - g).abs() / g;
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Clamps a depth map into `[alpha, beta]`.
pub fn clamp_to_range(d: &Tensor, alpha: f64, beta: f64) -> Tensor {
    let mut out = d.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(alpha, beta));
    out
}

/// Which depth map a metric refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Output {
    Coarse,
    Refined,
    Hard,
}

/// Metrics of one image for each output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub index: usize,
    pub coarse: MetricReport,
    pub refined: Option<MetricReport>,
    pub hard: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub per_image: Vec<ImageMetrics>,
    pub coarse: MetricReport,
    pub refined: Option<MetricReport>,
    pub hard: MetricReport,
}

impl EvalOutcome {
    /// The headline output of a mode: refined for `aced`, hard decode for
    /// `baseline`.
    pub fn primary(&self, mode: Mode) -> &MetricReport {
        match (mode, &self.refined) {
            (Mode::Aced, Some(r)) => r,
            _ => &self.hard,
        }
    }

    /// JSON lines: one record per image and output, then one aggregate
    /// record per output.
    pub fn json_lines(&self) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        let mut push = |index: Option<usize>, output: Output, r: &MetricReport| -> Result<()> {
            lines.push(serde_json::to_string(&EvalRecord {
                scope: if index.is_some() { "image" } else { "aggregate" }.into(),
                index,
                output,
                report: *r,
            })?);
            Ok(())
        };
        for m in &self.per_image {
            push(Some(m.index), Output::Coarse, &m.coarse)?;
            if let Some(r) = &m.refined {
                push(Some(m.index), Output::Refined, r)?;
            }
            push(Some(m.index), Output::Hard, &m.hard)?;
        }
        push(None, Output::Coarse, &self.coarse)?;
        if let Some(r) = &self.refined {
            push(None, Output::Refined, r)?;
        }
        push(None, Output::Hard, &self.hard)?;
        Ok(lines)
    }
}

/// Serialized metric line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scope: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub output: Output,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Evaluates `params` on `samples`, reporting coarse, refined and
/// hard-decoded depth separately.
pub fn evaluate(cfg: &RunConfig, params: &ParamStore, samples: &[SceneSample]) -> Result<EvalOutcome> {
    let net = DepthNet::new(cfg.network())?;
    net.check_params(params)?;
    let th = cfg.thresholds()?;
    let (plane, directed) = (cfg.dde_plane, cfg.dde_directed);
    let refine = cfg.mode == Mode::Aced;
    let mut totals = [MetricAccumulator::new(); 3];
    let mut per_image = Vec::with_capacity(samples.len());

    for (chunk_no, chunk) in samples.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let (image, depth, mask) = stack_batch(&refs)?;
        let pred = net.predict(params, &image, &th)?;
        let hard = hard_decode(&pred.probs, &th)?;
        let refined = clamp_to_range(&pred.depth, cfg.alpha, cfg.beta);
        for b in 0..chunk.len() {
            let gt = depth.batch_item(b)?;
            let m = mask.batch_item(b)?;
            let one = |acc: &mut MetricAccumulator, d: &Tensor| -> Result<MetricReport> {
                let mut a = MetricAccumulator::new();
                a.add(&d.batch_item(b)?, &gt, &m, plane)?;
                acc.merge(&a);
                a.report(directed)
            };
            let [tc, tr, th_] = &mut totals;
            let coarse = one(tc, &pred.coarse)?;
            let refined = if refine { Some(one(tr, &refined)?) } else { None };
            let hard = one(th_, &hard)?;
            per_image.push(ImageMetrics {
                index: chunk_no * cfg.batch_size + b,
                coarse,
                refined,
                hard,
            });
        }
    }
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(EvalOutcome {
        per_image,
        coarse: totals[0].report(directed)?,
        refined: if refine {
            Some(totals[1].report(directed)?)
        } else {
            None
        },
        hard: totals[2].report(directed)?,
    })
}
