//! Toy-scale three-part depth network.
//!
//! * Encoder: `stages` stages (default four), each
//!   `conv3x3/2 -> relu -> conv3x3 -> relu`, widths `base * (1, 2, 4, 8)` at
//!   scales 1/2 .. 1/16.
//! * Depth estimation: the deepest features are upsampled x2 and merged
//!   with the matching skip three times, a 1x1 head produces `2(K-1)`
//!   rank logits at 1/2 resolution, upsampled x2 to full resolution, then
//!   pair softmax -> expected label -> coarse depth and confidence.
//! * Refinement: every encoder map is upsampled to full resolution and
//!   passed through its own residual block; the four results are
//!   concatenated and merged by a 1x1 conv. The coarse depth, the
//!   confidence and the fused features feed a two-conv residual block
//!   whose output is added to the coarse depth.

use crate::error::{shape_err, Error, Result};
use crate::gradcore::{ParamStore, Rng, Shape, Tape, Tensor, Var};
use crate::ordhead::{confidence, expected_label, pair_softmax, soft_decode};
use crate::sid::SidThresholds;

pub const DEFAULT_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Discretization levels `K`.
    pub k: usize,
    pub input_channels: usize,
    pub base_width: usize,
    pub fusion_width: usize,
    /// Encoder depth; inputs must be divisible by `2^stages`.
    pub stages: usize,
    /// Build the fusion and refinement branches (`aced` mode).
    pub refinement: bool,
    /// Feed the confidence map to refinement without gradient.
    pub detach_confidence: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            k: 16,
            input_channels: 3,
            base_width: 8,
            fusion_width: 8,
            stages: DEFAULT_STAGES,
            refinement: true,
            detach_confidence: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("K must be >= 2, got {}", self.k)));
        }
        if !(1..=8).contains(&self.stages) {
            return Err(Error::InvalidArgument(format!(
                "stages must be in 1..=8, got {}",
                self.stages
            )));
        }
        if self.input_channels == 0 || self.base_width == 0 || self.fusion_width == 0 {
            return Err(Error::InvalidArgument("network widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of encoder stage `s` (1-based).
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << (s - 1)
    }

    pub fn logit_channels(&self) -> usize {
        2 * (self.k - 1)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let w = |s: usize| self.stage_width(s);
        let mut n = 0;
        let mut prev = self.input_channels;
        for s in 1..=self.stages {
            n += conv(prev, w(s), 3) + conv(w(s), w(s), 3);
            prev = w(s);
        }
        for s in (1..self.stages).rev() {
            n += conv(w(s + 1) + w(s), w(s), 3);
        }
        n += conv(w(1), self.logit_channels(), 1);
        if self.refinement {
            let f = self.fusion_width;
            let total: usize = (1..=self.stages).map(w).sum();
            n += (1..=self.stages).map(|s| 2 * conv(w(s), w(s), 3)).sum::<usize>();
            n += conv(total, f, 1);
            n += conv(2 + f, f, 3) + conv(f, 1, 3);
        }
        n
    }
}

/// Encoder outputs at scales 1/2, 1/4, ...
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub stages: Vec<Var>,
}

/// Every intermediate a caller may need from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    pub label: Var,
    pub coarse: Var,
    pub confidence: Var,
    pub fused: Option<Var>,
    pub refined: Option<Var>,
}

impl ForwardOutput {
    /// The final prediction: refined depth when present, otherwise coarse.
    pub fn depth(&self) -> Var {
        self.refined.unwrap_or(self.coarse)
    }
}

#[derive(Clone, Debug)]
pub struct DepthNet {
    config: NetworkConfig,
}

fn conv_shapes(store: &mut ParamStore, name: &str, i: usize, o: usize, k: usize) -> Result<()> {
    store.insert(&format!("{name}.weight"), Shape::new(o, i, k, k))?;
    store.insert(&format!("{name}.bias"), Shape::new(1, o, 1, 1))
}

impl DepthNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        Ok(DepthNet { config })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// All parameters at zero, in a fixed order.
    pub fn zero_params(&self) -> Result<ParamStore> {
        let c = &self.config;
        let w = |s: usize| c.stage_width(s);
        let mut store = ParamStore::new();
        let mut prev = c.input_channels;
        for s in 1..=c.stages {
            conv_shapes(&mut store, &format!("enc{s}.conv1"), prev, w(s), 3)?;
            conv_shapes(&mut store, &format!("enc{s}.conv2"), w(s), w(s), 3)?;
            prev = w(s);
        }
        for s in (1..c.stages).rev() {
            conv_shapes(&mut store, &format!("dec{s}"), w(s + 1) + w(s), w(s), 3)?;
        }
        conv_shapes(&mut store, "head", w(1), c.logit_channels(), 1)?;
        if c.refinement {
            for s in 1..=c.stages {
                conv_shapes(&mut store, &format!("fuse{s}.conv1"), w(s), w(s), 3)?;
                conv_shapes(&mut store, &format!("fuse{s}.conv2"), w(s), w(s), 3)?;
            }
            let total = (1..=c.stages).map(w).sum();
            conv_shapes(&mut store, "fuse.merge", total, c.fusion_width, 1)?;
            conv_shapes(&mut store, "refine.conv1", 2 + c.fusion_width, c.fusion_width, 3)?;
            conv_shapes(&mut store, "refine.conv2", c.fusion_width, 1, 3)?;
        }
        Ok(store)
    }

    /// Uniform fan-in initialisation of every parameter.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamStore> {
        let mut store = self.zero_params()?;
        store.init_uniform(rng);
        Ok(store)
    }

    /// Checks that `store` holds exactly this network's parameter layout.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let want = self.zero_params()?;
        if want.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                store.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(store.iter()) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected `{wn}` {}, found `{gn}` {}",
                    wt.shape(),
                    gt.shape()
                )));
            }
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape, p: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = tape.param(p, &format!("{name}.weight"))?;
        let b = tape.param(p, &format!("{name}.bias"))?;
        let k = tape.value(w)?.shape().height();
        tape.conv2d(x, w, b, stride, k / 2)
    }

    fn conv_relu(&self, tape: &mut Tape, p: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(tape, p, name, x, stride)?;
        tape.relu(y)
    }

    pub fn encode(&self, tape: &mut Tape, p: &ParamStore, image: Var) -> Result<EncoderFeatures> {
        let s = tape.value(image)?.shape();
        let div = 1 << self.config.stages;
        if s.channels() != self.config.input_channels || s.height() % div != 0 || s.width() % div != 0 {
            return Err(shape_err(
                "encode",
                format!(
                    "image {s} needs {} channels and a size divisible by {div}",
                    self.config.input_channels
                ),
            ));
        }
        let mut x = image;
        let mut stages = Vec::with_capacity(self.config.stages);
        for s in 1..=self.config.stages {
            x = self.conv_relu(tape, p, &format!("enc{s}.conv1"), x, 2)?;
            x = self.conv_relu(tape, p, &format!("enc{s}.conv2"), x, 1)?;
            stages.push(x);
        }
        Ok(EncoderFeatures { stages })
    }

    /// Rank logits at full resolution, `2(K-1)` channels.
    pub fn decode_to_logits(&self, tape: &mut Tape, p: &ParamStore, f: &EncoderFeatures) -> Result<Var> {
        let n = f.stages.len();
        let mut x = f.stages[n - 1];
        for s in (1..n).rev() {
            let up = tape.upsample_nearest(x, 2)?;
            let cat = tape.concat_channels(&[up, f.stages[s - 1]])?;
            x = self.conv_relu(tape, p, &format!("dec{s}"), cat, 1)?;
        }
        let half = self.conv(tape, p, "head", x, 1)?;
        tape.upsample_nearest(half, 2)
    }

    /// Multiscale fusion to `fusion_width` channels at full resolution.
    pub fn fuse_multiscale(&self, tape: &mut Tape, p: &ParamStore, f: &EncoderFeatures) -> Result<Var> {
        let mut branches = Vec::with_capacity(f.stages.len());
        for (i, &feat) in f.stages.iter().enumerate() {
            let s = i + 1;
            let up = tape.upsample_nearest(feat, 1 << s)?;
            let h = self.conv_relu(tape, p, &format!("fuse{s}.conv1"), up, 1)?;
            let r = self.conv(tape, p, &format!("fuse{s}.conv2"), h, 1)?;
            branches.push(tape.add(up, r)?);
        }
        let cat = tape.concat_channels(&branches)?;
        self.conv(tape, p, "fuse.merge", cat, 1)
    }

    /// `coarse + conv(relu(conv(concat(coarse, conf, fused))))`.
    pub fn refine(&self, tape: &mut Tape, p: &ParamStore, coarse: Var, conf: Var, fused: Var) -> Result<Var> {
        let cat = tape.concat_channels(&[coarse, conf, fused])?;
        let h = self.conv_relu(tape, p, "refine.conv1", cat, 1)?;
        let r = self.conv(tape, p, "refine.conv2", h, 1)?;
        tape.add(coarse, r)
    }

    pub fn forward(&self, tape: &mut Tape, p: &ParamStore, image: Var, th: &SidThresholds) -> Result<ForwardOutput> {
        if th.k() != self.config.k {
            return Err(Error::InvalidArgument(format!(
                "thresholds have K = {}, network K = {}",
                th.k(),
                self.config.k
            )));
        }
        let feats = self.encode(tape, p, image)?;
        let logits = self.decode_to_logits(tape, p, &feats)?;
        let probs = pair_softmax(tape, logits)?;
        let label = expected_label(tape, probs)?;
        let coarse = soft_decode(tape, probs, th)?;
        let conf = confidence(tape, probs, label)?;
        let (fused, refined) = if self.config.refinement {
            let fused = self.fuse_multiscale(tape, p, &feats)?;
            let conf_in = if self.config.detach_confidence {
                tape.detach(conf)?
            } else {
                conf
            };
            let refined = self.refine(tape, p, coarse, conf_in, fused)?;
            (Some(fused), Some(refined))
        } else {
            (None, None)
        };
        Ok(ForwardOutput {
            logits,
            probs,
            label,
            coarse,
            confidence: conf,
            fused,
            refined,
        })
    }

    /// Forward pass on a plain image tensor; returns (coarse, confidence,
    /// refined-or-coarse, probs) values.
    pub fn predict(&self, p: &ParamStore, image: &Tensor, th: &SidThresholds) -> Result<Prediction> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, p, x, th)?;
        Ok(Prediction {
            coarse: tape.value(out.coarse)?.clone(),
            confidence: tape.value(out.confidence)?.clone(),
            depth: tape.value(out.depth())?.clone(),
            probs: tape.value(out.probs)?.clone(),
        })
    }
}

/// Detached forward results.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub coarse: Tensor,
    pub confidence: Tensor,
    /// Refined depth, or coarse depth for a network without refinement.
    pub depth: Tensor,
    pub probs: Tensor,
}
