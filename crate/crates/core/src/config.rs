//! Flat `key = value` run configuration.
//!
//! Layering: [`RunConfig::default`], then a config file, then individual
//! overrides, each through [`RunConfig::set`]. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::gradcore::AdamConfig;
use crate::losses::LossWeights;
use crate::network::NetworkConfig;
use crate::sid::{DepthRange, SidThresholds};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Ordinal loss only; evaluated by hard decode.
    Baseline,
    /// Full end-to-end model with refinement.
    Aced,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "aced" => Ok(Mode::Aced),
            _ => Err(Error::Config(format!("mode must be `baseline` or `aced`, got `{s}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Aced => "aced",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub fusion_width: usize,
    pub stages: usize,
    pub detach_confidence: bool,
    pub w_ord: f64,
    pub w_log: f64,
    pub w_grad: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub power: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub crop_height: usize,
    pub crop_width: usize,
    pub num_samples: usize,
    pub data_start: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise: f64,
    pub dde_plane: f64,
    pub dde_directed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Aced,
            k: 16,
            alpha: 0.5,
            beta: 8.0,
            height: 32,
            width: 32,
            base_width: 8,
            fusion_width: 8,
            stages: 4,
            detach_confidence: false,
            w_ord: 1.0,
            w_log: 1.0,
            w_grad: 1.0,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iter: 200,
            power: 0.9,
            batch_size: 8,
            augment: false,
            crop_height: 32,
            crop_width: 32,
            num_samples: 256,
            data_start: 0,
            min_objects: 1,
            max_objects: 4,
            noise: 0.02,
            dde_plane: 3.0,
            dde_directed: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

macro_rules! keys {
    ($($name:ident),* $(,)?) => {
        /// Every accepted key, in canonical order.
        pub const KEYS: &[&str] = &[$(stringify!($name)),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($name) => self.$name = parse(stringify!($name), value)?,)*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// Canonical `key = value` text; parses back to an equal config.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($name), self.$name));)*
                out
            }
        }
    };
}

keys!(
    seed,
    mode,
    k,
    alpha,
    beta,
    height,
    width,
    base_width,
    fusion_width,
    stages,
    detach_confidence,
    w_ord,
    w_log,
    w_grad,
    lr,
    beta1,
    beta2,
    eps,
    max_iter,
    power,
    batch_size,
    augment,
    crop_height,
    crop_width,
    num_samples,
    data_start,
    min_objects,
    max_objects,
    noise,
    dde_plane,
    dde_directed,
);

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, found `{raw}`", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not `key=value`")))?;
        self.set(key, value)
    }

    /// Defaults, then the optional file, then overrides in order; validated.
    pub fn layered(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        DepthRange::new(self.alpha, self.beta).map_err(|e| Error::Config(strip(&e)))?;
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 16 != 0 {
                return bad(format!("{name} must be a positive multiple of 16, got {v}"));
            }
        }
        if !(1..=4).contains(&self.stages) {
            return bad(format!("stages must be in 1..=4, got {}", self.stages));
        }
        // Crops only matter when augmenting.
        if self.augment {
            let div = 1usize << self.stages;
            if self.crop_height == 0 || self.crop_width == 0 {
                return bad("crop size must be positive".into());
            }
            if !self.crop_height.is_multiple_of(div) || !self.crop_width.is_multiple_of(div) {
                return bad(format!("crop size must be divisible by {div}"));
            }
            if self.crop_height > self.height || self.crop_width > self.width {
                return bad("crop larger than image".into());
            }
        }
        if self.base_width == 0 || self.fusion_width == 0 {
            return bad("network widths must be positive".into());
        }
        LossWeights::new(self.w_ord, self.w_log, self.w_grad).map_err(|e| Error::Config(strip(&e)))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.max_iter == 0 || self.batch_size == 0 {
            return bad("max_iter and batch_size must be positive".into());
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return bad(format!("power must be >= 0, got {}", self.power));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(self.dde_plane > self.alpha && self.dde_plane < self.beta) {
            return bad(format!(
                "dde_plane {} must lie in ({}, {})",
                self.dde_plane, self.alpha, self.beta
            ));
        }
        Ok(())
    }

    pub fn range(&self) -> Result<DepthRange> {
        DepthRange::new(self.alpha, self.beta)
    }

    pub fn thresholds(&self) -> Result<SidThresholds> {
        SidThresholds::new(self.range()?, self.k)
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            k: self.k,
            input_channels: 3,
            base_width: self.base_width,
            fusion_width: self.fusion_width,
            stages: self.stages,
            refinement: self.mode == Mode::Aced,
            detach_confidence: self.detach_confidence,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.w_ord, self.w_log, self.w_grad)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let mut spec = SceneSpec::new(self.seed, self.height, self.width, self.range()?);
        spec.min_objects = self.min_objects;
        spec.max_objects = self.max_objects;
        spec.noise = self.noise;
        Ok(spec)
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(s) | Error::InvalidArgument(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let mut back = RunConfig {
            seed: 99,
            k: 3,
            ..RunConfig::default()
        };
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn layering_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nk = 8\nlr = 0.01 # trailing\n\nmode = baseline\n").unwrap();
        let cfg = RunConfig::layered(Some(&path), &["k=12".into(), "seed=5".into()]).unwrap();
        assert_eq!(cfg.k, 12);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.mode, Mode::Baseline);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.beta, 8.0);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("colour", "1"), Err(Error::Config(_))));
        assert!(cfg.set("k", "many").is_err());
        assert!(cfg.set("mode", "fast").is_err());
        assert!(cfg.apply_text("k 4").is_err());
        assert!(cfg.apply_override("k").is_err());
        for kv in ["k=1", "alpha=9", "height=20", "dde_plane=9", "beta1=1", "lr=0"] {
            assert!(RunConfig::layered(None, &[kv.into()]).is_err(), "{kv}");
        }
        assert!(RunConfig::layered(None, &["crop_height=64".into()]).is_ok());
        assert!(RunConfig::layered(None, &["augment=true".into(), "crop_height=64".into()]).is_err());
        let zero = ["w_ord=0".into(), "w_log=0".into(), "w_grad=0".into()];
        assert!(RunConfig::layered(None, &zero).is_err());
    }

    #[test]
    fn derived_settings() {
        let cfg = RunConfig::layered(None, &["mode=baseline".into()]).unwrap();
        assert!(!cfg.network().refinement);
        assert_eq!(cfg.thresholds().unwrap().k(), 16);
        assert_eq!(cfg.scene_spec().unwrap().height, 32);
    }
}
