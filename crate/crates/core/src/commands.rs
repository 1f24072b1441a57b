//! File-level commands behind the `aced` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{
    depth_scale, generate_scene, load_manifest, read_pgm16, read_ppm, write_manifest, write_pgm16, write_ppm,
    write_sample, ManifestEntry, CONFIDENCE_SCALE,
};
use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, Shape, Tensor};
use crate::network::DepthNet;
use crate::train::{clamp_to_range, evaluate, train, EvalOutcome, TrainOutcome};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `num_samples` scenes starting at `data_start` plus a manifest;
/// returns the manifest path.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let spec = cfg.scene_spec()?;
    let scale = depth_scale(cfg.beta);
    let mut entries = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples as u64 {
        let index = cfg.data_start + i;
        let sample = generate_scene(&spec, index)?;
        let image = format!("scene_{index:05}.ppm");
        let depth = format!("scene_{index:05}.pgm");
        write_sample(&out_dir.join(&image), &out_dir.join(&depth), &sample, scale)?;
        entries.push(ManifestEntry {
            image: image.into(),
            depth: depth.into(),
        });
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Trains on the manifest's samples, streaming JSON-lines to `log`, and
/// saves the checkpoint.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, checkpoint: &Path, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = load_manifest(manifest)?;
    let outcome = train(cfg, &samples, |r| {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
        Ok(())
    })?;
    log.flush()?;
    outcome.params.save(checkpoint)?;
    Ok(outcome)
}

/// Loads a checkpoint and checks it against the configured network.
pub fn load_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<ParamStore> {
    let params = ParamStore::load(checkpoint)?;
    DepthNet::new(cfg.network())?
        .check_params(&params)
        .map_err(|e| Error::Checkpoint(format!("{} does not match the config: {e}", checkpoint.display())))?;
    Ok(params)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let samples = load_manifest(manifest)?;
    evaluate(cfg, &params, &samples)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferOutputs {
    pub depth: PathBuf,
    pub confidence: PathBuf,
    pub visualization: PathBuf,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Grayscale image mapping `[alpha, beta]` linearly onto `[0, 1]`.
pub fn render_depth(depth: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    let s = depth.shape();
    if s.batch() != 1 || s.channels() != 1 {
        return Err(crate::error::shape_err(
            "render_depth",
            format!("expected 1x1xHxW, got {s}"),
        ));
    }
    Ok(Tensor::from_fn(
        Shape::new(1, 3, s.height(), s.width()),
        |[_, _, y, x]| ((depth.get(0, 0, y, x) - alpha) / (beta - alpha)).clamp(0.0, 1.0),
    ))
}

/// Writes `<prefix>_depth.pgm`, `<prefix>_confidence.pgm` and
/// `<prefix>_depth.ppm` for one PPM image.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, image: &Path, prefix: &Path) -> Result<InferOutputs> {
    cfg.validate()?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let img = read_ppm(image)?;
    let net = DepthNet::new(cfg.network())?;
    let pred = net.predict(&params, &img, &cfg.thresholds()?)?;
    let depth = clamp_to_range(&pred.depth, cfg.alpha, cfg.beta);
    let out = InferOutputs {
        depth: with_suffix(prefix, "_depth.pgm"),
        confidence: with_suffix(prefix, "_confidence.pgm"),
        visualization: with_suffix(prefix, "_depth.ppm"),
    };
    if let Some(dir) = out.depth.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_pgm16(&out.depth, &depth, depth_scale(cfg.beta))?;
    write_pgm16(&out.confidence, &pred.confidence, CONFIDENCE_SCALE)?;
    write_ppm(&out.visualization, &render_depth(&depth, cfg.alpha, cfg.beta)?)?;
    Ok(out)
}

/// Renders a depth PGM as a grayscale PPM.
pub fn cmd_render(cfg: &RunConfig, depth: &Path, out: &Path) -> Result<()> {
    let (d, _) = read_pgm16(depth)?;
    write_ppm(out, &render_depth(&d, cfg.alpha, cfg.beta)?)
}
