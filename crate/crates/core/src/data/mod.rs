//! Synthetic scenes with dense ground truth, augmentation, and the
//! on-disk formats (binary PPM/PGM plus a tab-separated manifest).

mod augment;
mod manifest;
mod netpbm;
mod scene;

pub use augment::{apply_augment, augment, AugmentParams};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use netpbm::{
    decode_pgm16, decode_ppm, encode_pgm16, encode_ppm, read_pgm16, read_ppm, write_pgm16, write_ppm, PGM_MAXVAL,
    PPM_MAXVAL,
};
pub use scene::{generate_scene, ObjectShape, SceneSample, SceneSpec};

use std::path::Path;

use crate::error::Result;
use crate::gradcore::{Shape, Tensor};

/// Depth PGM scale for a range whose far bound is `beta`.
pub fn depth_scale(beta: f64) -> f64 {
    beta / PGM_MAXVAL as f64
}

/// Confidence PGM scale.
pub const CONFIDENCE_SCALE: f64 = 1.0 / PGM_MAXVAL as f64;

/// Writes the image as PPM and the depth as a scaled 16-bit PGM.
pub fn write_sample(image_path: &Path, depth_path: &Path, sample: &SceneSample, depth_scale: f64) -> Result<()> {
    write_ppm(image_path, &sample.image)?;
    write_pgm16(depth_path, &sample.depth, depth_scale)
}

/// Reads a sample; pixels stored as raw 0 are marked invalid.
pub fn read_sample(image_path: &Path, depth_path: &Path) -> Result<SceneSample> {
    let image = read_ppm(image_path)?;
    let (depth, _) = read_pgm16(depth_path)?;
    let mask = Tensor::new(
        depth.shape(),
        depth.data().iter().map(|&d| f64::from(d > 0.0)).collect(),
    )?;
    SceneSample::new(image, depth, mask)
}

/// Loads every sample listed in a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<SceneSample>> {
    read_manifest(path)?
        .iter()
        .map(|e| read_sample(&e.image, &e.depth))
        .collect()
}

/// Stacks samples along the batch axis: (image, depth, mask).
pub fn stack_batch(samples: &[&SceneSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let depths: Vec<&Tensor> = samples.iter().map(|s| &s.depth).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&depths)?, Tensor::stack(&masks)?))
}

pub(crate) fn plane_shape(h: usize, w: usize) -> Shape {
    Shape::new(1, 1, h, w)
}
