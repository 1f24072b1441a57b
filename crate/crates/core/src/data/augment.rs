use crate::error::{Error, Result};
use crate::gradcore::{Rng, Shape, Tensor};

use super::{plane_shape, SceneSample};

pub const BRIGHTNESS: (f64, f64) = (0.8, 1.25);
pub const CONTRAST: (f64, f64) = (0.9, 1.1);
pub const COLOR: (f64, f64) = (0.95, 1.05);

/// Explicit augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub brightness: f64,
    pub contrast: f64,
    pub color: [f64; 3],
}

impl AugmentParams {
    /// Full crop, no photometric change.
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentParams {
            top: 0,
            left: 0,
            height,
            width,
            brightness: 1.0,
            contrast: 1.0,
            color: [1.0; 3],
        }
    }

    /// Draws a random crop of `crop` = (h, w) inside `size` plus photometric
    /// factors.
    pub fn sample(rng: &mut Rng, size: (usize, usize), crop: (usize, usize)) -> Result<Self> {
        check_crop(size, crop.0, crop.1, 0, 0)?;
        Ok(AugmentParams {
            top: rng.below(size.0 - crop.0 + 1),
            left: rng.below(size.1 - crop.1 + 1),
            height: crop.0,
            width: crop.1,
            brightness: rng.uniform(BRIGHTNESS.0, BRIGHTNESS.1),
            contrast: rng.uniform(CONTRAST.0, CONTRAST.1),
            color: [
                rng.uniform(COLOR.0, COLOR.1),
                rng.uniform(COLOR.0, COLOR.1),
                rng.uniform(COLOR.0, COLOR.1),
            ],
        })
    }
}

fn check_crop(size: (usize, usize), h: usize, w: usize, top: usize, left: usize) -> Result<()> {
    if h == 0 || w == 0 || top + h > size.0 || left + w > size.1 {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w} at ({top}, {left}) does not fit a {}x{} image",
            size.0, size.1
        )));
    }
    Ok(())
}

fn crop(t: &Tensor, p: &AugmentParams) -> Tensor {
    Tensor::from_fn(Shape::new(1, t.shape().channels(), p.height, p.width), |[_, c, y, x]| {
        t.get(0, c, y + p.top, x + p.left)
    })
}

/// Applies `p`: crop everything, then brightness, contrast about the image
/// mean, and per-channel gain on the image only.
pub fn apply_augment(sample: &SceneSample, p: &AugmentParams) -> Result<SceneSample> {
    check_crop((sample.height(), sample.width()), p.height, p.width, p.top, p.left)?;
    let mut image = crop(&sample.image, p);
    let depth = crop(&sample.depth, p);
    let mask = crop(&sample.mask, p);
    debug_assert_eq!(depth.shape(), plane_shape(p.height, p.width));

    let n = image.numel() as f64;
    let mean = image.data().iter().sum::<f64>() * p.brightness / n;
    let plane = p.height * p.width;
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let x = *v * p.brightness;
        let x = x * p.contrast + mean * (1.0 - p.contrast);
        *v = (x * p.color[i / plane]).clamp(0.0, 1.0);
    }
    SceneSample::new(image, depth, mask)
}

/// Random crop to `crop` = (h, w) plus random photometric jitter.
pub fn augment(sample: &SceneSample, crop: (usize, usize), rng: &mut Rng) -> Result<SceneSample> {
    let p = AugmentParams::sample(rng, (sample.height(), sample.width()), crop)?;
    apply_augment(sample, &p)
}
