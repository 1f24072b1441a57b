use crate::error::{shape_err, Error, Result};
use crate::gradcore::{Rng, Shape, Tensor};
use crate::sid::DepthRange;

use super::plane_shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectShape {
    Rectangle,
    Ellipse,
}

/// Parameters of the procedural scene family.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub range: DepthRange,
    pub min_objects: usize,
    pub max_objects: usize,
    pub palette: Vec<ObjectShape>,
    /// Background depth on the top row.
    pub background_top: f64,
    /// Background depth on the bottom row.
    pub background_bottom: f64,
    /// Standard deviation of the additive image noise.
    pub noise: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize, range: DepthRange) -> Self {
        SceneSpec {
            seed,
            height,
            width,
            range,
            min_objects: 1,
            max_objects: 4,
            palette: vec![ObjectShape::Rectangle, ObjectShape::Ellipse],
            background_top: range.beta(),
            background_bottom: range.alpha(),
            noise: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::InvalidArgument(format!(
                "scene size {}x{} must be positive and divisible by 16",
                self.height, self.width
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > 0 && self.palette.is_empty() {
            return Err(Error::InvalidArgument("empty shape palette".into()));
        }
        let (a, b) = (self.range.alpha(), self.range.beta());
        for d in [self.background_top, self.background_bottom] {
            if !(a..=b).contains(&d) {
                return Err(Error::InvalidArgument(format!(
                    "background depth {d} outside [{a}, {b}]"
                )));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// One scene: image (1,3,H,W) in [0,1], depth (1,1,H,W), mask (1,1,H,W).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub depth: Tensor,
    pub mask: Tensor,
}

impl SceneSample {
    pub fn new(image: Tensor, depth: Tensor, mask: Tensor) -> Result<Self> {
        let s = image.shape();
        if s.batch() != 1 || s.channels() != 3 {
            return Err(shape_err("SceneSample", format!("image must be 1x3xHxW, got {s}")));
        }
        let plane = plane_shape(s.height(), s.width());
        if depth.shape() != plane || mask.shape() != plane {
            return Err(shape_err(
                "SceneSample",
                format!("depth {} and mask {} must be {plane}", depth.shape(), mask.shape()),
            ));
        }
        Ok(SceneSample { image, depth, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape().height()
    }

    pub fn width(&self) -> usize {
        self.image.shape().width()
    }
}

struct Object {
    shape: ObjectShape,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    depth: f64,
    albedo: [f64; 3],
}

impl Object {
    fn covers(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.shape {
            ObjectShape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ObjectShape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

/// Nearest surface at a pixel centre: (depth, albedo).
fn composite(objects: &[Object], background: f64, y: f64, x: f64) -> (f64, [f64; 3]) {
    let mut d = background;
    let mut albedo = [1.0; 3];
    for o in objects {
        if o.depth < d && o.covers(y, x) {
            d = o.depth;
            albedo = o.albedo;
        }
    }
    (d, albedo)
}

/// Deterministic scene number `index` of the family described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<SceneSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (alpha, beta) = (spec.range.alpha(), spec.range.beta());
    let mut rng = Rng::with_stream(spec.seed, index);

    let n = spec.min_objects + rng.below(spec.max_objects - spec.min_objects + 1);
    let objects: Vec<Object> = (0..n)
        .map(|_| {
            let shape = spec.palette[rng.below(spec.palette.len())];
            let ry = rng.uniform(h as f64 / 10.0, h as f64 / 3.0);
            let rx = rng.uniform(w as f64 / 10.0, w as f64 / 3.0);
            Object {
                shape,
                cy: rng.uniform(0.0, h as f64),
                cx: rng.uniform(0.0, w as f64),
                ry,
                rx,
                depth: rng.uniform(alpha, beta),
                albedo: [rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0)],
            }
        })
        .collect();

    let inv_span = 1.0 / alpha - 1.0 / beta;
    let shade = |d: f64| 0.2 + 0.8 * (1.0 / d - 1.0 / beta) / inv_span;

    let mut depth = Tensor::zeros(plane_shape(h, w));
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        let bg = spec.background_top * (1.0 - t) + spec.background_bottom * t;
        for x in 0..w {
            let (d, albedo) = composite(&objects, bg, y as f64 + 0.5, x as f64 + 0.5);
            depth.set(0, 0, y, x, d);
            let s = shade(d);
            for (c, a) in albedo.iter().enumerate() {
                image.set(0, c, y, x, (a * s + spec.noise * rng.normal()).clamp(0.0, 1.0));
            }
        }
    }
    let mask = Tensor::full(plane_shape(h, w), 1.0);
    SceneSample::new(image, depth, mask)
}
