use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{LabelMask, LabeledImage, SegDataset};
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAX_ATTEMPTS: usize = 1000;
const TEXTURE_AMPLITUDE: f64 = 0.04;
/// Salt separating the probe-set stream from dataset streams.
const PROBE_SALT: u64 = 0x5052_4F42_4531;

/// Parameters of the synthetic shapes benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus shape classes.
    pub n_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_pixels_per_shape: usize,
    pub color_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_classes: 9,
            min_shapes: 1,
            max_shapes: 3,
            min_pixels_per_shape: 16,
            color_noise_sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class.max(1) - 1) % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Circle,
            _ => ShapeKind::Triangle,
        }
    }
}

/// RGB lattice `{0, ½, 1}³`: mid-gray first (background), then the eight
/// cube corners, then the remaining points.
fn palette() -> Vec<[f64; 3]> {
    let mut colors = vec![[0.5, 0.5, 0.5]];
    colors.extend([
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 0.0, 0.0],
        [1.0, 1.0, 1.0],
    ]);
    let levels = [0.0, 0.5, 1.0];
    for r in levels {
        for g in levels {
            for b in levels {
                let c = [r, g, b];
                if !colors.contains(&c) {
                    colors.push(c);
                }
            }
        }
    }
    colors
}

/// Base RGB color of `class`, if the palette covers it.
pub fn class_color(class: u8) -> Option<[f64; 3]> {
    palette().get(class as usize).copied()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl SyntheticSpec {
    /// Structural checks plus the color-separation invariant.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let colors = palette();
        let min_sep = (0..self.n_classes)
            .flat_map(|i| (i + 1..self.n_classes).map(move |j| (i, j)))
            .map(|(i, j)| dist(&colors[i], &colors[j]))
            .fold(f64::INFINITY, f64::min);
        if min_sep < 6.0 * self.color_noise_sigma {
            return Err(Error::Config(format!(
                "class colors are {min_sep} apart, need at least 6·sigma = {}",
                6.0 * self.color_noise_sigma
            )));
        }
        Ok(())
    }

    fn validate_structure(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.n_classes < 2 || self.n_classes > palette().len() {
            return Err(Error::Config(format!("n_classes must be in 2..={}, got {}", palette().len(), self.n_classes)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!("invalid shapes range {}..={}", self.min_shapes, self.max_shapes)));
        }
        if !(self.color_noise_sigma >= 0.0 && self.color_noise_sigma.is_finite()) {
            return Err(Error::Config("color_noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn rasterize(kind: ShapeKind, spec: &SyntheticSpec, rng: &mut Rng) -> Vec<usize> {
    let (h, w) = (spec.height, spec.width);
    let mut pixels = Vec::new();
    match kind {
        ShapeKind::Rectangle => {
            let rw = rng.random_range(4..=10).min(w);
            let rh = rng.random_range(4..=10).min(h);
            let x0 = rng.random_range(0..=w - rw);
            let y0 = rng.random_range(0..=h - rh);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    pixels.push(y * w + x);
                }
            }
        }
        ShapeKind::Circle => {
            let r: f64 = rng.random_range(3.0..5.0);
            let cx: f64 = rng.random_range(0.0..w as f64);
            let cy: f64 = rng.random_range(0.0..h as f64);
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        pixels.push(y * w + x);
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            let leg = rng.random_range(6..=13usize);
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            for dy in 0..leg {
                for dx in 0..leg - dy {
                    let (x, y) = (x0 + dx, y0 + dy);
                    if x < w && y < h {
                        pixels.push(y * w + x);
                    }
                }
            }
        }
    }
    pixels
}

/// Generates image `id`; the result depends only on `(spec, id, allowed)`.
pub fn generate_image(spec: &SyntheticSpec, id: u64, allowed: &[u8]) -> Result<LabeledImage> {
    spec.validate_structure()?;
    if let Some(&c) = allowed.iter().find(|&&c| c == 0 || c as usize >= spec.n_classes) {
        return Err(Error::Config(format!("class {c} is not a shape class of this generator")));
    }
    let mut rng = rng_for(spec.seed, &[id]);
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u8; h * w];
    if !allowed.is_empty() {
        let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
        let mut attempts = 0;
        for _ in 0..n_shapes {
            let class = allowed[rng.random_range(0..allowed.len())];
            let kind = ShapeKind::for_class(class);
            loop {
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(Error::PlacementFailed { image: id, attempts: MAX_ATTEMPTS });
                }
                let pixels = rasterize(kind, spec, &mut rng);
                if pixels.len() >= spec.min_pixels_per_shape && pixels.iter().all(|&p| labels[p] == 0) {
                    pixels.iter().for_each(|&p| labels[p] = class);
                    break;
                }
            }
        }
    }

    let colors = palette();
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = (spec.color_noise_sigma > 0.0).then(|| Normal::new(0.0, spec.color_noise_sigma).expect("validated sigma"));
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let label = labels[p];
            let texture = if label == 0 {
                TEXTURE_AMPLITUDE * ((x + y) as f64 * std::f64::consts::FRAC_PI_4 + phase).sin()
            } else {
                0.0
            };
            for ch in 0..3 {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                data[ch * h * w + p] = (colors[label as usize][ch] + texture + n).clamp(0.0, 1.0);
            }
        }
    }
    Ok(LabeledImage {
        id,
        image: Tensor::new(vec![3, h, w], data)?,
        mask: LabelMask::new(h, w, labels).expect("sized above"),
    })
}

/// Images with ids `first_id .. first_id + n_images`.
pub fn generate_dataset(spec: &SyntheticSpec, first_id: u64, n_images: usize, allowed: &[u8]) -> Result<SegDataset> {
    let items = (0..n_images as u64).map(|i| generate_image(spec, first_id + i, allowed)).collect::<Result<_>>()?;
    Ok(SegDataset::new(items))
}

/// True iff nearest-class-color classification of raw pixels reaches 99%
/// accuracy on a 100-image probe set.
pub fn class_separability_check(spec: &SyntheticSpec) -> Result<bool> {
    let colors = &palette()[..spec.n_classes];
    let probe_spec = SyntheticSpec { seed: spec.seed ^ PROBE_SALT, ..spec.clone() };
    let all: Vec<u8> = (1..spec.n_classes as u8).collect();
    let probe = generate_dataset(&probe_spec, 0, 100, &all)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for item in probe.iter() {
        let hw = spec.height * spec.width;
        let px = item.image.data();
        for (p, &label) in item.mask.labels().iter().enumerate() {
            let rgb = [px[p], px[hw + p], px[2 * hw + p]];
            let pred = colors
                .iter()
                .enumerate()
                .min_by(|a, b| dist(a.1, &rgb).total_cmp(&dist(b.1, &rgb)))
                .map(|(i, _)| i)
                .expect("non-empty palette");
            correct += (pred == label as usize) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 >= 0.99 * total as f64)
}
