//! Labeled images, the synthetic shapes generator and file I/O.

mod manifest;
mod pnm;
mod synth;

pub use manifest::{read_manifest, write_dataset, ManifestEntry};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm};
pub use synth::{class_color, class_separability_check, generate_dataset, generate_image, ShapeKind, SyntheticSpec};

use crate::tensor::Tensor;
use crate::IGNORE_INDEX;

/// Per-pixel class indices of an `H×W` image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Option<Self> {
        (labels.len() == height * width).then_some(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self { height, width, labels: vec![label; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.labels.contains(&class)
    }

    /// Binary indicator of `class`, one entry per pixel.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Replaces every label not in `keep` (and not ignore) by `to`.
    pub fn map_outside(&mut self, keep: &[u8], to: u8) {
        for l in &mut self.labels {
            if *l != IGNORE_INDEX && !keep.contains(l) {
                *l = to;
            }
        }
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        Self { height: self.height, width: self.width, labels }
    }
}

/// An image `x` with `C×H×W` values in `[0, 1]` and its mask `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub image: Tensor,
    pub mask: LabelMask,
}

impl LabeledImage {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn flipped_horizontal(&self) -> Self {
        let s = self.image.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.image.data();
        let mut data = Vec::with_capacity(src.len());
        for ch in 0..c {
            for y in 0..h {
                let row = &src[(ch * h + y) * w..][..w];
                data.extend(row.iter().rev());
            }
        }
        Self {
            id: self.id,
            image: Tensor::new(vec![c, h, w], data).expect("same shape"),
            mask: self.mask.flipped_horizontal(),
        }
    }
}

/// Ordered collection of labeled images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegDataset {
    pub items: Vec<LabeledImage>,
}

impl SegDataset {
    pub fn new(items: Vec<LabeledImage>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledImage> {
        self.items.iter()
    }

    /// Images with at least one pixel of `class`, in order.
    pub fn with_class(&self, class: u8) -> impl Iterator<Item = &LabeledImage> {
        self.items.iter().filter(move |it| it.mask.contains(class))
    }
}
