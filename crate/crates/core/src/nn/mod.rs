//! Feature extractor, cosine-prototype classifier and normalization layers.

pub mod checkpoint;
mod classifier;
mod extractor;
mod model;
mod norm;

pub use classifier::{class_probabilities, cosine_scores, random_unit, CosineClassifier};
pub use extractor::{stack_images, ConvBlock, ExtractorVars, FeatureExtractor};
pub use model::{ModelConfig, ModelForward, SegModel};
pub use norm::{NormLayer, NormMode};
