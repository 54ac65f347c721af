use super::{class_probabilities, cosine_scores, stack_images, CosineClassifier, FeatureExtractor, NormMode};
use crate::rng::Rng;
use crate::tensor::{Graph, NormStats, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Architecture and classifier hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `[c_in, c_1, …, d]`
    pub channels: Vec<usize>,
    pub tau: f64,
    pub learn_tau: bool,
    pub norm_momentum: f64,
    pub br_clip: Option<(f64, f64)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: vec![3, 16, 16, 16], tau: 4.0, learn_tau: false, norm_momentum: 0.1, br_clip: None }
    }
}

/// `φ = g ∘ f`: feature extractor plus cosine classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub extractor: FeatureExtractor,
    pub classifier: CosineClassifier,
}

/// Handles recorded by [`SegModel::forward`].
#[derive(Debug)]
pub struct ModelForward {
    /// `[P×d]` pixel features, `P = N·H·W`.
    pub features: Var,
    /// `[P×|C|]`
    pub scores: Var,
    /// `[P×|C|]`
    pub probs: Var,
    /// Leaves in the order of [`SegModel::params_mut`].
    pub params: Vec<Var>,
    pub norm_stats: Vec<Option<NormStats>>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl SegModel {
    pub fn new(cfg: &ModelConfig, classes: Vec<u8>, rng: &mut Rng) -> Self {
        let mut extractor = FeatureExtractor::new(&cfg.channels, rng);
        for n in extractor.norm_layers_mut() {
            n.momentum = cfg.norm_momentum;
            n.clip = cfg.br_clip;
        }
        let mut classifier = CosineClassifier::random(extractor.feature_dim(), classes, cfg.tau, rng);
        classifier.learn_tau = cfg.learn_tau;
        Self { extractor, classifier }
    }

    pub fn classes(&self) -> &[u8] {
        &self.classifier.classes
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        self.extractor.norm_layers_mut().for_each(|n| n.mode = mode);
    }

    pub fn freeze_norm_stats(&mut self) {
        self.extractor.norm_layers_mut().for_each(|n| n.frozen = true);
    }

    /// Records `φ` on a `[N×C×H×W]` batch.
    pub fn forward(&self, g: &mut Graph, batch: &Tensor, training: bool, trainable: bool) -> Result<ModelForward> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid(format!("expected [N, C, H, W] batch, got {s:?}")).into());
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let x = g.constant(batch);
        let (features, ev, norm_stats) = self.extractor.record(g, x, training, trainable)?;
        let (weight, tau) = self.classifier.record_leaves(g, trainable);
        let scores = cosine_scores(g, features, weight, tau).map_err(|e| match e {
            TensorError::DegenerateNorm { slice, norm } if slice < n * h * w => {
                Error::DegenerateFeature { image: slice / (h * w), y: (slice % (h * w)) / w, x: slice % w, norm }
            }
            e => e.into(),
        })?;
        let probs = class_probabilities(g, scores)?;
        let mut params: Vec<Var> = ev.iter().collect();
        params.push(weight);
        if trainable && self.classifier.learn_tau {
            params.push(tau);
        }
        Ok(ModelForward { features, scores, probs, params, norm_stats, batch: n, height: h, width: w })
    }

    /// Convenience over [`SegModel::forward`] for a slice of images.
    pub fn forward_images(&self, g: &mut Graph, images: &[&Tensor], training: bool, trainable: bool) -> Result<ModelForward> {
        let batch = stack_images(images)?;
        self.forward(g, &batch, training, trainable)
    }

    /// Trainable tensors, matching [`ModelForward::params`] for a trainable pass.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.extractor.params_mut();
        p.push(&mut self.classifier.weight);
        if self.classifier.learn_tau {
            p.push(&mut self.classifier.tau);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn apply_norm_stats(&mut self, stats: &[Option<NormStats>]) {
        self.extractor.apply_norm_stats(stats);
    }

    /// Eval-mode class-probability map of one image, `[H·W × |C|]`.
    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_images(&mut g, &[image], false, false)?;
        Ok(g.tensor(out.probs))
    }

    /// Eval-mode argmax class id per pixel.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let out = self.forward_images(&mut g, &[image], false, false)?;
        let c = self.classifier.num_classes();
        Ok(g.value(out.scores)
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                self.classifier.classes[best]
            })
            .collect())
    }
}
