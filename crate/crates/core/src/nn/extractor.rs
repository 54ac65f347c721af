use rand_distr::{Distribution, Normal};

use super::NormLayer;
use crate::rng::Rng;
use crate::tensor::{Graph, NormStats, Result, Tensor, TensorError, Var};

/// conv 3×3 → norm → optional relu
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub norm: NormLayer,
    pub relu: bool,
}

impl ConvBlock {
    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }
}

/// Stack of padded convolution blocks; spatial size is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub blocks: Vec<ConvBlock>,
}

/// Leaves registered for one extractor forward pass, in parameter order.
#[derive(Debug, Clone)]
pub struct ExtractorVars {
    pub per_block: Vec<[Var; 4]>,
}

impl FeatureExtractor {
    /// He-initialized blocks for `channels = [c_in, c_1, …, d]`. Every block
    /// but the last ends with a relu, so pixel features are not confined to
    /// the non-negative orthant and cannot collapse to exact zero.
    pub fn new(channels: &[usize], rng: &mut Rng) -> Self {
        assert!(channels.len() >= 2, "need at least one layer");
        let last = channels.len() - 2;
        let blocks = channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (cin, cout) = (w[0], w[1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let kernel = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
                ConvBlock {
                    kernel: Tensor::new(vec![cout, cin, 3, 3], kernel).expect("sized"),
                    bias: Tensor::zeros(vec![cout]),
                    norm: NormLayer::new(cout),
                    relu: i != last,
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().expect("non-empty").out_channels()
    }

    /// Records the forward pass of a `[N×C×H×W]` batch and returns
    /// `[N·H·W × d]` pixel features, one row per pixel.
    pub fn record(
        &self,
        g: &mut Graph,
        input: Var,
        training: bool,
        trainable: bool,
    ) -> Result<(Var, ExtractorVars, Vec<Option<NormStats>>)> {
        let c = g.shape(input).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(TensorError::ShapeMismatch { lhs: g.shape(input).to_vec(), rhs: self.blocks[0].kernel.shape().to_vec() });
        }
        let mut x = input;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
            let vars = [leaf(g, &b.kernel), leaf(g, &b.bias), leaf(g, &b.norm.gamma), leaf(g, &b.norm.beta)];
            let conv = g.conv2d(x, vars[0], vars[1])?;
            let (normed, st) = b.norm.record(g, conv, vars[2], vars[3], training)?;
            x = if b.relu { g.relu(normed)? } else { normed };
            per_block.push(vars);
            stats.push(st);
        }
        let features = g.channels_last(x)?;
        Ok((features, ExtractorVars { per_block }, stats))
    }

    pub fn apply_norm_stats(&mut self, stats: &[Option<NormStats>]) {
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            if let Some(s) = s {
                b.norm.update_running(s);
            }
        }
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.blocks.iter_mut().map(|b| &mut b.norm)
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> {
        self.blocks.iter().map(|b| &b.norm)
    }

    /// Mutable parameters in the order of [`ExtractorVars`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.kernel, &mut b.bias, &mut b.norm.gamma, &mut b.norm.beta])
            .collect()
    }

    /// Per-pixel features of a single `C×H×W` image as an `H×W×d` tensor.
    /// Training mode updates running statistics of non-frozen layers.
    pub fn feature_extract(&mut self, image: &Tensor, training: bool) -> Result<Tensor> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(TensorError::Invalid(format!("expected C×H×W image, got {s:?}")));
        }
        let mut g = Graph::new();
        let x = g.constant(image);
        let x = g.reshape(x, vec![1, s[0], s[1], s[2]])?;
        let (f, _, stats) = self.record(&mut g, x, training, false)?;
        self.apply_norm_stats(&stats);
        g.tensor(f).reshape(vec![s[1], s[2], self.feature_dim()])
    }
}

impl ExtractorVars {
    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.per_block.iter().flatten().copied()
    }
}

/// Stacks same-sized `C×H×W` images into `[N×C×H×W]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| TensorError::Invalid("empty batch".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != s.as_slice() {
            return Err(TensorError::ShapeMismatch { lhs: s, rhs: img.shape().to_vec() });
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&s);
    Tensor::new(shape, data)
}
