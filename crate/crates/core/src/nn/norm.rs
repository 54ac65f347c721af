use crate::tensor::{Graph, NormSpec, NormStats, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    BatchNorm,
    BatchRenorm,
}

/// Per-channel normalization with learnable affine parameters and running
/// statistics. `running_std` already includes the variance epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_std: Vec<f64>,
    pub momentum: f64,
    pub mode: NormMode,
    pub frozen: bool,
    /// `(r_max, d_max)` bounds for batch renorm; `None` is the unclipped form.
    pub clip: Option<(f64, f64)>,
}

impl NormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_std: vec![1.0; channels],
            momentum: 0.1,
            mode: NormMode::BatchNorm,
            frozen: false,
            clip: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Records the normalization on `g`. Does not touch running statistics;
    /// pass the returned stats to [`NormLayer::update_running`].
    pub fn record(&self, g: &mut Graph, z: Var, gamma: Var, beta: Var, training: bool) -> Result<(Var, Option<NormStats>)> {
        let spec = match (training, self.mode) {
            (false, _) => NormSpec::Running { mean: &self.running_mean, std: &self.running_std },
            (true, NormMode::BatchNorm) => NormSpec::Batch,
            (true, NormMode::BatchRenorm) => NormSpec::Renorm { mean: &self.running_mean, std: &self.running_std, clip: self.clip },
        };
        g.batch_norm(z, gamma, beta, spec)
    }

    /// Exponential moving average toward `stats`; no-op when frozen.
    pub fn update_running(&mut self, stats: &NormStats) {
        if self.frozen {
            return;
        }
        let m = self.momentum;
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * stats.mean[ch];
            self.running_std[ch] = (1.0 - m) * self.running_std[ch] + m * stats.std[ch];
        }
    }

    fn forward_mode(&mut self, z: &Tensor, expect: NormMode, training: bool) -> Result<Tensor> {
        if training && self.mode != expect {
            return Err(TensorError::Invalid(format!("layer is in {:?} mode, expected {expect:?}", self.mode)));
        }
        let mut g = Graph::new();
        let zv = g.constant(z);
        let gv = g.constant(&self.gamma);
        let bv = g.constant(&self.beta);
        let (out, stats) = self.record(&mut g, zv, gv, bv, training)?;
        if let Some(s) = stats {
            self.update_running(&s);
        }
        Ok(g.tensor(out))
    }

    /// Batch renormalization forward on `[N×C×…]` input; training only.
    pub fn batch_renorm_forward(&mut self, z: &Tensor) -> Result<Tensor> {
        self.forward_mode(z, NormMode::BatchRenorm, true)
    }

    pub fn batch_norm_forward(&mut self, z: &Tensor, training: bool) -> Result<Tensor> {
        if !training && self.mode != NormMode::BatchNorm {
            return Err(TensorError::Invalid("layer is not in BatchNorm mode".into()));
        }
        self.forward_mode(z, NormMode::BatchNorm, training)
    }
}
