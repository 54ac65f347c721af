use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;

use super::{poly_lr, Sgd};
use crate::data::{LabelMask, SegDataset};
use crate::nn::{stack_images, SegModel};
use crate::protolearn::{total_loss, LossConfig, TeacherOutputs, TeacherSnapshot};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

/// Optimization hyperparameters shared by the base and FSL steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub lr_base: f64,
    pub lr_fsl: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters_base: usize,
    pub iters_fsl: usize,
    pub batch_size_base: usize,
    /// FSL batches hold `min(fsl_batch_cap, |D^t|)` images.
    pub fsl_batch_cap: usize,
    /// Random horizontal flip with probability 1/2.
    pub flip: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-2,
            lr_fsl: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            iters_base: 2000,
            iters_fsl: 1000,
            batch_size_base: 8,
            fsl_batch_cap: 10,
            flip: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [("lr_base", self.lr_base), ("lr_fsl", self.lr_fsl)];
        if let Some((k, v)) = reals.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay nonnegative".into()));
        }
        let ints = [
            ("iters_base", self.iters_base),
            ("iters_fsl", self.iters_fsl),
            ("batch_size_base", self.batch_size_base),
            ("fsl_batch_cap", self.fsl_batch_cap),
        ];
        if let Some((k, _)) = ints.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        Ok(())
    }

    pub fn fsl_batch_size(&self, dataset_len: usize) -> usize {
        self.fsl_batch_cap.min(dataset_len)
    }
}

/// One optimization run over a fixed dataset.
#[derive(Debug, Clone)]
pub struct TrainJob<'a> {
    /// Masks must already hold only trainable labels or the ignore index.
    pub dataset: &'a SegDataset,
    pub iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub flip: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub teacher: Option<&'a TeacherSnapshot>,
}

/// Loss values of one iteration, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterLoss {
    pub total: f64,
    pub ce: f64,
    pub distill: Option<f64>,
}

/// Per-iteration losses and the batch size actually used.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<IterLoss>,
    pub batch_size: usize,
}

/// Minibatch SGD on `model` with the poly schedule. Running statistics of
/// non-frozen normalization layers follow the training batches.
pub fn train(model: &mut SegModel, job: &TrainJob<'_>, rng: &mut Rng) -> Result<TrainLog> {
    let n = job.dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    let bs = job.batch_size.clamp(1, n);
    let items: Vec<_> = job.dataset.iter().collect();
    let mut opt = Sgd::new(job.momentum, job.weight_decay);
    let mut cache: HashMap<(usize, bool), TeacherOutputs> = HashMap::new();
    let classes = model.classes().to_vec();
    let mut log = TrainLog { losses: Vec::with_capacity(job.iters), batch_size: bs };

    for it in 0..job.iters {
        let picks: Vec<usize> = if bs == n { (0..n).collect() } else { index::sample(rng, n, bs).into_vec() };
        let flips: Vec<bool> = picks.iter().map(|_| job.flip && rng.random_bool(0.5)).collect();
        let mut images = Vec::with_capacity(bs);
        let mut masks: Vec<LabelMask> = Vec::with_capacity(bs);
        for (&i, &f) in picks.iter().zip(&flips) {
            let item = if f { items[i].flipped_horizontal() } else { items[i].clone() };
            images.push(item.image);
            masks.push(item.mask);
        }
        let image_refs: Vec<&Tensor> = images.iter().collect();
        let batch = stack_images(&image_refs)?;

        let teacher_out = match job.teacher {
            Some(t) => {
                for (k, (&i, &f)) in picks.iter().zip(&flips).enumerate() {
                    if let std::collections::hash_map::Entry::Vacant(e) = cache.entry((i, f)) {
                        e.insert(t.outputs(&stack_images(&[&images[k]])?)?);
                    }
                }
                let parts: Vec<&TeacherOutputs> = picks.iter().zip(&flips).map(|(&i, &f)| &cache[&(i, f)]).collect();
                Some(TeacherOutputs::concat(&parts)?)
            }
            None => None,
        };

        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, true, true)?;
        let mask_refs: Vec<&LabelMask> = masks.iter().collect();
        let terms = total_loss(&mut g, &fwd, &classes, &mask_refs, teacher_out.as_ref(), &job.loss)?;
        let total = g.scalar(terms.total);
        if !total.is_finite() {
            return Err(Error::Config(format!("loss became {total} at iteration {it}; lower the learning rate")));
        }
        log.losses.push(IterLoss { total, ce: terms.ce, distill: terms.distill });
        let grads = g.backward(terms.total)?;
        model.zero_grad();
        for (p, &v) in model.params_mut().into_iter().zip(&fwd.params) {
            grads.accumulate_into(v, p)?;
        }
        let lr = poly_lr(it, job.iters, job.lr)?;
        opt.step(&mut model.params_mut(), lr)?;
        model.apply_norm_stats(&fwd.norm_stats);
    }
    Ok(log)
}
