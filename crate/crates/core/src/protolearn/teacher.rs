use super::imprint;
use crate::data::SegDataset;
use crate::nn::SegModel;
use crate::tensor::{Graph, Tensor};
use crate::Result;

/// Frozen previous extractor with its classifier extended by imprinted
/// prototypes for the new classes. Never registered as a gradient leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    model: SegModel,
    old_columns: usize,
}

/// Constant teacher outputs for a batch of pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    /// `[P×d]` features of the previous extractor.
    pub features: Tensor,
    /// `[P×|classes|]` distribution over every teacher class.
    pub probs: Tensor,
    /// `[P×|old_classes|]` distribution of the previous-step model.
    pub old_probs: Tensor,
    pub classes: Vec<u8>,
    pub old_classes: Vec<u8>,
}

/// Deep copy of `prev_model` whose new-class prototypes come from MAP on
/// `dataset`; old prototypes are copied bit-for-bit.
pub fn build_teacher(prev_model: &SegModel, dataset: &SegDataset, new_classes: &[u8]) -> Result<TeacherSnapshot> {
    let model = imprint(prev_model, dataset, new_classes)?;
    Ok(TeacherSnapshot { model, old_columns: prev_model.classes().len() })
}

impl TeacherSnapshot {
    /// Snapshot of the previous-step model alone, for old-class and
    /// feature distillation.
    pub fn previous(prev_model: &SegModel) -> Self {
        Self { old_columns: prev_model.classes().len(), model: prev_model.clone() }
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn classes(&self) -> &[u8] {
        self.model.classes()
    }

    pub fn old_classes(&self) -> &[u8] {
        &self.model.classes()[..self.old_columns]
    }

    /// Eval-mode forward of a `[N×C×H×W]` batch.
    pub fn outputs(&self, batch: &Tensor) -> Result<TeacherOutputs> {
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, batch, false, false)?;
        let old: Vec<usize> = (0..self.old_columns).collect();
        let old_scores = g.select_columns(out.scores, &old)?;
        let old_probs = g.softmax(old_scores, 1)?;
        Ok(TeacherOutputs {
            features: g.tensor(out.features),
            probs: g.tensor(out.probs),
            old_probs: g.tensor(old_probs),
            classes: self.classes().to_vec(),
            old_classes: self.old_classes().to_vec(),
        })
    }
}

fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].shape()[1];
    let rows = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

impl TeacherOutputs {
    /// Stacks per-image outputs in batch order.
    pub fn concat(parts: &[&TeacherOutputs]) -> Result<TeacherOutputs> {
        let first = parts.first().ok_or_else(|| crate::Error::EmptyDataset("no teacher outputs to stack".into()))?;
        Ok(TeacherOutputs {
            features: concat_rows(&parts.iter().map(|p| &p.features).collect::<Vec<_>>())?,
            probs: concat_rows(&parts.iter().map(|p| &p.probs).collect::<Vec<_>>())?,
            old_probs: concat_rows(&parts.iter().map(|p| &p.old_probs).collect::<Vec<_>>())?,
            classes: first.classes.clone(),
            old_classes: first.old_classes.clone(),
        })
    }
}
