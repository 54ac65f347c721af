use super::TeacherOutputs;
use crate::data::LabelMask;
use crate::nn::ModelForward;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::{Error, Result, IGNORE_INDEX};

/// Which distillation term accompanies the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistillVariant {
    #[default]
    None,
    /// Prototype distillation against the imprinted teacher, all of `C^t`.
    Pd,
    /// Old-class distillation against the previous-step model.
    Kd,
    /// Feature-level L2 against the previous extractor.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub variant: DistillVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 10.0, variant: DistillVariant::None }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be a finite nonnegative number, got {}", self.lambda)));
        }
        Ok(())
    }

    fn distills(&self) -> bool {
        self.variant != DistillVariant::None && self.lambda != 0.0
    }
}

/// The recorded objective and the values of its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: f64,
    pub distill: Option<f64>,
}

fn cols(g: &Graph, v: Var) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [r, c] => Ok((r, c)),
        ref s => Err(TensorError::Invalid(format!("expected a [pixels, classes] matrix, got {s:?}")).into()),
    }
}

/// `-sum(weights * log(p)) / rows` where `weights` is a constant.
fn weighted_nll(g: &mut Graph, p: Var, weights: Vec<f64>, rows: usize) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    let w = g.constant_from(shape, weights)?;
    let logp = g.log(p)?;
    let prod = g.mul(w, logp)?;
    let s = g.sum(prod, None)?;
    Ok(g.scale(s, -1.0 / rows.max(1) as f64)?)
}

/// Pixel cross-entropy averaged over labelled pixels.
///
/// `masks` are in batch order and `classes[j]` is the class of column `j`.
pub fn ce_loss(g: &mut Graph, probs: Var, masks: &[&LabelMask], classes: &[u8]) -> Result<Var> {
    let (rows, c) = cols(g, probs)?;
    if c != classes.len() {
        return Err(TensorError::ShapeMismatch { lhs: vec![rows, c], rhs: vec![rows, classes.len()] }.into());
    }
    let total: usize = masks.iter().map(|m| m.labels().len()).sum();
    if total != rows {
        return Err(TensorError::Invalid(format!("{rows} probability rows for {total} mask pixels")).into());
    }
    let mut column = [usize::MAX; 256];
    for (j, &k) in classes.iter().enumerate() {
        column[k as usize] = j;
    }
    let mut weights = vec![0.0; rows * c];
    let mut unlabelled = vec![1.0; rows];
    let mut labelled = 0usize;
    let mut row = 0;
    for (image, m) in masks.iter().enumerate() {
        for (p, &label) in m.labels().iter().enumerate() {
            if label != IGNORE_INDEX {
                let j = column[label as usize];
                if j == usize::MAX {
                    return Err(Error::UnknownLabel { image, y: p / m.width(), x: p % m.width(), label });
                }
                weights[row * c + j] = 1.0;
                unlabelled[row] = 0.0;
                labelled += 1;
            }
            row += 1;
        }
    }
    // Only the true-class probability of each row enters the log; ignored
    // rows read log(1) = 0.
    let w = g.constant_from(vec![rows, c], weights)?;
    let picked = g.mul(w, probs)?;
    let p_true = g.sum(picked, Some(1))?;
    let pad = g.constant_from(vec![rows], unlabelled)?;
    let p_true = g.add(p_true, pad)?;
    let logp = g.log(p_true)?;
    let s = g.sum(logp, None)?;
    Ok(g.scale(s, -1.0 / labelled.max(1) as f64)?)
}

/// Mean per-pixel cross-entropy `H(teacher, student)` over the full class set.
pub fn pd_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    let (rows, c) = cols(g, student)?;
    match *teacher.shape() {
        [_, tc] if tc != c => return Err(Error::ClassCountMismatch { student: c, teacher: tc }),
        [tr, _] if tr == rows => {}
        _ => return Err(TensorError::ShapeMismatch { lhs: vec![rows, c], rhs: teacher.shape().to_vec() }.into()),
    }
    weighted_nll(g, student, teacher.data().to_vec(), rows)
}

/// Cross-entropy between the teacher's old-class distribution and the
/// student renormalized over the old classes.
///
/// `teacher_old` has one column per entry of `old_classes`.
pub fn kd_old_loss(g: &mut Graph, student: Var, student_classes: &[u8], teacher_old: &Tensor, old_classes: &[u8]) -> Result<Var> {
    let (rows, _) = cols(g, student)?;
    if teacher_old.shape() != [rows, old_classes.len()] {
        return Err(TensorError::ShapeMismatch { lhs: vec![rows, old_classes.len()], rhs: teacher_old.shape().to_vec() }.into());
    }
    let idx = old_classes
        .iter()
        .map(|k| {
            student_classes
                .iter()
                .position(|c| c == k)
                .ok_or_else(|| Error::Config(format!("old class {k} is not a student class")))
        })
        .collect::<Result<Vec<_>>>()?;
    let sel = g.select_columns(student, &idx)?;
    let cross = weighted_nll(g, sel, teacher_old.data().to_vec(), rows)?;
    let mass = g.sum(sel, Some(1))?;
    let log_mass = g.log(mass)?;
    let norm = g.mean(log_mass, None)?;
    Ok(g.add(cross, norm)?)
}

/// Mean over pixels of the squared distance between feature vectors.
pub fn l2_feature_loss(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    let (rows, _) = cols(g, student)?;
    if g.shape(student) != teacher.shape() {
        return Err(TensorError::ShapeMismatch { lhs: g.shape(student).to_vec(), rhs: teacher.shape().to_vec() }.into());
    }
    let t = g.constant(teacher);
    let diff = g.sub(student, t)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq, None)?;
    Ok(g.scale(s, 1.0 / rows.max(1) as f64)?)
}

/// Mean row entropy of a `[rows × classes]` distribution.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let c = probs.shape().last().copied().unwrap_or(1).max(1);
    let rows = probs.len() / c;
    let total: f64 = probs.data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    total / rows.max(1) as f64
}

/// `ce + λ·distill` for a recorded student forward.
///
/// With `λ = 0` or no variant the total is the cross-entropy node itself.
pub fn total_loss(
    g: &mut Graph,
    student: &ModelForward,
    classes: &[u8],
    masks: &[&LabelMask],
    teacher: Option<&TeacherOutputs>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let ce = ce_loss(g, student.probs, masks, classes)?;
    let ce_value = g.scalar(ce);
    if !cfg.distills() {
        return Ok(LossTerms { total: ce, ce: ce_value, distill: None });
    }
    let name = match cfg.variant {
        DistillVariant::Pd => "prototype distillation",
        DistillVariant::Kd => "old-class distillation",
        _ => "feature distillation",
    };
    let t = teacher.ok_or(Error::MissingTeacher(name))?;
    let d = match cfg.variant {
        DistillVariant::Pd => pd_loss(g, student.probs, &t.probs)?,
        DistillVariant::Kd => kd_old_loss(g, student.probs, classes, &t.old_probs, &t.old_classes)?,
        _ => l2_feature_loss(g, student.features, &t.features)?,
    };
    let d_value = g.scalar(d);
    let weighted = g.scale(d, cfg.lambda)?;
    let total = g.add(ce, weighted)?;
    Ok(LossTerms { total, ce: ce_value, distill: Some(d_value) })
}
