//! Confusion counting, IoU, mIoU over class subsets, harmonic mean and
//! aggregation across trials, folds and steps.

use crate::{Error, Result, IGNORE_INDEX};

/// Per-class TP/FP/FN counts. Merging is elementwise addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self { tp: vec![0; n_classes], fp: vec![0; n_classes], fn_: vec![0; n_classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn tp(&self) -> &[u64] {
        &self.tp
    }

    pub fn fp(&self) -> &[u64] {
        &self.fp
    }

    pub fn fn_(&self) -> &[u64] {
        &self.fn_
    }

    /// Counts one prediction against its ground truth, skipping pixels whose
    /// ground truth is `ignore`.
    pub fn update(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Metrics(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let n = self.n_classes();
        for (i, (&p, &t)) in pred.iter().zip(gt).enumerate() {
            if t == ignore {
                continue;
            }
            if p as usize >= n || t as usize >= n {
                return Err(Error::Metrics(format!("pixel {i}: class {} or {} outside 0..{n}", p, t)));
            }
            if p == t {
                self.tp[t as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn update_default(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        self.update(pred, gt, IGNORE_INDEX)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::Metrics(format!("cannot merge {} classes into {}", other.n_classes(), self.n_classes())));
        }
        for c in 0..self.n_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class never occurs
    /// in prediction or ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n_classes())
            .map(|c| {
                let d = self.tp[c] + self.fp[c] + self.fn_[c];
                (d > 0).then(|| self.tp[c] as f64 / d as f64)
            })
            .collect()
    }

    /// Mean IoU over the non-absent classes of `subset`.
    pub fn miou(&self, subset: &[u8]) -> Result<f64> {
        miou_of(&self.iou_per_class(), subset)
    }
}

pub fn miou_of(iou: &[Option<f64>], subset: &[u8]) -> Result<f64> {
    let vals: Vec<f64> = subset.iter().filter_map(|&c| iou.get(c as usize).copied().flatten()).collect();
    if vals.is_empty() {
        return Err(Error::Metrics(format!("no class of {subset:?} is present")));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `2ab / (a + b)`, zero when either argument is zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Evaluation of one model state, or an aggregate of several.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou_per_class: Vec<Option<f64>>,
    pub miou_base: f64,
    pub miou_new: f64,
    pub hm: f64,
    /// Mean of the aggregated reports' own HMs; equals `hm` for a single one.
    pub hm_of_means: f64,
    pub base_classes: Vec<u8>,
    pub new_classes: Vec<u8>,
    pub fold: usize,
    pub step: usize,
    pub trial: usize,
}

/// Options for splitting IoUs into base and new means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    /// Count background in mIoU-B.
    pub background_in_base: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { background_in_base: true }
    }
}

impl MetricsReport {
    /// mIoU-B over background (optionally) and `base_classes`, mIoU-N over
    /// `new_classes`, which is 0 when there are none yet.
    pub fn from_accumulator(
        acc: &ConfusionAccumulator,
        base_classes: &[u8],
        new_classes: &[u8],
        opts: ReportOptions,
        (fold, step, trial): (usize, usize, usize),
    ) -> Result<Self> {
        let iou = acc.iou_per_class();
        let mut base: Vec<u8> = base_classes.iter().copied().filter(|&c| c != 0).collect();
        if opts.background_in_base {
            base.insert(0, 0);
        }
        let miou_base = miou_of(&iou, &base)?;
        let miou_new = if new_classes.is_empty() { 0.0 } else { miou_of(&iou, new_classes)? };
        let hm = harmonic_mean(miou_base, miou_new);
        Ok(Self {
            iou_per_class: iou,
            miou_base,
            miou_new,
            hm,
            hm_of_means: hm,
            base_classes: base,
            new_classes: new_classes.to_vec(),
            fold,
            step,
            trial,
        })
    }
}

/// Arithmetic mean of mIoU-B and mIoU-N with HM recomputed from the means.
///
/// Per-class IoUs are averaged over the reports where the class is present.
/// The identifying indices are taken from the first report. All reports must
/// share their class subsets.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    aggregate_with(reports, true)
}

/// [`aggregate`] that optionally accepts differing class subsets, as when
/// averaging over folds or over the steps of a multi-step run.
pub fn aggregate_with(reports: &[MetricsReport], same_classes: bool) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Metrics("nothing to aggregate".into()))?;
    for r in reports {
        if same_classes && (r.base_classes != first.base_classes || r.new_classes != first.new_classes) {
            return Err(Error::Metrics(format!(
                "heterogeneous class subsets: {:?}/{:?} vs {:?}/{:?}",
                r.base_classes, r.new_classes, first.base_classes, first.new_classes
            )));
        }
    }
    let n = reports.len() as f64;
    let miou_base = reports.iter().map(|r| r.miou_base).sum::<f64>() / n;
    let miou_new = reports.iter().map(|r| r.miou_new).sum::<f64>() / n;
    let width = reports.iter().map(|r| r.iou_per_class.len()).max().unwrap_or(0);
    let iou_per_class = (0..width)
        .map(|c| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.iou_per_class.get(c).copied().flatten()).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(MetricsReport {
        iou_per_class,
        miou_base,
        miou_new,
        hm: harmonic_mean(miou_base, miou_new),
        hm_of_means: reports.iter().map(|r| r.hm_of_means).sum::<f64>() / n,
        base_classes: first.base_classes.clone(),
        new_classes: first.new_classes.clone(),
        fold: first.fold,
        step: first.step,
        trial: first.trial,
    })
}
