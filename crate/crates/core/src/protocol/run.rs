use std::collections::BTreeSet;

use rayon::prelude::*;

use super::{filter_base_dataset, make_folds, relabel_strict, sample_fsl_dataset, train, MethodSpec, TrainJob, TrainLog, TrainerConfig};
use crate::data::{generate_dataset, SegDataset, SyntheticSpec};
use crate::metrics::{aggregate_with, ConfusionAccumulator, MetricsReport, ReportOptions};
use crate::nn::{random_unit, ModelConfig, SegModel};
use crate::protolearn::{build_teacher, imprint, DistillVariant, LossConfig, TeacherSnapshot};
use crate::rng::{rng_for, Rng};
use crate::{Error, Result};

/// Image ids of the validation split start here; training pools use ids
/// below it.
pub const VAL_ID_OFFSET: u64 = 1 << 32;

const STREAM_BASE: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_TRAIN: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// All fold classes in one FSL step.
    Single,
    /// `ms_steps` FSL steps of `ms_classes_per_step` classes each.
    Multi,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Single => "ss",
            Setting::Multi => "ms",
        }
    }
}

/// Everything that defines an experiment except the method.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub spec: SyntheticSpec,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub report: ReportOptions,
    pub fold_size: usize,
    pub folds: Vec<usize>,
    pub shots: usize,
    pub setting: Setting,
    pub strict: bool,
    pub ms_steps: usize,
    pub ms_classes_per_step: usize,
    pub seed: u64,
    pub trials: usize,
    /// Base-step training images, taken in id order from the filtered pool.
    pub base_images: usize,
    /// Size of the training pool the base set and few-shot samples come from.
    pub train_pool: usize,
    pub val_images: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            report: ReportOptions::default(),
            fold_size: 2,
            folds: vec![0],
            shots: 1,
            setting: Setting::Single,
            strict: false,
            ms_steps: 2,
            ms_classes_per_step: 1,
            seed: 0,
            trials: 4,
            base_images: 300,
            train_pool: 600,
            val_images: 100,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.trainer.validate()?;
        let split = make_folds(self.spec.n_classes, self.fold_size)?;
        if self.folds.is_empty() {
            return Err(Error::Config("at least one fold is required".into()));
        }
        if let Some(&f) = self.folds.iter().find(|&&f| f >= split.folds.len()) {
            return Err(Error::Config(format!("fold {f} does not exist; folds are 0..{}", split.folds.len())));
        }
        if ![1, 2, 5].contains(&self.shots) {
            return Err(Error::Config(format!("shots must be 1, 2 or 5, got {}", self.shots)));
        }
        if self.setting == Setting::Multi && self.ms_steps * self.ms_classes_per_step != self.fold_size {
            return Err(Error::Config(format!(
                "multi-step needs ms_steps × ms_classes_per_step = fold size, got {} × {} ≠ {}",
                self.ms_steps, self.ms_classes_per_step, self.fold_size
            )));
        }
        if self.trials == 0 || self.base_images == 0 || self.val_images == 0 {
            return Err(Error::Config("trials, base_images and val_images must be positive".into()));
        }
        if self.model.channels.first() != Some(&3) {
            return Err(Error::Config("the first model channel count must be 3 (RGB)".into()));
        }
        Ok(())
    }

    /// New-class groups of `fold`, one per FSL step, in ascending class order.
    pub fn schedule(&self, fold: usize) -> Result<Vec<Vec<u8>>> {
        let split = make_folds(self.spec.n_classes, self.fold_size)?;
        let classes = split.fold(fold)?.to_vec();
        Ok(match self.setting {
            Setting::Single => vec![classes],
            Setting::Multi => classes.chunks(self.ms_classes_per_step).map(<[u8]>::to_vec).collect(),
        })
    }
}

/// Datasets of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub fold: usize,
    pub base_classes: Vec<u8>,
    pub new_classes: Vec<u8>,
    pub base: SegDataset,
    pub pool: SegDataset,
    pub val: SegDataset,
}

pub fn build_fold_data(cfg: &ProtocolConfig, fold: usize) -> Result<FoldData> {
    let split = make_folds(cfg.spec.n_classes, cfg.fold_size)?;
    let new_classes = split.fold(fold)?.to_vec();
    let base_classes = split.base_classes(fold)?;
    let shapes: Vec<u8> = split.all_classes[1..].to_vec();
    let pool = generate_dataset(&cfg.spec, 0, cfg.train_pool, &shapes)?;
    let filtered = filter_base_dataset(&pool, &new_classes)?;
    if filtered.len() < cfg.base_images {
        return Err(Error::Config(format!(
            "fold {fold}: only {} of {} pool images avoid the new classes, {} needed; raise train_pool",
            filtered.len(),
            cfg.train_pool,
            cfg.base_images
        )));
    }
    let base = SegDataset::new(filtered.iter().take(cfg.base_images).cloned().collect());
    let val = generate_dataset(&cfg.spec, VAL_ID_OFFSET, cfg.val_images, &shapes)?;
    Ok(FoldData { fold, base_classes, new_classes, base, pool, val })
}

/// The learner between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolState {
    pub step: usize,
    pub model: SegModel,
    /// `C^t` in classifier column order.
    pub classes: Vec<u8>,
    /// `K^t`, empty at the base step.
    pub new_classes: Vec<u8>,
    pub base_classes: Vec<u8>,
    pub prev_model: Option<SegModel>,
    pub norm_frozen: bool,
}

impl ProtocolState {
    /// Every class added by FSL steps so far.
    pub fn learned_new(&self) -> Vec<u8> {
        self.classes.iter().copied().filter(|c| !self.base_classes.contains(c)).collect()
    }
}

/// Trains on the base classes with batch norm, then freezes every running
/// statistic for the steps that follow.
pub fn run_base_step(cfg: &ProtocolConfig, data: &FoldData) -> Result<(ProtocolState, TrainLog)> {
    let mut rng = rng_for(cfg.seed, &[STREAM_BASE, data.fold as u64]);
    let mut model = SegModel::new(&cfg.model, data.base_classes.clone(), &mut rng);
    let t = &cfg.trainer;
    let job = TrainJob {
        dataset: &data.base,
        iters: t.iters_base,
        lr: t.lr_base,
        batch_size: t.batch_size_base,
        flip: t.flip,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        loss: LossConfig { lambda: 0.0, variant: DistillVariant::None },
        teacher: None,
    };
    let log = train(&mut model, &job, &mut rng)?;
    model.freeze_norm_stats();
    let state = ProtocolState {
        step: 0,
        classes: data.base_classes.clone(),
        new_classes: vec![],
        base_classes: data.base_classes.clone(),
        model,
        prev_model: None,
        norm_frozen: true,
    };
    Ok((state, log))
}

/// Observable facts about one FSL step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub new_classes: Vec<u8>,
    pub image_ids: Vec<u64>,
    /// Distinct labels of the training masks after relabeling.
    pub mask_labels: Vec<u8>,
    pub log: TrainLog,
    /// Mean teacher entropy over the unflipped few-shot images, when a
    /// teacher exists.
    pub teacher_entropy: Option<f64>,
    /// Running mean and std of every normalization layer after the step.
    pub running_stats: Vec<f64>,
}

fn running_stats(model: &SegModel) -> Vec<f64> {
    model.extractor.norm_layers().flat_map(|n| n.running_mean.iter().chain(&n.running_std).copied()).collect()
}

/// Few-shot masks as the learner sees them: unknown classes become
/// background, and in the strict setting so do old classes.
pub fn prepare_fsl_dataset(raw: &SegDataset, classes_t: &[u8], old_classes: &[u8], strict: bool) -> SegDataset {
    SegDataset::new(
        raw.iter()
            .map(|it| {
                let mut it = it.clone();
                it.mask.map_outside(classes_t, 0);
                if strict {
                    it.mask = relabel_strict(&it.mask, old_classes);
                }
                it
            })
            .collect(),
    )
}

/// One FSL step of `method` on an already prepared few-shot dataset.
pub fn run_fsl_step(
    cfg: &ProtocolConfig,
    state: &ProtocolState,
    fsl: &SegDataset,
    new_classes: &[u8],
    method: &MethodSpec,
    init_rng: &mut Rng,
    train_rng: &mut Rng,
) -> Result<(ProtocolState, StepRecord)> {
    let mut new_sorted = new_classes.to_vec();
    new_sorted.sort_unstable();
    new_sorted.dedup();
    let mut model = state.model.clone();
    model.set_norm_mode(method.norm_mode);
    model.freeze_norm_stats();
    if method.imprint {
        model = imprint(&model, fsl, &new_sorted)?;
    } else {
        for &k in &new_sorted {
            let col = random_unit(model.classifier.feature_dim(), init_rng);
            model.classifier.push_column(k, &col)?;
        }
    }
    let teacher = match method.distill {
        DistillVariant::None => None,
        DistillVariant::Pd => Some(build_teacher(&state.model, fsl, &new_sorted)?),
        DistillVariant::Kd | DistillVariant::L2 => Some(TeacherSnapshot::previous(&state.model)),
    };
    let teacher_entropy = match &teacher {
        Some(t) => {
            let mut total = 0.0;
            for it in fsl.iter() {
                let out = t.outputs(&crate::nn::stack_images(&[&it.image])?)?;
                total += crate::protolearn::mean_entropy(&out.probs);
            }
            Some(total / fsl.len() as f64)
        }
        None => None,
    };
    let log = if method.finetune {
        let t = &cfg.trainer;
        let job = TrainJob {
            dataset: fsl,
            iters: t.iters_fsl,
            lr: t.lr_fsl,
            batch_size: t.fsl_batch_size(fsl.len()),
            flip: t.flip,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            loss: LossConfig { lambda: method.lambda, variant: method.distill },
            teacher: teacher.as_ref(),
        };
        train(&mut model, &job, train_rng)?
    } else {
        TrainLog::default()
    };
    let labels: BTreeSet<u8> = fsl.iter().flat_map(|it| it.mask.labels().iter().copied()).collect();
    let record = StepRecord {
        step: state.step + 1,
        new_classes: new_sorted.clone(),
        image_ids: fsl.iter().map(|it| it.id).collect(),
        mask_labels: labels.into_iter().collect(),
        log,
        teacher_entropy,
        running_stats: running_stats(&model),
    };
    let next = ProtocolState {
        step: state.step + 1,
        classes: model.classes().to_vec(),
        new_classes: new_sorted,
        base_classes: state.base_classes.clone(),
        model,
        prev_model: Some(state.model.clone()),
        norm_frozen: true,
    };
    Ok((next, record))
}

/// Eval-mode predictions on `val` against masks restricted to the classes
/// the model knows.
pub fn evaluate(
    cfg: &ProtocolConfig,
    state: &ProtocolState,
    val: &SegDataset,
    (fold, trial): (usize, usize),
) -> Result<MetricsReport> {
    let n = cfg.spec.n_classes;
    let accs = val
        .items()
        .par_iter()
        .map(|it| {
            let mut gt = it.mask.clone();
            gt.map_outside(&state.classes, 0);
            let pred = state.model.predict(&it.image)?;
            let mut acc = ConfusionAccumulator::new(n);
            acc.update_default(&pred, gt.labels())?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = ConfusionAccumulator::new(n);
    for a in &accs {
        acc.merge(a)?;
    }
    MetricsReport::from_accumulator(&acc, &state.base_classes, &state.learned_new(), cfg.report, (fold, state.step, trial))
}

/// One (fold, trial) run of a method after the base step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub fold: usize,
    pub trial: usize,
    /// One report per FSL step.
    pub reports: Vec<MetricsReport>,
    pub steps: Vec<StepRecord>,
    pub final_model: SegModel,
}

impl RunResult {
    /// Mean over steps with HM recomputed; equals the only report in the
    /// single-step setting.
    pub fn step_mean(&self) -> Result<MetricsReport> {
        aggregate_with(&self.reports, false)
    }
}

/// Samples `shots` images per new class and merges them, dropping repeated ids.
pub fn sample_step_dataset(pool: &SegDataset, classes: &[u8], shots: usize, rng: &mut Rng) -> Result<SegDataset> {
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for &k in classes {
        for it in sample_fsl_dataset(pool, k, shots, rng)?.iter() {
            if seen.insert(it.id) {
                items.push(it.clone());
            }
        }
    }
    Ok(SegDataset::new(items))
}

pub fn run_trial(cfg: &ProtocolConfig, data: &FoldData, base: &ProtocolState, method: &MethodSpec, trial: usize) -> Result<RunResult> {
    let fold = data.fold as u64;
    let mut state = base.clone();
    let mut reports = Vec::new();
    let mut steps = Vec::new();
    for (s, group) in cfg.schedule(data.fold)?.iter().enumerate() {
        let step = s as u64 + 1;
        let mut sample_rng = rng_for(cfg.seed, &[STREAM_SAMPLE, fold, trial as u64, step]);
        let mut init_rng = rng_for(cfg.seed, &[STREAM_INIT, fold, trial as u64, step]);
        let mut train_rng = rng_for(cfg.seed, &[STREAM_TRAIN, fold, trial as u64, step]);
        let raw = sample_step_dataset(&data.pool, group, cfg.shots, &mut sample_rng)?;
        let old: Vec<u8> = state.classes.clone();
        let mut classes_t = old.clone();
        classes_t.extend(group);
        let fsl = prepare_fsl_dataset(&raw, &classes_t, &old, cfg.strict);
        let (next, record) = run_fsl_step(cfg, &state, &fsl, group, method, &mut init_rng, &mut train_rng)?;
        state = next;
        reports.push(evaluate(cfg, &state, &data.val, (data.fold, trial))?);
        steps.push(record);
    }
    Ok(RunResult { fold: data.fold, trial, reports, steps, final_model: state.model })
}

/// All runs of one method plus summaries averaged over trials, then folds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub method: MethodSpec,
    /// Sorted by (fold, trial).
    pub runs: Vec<RunResult>,
    /// Per FSL step.
    pub per_step: Vec<MetricsReport>,
    /// Mean over steps of `per_step`.
    pub step_mean: MetricsReport,
}

fn summarize(runs: &[RunResult], n_steps: usize) -> Result<Vec<MetricsReport>> {
    let mut folds: Vec<usize> = runs.iter().map(|r| r.fold).collect();
    folds.dedup();
    (0..n_steps)
        .map(|s| {
            let per_fold = folds
                .iter()
                .map(|&f| {
                    let trials: Vec<MetricsReport> = runs.iter().filter(|r| r.fold == f).map(|r| r.reports[s].clone()).collect();
                    aggregate_with(&trials, true)
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate_with(&per_fold, false)
        })
        .collect()
}

/// Base step per fold (shared by all methods), then every
/// (method, fold, trial) run on a pool of `jobs` threads.
pub fn run_experiment(cfg: &ProtocolConfig, methods: &[MethodSpec], jobs: usize) -> Result<Vec<ExperimentResult>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| {
        let bases = cfg
            .folds
            .par_iter()
            .map(|&f| {
                let data = build_fold_data(cfg, f)?;
                let (state, _) = run_base_step(cfg, &data).map_err(|e| Error::Run { fold: f, trial: 0, source: Box::new(e) })?;
                Ok((data, state))
            })
            .collect::<Result<Vec<_>>>()?;
        let work: Vec<(usize, usize, usize)> = (0..methods.len())
            .flat_map(|m| (0..bases.len()).flat_map(move |b| (0..cfg.trials).map(move |t| (m, b, t))))
            .collect();
        let runs = work
            .par_iter()
            .map(|&(m, b, t)| {
                let (data, state) = &bases[b];
                run_trial(cfg, data, state, &methods[m], t).map_err(|e| Error::Run { fold: data.fold, trial: t, source: Box::new(e) })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_steps = cfg.schedule(cfg.folds[0])?.len();
        let per_method = runs.len() / methods.len().max(1);
        methods
            .iter()
            .zip(runs.chunks(per_method.max(1)))
            .map(|(m, chunk)| {
                let mut runs = chunk.to_vec();
                runs.sort_by_key(|r| (r.fold, r.trial));
                let per_step = summarize(&runs, n_steps)?;
                let step_mean = aggregate_with(&per_step, false)?;
                Ok(ExperimentResult { method: m.clone(), runs, per_step, step_mean })
            })
            .collect()
    })
}
