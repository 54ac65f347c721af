//! Result files: `results.csv`, `results.json`, `manifest.json` and the
//! ablation table.

use std::fmt::Write as _;

use pifs_core::metrics::MetricsReport;
use pifs_core::protocol::{ExperimentResult, ProtocolConfig};
use serde::Serialize;

pub const CSV_HEADER: &str = "method,fold,trial,step,shots,setting,strict,miou_base,miou_new,hm,seed";

/// One CSV row per (method, fold, trial, step), in method order as given,
/// then by fold, trial and step.
pub fn results_csv(cfg: &ProtocolConfig, results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for res in results {
        for run in &res.runs {
            for r in &run.reports {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{}",
                    res.method.name,
                    run.fold,
                    run.trial,
                    r.step,
                    cfg.shots,
                    cfg.setting.as_str(),
                    cfg.strict,
                    r.miou_base,
                    r.miou_new,
                    r.hm,
                    cfg.seed
                );
            }
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct ReportJson {
    pub fold: usize,
    pub step: usize,
    pub trial: usize,
    pub miou_base: f64,
    pub miou_new: f64,
    pub hm: f64,
    pub hm_of_means: f64,
    pub base_classes: Vec<u8>,
    pub new_classes: Vec<u8>,
    /// `null` for classes absent from predictions and ground truth.
    pub iou_per_class: Vec<Option<f64>>,
}

impl From<&MetricsReport> for ReportJson {
    fn from(r: &MetricsReport) -> Self {
        Self {
            fold: r.fold,
            step: r.step,
            trial: r.trial,
            miou_base: r.miou_base,
            miou_new: r.miou_new,
            hm: r.hm,
            hm_of_means: r.hm_of_means,
            base_classes: r.base_classes.clone(),
            new_classes: r.new_classes.clone(),
            iou_per_class: r.iou_per_class.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct StepJson {
    #[serde(flatten)]
    pub report: ReportJson,
    pub image_ids: Vec<u64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct RunJson {
    pub fold: usize,
    pub trial: usize,
    pub steps: Vec<StepJson>,
    pub checkpoint: String,
}

#[derive(Debug, Serialize)]
pub struct MethodJson {
    pub method: String,
    pub imprint: bool,
    pub finetune: bool,
    pub norm_mode: &'static str,
    pub distill: String,
    pub lambda: f64,
    pub runs: Vec<RunJson>,
    /// Averaged over trials, then folds, for each FSL step.
    pub per_step: Vec<ReportJson>,
    pub step_mean: ReportJson,
}

pub fn checkpoint_name(method: &str, fold: usize, trial: usize) -> String {
    format!("checkpoints/{method}_fold{fold}_trial{trial}.pifs")
}

pub fn results_json(results: &[ExperimentResult]) -> Vec<MethodJson> {
    results
        .iter()
        .map(|res| MethodJson {
            method: res.method.name.clone(),
            imprint: res.method.imprint,
            finetune: res.method.finetune,
            norm_mode: crate::config::norm_mode_name(res.method.norm_mode),
            distill: format!("{:?}", res.method.distill).to_lowercase(),
            lambda: res.method.lambda,
            runs: res
                .runs
                .iter()
                .map(|run| RunJson {
                    fold: run.fold,
                    trial: run.trial,
                    steps: run
                        .reports
                        .iter()
                        .zip(&run.steps)
                        .map(|(r, s)| StepJson {
                            report: r.into(),
                            image_ids: s.image_ids.clone(),
                            final_loss: s.log.losses.last().map(|l| l.total),
                        })
                        .collect(),
                    checkpoint: checkpoint_name(&res.method.name, run.fold, run.trial),
                })
                .collect(),
            per_step: res.per_step.iter().map(ReportJson::from).collect(),
            step_mean: (&res.step_mean).into(),
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: &'static str,
    pub seed: u64,
    /// The resolved config in file syntax; `pifs run --config` accepts it.
    pub config: String,
    pub methods: Vec<String>,
    pub results_csv: String,
    pub results_json: String,
    pub checkpoints: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Summary of one ablation row: means over folds of trial means, and
/// medians over all (fold, trial) step-mean reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: &'static str,
    pub method: String,
    pub miou_base: f64,
    pub miou_new: f64,
    pub hm: f64,
    pub median_miou_base: f64,
    pub median_miou_new: f64,
    pub median_hm: f64,
}

pub fn ablation_row(label: &'static str, res: &ExperimentResult) -> Result<AblationRow, pifs_core::Error> {
    let per_run = res.runs.iter().map(|r| r.step_mean()).collect::<Result<Vec<_>, _>>()?;
    let col = |f: fn(&MetricsReport) -> f64| median(&mut per_run.iter().map(f).collect::<Vec<_>>());
    Ok(AblationRow {
        label,
        method: res.method.name.clone(),
        miou_base: res.step_mean.miou_base,
        miou_new: res.step_mean.miou_new,
        hm: res.step_mean.hm,
        median_miou_base: col(|r| r.miou_base),
        median_miou_new: col(|r| r.miou_new),
        median_hm: col(|r| r.hm),
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,method,miou_base,miou_new,hm,median_miou_base,median_miou_new,median_hm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label, r.method, r.miou_base, r.miou_new, r.hm, r.median_miou_base, r.median_miou_new, r.median_hm
        );
    }
    out
}

/// Fixed-width table in percent.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<14} {:>7} {:>7} {:>7}   {:>7} {:>7} {:>7}\n", "method", "mIoU-B", "mIoU-N", "HM", "med-B", "med-N", "med-HM");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>7.1} {:>7.1} {:>7.1}   {:>7.1} {:>7.1} {:>7.1}",
            r.label,
            100.0 * r.miou_base,
            100.0 * r.miou_new,
            100.0 * r.hm,
            100.0 * r.median_miou_base,
            100.0 * r.median_miou_new,
            100.0 * r.median_hm
        );
    }
    out
}
