use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pifs_core::data::{generate_dataset, read_manifest, write_dataset, SegDataset};
use pifs_core::metrics::{ConfusionAccumulator, MetricsReport};
use pifs_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use pifs_core::protocol::{run_experiment, MethodSpec, ABLATION_LABELS, METHOD_NAMES};

use crate::config::{config_hash, render, ExperimentConfig, RawConfig};
use crate::output::{self, ReportJson};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "pifs", version, about = "Incremental few-shot segmentation experiments on synthetic shapes")]
pub struct Cli {
    /// Print every config key with its default value and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Base step plus few-shot steps for each method; writes results under --out.
    Run(RunArgs),
    /// The ten-row ablation matrix on the configured benchmark.
    Ablate(ExperimentArgs),
    /// Write a synthetic dataset as PPM/PGM files plus manifest.tsv.
    GenData(GenDataArgs),
    /// Score a checkpoint or a reference predictor on a manifest.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, value_parser = ["ss", "ms"])]
    pub setting: Option<String>,
    /// Label old classes as background in few-shot masks.
    #[arg(long)]
    pub strict: bool,
    /// Comma-separated fold indices.
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to $PIFS_OUT, then `pifs_out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Comma-separated method names.
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub common: ExperimentArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed; overrides `data_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub images: usize,
    #[arg(long, default_value_t = 0)]
    pub first_id: u64,
    /// Comma-separated shape classes to draw; all of them by default.
    #[arg(long)]
    pub classes: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Predictor {
    /// Predicts the ground truth.
    Oracle,
    /// Predicts background everywhere.
    Background,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "predictor"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub predictor: Option<Predictor>,
    /// Classes reported as new (mIoU-N); the rest are base.
    #[arg(long)]
    pub new_classes: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        print!("{}", render(&ExperimentConfig::default()));
        return Ok(());
    }
    match cli.command {
        None => Err(CliError::Usage("no command given; see `pifs --help`".into())),
        Some(Command::Run(a)) => cmd_run(&a),
        Some(Command::Ablate(a)) => cmd_ablate(&a),
        Some(Command::GenData(a)) => cmd_gen_data(&a),
        Some(Command::Eval(a)) => cmd_eval(&a),
    }
}

fn load_raw(path: Option<&Path>) -> Result<RawConfig, CliError> {
    Ok(match path {
        Some(p) => RawConfig::read(p)?,
        None => RawConfig::default(),
    })
}

/// Config file first, then flags.
pub fn resolve(args: &ExperimentArgs, methods: Option<&str>) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut raw = load_raw(args.config.as_deref())?;
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        raw.set(k.trim(), v.trim())?;
    }
    if let Some(m) = methods {
        raw.set("methods", m)?;
    }
    if let Some(s) = args.shots {
        raw.set("shots", s.to_string())?;
    }
    if let Some(s) = &args.setting {
        raw.set("setting", s.as_str())?;
    }
    if args.strict {
        raw.set("strict", "true")?;
    }
    if let Some(f) = &args.folds {
        raw.set("folds", f.as_str())?;
    }
    if let Some(t) = args.trials {
        raw.set("trials", t.to_string())?;
    }
    if let Some(s) = args.seed {
        raw.set("seed", s.to_string())?;
    }
    if let Some(j) = args.jobs {
        raw.set("jobs", j.to_string())?;
    }
    let cfg = raw.resolve()?;
    let out = args.out.clone().or_else(|| std::env::var_os("PIFS_OUT").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("pifs_out"));
    Ok((cfg, out))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, out) = resolve(&args.common, args.method.as_deref())?;
    let start = Instant::now();
    let results = run_experiment(&cfg.protocol, &cfg.methods, cfg.jobs)?;
    create_dir(&out.join("checkpoints"))?;
    let mut checkpoints = Vec::new();
    for res in &results {
        for run in &res.runs {
            let rel = output::checkpoint_name(&res.method.name, run.fold, run.trial);
            save_checkpoint(&out.join(&rel), &run.final_model)?;
            checkpoints.push(rel);
        }
    }
    write(&out.join("results.csv"), output::results_csv(&cfg.protocol, &results))?;
    write(&out.join("results.json"), to_json(&output::results_json(&results)))?;
    let manifest = output::Manifest {
        config_hash: config_hash(&cfg),
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.protocol.seed,
        config: render(&cfg),
        methods: cfg.methods.iter().map(|m| m.name.clone()).collect(),
        results_csv: "results.csv".into(),
        results_json: "results.json".into(),
        checkpoints,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write(&out.join("manifest.json"), to_json(&manifest))?;
    for res in &results {
        let m = &res.step_mean;
        eprintln!(
            "{:<12} mIoU-B {:6.2}  mIoU-N {:6.2}  HM {:6.2}",
            res.method.name,
            100.0 * m.miou_base,
            100.0 * m.miou_new,
            100.0 * m.hm
        );
    }
    eprintln!("wrote {} in {:.1}s", out.display(), manifest.wall_clock_seconds);
    Ok(())
}

pub fn cmd_ablate(args: &ExperimentArgs) -> Result<(), CliError> {
    let (cfg, out) = resolve(args, None)?;
    let methods = METHOD_NAMES
        .iter()
        .map(|n| MethodSpec::by_name(n).map(|m| m.with_lambda(cfg.lambda)))
        .collect::<Result<Vec<_>, _>>()?;
    let results = run_experiment(&cfg.protocol, &methods, cfg.jobs)?;
    let rows = ABLATION_LABELS
        .iter()
        .zip(&results)
        .map(|(label, res)| output::ablation_row(label, res))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&out)?;
    write(&out.join("ablation.csv"), output::ablation_csv(&rows))?;
    write(&out.join("results.csv"), output::results_csv(&cfg.protocol, &results))?;
    print!("{}", output::ablation_table(&rows));
    Ok(())
}

fn parse_classes(list: &str) -> Result<Vec<u8>, CliError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("bad class list {list:?}"))))
        .collect()
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let mut raw = load_raw(args.config.as_deref())?;
    if let Some(s) = args.seed {
        raw.set("data_seed", s.to_string())?;
    }
    let spec = raw.resolve()?.protocol.spec;
    let classes = match &args.classes {
        Some(list) => parse_classes(list)?,
        None => (1..spec.n_classes as u8).collect(),
    };
    let ds = generate_dataset(&spec, args.first_id, args.images, &classes)?;
    let path = write_dataset(&args.out, &ds)?;
    eprintln!("wrote {} images, manifest {}", ds.len(), path.display());
    Ok(())
}

fn score(ds: &SegDataset, n_classes: usize, known: Option<&[u8]>, predict: impl Fn(&pifs_core::data::LabeledImage) -> Result<Vec<u8>, CliError>) -> Result<ConfusionAccumulator, CliError> {
    let mut acc = ConfusionAccumulator::new(n_classes);
    for it in ds.iter() {
        let mut gt = it.mask.clone();
        if let Some(k) = known {
            gt.map_outside(k, 0);
        }
        acc.update_default(&predict(it)?, gt.labels())?;
    }
    Ok(acc)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    if !args.manifest.exists() {
        return Err(CliError::Usage(format!("manifest {} does not exist", args.manifest.display())));
    }
    let ds = read_manifest(&args.manifest)?;
    let mut present: Vec<u8> = ds.iter().flat_map(|it| it.mask.labels().iter().copied()).filter(|&c| c != pifs_core::IGNORE_INDEX).collect();
    present.sort_unstable();
    present.dedup();
    let new_classes = match &args.new_classes {
        Some(l) => parse_classes(l)?,
        None => Vec::new(),
    };
    let (acc, known) = match (&args.checkpoint, args.predictor) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
            }
            let model = load_checkpoint(path)?;
            let known = model.classes().to_vec();
            let n = known.iter().chain(&present).map(|&c| c as usize + 1).max().unwrap_or(1);
            (score(&ds, n, Some(&known), |it| Ok(model.predict(&it.image)?))?, known)
        }
        (None, Some(p)) => {
            let n = present.iter().map(|&c| c as usize + 1).max().unwrap_or(1);
            let acc = score(&ds, n, None, |it| {
                Ok(match p {
                    Predictor::Oracle => it.mask.labels().iter().map(|&c| if c == pifs_core::IGNORE_INDEX { 0 } else { c }).collect(),
                    Predictor::Background => vec![0; it.mask.labels().len()],
                })
            })?;
            (acc, present.clone())
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let base: Vec<u8> = known.iter().copied().filter(|c| !new_classes.contains(c)).collect();
    let report = MetricsReport::from_accumulator(&acc, &base, &new_classes, Default::default(), (0, 0, 0))?;
    let json = to_json(&ReportJson::from(&report));
    match &args.out {
        Some(p) => write(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}
