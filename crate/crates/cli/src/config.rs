//! The experiment config file: `key = value` lines, `#` comments and
//! optional `[section]` headers. Every key belongs to exactly one section,
//! so keys may also appear before any header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pifs_core::nn::NormMode;
use pifs_core::protocol::{MethodSpec, ProtocolConfig, Setting};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// A fully resolved experiment: protocol, methods and execution knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub protocol: ProtocolConfig,
    pub methods: Vec<MethodSpec>,
    pub lambda: f64,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { protocol: ProtocolConfig::default(), methods: vec![MethodSpec::by_name("pifs").expect("registered")], lambda: 10.0, jobs: 1 }
    }
}

struct Key {
    section: &'static str,
    name: &'static str,
    doc: &'static str,
}

const KEYS: &[Key] = &[
    Key { section: "data", name: "height", doc: "image height in pixels" },
    Key { section: "data", name: "width", doc: "image width in pixels" },
    Key { section: "data", name: "n_classes", doc: "background plus shape classes" },
    Key { section: "data", name: "min_shapes", doc: "fewest shapes per image" },
    Key { section: "data", name: "max_shapes", doc: "most shapes per image" },
    Key { section: "data", name: "min_pixels_per_shape", doc: "smallest visible area of a placed shape" },
    Key { section: "data", name: "color_noise_sigma", doc: "per-channel Gaussian pixel noise" },
    Key { section: "data", name: "data_seed", doc: "seed of the image generator" },
    Key { section: "data", name: "base_images", doc: "base-step training images" },
    Key { section: "data", name: "train_pool", doc: "training pool size (base set and few-shot samples)" },
    Key { section: "data", name: "val_images", doc: "validation images" },
    Key { section: "model", name: "channels", doc: "comma-separated channel widths, input first" },
    Key { section: "model", name: "tau", doc: "cosine classifier temperature" },
    Key { section: "model", name: "learn_tau", doc: "train the temperature" },
    Key { section: "model", name: "norm_momentum", doc: "running-statistics momentum" },
    Key { section: "model", name: "br_clip", doc: "batch-renorm clipping as r_max,d_max or none" },
    Key { section: "trainer", name: "lr_base", doc: "initial base-step learning rate" },
    Key { section: "trainer", name: "lr_fsl", doc: "initial few-shot-step learning rate" },
    Key { section: "trainer", name: "momentum", doc: "SGD momentum" },
    Key { section: "trainer", name: "weight_decay", doc: "SGD weight decay" },
    Key { section: "trainer", name: "iters_base", doc: "base-step iterations" },
    Key { section: "trainer", name: "iters_fsl", doc: "iterations per few-shot step" },
    Key { section: "trainer", name: "batch_size_base", doc: "base-step batch size" },
    Key { section: "trainer", name: "fsl_batch_cap", doc: "few-shot batch is min(cap, |D|)" },
    Key { section: "trainer", name: "flip", doc: "random horizontal flips" },
    Key { section: "protocol", name: "fold_size", doc: "classes per fold" },
    Key { section: "protocol", name: "folds", doc: "comma-separated folds to run" },
    Key { section: "protocol", name: "shots", doc: "images per new class: 1, 2 or 5" },
    Key { section: "protocol", name: "setting", doc: "ss (one step) or ms (several steps)" },
    Key { section: "protocol", name: "strict", doc: "old classes labelled as background in few-shot masks" },
    Key { section: "protocol", name: "ms_steps", doc: "few-shot steps in the ms setting" },
    Key { section: "protocol", name: "ms_classes_per_step", doc: "new classes per ms step" },
    Key { section: "protocol", name: "seed", doc: "training and sampling seed" },
    Key { section: "protocol", name: "trials", doc: "few-shot samples per fold" },
    Key { section: "protocol", name: "background_in_base", doc: "count background in mIoU-B" },
    Key { section: "run", name: "methods", doc: "comma-separated method names" },
    Key { section: "run", name: "lambda", doc: "distillation weight" },
    Key { section: "run", name: "jobs", doc: "worker threads" },
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Key-value pairs of a config file, checked against the key registry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<&'static str, (String, usize)>,
    file: String,
}

impl RawConfig {
    pub fn parse(text: &str, file: &str) -> Result<Self, ConfigError> {
        let err = |line: usize, msg: String| ConfigError::Parse { file: file.to_string(), line, msg };
        let mut section: Option<String> = None;
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(line_no, format!("unterminated section header {line:?}")))?.trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(err(line_no, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(line_no, format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = lookup(k).ok_or_else(|| err(line_no, format!("unknown key {k:?}")))?;
            if let Some(s) = &section {
                if s != key.section {
                    return Err(err(line_no, format!("key {k:?} belongs in [{}], not [{s}]", key.section)));
                }
            }
            if v.is_empty() {
                return Err(err(line_no, format!("key {k:?} has no value")));
            }
            if entries.insert(key.name, (v.to_string(), line_no)).is_some() {
                return Err(err(line_no, format!("key {k:?} given twice")));
            }
        }
        Ok(Self { entries, file: file.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Overrides or adds a key, as a command-line flag does.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        let k = lookup(key).ok_or_else(|| ConfigError::Invalid(format!("unknown key {key:?}")))?;
        self.entries.insert(k.name, (value.into(), 0));
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn get<T: std::str::FromStr>(&self, key: &str, target: &mut T) -> Result<(), ConfigError> {
        if let Some((v, line)) = self.entries.get(key) {
            *target = v.parse().map_err(|_| self.bad(key, *line, v, std::any::type_name::<T>()))?;
        }
        Ok(())
    }

    fn get_bool(&self, key: &str, target: &mut bool) -> Result<(), ConfigError> {
        if let Some((v, line)) = self.entries.get(key) {
            *target = match v.as_str() {
                "true" | "yes" | "on" | "1" => true,
                "false" | "no" | "off" | "0" => false,
                _ => return Err(self.bad(key, *line, v, "bool")),
            };
        }
        Ok(())
    }

    fn get_list<T: std::str::FromStr>(&self, key: &str, target: &mut Vec<T>) -> Result<(), ConfigError> {
        if let Some((v, line)) = self.entries.get(key) {
            *target = v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| self.bad(key, *line, v, "list"))?;
        }
        Ok(())
    }

    fn bad(&self, key: &str, line: usize, value: &str, ty: &str) -> ConfigError {
        let msg = format!("invalid value {value:?} for {key} (expected {ty})");
        if line == 0 {
            ConfigError::Invalid(msg)
        } else {
            ConfigError::Parse { file: self.file.clone(), line, msg }
        }
    }

    /// Defaults overridden by every present key, then validated.
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let p = &mut cfg.protocol;
        self.get("height", &mut p.spec.height)?;
        self.get("width", &mut p.spec.width)?;
        self.get("n_classes", &mut p.spec.n_classes)?;
        self.get("min_shapes", &mut p.spec.min_shapes)?;
        self.get("max_shapes", &mut p.spec.max_shapes)?;
        self.get("min_pixels_per_shape", &mut p.spec.min_pixels_per_shape)?;
        self.get("color_noise_sigma", &mut p.spec.color_noise_sigma)?;
        self.get("data_seed", &mut p.spec.seed)?;
        self.get("base_images", &mut p.base_images)?;
        self.get("train_pool", &mut p.train_pool)?;
        self.get("val_images", &mut p.val_images)?;
        self.get_list("channels", &mut p.model.channels)?;
        self.get("tau", &mut p.model.tau)?;
        self.get_bool("learn_tau", &mut p.model.learn_tau)?;
        self.get("norm_momentum", &mut p.model.norm_momentum)?;
        if let Some((v, line)) = self.entries.get("br_clip") {
            p.model.br_clip = match v.as_str() {
                "none" => None,
                s => {
                    let parts: Vec<f64> = s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| self.bad("br_clip", *line, v, "r_max,d_max"))?;
                    match parts.as_slice() {
                        &[r, d] if r >= 1.0 && d >= 0.0 => Some((r, d)),
                        _ => return Err(self.bad("br_clip", *line, v, "r_max >= 1, d_max >= 0")),
                    }
                }
            };
        }
        let t = &mut p.trainer;
        self.get("lr_base", &mut t.lr_base)?;
        self.get("lr_fsl", &mut t.lr_fsl)?;
        self.get("momentum", &mut t.momentum)?;
        self.get("weight_decay", &mut t.weight_decay)?;
        self.get("iters_base", &mut t.iters_base)?;
        self.get("iters_fsl", &mut t.iters_fsl)?;
        self.get("batch_size_base", &mut t.batch_size_base)?;
        self.get("fsl_batch_cap", &mut t.fsl_batch_cap)?;
        self.get_bool("flip", &mut t.flip)?;
        self.get("fold_size", &mut p.fold_size)?;
        self.get_list("folds", &mut p.folds)?;
        self.get("shots", &mut p.shots)?;
        if let Some((v, line)) = self.entries.get("setting") {
            p.setting = match v.to_ascii_lowercase().as_str() {
                "ss" => Setting::Single,
                "ms" => Setting::Multi,
                _ => return Err(self.bad("setting", *line, v, "ss or ms")),
            };
        }
        self.get_bool("strict", &mut p.strict)?;
        self.get("ms_steps", &mut p.ms_steps)?;
        self.get("ms_classes_per_step", &mut p.ms_classes_per_step)?;
        match (self.contains("ms_steps"), self.contains("ms_classes_per_step")) {
            (true, false) if p.ms_steps > 0 && p.fold_size % p.ms_steps == 0 => p.ms_classes_per_step = p.fold_size / p.ms_steps,
            (false, true) if p.ms_classes_per_step > 0 && p.fold_size % p.ms_classes_per_step == 0 => p.ms_steps = p.fold_size / p.ms_classes_per_step,
            (false, false) => p.ms_steps = p.fold_size / p.ms_classes_per_step.max(1),
            _ => {}
        }
        self.get("seed", &mut p.seed)?;
        self.get("trials", &mut p.trials)?;
        self.get_bool("background_in_base", &mut p.report.background_in_base)?;
        self.get("lambda", &mut cfg.lambda)?;
        self.get("jobs", &mut cfg.jobs)?;
        let mut names: Vec<String> = vec!["pifs".into()];
        self.get_list("methods", &mut names)?;
        cfg.methods = names
            .iter()
            .map(|n| MethodSpec::by_name(n).map(|m| m.with_lambda(cfg.lambda)))
            .collect::<Result<_, _>>()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if cfg.methods.is_empty() {
            return Err(ConfigError::Invalid("at least one method is required".into()));
        }
        if cfg.jobs == 0 {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
            return Err(ConfigError::Invalid(format!("lambda must be finite and nonnegative, got {}", cfg.lambda)));
        }
        cfg.protocol.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Every key with its resolved value, grouped by section.
pub fn canonical_entries(cfg: &ExperimentConfig) -> Vec<(&'static str, &'static str, String)> {
    let p = &cfg.protocol;
    let value = |name: &str| -> String {
        match name {
            "height" => p.spec.height.to_string(),
            "width" => p.spec.width.to_string(),
            "n_classes" => p.spec.n_classes.to_string(),
            "min_shapes" => p.spec.min_shapes.to_string(),
            "max_shapes" => p.spec.max_shapes.to_string(),
            "min_pixels_per_shape" => p.spec.min_pixels_per_shape.to_string(),
            "color_noise_sigma" => p.spec.color_noise_sigma.to_string(),
            "data_seed" => p.spec.seed.to_string(),
            "base_images" => p.base_images.to_string(),
            "train_pool" => p.train_pool.to_string(),
            "val_images" => p.val_images.to_string(),
            "channels" => join(&p.model.channels),
            "tau" => p.model.tau.to_string(),
            "learn_tau" => p.model.learn_tau.to_string(),
            "norm_momentum" => p.model.norm_momentum.to_string(),
            "br_clip" => p.model.br_clip.map_or("none".into(), |(r, d)| format!("{r},{d}")),
            "lr_base" => p.trainer.lr_base.to_string(),
            "lr_fsl" => p.trainer.lr_fsl.to_string(),
            "momentum" => p.trainer.momentum.to_string(),
            "weight_decay" => p.trainer.weight_decay.to_string(),
            "iters_base" => p.trainer.iters_base.to_string(),
            "iters_fsl" => p.trainer.iters_fsl.to_string(),
            "batch_size_base" => p.trainer.batch_size_base.to_string(),
            "fsl_batch_cap" => p.trainer.fsl_batch_cap.to_string(),
            "flip" => p.trainer.flip.to_string(),
            "fold_size" => p.fold_size.to_string(),
            "folds" => join(&p.folds),
            "shots" => p.shots.to_string(),
            "setting" => p.setting.as_str().to_string(),
            "strict" => p.strict.to_string(),
            "ms_steps" => p.ms_steps.to_string(),
            "ms_classes_per_step" => p.ms_classes_per_step.to_string(),
            "seed" => p.seed.to_string(),
            "trials" => p.trials.to_string(),
            "background_in_base" => p.report.background_in_base.to_string(),
            "methods" => cfg.methods.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join(","),
            "lambda" => cfg.lambda.to_string(),
            "jobs" => cfg.jobs.to_string(),
            other => unreachable!("unregistered key {other}"),
        }
    };
    KEYS.iter().map(|k| (k.section, k.name, value(k.name))).collect()
}

/// The resolved config in file syntax, one documented key per line.
pub fn render(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for (i, (s, name, v)) in canonical_entries(cfg).into_iter().enumerate() {
        if s != section {
            if !section.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{s}]");
            section = s;
        }
        let _ = writeln!(out, "# {}\n{name} = {v}", KEYS[i].doc);
    }
    out
}

/// The config hash ignores `jobs`, which never changes results.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut lines: Vec<String> =
        canonical_entries(cfg).into_iter().filter(|(_, k, _)| *k != "jobs").map(|(s, k, v)| format!("{s}.{k}={v}")).collect();
    lines.sort();
    let digest = Sha256::digest(lines.join("\n").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn norm_mode_name(m: NormMode) -> &'static str {
    match m {
        NormMode::BatchNorm => "batch_norm",
        NormMode::BatchRenorm => "batch_renorm",
    }
}
