//! Experiment configuration files.
//!
//! Grammar, one statement per line:
//!
//! ```text
//! line    = blank | comment | section | pair
//! comment = "#" any*
//! section = "[" name "]"
//! pair    = key "=" value [comment]
//! value   = bare text, or "..." quoted; lists are comma-separated
//! ```
//!
//! Keys outside any section are rejected, as are unknown sections and keys.
//! Every key has a default; see [`ExperimentConfig::default`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gradleak::attacks::{AttackConfig, AttackMethod, InitKind};
use gradleak::defenses::{DefenseConfig, NoiseAmount};
use gradleak::metrics::SsimMode;
use gradleak::nn::{Activation, Arch};
use gradleak::optim::{OptimizerConfig, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Phantom { n: usize, classes: usize },
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Images are resized to `size × size`.
    pub size: usize,
    pub channels: usize,
    pub normalize: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub activation: Activation,
    /// Defaults to the dataset's class count.
    pub num_classes: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub clients: usize,
    /// Rounds run before the first attacked round.
    pub warmup_rounds: usize,
    pub lr: f32,
    /// Batch size of warm-up rounds; attacked rounds always use one image.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSelection {
    Count(usize),
    Ids(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub fl: FlConfig,
    pub attack: AttackConfig,
    pub defense_grid: Vec<DefenseConfig>,
    pub images: ImageSelection,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig {
                source: DatasetSource::Phantom { n: 20, classes: 4 },
                size: 32,
                channels: 3,
                normalize: true,
                seed: 0,
            },
            model: ModelConfig {
                arch: Arch::Cnn4,
                activation: Activation::Sigmoid,
                num_classes: None,
                seed: 0,
            },
            train: None,
            fl: FlConfig {
                clients: 4,
                warmup_rounds: 0,
                lr: 0.1,
                batch: 1,
            },
            attack: AttackConfig::dlg(),
            defense_grid: vec![DefenseConfig::None],
            images: ImageSelection::Count(1),
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            save_checkpoints: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed `[section] key = value` text with use tracking.
struct Raw {
    path: String,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

const KNOWN: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "kind",
            "n",
            "classes",
            "path",
            "size",
            "channels",
            "normalize",
            "seed",
        ],
    ),
    ("model", &["arch", "activation", "num_classes", "seed"]),
    ("train", &["epochs", "lr", "seed"]),
    ("fl", &["clients", "warmup_rounds", "lr", "batch"]),
    (
        "attack",
        &[
            "method",
            "optimizer",
            "iterations",
            "lr",
            "history",
            "tolerance",
            "adam_beta1",
            "adam_beta2",
            "adam_eps",
            "init",
            "tv_weight",
            "checkpoint_every",
            "success_ssim",
            "ssim",
        ],
    ),
    ("defense", &["grid"]),
    (
        "run",
        &[
            "images",
            "image_ids",
            "seeds",
            "output_dir",
            "save_checkpoints",
        ],
    ),
];

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> String {
    let v = v.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        v[1..v.len() - 1].to_string()
    } else {
        v.to_string()
    }
}

impl Raw {
    fn parse(text: &str, path: &str) -> Result<Raw, CliError> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        let err = |line: usize, key: &str, msg: String| CliError::Config {
            path: path.to_string(),
            line: Some(line),
            key: key.to_string(),
            msg,
        };
        for (i, raw_line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = strip_comment(raw_line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(lineno, line, "unterminated section header".into()))?
                    .trim()
                    .to_string();
                if !KNOWN.iter().any(|(s, _)| *s == name) {
                    let names: Vec<&str> = KNOWN.iter().map(|(s, _)| *s).collect();
                    return Err(err(
                        lineno,
                        &name,
                        format!("unknown section (expected one of {})", names.join(", ")),
                    ));
                }
                sections.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, line, "expected `key = value`".into()))?;
            let key = key.trim();
            let section = current
                .as_ref()
                .ok_or_else(|| err(lineno, key, "key outside of any [section]".into()))?;
            let full = format!("{section}.{key}");
            let allowed = KNOWN
                .iter()
                .find(|(s, _)| s == section)
                .map(|(_, k)| *k)
                .unwrap_or(&[]);
            if !allowed.contains(&key) {
                return Err(err(
                    lineno,
                    &full,
                    format!(
                        "unknown key (section [{section}] accepts {})",
                        allowed.join(", ")
                    ),
                ));
            }
            let table = sections.get_mut(section).expect("section registered");
            if let Some(prev) = table.get(key) {
                return Err(err(
                    lineno,
                    &full,
                    format!("duplicate key, first set on line {}", prev.line),
                ));
            }
            table.insert(
                key.to_string(),
                Entry {
                    value: unquote(value),
                    line: lineno,
                },
            );
        }
        Ok(Raw {
            path: path.to_string(),
            sections,
        })
    }

    fn has_section(&self, s: &str) -> bool {
        self.sections.contains_key(s)
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|t| t.get(key))
    }

    fn error(&self, section: &str, key: &str, msg: impl Into<String>) -> CliError {
        CliError::Config {
            path: self.path.clone(),
            line: self.entry(section, key).map(|e| e.line),
            key: format!("{section}.{key}"),
            msg: msg.into(),
        }
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, what: &str) -> Result<Option<T>, CliError> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| {
                self.error(section, key, format!("expected {what}, got `{}`", e.value))
            }),
        }
    }

    fn positive(&self, section: &str, key: &str) -> Result<Option<usize>, CliError> {
        match self.get::<usize>(section, key, "a positive integer")? {
            Some(0) => Err(self.error(section, key, "must be >= 1")),
            v => Ok(v),
        }
    }

    fn bool(&self, section: &str, key: &str) -> Result<Option<bool>, CliError> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(Some(true)),
                "false" | "no" | "off" | "0" => Ok(Some(false)),
                _ => Err(self.error(
                    section,
                    key,
                    format!("expected true or false, got `{}`", e.value),
                )),
            },
        }
    }

    fn list(&self, section: &str, key: &str) -> Option<Vec<String>> {
        self.entry(section, key).map(|e| {
            e.value
                .split(',')
                .map(unquote)
                .filter(|s| !s.is_empty())
                .collect()
        })
    }

    fn parsed<T>(
        &self,
        section: &str,
        key: &str,
        f: impl FnOnce(&str) -> gradleak::Result<T>,
    ) -> Result<Option<T>, CliError> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => f(&e.value)
                .map(Some)
                .map_err(|err| self.error(section, key, err.to_string())),
        }
    }
}

/// `none`, `laplace:0.01`, `gaussian:level200`, `topk:0.1`.
pub fn parse_defense(s: &str) -> gradleak::Result<DefenseConfig> {
    let s = s.trim();
    if s == "none" {
        return Ok(DefenseConfig::None);
    }
    let bad = || {
        gradleak::Error::Invalid(format!("bad defense `{s}` (expected none, laplace:<scale>, gaussian:<scale>, laplace:level<n> or topk:<fraction>)"))
    };
    let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
    let amount = || -> gradleak::Result<NoiseAmount> {
        if let Some(level) = arg.strip_prefix("level") {
            let l: u32 = level.parse().map_err(|_| bad())?;
            Ok(NoiseAmount::Level(l))
        } else {
            Ok(NoiseAmount::Scale(arg.parse().map_err(|_| bad())?))
        }
    };
    let d = match kind {
        "laplace" => DefenseConfig::Laplace { amount: amount()? },
        "gaussian" => DefenseConfig::Gaussian { amount: amount()? },
        "topk" => DefenseConfig::TopK {
            keep_fraction: arg.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    d.validate()?;
    Ok(d)
}

/// `global` or `windowed(w)`.
pub fn parse_ssim_mode(s: &str) -> gradleak::Result<SsimMode> {
    if s == "global" {
        return Ok(SsimMode::Global);
    }
    s.strip_prefix("windowed(")
        .and_then(|r| r.strip_suffix(')'))
        .and_then(|w| w.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .map(SsimMode::Windowed)
        .ok_or_else(|| {
            gradleak::Error::Invalid(format!(
                "bad ssim mode `{s}` (expected global or windowed(w))"
            ))
        })
}

pub fn ssim_mode_name(m: SsimMode) -> String {
    match m {
        SsimMode::Global => "global".into(),
        SsimMode::Windowed(w) => format!("windowed({w})"),
    }
}

impl ExperimentConfig {
    /// Reads a text config, or the `config` object of a run's `manifest.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            line: None,
            key: String::new(),
            msg: format!("cannot read config: {e}"),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config {
                    path: path.display().to_string(),
                    line: Some(e.line()),
                    key: String::new(),
                    msg: e.to_string(),
                })?;
            let cfg = v.get("config").cloned().unwrap_or(v);
            let cfg: ExperimentConfig =
                serde_json::from_value(cfg).map_err(|e| CliError::Config {
                    path: path.display().to_string(),
                    line: None,
                    key: "config".into(),
                    msg: e.to_string(),
                })?;
            cfg.validate(&path.display().to_string())?;
            return Ok(cfg);
        }
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, CliError> {
        let raw = Raw::parse(text, path)?;
        let mut cfg = ExperimentConfig::default();

        // [dataset]
        let kind = raw
            .get::<String>("dataset", "kind", "phantom or directory")?
            .unwrap_or_else(|| "phantom".into());
        cfg.dataset.source = match kind.as_str() {
            "phantom" => {
                if raw.entry("dataset", "path").is_some() {
                    return Err(raw.error("dataset", "path", "only valid with kind = directory"));
                }
                let classes = raw.positive("dataset", "classes")?.unwrap_or(4);
                if !(2..=4).contains(&classes) {
                    return Err(raw.error(
                        "dataset",
                        "classes",
                        format!("phantom classes must be 2..=4, got {classes}"),
                    ));
                }
                DatasetSource::Phantom {
                    n: raw.positive("dataset", "n")?.unwrap_or(20),
                    classes,
                }
            }
            "directory" => {
                for k in ["n", "classes"] {
                    if raw.entry("dataset", k).is_some() {
                        return Err(raw.error("dataset", k, "only valid with kind = phantom"));
                    }
                }
                let path = raw
                    .get::<String>("dataset", "path", "a path")?
                    .ok_or_else(|| {
                        raw.error("dataset", "path", "required when kind = directory")
                    })?;
                DatasetSource::Directory {
                    path: PathBuf::from(path),
                }
            }
            other => {
                return Err(raw.error(
                    "dataset",
                    "kind",
                    format!("expected phantom or directory, got `{other}`"),
                ))
            }
        };
        if let Some(s) = raw.positive("dataset", "size")? {
            cfg.dataset.size = s;
        }
        if let Some(c) = raw.get::<usize>("dataset", "channels", "1 or 3")? {
            if c != 1 && c != 3 {
                return Err(raw.error("dataset", "channels", format!("expected 1 or 3, got {c}")));
            }
            cfg.dataset.channels = c;
        }
        if let Some(b) = raw.bool("dataset", "normalize")? {
            cfg.dataset.normalize = b;
        }
        if let Some(s) = raw.get::<u64>("dataset", "seed", "an unsigned integer")? {
            cfg.dataset.seed = s;
        }

        // [model]
        if let Some(a) = raw.parsed("model", "arch", Arch::from_str)? {
            cfg.model.arch = a;
        }
        if let Some(a) = raw.parsed("model", "activation", Activation::from_str)? {
            cfg.model.activation = a;
        }
        if let Some(k) = raw.get::<usize>("model", "num_classes", "an integer >= 2")? {
            if k < 2 {
                return Err(raw.error("model", "num_classes", "must be >= 2"));
            }
            cfg.model.num_classes = Some(k);
        }
        if let Some(s) = raw.get::<u64>("model", "seed", "an unsigned integer")? {
            cfg.model.seed = s;
        }

        // [train]
        if raw.has_section("train") {
            let epochs = raw
                .get::<usize>("train", "epochs", "a nonnegative integer")?
                .unwrap_or(1);
            let lr = raw.get::<f32>("train", "lr", "a number")?.unwrap_or(0.05);
            if !(lr > 0.0) {
                return Err(raw.error("train", "lr", "must be > 0"));
            }
            let seed = raw
                .get::<u64>("train", "seed", "an unsigned integer")?
                .unwrap_or(0);
            if epochs > 0 {
                cfg.train = Some(TrainConfig { epochs, lr, seed });
            }
        }

        // [fl]
        if let Some(c) = raw.positive("fl", "clients")? {
            cfg.fl.clients = c;
        }
        if let Some(r) = raw.get::<usize>("fl", "warmup_rounds", "a nonnegative integer")? {
            cfg.fl.warmup_rounds = r;
        }
        if let Some(lr) = raw.get::<f32>("fl", "lr", "a number")? {
            if !(lr >= 0.0) {
                return Err(raw.error("fl", "lr", "must be >= 0"));
            }
            cfg.fl.lr = lr;
        }
        if let Some(b) = raw.positive("fl", "batch")? {
            cfg.fl.batch = b;
        }

        // [attack]
        let method = raw
            .parsed("attack", "method", AttackMethod::from_str)?
            .unwrap_or(AttackMethod::Dlg);
        let mut attack = AttackConfig::for_method(method);
        if let Some(kind) = raw.parsed("attack", "optimizer", OptimizerKind::from_str)? {
            let iters = attack.optimizer.max_iters;
            attack.optimizer = match kind {
                OptimizerKind::Lbfgs => OptimizerConfig::lbfgs(iters),
                OptimizerKind::Adam => OptimizerConfig::adam(iters, 0.1),
                OptimizerKind::Sgd => OptimizerConfig::sgd(iters, 0.1),
            };
        }
        if let Some(n) = raw.positive("attack", "iterations")? {
            attack.optimizer.max_iters = n;
        }
        if let Some(lr) = raw.get::<f32>("attack", "lr", "a number")? {
            attack.optimizer.lr = lr;
        }
        if let Some(h) = raw.positive("attack", "history")? {
            attack.optimizer.lbfgs_history = h;
        }
        if let Some(t) = raw.get::<f64>("attack", "tolerance", "a number")? {
            attack.optimizer.tolerance = t;
        }
        if let Some(b) = raw.get::<f64>("attack", "adam_beta1", "a number")? {
            attack.optimizer.adam_betas.0 = b;
        }
        if let Some(b) = raw.get::<f64>("attack", "adam_beta2", "a number")? {
            attack.optimizer.adam_betas.1 = b;
        }
        if let Some(e) = raw.get::<f64>("attack", "adam_eps", "a number")? {
            attack.optimizer.adam_eps = e;
        }
        if let Some(i) = raw.parsed("attack", "init", InitKind::from_str)? {
            attack.init = i;
        }
        if let Some(w) = raw.get::<f64>("attack", "tv_weight", "a number")? {
            attack.tv_weight = w;
        }
        if let Some(c) = raw.positive("attack", "checkpoint_every")? {
            attack.checkpoint_every = c;
        }
        if let Some(s) = raw.get::<f64>("attack", "success_ssim", "a number in (0, 1]")? {
            attack.success_ssim = s;
        }
        if let Some(m) = raw.parsed("attack", "ssim", parse_ssim_mode)? {
            attack.ssim_mode = m;
        }
        if let Err(e) = attack.validate() {
            return Err(CliError::Config {
                path: path.to_string(),
                line: None,
                key: "attack".into(),
                msg: e.to_string(),
            });
        }
        cfg.attack = attack;

        // [defense]
        if let Some(items) = raw.list("defense", "grid") {
            if items.is_empty() {
                return Err(raw.error("defense", "grid", "needs at least one entry"));
            }
            cfg.defense_grid = items
                .iter()
                .map(|s| parse_defense(s).map_err(|e| raw.error("defense", "grid", e.to_string())))
                .collect::<Result<_, _>>()?;
        }

        // [run]
        match (raw.entry("run", "images"), raw.list("run", "image_ids")) {
            (Some(_), Some(_)) => {
                return Err(raw.error(
                    "run",
                    "image_ids",
                    "set either run.images or run.image_ids, not both",
                ))
            }
            (_, Some(ids)) if ids.is_empty() => {
                return Err(raw.error("run", "image_ids", "needs at least one id"))
            }
            (_, Some(ids)) => cfg.images = ImageSelection::Ids(ids),
            (Some(_), None) => {
                cfg.images = ImageSelection::Count(raw.positive("run", "images")?.expect("present"))
            }
            (None, None) => {}
        }
        if let Some(seeds) = raw.list("run", "seeds") {
            cfg.seeds = seeds
                .iter()
                .map(|s| {
                    s.parse::<u64>().map_err(|_| {
                        raw.error(
                            "run",
                            "seeds",
                            format!("expected unsigned integers, got `{s}`"),
                        )
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(o) = raw.get::<String>("run", "output_dir", "a path")? {
            cfg.output_dir = PathBuf::from(o);
        }
        if let Some(b) = raw.bool("run", "save_checkpoints")? {
            cfg.save_checkpoints = b;
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    /// Cross-field checks shared by text and JSON configs.
    pub fn validate(&self, path: &str) -> Result<(), CliError> {
        let err = |key: &str, msg: String| CliError::Config {
            path: path.to_string(),
            line: None,
            key: key.to_string(),
            msg,
        };
        if self.seeds.is_empty() {
            return Err(err("run.seeds", "needs at least one seed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(err("run.seeds", format!("seed {s} listed twice")));
            }
        }
        if self.defense_grid.is_empty() {
            return Err(err("defense.grid", "needs at least one entry".into()));
        }
        for d in &self.defense_grid {
            d.validate()
                .map_err(|e| err("defense.grid", e.to_string()))?;
        }
        self.attack
            .validate()
            .map_err(|e| err("attack", e.to_string()))?;
        if let DatasetSource::Phantom { n, .. } = self.dataset.source {
            if let ImageSelection::Count(c) = self.images {
                if c > n {
                    return Err(err(
                        "run.images",
                        format!("{c} images requested but the phantom dataset has {n}"),
                    ));
                }
            }
        }
        Ok(())
    }
}
