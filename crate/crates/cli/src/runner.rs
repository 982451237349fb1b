//! Experiment execution.
//!
//! A run prepares the dataset and model, then for every (defense, seed) pair
//! simulates federated rounds in which the attacked clients train on their
//! target image. The adversary intercepts each target's update and attacks it
//! with the global parameters of that round. Attacks run in parallel; results
//! are sorted before anything is written, so output does not depend on the
//! worker count.
//!
//! Sample `i` belongs to client `i mod C` at local index `i / C`. A client's
//! `r`-th target image is its batch in round `warmup_rounds + r`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gradleak::attacks::{run_attack, AttackResult};
use gradleak::data::{
    convert_channels, load_dataset, phantom_corpus, resize_bilinear, to_examples, train_test_split,
    ImageSample, Normalization, PHANTOM_CLASSES,
};
use gradleak::defenses::DefenseConfig;
use gradleak::flsim::{intercept, run_round_with_batches, ClientState, GradientUpdate};
use gradleak::nn::{build_model, train_local, Example, ModelSpec, ParamSet};
use gradleak::rng::derive_seed;
use log::{debug, info};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{DatasetSource, ExperimentConfig, ImageSelection};
use crate::error::CliError;
use crate::report::{write_report, GroupSummary, ReportRow, Summary};

/// Dataset, model and federation layout shared by every task of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    /// Global parameters at the start of round 0.
    pub params: ParamSet,
    /// Images in `[0, 1]` pixel space after resizing.
    pub samples: Vec<ImageSample>,
    /// Model inputs, normalized when enabled.
    pub examples: Vec<Example>,
    pub normalization: Option<Normalization>,
    pub class_names: Vec<String>,
    /// Indices into `samples` of the attacked images.
    pub targets: Vec<usize>,
}

/// One finished attack.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub image_index: usize,
    pub image_id: String,
    pub defense_index: usize,
    pub seed: u64,
    pub round: usize,
    pub result: AttackResult,
}

/// An intercepted update ready to attack.
struct Interception {
    image_index: usize,
    defense_index: usize,
    seed: u64,
    round: usize,
    params: Arc<ParamSet>,
    update: GradientUpdate,
}

fn dataset_error(msg: String) -> CliError {
    CliError::config("dataset.path", msg)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let d = &cfg.dataset;
    let (raw, class_names) = match &d.source {
        DatasetSource::Phantom { n, classes } => (
            phantom_corpus(*n, *classes, d.seed)?,
            PHANTOM_CLASSES[..*classes]
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>(),
        ),
        DatasetSource::Directory { path } => {
            if !path.is_dir() {
                return Err(dataset_error(format!(
                    "dataset directory `{}` does not exist",
                    path.display()
                )));
            }
            let (manifest, samples) = load_dataset(path)?;
            if samples.is_empty() {
                return Err(dataset_error(format!(
                    "dataset directory `{}` contains no images",
                    path.display()
                )));
            }
            (samples, manifest.class_names)
        }
    };
    let mut samples = Vec::with_capacity(raw.len());
    for s in raw {
        let img = convert_channels(&s.image, d.channels)?;
        let img = if img.dims()[1] == d.size && img.dims()[2] == d.size {
            img
        } else {
            resize_bilinear(&img, d.size, d.size)?
        };
        samples.push(ImageSample::new(img, s.label, s.source_id)?);
    }

    let num_classes = cfg.model.num_classes.unwrap_or(class_names.len());
    if num_classes < 2 {
        return Err(CliError::config(
            "model.num_classes",
            format!("need at least 2 classes, dataset has {}", class_names.len()),
        ));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
        return Err(CliError::config(
            "model.num_classes",
            format!(
                "sample {} has label {} but the model has {num_classes} classes",
                s.source_id, s.label
            ),
        ));
    }
    let spec = ModelSpec::new(cfg.model.arch, d.size, num_classes)
        .with_activation(cfg.model.activation)
        .with_input(d.channels, d.size, d.size);
    spec.validate()
        .map_err(|e| CliError::config("model", e.to_string()))?;

    let normalization = if d.normalize {
        Some(Normalization::from_images(
            samples.iter().map(|s| &s.image),
        )?)
    } else {
        None
    };
    let model_samples: Vec<ImageSample> = match &normalization {
        None => samples.clone(),
        Some(n) => samples
            .iter()
            .map(|s| {
                Ok(ImageSample {
                    image: n.normalize(&s.image)?,
                    label: s.label,
                    source_id: s.source_id.clone(),
                })
            })
            .collect::<gradleak::Result<_>>()?,
    };
    let examples = to_examples(&model_samples, num_classes)?;

    let mut params = build_model(&spec, cfg.model.seed)?;
    if let Some(t) = &cfg.train {
        let (train, _) = train_test_split(&model_samples, 0.75);
        let train = to_examples(&train, num_classes)?;
        info!(
            "training {} for {} epochs on {} examples",
            spec.arch,
            t.epochs,
            train.len()
        );
        params = train_local(&params, &spec, &train, t.epochs, t.lr, t.seed)?;
    }

    let targets = match &cfg.images {
        ImageSelection::Count(k) => {
            if *k > samples.len() {
                return Err(CliError::config(
                    "run.images",
                    format!("{k} images requested but the dataset has {}", samples.len()),
                ));
            }
            (0..*k).collect()
        }
        ImageSelection::Ids(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let i = samples
                    .iter()
                    .position(|s| &s.source_id == id)
                    .ok_or_else(|| {
                        CliError::config("run.image_ids", format!("no image with id `{id}`"))
                    })?;
                if out.contains(&i) {
                    return Err(CliError::config(
                        "run.image_ids",
                        format!("id `{id}` listed twice"),
                    ));
                }
                out.push(i);
            }
            out
        }
    };

    Ok(Prepared {
        spec,
        params,
        samples,
        examples,
        normalization,
        class_names,
        targets,
    })
}

impl Prepared {
    fn clients(&self, n: usize, defense: DefenseConfig) -> Result<Vec<ClientState>, CliError> {
        let n = n.min(self.examples.len());
        let mut data: Vec<Vec<Example>> = vec![Vec::new(); n];
        for (i, ex) in self.examples.iter().enumerate() {
            data[i % n].push(ex.clone());
        }
        Ok(data
            .into_iter()
            .enumerate()
            .map(|(c, d)| ClientState::new(c, d, defense))
            .collect::<gradleak::Result<_>>()?)
    }

    /// Per client, the local indices of its targets in attack order.
    fn schedule(&self, n_clients: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_clients];
        for &i in &self.targets {
            out[i % n_clients].push(i);
        }
        out
    }
}

fn simulate(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    defense_index: usize,
    seed: u64,
) -> Result<Vec<Interception>, CliError> {
    let defense = cfg.defense_grid[defense_index];
    let clients = prep.clients(cfg.fl.clients, defense)?;
    let n_clients = clients.len();
    let schedule = prep.schedule(n_clients);
    let attack_rounds = schedule.iter().map(Vec::len).max().unwrap_or(0);
    let warmup = cfg.fl.warmup_rounds;
    let mut params = prep.params.clone();
    let mut out = Vec::new();
    for round in 0..warmup + attack_rounds {
        let batches: Vec<Vec<usize>> = clients
            .iter()
            .map(|c| {
                let n = c.local_data.len();
                if round < warmup {
                    let b = cfg.fl.batch.min(n);
                    (0..b).map(|j| (round * b + j) % n).collect()
                } else {
                    match schedule[c.client_id].get(round - warmup) {
                        Some(&i) => vec![i / n_clients],
                        None => vec![round % n],
                    }
                }
            })
            .collect();
        let (next, record) = run_round_with_batches(
            &clients, &params, &prep.spec, cfg.fl.lr, round, seed, &batches,
        )?;
        if round >= warmup {
            let before = Arc::new(record.global_params_before.clone());
            for (c, targets) in schedule.iter().enumerate() {
                if let Some(&i) = targets.get(round - warmup) {
                    out.push(Interception {
                        image_index: i,
                        defense_index,
                        seed,
                        round,
                        params: Arc::clone(&before),
                        update: intercept(&record, c)?,
                    });
                }
            }
        }
        params = next;
    }
    Ok(out)
}

fn attack_task(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    task: Interception,
) -> Result<TaskOutcome, CliError> {
    let mut acfg = cfg
        .attack
        .clone()
        .with_seed(derive_seed(&[task.seed, task.image_index as u64]));
    acfg.normalization = prep.normalization.clone();
    let sample = &prep.samples[task.image_index];
    let result = run_attack(&task.update, &task.params, &prep.spec, &acfg, &sample.image)?;
    debug!(
        "image {} defense {} seed {}: ssim {:.4} mse {:.3e} in {:.1}s",
        sample.source_id,
        cfg.defense_grid[task.defense_index],
        task.seed,
        result.final_ssim,
        result.final_mse,
        result.wall_time_s
    );
    if let Some(f) = &result.failure {
        log::warn!(
            "image {} defense {} seed {}: {f}",
            sample.source_id,
            cfg.defense_grid[task.defense_index],
            task.seed
        );
    }
    Ok(TaskOutcome {
        image_index: task.image_index,
        image_id: sample.source_id.clone(),
        defense_index: task.defense_index,
        seed: task.seed,
        round: task.round,
        result,
    })
}

/// Runs every (image, defense, seed) attack on a pool of `workers` threads
/// and returns outcomes sorted by (image id, noise scale, grid index, seed).
pub fn execute(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<Vec<TaskOutcome>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let jobs: Vec<(usize, u64)> = (0..cfg.defense_grid.len())
        .flat_map(|d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    pool.install(|| {
        let intercepted: Vec<Interception> = jobs
            .par_iter()
            .map(|&(d, s)| simulate(prep, cfg, d, s))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        info!(
            "{} attacks on {} worker(s)",
            intercepted.len(),
            workers.max(1)
        );
        let mut outcomes = intercepted
            .into_par_iter()
            .map(|t| attack_task(prep, cfg, t))
            .collect::<Result<Vec<_>, _>>()?;
        let scales: Vec<f64> = cfg
            .defense_grid
            .iter()
            .map(|d| d.strength())
            .collect::<gradleak::Result<_>>()?;
        outcomes.sort_by(|a, b| {
            a.image_id
                .cmp(&b.image_id)
                .then(scales[a.defense_index].total_cmp(&scales[b.defense_index]))
                .then(a.defense_index.cmp(&b.defense_index))
                .then(a.seed.cmp(&b.seed))
        });
        Ok(outcomes)
    })
}

pub fn report_row(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    o: &TaskOutcome,
) -> Result<ReportRow, CliError> {
    let d = &cfg.defense_grid[o.defense_index];
    Ok(ReportRow {
        image_id: o.image_id.clone(),
        attack: o.result.method.to_string(),
        model: prep.spec.arch.to_string(),
        noise_kind: d.kind_name().to_string(),
        noise_scale: d.strength()?,
        iterations: o.result.iterations,
        final_mse: o.result.final_mse,
        final_ssim: o.result.final_ssim,
        success: o.result.success,
        wall_time_s: o.result.wall_time_s,
    })
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
}

fn image_ext(c: usize) -> &'static str {
    if c == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Full pipeline: prepare, attack, then write `report.csv`, `summary.json`,
/// `manifest.json` and checkpoint images under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<RunOutput, CliError> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| {
        CliError::config(
            "run.output_dir",
            format!("cannot create `{}`: {e}", dir.display()),
        )
    })?;
    let prep = prepare(cfg)?;
    let outcomes = execute(&prep, cfg, workers)?;
    let rows = outcomes
        .iter()
        .map(|o| report_row(&prep, cfg, o))
        .collect::<Result<Vec<_>, _>>()?;

    let mut csv_bytes = Vec::new();
    write_report(&mut csv_bytes, &rows)?;
    write_file(&dir.join("report.csv"), &csv_bytes)?;

    let groups = cfg
        .defense_grid
        .iter()
        .enumerate()
        .map(|(d, def)| {
            let members = outcomes
                .iter()
                .zip(&rows)
                .filter(|(o, _)| o.defense_index == d)
                .map(|(_, r)| r);
            GroupSummary::from_rows(&def.to_string(), members)
        })
        .collect();
    let summary = Summary {
        attack: cfg.attack.method.to_string(),
        model: prep.spec.arch.to_string(),
        success_threshold: cfg.attack.success_ssim,
        groups,
    };
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;

    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "dataset": {
            "samples": prep.samples.len(),
            "class_names": prep.class_names,
            "normalization": prep.normalization,
        },
        "model": prep.spec,
        "image_ids": prep.targets.iter().map(|&i| prep.samples[i].source_id.clone()).collect::<Vec<_>>(),
    });
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;

    if cfg.save_checkpoints {
        write_checkpoints(&prep, cfg, &outcomes, &dir)?;
    }
    info!(
        "wrote {} rows to {}",
        rows.len(),
        dir.join("report.csv").display()
    );
    Ok(RunOutput { dir, rows, summary })
}

/// `recon/<image_id>/<iter>.ppm` for a single (defense, seed) pair, otherwise
/// `recon/<image_id>/<defense>-seed<seed>/<iter>.ppm`. The ground truth is
/// stored once per image as `truth.ppm`.
fn write_checkpoints(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    outcomes: &[TaskOutcome],
    dir: &Path,
) -> Result<(), CliError> {
    let single = cfg.defense_grid.len() == 1 && cfg.seeds.len() == 1;
    let ext = image_ext(prep.spec.input_dims.0);
    let mut truths = BTreeMap::new();
    for o in outcomes {
        let base = dir.join("recon").join(&o.image_id);
        truths.entry(o.image_index).or_insert_with(|| base.clone());
        let sub = if single {
            base
        } else {
            let tag = cfg.defense_grid[o.defense_index]
                .to_string()
                .replace(':', "-");
            base.join(format!("{tag}-seed{}", o.seed))
        };
        for (iter, img) in &o.result.checkpoints {
            gradleak::data::save_image(img, &sub.join(format!("{iter}.{ext}")))?;
        }
    }
    for (i, base) in truths {
        gradleak::data::save_image(&prep.samples[i].image, &base.join(format!("truth.{ext}")))?;
    }
    Ok(())
}
