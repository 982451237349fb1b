use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradleak::attacks::fmt_sig9;
use gradleak::data::{
    load_image, phantom_corpus, resize_bilinear, write_dataset, ImageSample, PHANTOM_CLASSES,
};
use gradleak::metrics::{mse, psnr, ssim, SsimMode};
use gradleak_cli::config::{parse_defense, ImageSelection};
use gradleak_cli::report::{plot_data, read_report};
use gradleak_cli::runner::{execute, prepare};
use gradleak_cli::{run_experiment, CliError, ExperimentConfig};
use serde_json::json;

/// Gradient-leakage attack and defense simulator.
#[derive(Parser)]
#[command(name = "gradleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write report.csv, summary.json and images.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Replaces the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a phantom dataset directory.
    GenData {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Attack a single image and print the result as JSON.
    AttackOne {
        #[arg(long)]
        config: PathBuf,
        /// Image id; defaults to the first image of the config.
        #[arg(long)]
        image_id: Option<String>,
        /// Defense such as `none` or `laplace:0.001`; defaults to the first grid entry.
        #[arg(long)]
        defense: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare two PGM/PPM images.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// SSIM window size; global SSIM when absent.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Emit `noise_scale,mean_ssim,mean_mse` from a report.
    SweepPlotdata {
        #[arg(long)]
        report: PathBuf,
        /// Output file; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            workers,
            seed,
            output,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let out = run_experiment(&cfg, workers.unwrap_or_else(default_workers))?;
            for g in &out.summary.groups {
                println!(
                    "{:<20} runs {:>4}  asr {}  ssim {}  mse {}",
                    g.defense,
                    g.runs,
                    fmt_sig9(g.asr),
                    fmt_sig9(g.ssim_mean),
                    fmt_sig9(g.mse_mean)
                );
            }
            Ok(())
        }
        Command::GenData {
            output,
            n,
            classes,
            seed,
            size,
        } => {
            if !(2..=PHANTOM_CLASSES.len()).contains(&classes) {
                return Err(CliError::config(
                    "classes",
                    format!("must be 2..={}", PHANTOM_CLASSES.len()),
                ));
            }
            if n == 0 || size == 0 {
                return Err(CliError::config("n", "n and size must be positive"));
            }
            let samples = phantom_corpus(n, classes, seed)?
                .into_iter()
                .map(|s| {
                    let img = if s.image.dims()[1] == size {
                        s.image
                    } else {
                        resize_bilinear(&s.image, size, size)?
                    };
                    ImageSample::new(img, s.label, s.source_id)
                })
                .collect::<gradleak::Result<Vec<_>>>()?;
            let names: Vec<String> = PHANTOM_CLASSES[..classes]
                .iter()
                .map(|s| s.to_string())
                .collect();
            write_dataset(&output, "phantom", &names, &samples)?;
            println!("wrote {} images to {}", samples.len(), output.display());
            Ok(())
        }
        Command::AttackOne {
            config,
            image_id,
            defense,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.images = match image_id {
                Some(id) => ImageSelection::Ids(vec![id]),
                None => match &cfg.images {
                    ImageSelection::Ids(ids) => ImageSelection::Ids(ids[..1].to_vec()),
                    ImageSelection::Count(_) => ImageSelection::Count(1),
                },
            };
            if let Some(d) = defense {
                cfg.defense_grid =
                    vec![parse_defense(&d)
                        .map_err(|e| CliError::config("defense", e.to_string()))?];
            }
            cfg.defense_grid.truncate(1);
            cfg.seeds = vec![seed.unwrap_or(cfg.seeds[0])];
            let prep = prepare(&cfg)?;
            let out = execute(&prep, &cfg, 1)?;
            let o = out
                .first()
                .ok_or_else(|| CliError::Runtime("no attack was run".into()))?;
            let mut v = o.result.to_json();
            v["image_id"] = json!(o.image_id);
            v["defense"] = json!(cfg.defense_grid[0].to_string());
            v["seed"] = json!(o.seed);
            v["round"] = json!(o.round);
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(())
        }
        Command::Metrics { a, b, window } => {
            let a = load_image(&a)?.image;
            let b = load_image(&b)?.image;
            let mode = window.map(SsimMode::Windowed).unwrap_or(SsimMode::Global);
            let num = |v: f64| {
                if v.is_finite() {
                    json!(v)
                } else {
                    json!(fmt_sig9(v))
                }
            };
            let v = json!({
                "mse": num(mse(&a, &b)?),
                "ssim": num(ssim(&a, &b, mode)?),
                "psnr": num(psnr(&a, &b)?),
            });
            println!("{v}");
            Ok(())
        }
        Command::SweepPlotdata { report, output } => {
            let file = std::fs::File::open(&report)
                .map_err(|e| CliError::config("report", format!("{}: {e}", report.display())))?;
            let rows = read_report(file)?;
            match output {
                Some(p) => plot_data(&rows, std::fs::File::create(&p)?),
                None => plot_data(&rows, std::io::stdout().lock()),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
