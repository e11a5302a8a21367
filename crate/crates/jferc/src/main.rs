use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use jferc::checks::{micro_gradcheck, GRADCHECK_TOL};
use jferc::experiments::{run_ablation, run_sweep, sweep_csv, SweepParam, Variant};
use jferc::manifest::{write_manifest, Split};
use jferc::run::{load_dataset, log_config, run_eval, run_train, LOG_FILE};
use jferc::synth::{materialize_audio, synth_dataset, SynthOptions};
use jferc::train::RunLog;
use jferc::RunConfig;

#[derive(Parser)]
#[command(name = "jferc", version, about = "Joint-vector cross-modal fusion for emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manifest with WAV files.
    SynthData(SynthArgs),
    /// Train on a manifest and write checkpoint, log and test metrics.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a trained run directory on a manifest.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of the full network's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the full model and its ablations and print the delta tables.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; the table reports medians.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Comma-separated subset of full, no_jfm, no_joint, no_icl, concat.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train and test once per value of N or of the joint length.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// n_blocks or joint_len.
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults to the paper's grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Comma-separated class probabilities.
    #[arg(long, value_delimiter = ',', default_value = "0.55,0.25,0.12,0.08")]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class names; defaults to the config's classes.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Keep waveform recipes inline instead of writing WAV files.
    #[arg(long)]
    inline_audio: bool,
    /// Per-modality probability of rendering a random class.
    #[arg(long, default_value_t = 0.2)]
    corruption: f64,
    /// Mark every record as training data.
    #[arg(long)]
    all_train: bool,
}

/// Config file plus overrides. Every flag is shorthand for `--set key=value`.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set icl.tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "optim.epochs", alias = "epochs")]
    epochs: Option<usize>,
    #[arg(long = "optim.lr", alias = "lr")]
    lr: Option<f64>,
    #[arg(long = "optim.batch-size", alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "model.model-dim", alias = "model-dim")]
    model_dim: Option<usize>,
    #[arg(long = "model.n-blocks", alias = "n-blocks")]
    n_blocks: Option<usize>,
    #[arg(long = "model.joint-len", alias = "joint-len")]
    joint_len: Option<usize>,
    /// jfm, concat or late.
    #[arg(long = "fusion.mode", alias = "fusion-mode")]
    fusion_mode: Option<String>,
    /// fixed or literal.
    #[arg(long = "fusion.routing", alias = "routing")]
    routing: Option<String>,
    #[arg(long = "icl.tau")]
    icl_tau: Option<f64>,
    #[arg(long = "icl.lambda")]
    icl_lambda: Option<f64>,
    #[arg(long = "icl.normalize")]
    icl_normalize: Option<bool>,
    #[arg(long = "icl.raw-similarity")]
    icl_raw_similarity: Option<bool>,
    #[arg(long = "no-jfm")]
    no_jfm: bool,
    #[arg(long = "no-joint")]
    no_joint: bool,
    #[arg(long = "no-icl")]
    no_icl: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut sets: Vec<String> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{k}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("optim.epochs", self.epochs.map(|v| v.to_string()));
        push("optim.lr", self.lr.map(|v| v.to_string()));
        push("optim.batch_size", self.batch_size.map(|v| v.to_string()));
        push("model.model_dim", self.model_dim.map(|v| v.to_string()));
        push("model.n_blocks", self.n_blocks.map(|v| v.to_string()));
        push("model.joint_len", self.joint_len.map(|v| v.to_string()));
        push("fusion.mode", self.fusion_mode.clone());
        push("fusion.routing", self.routing.clone());
        push("icl.tau", self.icl_tau.map(|v| v.to_string()));
        push("icl.lambda", self.icl_lambda.map(|v| v.to_string()));
        push("icl.normalize", self.icl_normalize.map(|v| v.to_string()));
        push("icl.raw_similarity", self.icl_raw_similarity.map(|v| v.to_string()));
        push("ablation.no_jfm", self.no_jfm.then(|| "true".into()));
        push("ablation.no_joint", self.no_joint.then(|| "true".into()));
        push("ablation.no_icl", self.no_icl.then(|| "true".into()));
        cfg.apply_overrides(&sets)?;
        cfg.apply_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    Ok(match s {
        "all" => None,
        _ => Some(match Split::ALL.into_iter().find(|x| x.name() == s) {
            Some(x) => x,
            None => bail!("unknown split {s:?}; expected train, val, test or all"),
        }),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => {
            let classes = if a.classes.is_empty() { RunConfig::default().classes } else { a.classes };
            let opts = SynthOptions {
                corruption: a.corruption,
                ..SynthOptions::default()
            };
            let mut records = synth_dataset(a.n, &a.weights, &classes, a.seed, &opts)?;
            if a.all_train {
                records.iter_mut().for_each(|r| r.split = Some(Split::Train));
            }
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            if !a.inline_audio {
                materialize_audio(&mut records, &a.out, "audio")?;
            }
            let path = a.out.join("manifest.jsonl");
            write_manifest(&path, &records)?;
            println!("wrote {} records to {}", records.len(), path.display());
        }
        Command::Train { manifest, out, config } => {
            let cfg = config.resolve()?;
            let r = run_train(&cfg, &manifest, &out)?;
            println!(
                "{} accuracy {:.2}% weighted F1 {:.2}%",
                r.split.name(),
                100.0 * r.metrics.accuracy,
                100.0 * r.metrics.weighted_f1
            );
        }
        Command::Eval { run, manifest, out, split } => {
            let m = run_eval(&run, &manifest, parse_split(&split)?, &out)?;
            println!("accuracy {:.2}% weighted F1 {:.2}%", 100.0 * m.accuracy, 100.0 * m.weighted_f1);
        }
        Command::Gradcheck { seed } => {
            let g = micro_gradcheck(seed)?;
            println!(
                "checked {} parameters: max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                g.scalars, g.report.max_relative_error, g.worst_param, g.report.element, g.report.analytic, g.report.numeric
            );
            if !(g.report.max_relative_error < GRADCHECK_TOL) {
                bail!("gradient check failed: {:e} >= {GRADCHECK_TOL:e}", g.report.max_relative_error);
            }
        }
        Command::Ablate {
            manifest,
            out,
            seeds,
            variants,
            config,
        } => {
            let cfg = config.resolve()?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?
            };
            fs::create_dir_all(&out)?;
            let mut log = RunLog::default();
            log_config(&mut log, &cfg);
            let data = load_dataset(&cfg, &manifest, None)?;
            let result = run_ablation(&cfg, &data, &variants, &seeds, &mut log);
            fs::write(out.join(LOG_FILE), log.as_str())?;
            let report = result?;
            let table = report.table();
            fs::write(out.join("ablation.txt"), &table)?;
            fs::write(out.join("ablation.csv"), report.csv())?;
            print!("{table}");
        }
        Command::Sweep {
            manifest,
            out,
            param,
            grid,
            config,
        } => {
            let cfg = config.resolve()?;
            let param = SweepParam::parse(&param)?;
            let grid = if grid.is_empty() { param.default_grid() } else { grid };
            fs::create_dir_all(&out)?;
            let mut log = RunLog::default();
            log_config(&mut log, &cfg);
            let data = load_dataset(&cfg, &manifest, None)?;
            let result = run_sweep(&cfg, &data, param, &grid, &mut log);
            fs::write(out.join(LOG_FILE), log.as_str())?;
            let csv = sweep_csv(param, &result?);
            fs::write(out.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
