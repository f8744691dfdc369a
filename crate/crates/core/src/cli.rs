//! The `sacnet` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error (bad flags or an invalid
//! config/spec file), 2 on a runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{correlation_stats, generate_synthetic, split_per_subject, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DataSource, RunConfig, TrainOptions};
use crate::pipeline::{compcode_baseline, evaluate, load_data, run_ablation, train_on, write_ablation};
use crate::verify::emit_report;

#[derive(Debug, Parser)]
#[command(name = "sacnet", version, about = "Scale-aware competitive palmprint verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a per-step metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Image tree or `synthetic`; overrides the config's `data` key.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Verify the held-out split with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain every branch and module combination and tabulate EERs.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Verify the held-out split with frozen-bank CompCode.
    BaselineCompcode {
        #[arg(long)]
        data: Option<String>,
        /// Supplies input size, kernel size, orientations and split.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic dataset to PNG files.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure together with the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

fn usage(flag: &str, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: format!("{flag}: {e}"),
    }
}

fn runtime(e: Error) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn read_config(flag: &str, path: &Path) -> std::result::Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(flag, format!("{}: {}", path.display(), e)))?;
    RunConfig::parse(&text).map_err(|e| usage(flag, e))
}

fn apply_data(cfg: &mut RunConfig, data: &Option<String>) {
    if let Some(d) = data {
        cfg.data.source = DataSource::parse(d);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train {
            config,
            data,
            out,
            quiet,
        } => {
            let mut cfg = read_config("--config", &config)?;
            apply_data(&mut cfg, &data);
            let ds = load_data(&cfg).map_err(runtime)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                track_accuracy: false,
                progress: !quiet,
            };
            let run = train_on(&cfg, &ds, &opts).map_err(runtime)?;
            let last = run.summary.records.last();
            println!(
                "trained {} epochs, {} steps; final loss {}",
                run.trainer.epoch,
                run.trainer.step,
                last.map_or(f64::NAN, |r| r.loss)
            );
            write_text(&out.join("config.txt"), &run.trainer.config.to_text()).map_err(runtime)
        }
        Command::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint).map_err(|e| usage("--checkpoint", e))?;
            let mut cfg = ck.config.clone();
            apply_data(&mut cfg, &data);
            let model = ck.model().map_err(runtime)?;
            let ds = load_data(&cfg).map_err(runtime)?;
            let split = split_per_subject(&ds, cfg.data.train_fraction).map_err(runtime)?;
            let ev = evaluate(&model, &cfg, &ds, &split.eval).map_err(runtime)?;
            emit_report(&out, &ev.roc, &ev.eer, &ev.scores).map_err(runtime)?;
            println!("eer={} threshold={}", ev.eer.eer, ev.eer.threshold);
            Ok(())
        }
        Command::Ablate {
            config,
            out,
            seeds,
            quiet,
        } => {
            let cfg = read_config("--config", &config)?;
            let seeds = if seeds.is_empty() { vec![cfg.model.seed] } else { seeds };
            let ds = load_data(&cfg).map_err(runtime)?;
            let report = run_ablation(&cfg, &ds, &seeds, !quiet).map_err(runtime)?;
            write_ablation(&out, &report).map_err(runtime)?;
            print!("{}", report.to_markdown());
            Ok(())
        }
        Command::BaselineCompcode { data, config, out } => {
            let mut cfg = match &config {
                Some(p) => read_config("--config", p)?,
                None => {
                    // Match the default synthetic render size.
                    let mut cfg = RunConfig::default();
                    cfg.model.input_hw = SyntheticSpec::default().image_hw;
                    cfg
                }
            };
            apply_data(&mut cfg, &data);
            let ds = load_data(&cfg).map_err(runtime)?;
            let split = split_per_subject(&ds, cfg.data.train_fraction).map_err(runtime)?;
            let ev = compcode_baseline(&cfg, &ds, &split.eval).map_err(runtime)?;
            emit_report(&out, &ev.roc, &ev.eer, &ev.scores).map_err(runtime)?;
            println!("eer={} threshold={}", ev.eer.eer, ev.eer.threshold);
            Ok(())
        }
        Command::Synth { spec, out } => {
            let spec = match &spec {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| usage("--spec", format!("{}: {}", p.display(), e)))?;
                    SyntheticSpec::parse(&text).map_err(|e| usage("--spec", e))?
                }
                None => SyntheticSpec::default(),
            };
            let ds = generate_synthetic(&spec).map_err(runtime)?;
            ds.dump(&out).map_err(runtime)?;
            write_text(&out.join("spec.txt"), &spec.to_text()).map_err(runtime)?;
            let c = correlation_stats(&ds);
            println!(
                "{} subjects x {} samples; within-subject r={:.4} (min {:.4}), between-subject r={:.4}",
                spec.n_subjects, spec.samples_per_subject, c.within_mean, c.within_min, c.between_mean
            );
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
