//! `mivolo`: train, evaluate, pair detections, aggregate votes, generate
//! synthetic fixtures and check gradients.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure.

use clap::{Args, Parser, Subcommand};
use mivolo_core::gradcheck::{check_model, Selection};
use mivolo_core::metrics::LdsWeights;
use mivolo_core::nn::checkpoint;
use mivolo_core::pairing::pair_manifest;
use mivolo_core::train::{evaluate, init_from_single_input, synth, train, Control, Dataset, EvalMode};
use mivolo_core::votes::{aggregate_tasks, score_users, ControlRecord, Method, VoteRecord};
use mivolo_core::{jsonl, Error, MiVolo, ModelConfig};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "mivolo", version, about = "Multi-input age and gender estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A TOML config file, or a named preset when no file is given.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config; unknown keys are rejected.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: tiny, micro or d1.
    #[arg(long, default_value = "tiny")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<ModelConfig, Error> {
        match &self.config {
            Some(path) => ModelConfig::load(path),
            None => ModelConfig::preset(&self.preset),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a sample manifest and write a checkpoint.
    Train {
        /// Sample records as JSON lines.
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Single-input checkpoint to start a two-input model from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Step log file (one line per logged step).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a sample manifest.
    Eval {
        /// Sample records as JSON lines.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "both")]
        mode: EvalMode,
        /// Per-record predictions as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Match faces to persons in a detection manifest.
    Pair {
        #[arg(long)]
        detections: PathBuf,
        /// Pair manifest to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Aggregate crowd votes per task.
    Aggregate {
        #[arg(long)]
        votes: PathBuf,
        /// Control-task answers; needed for weighted_mean.
        #[arg(long)]
        controls: Option<PathBuf>,
        #[arg(long, default_value = "weighted_mean")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Per-user MAE and CS@3 over the control answers.
        #[arg(long)]
        users: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a synthetic dataset (test fixture) and its manifest.
    Synth {
        #[arg(long)]
        n: usize,
        /// Output folder.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare model gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Synthetic samples in the probe batch.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 17)]
        data_seed: u64,
        /// Entries probed per parameter tensor; 0 probes every entry.
        #[arg(long, default_value_t = 48)]
        per_group: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Print a preset config as TOML.
    Config {
        #[arg(long, default_value = "tiny")]
        preset: String,
    },
}

enum Failure {
    Input(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { manifest, config, out, init, log } => {
            run_train(&manifest, config.load()?, &out, init.as_deref(), log.as_deref())
        }
        Command::Eval { manifest, checkpoint, mode, out } => run_eval(&manifest, &checkpoint, mode, out.as_deref()),
        Command::Pair { detections, out, config } => {
            let pairs = pair_manifest(&detections, &config.load()?.preprocess)?;
            jsonl::write(&out, &pairs)?;
            println!("pairs={}", pairs.len());
            Ok(())
        }
        Command::Aggregate { votes, controls, method, out, users, config } => {
            let votes: Vec<VoteRecord> = jsonl::read(&votes)?;
            let controls: Vec<ControlRecord> = match controls {
                Some(path) => jsonl::read(&path)?,
                None => Vec::new(),
            };
            let stats = score_users(&controls);
            let tasks = aggregate_tasks(&votes, &stats, method, &config.load()?.votes)?;
            jsonl::write(&out, &tasks)?;
            if let Some(path) = users {
                jsonl::write(&path, &stats)?;
            }
            println!("tasks={} method={method}", tasks.len());
            Ok(())
        }
        Command::Synth { n, out, seed } => {
            if n == 0 {
                return Err(Failure::Input("--n must be positive".into()));
            }
            let manifest = synth::write_dataset(&out, n, seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Gradcheck { config, samples, data_seed, per_group, h, tol } => {
            run_gradcheck(config.load()?, samples, data_seed, per_group, h, tol)
        }
        Command::Config { preset } => {
            print!("{}", ModelConfig::preset(&preset)?.to_toml_string());
            Ok(())
        }
    }
}

fn run_train(
    manifest: &Path,
    cfg: ModelConfig,
    out: &Path,
    init: Option<&Path>,
    log: Option<&Path>,
) -> Result<(), Failure> {
    let data = Dataset::load(manifest)?;
    let mut model = match init {
        Some(path) => init_from_single_input(&checkpoint::load(path)?, &cfg)?,
        None => MiVolo::new(&cfg)?,
    };
    let mut log = log.map(File::create).transpose()?.map(BufWriter::new);
    let every = cfg.train.log_every.max(1);
    let summary = train(&mut model, &data, |step, _| {
        if step.step % every == 0 || step.step == cfg.train.steps {
            println!("{step}");
            if let Some(w) = log.as_mut() {
                writeln!(w, "{step}")?;
            }
        }
        Ok(Control::Continue)
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    checkpoint::save(&model, out)?;
    println!("steps={} checkpoint={}", summary.steps, out.display());
    Ok(())
}

fn run_eval(manifest: &Path, ckpt: &Path, mode: EvalMode, out: Option<&Path>) -> Result<(), Failure> {
    let model = checkpoint::load(ckpt)?;
    let data = Dataset::load(manifest)?;
    let eval = evaluate(&model, &data, mode)?;
    print!("{}", eval.report);
    println!("evaluated={} skipped={}", eval.evaluated, eval.skipped);
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path)?);
        for &(i, age, gender) in &eval.predictions {
            let line = serde_json::json!({ "image": data.records[i].image, "age": age, "gender": gender });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn run_gradcheck(
    cfg: ModelConfig,
    samples: usize,
    seed: u64,
    per_group: usize,
    h: f64,
    tol: f64,
) -> Result<(), Failure> {
    if samples == 0 || h.is_nan() || h <= 0.0 {
        return Err(Failure::Input("--samples and --h must be positive".into()));
    }
    let model = MiVolo::new(&cfg)?;
    let data = synth::dataset(samples, seed);
    let lds = LdsWeights::from_ages(&data.ages(), &cfg.age, &cfg.lds)?;
    let batch = (0..data.len()).map(|i| data.labeled(i, &cfg, &lds)).collect::<Result<Vec<_>, _>>()?;
    let selection = if per_group == 0 { Selection::All } else { Selection::PerGroup(per_group) };
    let start = Instant::now();
    let report = check_model(&model, &batch, selection, h)?;
    for g in &report.groups {
        println!("{:<48} n={:<5} max_rel={:.3e}", g.name, g.checked, g.max_rel_error);
    }
    let worst = report.max_rel_error();
    println!("checked={} max_rel_error={worst:.3e} seconds={:.1}", report.checked(), start.elapsed().as_secs_f64());
    if worst < tol {
        Ok(())
    } else {
        let w = report.worst().expect("at least one group");
        Err(Failure::Numerical(format!(
            "{}[{}]: analytic {:e} vs numeric {:e} exceeds {tol:e}",
            w.name, w.worst_index, w.worst_analytic, w.worst_numeric
        )))
    }
}
