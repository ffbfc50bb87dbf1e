//! `byol`: train, evaluate and inspect BYOL models.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | other failure |
//! | 2 | usage error (bad flags) |
//! | 3 | config error |
//! | 4 | data error |
//! | 5 | collapse abort (`train.strict_collapse`) |
//! | 6 | numeric failure (non-finite values) |
//! | 7 | checkpoint or file I/O error |
//! | 8 | gradient check failed |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use byol_core::checks;
use byol_core::config::{Profile, RunConfig};
use byol_core::data::{self, DataError, Split, SyntheticSplits};
use byol_core::eval::{self, EvalError};
use byol_core::model::checkpoint::{hex, Checkpoint, CheckpointError, VERSION};
use byol_core::tensor::GradCheckOptions;
use byol_core::train::{self, RunData, TrainError};

#[derive(Parser)]
#[command(name = "byol", version, about = "BYOL self-supervised training with batch self-labeling losses")]
#[command(after_help = "Runs without output.dir go to $BYOL_OUTPUT_ROOT/run-<digest> (default root: runs).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model from a config file.
    Train {
        /// Config file of `section.key = value` lines.
        #[arg(long)]
        config: PathBuf,
        /// Defaults the config is applied on top of.
        #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
        profile: String,
        /// Continue from a checkpoint of this run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Zero the wall-clock column so reruns are byte-identical.
        #[arg(long)]
        deterministic: bool,
        /// Print the resolved config and exit without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Linear evaluation of a checkpoint, or an accuracy curve over a run.
    Eval {
        /// Checkpoint to probe.
        #[arg(long, required_unless_present = "run", conflicts_with = "run")]
        checkpoint: Option<PathBuf>,
        /// Run directory; probes every checkpoint and writes accuracy_curve.csv.
        #[arg(long)]
        run: Option<PathBuf>,
        /// STL10-layout directory with train_X/y.bin and test_X/y.bin.
        /// Defaults to the data described by the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Online-vs-target similarity matrix of a list of images.
    Similarity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lines of `label = path` (PNG) or `label = file.bin#index`.
        #[arg(long)]
        images: PathBuf,
        /// Output directory for similarity.csv and similarity.svg.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Positive threshold; defaults to the checkpoint's loss.theta_p.
        #[arg(long, allow_negative_numbers = true)]
        theta_p: Option<f64>,
        /// Negative threshold; defaults to the checkpoint's loss.theta_n.
        #[arg(long, allow_negative_numbers = true)]
        theta_n: Option<f64>,
    },
    /// Finite-difference check of every primitive, layer and loss.
    Gradcheck {
        /// Maximum relative error.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Randomized shapes per case.
        #[arg(long, default_value_t = 20)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only cases whose name contains this string.
        #[arg(long)]
        only: Option<String>,
    },
    /// Write a labeled synthetic dataset in the STL10 layout.
    SynthData {
        /// Spec file (seed, classes, per_class, test_per_class, size,
        /// hue_jitter, noise, radius_min, radius_max); defaults if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print format version, config digest, step and parameter table.
    InspectCheckpoint {
        checkpoint: PathBuf,
    },
}

/// Error with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

const CONFIG: u8 = 3;
const DATA: u8 = 4;
const COLLAPSE: u8 = 5;
const NUMERIC: u8 = 6;
const IO: u8 = 7;
const GRADCHECK: u8 = 8;

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) => CONFIG,
            TrainError::Data(_) => DATA,
            TrainError::Collapse { .. } => COLLAPSE,
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => NUMERIC,
            TrainError::Checkpoint(CheckpointError::Mismatch(_)) => CONFIG,
            TrainError::Checkpoint(_) | TrainError::Io { .. } => IO,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::Config(_) => CONFIG,
            EvalError::Data(_) | EvalError::Images(_) => DATA,
            EvalError::Tensor(_) => NUMERIC,
            EvalError::Checkpoint(_) | EvalError::Io { .. } => IO,
            EvalError::Train(_) => 1,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::new(DATA, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::new(IO, e.to_string())
    }
}

fn read_text(path: &Path, code: u8) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(code, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(IO, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::new(IO, format!("{}: {e}", path.display())))
}

fn train(config: &Path, profile: &str, resume: Option<&Path>, deterministic: bool, dry_run: bool) -> Result<(), Failure> {
    let profile: Profile = profile.parse().map_err(|e: String| Failure::new(CONFIG, e))?;
    let text = read_text(config, CONFIG)?;
    let mut cfg = RunConfig::parse(&text, profile).map_err(|e| Failure::new(CONFIG, format!("{}: {e}", config.display())))?;
    cfg.train.deterministic |= deterministic;
    if dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let summary = train::train_run(&cfg, resume)?;
    let last = summary.records.last();
    println!("run directory: {}", summary.output_dir.display());
    println!("steps: {}", summary.trainer.step);
    if let Some(r) = last {
        println!("final loss: {:.6}", r.loss);
        println!("final collapse_std: {:.6}", r.collapse_std);
    }
    if let Some(step) = summary.collapse_alarm {
        println!("collapse alarm raised at step {step}");
    }
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

/// Labeled probe splits: from `--data` when given, else from the config.
fn probe_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<(data::ImageDataset, data::ImageDataset), Failure> {
    match dir {
        Some(dir) => {
            let size = cfg.data.image_size;
            Ok((data::read_stl10(dir, Split::Train, size)?, data::read_stl10(dir, Split::Test, size)?))
        }
        None => {
            let d = RunData::load(cfg)?;
            Ok((d.probe_train, d.probe_test))
        }
    }
}

fn config_of(ckpt: &Checkpoint) -> Result<RunConfig, Failure> {
    RunConfig::parse(&ckpt.config_text, Profile::Desk)
        .map_err(|e| Failure::new(CONFIG, format!("checkpoint config: {e}")))
}

fn eval_cmd(checkpoint: Option<&Path>, run: Option<&Path>, dir: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(run) = run {
        let first = train::list_checkpoints(run)?
            .into_iter()
            .next()
            .ok_or_else(|| Failure::new(IO, format!("{}: no checkpoints", run.display())))?;
        let cfg = config_of(&Checkpoint::load(&first)?)?;
        let (tr, te) = probe_data(&cfg, dir)?;
        let points = eval::accuracy_curve(run, &tr, &te, &cfg.eval)?;
        for p in &points {
            println!("step {:>8}  top1 {:.4}", p.step, p.accuracy);
        }
        println!("wrote {}", run.join("accuracy_curve.csv").display());
        return Ok(());
    }
    let path = checkpoint.expect("clap requires --checkpoint or --run");
    let ckpt = Checkpoint::load(path)?;
    let cfg = config_of(&ckpt)?;
    let (tr, te) = probe_data(&cfg, dir)?;
    let report = eval::linear_eval(&ckpt, &tr, &te, &cfg.eval, Some(path))?;
    let json = report.to_json();
    match out {
        Some(out) => {
            write_file(out, &(json + "\n"))?;
            println!("top1 {:.4}; report written to {}", report.top1, out.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn similarity(checkpoint: &Path, images: &Path, out: &Path, theta_p: Option<f64>, theta_n: Option<f64>) -> Result<(), Failure> {
    let list = read_text(images, DATA)?;
    let base = images.parent().unwrap_or(Path::new("."));
    let entries = eval::parse_image_list(&list, base)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = config_of(&ckpt)?;
    let (tp, tn) = (theta_p.unwrap_or(cfg.loss.theta_p), theta_n.unwrap_or(cfg.loss.theta_n));
    if tn >= tp {
        return Err(Failure::new(CONFIG, format!("theta_n ({tn}) must be below theta_p ({tp})")));
    }
    let m = eval::similarity_report(&ckpt, &entries, tp, tn, out)?;
    println!(
        "{} images, {} pseudo-positive and {} pseudo-negative pairs",
        m.n,
        m.positive_pairs(),
        m.negative_pairs()
    );
    println!("wrote {} and {}", out.join("similarity.csv").display(), out.join("similarity.svg").display());
    Ok(())
}

fn gradcheck(tol: f64, shapes: usize, seed: u64, only: Option<&str>) -> Result<(), Failure> {
    if !(tol > 0.0) || shapes == 0 {
        return Err(Failure::new(CONFIG, "--tol must be positive and --shapes at least 1"));
    }
    let opts = GradCheckOptions {
        tolerance: tol,
        ..GradCheckOptions::default()
    };
    let outcomes = checks::gradient_suite(seed, shapes, &opts, |n| only.is_none_or(|o| n.contains(o)));
    if outcomes.is_empty() {
        return Err(Failure::new(CONFIG, format!("no case matches `{}`", only.unwrap_or(""))));
    }
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<22} shapes {:>3}  max rel err {:.2e}  skipped {}",
            o.name, o.instances, o.max_rel_error, o.excluded
        );
        if let Some(e) = &o.error {
            println!("     error: {e}");
        }
        failed += usize::from(!o.passed());
    }
    println!("{} of {} cases passed (tolerance {tol:e})", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(Failure::new(GRADCHECK, format!("{failed} gradient check case(s) failed")));
    }
    Ok(())
}

fn synth_data(spec: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let splits = match spec {
        Some(p) => SyntheticSplits::parse(&read_text(p, CONFIG)?)
            .map_err(|e| Failure::new(CONFIG, format!("{}:\n  {}", p.display(), e.join("\n  "))))?,
        None => SyntheticSplits::new(0, 4, 500, 200, 32),
    };
    for f in splits.write(out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(path)?;
    println!("format version: {VERSION}");
    println!("config digest: {}", hex(&ckpt.digest));
    println!("step: {}", ckpt.step);
    println!("epoch: {}", ckpt.epoch);
    println!("tau: {}  lr: {}  momentum: {}", ckpt.tau, ckpt.lr, ckpt.momentum);
    println!();
    println!("{:<40} {:>18} {:>10}", "online parameter", "shape", "count");
    for p in &ckpt.online_params {
        println!("{:<40} {:>18} {:>10}", p.name, format!("{:?}", p.value.shape()), p.value.len());
    }
    let count = |v: &[byol_core::nn::NamedTensor]| v.iter().map(|t| t.value.len()).sum::<usize>();
    println!();
    println!("online parameters: {}", ckpt.num_params());
    println!("target parameters: {}", count(&ckpt.target_params));
    println!("online buffers: {}", count(&ckpt.online_buffers));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            profile,
            resume,
            deterministic,
            dry_run,
        } => train(&config, &profile, resume.as_deref(), deterministic, dry_run),
        Command::Eval { checkpoint, run, data, out } => eval_cmd(checkpoint.as_deref(), run.as_deref(), data.as_deref(), out.as_deref()),
        Command::Similarity {
            checkpoint,
            images,
            out,
            theta_p,
            theta_n,
        } => similarity(&checkpoint, &images, &out, theta_p, theta_n),
        Command::Gradcheck { tol, shapes, seed, only } => gradcheck(tol, shapes, seed, only.as_deref()),
        Command::SynthData { spec, out } => synth_data(spec.as_deref(), &out),
        Command::InspectCheckpoint { checkpoint } => inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
