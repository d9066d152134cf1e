//! Command-line surface: `fuse`, `train`, `mask`, `eval`, `ablate`, `synth`, `config`.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.

pub mod pipeline;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use textfuse::io::{self, RunConfig};
use textfuse::metrics::{self, MetricRecord};
use textfuse::model::{FusionModel, ModelError, Variant};
use textfuse::sig::{self, SigError};
use textfuse::train::{TrainError, Trainer};

use pipeline::PreparedPair;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(io::IoError, SigError, ModelError, TrainError, metrics::MetricError);

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(name = "textfuse", version, about = "Text-guided infrared/visible image fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse every pair of a dataset into <out>/<id>.png.
    Fuse {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root with vis/ and ir/.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained weights; without it the seeded initialization is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train and write <out>/checkpoint.ckpt and <out>/history.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write <out>/masks/<id>.msk, <out>/masks/<id>.png and <out>/captions.tsv.
    Mask {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fused images against their sources; writes <out>/report.csv and <out>/report.txt.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory of fused images named by pair id.
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print VIF against each source as extra columns.
        #[arg(long)]
        per_source: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train, fuse and score full, no-mgca, no-tivr and no-gaf; writes <out>/ablation.{csv,txt}.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write a synthetic dataset (vis/, ir/, captions/, regions.txt).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        pairs: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print every configuration key with its default.
    Config,
}

/// Parse arguments and run; returns the process exit status.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) if !p.is_file() => Err(CliError::Usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            io::IoError::Fs { .. } => CliError::Runtime(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }),
        None => Ok(RunConfig::default()),
    }
}

/// Outputs may not live inside an input directory.
fn guard_output(inputs: &[&Path], out: &Path) -> Result<(), CliError> {
    let out_abs = std::path::absolute(out).map_err(fs_err(out))?;
    let out_abs = fs::canonicalize(&out_abs).unwrap_or(out_abs);
    for input in inputs {
        let Ok(in_abs) = fs::canonicalize(input) else {
            return Err(CliError::Usage(format!("input {} does not exist", input.display())));
        };
        if out_abs.starts_with(&in_abs) {
            return Err(CliError::Usage(format!(
                "output {} is inside input {}; inputs are never modified",
                out.display(),
                input.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(fs_err(out))
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fuse { config, input, out, checkpoint, jobs } => {
            let cfg = load_config(config.as_deref())?;
            guard_output(&[&input], &out)?;
            let (_, prepared) = pipeline::load_prepared(&input, &cfg)?;
            let model = match &checkpoint {
                Some(p) => FusionModel::load(p)?.0,
                None => FusionModel::new(cfg.train.model.clone(), cfg.train.variant)?,
            };
            let failed = fuse_all(&model, &prepared, &out, jobs.unwrap_or(cfg.jobs))?;
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} pair(s) failed to fuse")));
            }
            Ok(())
        }
        Command::Train { config, input, out, resume } => {
            let cfg = load_config(config.as_deref())?;
            guard_output(&[&input], &out)?;
            let (_, prepared) = pipeline::load_prepared(&input, &cfg)?;
            train(&cfg, &prepared, &out, resume.as_deref())?;
            Ok(())
        }
        Command::Mask { config, input, out } => {
            let cfg = load_config(config.as_deref())?;
            guard_output(&[&input], &out)?;
            let (_, prepared) = pipeline::load_prepared(&input, &cfg)?;
            let dir = out.join("masks");
            fs::create_dir_all(&dir).map_err(fs_err(&dir))?;
            for p in &prepared {
                sig::write_mask(&dir.join(format!("{}.msk", p.pair.id)), &p.semantics.mask.mask)?;
                io::save_mask_preview(&p.semantics.mask.mask, &dir.join(format!("{}.png", p.pair.id)))?;
            }
            sig::write_captions(&out.join("captions.tsv"), &pipeline::caption_entries(&prepared))?;
            Ok(())
        }
        Command::Eval { config, input, fused, out, per_source, jobs } => {
            let cfg = load_config(config.as_deref())?;
            guard_output(&[&input, &fused], &out)?;
            let report = io::evaluate_dataset(&fused, &input.join("vis"), &input.join("ir"), jobs.unwrap_or(cfg.jobs))?;
            write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
            write_file(&out.join("report.txt"), report.to_text().as_bytes())?;
            let rows: Vec<_> = report.records.iter().chain([&report.mean]).map(|r| (r.id.clone(), r.clone())).collect();
            print!("{}", metrics::table(&rows, "id", per_source));
            for s in &report.skipped {
                eprintln!("warning: skipped {s}");
            }
            if report.records.is_empty() {
                return Err(CliError::Runtime("no pair could be evaluated".into()));
            }
            Ok(())
        }
        Command::Ablate { config, input, out, jobs } => {
            let cfg = load_config(config.as_deref())?;
            guard_output(&[&input], &out)?;
            let (_, prepared) = pipeline::load_prepared(&input, &cfg)?;
            let rows = ablate(&cfg, &prepared, &input, &out, jobs.unwrap_or(cfg.jobs))?;
            print!("{}", metrics::table(&rows, "variant", false));
            Ok(())
        }
        Command::Synth { out, pairs, size, seed } => {
            if pairs == 0 || size < 16 {
                return Err(CliError::Usage("synth needs --pairs >= 1 and --size >= 16".into()));
            }
            io::write_synth_dataset(&out, pairs, size, seed)?;
            Ok(())
        }
        Command::Config => {
            print!("{}", RunConfig::reference());
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(fs_err(path))
}

/// Fuse every pair into `<out>/<id>.png`; returns the number of failures.
pub fn fuse_all(model: &FusionModel, prepared: &[PreparedPair], out: &Path, jobs: usize) -> Result<usize, CliError> {
    let pairs: Vec<_> = prepared.iter().map(|p| p.pair.clone()).collect();
    let sem: HashMap<_, _> = prepared.iter().map(|p| (p.pair.id.clone(), p.model_semantics())).collect();
    let mut failed = 0;
    for outcome in model.fuse_batch(&pairs, &sem, jobs) {
        match outcome.result {
            Ok(img) => io::save_image(&img, &out.join(format!("{}.png", outcome.id)))?,
            Err(e) => {
                eprintln!("error: {}: {e}", outcome.id);
                failed += 1;
            }
        }
    }
    Ok(failed)
}

/// Train into `<out>`; a fresh run replaces any earlier history there.
pub fn train(cfg: &RunConfig, prepared: &[PreparedPair], out: &Path, resume: Option<&Path>) -> Result<Trainer, CliError> {
    let history = out.join(HISTORY_FILE);
    let mut trainer = match resume {
        Some(p) => {
            let (_, ckpt) = FusionModel::load(p)?;
            Trainer::resume(cfg.train.clone(), &ckpt)?
        }
        None => {
            if history.exists() {
                fs::remove_file(&history).map_err(fs_err(&history))?;
            }
            Trainer::new(cfg.train.clone())?
        }
    };
    trainer.log_history_to(&history)?;
    trainer.checkpoint_to(&out.join(CHECKPOINT_FILE));
    let data = pipeline::train_samples(prepared);
    let total = cfg.train.total_steps(data.len());
    trainer.run(&data, |r, _| eprintln!("step {}/{total}  loss {:.6}", r.step, r.terms.total))?;
    Ok(trainer)
}

/// Train, fuse and score each variant under `<out>/<variant>/`; returns the mean row per variant.
pub fn ablate(
    cfg: &RunConfig,
    prepared: &[PreparedPair],
    input: &Path,
    out: &Path,
    jobs: usize,
) -> Result<Vec<(String, MetricRecord)>, CliError> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let dir = out.join(variant.name());
        let fused = dir.join("fused");
        fs::create_dir_all(&fused).map_err(fs_err(&fused))?;
        let mut vcfg = cfg.clone();
        vcfg.train.variant = variant;
        eprintln!("ablate: training {variant}");
        let trainer = train(&vcfg, prepared, &dir, None)?;
        let failed = fuse_all(&trainer.model, prepared, &fused, jobs)?;
        if failed > 0 {
            return Err(CliError::Runtime(format!("{variant}: {failed} pair(s) failed to fuse")));
        }
        let report = io::evaluate_dataset(&fused, &input.join("vis"), &input.join("ir"), jobs)?;
        write_file(&dir.join("report.csv"), report.to_csv().as_bytes())?;
        rows.push((variant.name().to_string(), report.mean));
    }
    let mut csv = String::new();
    for c in metrics::conventions() {
        csv.push_str(&format!("# {c}\n"));
    }
    csv.push_str("variant,EN,SD,SCD,VIF,Qabf\n");
    for (name, r) in &rows {
        csv.push_str(&format!("{name},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.en, r.sd, r.scd, r.vif, r.qabf));
    }
    write_file(&out.join("ablation.csv"), csv.as_bytes())?;
    write_file(&out.join("ablation.txt"), metrics::table(&rows, "variant", false).as_bytes())?;
    Ok(rows)
}
