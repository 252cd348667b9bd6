//! The `cmixer` command line: synthetic data, split construction,
//! pre-training, fine-tuning, evaluation, noise statistics and the gradient
//! check, each producing a manifest that reproduces the run.

pub mod commands;
pub mod settings;

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cmixer::Error;
use settings::{sha256_file, Manifest, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Name of the lockfile that keeps two runs out of one output directory.
pub const LOCK_FILE: &str = ".cmixer.lock";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "cmixer", version, about = "Complex-valued MLP-Mixer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every run.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value settings file (a previous manifest works too)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// dataset NPZ
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// ablation toggle: no-ssl, no-rm, no-il, p-real-only or p-imag-only
    #[arg(long = "toggle", value_name = "NAME")]
    pub toggles: Vec<String>,
    /// override any setting
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// model checkpoint to start from or evaluate
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic blob dataset
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Self-supervised pre-training
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised fine-tuning
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        /// train, val or test
        #[arg(long)]
        split: Option<String>,
    },
    /// Derive semi- or weakly-supervised splits
    Splits {
        #[command(flatten)]
        common: Common,
        /// fraction of training samples that keep their labels
        #[arg(long, value_name = "F")]
        semi_frac: Option<f64>,
        /// fraction of labeled samples given a wrong label
        #[arg(long, value_name = "F")]
        corrupt_rate: Option<f64>,
        /// weak supervision at the default corruption rate
        #[arg(long)]
        weak: bool,
    },
    /// Check every backward rule against finite differences
    Gradcheck {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "OP", hide = true)]
        inject_fault: Option<String>,
    },
    /// Per-image incentive noise statistics
    NoiseStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
    },
}

/// Why a run failed.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// a check ran and did not pass
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Check(_) => EXIT_CHECK,
            Failure::Core(Error::Config { .. }) => EXIT_CONFIG,
            Failure::Core(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Check(msg) => write!(f, "{msg}"),
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gradcheck { out, inject_fault } => {
            commands::gradcheck(out.as_deref(), inject_fault.as_deref())
        }
        Command::Synth {
            common,
            classes,
            per_class,
            side,
        } => with_run(
            "synth",
            &common,
            |s| {
                set_opt(s, "synth.classes", classes)?;
                set_opt(s, "synth.per_class", per_class)?;
                set_opt(s, "synth.side", side)
            },
            commands::synth,
        ),
        Command::Pretrain { common } => {
            with_run("pretrain", &common, |_| Ok(()), commands::pretrain)
        }
        Command::Finetune { common } => {
            with_run("finetune", &common, |_| Ok(()), commands::finetune)
        }
        Command::Eval { common, split } => with_run(
            "eval",
            &common,
            |s| set_opt(s, "eval.split", split),
            commands::eval,
        ),
        Command::Splits {
            common,
            semi_frac,
            corrupt_rate,
            weak,
        } => with_run(
            "splits",
            &common,
            |s| {
                set_opt(s, "splits.semi_frac", semi_frac)?;
                if weak && corrupt_rate.is_none() {
                    s.set(
                        "splits.corrupt_rate",
                        &commands::DEFAULT_CORRUPT_RATE.to_string(),
                    )?;
                }
                set_opt(s, "splits.corrupt_rate", corrupt_rate)
            },
            commands::splits,
        ),
        Command::NoiseStats { common, samples } => with_run(
            "noise-stats",
            &common,
            |s| set_opt(s, "noise.samples", samples),
            commands::noise_stats,
        ),
    }
}

fn set_opt<T: ToString>(s: &mut Settings, key: &str, v: Option<T>) -> cmixer::Result<()> {
    match v {
        Some(v) => s.set(key, &v.to_string()),
        None => Ok(()),
    }
}

/// Resolves settings (defaults, then `--config`, then flags), takes the
/// output lock, runs `body` and writes the manifest.
fn with_run(
    command: &str,
    common: &Common,
    extra: impl FnOnce(&mut Settings) -> cmixer::Result<()>,
    body: fn(&mut Settings, &Path) -> Result<Vec<String>, Failure>,
) -> Result<(), Failure> {
    let mut s = resolve(common)?;
    extra(&mut s)?;
    let out = common.out.clone().ok_or_else(|| Error::Config {
        key: "--out".into(),
        detail: "required".into(),
    })?;
    fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    let _lock = RunLock::acquire(&out)?;
    let artifacts = body(&mut s, &out)?;
    let checksums = artifacts
        .into_iter()
        .map(|name| Ok((name.clone(), sha256_file(&out.join(&name))?)))
        .collect::<cmixer::Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        config: common.config.as_deref(),
        out: &out,
        toggles: &common.toggles,
        settings: &s,
        checksums,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|source| Error::Io { path, source })?;
    Ok(())
}

pub fn resolve(common: &Common) -> cmixer::Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.load_file(path)?;
    }
    for pair in &common.sets {
        s.set_pair(pair)?;
    }
    if let Some(p) = &common.data {
        s.set("data.path", &p.display().to_string())?;
    }
    if let Some(seed) = common.seed {
        s.set("train.seed", &seed.to_string())?;
    }
    if let Some(p) = &common.checkpoint {
        s.set("run.checkpoint", &p.display().to_string())?;
    }
    for t in &common.toggles {
        s.apply_toggle(t)?;
    }
    Ok(s)
}

/// Exclusive claim on an output directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> cmixer::Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(source) => Err(Error::Io {
                path: path.clone(),
                source: std::io::Error::new(
                    source.kind(),
                    format!("{source}; another run owns this directory (delete the lockfile if it is stale)"),
                ),
            }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}
