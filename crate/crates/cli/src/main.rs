//! `d2h`: every pipeline stage as a subcommand sharing one config file.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};
use d2hnet::config::{schema_help, RunConfig};

static AFTER_HELP: LazyLock<String> = LazyLock::new(schema_help);

#[derive(Parser, Debug)]
#[command(name = "d2h", version, about = "Dual-exposure night image restoration", after_help = AFTER_HELP.as_str())]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// Run config (`[section]` headers with `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "D2H_THREADS")]
    pub threads: Option<usize>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(short = 'D', long = "define", global = true, value_name = "SECTION.KEY=VALUE")]
    pub define: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build exposure tuples from frame directories or procedural footage.
    Synth(commands::SynthArgs),
    /// Write blur variance maps of every manifest tuple.
    Varmap(commands::ManifestArgs),
    /// Append blurry crops to a manifest.
    Select(commands::ManifestArgs),
    /// Write augmented training samples for inspection.
    AugmentPreview(commands::PreviewArgs),
    /// Measure simulated noise variance and optionally noise an image.
    NoiseSim(commands::NoiseArgs),
    /// Train the deblurring stage.
    TrainDeblur(commands::ManifestArgs),
    /// Train the enhancement stage on top of a deblur checkpoint.
    TrainEnhance(commands::EnhanceArgs),
    /// Restore one long/short pair.
    Infer(commands::InferArgs),
    /// Score checkpoints on a validation manifest.
    Eval(commands::EvalArgs),
    /// Retrain and score each ablation setting.
    Ablate(commands::AblateArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck,
    /// Invariant suite: deformable degeneracy, Haar round trip, gradient checks.
    Selftest,
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Invariant(String),
}

impl From<d2hnet::Error> for Failure {
    fn from(e: d2hnet::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Invariant(e.to_string())
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

impl Global {
    /// The config file with `--define` and `--seed` applied.
    pub fn load_config(&self) -> CliResult<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Failure::Input("--config is required for this command".into()))?;
        let mut cfg = RunConfig::load(path)?;
        for d in &self.define {
            let (key, value) = d
                .split_once('=')
                .ok_or_else(|| Failure::Input(format!("--define {d:?} is not section.key=value")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let detail: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error: {}", detail.join(" ").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitCode::from(1)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
