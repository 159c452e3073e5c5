//! The `audiosds` command line: layered configuration, task dispatch and
//! exit codes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 backend error, 4
//! numeric abort (partial artifacts are kept), 1 anything else.

mod artifacts;
mod config;
mod tasks;

pub use artifacts::Artifacts;
pub use config::{
    defaults_hash, AblationArm, AblationTask, BackendKind, EvalTask, FmTask, ImpactTask, ReportTask, RunConfig,
    SeparationTask, Task, ToyTask,
};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::error::{Error, Result};
use crate::metrics::SdrKind;
use crate::sds::{UpdateVariant, WeightMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const ENV_BRIDGE_ADDR: &str = "AUDIOSDS_BRIDGE_ADDR";
pub const ENV_CAPTION_URL: &str = "AUDIOSDS_CAPTION_URL";
pub const ENV_LLM_URL: &str = "AUDIOSDS_LLM_URL";
pub const ENV_CLAP_URL: &str = "AUDIOSDS_CLAP_URL";

#[derive(Debug, Parser)]
#[command(name = "audiosds", version, about = "Score distillation for parametric audio")]
pub struct Cli {
    /// Task to run.
    #[arg(value_enum)]
    pub task: Task,
    /// TOML file layered over the task defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// HOST:PORT of the prior bridge; falls back to AUDIOSDS_BRIDGE_ADDR.
    #[arg(long)]
    pub bridge_addr: Option<String>,
    /// Toy prior checkpoint (JSON) for the toy backend.
    #[arg(long)]
    pub toy_prior: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// CFG scale s = 1 + tau.
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    /// SDS weight of the separation update.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub denoise_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub weight_mode: Option<WeightArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Clip length in seconds for the synthesis tasks.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Number of modes of the impact model.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Separation problem spec file.
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// Built-in toy separation mixture.
    #[arg(long)]
    pub fixture: Option<usize>,
    #[arg(long = "reference")]
    pub references: Vec<PathBuf>,
    #[arg(long)]
    pub mixture: Option<PathBuf>,
    #[arg(long = "estimate")]
    pub estimates: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub sdr: Option<SdrArg>,
    #[arg(long, value_enum)]
    pub arm: Option<AblationArm>,
    /// Training steps of train-toy-prior.
    #[arg(long)]
    pub train_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum VariantArg {
    Classic,
    Decoder,
    SpecDecoder,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum WeightArg {
    Constant,
    SigmaSquared,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SdrArg {
    Si,
    Plain,
}

impl Cli {
    /// Defaults, then the config file, then flags and environment.
    pub fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::Configuration(format!("config {}: {e}", p.display())))?,
            ),
            None => None,
        };
        let mut c = RunConfig::layered(self.task, text.as_deref())?;
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.backend, self.backend);
        set!(c.out, self.out);
        set!(c.sds.guidance_scale, self.guidance_scale);
        set!(c.sds.t_min, self.t_min);
        set!(c.sds.t_max, self.t_max);
        set!(c.sds.batch_size, self.batch_size);
        set!(c.sds.n_denoise_steps, self.denoise_steps);
        set!(c.separation.gamma, self.gamma);
        set!(c.optimizer.adam.lr, self.lr);
        set!(c.optimizer.steps, self.steps);
        set!(c.optimizer.checkpoint_every, self.checkpoint_every);
        set!(c.ablation.arm, self.arm);
        set!(c.toy.training.steps, self.train_steps);
        if let Some(d) = self.duration {
            c.fm.duration = d;
            c.impact.duration = d;
        }
        set!(c.impact.init.modes, self.modes);
        if let Some(v) = self.variant {
            c.sds.variant = match v {
                VariantArg::Classic => UpdateVariant::Classic,
                VariantArg::Decoder => UpdateVariant::Decoder,
                VariantArg::SpecDecoder => UpdateVariant::SpecDecoder,
            };
        }
        if let Some(w) = self.weight_mode {
            c.sds.weight_mode = match w {
                WeightArg::Constant => WeightMode::Constant,
                WeightArg::SigmaSquared => WeightMode::SigmaSquared,
            };
        }
        if let Some(s) = self.sdr {
            c.report.sdr_kind = match s {
                SdrArg::Si => SdrKind::ScaleInvariant,
                SdrArg::Plain => SdrKind::Plain,
            };
        }
        if self.prompt.is_some() {
            c.prompt = self.prompt.clone();
        }
        if self.toy_prior.is_some() {
            c.toy_prior = self.toy_prior.clone();
        }
        if self.problem.is_some() {
            c.separation.problem = self.problem.clone();
            c.separation.fixture = None;
        }
        if self.fixture.is_some() {
            c.separation.fixture = self.fixture;
            c.separation.problem = None;
            c.ablation.fixture = self.fixture.unwrap_or_default();
        }
        if !self.references.is_empty() {
            c.separation.references = self.references.clone();
            c.eval.references = self.references.clone();
        }
        if self.mixture.is_some() {
            c.eval.mixture = self.mixture.clone();
        }
        if !self.estimates.is_empty() {
            c.eval.estimates = self.estimates.clone();
        }
        c.bridge_addr = self
            .bridge_addr
            .clone()
            .or(c.bridge_addr)
            .or_else(|| std::env::var(ENV_BRIDGE_ADDR).ok().filter(|a| !a.is_empty()));
        absolutize(&mut c);
        Ok(c)
    }
}

/// Makes input paths absolute so the saved snapshot re-runs from anywhere.
fn absolutize(c: &mut RunConfig) {
    let Ok(cwd) = std::env::current_dir() else {
        return;
    };
    let fix = |p: &mut PathBuf| *p = config::resolve(&cwd, p);
    c.toy_prior.iter_mut().for_each(fix);
    c.separation.problem.iter_mut().for_each(fix);
    c.separation.references.iter_mut().for_each(fix);
    c.eval.mixture.iter_mut().for_each(fix);
    c.eval.estimates.iter_mut().for_each(fix);
    c.eval.references.iter_mut().for_each(fix);
}

/// Exit code for an error, looking through batch and source wrappers.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Configuration(_) | Error::Validation(_) | Error::InvalidInput(_) => EXIT_CONFIG,
        Error::Capability(_)
        | Error::Transport(_)
        | Error::Protocol(_)
        | Error::Remote { .. }
        | Error::Client { .. }
        | Error::Parse { .. } => EXIT_BACKEND,
        Error::NumericAbort { .. } | Error::Training { .. } | Error::NumericOverflow { .. } => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

/// Runs a resolved configuration and returns the artifact directory.
pub fn run(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    tasks::run(config)
}

/// Entry point of the binary: parses `args`, runs, reports, returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.resolve().and_then(|c| run(&c)) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
