use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{ReportWindow, SdrKind};
use crate::optim::AdamConfig;
use crate::prior::toy::{CorpusSpec, ToyTrainingConfig};
use crate::render::{FmInit, ImpactInit};
use crate::sds::SdsConfig;
use crate::separation::OptimizeSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SynthFm,
    SynthImpact,
    Separate,
    Eval,
    TrainToyPrior,
    Ablate,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::SynthFm => "synth-fm",
            Task::SynthImpact => "synth-impact",
            Task::Separate => "separate",
            Task::Eval => "eval",
            Task::TrainToyPrior => "train-toy-prior",
            Task::Ablate => "ablate",
        }
    }

    pub const ALL: [Task; 6] = [
        Task::SynthFm,
        Task::SynthImpact,
        Task::Separate,
        Task::Eval,
        Task::TrainToyPrior,
        Task::Ablate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Bridge,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    /// Single- versus multi-step denoising on the toy separation fixture.
    Multistep,
    /// l2 versus spectrogram residual on the impact fit fixture.
    Spectrogram,
    /// Encoder- versus decoder-space updates on an FM render.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmTask {
    pub duration: f64,
    pub init: FmInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactTask {
    pub duration: f64,
    pub init: ImpactInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationTask {
    /// Problem spec file; alternatively `fixture`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<PathBuf>,
    /// Index of a built-in toy mixture with known sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<usize>,
    pub gamma: f64,
    pub init_noise: f64,
    /// Ground-truth sources for the report, in source order.
    #[serde(default)]
    pub references: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<PathBuf>,
    #[serde(default)]
    pub estimates: Vec<PathBuf>,
    #[serde(default)]
    pub references: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportTask {
    pub sdr_kind: SdrKind,
    pub windows: Vec<ReportWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub corpus: CorpusSpec,
    pub training: ToyTrainingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationTask {
    pub arm: AblationArm,
    /// Denoising step counts compared by the multistep arm.
    pub denoise_steps: [usize; 2],
    pub fixture: usize,
    /// Optimizer of the impact-fit arms.
    pub impact_optimizer: OptimizeSettings,
}

/// Everything a run needs. Built from task defaults, then a config file,
/// then command-line flags; the resolved value is saved with the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge_addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_prior: Option<PathBuf>,
    /// Sample rate of the oracle backend, which has no model of its own.
    pub oracle_sample_rate: u32,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub sds: SdsConfig,
    pub optimizer: OptimizeSettings,
    pub fm: FmTask,
    pub impact: ImpactTask,
    pub separation: SeparationTask,
    pub eval: EvalTask,
    pub report: ReportTask,
    pub toy: ToyTask,
    pub ablation: AblationTask,
}

fn opt(steps: usize, lr: f64, checkpoint_every: usize) -> OptimizeSettings {
    OptimizeSettings {
        steps,
        adam: AdamConfig::with_lr(lr),
        checkpoint_every,
    }
}

impl RunConfig {
    /// Built-in defaults of `task`.
    pub fn defaults(task: Task) -> Self {
        let (sds, optimizer) = match task {
            Task::SynthFm | Task::Eval | Task::TrainToyPrior => (SdsConfig::fm(), opt(1000, 1e-2, 100)),
            Task::SynthImpact => (SdsConfig::impact(), opt(1000, 1e-2, 100)),
            Task::Separate => (SdsConfig::separation(), opt(1000, 5e-2, 100)),
            Task::Ablate => {
                let s = crate::fixtures::toy_separation_settings();
                (s.sds, s.optimizer)
            }
        };
        Self {
            task,
            seed: 0,
            backend: BackendKind::Toy,
            bridge_addr: None,
            toy_prior: None,
            oracle_sample_rate: 44_100,
            out: PathBuf::from(format!("runs/{}", task.name())),
            prompt: None,
            sds,
            optimizer,
            fm: FmTask {
                duration: 3.0,
                init: FmInit::default(),
            },
            impact: ImpactTask {
                duration: 3.0,
                init: ImpactInit::default(),
            },
            separation: SeparationTask {
                problem: None,
                fixture: None,
                gamma: 0.02,
                init_noise: 0.01,
                references: Vec::new(),
            },
            eval: EvalTask {
                mixture: None,
                estimates: Vec::new(),
                references: Vec::new(),
            },
            report: ReportTask {
                sdr_kind: SdrKind::ScaleInvariant,
                windows: vec![ReportWindow::Full, ReportWindow::FirstHalf],
            },
            toy: ToyTask {
                corpus: CorpusSpec::default(),
                training: ToyTrainingConfig::default(),
            },
            ablation: AblationTask {
                arm: AblationArm::Multistep,
                denoise_steps: [1, 5],
                fixture: 0,
                impact_optimizer: opt(200, 0.05, 0),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(format!("config encode: {e}")))
    }

    /// Overlays a TOML document on the defaults of `task`. Keys missing from
    /// the file keep their defaults; unknown keys are errors.
    pub fn layered(task: Task, file_text: Option<&str>) -> Result<Self> {
        let defaults = Self::defaults(task);
        let Some(text) = file_text else {
            return Ok(defaults);
        };
        let mut base = toml::Table::try_from(&defaults).map_err(|e| Error::Configuration(format!("config encode: {e}")))?;
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Configuration(format!("config file: {e}")))?;
        merge(&mut base, overlay);
        base.insert("task".into(), toml::Value::String(task.name().into()));
        base.try_into().map_err(|e: toml::de::Error| Error::Configuration(format!("config file: {e}")))
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.sds.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.optimizer.adam.validate() {
            problems.push(e.to_string());
        }
        if !(self.separation.gamma >= 0.0 && self.separation.gamma.is_finite()) {
            problems.push(format!("gamma {} must be nonnegative", self.separation.gamma));
        }
        for (name, d) in [("fm", self.fm.duration), ("impact", self.impact.duration)] {
            if !(d > 0.0 && d.is_finite()) {
                problems.push(format!("{name} duration must be positive"));
            }
        }
        if self.ablation.denoise_steps.contains(&0) {
            problems.push("ablation denoising steps must be at least 1".into());
        }
        let needs_prior = matches!(
            (self.task, self.ablation.arm),
            (Task::SynthFm | Task::SynthImpact | Task::Separate, _) | (Task::Ablate, AblationArm::Multistep | AblationArm::Encoder)
        );
        if needs_prior {
            match self.backend {
                BackendKind::Toy if self.toy_prior.is_none() => {
                    problems.push("the toy backend needs --toy-prior PATH".into())
                }
                BackendKind::Bridge if self.bridge_addr.is_none() => {
                    problems.push("the bridge backend needs --bridge-addr or AUDIOSDS_BRIDGE_ADDR".into())
                }
                _ => {}
            }
            if let (BackendKind::Toy, Some(p)) = (self.backend, &self.toy_prior) {
                if !p.exists() {
                    problems.push(format!("toy prior {} does not exist", p.display()));
                }
            }
        }
        match self.task {
            Task::Separate => {
                match (&self.separation.problem, self.separation.fixture) {
                    (None, None) => problems.push("separate needs --problem PATH or --fixture N".into()),
                    (Some(_), Some(_)) => problems.push("give either --problem or --fixture, not both".into()),
                    (Some(p), None) if !p.exists() => problems.push(format!("problem spec {} does not exist", p.display())),
                    _ => {}
                }
                missing_files(&self.separation.references, &mut problems);
            }
            Task::Eval => {
                match &self.eval.mixture {
                    None => problems.push("eval needs --mixture PATH".into()),
                    Some(p) if !p.exists() => problems.push(format!("mixture {} does not exist", p.display())),
                    _ => {}
                }
                if self.eval.estimates.is_empty() {
                    problems.push("eval needs at least one --estimate PATH".into());
                }
                missing_files(&self.eval.estimates, &mut problems);
                missing_files(&self.eval.references, &mut problems);
                if !self.eval.references.is_empty() && self.eval.references.len() != self.eval.estimates.len() {
                    problems.push("eval needs one reference per estimate".into());
                }
            }
            Task::TrainToyPrior => {
                if let Err(e) = self.toy.corpus.validate() {
                    problems.push(e.to_string());
                }
                if let Err(e) = self.toy.training.validate() {
                    problems.push(e.to_string());
                }
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Configuration(problems.join("; ")))
        }
    }
}

fn missing_files(paths: &[PathBuf], problems: &mut Vec<String>) {
    for p in paths {
        if !p.exists() {
            problems.push(format!("{} does not exist", p.display()));
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of the defaults of `task`.
pub fn defaults_hash(task: Task) -> String {
    let json = serde_json::to_vec(&RunConfig::defaults(task)).expect("config serializes");
    Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves `p` against `base` when relative.
pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
