//! Prompt-guided source separation.
//!
//! Sources `x_k = g_k(theta_k)` must add up to the mixture `m` in multiscale
//! spectral magnitude, while an SDS term conditioned on each source's prompt
//! pulls it toward its class:
//!
//! ```text
//! grad_k = d L_rec / d theta_k + gamma * sds_k,
//! L_rec  = sum_m || S_m(m) - S_m(sum_k x_k) ||^2
//! ```

mod optimize;

pub use optimize::{optimize, Abort, Checkpoint, OptimizeSettings, StepEval, StepLog, Trajectory};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::si_sdr;
use crate::optim::AdamConfig;
use crate::prior::{Conditioning, DiffusionPrior, Latent};
use crate::render::{IdentityRenderer, Renderer};
use crate::sds::{sample_seed, sds_update_with_seeds, SdsConfig, UpdateReport};
use crate::signal::{multiscale_spectrogram, spectral_recon_loss_to, wav_read, SpectrogramConfig, Waveform};

/// One directly optimizable latent per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSourceParams {
    pub channels: usize,
    pub frames: usize,
    pub sources: Vec<Vec<f64>>,
}

impl LatentSourceParams {
    pub fn latents(&self) -> Result<Vec<Latent>> {
        self.sources
            .iter()
            .map(|v| Latent::new(self.channels, self.frames, v.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    #[default]
    Latent,
    Waveform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub conditioning: Conditioning,
    #[serde(default)]
    pub parametrization: Parametrization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationSettings {
    pub gamma: f64,
    pub sds: SdsConfig,
    pub spectrogram: SpectrogramConfig,
    pub optimizer: OptimizeSettings,
    /// Standard deviation of the noise added to the `m / K` initialization.
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for SeparationSettings {
    fn default() -> Self {
        Self {
            gamma: 0.02,
            sds: SdsConfig::separation(),
            spectrogram: SpectrogramConfig::default(),
            optimizer: OptimizeSettings {
                steps: 1000,
                adam: AdamConfig::with_lr(5e-2),
                checkpoint_every: 100,
            },
            init_noise: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeparationProblem {
    pub mixture: Waveform,
    pub sources: Vec<SourceSpec>,
    pub settings: SeparationSettings,
}

/// `g(h) = dec(h)` over a flat latent.
pub struct LatentRenderer<'a, P: DiffusionPrior + ?Sized> {
    pub prior: &'a P,
    pub channels: usize,
    pub frames: usize,
}

impl<P: DiffusionPrior + ?Sized> LatentRenderer<'_, P> {
    fn latent(&self, theta: &[f64]) -> Result<Latent> {
        Latent::new(self.channels, self.frames, theta.to_vec())
    }
}

impl<P: DiffusionPrior + ?Sized> Renderer for LatentRenderer<'_, P> {
    fn num_params(&self) -> usize {
        self.channels * self.frames
    }

    fn render(&self, theta: &[f64]) -> Result<Waveform> {
        self.prior.decode(&self.latent(theta)?)
    }

    fn vjp(&self, theta: &[f64], cotangent: &Waveform) -> Result<Vec<f64>> {
        Ok(self.prior.decode_vjp(&self.latent(theta)?, cotangent)?.values)
    }
}

/// Every source set to `m / K`.
pub fn baseline_assignment(m: &Waveform, k: usize) -> Result<Vec<Waveform>> {
    if k == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    Ok(vec![m.scaled(1.0 / k as f64); k])
}

fn cond_seed(cond: &Conditioning) -> u64 {
    let digest = Sha256::digest(serde_json::to_vec(cond).expect("conditioning serializes"));
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Per-step output of [`separation_update`].
pub struct SeparationStep {
    pub loss: f64,
    pub gradients: Vec<Vec<f64>>,
    pub estimates: Vec<Waveform>,
    pub sds: Vec<Option<UpdateReport>>,
}

impl SeparationProblem {
    pub fn new(mixture: Waveform, sources: Vec<SourceSpec>, settings: SeparationSettings) -> Result<Self> {
        let p = Self {
            mixture,
            sources,
            settings,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.sources.len() < 2 {
            problems.push(format!("separation needs K >= 2 sources, got {}", self.sources.len()));
        }
        let s = &self.settings;
        if !(s.gamma >= 0.0 && s.gamma.is_finite()) {
            problems.push(format!("gamma {} must be nonnegative", s.gamma));
        }
        if !(s.init_noise >= 0.0) {
            problems.push("init noise must be nonnegative".into());
        }
        if let Err(e) = s.sds.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = s.spectrogram.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = s.optimizer.adam.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Configuration(problems.join("; ")))
        }
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    fn latent_shape<P: DiffusionPrior + ?Sized>(&self, prior: &P) -> Result<(usize, usize)> {
        let info = prior.info();
        if info.sample_rate != self.mixture.sample_rate() {
            return Err(Error::invalid(format!(
                "mixture at {} Hz but prior runs at {} Hz",
                self.mixture.sample_rate(),
                info.sample_rate
            )));
        }
        Ok((info.latent_channels, info.frames_for(self.mixture.len())?))
    }

    pub fn renderer<'a, P: DiffusionPrior + ?Sized>(&self, prior: &'a P, k: usize) -> Result<Box<dyn Renderer + 'a>> {
        Ok(match self.sources[k].parametrization {
            Parametrization::Latent => {
                let (channels, frames) = self.latent_shape(prior)?;
                Box::new(LatentRenderer {
                    prior,
                    channels,
                    frames,
                })
            }
            Parametrization::Waveform => Box::new(IdentityRenderer {
                len: self.mixture.len(),
                sample_rate: self.mixture.sample_rate(),
            }),
        })
    }

    /// Sources start at the baseline `m / K` plus small Gaussian noise, in
    /// each source's parameter space.
    pub fn init_sources<P: DiffusionPrior + ?Sized>(&self, prior: &P) -> Result<Vec<Vec<f64>>> {
        let base = self.mixture.scaled(1.0 / self.k() as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed ^ 0x5EB_A2A7E);
        let sd = self.settings.init_noise;
        self.sources
            .iter()
            .map(|s| {
                let mut v = match s.parametrization {
                    Parametrization::Latent => prior.encode(&base)?.values,
                    Parametrization::Waveform => base.as_slice().to_vec(),
                };
                for x in &mut v {
                    *x += sd * rng.sample::<f64, _>(StandardNormal);
                }
                Ok(v)
            })
            .collect()
    }

    fn check_thetas(&self, thetas: &[Vec<f64>]) -> Result<()> {
        if thetas.len() != self.k() {
            return Err(Error::invalid(format!("expected {} sources, got {}", self.k(), thetas.len())));
        }
        Ok(())
    }

    pub fn render_sources<P: DiffusionPrior + ?Sized>(&self, prior: &P, thetas: &[Vec<f64>]) -> Result<Vec<Waveform>> {
        self.check_thetas(thetas)?;
        thetas
            .iter()
            .enumerate()
            .map(|(k, th)| {
                self.renderer(prior, k)?.render(th).map_err(|e| Error::Source {
                    index: k,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// `L_rec` and its gradient for every source.
    pub fn mixture_residual<P: DiffusionPrior + ?Sized>(&self, prior: &P, thetas: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, grads, _) = self.residual_with_estimates(prior, thetas)?;
        Ok((loss, grads))
    }

    fn residual_with_estimates<P: DiffusionPrior + ?Sized>(
        &self,
        prior: &P,
        thetas: &[Vec<f64>],
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<Waveform>)> {
        let estimates = self.render_sources(prior, thetas)?;
        let mut sum = estimates[0].clone();
        for e in &estimates[1..] {
            self.mixture.check_same_shape(e, "source render")?;
            sum.add_assign(e);
        }
        let target = multiscale_spectrogram(&self.mixture, &self.settings.spectrogram)?;
        let (loss, wave_grad) = spectral_recon_loss_to(&target, &sum, &self.settings.spectrogram)?;
        let grads = thetas
            .iter()
            .enumerate()
            .map(|(k, th)| {
                self.renderer(prior, k)?.vjp(th, &wave_grad).map_err(|e| Error::Source {
                    index: k,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((loss, grads, estimates))
    }

    /// Reconstruction gradient plus `gamma` times each source's SDS update.
    /// SDS draws depend on the step and the source's conditioning, so
    /// permuting (source, prompt) pairs permutes the gradients.
    pub fn separation_update<P: DiffusionPrior + ?Sized>(&self, prior: &P, thetas: &[Vec<f64>], step: u64) -> Result<SeparationStep> {
        let (loss, mut gradients, estimates) = self.residual_with_estimates(prior, thetas)?;
        let gamma = self.settings.gamma;
        let mut reports = Vec::with_capacity(self.k());
        for (k, spec) in self.sources.iter().enumerate() {
            if gamma == 0.0 {
                reports.push(None);
                continue;
            }
            let cfg = &self.settings.sds;
            let base = cfg.seed ^ cond_seed(&spec.conditioning);
            let seeds: Vec<u64> = (0..cfg.batch_size as u64).map(|b| sample_seed(base, step, b)).collect();
            let renderer = self.renderer(prior, k)?;
            let rep = sds_update_with_seeds(&thetas[k], renderer.as_ref(), prior, &spec.conditioning, cfg, &seeds).map_err(|e| {
                Error::Source {
                    index: k,
                    source: Box::new(e),
                }
            })?;
            for (g, s) in gradients[k].iter_mut().zip(&rep.gradient) {
                *g += gamma * s;
            }
            reports.push(Some(rep));
        }
        Ok(SeparationStep {
            loss,
            gradients,
            estimates,
            sds: reports,
        })
    }

    fn split(&self, flat: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &n in sizes {
            out.push(flat[off..off + n].to_vec());
            off += n;
        }
        out
    }

    /// Full optimization from the baseline initialization.
    pub fn run<P: DiffusionPrior + ?Sized>(&self, prior: &P) -> Result<SeparationOutcome> {
        self.validate()?;
        let init = self.init_sources(prior)?;
        self.run_from(prior, init)
    }

    pub fn run_from<P: DiffusionPrior + ?Sized>(&self, prior: &P, init: Vec<Vec<f64>>) -> Result<SeparationOutcome> {
        self.check_thetas(&init)?;
        let sizes: Vec<usize> = init.iter().map(Vec::len).collect();
        let flat: Vec<f64> = init.concat();
        let traj = optimize(flat, &self.settings.optimizer, |_| {}, |theta, step| {
            let thetas = self.split(theta, &sizes);
            let upd = self.separation_update(prior, &thetas, step as u64)?;
            let mut recon = upd.estimates[0].clone();
            for e in &upd.estimates[1..] {
                recon.add_assign(e);
            }
            let mixture_sdr = si_sdr(&self.mixture, &recon).ok();
            let sds_residual: Vec<Option<f64>> = upd.sds.iter().map(|r| r.as_ref().map(|r| r.mean_residual)).collect();
            Ok(StepEval {
                gradient: upd.gradients.concat(),
                loss: Some(upd.loss),
                detail: json!({ "mixture_si_sdr_db": mixture_sdr, "sds_mean_residual": sds_residual }),
            })
        })?;
        let thetas = self.split(&traj.theta, &sizes);
        let estimates = self.render_sources(prior, &thetas)?;
        Ok(SeparationOutcome {
            thetas,
            estimates,
            trajectory: traj,
        })
    }
}

pub struct SeparationOutcome {
    pub thetas: Vec<Vec<f64>>,
    pub estimates: Vec<Waveform>,
    pub trajectory: Trajectory,
}

impl SeparationOutcome {
    /// Latent checkpoint when every source is latent-parametrized.
    pub fn latent_params<P: DiffusionPrior + ?Sized>(&self, prior: &P, problem: &SeparationProblem) -> Option<LatentSourceParams> {
        if problem.sources.iter().any(|s| s.parametrization != Parametrization::Latent) {
            return None;
        }
        let (channels, frames) = problem.latent_shape(prior).ok()?;
        Some(LatentSourceParams {
            channels,
            frames,
            sources: self.thetas.clone(),
        })
    }
}

/// Source entry of a problem spec file: a prompt or a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub parametrization: Option<Parametrization>,
}

/// Structured-text problem description.
///
/// ```toml
/// mixture = "mix.wav"
/// gamma = 0.02                 # optional
/// parametrization = "latent"   # optional default for all sources
/// [[sources]]
/// prompt = "low rumble"
/// [[sources]]
/// class = 1
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpecFile {
    pub mixture: PathBuf,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub parametrization: Option<Parametrization>,
    #[serde(default)]
    pub t_min: Option<f64>,
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default)]
    pub guidance_scale: Option<f64>,
    #[serde(default)]
    pub n_denoise_steps: Option<usize>,
    pub sources: Vec<SourceEntry>,
}

impl ProblemSpecFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(format!("problem spec: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("problem spec {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the file's overrides on top of `settings`; relative mixture
    /// paths resolve against `base_dir`.
    pub fn into_problem(self, mut settings: SeparationSettings, base_dir: &Path) -> Result<SeparationProblem> {
        let default_param = self.parametrization.unwrap_or_default();
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let conditioning = match (&s.prompt, s.class) {
                    (Some(p), None) => Conditioning::Prompt(p.clone()),
                    (None, Some(c)) => Conditioning::Class(c),
                    _ => {
                        return Err(Error::Configuration(format!(
                            "source {i} needs exactly one of `prompt` or `class`"
                        )))
                    }
                };
                Ok(SourceSpec {
                    conditioning,
                    parametrization: s.parametrization.unwrap_or(default_param),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(g) = self.gamma {
            settings.gamma = g;
        }
        if let Some(v) = self.t_min {
            settings.sds.t_min = v;
        }
        if let Some(v) = self.t_max {
            settings.sds.t_max = v;
        }
        if let Some(v) = self.guidance_scale {
            settings.sds.guidance_scale = v;
        }
        if let Some(v) = self.n_denoise_steps {
            settings.sds.n_denoise_steps = v;
        }
        let path = if self.mixture.is_absolute() {
            self.mixture.clone()
        } else {
            base_dir.join(&self.mixture)
        };
        if !path.exists() {
            return Err(Error::Configuration(format!("mixture {} does not exist", path.display())));
        }
        let mixture = wav_read(&path)?;
        SeparationProblem::new(mixture, sources, settings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::OracleBackend;

    fn mixture(len: usize) -> Waveform {
        let m: Vec<f64> = (0..len).map(|i| (i as f64 * 0.3).sin() * 0.2 + (i as f64 * 1.7).sin() * 0.1).collect();
        Waveform::from_mono(&m, 1000).unwrap()
    }

    fn settings() -> SeparationSettings {
        SeparationSettings {
            spectrogram: SpectrogramConfig::new(vec![16, 32]).unwrap(),
            sds: SdsConfig {
                spectrogram: SpectrogramConfig::new(vec![16, 32]).unwrap(),
                batch_size: 2,
                ..SdsConfig::separation()
            },
            ..SeparationSettings::default()
        }
    }

    fn problem(len: usize) -> SeparationProblem {
        SeparationProblem::new(
            mixture(len),
            vec![
                SourceSpec {
                    conditioning: Conditioning::Class(0),
                    parametrization: Parametrization::Latent,
                },
                SourceSpec {
                    conditioning: Conditioning::Class(1),
                    parametrization: Parametrization::Latent,
                },
            ],
            settings(),
        )
        .unwrap()
    }

    #[test]
    fn exact_sources_have_zero_residual() {
        let p = problem(64);
        let oracle = OracleBackend::tracking(1000);
        let a = p.mixture.scaled(0.3);
        let b = p.mixture.scaled(0.7);
        let (loss, grads) = p
            .mixture_residual(&oracle, &[a.as_slice().to_vec(), b.as_slice().to_vec()])
            .unwrap();
        assert!(loss < 1e-20);
        assert!(grads.iter().flatten().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn oracle_sds_term_vanishes() {
        let p = problem(64);
        let oracle = OracleBackend::tracking(1000);
        let thetas = p.init_sources(&oracle).unwrap();
        let (_, rec) = p.mixture_residual(&oracle, &thetas).unwrap();
        let upd = p.separation_update(&oracle, &thetas, 3).unwrap();
        for (a, b) in rec.iter().flatten().zip(upd.gradients.iter().flatten()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn validation_rejects_single_source() {
        let err = SeparationProblem::new(
            mixture(32),
            vec![SourceSpec {
                conditioning: Conditioning::Null,
                parametrization: Parametrization::Latent,
            }],
            settings(),
        );
        assert!(matches!(err, Err(Error::Configuration(_))));
    }

    #[test]
    fn baseline_sums_to_mixture() {
        let m = mixture(32);
        let b = baseline_assignment(&m, 2).unwrap();
        assert_eq!(b[0].add(&b[1]), m);
    }

    #[test]
    fn spec_file_requires_prompt_or_class() {
        let spec = ProblemSpecFile::parse(
            "mixture = \"missing.wav\"\n[[sources]]\nprompt = \"a\"\nclass = 1\n[[sources]]\nclass = 0\n",
        )
        .unwrap();
        assert!(matches!(
            spec.into_problem(SeparationSettings::default(), Path::new("/")),
            Err(Error::Configuration(_))
        ));
    }
}
