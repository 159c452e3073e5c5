//! Matched-seed ablation arms. Each ablation runs its arms one after another
//! with identical seeds and reports a final objective per arm (lower is
//! better).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fixtures::{ImpactFitFixture, SeparationFixture};
use crate::metrics::si_sdr;
use crate::prior::{Conditioning, DiffusionPrior, OracleBackend};
use crate::render::Renderer;
use crate::sds::{batch_seeds, sds_update, sds_update_with_seeds, SdsConfig, UpdateVariant};
use crate::separation::{optimize, OptimizeSettings, SeparationProblem, SeparationSettings, StepEval, Trajectory};
use crate::signal::{multiscale_spectrogram, SpectrogramConfig, Waveform};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub final_objective: f64,
    /// Additional end-of-run numbers, e.g. per-source SI-SDR.
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
    #[serde(skip)]
    pub renders: Vec<Waveform>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: String,
    pub objective: String,
    pub arms: Vec<ArmResult>,
}

#[derive(Serialize)]
struct Row<'a> {
    ablation: &'a str,
    arm: &'a str,
    metric: &'a str,
    value: f64,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// One row per (arm, metric); the objective comes first for each arm.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for a in &self.arms {
            let rows = std::iter::once((self.objective.as_str(), a.final_objective))
                .chain(a.metrics.iter().map(|(k, v)| (k.as_str(), *v)));
            for (metric, value) in rows {
                w.serialize(Row {
                    ablation: &self.ablation,
                    arm: &a.arm,
                    metric,
                    value,
                })
                .map_err(crate::signal::csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn abort_error(t: &Trajectory) -> Result<()> {
    match &t.aborted {
        Some(a) => Err(Error::NumericAbort {
            step: a.step,
            message: a.message.clone(),
        }),
        None => Ok(()),
    }
}

/// Sum over scales of `||S_m(x) - S_m(y)||^2`.
pub fn spectral_distance(x: &Waveform, y: &Waveform, cfg: &SpectrogramConfig) -> Result<f64> {
    let a = multiscale_spectrogram(x, cfg)?;
    let b = multiscale_spectrogram(y, cfg)?;
    Ok(a.sub(&b).squared_norm())
}

/// Separation with `steps.0` versus `steps.1` denoising steps inside the
/// SDS term. Objective: negative mean per-source SI-SDR.
pub fn multistep_ablation<P: DiffusionPrior + ?Sized>(
    prior: &P,
    fixture: &SeparationFixture,
    settings: &SeparationSettings,
    steps: (usize, usize),
) -> Result<AblationReport> {
    let mut arms = Vec::new();
    for n in [steps.0, steps.1] {
        let mut s = settings.clone();
        s.sds.n_denoise_steps = n;
        let problem = SeparationProblem::new(fixture.mixture.clone(), fixture.sources.clone(), s)?;
        let out = problem.run(prior)?;
        abort_error(&out.trajectory)?;
        let mut metrics = BTreeMap::new();
        let mut total = 0.0;
        for (k, (r, e)) in fixture.references.iter().zip(&out.estimates).enumerate() {
            let v = si_sdr(r, e)?;
            total += v;
            metrics.insert(format!("source_{k}_si_sdr_db"), v);
        }
        let mut recon = out.estimates[0].clone();
        for e in &out.estimates[1..] {
            recon.add_assign(e);
        }
        metrics.insert("mixture_si_sdr_db".into(), si_sdr(&fixture.mixture, &recon)?);
        arms.push(ArmResult {
            arm: format!("{n}_step"),
            final_objective: -total / fixture.references.len() as f64,
            metrics,
            trajectory: Some(out.trajectory),
            renders: out.estimates,
        });
    }
    Ok(AblationReport {
        ablation: "multistep".into(),
        objective: "neg_mean_source_si_sdr_db".into(),
        arms,
    })
}

/// Impact fit to a fixed target through the frozen-target prior: the
/// waveform (l2) decoder residual versus the multiscale spectrogram
/// residual. Objective: final multiscale spectral distance to the target.
pub fn spectrogram_ablation(fixture: &ImpactFitFixture, sds: &SdsConfig, opt: &OptimizeSettings) -> Result<AblationReport> {
    let oracle = OracleBackend::frozen_target(&fixture.target);
    let mut arms = Vec::new();
    for (name, variant) in [("l2", UpdateVariant::Decoder), ("spectrogram", UpdateVariant::SpecDecoder)] {
        let cfg = SdsConfig {
            variant,
            spectrogram: fixture.spectrogram.clone(),
            ..sds.clone()
        };
        cfg.validate()?;
        let traj = optimize(fixture.init_params.to_flat(), opt, |th| fixture.synth.project(th), |th, step| {
            let r = sds_update(th, &fixture.synth, &oracle, &Conditioning::Null, &cfg, step as u64)?;
            Ok(StepEval {
                gradient: r.gradient,
                loss: Some(r.mean_residual),
                detail: json!({ "variant": variant.name() }),
            })
        })?;
        abort_error(&traj)?;
        let x = fixture.synth.render(&traj.theta)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("final_l2_distance".into(), x.sub(&fixture.target).norm());
        arms.push(ArmResult {
            arm: name.into(),
            final_objective: spectral_distance(&x, &fixture.target, &fixture.spectrogram)?,
            metrics,
            trajectory: Some(traj),
            renders: vec![x],
        });
    }
    Ok(AblationReport {
        ablation: "spectrogram".into(),
        objective: "final_spectral_distance".into(),
        arms,
    })
}

/// Mean decoder residual norm `||x - x_hat||` over a fixed evaluation batch.
pub fn evaluation_residual<R, P>(theta: &[f64], renderer: &R, prior: &P, cond: &Conditioning, cfg: &SdsConfig) -> Result<f64>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    let cfg = SdsConfig {
        variant: UpdateVariant::Decoder,
        ..cfg.clone()
    };
    let seeds = batch_seeds(&SdsConfig { seed: cfg.seed ^ 0xE7A1, ..cfg.clone() }, u64::MAX);
    Ok(sds_update_with_seeds(theta, renderer, prior, cond, &cfg, &seeds)?.mean_residual)
}

/// Classic encoder-space updates versus decoder-space updates on any
/// renderer. Needs an encoder VJP, checked before any compute.
/// Objective: [`evaluation_residual`] at the final parameters.
pub fn encoder_ablation<R, P>(
    renderer: &R,
    prior: &P,
    cond: &Conditioning,
    theta0: &[f64],
    sds: &SdsConfig,
    opt: &OptimizeSettings,
) -> Result<AblationReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    if !prior.supports_encode_vjp() {
        return Err(Error::Capability("the encoder arm needs a backend with an encoder VJP".into()));
    }
    let mut arms = Vec::new();
    for (name, variant) in [("encoder", UpdateVariant::Classic), ("decoder", UpdateVariant::Decoder)] {
        let cfg = SdsConfig { variant, ..sds.clone() };
        cfg.validate()?;
        let traj = optimize(theta0.to_vec(), opt, |th| renderer.project(th), |th, step| {
            let r = sds_update(th, renderer, prior, cond, &cfg, step as u64)?;
            Ok(StepEval {
                gradient: r.gradient,
                loss: Some(r.mean_residual),
                detail: json!({ "variant": variant.name() }),
            })
        })?;
        abort_error(&traj)?;
        let final_objective = evaluation_residual(&traj.theta, renderer, prior, cond, sds)?;
        arms.push(ArmResult {
            arm: name.into(),
            final_objective,
            metrics: BTreeMap::new(),
            renders: vec![renderer.render(&traj.theta)?],
            trajectory: Some(traj),
        });
    }
    Ok(AblationReport {
        ablation: "encoder".into(),
        objective: "evaluation_residual".into(),
        arms,
    })
}
