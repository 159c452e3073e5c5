use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};

use super::artifacts::{shared_range, Artifacts};
use super::config::{AblationArm, BackendKind, RunConfig, Task};
use super::ENV_CLAP_URL;
use crate::ablation::{encoder_ablation, multistep_ablation, spectrogram_ablation, AblationReport};
use crate::error::{Error, Result};
use crate::fixtures::{impact_fit_fixture, toy_separation_fixture};
use crate::metrics::{build_separation_report, clap_score, write_rows, ClapField, ReportWindow, SeparationReport};
use crate::prior::bridge::BridgePrior;
use crate::prior::toy::{train_toy_prior, CorpusSpec, ToyPrior};
use crate::prior::{Conditioning, DiffusionPrior, OracleBackend};
use crate::prompt::HttpClient;
use crate::render::{FmParams, FmSynth, ImpactParams, ImpactSynth, RenderSpec, Renderer, RendererParams};
use crate::sds::{sds_update, SdsConfig};
use crate::separation::{
    baseline_assignment, optimize, LatentSourceParams, Parametrization, ProblemSpecFile, SeparationProblem,
    SeparationSettings, StepEval, Trajectory,
};
use crate::signal::{wav_read, Waveform};

pub(super) fn run(c: &RunConfig) -> Result<PathBuf> {
    match c.task {
        Task::SynthFm | Task::SynthImpact => synthesize(c),
        Task::Separate => separate(c),
        Task::Eval => evaluate(c),
        Task::TrainToyPrior => train(c),
        Task::Ablate => ablate(c),
    }
}

struct Backend {
    prior: Box<dyn DiffusionPrior>,
    /// Corpus of the toy prior, when that is the backend.
    corpus: Option<CorpusSpec>,
}

/// Opens the configured prior and checks that every conditioning resolves
/// before any work starts.
fn open_backend(c: &RunConfig, conds: &[Conditioning]) -> Result<Backend> {
    Ok(match c.backend {
        BackendKind::Toy => {
            let path = c
                .toy_prior
                .as_ref()
                .ok_or_else(|| Error::Configuration("the toy backend needs --toy-prior PATH".into()))?;
            let prior = ToyPrior::load(path)?;
            for cond in conds {
                prior.class_slot(cond)?;
            }
            Backend {
                corpus: Some(prior.checkpoint().corpus.clone()),
                prior: Box::new(prior),
            }
        }
        BackendKind::Bridge => {
            let addr = c
                .bridge_addr
                .as_deref()
                .ok_or_else(|| Error::Configuration("the bridge backend needs an address".into()))?;
            Backend {
                prior: Box::new(BridgePrior::connect(addr, Duration::from_secs(120))?),
                corpus: None,
            }
        }
        BackendKind::Oracle => Backend {
            prior: Box::new(OracleBackend::tracking(c.oracle_sample_rate)),
            corpus: None,
        },
    })
}

fn conditioning(c: &RunConfig) -> Conditioning {
    c.prompt.clone().map(Conditioning::Prompt).unwrap_or(Conditioning::Null)
}

/// The run seed offsets the SDS sampling seed.
fn sds_config(c: &RunConfig) -> SdsConfig {
    SdsConfig {
        seed: c.sds.seed.wrapping_add(c.seed),
        ..c.sds.clone()
    }
}

fn abort_result(t: &Trajectory) -> Result<()> {
    match &t.aborted {
        Some(a) => Err(Error::NumericAbort {
            step: a.step,
            message: a.message.clone(),
        }),
        None => Ok(()),
    }
}

fn clap_client() -> Option<HttpClient> {
    HttpClient::from_env(ENV_CLAP_URL, "AUDIOSDS_CLAP_TOKEN")
}

/// Scores `audio` when a scorer is configured; failures become a note
/// instead of failing the finished run.
fn clap_or_note(audio: &Waveform, prompt: Option<&str>, client: Option<&HttpClient>) -> Value {
    let (Some(p), Some(cl)) = (prompt, client) else {
        return Value::Null;
    };
    match clap_score(audio, p, Some(cl)) {
        Ok(ClapField::Score(s)) => json!(s),
        Ok(ClapField::Unavailable) => Value::Null,
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn synthesize(c: &RunConfig) -> Result<PathBuf> {
    let cond = conditioning(c);
    let backend = open_backend(c, std::slice::from_ref(&cond))?;
    let prior = backend.prior.as_ref();
    let sr = prior.info().sample_rate;
    let sds = sds_config(c);
    let (renderer, theta0): (Box<dyn Renderer>, Vec<f64>) = match c.task {
        Task::SynthFm => {
            let spec = RenderSpec::new(c.fm.duration, sr)?;
            let p = FmParams::init(&c.fm.init, c.seed);
            (Box::new(FmSynth { voices: p.voices, spec }), p.to_flat())
        }
        _ => {
            let spec = RenderSpec::new(c.impact.duration, sr)?;
            let p = ImpactParams::init(&c.impact.init, sr, c.seed);
            (Box::new(ImpactSynth::new(spec, p.modes(), p.noise_seed)?), p.to_flat())
        }
    };
    let to_params = |th: &[f64]| -> Result<RendererParams> {
        Ok(match c.task {
            Task::SynthFm => RendererParams::Fm(FmParams::from_flat(c.fm.init.voices, th)?),
            _ => RendererParams::Impact(ImpactParams::from_flat(c.impact.init.modes, c.seed, th)?),
        })
    };
    let x0 = renderer.render(&theta0)?;

    let art = Artifacts::create(&c.out)?;
    art.text("config.toml", &c.to_toml()?)?;
    art.wav("init.wav", &x0)?;
    let traj = optimize(theta0, &c.optimizer, |th| renderer.project(th), |th, step| {
        let r = sds_update(th, renderer.as_ref(), prior, &cond, &sds, step as u64)?;
        Ok(StepEval {
            detail: serde_json::to_value(r.record(step, sds.variant)).expect("record serializes"),
            gradient: r.gradient,
            loss: None,
        })
    })?;
    art.log("log.jsonl", &traj)?;
    for cp in &traj.checkpoints {
        art.checkpoint("", cp.step, &to_params(&cp.theta)?)?;
    }
    let x = renderer.render(&traj.theta)?;
    art.wav("final.wav", &x)?;
    let range = shared_range(&[&x0, &x], &sds.spectrogram)?;
    art.spectrograms("spectrogram_init", &x0, &sds.spectrogram, range)?;
    art.spectrograms("spectrogram_final", &x, &sds.spectrogram, range)?;
    let clap = clap_client();
    art.json(
        "summary.json",
        &json!({
            "task": c.task.name(),
            "steps_run": traj.log.len(),
            "aborted": traj.aborted,
            "final_grad_norm": traj.log.last().map(|l| l.grad_norm),
            "clap_init": clap_or_note(&x0, c.prompt.as_deref(), clap.as_ref()),
            "clap_final": clap_or_note(&x, c.prompt.as_deref(), clap.as_ref()),
        }),
    )?;
    abort_result(&traj)?;
    Ok(art.dir().to_path_buf())
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Waveform>> {
    paths.iter().map(wav_read).collect()
}

fn file_id(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("mixture").to_string()
}

/// Final report, plus the baseline `m / K` report when ground truth exists.
fn reports(
    c: &RunConfig,
    mixture: &Waveform,
    estimates: &[Waveform],
    references: Option<&[Waveform]>,
    mixture_id: &str,
) -> Result<Vec<SeparationReport>> {
    let windows: &[ReportWindow] = &c.report.windows;
    let mut out = Vec::new();
    if references.is_some() {
        let base = baseline_assignment(mixture, estimates.len())?;
        out.push(build_separation_report(mixture, &base, references, windows, c.report.sdr_kind, (mixture_id, "baseline"))?);
    }
    out.push(build_separation_report(mixture, estimates, references, windows, c.report.sdr_kind, (mixture_id, "final"))?);
    Ok(out)
}

fn write_reports(art: &Artifacts, reports: &[SeparationReport]) -> Result<()> {
    let rows: Vec<_> = reports.iter().flat_map(SeparationReport::rows).collect();
    write_rows(&rows, std::fs::File::create(art.path("report.csv"))?)?;
    art.json("report.json", &reports)
}

fn report_summary(reports: &[SeparationReport]) -> Value {
    let find = |id: &str| reports.iter().find(|r| r.run_id == id);
    let mean = |id: &str| find(id).and_then(|r| r.mean_source_sdr(ReportWindow::Full));
    let improvement = match (mean("final"), mean("baseline")) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    json!({
        "mean_source_sdr_db": mean("final"),
        "baseline_mean_source_sdr_db": mean("baseline"),
        "improvement_db": improvement,
        "mixture_sdr_db": find("final").and_then(|r| r.mixture_sdr(ReportWindow::Full)),
    })
}

fn separate(c: &RunConfig) -> Result<PathBuf> {
    let settings = SeparationSettings {
        gamma: c.separation.gamma,
        sds: sds_config(c),
        spectrogram: c.sds.spectrogram.clone(),
        optimizer: c.optimizer.clone(),
        init_noise: c.separation.init_noise,
        seed: c.seed,
    };
    // the problem is loaded before the backend so bad paths fail fast
    let (problem, fixture_refs, mixture_id) = match (&c.separation.problem, c.separation.fixture) {
        (Some(path), _) => {
            let spec = ProblemSpecFile::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            (Some(spec.into_problem(settings.clone(), base)?), None, file_id(path))
        }
        (None, Some(i)) => (None, Some(i), format!("toy-mix-{i}")),
        (None, None) => return Err(Error::Configuration("separate needs --problem or --fixture".into())),
    };
    let conds: Vec<Conditioning> = match &problem {
        Some(p) => p.sources.iter().map(|s| s.conditioning.clone()).collect(),
        None => Vec::new(),
    };
    let backend = open_backend(c, &conds)?;
    let prior = backend.prior.as_ref();
    let (problem, mut references) = match (problem, fixture_refs) {
        (Some(p), _) => (p, None),
        (None, Some(i)) => {
            let corpus = backend.corpus.clone().unwrap_or_else(|| c.toy.corpus.clone());
            let f = toy_separation_fixture(&corpus, i)?;
            if let BackendKind::Toy = c.backend {
                let toy = ToyPrior::load(c.toy_prior.as_ref().expect("validated"))?;
                for s in &f.sources {
                    toy.class_slot(&s.conditioning)?;
                }
            }
            (SeparationProblem::new(f.mixture, f.sources, settings)?, Some(f.references))
        }
        (None, None) => unreachable!("checked above"),
    };
    if !c.separation.references.is_empty() {
        references = Some(read_all(&c.separation.references)?);
    }
    if let Some(r) = &references {
        if r.len() != problem.k() {
            return Err(Error::Configuration(format!("{} references for {} sources", r.len(), problem.k())));
        }
    }

    let art = Artifacts::create(&c.out)?;
    art.text("config.toml", &c.to_toml()?)?;
    art.wav("mixture.wav", &problem.mixture)?;
    let out = problem.run(prior)?;
    let traj = &out.trajectory;
    art.log("log.jsonl", traj)?;
    let mut metrics = csv::Writer::from_path(art.path("metrics.csv")).map_err(crate::signal::csv_err)?;
    metrics
        .write_record(["step", "loss", "grad_norm", "mixture_si_sdr_db"])
        .map_err(crate::signal::csv_err)?;
    for l in &traj.log {
        let sdr = l.detail.get("mixture_si_sdr_db").and_then(Value::as_f64);
        metrics
            .write_record([
                l.step.to_string(),
                l.loss.map(|v| v.to_string()).unwrap_or_default(),
                l.grad_norm.to_string(),
                sdr.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(crate::signal::csv_err)?;
    }
    metrics.flush()?;
    let sizes: Vec<usize> = out.thetas.iter().map(Vec::len).collect();
    let latent = out.latent_params(prior, &problem);
    for cp in &traj.checkpoints {
        let mut sources = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &n in &sizes {
            sources.push(cp.theta[off..off + n].to_vec());
            off += n;
        }
        match &latent {
            Some(l) => art.checkpoint(
                "",
                cp.step,
                &RendererParams::Latent(LatentSourceParams {
                    channels: l.channels,
                    frames: l.frames,
                    sources,
                }),
            )?,
            None => art.json(&format!("checkpoints/step_{:06}.json", cp.step), &json!({ "sources": sources }))?,
        }
    }
    let mut recon = out.estimates[0].clone();
    for e in &out.estimates[1..] {
        recon.add_assign(e);
    }
    for (k, e) in out.estimates.iter().enumerate() {
        art.wav(&format!("source_{k}.wav"), e)?;
    }
    art.wav("reconstruction.wav", &recon)?;
    let mut waves = vec![&problem.mixture];
    waves.extend(out.estimates.iter());
    let range = shared_range(&waves, &c.sds.spectrogram)?;
    art.spectrograms("spectrogram_mixture", &problem.mixture, &c.sds.spectrogram, range)?;
    for (k, e) in out.estimates.iter().enumerate() {
        art.spectrograms(&format!("spectrogram_source_{k}"), e, &c.sds.spectrogram, range)?;
    }
    let mut reps = reports(c, &problem.mixture, &out.estimates, references.as_deref(), &mixture_id)?;
    if let Some(cl) = clap_client() {
        let last = reps.last_mut().expect("final report");
        for (k, s) in problem.sources.iter().enumerate() {
            if let Conditioning::Prompt(p) = &s.conditioning {
                last.clap[k] = clap_score(&out.estimates[k], p, Some(&cl)).unwrap_or(ClapField::Unavailable);
            }
        }
    }
    write_reports(&art, &reps)?;
    let parametrizations: Vec<Parametrization> = problem.sources.iter().map(|s| s.parametrization).collect();
    art.json(
        "summary.json",
        &json!({
            "task": c.task.name(),
            "steps_run": traj.log.len(),
            "aborted": traj.aborted,
            "parametrizations": parametrizations,
            "report": report_summary(&reps),
        }),
    )?;
    abort_result(traj)?;
    Ok(art.dir().to_path_buf())
}

fn evaluate(c: &RunConfig) -> Result<PathBuf> {
    let mixture_path = c.eval.mixture.as_ref().expect("validated");
    let mixture = wav_read(mixture_path)?;
    let estimates = read_all(&c.eval.estimates)?;
    let references = if c.eval.references.is_empty() {
        None
    } else {
        Some(read_all(&c.eval.references)?)
    };
    let reps = reports(c, &mixture, &estimates, references.as_deref(), &file_id(mixture_path))?;
    let art = Artifacts::create(&c.out)?;
    art.text("config.toml", &c.to_toml()?)?;
    write_reports(&art, &reps)?;
    art.json("summary.json", &json!({ "task": c.task.name(), "report": report_summary(&reps) }))?;
    Ok(art.dir().to_path_buf())
}

fn train(c: &RunConfig) -> Result<PathBuf> {
    let art = Artifacts::create(&c.out)?;
    art.text("config.toml", &c.to_toml()?)?;
    let mut training = c.toy.training.clone();
    training.seed = training.seed.wrapping_add(c.seed);
    let ckpt = train_toy_prior(&c.toy.corpus, &training)?;
    ckpt.save(art.path("toy_prior.json"))?;
    let mut log = String::new();
    for p in &ckpt.loss_curve {
        log.push_str(&serde_json::to_string(p).expect("loss point serializes"));
        log.push('\n');
    }
    art.text("log.jsonl", &log)?;
    art.json(
        "summary.json",
        &json!({
            "task": c.task.name(),
            "checkpoint_sha256": ckpt.hash()?,
            "initial_eval_mse": ckpt.initial_eval_mse,
            "final_eval_mse": ckpt.final_eval_mse,
        }),
    )?;
    Ok(art.dir().to_path_buf())
}

fn ablate(c: &RunConfig) -> Result<PathBuf> {
    let report: AblationReport = match c.ablation.arm {
        AblationArm::Multistep => {
            let backend = open_backend(c, &[])?;
            let corpus = backend.corpus.clone().unwrap_or_else(|| c.toy.corpus.clone());
            let fixture = toy_separation_fixture(&corpus, c.ablation.fixture)?;
            if let BackendKind::Toy = c.backend {
                let toy = ToyPrior::load(c.toy_prior.as_ref().expect("validated"))?;
                for s in &fixture.sources {
                    toy.class_slot(&s.conditioning)?;
                }
            }
            let settings = SeparationSettings {
                gamma: c.separation.gamma,
                sds: sds_config(c),
                spectrogram: c.sds.spectrogram.clone(),
                optimizer: c.optimizer.clone(),
                init_noise: c.separation.init_noise,
                seed: c.seed,
            };
            let [a, b] = c.ablation.denoise_steps;
            multistep_ablation(backend.prior.as_ref(), &fixture, &settings, (a, b))?
        }
        AblationArm::Spectrogram => {
            let fixture = impact_fit_fixture()?;
            // the frozen-target prior ignores the noise draw, one sample suffices
            let sds = SdsConfig {
                batch_size: 1,
                n_denoise_steps: 1,
                guidance_scale: 1.0,
                ..sds_config(c)
            };
            spectrogram_ablation(&fixture, &sds, &c.ablation.impact_optimizer)?
        }
        AblationArm::Encoder => {
            let cond = conditioning(c);
            let backend = open_backend(c, std::slice::from_ref(&cond))?;
            let prior = backend.prior.as_ref();
            let spec = RenderSpec::new(c.fm.duration, prior.info().sample_rate)?;
            let p = FmParams::init(&c.fm.init, c.seed);
            let synth = FmSynth { voices: p.voices, spec };
            encoder_ablation(&synth, prior, &cond, &p.to_flat(), &sds_config(c), &c.optimizer)?
        }
    };
    let art = Artifacts::create(&c.out)?;
    art.text("config.toml", &c.to_toml()?)?;
    report.write_csv(std::fs::File::create(art.path("ablation.csv"))?)?;
    art.json("summary.json", &report)?;
    let renders: Vec<&Waveform> = report.arms.iter().flat_map(|a| a.renders.iter()).collect();
    let range = shared_range(&renders, &c.sds.spectrogram)?;
    for arm in &report.arms {
        if let Some(t) = &arm.trajectory {
            art.log(&format!("log_{}.jsonl", arm.arm), t)?;
        }
        for (i, w) in arm.renders.iter().enumerate() {
            art.wav(&format!("{}_{i}.wav", arm.arm), w)?;
            art.spectrograms(&format!("spectrogram_{}_{i}", arm.arm), w, &c.sds.spectrogram, range)?;
        }
    }
    Ok(art.dir().to_path_buf())
}
