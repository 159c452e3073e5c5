//! Criterion checks shared by the integration tests and the acceptance
//! report. Each check returns `Ok(detail)` on pass and `Err(detail)` on fail.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use audio_sds::ablation::{multistep_ablation, spectrogram_ablation};
use audio_sds::cli::{self, RunConfig, Task};
use audio_sds::fixtures::{impact_fit_fixture, toy_separation_fixture, toy_separation_settings};
use audio_sds::metrics::si_sdr;
use audio_sds::optim::AdamConfig;
use audio_sds::prior::bridge::{read_frame, write_frame, LoopbackServer, ServerBackend};
use audio_sds::prior::toy::{train_toy_prior, CorpusSpec, ToyPrior, ToyPriorCheckpoint, ToyTrainingConfig};
use audio_sds::prior::{add_noise, ddim, Conditioning, DiffusionPrior, Latent, OracleBackend};
use audio_sds::render::{
    FmParams, FmSynth, IdentityRenderer, ImpactParams, ImpactSynth, RenderSpec, Renderer,
};
use audio_sds::sds::{sds_update, SdsConfig, UpdateVariant};
use audio_sds::separation::{baseline_assignment, OptimizeSettings, SeparationProblem};
use audio_sds::signal::{multiscale_spectrogram, multiscale_vjp, SpectrogramConfig, SpectrogramStack, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = std::result::Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_wave(len: usize, sr: u32, rng: &mut ChaCha8Rng) -> Waveform {
    Waveform::from_channel_major(uniform(2 * len, rng), sr).unwrap()
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Worst per-coordinate relative error of `analytic` against central
/// differences of `f`. Each coordinate keeps the best of several step sizes:
/// small steps lose to round-off, large ones to kinks in the envelopes.
/// Coordinates whose true derivative is tiny are measured against
/// `1e-3 * max |g|` so cancellation noise cannot dominate.
pub fn fd_relative_error(theta: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    let mut x = theta.to_vec();
    for i in 0..theta.len() {
        let mut best = f64::INFINITY;
        for rel in [1e-4, 1e-5, 1e-6] {
            let h = rel * theta[i].abs().max(1.0);
            x[i] = theta[i] + h;
            let up = f(&x);
            x[i] = theta[i] - h;
            let down = f(&x);
            x[i] = theta[i];
            let fd = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-3 * scale).max(1e-300);
            best = best.min((fd - analytic[i]).abs() / denom);
        }
        worst = worst.max(best);
    }
    worst
}

/// `<cotangent, render(theta)>` against the renderer VJP.
pub fn renderer_fd_error<R: Renderer>(r: &R, theta: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let x = r.render(theta).unwrap();
    let y = random_wave(x.len(), x.sample_rate(), rng);
    let g = r.vjp(theta, &y).unwrap();
    fd_relative_error(theta, &g, |t| r.render(t).unwrap().dot(&y))
}

pub fn random_fm(seed: u64) -> (FmSynth, Vec<f64>) {
    let mut rng = rng(seed);
    let voices = 1 + (seed as usize % 4);
    let len = 64 + (seed as usize * 37) % 193;
    let mut p = FmParams::zeros(voices);
    for v in p.log_fm_matrix.iter_mut() {
        *v = rng.random_range(-3.0..0.0);
    }
    for v in p.raw_ratios.iter_mut() {
        *v = rng.random_range(-2.0..0.0);
    }
    for v in p.raw_attacks.iter_mut() {
        *v = rng.random_range(-5.0..-3.0);
    }
    for v in p.raw_decays.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let spec = RenderSpec::from_samples(len, 8000).unwrap();
    (FmSynth { voices, spec }, p.to_flat())
}

pub fn random_impact(seed: u64) -> (ImpactSynth, Vec<f64>) {
    let mut rng = rng(seed ^ 0x1A);
    let modes = 1 + (seed as usize % 8);
    let len = 64 + (seed as usize * 53) % 193;
    let sr = 8000;
    let tau = std::f64::consts::TAU;
    let mut p = ImpactParams::from_flat(modes, seed, &vec![0.0; 6 * modes]).unwrap();
    for n in 0..modes {
        p.amplitudes[n] = rng.random_range(-1.0..1.0);
        p.dampings[n] = rng.random_range(0.0..50.0);
        p.frequencies[n] = tau * rng.random_range(100.0..3500.0);
        p.reverb_amplitudes[n] = rng.random_range(-1.0..1.0);
        p.reverb_dampings[n] = rng.random_range(0.0..50.0);
        p.reverb_centres[n] = tau * rng.random_range(200.0..3500.0);
    }
    let synth = ImpactSynth::new(RenderSpec::from_samples(len, sr).unwrap(), modes, seed).unwrap();
    (synth, p.to_flat())
}

/// Random stack with the shape of `like`.
pub fn random_stack(like: &SpectrogramStack, rng: &mut ChaCha8Rng) -> SpectrogramStack {
    let mut s = SpectrogramStack::zeros_like(like);
    for g in s.grids.iter_mut() {
        for v in g.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    s
}

pub fn small_spectrogram() -> SpectrogramConfig {
    SpectrogramConfig::new(vec![16, 32, 64]).unwrap()
}

pub fn spectrogram_fd_error(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x5EC);
    let len = 96 + (seed as usize * 29) % 161;
    let cfg = small_spectrogram();
    let w = random_wave(len, 8000, &mut r);
    let y = random_stack(&multiscale_spectrogram(&w, &cfg).unwrap(), &mut r);
    let g = multiscale_vjp(&w, &y, &cfg).unwrap();
    fd_relative_error(w.as_slice(), g.as_slice(), |t| {
        let x = Waveform::from_channel_major(t.to_vec(), 8000).unwrap();
        multiscale_spectrogram(&x, &cfg).unwrap().dot(&y)
    })
}

pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_SEEDS: u64 = 20;

pub fn gradient_correctness() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..FD_SEEDS {
        let mut r = rng(seed);
        let (fm, theta) = random_fm(seed);
        worst[0] = worst[0].max(renderer_fd_error(&fm, &theta, &mut r));
        let (imp, theta) = random_impact(seed);
        worst[1] = worst[1].max(renderer_fd_error(&imp, &theta, &mut r));
        worst[2] = worst[2].max(spectrogram_fd_error(seed));
    }
    let detail = format!(
        "{FD_SEEDS} seeds, worst relative error fm {:.2e}, impact {:.2e}, spectrogram {:.2e}",
        worst[0], worst[1], worst[2]
    );
    if worst.iter().all(|&e| e <= FD_TOLERANCE) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `|<J d, y> - <d, J^T y>|` relative to `max(|J d| |y|, |d| |J^T y|)`,
/// with `J d` from central differences.
pub fn adjoint_gap(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xAD);
    let len = 200 + (seed as usize * 41) % 300;
    let cfg = SpectrogramConfig::new(vec![32, 64, 128]).unwrap();
    let w = random_wave(len, 8000, &mut r);
    let d = random_wave(len, 8000, &mut r);
    let s = multiscale_spectrogram(&w, &cfg).unwrap();
    let y = random_stack(&s, &mut r);
    let h = 1e-5;
    let up = multiscale_spectrogram(&w.add_scaled(&d, h), &cfg).unwrap();
    let down = multiscale_spectrogram(&w.add_scaled(&d, -h), &cfg).unwrap();
    let jd = up.sub(&down).scaled(1.0 / (2.0 * h));
    let vjp = multiscale_vjp(&w, &y, &cfg).unwrap();
    let lhs = jd.dot(&y);
    let rhs = d.dot(&vjp);
    let scale = (jd.squared_norm().sqrt() * y.squared_norm().sqrt()).max(d.norm() * vjp.norm());
    (lhs - rhs).abs() / scale
}

pub const ADJOINT_TOLERANCE: f64 = 1e-6;

pub fn adjoint_identity() -> Outcome {
    let worst = (0..50).map(adjoint_gap).fold(0.0f64, f64::max);
    let detail = format!("50 triples, worst relative gap {worst:.2e}");
    if worst <= ADJOINT_TOLERANCE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub const ORACLE_TIMESTEPS: [f64; 3] = [0.1, 0.5, 0.9];
pub const ORACLE_STEPS: [usize; 4] = [1, 2, 5, 10];

/// Largest `|gradient| / |render|` over variants, timesteps and step counts.
pub fn oracle_sds_ratio(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x0AC);
    let renderer = IdentityRenderer { len: 256, sample_rate: 8000 };
    let prior = OracleBackend::tracking(8000);
    let mut worst = 0.0f64;
    for variant in [UpdateVariant::Classic, UpdateVariant::Decoder, UpdateVariant::SpecDecoder] {
        for t in ORACLE_TIMESTEPS {
            for n in ORACLE_STEPS {
                let theta = uniform(512, &mut r);
                let cfg = SdsConfig {
                    t_min: t,
                    t_max: t,
                    batch_size: 2,
                    n_denoise_steps: n,
                    variant,
                    guidance_scale: 3.0,
                    spectrogram: SpectrogramConfig::new(vec![32, 64]).unwrap(),
                    seed,
                    ..SdsConfig::fm()
                };
                let rep = sds_update(&theta, &renderer, &prior, &Conditioning::prompt("any"), &cfg, 0).unwrap();
                let norm = renderer.render(&theta).unwrap().norm();
                worst = worst.max(rep.gradient_norm() / norm);
            }
        }
    }
    worst
}

/// Largest `|denoise(add_noise(h, t, eps)) - h| / |h|` under the oracle,
/// running the full DDIM recursion on its noise predictions.
pub fn oracle_recovery_error(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xDE);
    let h = Latent::new(2, 64, uniform(128, &mut r)).unwrap();
    let prior = OracleBackend::with_anchor(h.clone(), 8000);
    let mut worst = 0.0f64;
    for t in ORACLE_TIMESTEPS.into_iter().chain([1.0]) {
        for n in ORACLE_STEPS {
            let eps = Latent::new(2, 64, uniform(128, &mut r)).unwrap();
            let z = add_noise(&h, t, &eps, prior.schedule()).unwrap();
            let out = ddim(&prior, &z, t, &Conditioning::Null, 1.0, n).unwrap();
            worst = worst.max(out.sub(&h).norm() / h.norm());
            let exact = prior.denoise_multistep(&z, t, &Conditioning::Null, 1.0, n).unwrap();
            worst = worst.max(exact.sub(&h).norm() / h.norm());
        }
    }
    worst
}

pub fn oracle_fixed_points() -> Outcome {
    let sds = (0..3).map(oracle_sds_ratio).fold(0.0f64, f64::max);
    let rec = (0..3).map(oracle_recovery_error).fold(0.0f64, f64::max);
    let detail = format!("worst |grad|/|x| {sds:.2e}, worst multistep recovery error {rec:.2e}");
    if sds <= 1e-6 && rec <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Plain descent `theta -= lr * gradient` with the frozen-target double and
/// the identity renderer; returns the distance to the target per step.
pub fn convergence_distances(steps: usize, lr: f64) -> Vec<f64> {
    let mut r = rng(99);
    let len = 512;
    let target = random_wave(len, 8000, &mut r);
    let prior = OracleBackend::frozen_target(&target);
    let renderer = IdentityRenderer { len, sample_rate: 8000 };
    let cfg = SdsConfig {
        variant: UpdateVariant::Decoder,
        batch_size: 1,
        n_denoise_steps: 1,
        guidance_scale: 1.0,
        ..SdsConfig::fm()
    };
    let mut theta = uniform(2 * len, &mut r);
    let mut out = vec![renderer.render(&theta).unwrap().sub(&target).norm()];
    for step in 0..steps {
        let g = sds_update(&theta, &renderer, &prior, &Conditioning::Null, &cfg, step as u64).unwrap().gradient;
        for (t, g) in theta.iter_mut().zip(&g) {
            *t -= lr * g;
        }
        out.push(renderer.render(&theta).unwrap().sub(&target).norm());
    }
    out
}

pub fn convergence_toy() -> Outcome {
    let d = convergence_distances(200, 0.1);
    let last = *d.last().unwrap();
    let monotone = d.windows(2).all(|w| w[1] < w[0]);
    let detail = format!("|x - x*| {:.3e} -> {last:.3e} in 200 steps, strictly decreasing: {monotone}", d[0]);
    if last < 1e-3 && monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn train_default_prior() -> ToyPriorCheckpoint {
    train_toy_prior(&CorpusSpec::default(), &ToyTrainingConfig::default()).unwrap()
}

/// A briefly trained prior for tests that only need a working backend.
pub fn quick_prior(steps: usize) -> ToyPrior {
    let training = ToyTrainingConfig {
        steps,
        ..ToyTrainingConfig::default()
    };
    ToyPrior::new(train_toy_prior(&CorpusSpec::default(), &training).unwrap())
}

pub struct SeparationScore {
    pub baseline_mean_db: f64,
    pub final_mean_db: f64,
    pub mixture_db: f64,
    pub band_fractions: Vec<f64>,
}

pub const TOY_MIXTURES: usize = 3;

/// Separates toy mixture `index` with the fixture settings.
pub fn toy_separation_score(prior: &ToyPrior, index: usize) -> SeparationScore {
    let corpus = &prior.checkpoint().corpus;
    let f = toy_separation_fixture(corpus, index).unwrap();
    let problem = SeparationProblem::new(f.mixture.clone(), f.sources.clone(), toy_separation_settings()).unwrap();
    let out = problem.run(prior).unwrap();
    assert!(out.trajectory.aborted.is_none(), "separation aborted");
    let base = baseline_assignment(&f.mixture, 2).unwrap();
    let mean = |est: &[Waveform]| {
        f.references.iter().zip(est).map(|(r, e)| si_sdr(r, e).unwrap()).sum::<f64>() / 2.0
    };
    let mut recon = out.estimates[0].clone();
    recon.add_assign(&out.estimates[1]);
    let band_fractions = corpus
        .classes
        .iter()
        .zip(&out.estimates)
        .map(|(c, e)| {
            audio_sds::prior::toy::band_energy_fraction(
                &e.mono_mixdown(),
                corpus.sample_rate as f64,
                c.low_hz,
                c.high_hz,
            )
        })
        .collect();
    SeparationScore {
        baseline_mean_db: mean(&base),
        final_mean_db: mean(&out.estimates),
        mixture_db: si_sdr(&f.mixture, &recon).unwrap(),
        band_fractions,
    }
}

pub fn toy_separation(prior: &ToyPrior) -> Outcome {
    let ck = prior.checkpoint();
    let mut improvement = 0.0;
    let mut mixture = 0.0;
    let mut lines = Vec::new();
    for i in 0..TOY_MIXTURES {
        let s = toy_separation_score(prior, i);
        improvement += (s.final_mean_db - s.baseline_mean_db) / TOY_MIXTURES as f64;
        mixture += s.mixture_db / TOY_MIXTURES as f64;
        lines.push(format!(
            "mix {i}: {:.2} -> {:.2} dB, mixture {:.2} dB",
            s.baseline_mean_db, s.final_mean_db, s.mixture_db
        ));
    }
    let mse_ok = ck.final_eval_mse < 0.5 * ck.initial_eval_mse;
    let detail = format!(
        "prior MSE {:.3} -> {:.3}; mean improvement {improvement:.2} dB (>= 3), mixture SI-SDR {mixture:.2} dB (>= 8); {}",
        ck.initial_eval_mse,
        ck.final_eval_mse,
        lines.join("; ")
    );
    if improvement >= 3.0 && mixture >= 8.0 && mse_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn ablation_spectrogram() -> Outcome {
    let f = impact_fit_fixture().unwrap();
    let sds = SdsConfig {
        batch_size: 1,
        n_denoise_steps: 1,
        guidance_scale: 1.0,
        ..SdsConfig::impact()
    };
    let opt = OptimizeSettings {
        steps: 200,
        adam: AdamConfig::with_lr(0.05),
        checkpoint_every: 0,
    };
    let rep = spectrogram_ablation(&f, &sds, &opt).unwrap();
    let l2 = rep.arm("l2").unwrap().final_objective;
    let spec = rep.arm("spectrogram").unwrap().final_objective;
    let detail = format!("final spectral loss: spectrogram {spec:.4e} vs l2 {l2:.4e}");
    if spec < l2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn ablation_multistep(prior: &ToyPrior) -> Outcome {
    let f = toy_separation_fixture(&prior.checkpoint().corpus, 0).unwrap();
    let rep = multistep_ablation(prior, &f, &toy_separation_settings(), (1, 5)).unwrap();
    let one = rep.arm("1_step").unwrap().final_objective;
    let five = rep.arm("5_step").unwrap().final_objective;
    let detail = format!("final objective (-mean SI-SDR): 5-step {five:.3} vs 1-step {one:.3}");
    if five <= one {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs `config`, re-runs from its saved snapshot into `rerun_dir`, and
/// compares the run logs and every checkpoint byte for byte.
pub fn rerun_matches(config: &RunConfig, rerun_dir: &Path) -> std::result::Result<usize, String> {
    let first = cli::run(config).map_err(|e| e.to_string())?;
    let snapshot = std::fs::read_to_string(first.join("config.toml")).map_err(|e| e.to_string())?;
    let mut again = RunConfig::layered(config.task, Some(&snapshot)).map_err(|e| e.to_string())?;
    again.out = rerun_dir.to_path_buf();
    let second = cli::run(&again).map_err(|e| e.to_string())?;
    let mut compared = 0;
    {
        let name = "log.jsonl";
        let a = std::fs::read(first.join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.join(name)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{name} differs"));
        }
        compared += 1;
    }
    let mut names: Vec<_> = std::fs::read_dir(first.join("checkpoints"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in names {
        let a = std::fs::read(first.join("checkpoints").join(&n)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.join("checkpoints").join(&n)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("checkpoint {n:?} differs"));
        }
        compared += 1;
    }
    Ok(compared)
}

pub fn determinism(toy_prior_path: &Path, work: &Path) -> Outcome {
    let mut fm = RunConfig::defaults(Task::SynthFm);
    fm.backend = audio_sds::cli::BackendKind::Toy;
    fm.toy_prior = Some(toy_prior_path.to_path_buf());
    fm.prompt = Some("high whistle".into());
    fm.fm.duration = 0.25;
    fm.sds.batch_size = 2;
    fm.optimizer.steps = 10;
    fm.optimizer.checkpoint_every = 5;
    fm.out = work.join("fm");
    let mut sep = RunConfig::defaults(Task::Separate);
    sep.backend = audio_sds::cli::BackendKind::Toy;
    sep.toy_prior = Some(toy_prior_path.to_path_buf());
    sep.separation.fixture = Some(1);
    sep.sds.guidance_scale = 2.0;
    sep.optimizer.steps = 10;
    sep.optimizer.checkpoint_every = 5;
    sep.out = work.join("sep");
    let mut files = 0;
    for (name, c) in [("synth-fm", &fm), ("separate", &sep)] {
        match rerun_matches(c, &work.join(format!("{name}-rerun"))) {
            Ok(n) => files += n,
            Err(e) => return Err(format!("{name}: {e}")),
        }
    }
    Ok(format!("synth-fm and separate re-runs from snapshots: {files} files bit-identical"))
}

/// A golden exchange: request frames and the expected response frames.
pub struct Golden {
    pub name: String,
    pub requests: Vec<u8>,
    pub responses: Vec<u8>,
}

pub fn protocol_dir() -> PathBuf {
    fixtures_dir().join("protocol")
}

pub fn load_goldens() -> Vec<Golden> {
    let dir = protocol_dir();
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            n.strip_suffix(".request.bin").map(str::to_string)
        })
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| Golden {
            requests: std::fs::read(dir.join(format!("{name}.request.bin"))).unwrap(),
            responses: std::fs::read(dir.join(format!("{name}.response.bin"))).unwrap(),
            name,
        })
        .collect()
}

/// Streams a golden request file to the server and collects the reply bytes.
pub fn exchange(server: &LoopbackServer, requests: &[u8]) -> Vec<u8> {
    use std::net::TcpStream;
    let mut stream = TcpStream::connect(server.addr()).unwrap();
    stream.set_read_timeout(Some(std::time::Duration::from_secs(30))).unwrap();
    let mut frames = Vec::new();
    let mut cursor = requests;
    while let Some(body) = read_frame(&mut cursor).unwrap() {
        frames.push(body);
    }
    let mut out = Vec::new();
    for body in frames {
        write_frame(&mut stream, &body).unwrap();
        let reply = read_frame(&mut stream).unwrap().expect("server closed early");
        write_frame(&mut out, &reply).unwrap();
    }
    out
}

pub fn echo_server() -> LoopbackServer {
    LoopbackServer::spawn(ServerBackend::Echo { sample_rate: 8000 }).unwrap()
}

pub fn protocol_conformance() -> Outcome {
    let goldens = load_goldens();
    if goldens.is_empty() {
        return Err("no golden fixtures found".into());
    }
    let server = echo_server();
    let mut failed = Vec::new();
    for g in &goldens {
        if exchange(&server, &g.requests) != g.responses {
            failed.push(g.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(format!("{} golden exchanges byte-identical", goldens.len()))
    } else {
        Err(format!("mismatched: {}", failed.join(", ")))
    }
}

pub fn temp_dir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

pub fn save_checkpoint(ck: &ToyPriorCheckpoint, dir: &Path) -> PathBuf {
    let p = dir.join("toy_prior.json");
    ck.save(&p).unwrap();
    p
}
