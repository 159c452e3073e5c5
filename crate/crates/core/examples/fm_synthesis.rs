//! Text-to-sound with the FM synthesizer: SDS updates from the toy prior
//! rebalance a two-operator patch (one tone per class band) toward the
//! prompted class. The toy prior is small, so expect coarse spectral
//! steering rather than convincing timbres.
//!
//! cargo run --release --example fm_synthesis -- [out_dir] [toy_prior.json] [prompt]

use std::path::PathBuf;

use audio_sds::optim::AdamConfig;
use audio_sds::prior::toy::{band_energy_fraction, train_toy_prior, CorpusSpec, ToyPrior, ToyTrainingConfig};
use audio_sds::prior::{Conditioning, DiffusionPrior};
use audio_sds::render::{raw_ratio_for_hz, FmInit, FmParams, FmSynth, RenderSpec, Renderer};
use audio_sds::sds::{sds_update, SdsConfig};
use audio_sds::separation::{optimize, OptimizeSettings, StepEval};
use audio_sds::signal::{wav_write, SpectrogramConfig, WavEncoding};

fn main() -> audio_sds::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/fm_synthesis".into()));
    std::fs::create_dir_all(&out)?;
    let prior = match args.next().filter(|p| !p.is_empty()) {
        Some(path) => ToyPrior::load(path)?,
        None => {
            println!("training the toy prior (pass a checkpoint path to skip)...");
            ToyPrior::new(train_toy_prior(&CorpusSpec::default(), &ToyTrainingConfig::default())?)
        }
    };
    let prompt = args.next().unwrap_or_else(|| "low rumble".into());
    let corpus = prior.checkpoint().corpus.clone();
    let sr = prior.info().sample_rate;

    let init = FmInit {
        voices: 2,
        ..FmInit::default()
    };
    let synth = FmSynth {
        voices: init.voices,
        spec: RenderSpec::from_samples(corpus.clip_len, sr)?,
    };
    // one audible operator per class band, at roughly the corpus level
    let mut p0 = FmParams::init(&init, 4);
    for (i, hz) in [400.0, 1600.0].into_iter().enumerate() {
        p0.raw_ratios[i] = raw_ratio_for_hz(hz);
        p0.log_fm_matrix[init.voices * init.voices + i] = -2.5;
    }
    let theta0 = p0.to_flat();

    let cond = Conditioning::prompt(prompt.as_str());
    let sds = SdsConfig {
        guidance_scale: 2.0,
        batch_size: 4,
        n_denoise_steps: 2,
        spectrogram: SpectrogramConfig::new(vec![256, 512, 1024])?,
        ..SdsConfig::fm()
    };
    let settings = OptimizeSettings {
        steps: 200,
        adam: AdamConfig::with_lr(0.05),
        checkpoint_every: 0,
    };
    let traj = optimize(theta0.clone(), &settings, |th| synth.project(th), |th, step| {
        let r = sds_update(th, &synth, &prior, &cond, &sds, step as u64)?;
        Ok(StepEval {
            gradient: r.gradient,
            loss: None,
            detail: serde_json::Value::Null,
        })
    })?;

    println!("prompt {prompt:?}, {} steps", traj.log.len());
    for (name, theta) in [("init", &theta0), ("final", &traj.theta)] {
        let x = synth.render(theta)?;
        let mono = x.mono_mixdown();
        let bands: Vec<String> = corpus
            .classes
            .iter()
            .map(|c| format!("{} {:.0}%", c.name, 100.0 * band_energy_fraction(&mono, sr as f64, c.low_hz, c.high_hz)))
            .collect();
        let hz: Vec<String> = FmParams::from_flat(init.voices, theta)?
            .frequencies()
            .iter()
            .map(|w| format!("{:.0}", w / std::f64::consts::TAU))
            .collect();
        println!("{name:>5}: operators [{}] Hz; band energy: {}", hz.join(", "), bands.join(", "));
        wav_write(&x, out.join(format!("{name}.wav")), WavEncoding::Float32)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
