//! Modal impact synthesis: render a struck object, then recover its modes
//! from a mismatched start by descending a multi-scale spectral loss, and
//! save the fitted parameters as a TOML checkpoint.
//!
//! cargo run --release --example impact_synthesis -- [out_dir]

use std::path::PathBuf;

use audio_sds::fixtures::impact_fit_fixture;
use audio_sds::optim::AdamConfig;
use audio_sds::render::{save_params, ImpactParams, Renderer, RendererParams};
use audio_sds::separation::{optimize, OptimizeSettings, StepEval};
use audio_sds::signal::{multiscale_spectrogram, spectral_recon_loss_to, wav_write, WavEncoding};

fn main() -> audio_sds::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/impact_synthesis".into()));
    std::fs::create_dir_all(&out)?;

    let f = impact_fit_fixture()?;
    let modes = f.target_params.amplitudes.len();
    let noise_seed = f.target_params.noise_seed;
    wav_write(&f.target, out.join("target.wav"), WavEncoding::Float32)?;

    let reference = multiscale_spectrogram(&f.target, &f.spectrogram)?;
    let loss = |theta: &[f64]| -> audio_sds::Result<(f64, Vec<f64>)> {
        let x = f.synth.render(theta)?;
        let (l, dx) = spectral_recon_loss_to(&reference, &x, &f.spectrogram)?;
        Ok((l, f.synth.vjp(theta, &dx)?))
    };
    let theta0 = f.init_params.to_flat();
    let settings = OptimizeSettings {
        steps: 200,
        adam: AdamConfig::with_lr(0.05),
        checkpoint_every: 0,
    };
    let traj = optimize(theta0.clone(), &settings, |th| f.synth.project(th), |th, _| {
        let (l, g) = loss(th)?;
        Ok(StepEval {
            gradient: g,
            loss: Some(l),
            detail: serde_json::Value::Null,
        })
    })?;

    println!("spectral loss {:.4e} -> {:.4e} over {} steps", loss(&theta0)?.0, loss(&traj.theta)?.0, traj.log.len());
    let fitted = ImpactParams::from_flat(modes, noise_seed, &traj.theta)?;
    for n in 0..modes.min(4) {
        println!(
            "mode {n}: target {:7.1} Hz / {:5.1} 1/s, fitted {:7.1} Hz / {:5.1} 1/s",
            f.target_params.frequencies[n] / std::f64::consts::TAU,
            f.target_params.dampings[n],
            fitted.frequencies[n] / std::f64::consts::TAU,
            fitted.dampings[n],
        );
    }
    wav_write(&f.synth.render(&theta0)?, out.join("init.wav"), WavEncoding::Float32)?;
    wav_write(&f.synth.render(&traj.theta)?, out.join("fitted.wav"), WavEncoding::Float32)?;
    save_params(&RendererParams::Impact(fitted), out.join("fitted.toml"))?;
    println!("wrote {}", out.display());
    Ok(())
}
