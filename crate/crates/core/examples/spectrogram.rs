//! Multi-scale magnitude spectrogram of a two-tone chirp, its images and
//! CSV export, and a dot-product check of the hand-written VJP.
//!
//! cargo run --example spectrogram -- [out_dir]

use std::path::PathBuf;

use audio_sds::signal::{
    multiscale_spectrogram, multiscale_vjp, wav_write, write_grid_csv, write_grid_png, DbRange, SpectrogramConfig,
    WavEncoding, Waveform,
};

fn main() -> audio_sds::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/spectrogram".into()));
    std::fs::create_dir_all(&out)?;

    let sr = 8000;
    let n = 8000;
    let tau = std::f64::consts::TAU;
    // left: rising chirp 200 -> 2200 Hz, right: steady 600 Hz tone
    let left: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            0.5 * (tau * (200.0 * t + 1000.0 * t * t)).sin()
        })
        .collect();
    let right: Vec<f64> = (0..n).map(|i| 0.3 * (tau * 600.0 * i as f64 / sr as f64).sin()).collect();
    let w = Waveform::stereo(left, right, sr)?;
    wav_write(&w, out.join("chirp.wav"), WavEncoding::Pcm16)?;

    let cfg = SpectrogramConfig::new(vec![256, 512, 1024])?;
    let stack = multiscale_spectrogram(&w, &cfg)?;
    let range = DbRange::from_stack(&stack);
    for g in &stack.grids {
        println!("window {:5}: hop {:4}, {:4} frames x {:4} bins", g.window, g.hop, g.frames, g.bins);
        write_grid_png(g, range, out.join(format!("chirp_{}.png", g.window)))?;
        write_grid_csv(g, std::fs::File::create(out.join(format!("chirp_{}.csv", g.window)))?)?;
    }

    // <J d, y> from central differences against <d, J^T y>
    let d = Waveform::from_channel_major((0..2 * n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect(), sr)?;
    let y = stack.scaled(1.0 / stack.squared_norm().sqrt());
    let h = 1e-5;
    let up = multiscale_spectrogram(&w.add_scaled(&d, h), &cfg)?;
    let down = multiscale_spectrogram(&w.add_scaled(&d, -h), &cfg)?;
    let lhs = up.sub(&down).scaled(0.5 / h).dot(&y);
    let rhs = d.dot(&multiscale_vjp(&w, &y, &cfg)?);
    println!("adjoint check: <Jd, y> = {lhs:.9}, <d, J^T y> = {rhs:.9}");
    println!("wrote {}", out.display());
    Ok(())
}
