mod common;

use std::f64::consts::{PI, TAU};

use audio_sds::render::impact::reverb_noise;
use audio_sds::render::{
    bandpass, envelope, fm_render, FmParams, FmSynth, ImpactInit, ImpactParams, ImpactSynth, RenderSpec, Renderer,
};
use audio_sds::render::impact::ReverbExcitation;
use audio_sds::signal::Waveform;
use common::*;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Envelope written out independently of the library.
fn envelope_ref(t: f64, a: f64, d: f64) -> f64 {
    let v = (t / (a + 1e-5)).min((a - t).exp() / (d * d)) * (d - t - a) / d;
    v.max(0.0)
}

/// Straight-loop evaluation of the FM recurrence from raw parameters.
fn fm_reference(p: &FmParams, len: usize, sr: f64) -> Vec<f64> {
    let v = p.voices;
    let a: Vec<f64> = p.log_fm_matrix.iter().map(|l| l.exp()).collect();
    let omega: Vec<f64> = p.raw_ratios.iter().map(|&r| TAU * 20.0 * 400f64.powf(sig(r))).collect();
    let mut prev = vec![0.0; v];
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let mut x = 0.0;
        for j in 0..v {
            x += a[v * v + j] * prev[j];
        }
        out.push(x);
        let mut next = vec![0.0; v];
        for i in 0..v {
            let mut phase = t * omega[i];
            for j in 0..v {
                phase += a[i * v + j] * prev[j];
            }
            next[i] = phase.sin() * envelope_ref(t, sig(p.raw_attacks[i]), sig(p.raw_decays[i]));
        }
        prev = next;
    }
    out
}

#[test]
fn envelope_matches_direct_formula() {
    let direct = (0.05f64 / (0.1 + 1e-5)).min((0.1f64 - 0.05).exp() / 0.25) * (0.5 - 0.05 - 0.1) / 0.5;
    assert!((envelope(0.05, 0.1, 0.5) - direct).abs() < 1e-15);
    assert!((direct - 0.34996).abs() < 1e-4);
}

#[test]
fn fm_matches_a_straight_loop_reference() {
    for seed in 0..5 {
        let (synth, theta) = random_fm(seed * 4 + 3);
        let p = FmParams::from_flat(synth.voices, &theta).unwrap();
        let spec = RenderSpec::from_samples(64, 8000).unwrap();
        let x = fm_render(&p, &spec).unwrap();
        let r = fm_reference(&p, 64, 8000.0);
        for (a, b) in x.channel(0).iter().zip(&r) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        assert_eq!(x.channel(0), x.channel(1));
    }
}

fn unmodulated(voices: usize) -> FmParams {
    let mut p = FmParams::zeros(voices);
    for i in 0..voices * voices {
        p.log_fm_matrix[i] = -60.0;
    }
    for j in 0..voices {
        p.log_fm_matrix[voices * voices + j] = if j == 0 { 0.0 } else { -60.0 };
        p.raw_ratios[j] = -1.0 + 0.5 * j as f64;
        p.raw_attacks[j] = -3.0;
        p.raw_decays[j] = 0.5;
    }
    p
}

#[test]
fn unmodulated_fm_is_an_enveloped_sinusoid() {
    let p = unmodulated(4);
    let sr = 8000.0;
    let spec = RenderSpec::from_samples(512, 8000).unwrap();
    let x = fm_render(&p, &spec).unwrap();
    let w1 = TAU * 20.0 * 400f64.powf(sig(p.raw_ratios[0]));
    let (a, d) = (sig(p.raw_attacks[0]), sig(p.raw_decays[0]));
    for n in 1..512 {
        let t = (n - 1) as f64 / sr;
        let expected = (t * w1).sin() * envelope_ref(t, a, d);
        assert!((x.channel(0)[n] - expected).abs() < 1e-6, "sample {n}");
    }
}

#[test]
fn output_row_gradient_is_the_operator_correlation() {
    let p = unmodulated(3);
    let synth = FmSynth {
        voices: 3,
        spec: RenderSpec::from_samples(256, 8000).unwrap(),
    };
    let mut r = rng(5);
    let y = random_wave(256, 8000, &mut r);
    let g = synth.vjp(&p.to_flat(), &y).unwrap();
    let sr = 8000.0;
    for j in 0..3 {
        let w = TAU * 20.0 * 400f64.powf(sig(p.raw_ratios[j]));
        let (a, d) = (sig(p.raw_attacks[j]), sig(p.raw_decays[j]));
        let mut corr = 0.0;
        for n in 1..256 {
            let t = (n - 1) as f64 / sr;
            let u = (t * w).sin() * envelope_ref(t, a, d);
            corr += (y.channel(0)[n] + y.channel(1)[n]) * u;
        }
        // parameters are log-gains
        let expected = p.log_fm_matrix[9 + j].exp() * corr;
        let got = g[9 + j];
        assert!((got - expected).abs() <= 1e-9 * (1.0 + expected.abs()), "{j}: {got} vs {expected}");
    }
}

#[test]
fn fm_vjp_matches_finite_differences() {
    for seed in 0..FD_SEEDS {
        let (synth, theta) = random_fm(seed);
        assert!(synth.voices <= 4 && synth.spec.num_samples().unwrap() <= 256);
        let err = renderer_fd_error(&synth, &theta, &mut rng(seed));
        assert!(err <= FD_TOLERANCE, "seed {seed}: {err:e}");
    }
}

/// `O(T^2)` truncated linear convolution.
fn direct_convolution(a: &[f64], b: &[f64]) -> Vec<f64> {
    (0..a.len())
        .map(|n| (0..=n).map(|k| a[k] * b[n - k]).sum())
        .collect()
}

#[test]
fn impact_matches_direct_convolution_of_independent_impulses() {
    let (synth, theta) = random_impact(3);
    let modes = synth.modes;
    assert_eq!(modes, 4);
    let len = 256;
    let synth = ImpactSynth::new(RenderSpec::from_samples(len, 8000).unwrap(), modes, 21).unwrap();
    let p = ImpactParams::from_flat(modes, 21, &theta).unwrap();
    let noise = reverb_noise(21, len);
    let t: Vec<f64> = (0..len).map(|n| n as f64 / 8000.0).collect();
    let mut object = vec![0.0; len];
    let mut reverb = vec![0.0; len];
    for m in 0..modes {
        let band = bandpass(&noise, 8000, p.reverb_centres[m], 0.05).unwrap();
        for n in 0..len {
            object[n] += p.amplitudes[m] * (-p.dampings[m] * t[n]).exp() * (p.frequencies[m] * t[n]).cos();
            reverb[n] += p.reverb_amplitudes[m] * (-p.reverb_dampings[m] * t[n]).exp() * band[n];
        }
    }
    let expected = direct_convolution(&object, &reverb);
    let x = synth.render(&theta).unwrap();
    for (a, b) in x.channel(0).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn undamped_amplitude_gradient_with_delta_reverb() {
    let len = 200;
    let modes = 3;
    let synth = ImpactSynth::with_options(
        RenderSpec::from_samples(len, 8000).unwrap(),
        modes,
        0,
        0.05,
        ReverbExcitation::Impulse,
    )
    .unwrap();
    let mut p = ImpactParams::from_flat(modes, 0, &vec![0.0; 6 * modes]).unwrap();
    p.amplitudes = vec![0.3, -0.7, 1.1];
    p.frequencies = vec![TAU * 300.0, TAU * 910.0, TAU * 2400.0];
    p.reverb_amplitudes = vec![0.5, 0.25, 0.25];
    p.reverb_dampings = vec![3.0, 3.0, 3.0];
    p.reverb_centres = vec![TAU * 500.0; 3];
    let mut r = rng(8);
    let y = random_wave(len, 8000, &mut r);
    let g = synth.vjp(&p.to_flat(), &y).unwrap();
    for (m, (&gm, &w)) in g.iter().zip(&p.frequencies).enumerate() {
        let expected: f64 = (0..len)
            .map(|n| (y.channel(0)[n] + y.channel(1)[n]) * (w * n as f64 / 8000.0).cos())
            .sum();
        assert!((gm - expected).abs() < 1e-9 * (1.0 + expected.abs()), "{m}");
    }
}

#[test]
fn impact_vjp_matches_finite_differences() {
    for seed in 0..FD_SEEDS {
        let (synth, theta) = random_impact(seed);
        assert!(synth.modes <= 8 && synth.spec.num_samples().unwrap() <= 256);
        let err = renderer_fd_error(&synth, &theta, &mut rng(seed));
        assert!(err <= FD_TOLERANCE, "seed {seed}: {err:e}");
    }
}

#[test]
fn default_impact_init_is_linear_from_100_hz_to_18_khz() {
    let p = ImpactParams::init(&ImpactInit::default(), 44_100, 1);
    assert_eq!(p.modes(), 2048);
    let hz: Vec<f64> = p.frequencies.iter().map(|w| w / TAU).collect();
    assert!((hz[0] - 100.0).abs() < 1e-3);
    assert!((hz[2047] - 18_000.0).abs() < 1e-3);
    let step = (18_000.0 - 100.0) / 2047.0;
    for w in hz.windows(2) {
        assert!((w[1] - w[0] - step).abs() < 1e-3);
    }
    assert!(hz.iter().all(|&f| f < 22_050.0));
}

#[test]
fn renders_are_deterministic() {
    let (fm, theta) = random_fm(2);
    assert_eq!(fm.render(&theta).unwrap(), fm.render(&theta).unwrap());
    let (imp, theta) = random_impact(2);
    let again = ImpactSynth::new(imp.spec, imp.modes, imp.noise_seed).unwrap();
    assert_eq!(imp.render(&theta).unwrap(), again.render(&theta).unwrap());
}

#[test]
fn impact_sinusoid_sits_at_its_frequency() {
    // a single undamped mode through a delta reverb is a pure cosine
    let synth = ImpactSynth::with_options(
        RenderSpec::from_samples(1024, 8000).unwrap(),
        1,
        0,
        0.05,
        ReverbExcitation::Impulse,
    )
    .unwrap();
    let f = 1000.0;
    let theta = [1.0, 0.0, TAU * f, 1.0, 0.0, TAU * f];
    let x: Waveform = synth.render(&theta).unwrap();
    for n in 0..1024 {
        assert!((x.channel(0)[n] - (2.0 * PI * f * n as f64 / 8000.0).cos()).abs() < 1e-9);
    }
}
