mod common;

use audio_sds::prior::Latent;
use audio_sds::render::{FmParams, ImpactParams, Renderer};
use audio_sds::signal::{decode_wav, encode_wav, multiscale_spectrogram, multiscale_vjp, WavEncoding, Waveform};
use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectrogram_magnitudes_are_nonnegative(seed in 0u64..10_000, len in 64usize..400) {
        let w = random_wave(len, 8000, &mut rng(seed));
        let s = multiscale_spectrogram(&w, &small_spectrogram()).unwrap();
        prop_assert!(s.values().all(|v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn spectrogram_is_absolutely_homogeneous(seed in 0u64..10_000, c in -10.0f64..10.0) {
        let cfg = small_spectrogram();
        let w = random_wave(200, 8000, &mut rng(seed));
        let a = multiscale_spectrogram(&w.scaled(c), &cfg).unwrap();
        let b = multiscale_spectrogram(&w, &cfg).unwrap().scaled(c.abs());
        prop_assert!(a.sub(&b).squared_norm().sqrt() <= 1e-10 * (1.0 + b.squared_norm().sqrt()));
    }

    #[test]
    fn silence_is_a_spectral_fixed_point(len in 64usize..400, seed in 0u64..1000) {
        let cfg = small_spectrogram();
        let z = Waveform::from_channel_major(vec![0.0; 2 * len], 8000).unwrap();
        let s = multiscale_spectrogram(&z, &cfg).unwrap();
        prop_assert!(s.values().all(|v| v == 0.0));
        let y = random_stack(&s, &mut rng(seed));
        let g = multiscale_vjp(&z, &y, &cfg).unwrap();
        prop_assert!(g.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pull_back_is_linear_in_the_cotangent(seed in 0u64..10_000, a in -3.0f64..3.0) {
        let cfg = small_spectrogram();
        let mut r = rng(seed);
        let w = random_wave(150, 8000, &mut r);
        let s = multiscale_spectrogram(&w, &cfg).unwrap();
        let (y1, y2) = (random_stack(&s, &mut r), random_stack(&s, &mut r));
        let lhs = multiscale_vjp(&w, &y1.scaled(a).add(&y2), &cfg).unwrap();
        let rhs = multiscale_vjp(&w, &y1, &cfg).unwrap().scaled(a).add_scaled(&multiscale_vjp(&w, &y2, &cfg).unwrap(), 1.0);
        prop_assert!(lhs.sub(&rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
    }

    #[test]
    fn impact_render_is_linear_in_the_mode_amplitudes(seed in 0u64..1000, c in -4.0f64..4.0) {
        let (synth, theta) = random_impact(seed);
        let mut p = ImpactParams::from_flat(synth.modes, synth.noise_seed, &theta).unwrap();
        let x = synth.render(&theta).unwrap();
        p.amplitudes.iter_mut().for_each(|a| *a *= c);
        let y = synth.render(&p.to_flat()).unwrap();
        prop_assert!(y.sub(&x.scaled(c)).norm() <= 1e-10 * (1.0 + x.norm() * c.abs()));
    }

    #[test]
    fn fm_output_gain_is_a_log_offset(seed in 0u64..1000, g in -3.0f64..3.0) {
        let (synth, theta) = random_fm(seed);
        let v = synth.voices;
        let mut p = FmParams::from_flat(v, &theta).unwrap();
        let x = synth.render(&theta).unwrap();
        for j in 0..v {
            p.log_fm_matrix[v * v + j] += g;
        }
        let y = synth.render(&p.to_flat()).unwrap();
        prop_assert!(y.sub(&x.scaled(g.exp())).norm() <= 1e-9 * (1.0 + x.norm() * g.exp()));
    }

    #[test]
    fn pcm16_round_trip_is_within_one_step(seed in 0u64..10_000, len in 1usize..300) {
        let w = random_wave(len, 16_000, &mut rng(seed)).scaled(0.99);
        let back = decode_wav(&encode_wav(&w, WavEncoding::Pcm16)).unwrap();
        prop_assert_eq!(back.sample_rate(), 16_000);
        prop_assert!(back.as_slice().iter().zip(w.as_slice()).all(|(a, b)| (a - b).abs() <= 1.0 / 32767.0));
    }

    #[test]
    fn latent_combinations_are_pointwise(seed in 0u64..10_000, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let mut r = rng(seed);
        let x = Latent::new(3, 7, uniform(21, &mut r)).unwrap();
        let y = Latent::new(3, 7, uniform(21, &mut r)).unwrap();
        let z = x.lincomb(a, &y, b);
        for i in 0..21 {
            prop_assert!((z.values[i] - (a * x.values[i] + b * y.values[i])).abs() < 1e-12);
        }
        prop_assert!((x.dot(&y) - y.dot(&x)).abs() < 1e-12);
    }
}
