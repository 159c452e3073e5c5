//! Phase-modulation ("FM") synthesizer with per-operator attack/decay
//! envelopes and its reverse-mode derivative.
//!
//! For operator `v` and sample `n` (time `t = n / sr` seconds):
//!
//! ```text
//! u_v[n] = sin(t * w_v + <A_v, u[n-1]>) * f_v(t)      u[-1] = 0
//! x[n]   = <A_out, u[n-1]>
//! ```
//!
//! `A = exp(log_fm_matrix)` has `V` modulation rows and one output row.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sigmoid, RenderSpec, Renderer};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Lowest and highest operator frequency reachable through `raw_ratios`.
pub const MIN_OPERATOR_HZ: f64 = 20.0;
pub const MAX_OPERATOR_HZ: f64 = 8000.0;

const ATTACK_EPS: f64 = 1e-5;

/// Attack/decay envelope, evaluated exactly as
/// `max(0, min(t/(a+1e-5), exp(a-t)/d^2) * (d - t - a)/d)`.
pub fn envelope(t: f64, attack: f64, decay: f64) -> f64 {
    envelope_with_partials(t, attack, decay).0
}

/// Envelope value with its partial derivatives in `(attack, decay)`.
/// On the clamped branch both partials are zero.
pub fn envelope_with_partials(t: f64, attack: f64, decay: f64) -> (f64, f64, f64) {
    let rise = t / (attack + ATTACK_EPS);
    let fall = (attack - t).exp() / (decay * decay);
    let (m, dm_da, dm_dd) = if rise <= fall {
        (rise, -t / ((attack + ATTACK_EPS) * (attack + ATTACK_EPS)), 0.0)
    } else {
        (fall, fall, -2.0 * fall / decay)
    };
    let q = (decay - t - attack) / decay;
    let p = m * q;
    if p <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let dq_da = -1.0 / decay;
    let dq_dd = (t + attack) / (decay * decay);
    (p, dm_da * q + m * dq_da, dm_dd * q + m * dq_dd)
}

/// Raw, pre-mapping synthesizer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmParams {
    pub voices: usize,
    /// `(voices + 1) x voices`, row-major; the last row is the output mix.
    pub log_fm_matrix: Vec<f64>,
    pub raw_ratios: Vec<f64>,
    pub raw_attacks: Vec<f64>,
    pub raw_decays: Vec<f64>,
}

/// Initialization knobs for [`FmParams::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmInit {
    pub voices: usize,
    /// log-gain of modulation entries
    pub modulation_log: f64,
    /// log-gain of the muted output entries (so exp is close to 0)
    pub muted_log: f64,
    pub noise_std: f64,
    pub attack_secs: f64,
    pub decay_secs: f64,
}

impl Default for FmInit {
    fn default() -> Self {
        Self {
            voices: 4,
            modulation_log: -4.0,
            muted_log: -10.0,
            noise_std: 0.01,
            attack_secs: 0.05,
            decay_secs: 0.6,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Operator frequency in rad/s for a raw ratio parameter.
pub fn operator_frequency(raw: f64) -> f64 {
    2.0 * PI * MIN_OPERATOR_HZ * (MAX_OPERATOR_HZ / MIN_OPERATOR_HZ).powf(sigmoid(raw))
}

/// Inverse of [`operator_frequency`] given a frequency in Hz.
pub fn raw_ratio_for_hz(hz: f64) -> f64 {
    let s = (hz / MIN_OPERATOR_HZ).ln() / (MAX_OPERATOR_HZ / MIN_OPERATOR_HZ).ln();
    logit(s.clamp(1e-9, 1.0 - 1e-9))
}

impl FmParams {
    pub fn zeros(voices: usize) -> Self {
        Self {
            voices,
            log_fm_matrix: vec![0.0; (voices + 1) * voices],
            raw_ratios: vec![0.0; voices],
            raw_attacks: vec![0.0; voices],
            raw_decays: vec![0.0; voices],
        }
    }

    /// Output row close to `[1, 0, ..., 0]` after exponentiation, so only the
    /// first operator is initially audible.
    pub fn init(cfg: &FmInit, seed: u64) -> Self {
        let v = cfg.voices;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
        let mut p = Self::zeros(v);
        for row in 0..v {
            for col in 0..v {
                p.log_fm_matrix[row * v + col] = cfg.modulation_log + noise.sample(&mut rng);
            }
        }
        for col in 0..v {
            let base = if col == 0 { 0.0 } else { cfg.muted_log };
            p.log_fm_matrix[v * v + col] = base + noise.sample(&mut rng);
        }
        let base_hz = [110.0, 220.0, 330.0, 440.0, 550.0, 660.0, 770.0, 880.0];
        for i in 0..v {
            p.raw_ratios[i] = raw_ratio_for_hz(base_hz[i % base_hz.len()]) + noise.sample(&mut rng);
            p.raw_attacks[i] = logit(cfg.attack_secs) + noise.sample(&mut rng);
            p.raw_decays[i] = logit(cfg.decay_secs) + noise.sample(&mut rng);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.voices;
        if v == 0 {
            return Err(Error::invalid("FM synthesizer needs at least one operator"));
        }
        if self.log_fm_matrix.len() != (v + 1) * v
            || self.raw_ratios.len() != v
            || self.raw_attacks.len() != v
            || self.raw_decays.len() != v
        {
            return Err(Error::invalid("FM parameter arrays do not match the operator count"));
        }
        Ok(())
    }

    pub fn fm_matrix(&self) -> Vec<f64> {
        self.log_fm_matrix.iter().map(|l| l.exp()).collect()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.raw_ratios.iter().map(|&r| operator_frequency(r)).collect()
    }

    pub fn attacks(&self) -> Vec<f64> {
        self.raw_attacks.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn decays(&self) -> Vec<f64> {
        self.raw_decays.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn num_params(voices: usize) -> usize {
        (voices + 1) * voices + 3 * voices
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.log_fm_matrix.clone();
        out.extend(&self.raw_ratios);
        out.extend(&self.raw_attacks);
        out.extend(&self.raw_decays);
        out
    }

    pub fn from_flat(voices: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::num_params(voices) {
            return Err(Error::invalid(format!(
                "expected {} FM parameters, got {}",
                Self::num_params(voices),
                flat.len()
            )));
        }
        let m = (voices + 1) * voices;
        Ok(Self {
            voices,
            log_fm_matrix: flat[..m].to_vec(),
            raw_ratios: flat[m..m + voices].to_vec(),
            raw_attacks: flat[m + voices..m + 2 * voices].to_vec(),
            raw_decays: flat[m + 2 * voices..].to_vec(),
        })
    }
}

/// Forward pass state kept for the reverse sweep.
struct FmTrace {
    /// `[n][v]`
    phase: Vec<f64>,
    state: Vec<f64>,
    env: Vec<f64>,
    mono: Vec<f64>,
}

fn run_forward(p: &FmParams, spec: &RenderSpec) -> Result<FmTrace> {
    p.validate()?;
    let v = p.voices;
    let len = spec.num_samples()?;
    let sr = spec.sample_rate as f64;
    let a = p.fm_matrix();
    if let Some(i) = a.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericOverflow {
            sample: 0,
            context: format!("FM matrix entry {i} overflows after exponentiation"),
        });
    }
    let omega = p.frequencies();
    let attacks = p.attacks();
    let decays = p.decays();
    let out_row = &a[v * v..];
    let mut trace = FmTrace {
        phase: vec![0.0; len * v],
        state: vec![0.0; len * v],
        env: vec![0.0; len * v],
        mono: vec![0.0; len],
    };
    let mut prev = vec![0.0; v];
    for n in 0..len {
        let t = n as f64 / sr;
        let x: f64 = out_row.iter().zip(&prev).map(|(w, u)| w * u).sum();
        if !x.is_finite() {
            return Err(Error::NumericOverflow {
                sample: n,
                context: "FM output".into(),
            });
        }
        trace.mono[n] = x;
        for i in 0..v {
            let row = &a[i * v..(i + 1) * v];
            let phi = t * omega[i] + row.iter().zip(&prev).map(|(w, u)| w * u).sum::<f64>();
            let f = envelope(t, attacks[i], decays[i]);
            let u = phi.sin() * f;
            if !u.is_finite() {
                return Err(Error::NumericOverflow {
                    sample: n,
                    context: format!("operator {i} state"),
                });
            }
            trace.phase[n * v + i] = phi;
            trace.env[n * v + i] = f;
            trace.state[n * v + i] = u;
        }
        prev.copy_from_slice(&trace.state[n * v..(n + 1) * v]);
    }
    Ok(trace)
}

pub fn fm_render(p: &FmParams, spec: &RenderSpec) -> Result<Waveform> {
    let trace = run_forward(p, spec)?;
    Waveform::from_mono(&trace.mono, spec.sample_rate)
}

/// Reverse-mode derivative of [`fm_render`] with respect to the raw
/// parameters, through `exp` and `sigmoid`.
pub fn fm_vjp(p: &FmParams, spec: &RenderSpec, cotangent: &Waveform) -> Result<FmParams> {
    let trace = run_forward(p, spec)?;
    let len = trace.mono.len();
    if cotangent.len() != len {
        return Err(Error::invalid(format!(
            "cotangent has {} samples, render has {len}",
            cotangent.len()
        )));
    }
    let y = cotangent.channel_sum();
    let v = p.voices;
    let sr = spec.sample_rate as f64;
    let a = p.fm_matrix();
    let attacks = p.attacks();
    let decays = p.decays();

    let mut a_bar = vec![0.0; a.len()];
    let mut omega_bar = vec![0.0; v];
    let mut attack_bar = vec![0.0; v];
    let mut decay_bar = vec![0.0; v];
    // adjoint of u[n] while processing sample n
    let mut u_bar = vec![0.0; v];
    let mut u_bar_prev = vec![0.0; v];
    let mut phi_bar = vec![0.0; v];
    let zeros = vec![0.0; v];

    for n in (0..len).rev() {
        let t = n as f64 / sr;
        for i in 0..v {
            let k = n * v + i;
            let phi = trace.phase[k];
            phi_bar[i] = u_bar[i] * phi.cos() * trace.env[k];
            let env_bar = u_bar[i] * phi.sin();
            if env_bar != 0.0 {
                let (_, d_att, d_dec) = envelope_with_partials(t, attacks[i], decays[i]);
                attack_bar[i] += env_bar * d_att;
                decay_bar[i] += env_bar * d_dec;
            }
            omega_bar[i] += phi_bar[i] * t;
        }
        let prev = if n == 0 {
            &zeros[..]
        } else {
            &trace.state[(n - 1) * v..n * v]
        };
        u_bar_prev.fill(0.0);
        for i in 0..v {
            if phi_bar[i] == 0.0 {
                continue;
            }
            for j in 0..v {
                a_bar[i * v + j] += phi_bar[i] * prev[j];
                u_bar_prev[j] += phi_bar[i] * a[i * v + j];
            }
        }
        for j in 0..v {
            a_bar[v * v + j] += y[n] * prev[j];
            u_bar_prev[j] += y[n] * a[v * v + j];
        }
        std::mem::swap(&mut u_bar, &mut u_bar_prev);
    }

    let log_fm_matrix = a_bar.iter().zip(&a).map(|(g, x)| g * x).collect();
    let span = (MAX_OPERATOR_HZ / MIN_OPERATOR_HZ).ln();
    let raw_ratios = (0..v)
        .map(|i| {
            let s = sigmoid(p.raw_ratios[i]);
            omega_bar[i] * operator_frequency(p.raw_ratios[i]) * span * s * (1.0 - s)
        })
        .collect();
    let raw_attacks = (0..v)
        .map(|i| attack_bar[i] * attacks[i] * (1.0 - attacks[i]))
        .collect();
    let raw_decays = (0..v)
        .map(|i| decay_bar[i] * decays[i] * (1.0 - decays[i]))
        .collect();
    Ok(FmParams {
        voices: v,
        log_fm_matrix,
        raw_ratios,
        raw_attacks,
        raw_decays,
    })
}

/// [`Renderer`] over flat FM parameter vectors.
#[derive(Debug, Clone)]
pub struct FmSynth {
    pub voices: usize,
    pub spec: RenderSpec,
}

impl Renderer for FmSynth {
    fn num_params(&self) -> usize {
        FmParams::num_params(self.voices)
    }

    fn render(&self, theta: &[f64]) -> Result<Waveform> {
        fm_render(&FmParams::from_flat(self.voices, theta)?, &self.spec)
    }

    fn vjp(&self, theta: &[f64], cotangent: &Waveform) -> Result<Vec<f64>> {
        let p = FmParams::from_flat(self.voices, theta)?;
        Ok(fm_vjp(&p, &self.spec, cotangent)?.to_flat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_edge_cases() {
        assert_eq!(envelope(0.0, 0.3, 0.7), 0.0);
        // past the decay window the linear factor is negative
        for t in [0.6, 0.8, 2.0] {
            assert_eq!(envelope(t, 0.1, 0.5), 0.0);
        }
    }

    #[test]
    fn envelope_matches_direct_formula() {
        let (a, d, t): (f64, f64, f64) = (0.1, 0.5, 0.05);
        let rise = t / (a + 1e-5);
        let fall = (a - t).exp() / (d * d);
        let expected = (rise.min(fall) * (d - t - a) / d).max(0.0);
        assert_eq!(envelope(t, a, d), expected);
        assert!((expected - 0.349_965_003_499_65).abs() < 1e-12);
    }

    #[test]
    fn envelope_partials_match_finite_differences() {
        for &(t, a, d) in &[(0.05, 0.1, 0.5), (0.3, 0.2, 0.9), (0.02, 0.01, 0.4), (0.5, 0.05, 0.9)] {
            let (_, da, dd) = envelope_with_partials(t, a, d);
            let h = 1e-7;
            let fa = (envelope(t, a + h, d) - envelope(t, a - h, d)) / (2.0 * h);
            let fd = (envelope(t, a, d + h) - envelope(t, a, d - h)) / (2.0 * h);
            assert!((fa - da).abs() <= 1e-5 * fa.abs().max(1.0), "{fa} vs {da}");
            assert!((fd - dd).abs() <= 1e-5 * fd.abs().max(1.0), "{fd} vs {dd}");
        }
    }

    #[test]
    fn frequency_mapping_round_trips() {
        for hz in [20.5, 110.0, 1000.0, 7900.0] {
            let w = operator_frequency(raw_ratio_for_hz(hz));
            assert!((w / (2.0 * PI) - hz).abs() < 1e-6 * hz);
        }
    }

    #[test]
    fn flat_round_trip_and_validation() {
        let p = FmParams::init(&FmInit::default(), 3);
        assert_eq!(FmParams::from_flat(4, &p.to_flat()).unwrap(), p);
        assert!(FmParams::from_flat(4, &[0.0; 3]).is_err());
        let mut bad = p.clone();
        bad.raw_ratios.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_output_row_is_nearly_one_hot() {
        let p = FmParams::init(&FmInit::default(), 1);
        let a = p.fm_matrix();
        let out = &a[16..20];
        assert!((out[0] - 1.0).abs() < 0.05);
        assert!(out[1..].iter().all(|&x| x < 1e-4));
    }

    #[test]
    fn overflowing_matrix_is_reported() {
        let mut p = FmParams::init(&FmInit::default(), 1);
        p.log_fm_matrix[0] = 1e4;
        let spec = RenderSpec::new(0.01, 8000).unwrap();
        assert!(matches!(fm_render(&p, &spec), Err(Error::NumericOverflow { .. })));
    }
}
