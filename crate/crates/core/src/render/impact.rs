//! Modal impact model: a bank of damped sinusoids (the struck object)
//! convolved with a sum of decaying bandpassed-noise bands (the room).
//! The impact excitation itself is a unit delta, so it drops out of the
//! convolution.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dsp::{convolve_adjoint, fft_convolve_len, NoiseBank};
use super::{RenderSpec, Renderer};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Default relative bandwidth of each reverb band.
pub const DEFAULT_REL_BANDWIDTH: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactParams {
    pub amplitudes: Vec<f64>,
    /// 1/s
    pub dampings: Vec<f64>,
    /// rad/s
    pub frequencies: Vec<f64>,
    pub reverb_amplitudes: Vec<f64>,
    pub reverb_dampings: Vec<f64>,
    /// rad/s
    pub reverb_centres: Vec<f64>,
    pub noise_seed: u64,
}

/// What the reverb bands filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverbExcitation {
    /// Seeded white noise through Gaussian bandpass filters.
    Noise,
    /// Unit delta with the bandpass replaced by identity; every band is
    /// then `a * exp(-d t) * delta`. Used for closed-form checks.
    Impulse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencySpacing {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactInit {
    pub modes: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub spacing: FrequencySpacing,
    pub perturbation_std: f64,
    pub damping: f64,
    pub reverb_damping: f64,
}

impl Default for ImpactInit {
    fn default() -> Self {
        Self {
            modes: 2048,
            low_hz: 100.0,
            high_hz: 18_000.0,
            spacing: FrequencySpacing::Linear,
            perturbation_std: 1e-4,
            damping: 6.0,
            reverb_damping: 4.0,
        }
    }
}

impl ImpactParams {
    pub fn modes(&self) -> usize {
        self.amplitudes.len()
    }

    /// Frequencies spread over `[low_hz, high_hz]` (capped just below
    /// Nyquist) with a small Gaussian perturbation; equal amplitudes.
    pub fn init(cfg: &ImpactInit, sample_rate: u32, seed: u64) -> Self {
        let n = cfg.modes.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let high = cfg.high_hz.min(0.45 * sample_rate as f64);
        let low = cfg.low_hz.min(high);
        let jitter = Normal::new(0.0, cfg.perturbation_std.max(0.0)).expect("finite std");
        let mut hz = |i: usize| {
            let s = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let base = match cfg.spacing {
                FrequencySpacing::Linear => low + s * (high - low),
                FrequencySpacing::Log => low * (high / low).powf(s),
            };
            base + jitter.sample(&mut rng)
        };
        let frequencies: Vec<f64> = (0..n).map(|i| 2.0 * PI * hz(i)).collect();
        let reverb_centres: Vec<f64> = (0..n).map(|i| 2.0 * PI * hz(i)).collect();
        let amp = 1.0 / n as f64;
        Self {
            amplitudes: vec![amp; n],
            dampings: vec![cfg.damping; n],
            frequencies,
            reverb_amplitudes: vec![1.0 / (n as f64).sqrt(); n],
            reverb_dampings: vec![cfg.reverb_damping; n],
            reverb_centres,
            noise_seed: seed,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let n = self.modes();
        if n == 0 {
            return Err(Error::invalid("impact model needs at least one mode"));
        }
        let lens = [
            self.dampings.len(),
            self.frequencies.len(),
            self.reverb_amplitudes.len(),
            self.reverb_dampings.len(),
            self.reverb_centres.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::invalid("impact parameter arrays differ in length"));
        }
        if self.dampings.iter().chain(&self.reverb_dampings).any(|&d| !(d >= 0.0)) {
            return Err(Error::invalid("dampings must be nonnegative"));
        }
        let nyquist = PI * sample_rate as f64;
        if self
            .frequencies
            .iter()
            .chain(&self.reverb_centres)
            .any(|&f| !(f > 0.0 && f < nyquist))
        {
            return Err(Error::invalid(format!(
                "frequencies must lie in (0, {nyquist}) rad/s"
            )));
        }
        Ok(())
    }

    pub fn num_params(modes: usize) -> usize {
        6 * modes
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [
            &self.amplitudes,
            &self.dampings,
            &self.frequencies,
            &self.reverb_amplitudes,
            &self.reverb_dampings,
            &self.reverb_centres,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect()
    }

    pub fn from_flat(modes: usize, noise_seed: u64, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::num_params(modes) {
            return Err(Error::invalid(format!(
                "expected {} impact parameters, got {}",
                Self::num_params(modes),
                flat.len()
            )));
        }
        let part = |i: usize| flat[i * modes..(i + 1) * modes].to_vec();
        Ok(Self {
            amplitudes: part(0),
            dampings: part(1),
            frequencies: part(2),
            reverb_amplitudes: part(3),
            reverb_dampings: part(4),
            reverb_centres: part(5),
            noise_seed,
        })
    }
}

/// Seeded white noise `W` of `len` samples.
pub fn reverb_noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Impact renderer with its noise realization fixed at construction.
#[derive(Debug, Clone)]
pub struct ImpactSynth {
    pub spec: RenderSpec,
    pub modes: usize,
    pub noise_seed: u64,
    pub rel_bandwidth: f64,
    pub excitation: ReverbExcitation,
    bank: NoiseBank,
}

struct ImpactTrace {
    object: Vec<f64>,
    reverb: Vec<f64>,
    /// per-band filtered noise, only in `Noise` mode
    bands: Vec<Vec<f64>>,
    mono: Vec<f64>,
}

impl ImpactSynth {
    pub fn new(spec: RenderSpec, modes: usize, noise_seed: u64) -> Result<Self> {
        Self::with_options(spec, modes, noise_seed, DEFAULT_REL_BANDWIDTH, ReverbExcitation::Noise)
    }

    pub fn with_options(
        spec: RenderSpec,
        modes: usize,
        noise_seed: u64,
        rel_bandwidth: f64,
        excitation: ReverbExcitation,
    ) -> Result<Self> {
        let len = spec.num_samples()?;
        if !(rel_bandwidth > 0.0) {
            return Err(Error::invalid("relative bandwidth must be positive"));
        }
        let noise = match excitation {
            ReverbExcitation::Noise => reverb_noise(noise_seed, len),
            ReverbExcitation::Impulse => {
                let mut d = vec![0.0; len];
                d[0] = 1.0;
                d
            }
        };
        Ok(Self {
            spec,
            modes,
            noise_seed,
            rel_bandwidth,
            excitation,
            bank: NoiseBank::new(&noise, spec.sample_rate),
        })
    }

    fn times(&self) -> Vec<f64> {
        let sr = self.spec.sample_rate as f64;
        (0..self.bank.len()).map(|i| i as f64 / sr).collect()
    }

    fn trace(&self, p: &ImpactParams) -> Result<ImpactTrace> {
        p.validate(self.spec.sample_rate)?;
        if p.modes() != self.modes {
            return Err(Error::invalid("mode count does not match the renderer"));
        }
        let len = self.bank.len();
        let times = self.times();
        let mut object = vec![0.0; len];
        for n in 0..p.modes() {
            let (a, d, w) = (p.amplitudes[n], p.dampings[n], p.frequencies[n]);
            if a == 0.0 {
                continue;
            }
            for (o, &t) in object.iter_mut().zip(&times) {
                *o += a * (-d * t).exp() * (w * t).cos();
            }
        }
        let mut reverb = vec![0.0; len];
        let mut bands = Vec::new();
        match self.excitation {
            ReverbExcitation::Impulse => {
                reverb[0] = p.reverb_amplitudes.iter().sum();
            }
            ReverbExcitation::Noise => {
                bands.reserve(p.modes());
                for n in 0..p.modes() {
                    let band = self.bank.filter(p.reverb_centres[n], self.rel_bandwidth)?;
                    let (a, d) = (p.reverb_amplitudes[n], p.reverb_dampings[n]);
                    for ((r, &t), b) in reverb.iter_mut().zip(&times).zip(&band) {
                        *r += a * (-d * t).exp() * b;
                    }
                    bands.push(band);
                }
            }
        }
        let mono = fft_convolve_len(&object, &reverb, len);
        if let Some(i) = mono.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                sample: i,
                context: "impact render".into(),
            });
        }
        Ok(ImpactTrace {
            object,
            reverb,
            bands,
            mono,
        })
    }

    /// Object and reverb impulses before convolution.
    pub fn impulses(&self, p: &ImpactParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.trace(p)?;
        Ok((t.object, t.reverb))
    }

    pub fn render_params(&self, p: &ImpactParams) -> Result<Waveform> {
        let t = self.trace(p)?;
        Waveform::from_mono(&t.mono, self.spec.sample_rate)
    }

    /// Reverse-mode derivative with the noise realization held fixed.
    pub fn vjp_params(&self, p: &ImpactParams, cotangent: &Waveform) -> Result<ImpactParams> {
        let tr = self.trace(p)?;
        let len = tr.mono.len();
        if cotangent.len() != len {
            return Err(Error::invalid(format!(
                "cotangent has {} samples, render has {len}",
                cotangent.len()
            )));
        }
        let y = cotangent.channel_sum();
        let object_bar = convolve_adjoint(&tr.reverb, &y, len);
        let reverb_bar = convolve_adjoint(&tr.object, &y, len);
        let times = self.times();
        let n_modes = p.modes();
        let mut g = ImpactParams {
            amplitudes: vec![0.0; n_modes],
            dampings: vec![0.0; n_modes],
            frequencies: vec![0.0; n_modes],
            reverb_amplitudes: vec![0.0; n_modes],
            reverb_dampings: vec![0.0; n_modes],
            reverb_centres: vec![0.0; n_modes],
            noise_seed: p.noise_seed,
        };
        for n in 0..n_modes {
            let (a, d, w) = (p.amplitudes[n], p.dampings[n], p.frequencies[n]);
            let (mut ga, mut gd, mut gw) = (0.0, 0.0, 0.0);
            for (&ob, &t) in object_bar.iter().zip(&times) {
                let e = (-d * t).exp();
                let (s, c) = (w * t).sin_cos();
                ga += ob * e * c;
                gd -= ob * a * t * e * c;
                gw -= ob * a * e * t * s;
            }
            g.amplitudes[n] = ga;
            g.dampings[n] = gd;
            g.frequencies[n] = gw;
        }
        match self.excitation {
            ReverbExcitation::Impulse => {
                for n in 0..n_modes {
                    g.reverb_amplitudes[n] = reverb_bar[0];
                }
            }
            ReverbExcitation::Noise => {
                let mut weighted = vec![0.0; len];
                for n in 0..n_modes {
                    let (a, d) = (p.reverb_amplitudes[n], p.reverb_dampings[n]);
                    let band = &tr.bands[n];
                    let (mut ga, mut gd) = (0.0, 0.0);
                    for i in 0..len {
                        let t = times[i];
                        let e = (-d * t).exp();
                        ga += reverb_bar[i] * e * band[i];
                        gd -= reverb_bar[i] * a * t * e * band[i];
                        weighted[i] = reverb_bar[i] * a * e;
                    }
                    g.reverb_amplitudes[n] = ga;
                    g.reverb_dampings[n] = gd;
                    g.reverb_centres[n] =
                        self.bank
                            .centre_sensitivity(&weighted, p.reverb_centres[n], self.rel_bandwidth);
                }
            }
        }
        Ok(g)
    }
}

impl Renderer for ImpactSynth {
    fn num_params(&self) -> usize {
        ImpactParams::num_params(self.modes)
    }

    fn render(&self, theta: &[f64]) -> Result<Waveform> {
        self.render_params(&ImpactParams::from_flat(self.modes, self.noise_seed, theta)?)
    }

    fn vjp(&self, theta: &[f64], cotangent: &Waveform) -> Result<Vec<f64>> {
        let p = ImpactParams::from_flat(self.modes, self.noise_seed, theta)?;
        Ok(self.vjp_params(&p, cotangent)?.to_flat())
    }

    fn project(&self, theta: &mut [f64]) {
        let m = self.modes;
        let nyquist = PI * self.spec.sample_rate as f64;
        for block in [1, 4] {
            for d in &mut theta[block * m..(block + 1) * m] {
                *d = d.max(0.0);
            }
        }
        for block in [2, 5] {
            for f in &mut theta[block * m..(block + 1) * m] {
                *f = f.clamp(1.0, nyquist * 0.999);
            }
        }
    }
}

pub fn impact_render(p: &ImpactParams, spec: &RenderSpec) -> Result<Waveform> {
    ImpactSynth::new(*spec, p.modes(), p.noise_seed)?.render_params(p)
}

pub fn impact_vjp(p: &ImpactParams, spec: &RenderSpec, cotangent: &Waveform) -> Result<ImpactParams> {
    ImpactSynth::new(*spec, p.modes(), p.noise_seed)?.vjp_params(p, cotangent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode(freq_hz: f64) -> ImpactParams {
        ImpactParams {
            amplitudes: vec![1.0],
            dampings: vec![0.0],
            frequencies: vec![2.0 * PI * freq_hz],
            reverb_amplitudes: vec![1.0],
            reverb_dampings: vec![0.0],
            reverb_centres: vec![2.0 * PI * 1000.0],
            noise_seed: 0,
        }
    }

    #[test]
    fn single_mode_with_delta_reverb_is_a_cosine() {
        let spec = RenderSpec::from_samples(256, 8000).unwrap();
        let synth = ImpactSynth::with_options(spec, 1, 0, 0.05, ReverbExcitation::Impulse).unwrap();
        let w = synth.render_params(&single_mode(440.0)).unwrap();
        for (i, &x) in w.channel(0).iter().enumerate() {
            let t = i as f64 / 8000.0;
            assert!((x - (2.0 * PI * 440.0 * t).cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_amplitudes_render_silence() {
        let spec = RenderSpec::from_samples(128, 8000).unwrap();
        let mut p = ImpactParams::init(&ImpactInit { modes: 4, ..Default::default() }, 8000, 1);
        p.amplitudes.fill(0.0);
        let w = impact_render(&p, &spec).unwrap();
        assert!(w.as_slice().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn init_spans_band_below_nyquist() {
        let p = ImpactParams::init(&ImpactInit::default(), 44_100, 2);
        assert_eq!(p.modes(), 2048);
        let lo = p.frequencies[0] / (2.0 * PI);
        let hi = p.frequencies[2047] / (2.0 * PI);
        assert!((lo - 100.0).abs() < 1e-3);
        assert!((hi - 18_000.0).abs() < 1e-3);
        // linear spacing
        let step = (p.frequencies[1] - p.frequencies[0]) / (2.0 * PI);
        assert!((step - 17_900.0 / 2047.0).abs() < 1e-3);
        p.validate(44_100).unwrap();
        // capped for low sample rates
        let q = ImpactParams::init(&ImpactInit { modes: 8, ..Default::default() }, 8000, 2);
        q.validate(8000).unwrap();
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut p = single_mode(100.0);
        p.dampings[0] = -1.0;
        assert!(p.validate(8000).is_err());
        let mut p = single_mode(5000.0);
        assert!(p.validate(8000).is_err());
        p.frequencies.push(1.0);
        assert!(p.validate(44_100).is_err());
    }

    #[test]
    fn noise_is_deterministic() {
        assert_eq!(reverb_noise(5, 64), reverb_noise(5, 64));
        assert_ne!(reverb_noise(5, 64), reverb_noise(6, 64));
    }
}
