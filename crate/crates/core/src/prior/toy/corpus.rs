//! Deterministic synthetic signal classes for the toy prior.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{fft_plan, Waveform};

/// A class occupies the frequency band `[low_hz, high_hz]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    BandNoise,
    DecayingTones,
    Chirp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub sample_rate: u32,
    pub clip_len: usize,
    pub classes: Vec<ClassSpec>,
    /// Training items per class; indices at or past this are held out.
    pub items_per_class: usize,
    pub held_out_per_class: usize,
    /// Target RMS of each generated item.
    pub rms: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            clip_len: 4096,
            classes: vec![
                ClassSpec {
                    name: "low rumble".into(),
                    low_hz: 100.0,
                    high_hz: 700.0,
                },
                ClassSpec {
                    name: "high whistle".into(),
                    low_hz: 1200.0,
                    high_hz: 2000.0,
                },
            ],
            items_per_class: 48,
            held_out_per_class: 8,
            rms: 0.1,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Configuration("corpus needs at least one class".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for c in &self.classes {
            if !(c.low_hz > 0.0 && c.low_hz < c.high_hz && c.high_hz < nyquist) {
                return Err(Error::Configuration(format!(
                    "class {:?} band [{}, {}] Hz is not inside (0, {nyquist})",
                    c.name, c.low_hz, c.high_hz
                )));
            }
        }
        if self.clip_len < 16 || self.items_per_class == 0 || !(self.rms > 0.0) {
            return Err(Error::Configuration("corpus sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn item_kind(index: usize) -> ItemKind {
        match index % 3 {
            0 => ItemKind::BandNoise,
            1 => ItemKind::DecayingTones,
            _ => ItemKind::Chirp,
        }
    }

    /// Item `index` of `class`; identical on every call.
    pub fn item(&self, class: usize, index: usize) -> Result<Waveform> {
        let c = self
            .classes
            .get(class)
            .ok_or_else(|| Error::invalid(format!("class {class} outside the corpus")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64) << 20,
        );
        let sr = self.sample_rate as f64;
        let n = self.clip_len;
        let mut x = match Self::item_kind(index) {
            ItemKind::BandNoise => {
                let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let mut y = band_limit(&white, sr, c.low_hz, c.high_hz);
                // slow amplitude swell so items are not stationary
                let rate = rng.random_range(0.5..3.0);
                let phase = rng.random_range(0.0..TAU);
                for (i, v) in y.iter_mut().enumerate() {
                    *v *= 1.0 + 0.5 * (TAU * rate * i as f64 / sr + phase).sin();
                }
                y
            }
            ItemKind::DecayingTones => {
                let partials = rng.random_range(1..=3);
                let mut y = vec![0.0; n];
                for _ in 0..partials {
                    let f = rng.random_range(c.low_hz..c.high_hz);
                    let decay = rng.random_range(2.0..12.0);
                    let amp = rng.random_range(0.5..1.0);
                    let onset = rng.random_range(0..n / 2);
                    let phase = rng.random_range(0.0..TAU);
                    for (i, v) in y.iter_mut().enumerate().skip(onset) {
                        let t = (i - onset) as f64 / sr;
                        *v += amp * (-decay * t).exp() * (TAU * f * t + phase).sin();
                    }
                }
                y
            }
            ItemKind::Chirp => {
                let span = c.high_hz - c.low_hz;
                let f0 = rng.random_range(c.low_hz..c.low_hz + 0.5 * span);
                let f1 = rng.random_range(c.low_hz + 0.5 * span..c.high_hz);
                let (f0, f1) = if rng.random_bool(0.5) { (f0, f1) } else { (f1, f0) };
                let mut phase = rng.random_range(0.0..TAU);
                (0..n)
                    .map(|i| {
                        let u = i as f64 / n as f64;
                        let f = f0 + (f1 - f0) * u;
                        phase += TAU * f / sr;
                        // square-root sine fade in/out
                        let fade = (std::f64::consts::PI * u).sin().powf(0.5);
                        fade * phase.sin()
                    })
                    .collect()
            }
        };
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            let k = self.rms / rms;
            x.iter_mut().for_each(|v| *v *= k);
        }
        Waveform::from_mono(&x, self.sample_rate)
    }

    pub fn training_items(&self) -> Result<Vec<(usize, Waveform)>> {
        let mut out = Vec::new();
        for class in 0..self.classes.len() {
            for i in 0..self.items_per_class {
                out.push((class, self.item(class, i)?));
            }
        }
        Ok(out)
    }

    pub fn held_out_items(&self) -> Result<Vec<(usize, Waveform)>> {
        let mut out = Vec::new();
        for class in 0..self.classes.len() {
            for i in 0..self.held_out_per_class {
                out.push((class, self.item(class, self.items_per_class + i)?));
            }
        }
        Ok(out)
    }
}

/// FFT brick-wall band limit with short cosine tapers at the band edges.
pub fn band_limit(x: &[f64], sample_rate: f64, low_hz: f64, high_hz: f64) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_plan(n, false).process(&mut buf);
    let taper = 0.05 * (high_hz - low_hz);
    for (k, b) in buf.iter_mut().enumerate() {
        let kk = k.min(n - k);
        let f = kk as f64 * sample_rate / n as f64;
        *b *= band_gain(f, low_hz, high_hz, taper);
    }
    fft_plan(n, true).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Fraction of a mono signal's spectral energy inside `[low_hz, high_hz]`.
pub fn band_energy_fraction(x: &[f64], sample_rate: f64, low_hz: f64, high_hz: f64) -> f64 {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_plan(n, false).process(&mut buf);
    let (mut inside, mut total) = (0.0, 0.0);
    for (k, b) in buf.iter().enumerate() {
        let kk = k.min(n - k);
        let f = kk as f64 * sample_rate / n as f64;
        let e = b.norm_sqr();
        total += e;
        if f >= low_hz && f <= high_hz {
            inside += e;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

fn band_gain(f: f64, low: f64, high: f64, taper: f64) -> f64 {
    if f < low - taper || f > high + taper {
        0.0
    } else if f < low {
        0.5 + 0.5 * (std::f64::consts::PI * (low - f) / taper).cos()
    } else if f > high {
        0.5 + 0.5 * (std::f64::consts::PI * (f - high) / taper).cos()
    } else {
        1.0
    }
}
