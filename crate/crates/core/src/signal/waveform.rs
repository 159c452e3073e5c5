use crate::error::{Error, Result};

/// Default sample rate of the bridged latent-diffusion model.
pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Stereo time-domain buffer. Mono material is duplicated into both channels
/// at construction so every downstream stage sees exactly two channels.
///
/// The same type carries waveform-shaped gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    // channel-major: [left..., right...]
    samples: Vec<f64>,
    len: usize,
    sample_rate: u32,
}

impl Waveform {
    pub fn stereo(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::invalid(format!(
                "channel lengths differ: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        let len = left.len();
        let mut samples = left;
        samples.extend(right);
        Self::from_interleaved_channels(samples, len, sample_rate)
    }

    pub fn from_mono(mono: &[f64], sample_rate: u32) -> Result<Self> {
        let mut samples = Vec::with_capacity(mono.len() * 2);
        samples.extend_from_slice(mono);
        samples.extend_from_slice(mono);
        Self::from_interleaved_channels(samples, mono.len(), sample_rate)
    }

    /// Builds from a channel-major `2 × len` buffer.
    pub fn from_channel_major(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if !samples.len().is_multiple_of(2) {
            return Err(Error::invalid("channel-major buffer has odd length"));
        }
        let len = samples.len() / 2;
        Self::from_interleaved_channels(samples, len, sample_rate)
    }

    fn from_interleaved_channels(samples: Vec<f64>, len: usize, sample_rate: u32) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("waveform must have at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NumericOverflow {
                sample: i % len,
                context: format!("non-finite sample in channel {}", i / len),
            });
        }
        Ok(Self {
            samples,
            len,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::from_channel_major(vec![0.0; 2 * len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let len = self.len;
        &mut self.samples[c * len..(c + 1) * len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.samples
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.samples
    }

    /// Sum of the two channels; the adjoint of mono duplication.
    pub fn channel_sum(&self) -> Vec<f64> {
        self.channel(0)
            .iter()
            .zip(self.channel(1))
            .map(|(l, r)| l + r)
            .collect()
    }

    pub fn mono_mixdown(&self) -> Vec<f64> {
        self.channel_sum().into_iter().map(|s| 0.5 * s).collect()
    }

    pub fn same_shape(&self, other: &Waveform) -> bool {
        self.len == other.len && self.sample_rate == other.sample_rate
    }

    pub(crate) fn check_same_shape(&self, other: &Waveform, what: &str) -> Result<()> {
        if self.len != other.len {
            return Err(Error::invalid(format!(
                "{what}: length mismatch ({} vs {})",
                self.len, other.len
            )));
        }
        if self.sample_rate != other.sample_rate {
            return Err(Error::invalid(format!(
                "{what}: sample-rate mismatch ({} vs {})",
                self.sample_rate, other.sample_rate
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Waveform) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn energy(&self) -> f64 {
        self.dot(self)
    }

    pub fn scaled(&self, k: f64) -> Waveform {
        self.map(|s| s * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|&s| f(s)).collect(),
            len: self.len,
            sample_rate: self.sample_rate,
        }
    }

    /// Elementwise `self + k * other`. Shapes must already agree.
    pub fn add_scaled(&self, other: &Waveform, k: f64) -> Waveform {
        debug_assert!(self.same_shape(other));
        Waveform {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + k * b)
                .collect(),
            len: self.len,
            sample_rate: self.sample_rate,
        }
    }

    pub fn add(&self, other: &Waveform) -> Waveform {
        self.add_scaled(other, 1.0)
    }

    pub fn sub(&self, other: &Waveform) -> Waveform {
        self.add_scaled(other, -1.0)
    }

    pub fn add_assign(&mut self, other: &Waveform) {
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            *a += b;
        }
    }

    /// Samples `[start, end)` of both channels.
    pub fn window(&self, start: usize, end: usize) -> Result<Waveform> {
        if start >= end || end > self.len {
            return Err(Error::invalid(format!(
                "window [{start}, {end}) outside clip of {} samples",
                self.len
            )));
        }
        Waveform::stereo(
            self.channel(0)[start..end].to_vec(),
            self.channel(1)[start..end].to_vec(),
            self.sample_rate,
        )
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}
