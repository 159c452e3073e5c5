//! Differentiable audio renderers `x = g(theta)`.

mod checkpoint;
pub mod dsp;
pub mod fm;
pub mod impact;

pub use checkpoint::{load_params, save_params, RendererParams};
pub use dsp::{bandpass, fft_convolve};
pub use fm::{envelope, fm_render, fm_vjp, raw_ratio_for_hz, FmInit, FmParams, FmSynth};
pub use impact::{
    impact_render, impact_vjp, FrequencySpacing, ImpactInit, ImpactParams, ImpactSynth,
    ReverbExcitation,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Clip length and rate of a render.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub duration: f64,
    pub sample_rate: u32,
}

impl RenderSpec {
    pub fn new(duration: f64, sample_rate: u32) -> Result<Self> {
        let spec = Self {
            duration,
            sample_rate,
        };
        spec.num_samples()?;
        Ok(spec)
    }

    pub fn from_samples(samples: usize, sample_rate: u32) -> Result<Self> {
        Self::new(samples as f64 / sample_rate as f64, sample_rate)
    }

    /// `duration * sample_rate`, which must be a positive integer.
    pub fn num_samples(&self) -> Result<usize> {
        if !(self.duration > 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid("render duration and sample rate must be positive"));
        }
        let exact = self.duration * self.sample_rate as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-6 * exact.max(1.0) || rounded < 1.0 {
            return Err(Error::invalid(format!(
                "duration {} s at {} Hz is not a whole number of samples",
                self.duration, self.sample_rate
            )));
        }
        Ok(rounded as usize)
    }
}

/// A differentiable renderer over a flat parameter vector.
pub trait Renderer {
    fn num_params(&self) -> usize;

    fn render(&self, theta: &[f64]) -> Result<Waveform>;

    /// `cotangent^T d render / d theta`.
    fn vjp(&self, theta: &[f64], cotangent: &Waveform) -> Result<Vec<f64>>;

    /// Projects `theta` back onto the feasible set after an optimizer step.
    fn project(&self, _theta: &mut [f64]) {}
}

impl<R: Renderer + ?Sized> Renderer for &R {
    fn num_params(&self) -> usize {
        (**self).num_params()
    }
    fn render(&self, theta: &[f64]) -> Result<Waveform> {
        (**self).render(theta)
    }
    fn vjp(&self, theta: &[f64], cotangent: &Waveform) -> Result<Vec<f64>> {
        (**self).vjp(theta, cotangent)
    }
    fn project(&self, theta: &mut [f64]) {
        (**self).project(theta)
    }
}

/// `g(theta) = theta`: parameters are the stereo samples, channel-major.
#[derive(Debug, Clone, Copy)]
pub struct IdentityRenderer {
    pub len: usize,
    pub sample_rate: u32,
}

impl Renderer for IdentityRenderer {
    fn num_params(&self) -> usize {
        2 * self.len
    }

    fn render(&self, theta: &[f64]) -> Result<Waveform> {
        if theta.len() != 2 * self.len {
            return Err(Error::invalid("identity renderer parameter length mismatch"));
        }
        Waveform::from_channel_major(theta.to_vec(), self.sample_rate)
    }

    fn vjp(&self, _theta: &[f64], cotangent: &Waveform) -> Result<Vec<f64>> {
        if cotangent.len() != self.len {
            return Err(Error::invalid("identity renderer cotangent length mismatch"));
        }
        Ok(cotangent.as_slice().to_vec())
    }
}
