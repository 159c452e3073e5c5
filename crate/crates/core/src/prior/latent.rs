use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};

/// Diffusion-space tensor, `channels x frames`, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub channels: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Latent {
    pub fn new(channels: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || frames == 0 {
            return Err(Error::invalid("latent must have at least one channel and frame"));
        }
        if values.len() != channels * frames {
            return Err(Error::invalid(format!(
                "latent {channels}x{frames} needs {} values, got {}",
                channels * frames,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                sample: values.iter().position(|v| !v.is_finite()).unwrap_or(0),
                context: "non-finite latent value".into(),
            });
        }
        Ok(Self {
            channels,
            frames,
            values,
        })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        Self {
            channels,
            frames,
            values: vec![0.0; channels * frames],
        }
    }

    pub fn zeros_like(other: &Latent) -> Self {
        Self::zeros(other.channels, other.frames)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.frames)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.frames..(c + 1) * self.frames]
    }

    pub(crate) fn check_shape(&self, other: &Latent, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: latent shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Latent, b: f64) -> Latent {
        Latent {
            channels: self.channels,
            frames: self.frames,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Latent) -> Latent {
        self.lincomb(1.0, other, -1.0)
    }

    pub fn scaled(&self, k: f64) -> Latent {
        Latent {
            values: self.values.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    pub fn dot(&self, other: &Latent) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn mean_square(&self) -> f64 {
        self.dot(self) / self.len() as f64
    }
}

/// Text prompt (remote models), class index (toy prior), or unconditional.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Null,
    Class(usize),
    Prompt(String),
}

impl Conditioning {
    pub fn prompt(text: impl Into<String>) -> Self {
        Conditioning::Prompt(text.into())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Conditioning::Null)
    }
}

/// `z = alpha(t) h + sigma(t) eps`.
pub fn add_noise(h: &Latent, t: f64, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    h.check_shape(eps, "add_noise")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
    }
    let (a, s) = schedule.scales(t);
    Ok(h.lincomb(a, eps, s))
}

/// Classifier-free guidance with `s = 1 + tau`:
/// `uncond + s (cond - uncond)`, i.e. `(1 + tau) cond - tau uncond`.
pub fn cfg_combine(eps_cond: &Latent, eps_uncond: &Latent, guidance_scale: f64) -> Result<Latent> {
    eps_cond.check_shape(eps_uncond, "cfg_combine")?;
    if !(guidance_scale >= 0.0) {
        return Err(Error::invalid("guidance scale must be nonnegative"));
    }
    Ok(eps_uncond.lincomb(1.0 - guidance_scale, eps_cond, guidance_scale))
}
