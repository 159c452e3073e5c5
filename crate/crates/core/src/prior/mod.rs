//! Pluggable latent diffusion priors.
//!
//! A backend supplies the codec (`encode`/`decode`), an epsilon-prediction
//! network and its noise schedule. Multistep denoising defaults to a
//! deterministic DDIM chain built on [`DiffusionPrior::guided_noise`].

pub mod bridge;
mod latent;
mod oracle;
mod schedule;
pub mod toy;

pub use latent::{add_noise, cfg_combine, Conditioning, Latent};
pub use oracle::OracleBackend;
pub use schedule::NoiseSchedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Latest usable start time for a DDIM chain. At `t = 1` the cosine
/// schedule has `alpha = 0` and the clean-signal estimate is undefined.
pub const DDIM_T_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorInfo {
    pub latent_channels: usize,
    /// Audio samples per latent frame.
    pub compression_factor: usize,
    pub sample_rate: u32,
}

impl PriorInfo {
    /// Latent frame count for a clip of `samples` samples.
    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        if samples == 0 || !samples.is_multiple_of(self.compression_factor) {
            return Err(Error::invalid(format!(
                "clip of {samples} samples is not a multiple of the compression factor {}",
                self.compression_factor
            )));
        }
        Ok(samples / self.compression_factor)
    }
}

pub trait DiffusionPrior: Send + Sync {
    fn info(&self) -> PriorInfo;

    fn schedule(&self) -> &NoiseSchedule;

    fn encode(&self, x: &Waveform) -> Result<Latent>;

    fn decode(&self, h: &Latent) -> Result<Waveform>;

    /// `cotangent^T d decode / d h`.
    fn decode_vjp(&self, h: &Latent, cotangent: &Waveform) -> Result<Latent>;

    fn supports_encode_vjp(&self) -> bool {
        false
    }

    /// `cotangent^T d encode / d x`.
    fn encode_vjp(&self, _x: &Waveform, _cotangent: &Latent) -> Result<Waveform> {
        Err(Error::Capability(
            "this prior backend does not expose an encoder vector-Jacobian product".into(),
        ))
    }

    fn predict_noise(&self, z: &Latent, t: f64, cond: &Conditioning) -> Result<Latent>;

    /// Classifier-free guided prediction with scale `s = 1 + tau`.
    fn guided_noise(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        guidance_scale: f64,
    ) -> Result<Latent> {
        let eps_cond = self.predict_noise(z, t, cond)?;
        if cond.is_null() || guidance_scale == 1.0 {
            return Ok(eps_cond);
        }
        let eps_uncond = self.predict_noise(z, t, &Conditioning::Null)?;
        cfg_combine(&eps_cond, &eps_uncond, guidance_scale)
    }

    /// Partial DDIM chain from `t` back to 0 on a uniform grid; every step
    /// applies the full guided prediction.
    fn denoise_multistep(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        guidance_scale: f64,
        n_steps: usize,
    ) -> Result<Latent> {
        ddim(self, z, t, cond, guidance_scale, n_steps)
    }
}

/// Deterministic DDIM chain shared by in-process backends.
pub fn ddim<P: DiffusionPrior + ?Sized>(
    prior: &P,
    z: &Latent,
    t: f64,
    cond: &Conditioning,
    guidance_scale: f64,
    n_steps: usize,
) -> Result<Latent> {
    if n_steps == 0 {
        return Err(Error::invalid("denoising needs at least one step"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("denoising start time {t} outside (0, 1]")));
    }
    let schedule = prior.schedule();
    let start = t.min(DDIM_T_MAX);
    let mut zi = z.clone();
    for i in 0..n_steps {
        let ti = start * (1.0 - i as f64 / n_steps as f64);
        let tn = start * (1.0 - (i + 1) as f64 / n_steps as f64);
        let eps = prior.guided_noise(&zi, ti, cond, guidance_scale)?;
        let (ai, si) = schedule.scales(ti);
        let (an, sn) = if i + 1 == n_steps {
            (1.0, 0.0)
        } else {
            schedule.scales(tn)
        };
        let x0 = zi.lincomb(1.0 / ai, &eps, -si / ai);
        zi = x0.lincomb(an, &eps, sn);
        if !zi.is_finite() {
            return Err(Error::NumericOverflow {
                sample: zi.values.iter().position(|v| !v.is_finite()).unwrap_or(0),
                context: format!("DDIM step {i} at t = {ti}"),
            });
        }
    }
    Ok(zi)
}

impl<P: DiffusionPrior + ?Sized> DiffusionPrior for &P {
    fn info(&self) -> PriorInfo {
        (**self).info()
    }
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
    fn encode(&self, x: &Waveform) -> Result<Latent> {
        (**self).encode(x)
    }
    fn decode(&self, h: &Latent) -> Result<Waveform> {
        (**self).decode(h)
    }
    fn decode_vjp(&self, h: &Latent, cotangent: &Waveform) -> Result<Latent> {
        (**self).decode_vjp(h, cotangent)
    }
    fn supports_encode_vjp(&self) -> bool {
        (**self).supports_encode_vjp()
    }
    fn encode_vjp(&self, x: &Waveform, cotangent: &Latent) -> Result<Waveform> {
        (**self).encode_vjp(x, cotangent)
    }
    fn predict_noise(&self, z: &Latent, t: f64, cond: &Conditioning) -> Result<Latent> {
        (**self).predict_noise(z, t, cond)
    }
    fn guided_noise(&self, z: &Latent, t: f64, cond: &Conditioning, s: f64) -> Result<Latent> {
        (**self).guided_noise(z, t, cond, s)
    }
    fn denoise_multistep(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        s: f64,
        n_steps: usize,
    ) -> Result<Latent> {
        (**self).denoise_multistep(z, t, cond, s, n_steps)
    }
}

/// Waveform <-> latent identity: two channels, one frame per sample.
pub(crate) fn identity_encode(x: &Waveform) -> Latent {
    Latent {
        channels: 2,
        frames: x.len(),
        values: x.as_slice().to_vec(),
    }
}

pub(crate) fn identity_decode(h: &Latent, sample_rate: u32) -> Result<Waveform> {
    if h.channels != 2 {
        return Err(Error::invalid(format!(
            "identity codec expects a 2-channel latent, got {}",
            h.channels
        )));
    }
    Waveform::from_channel_major(h.values.clone(), sample_rate)
}
