use std::sync::Mutex;

use super::{
    identity_decode, identity_encode, Conditioning, DiffusionPrior, Latent, NoiseSchedule,
    PriorInfo,
};
#[cfg(test)]
use super::ddim;
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Test double whose noise prediction is exact with respect to an anchor
/// latent: `eps_hat = (z - alpha(t) anchor) / sigma(t)`.
///
/// In tracking mode the anchor is whatever was most recently encoded, so
/// noising `enc(x)` and asking for the noise returns the injected `eps`.
/// With a fixed anchor the backend is a frozen target: every denoising chain
/// lands on the anchor regardless of its input. The codec is the identity.
///
/// `denoise_multistep` returns the anchor itself, which is what a DDIM chain
/// driven by exact noise computes, minus the round-off. That keeps fixed
/// points exact under optimizers that rescale tiny gradients; [`ddim`]
/// still runs the full chain for checking the recursion.
///
/// [`ddim`]: super::ddim
#[derive(Debug)]
pub struct OracleBackend {
    sample_rate: u32,
    schedule: NoiseSchedule,
    anchor: Mutex<Option<Latent>>,
    fixed: bool,
}

impl OracleBackend {
    pub fn tracking(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            schedule: NoiseSchedule::Cosine,
            anchor: Mutex::new(None),
            fixed: false,
        }
    }

    pub fn with_anchor(anchor: Latent, sample_rate: u32) -> Self {
        Self {
            sample_rate,
            schedule: NoiseSchedule::Cosine,
            anchor: Mutex::new(Some(anchor)),
            fixed: true,
        }
    }

    /// Frozen-target double: denoising always returns `target`.
    pub fn frozen_target(target: &Waveform) -> Self {
        Self::with_anchor(identity_encode(target), target.sample_rate())
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn anchor(&self) -> Option<Latent> {
        self.anchor.lock().expect("oracle anchor lock").clone()
    }
}

impl DiffusionPrior for OracleBackend {
    fn info(&self) -> PriorInfo {
        PriorInfo {
            latent_channels: 2,
            compression_factor: 1,
            sample_rate: self.sample_rate,
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode(&self, x: &Waveform) -> Result<Latent> {
        let h = identity_encode(x);
        if !self.fixed {
            *self.anchor.lock().expect("oracle anchor lock") = Some(h.clone());
        }
        Ok(h)
    }

    fn decode(&self, h: &Latent) -> Result<Waveform> {
        identity_decode(h, self.sample_rate)
    }

    fn decode_vjp(&self, h: &Latent, cotangent: &Waveform) -> Result<Latent> {
        let g = identity_encode(cotangent);
        h.check_shape(&g, "oracle decode_vjp")?;
        Ok(g)
    }

    fn supports_encode_vjp(&self) -> bool {
        true
    }

    fn encode_vjp(&self, x: &Waveform, cotangent: &Latent) -> Result<Waveform> {
        identity_encode(x).check_shape(cotangent, "oracle encode_vjp")?;
        identity_decode(cotangent, self.sample_rate)
    }

    fn predict_noise(&self, z: &Latent, t: f64, _cond: &Conditioning) -> Result<Latent> {
        let guard = self.anchor.lock().expect("oracle anchor lock");
        let anchor = guard
            .as_ref()
            .ok_or_else(|| Error::Configuration("oracle backend has no anchor yet".into()))?;
        z.check_shape(anchor, "oracle predict_noise")?;
        let (a, s) = self.schedule.scales(t);
        if s <= 0.0 {
            return Err(Error::invalid("noise prediction at t = 0 is undefined"));
        }
        Ok(z.lincomb(1.0 / s, anchor, -a / s))
    }

    fn denoise_multistep(
        &self,
        z: &Latent,
        t: f64,
        _cond: &Conditioning,
        guidance_scale: f64,
        n_steps: usize,
    ) -> Result<Latent> {
        if n_steps == 0 {
            return Err(Error::invalid("denoising needs at least one step"));
        }
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid(format!("denoising start time {t} outside (0, 1]")));
        }
        if !(guidance_scale >= 0.0) {
            return Err(Error::invalid("guidance scale must be nonnegative"));
        }
        let guard = self.anchor.lock().expect("oracle anchor lock");
        let anchor = guard
            .as_ref()
            .ok_or_else(|| Error::Configuration("oracle backend has no anchor yet".into()))?;
        z.check_shape(anchor, "oracle denoise_multistep")?;
        Ok(anchor.clone())
    }
}
