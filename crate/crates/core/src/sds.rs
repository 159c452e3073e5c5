//! Score-distillation updates over any renderer and prior backend.
//!
//! Every variant returns a descent direction: an optimizer subtracts it.
//!
//! * classic: `mean_b w(t) VJP[alpha(t) (eps_hat - eps)]` through `enc . g`
//! * decoder: `VJP[mean_b w(t) (x - x_hat)]` with
//!   `x_hat = dec(denoise(noise(enc(x), t, eps), t))`
//! * spectrogram decoder: the decoder residual taken between multiscale
//!   magnitudes, `s - s_hat`, pulled back through the STFT adjoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{add_noise, Conditioning, DiffusionPrior, Latent};
use crate::render::Renderer;
use crate::signal::{multiscale_spectrogram, SpectralLinearization, SpectrogramConfig, SpectrogramStack, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateVariant {
    /// Encoder-space residual; kept for ablations.
    Classic,
    Decoder,
    SpecDecoder,
}

impl UpdateVariant {
    pub fn name(self) -> &'static str {
        match self {
            UpdateVariant::Classic => "classic",
            UpdateVariant::Decoder => "decoder",
            UpdateVariant::SpecDecoder => "spec_decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Constant,
    SigmaSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdsConfig {
    pub t_min: f64,
    pub t_max: f64,
    /// `s = 1 + tau`.
    pub guidance_scale: f64,
    pub batch_size: usize,
    pub n_denoise_steps: usize,
    pub weight_mode: WeightMode,
    pub variant: UpdateVariant,
    pub spectrogram: SpectrogramConfig,
    pub seed: u64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self::fm()
    }
}

impl SdsConfig {
    pub fn fm() -> Self {
        Self {
            t_min: 0.6,
            t_max: 1.0,
            guidance_scale: 16.0,
            batch_size: 8,
            n_denoise_steps: 4,
            weight_mode: WeightMode::Constant,
            variant: UpdateVariant::SpecDecoder,
            spectrogram: SpectrogramConfig::default(),
            seed: 0,
        }
    }

    pub fn impact() -> Self {
        Self {
            t_min: 0.7,
            n_denoise_steps: 16,
            ..Self::fm()
        }
    }

    pub fn separation() -> Self {
        Self {
            t_min: 0.025,
            t_max: 0.875,
            guidance_scale: 61.0,
            batch_size: 10,
            n_denoise_steps: 2,
            ..Self::fm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 1.0) {
            problems.push(format!("need 0 <= t_min <= t_max <= 1, got [{}, {}]", self.t_min, self.t_max));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            problems.push(format!("guidance scale {} must be nonnegative", self.guidance_scale));
        }
        if self.batch_size == 0 {
            problems.push("batch size must be at least 1".into());
        }
        if self.n_denoise_steps == 0 {
            problems.push("denoising steps must be at least 1".into());
        }
        if let Err(e) = self.spectrogram.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Configuration(problems.join("; ")))
        }
    }

    pub fn weight(&self, sigma: f64) -> f64 {
        match self.weight_mode {
            WeightMode::Constant => 1.0,
            WeightMode::SigmaSquared => sigma * sigma,
        }
    }
}

/// `t ~ U[t_min, t_max]`.
pub fn sample_timestep(cfg: &SdsConfig, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    cfg.t_min + (cfg.t_max - cfg.t_min) * u
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of batch element `index` at optimizer step `step`.
pub fn sample_seed(seed: u64, step: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ step) ^ index)
}

pub fn batch_seeds(cfg: &SdsConfig, step: u64) -> Vec<u64> {
    (0..cfg.batch_size as u64).map(|b| sample_seed(cfg.seed, step, b)).collect()
}

#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub gradient: Vec<f64>,
    /// Per batch element.
    pub timesteps: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub mean_residual: f64,
    pub render: Waveform,
    /// Denoised audio of the first batch element (decoder variants).
    pub denoised: Option<Waveform>,
}

impl UpdateReport {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn record(&self, step: usize, variant: UpdateVariant) -> DiagnosticRecord {
        DiagnosticRecord {
            step,
            variant,
            mean_residual: self.mean_residual,
            timesteps: self.timesteps.clone(),
            grad_norm: self.gradient_norm(),
        }
    }
}

/// One line of the run log per update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub step: usize,
    pub variant: UpdateVariant,
    pub mean_residual: f64,
    pub timesteps: Vec<f64>,
    pub grad_norm: f64,
}

impl DiagnosticRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("diagnostic record serializes")
    }
}

struct Draw {
    t: f64,
    alpha: f64,
    sigma: f64,
    eps: Latent,
}

fn draw(cfg: &SdsConfig, like: &Latent, seed: u64, prior: &(impl DiffusionPrior + ?Sized)) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = sample_timestep(cfg, &mut rng);
    let (alpha, sigma) = prior.schedule().scales(t);
    let eps = Latent {
        channels: like.channels,
        frames: like.frames,
        values: (0..like.len()).map(|_| rng.sample(StandardNormal)).collect(),
    };
    Draw {
        t,
        alpha,
        sigma,
        eps,
    }
}

fn batch<T>(index: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Batch {
        index,
        source: Box::new(e),
    })
}

/// Dispatches on `cfg.variant` with the seeds of optimizer step `step`.
pub fn sds_update<R, P>(
    theta: &[f64],
    renderer: &R,
    prior: &P,
    cond: &Conditioning,
    cfg: &SdsConfig,
    step: u64,
) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    sds_update_with_seeds(theta, renderer, prior, cond, cfg, &batch_seeds(cfg, step))
}

/// As [`sds_update`] with explicit per-element seeds (batch size = `seeds.len()`).
pub fn sds_update_with_seeds<R, P>(
    theta: &[f64],
    renderer: &R,
    prior: &P,
    cond: &Conditioning,
    cfg: &SdsConfig,
    seeds: &[u64],
) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::invalid("SDS update needs at least one batch element"));
    }
    if theta.len() != renderer.num_params() {
        return Err(Error::invalid(format!(
            "renderer expects {} parameters, got {}",
            renderer.num_params(),
            theta.len()
        )));
    }
    match cfg.variant {
        UpdateVariant::Classic => classic(theta, renderer, prior, cond, cfg, seeds),
        UpdateVariant::Decoder => decoder(theta, renderer, prior, cond, cfg, seeds),
        UpdateVariant::SpecDecoder => spec_decoder(theta, renderer, prior, cond, cfg, seeds),
    }
}

pub fn sds_update_classic<R, P>(theta: &[f64], renderer: &R, prior: &P, cond: &Conditioning, cfg: &SdsConfig, step: u64) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    let cfg = SdsConfig { variant: UpdateVariant::Classic, ..cfg.clone() };
    sds_update(theta, renderer, prior, cond, &cfg, step)
}

pub fn sds_update_decoder<R, P>(theta: &[f64], renderer: &R, prior: &P, cond: &Conditioning, cfg: &SdsConfig, step: u64) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    let cfg = SdsConfig { variant: UpdateVariant::Decoder, ..cfg.clone() };
    sds_update(theta, renderer, prior, cond, &cfg, step)
}

pub fn sds_update_spec_decoder<R, P>(theta: &[f64], renderer: &R, prior: &P, cond: &Conditioning, cfg: &SdsConfig, step: u64) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    let cfg = SdsConfig { variant: UpdateVariant::SpecDecoder, ..cfg.clone() };
    sds_update(theta, renderer, prior, cond, &cfg, step)
}

fn classic<R, P>(theta: &[f64], renderer: &R, prior: &P, cond: &Conditioning, cfg: &SdsConfig, seeds: &[u64]) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    if !prior.supports_encode_vjp() {
        return Err(Error::Capability(
            "classic SDS needs an encoder vector-Jacobian product".into(),
        ));
    }
    let x = renderer.render(theta)?;
    let h = prior.encode(&x)?;
    let b = seeds.len() as f64;
    let mut cot = Latent::zeros_like(&h);
    let (mut timesteps, mut norms) = (Vec::new(), Vec::new());
    for (i, &seed) in seeds.iter().enumerate() {
        let d = draw(cfg, &h, seed, prior);
        let residual = batch(i, (|| {
            let z = add_noise(&h, d.t, &d.eps, prior.schedule())?;
            let eps_hat = prior.guided_noise(&z, d.t, cond, cfg.guidance_scale)?;
            Ok(eps_hat.sub(&d.eps))
        })())?;
        let w = cfg.weight(d.sigma) * d.alpha / b;
        cot = cot.lincomb(1.0, &residual, w);
        timesteps.push(d.t);
        norms.push(residual.norm());
    }
    let wave_cot = prior.encode_vjp(&x, &cot)?;
    finish(renderer, theta, &wave_cot, x, None, timesteps, norms)
}

fn decoded_samples<P>(
    prior: &P,
    h: &Latent,
    cond: &Conditioning,
    cfg: &SdsConfig,
    seeds: &[u64],
) -> Result<Vec<(f64, f64, Waveform)>>
where
    P: DiffusionPrior + ?Sized,
{
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let d = draw(cfg, h, seed, prior);
            batch(i, (|| {
                let z = add_noise(h, d.t, &d.eps, prior.schedule())?;
                let h_hat = prior.denoise_multistep(&z, d.t, cond, cfg.guidance_scale, cfg.n_denoise_steps)?;
                Ok((d.t, cfg.weight(d.sigma), prior.decode(&h_hat)?))
            })())
        })
        .collect()
}

fn decoder<R, P>(theta: &[f64], renderer: &R, prior: &P, cond: &Conditioning, cfg: &SdsConfig, seeds: &[u64]) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    let x = renderer.render(theta)?;
    let h = prior.encode(&x)?;
    let samples = decoded_samples(prior, &h, cond, cfg, seeds)?;
    let b = seeds.len() as f64;
    let mut cot = vec![0.0; x.as_slice().len()];
    let (mut timesteps, mut norms) = (Vec::new(), Vec::new());
    for (i, (t, w, x_hat)) in samples.iter().enumerate() {
        batch(i, x.check_same_shape(x_hat, "decoded sample"))?;
        let mut sq = 0.0;
        for ((c, a), bh) in cot.iter_mut().zip(x.as_slice()).zip(x_hat.as_slice()) {
            let r = a - bh;
            sq += r * r;
            *c += w * r / b;
        }
        timesteps.push(*t);
        norms.push(sq.sqrt());
    }
    let denoised = samples.into_iter().next().map(|s| s.2);
    let wave_cot = Waveform::from_channel_major(cot, x.sample_rate())?;
    finish(renderer, theta, &wave_cot, x, denoised, timesteps, norms)
}

fn spec_decoder<R, P>(theta: &[f64], renderer: &R, prior: &P, cond: &Conditioning, cfg: &SdsConfig, seeds: &[u64]) -> Result<UpdateReport>
where
    R: Renderer + ?Sized,
    P: DiffusionPrior + ?Sized,
{
    let x = renderer.render(theta)?;
    let lin = SpectralLinearization::new(&x, &cfg.spectrogram)?;
    let h = prior.encode(&x)?;
    let samples = decoded_samples(prior, &h, cond, cfg, seeds)?;
    let b = seeds.len() as f64;
    let mut cot = SpectrogramStack::zeros_like(lin.stack());
    let (mut timesteps, mut norms) = (Vec::new(), Vec::new());
    for (i, (t, w, x_hat)) in samples.iter().enumerate() {
        batch(i, x.check_same_shape(x_hat, "decoded sample"))?;
        let s_hat = multiscale_spectrogram(x_hat, &cfg.spectrogram)?;
        let diff = lin.stack().sub(&s_hat);
        norms.push(diff.squared_norm().sqrt());
        cot = cot.add(&diff.scaled(w / b));
        timesteps.push(*t);
    }
    let wave_cot = lin.vjp(&cot)?;
    let denoised = samples.into_iter().next().map(|s| s.2);
    finish(renderer, theta, &wave_cot, x, denoised, timesteps, norms)
}

fn finish<R: Renderer + ?Sized>(
    renderer: &R,
    theta: &[f64],
    wave_cot: &Waveform,
    render: Waveform,
    denoised: Option<Waveform>,
    timesteps: Vec<f64>,
    residual_norms: Vec<f64>,
) -> Result<UpdateReport> {
    let gradient = renderer.vjp(theta, wave_cot)?;
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericOverflow {
            sample: i,
            context: "non-finite SDS gradient".into(),
        });
    }
    let mean_residual = residual_norms.iter().sum::<f64>() / residual_norms.len() as f64;
    Ok(UpdateReport {
        gradient,
        timesteps,
        residual_norms,
        mean_residual,
        render,
        denoised,
    })
}
