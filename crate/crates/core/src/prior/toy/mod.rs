//! Built-in trainable toy prior: synthetic band-limited classes, a linear
//! block codec and a small conditional convolutional noise predictor.

mod codec;
pub mod corpus;
mod net;

pub use codec::LinearCodec;
pub use corpus::{band_energy_fraction, band_limit, ClassSpec, CorpusSpec, ItemKind};
pub use net::{Denoiser, DenoiserArch};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    identity_decode, identity_encode, Conditioning, DiffusionPrior, Latent, NoiseSchedule,
    PriorInfo,
};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::signal::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecChoice {
    Identity,
    Linear { stride: usize, channels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyCodec {
    Identity,
    Linear(LinearCodec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub lr: f64,
    /// Probability of replacing the class with the unconditional slot.
    pub class_dropout: f64,
    pub hidden: usize,
    pub dilations: Vec<usize>,
    pub codec: CodecChoice,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for ToyTrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            crop_frames: 64,
            lr: 2e-3,
            class_dropout: 0.15,
            hidden: 32,
            dilations: vec![1, 2, 4],
            codec: CodecChoice::Linear {
                stride: 16,
                channels: 10,
            },
            log_every: 50,
            seed: 1,
        }
    }
}

impl ToyTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.crop_frames == 0 || self.log_every == 0 {
            return Err(Error::Configuration("training sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.class_dropout) {
            return Err(Error::Configuration("invalid learning rate or class dropout".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPriorCheckpoint {
    pub corpus: CorpusSpec,
    pub training: ToyTrainingConfig,
    pub codec: ToyCodec,
    pub denoiser: Denoiser,
    /// Mean training-batch loss per logging interval.
    pub loss_curve: Vec<LossPoint>,
    /// Held-out denoising MSE before and after training.
    pub initial_eval_mse: f64,
    pub final_eval_mse: f64,
}

impl ToyPriorCheckpoint {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Configuration(format!("checkpoint encode: {e}")))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes)
            .map_err(|e| Error::Configuration(format!("toy prior checkpoint decode: {e}")))
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            Error::Configuration(format!("toy prior checkpoint {}: {e}", path.display()))
        })?;
        Self::from_json(&bytes)
    }
}

/// In-process prior backed by a [`ToyPriorCheckpoint`].
#[derive(Debug, Clone)]
pub struct ToyPrior {
    checkpoint: ToyPriorCheckpoint,
    schedule: NoiseSchedule,
}

impl ToyPrior {
    pub fn new(checkpoint: ToyPriorCheckpoint) -> Self {
        Self {
            checkpoint,
            schedule: NoiseSchedule::Cosine,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(ToyPriorCheckpoint::load(path)?))
    }

    /// Untrained network and freshly fitted codec, as at step 0 of training.
    pub fn untrained(corpus: &CorpusSpec, training: &ToyTrainingConfig) -> Result<Self> {
        let (codec, _) = fit_codec(corpus, training)?;
        let denoiser = Denoiser::init(arch_for(corpus, training, &codec), training.seed)?;
        Ok(Self::new(ToyPriorCheckpoint {
            corpus: corpus.clone(),
            training: training.clone(),
            codec,
            denoiser,
            loss_curve: Vec::new(),
            initial_eval_mse: f64::NAN,
            final_eval_mse: f64::NAN,
        }))
    }

    pub fn checkpoint(&self) -> &ToyPriorCheckpoint {
        &self.checkpoint
    }

    pub fn codec(&self) -> &ToyCodec {
        &self.checkpoint.codec
    }

    pub fn class_count(&self) -> usize {
        self.checkpoint.corpus.classes.len()
    }

    /// Class slot for a conditioning value; prompts match class names.
    pub fn class_slot(&self, cond: &Conditioning) -> Result<Option<usize>> {
        match cond {
            Conditioning::Null => Ok(None),
            Conditioning::Class(k) if *k < self.class_count() => Ok(Some(*k)),
            Conditioning::Class(k) => Err(Error::Configuration(format!(
                "class {k} outside the toy vocabulary of {}",
                self.class_count()
            ))),
            Conditioning::Prompt(text) => {
                let wanted = text.trim().to_lowercase();
                self.checkpoint
                    .corpus
                    .classes
                    .iter()
                    .position(|c| c.name.to_lowercase() == wanted)
                    .map(Some)
                    .ok_or_else(|| {
                        Error::Configuration(format!("prompt {text:?} names no toy class"))
                    })
            }
        }
    }

    /// Denoising MSE over a fixed noise draw on the given items. `cond_for`
    /// picks the conditioning from each item's true class.
    pub fn denoising_mse(
        &self,
        items: &[(usize, Waveform)],
        draws_per_item: usize,
        seed: u64,
        cond_for: impl Fn(usize) -> Conditioning,
    ) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut total, mut count) = (0.0, 0usize);
        for (class, x) in items {
            let h = self.encode(x)?;
            for _ in 0..draws_per_item {
                let t: f64 = rng.random_range(0.02..0.98);
                let eps = gaussian_latent(&h, &mut rng);
                let z = super::add_noise(&h, t, &eps, &self.schedule)?;
                let pred = self.predict_noise(&z, t, &cond_for(*class))?;
                total += pred.sub(&eps).dot(&pred.sub(&eps));
                count += h.len();
            }
        }
        Ok(total / count as f64)
    }
}

impl DiffusionPrior for ToyPrior {
    fn info(&self) -> PriorInfo {
        let (latent_channels, compression_factor) = match &self.checkpoint.codec {
            ToyCodec::Identity => (2, 1),
            ToyCodec::Linear(c) => (c.channels, c.stride),
        };
        PriorInfo {
            latent_channels,
            compression_factor,
            sample_rate: self.checkpoint.corpus.sample_rate,
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode(&self, x: &Waveform) -> Result<Latent> {
        check_rate(x, self.checkpoint.corpus.sample_rate)?;
        match &self.checkpoint.codec {
            ToyCodec::Identity => Ok(identity_encode(x)),
            ToyCodec::Linear(c) => c.encode(x),
        }
    }

    fn decode(&self, h: &Latent) -> Result<Waveform> {
        let sr = self.checkpoint.corpus.sample_rate;
        match &self.checkpoint.codec {
            ToyCodec::Identity => identity_decode(h, sr),
            ToyCodec::Linear(c) => c.decode(h, sr),
        }
    }

    fn decode_vjp(&self, h: &Latent, cotangent: &Waveform) -> Result<Latent> {
        match &self.checkpoint.codec {
            ToyCodec::Identity => {
                let g = identity_encode(cotangent);
                h.check_shape(&g, "decode_vjp")?;
                Ok(g)
            }
            ToyCodec::Linear(c) => c.decode_vjp(h, cotangent),
        }
    }

    fn supports_encode_vjp(&self) -> bool {
        true
    }

    fn encode_vjp(&self, x: &Waveform, cotangent: &Latent) -> Result<Waveform> {
        match &self.checkpoint.codec {
            ToyCodec::Identity => {
                identity_encode(x).check_shape(cotangent, "encode_vjp")?;
                identity_decode(cotangent, x.sample_rate())
            }
            ToyCodec::Linear(c) => c.encode_vjp(x, cotangent),
        }
    }

    fn predict_noise(&self, z: &Latent, t: f64, cond: &Conditioning) -> Result<Latent> {
        let net = &self.checkpoint.denoiser;
        if z.channels != net.arch.channels {
            return Err(Error::invalid(format!(
                "toy prior expects {} latent channels, got {}",
                net.arch.channels, z.channels
            )));
        }
        let emb = net.arch.embed(t, self.class_slot(cond)?);
        Latent::new(z.channels, z.frames, net.predict(&z.values, z.frames, &emb))
    }
}

fn check_rate(x: &Waveform, sample_rate: u32) -> Result<()> {
    if x.sample_rate() != sample_rate {
        return Err(Error::invalid(format!(
            "toy prior runs at {sample_rate} Hz, got {} Hz",
            x.sample_rate()
        )));
    }
    Ok(())
}

fn gaussian_latent(like: &Latent, rng: &mut ChaCha8Rng) -> Latent {
    Latent {
        channels: like.channels,
        frames: like.frames,
        values: (0..like.len()).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

fn fit_codec(
    corpus: &CorpusSpec,
    training: &ToyTrainingConfig,
) -> Result<(ToyCodec, Vec<(usize, Waveform)>)> {
    corpus.validate()?;
    training.validate()?;
    let items = corpus.training_items()?;
    let codec = match training.codec {
        CodecChoice::Identity => ToyCodec::Identity,
        CodecChoice::Linear { stride, channels } => {
            let waves: Vec<Waveform> = items.iter().map(|(_, w)| w.clone()).collect();
            ToyCodec::Linear(LinearCodec::fit(&waves, stride, channels)?)
        }
    };
    Ok((codec, items))
}

fn arch_for(corpus: &CorpusSpec, training: &ToyTrainingConfig, codec: &ToyCodec) -> DenoiserArch {
    DenoiserArch {
        channels: match codec {
            ToyCodec::Identity => 2,
            ToyCodec::Linear(c) => c.channels,
        },
        hidden: training.hidden,
        dilations: training.dilations.clone(),
        classes: corpus.classes.len(),
    }
}

/// Trains the toy prior: codec fit, then epsilon-prediction MSE on random
/// latent crops with class dropout.
pub fn train_toy_prior(corpus: &CorpusSpec, training: &ToyTrainingConfig) -> Result<ToyPriorCheckpoint> {
    let untrained = ToyPrior::untrained(corpus, training)?;
    let items = corpus.training_items()?;
    let held_out = corpus.held_out_items()?;
    let eval_seed = training.seed ^ 0xE7A1;
    let initial_eval_mse =
        untrained.denoising_mse(&held_out, 2, eval_seed, Conditioning::Class)?;

    let latents: Vec<(usize, Latent)> = items
        .iter()
        .map(|(c, x)| untrained.encode(x).map(|h| (*c, h)))
        .collect::<Result<_>>()?;
    let mut ckpt = untrained.checkpoint;
    let arch = ckpt.denoiser.arch.clone();
    let crop = latents
        .iter()
        .map(|(_, h)| h.frames)
        .min()
        .unwrap_or(0)
        .min(training.crop_frames);
    if crop == 0 {
        return Err(Error::Configuration("corpus latents are empty".into()));
    }
    let schedule = NoiseSchedule::Cosine;
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed.wrapping_add(0x7261_696E));
    let mut adam = Adam::new(AdamConfig::with_lr(training.lr), ckpt.denoiser.params.len());
    let mut grad = vec![0.0; ckpt.denoiser.params.len()];
    let mut interval_loss = 0.0;
    let c = arch.channels;
    let n = c * crop;

    for step in 0..training.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        for _ in 0..training.batch_size {
            let (class, h) = &latents[rng.random_range(0..latents.len())];
            let start = rng.random_range(0..=h.frames - crop);
            let t: f64 = rng.random_range(0.0..1.0);
            let slot = if rng.random_bool(training.class_dropout) {
                None
            } else {
                Some(*class)
            };
            let (a, s) = schedule.scales(t);
            let mut z = vec![0.0; n];
            let mut eps = vec![0.0; n];
            for ch in 0..c {
                for f in 0..crop {
                    let e: f64 = rng.sample(StandardNormal);
                    eps[ch * crop + f] = e;
                    z[ch * crop + f] = a * h.values[ch * h.frames + start + f] + s * e;
                }
            }
            let emb = arch.embed(t, slot);
            let (pred, tape) = ckpt.denoiser.forward(&z, crop, &emb);
            let norm = 1.0 / (n * training.batch_size) as f64;
            let dout: Vec<f64> = pred
                .iter()
                .zip(&eps)
                .map(|(p, e)| {
                    batch_loss += (p - e) * (p - e) * norm;
                    2.0 * (p - e) * norm
                })
                .collect();
            ckpt.denoiser.backward(&tape, &dout, &mut grad);
        }
        if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                message: format!("denoising loss became {batch_loss}"),
            });
        }
        adam.step(&mut ckpt.denoiser.params, &grad);
        interval_loss += batch_loss;
        if (step + 1) % training.log_every == 0 || step + 1 == training.steps {
            let span = (step % training.log_every) + 1;
            ckpt.loss_curve.push(LossPoint {
                step: step + 1,
                loss: interval_loss / span as f64,
            });
            interval_loss = 0.0;
        }
    }

    let trained = ToyPrior::new(ckpt);
    let final_eval_mse =
        trained.denoising_mse(&held_out, 2, eval_seed, Conditioning::Class)?;
    let mut ckpt = trained.checkpoint;
    ckpt.initial_eval_mse = initial_eval_mse;
    ckpt.final_eval_mse = final_eval_mse;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (CorpusSpec, ToyTrainingConfig) {
        let corpus = CorpusSpec {
            clip_len: 512,
            items_per_class: 4,
            held_out_per_class: 2,
            ..CorpusSpec::default()
        };
        let training = ToyTrainingConfig {
            steps: 20,
            batch_size: 4,
            crop_frames: 16,
            hidden: 8,
            log_every: 5,
            ..ToyTrainingConfig::default()
        };
        (corpus, training)
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let (corpus, training) = tiny();
        let a = train_toy_prior(&corpus, &training).unwrap();
        let b = train_toy_prior(&corpus, &training).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.loss_curve.len(), 4);
        let back = ToyPriorCheckpoint::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        let other = ToyTrainingConfig {
            seed: 2,
            ..training
        };
        assert_ne!(train_toy_prior(&corpus, &other).unwrap().hash().unwrap(), a.hash().unwrap());
    }

    #[test]
    fn divergence_reports_the_step() {
        let (corpus, mut training) = tiny();
        training.lr = 1e200;
        match train_toy_prior(&corpus, &training) {
            Err(Error::Training { step, .. }) => assert!(step < training.steps),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn conditioning_resolution() {
        let (corpus, training) = tiny();
        let prior = ToyPrior::untrained(&corpus, &training).unwrap();
        assert_eq!(prior.class_slot(&Conditioning::Null).unwrap(), None);
        assert_eq!(prior.class_slot(&Conditioning::Class(1)).unwrap(), Some(1));
        assert_eq!(
            prior.class_slot(&Conditioning::prompt("High Whistle")).unwrap(),
            Some(1)
        );
        assert!(prior.class_slot(&Conditioning::Class(2)).is_err());
        assert!(prior.class_slot(&Conditioning::prompt("saxophone")).is_err());
    }

    #[test]
    fn missing_checkpoint_is_a_configuration_error() {
        assert!(matches!(
            ToyPrior::load("/nonexistent/toy.json"),
            Err(Error::Configuration(_))
        ));
    }
}
