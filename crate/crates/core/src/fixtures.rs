//! Built-in deterministic problems shared by the CLI, examples and tests.

use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::prior::toy::CorpusSpec;
use crate::prior::Conditioning;
use crate::render::{FrequencySpacing, ImpactInit, ImpactParams, ImpactSynth, RenderSpec, Renderer};
use crate::sds::SdsConfig;
use crate::separation::{OptimizeSettings, Parametrization, SeparationSettings, SourceSpec};
use crate::signal::{SpectrogramConfig, Waveform};

/// A synthetic mixture with known sources.
#[derive(Debug, Clone)]
pub struct SeparationFixture {
    pub id: String,
    pub mixture: Waveform,
    pub references: Vec<Waveform>,
    pub sources: Vec<SourceSpec>,
}

/// Held-out item `index` of every class summed into one mixture; each
/// source is prompted with its class name.
pub fn toy_separation_fixture(corpus: &CorpusSpec, index: usize) -> Result<SeparationFixture> {
    corpus.validate()?;
    if corpus.held_out_per_class == 0 {
        return Err(Error::Configuration("corpus has no held-out items".into()));
    }
    let mut references = Vec::new();
    let mut sources = Vec::new();
    for (c, class) in corpus.classes.iter().enumerate() {
        // offset per class so mixtures pair different item kinds
        let i = corpus.items_per_class + (index + c) % corpus.held_out_per_class;
        references.push(corpus.item(c, i)?);
        sources.push(SourceSpec {
            conditioning: Conditioning::Prompt(class.name.clone()),
            parametrization: Parametrization::Latent,
        });
    }
    let mut mixture = references[0].clone();
    for r in &references[1..] {
        mixture.add_assign(r);
    }
    Ok(SeparationFixture {
        id: format!("toy-mix-{index}"),
        mixture,
        references,
        sources,
    })
}

/// Separation settings for the toy prior: the default SDS weight and
/// timestep range, with guidance and step size scaled to the small model.
pub fn toy_separation_settings() -> SeparationSettings {
    SeparationSettings {
        gamma: 0.02,
        sds: SdsConfig {
            guidance_scale: 2.0,
            ..SdsConfig::separation()
        },
        spectrogram: SpectrogramConfig::default(),
        optimizer: OptimizeSettings {
            steps: 200,
            adam: AdamConfig::with_lr(0.01),
            checkpoint_every: 50,
        },
        init_noise: 0.01,
        seed: 0,
    }
}

/// A modal impact target and a mismatched starting point.
#[derive(Debug, Clone)]
pub struct ImpactFitFixture {
    pub synth: ImpactSynth,
    pub target_params: ImpactParams,
    pub init_params: ImpactParams,
    pub target: Waveform,
    pub spectrogram: SpectrogramConfig,
}

pub fn impact_fit_fixture() -> Result<ImpactFitFixture> {
    let sample_rate = 8000;
    let modes = 8;
    let noise_seed = 3;
    let synth = ImpactSynth::new(RenderSpec::from_samples(2048, sample_rate)?, modes, noise_seed)?;
    let base = ImpactInit {
        modes,
        low_hz: 200.0,
        high_hz: 3000.0,
        spacing: FrequencySpacing::Linear,
        perturbation_std: 30.0,
        damping: 12.0,
        reverb_damping: 20.0,
    };
    let mut target_params = ImpactParams::init(&base, sample_rate, noise_seed);
    for (i, a) in target_params.amplitudes.iter_mut().enumerate() {
        *a *= 1.0 + 0.5 * (i as f64).sin();
    }
    let mut init_params = ImpactParams::init(
        &ImpactInit {
            damping: 25.0,
            reverb_damping: 35.0,
            ..base
        },
        sample_rate,
        11,
    );
    init_params.noise_seed = noise_seed;
    let target = synth.render(&target_params.to_flat())?;
    Ok(ImpactFitFixture {
        synth,
        target_params,
        init_params,
        target,
        spectrogram: SpectrogramConfig::new(vec![64, 128, 256, 512])?,
    })
}
