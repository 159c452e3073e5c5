//! Two ablations: fitting an impact sound through the multi-scale
//! spectrogram versus a plain waveform L2 loss, and one versus five
//! denoising steps inside the SDS update during separation.
//!
//! cargo run --release --example ablation -- [out_dir] [toy_prior.json]

use std::path::PathBuf;

use audio_sds::ablation::{multistep_ablation, spectrogram_ablation, AblationReport};
use audio_sds::fixtures::{impact_fit_fixture, toy_separation_fixture, toy_separation_settings};
use audio_sds::optim::AdamConfig;
use audio_sds::prior::toy::{train_toy_prior, CorpusSpec, ToyPrior, ToyTrainingConfig};
use audio_sds::sds::SdsConfig;
use audio_sds::separation::OptimizeSettings;

fn show(r: &AblationReport) {
    println!("{} ({}):", r.ablation, r.objective);
    for a in &r.arms {
        println!("  {:12} {:.4e}", a.arm, a.final_objective);
    }
}

fn main() -> audio_sds::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/ablation".into()));
    std::fs::create_dir_all(&out)?;

    let sds = SdsConfig {
        batch_size: 1,
        n_denoise_steps: 1,
        guidance_scale: 1.0,
        ..SdsConfig::impact()
    };
    let opt = OptimizeSettings {
        steps: 200,
        adam: AdamConfig::with_lr(0.05),
        checkpoint_every: 0,
    };
    let spec = spectrogram_ablation(&impact_fit_fixture()?, &sds, &opt)?;
    show(&spec);
    spec.write_csv(std::fs::File::create(out.join("spectrogram.csv"))?)?;

    let prior = match args.next() {
        Some(path) => ToyPrior::load(path)?,
        None => {
            println!("training the toy prior (pass a checkpoint path to skip)...");
            ToyPrior::new(train_toy_prior(&CorpusSpec::default(), &ToyTrainingConfig::default())?)
        }
    };
    let f = toy_separation_fixture(&prior.checkpoint().corpus, 0)?;
    let steps = multistep_ablation(&prior, &f, &toy_separation_settings(), (1, 5))?;
    show(&steps);
    steps.write_csv(std::fs::File::create(out.join("multistep.csv"))?)?;
    println!("wrote {}", out.display());
    Ok(())
}
