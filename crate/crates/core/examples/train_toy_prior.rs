//! Trains the class-conditional toy diffusion prior on its synthetic
//! two-band corpus and saves the checkpoint used by the CLI.
//!
//! cargo run --release --example train_toy_prior -- [out_dir] [steps]

use std::path::PathBuf;

use audio_sds::prior::toy::{train_toy_prior, CorpusSpec, ToyTrainingConfig};

fn main() -> audio_sds::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train_toy_prior".into()));
    let steps = args.next().map_or(Ok(ToyTrainingConfig::default().steps), |s| s.parse()).expect("steps must be an integer");
    std::fs::create_dir_all(&out)?;

    let corpus = CorpusSpec::default();
    for c in &corpus.classes {
        println!("class {:?}: {}-{} Hz", c.name, c.low_hz, c.high_hz);
    }
    let training = ToyTrainingConfig {
        steps,
        ..ToyTrainingConfig::default()
    };
    let ck = train_toy_prior(&corpus, &training)?;
    for p in ck.loss_curve.iter().step_by(5) {
        println!("step {:5}: train loss {:.4}", p.step, p.loss);
    }
    println!("held-out denoising MSE {:.4} -> {:.4}", ck.initial_eval_mse, ck.final_eval_mse);
    let path = out.join("toy_prior.json");
    ck.save(&path)?;
    println!("saved {} (sha256 {})", path.display(), ck.hash()?);
    Ok(())
}
