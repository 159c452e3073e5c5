//! The prior bridge wire protocol end to end: serve a toy prior over TCP
//! from a loopback server, connect a client, and compare its answers with
//! the in-process model. Tensors cross the wire as little-endian f32.
//!
//! cargo run --release --example bridge_loopback

use std::sync::Arc;

use audio_sds::prior::bridge::{LoopbackServer, ServerBackend};
use audio_sds::prior::toy::{train_toy_prior, CorpusSpec, ToyPrior, ToyTrainingConfig};
use audio_sds::prior::{Conditioning, DiffusionPrior};

fn main() -> audio_sds::Result<()> {
    let corpus = CorpusSpec::default();
    let training = ToyTrainingConfig {
        steps: 200,
        ..ToyTrainingConfig::default()
    };
    let local = Arc::new(ToyPrior::new(train_toy_prior(&corpus, &training)?));
    let server = LoopbackServer::spawn(ServerBackend::Prior(local.clone()))?;
    println!("serving on {}", server.addr());

    let remote = server.connect()?;
    println!("handshake: {:?}", remote.info());

    let x = corpus.item(0, corpus.items_per_class)?;
    let h_local = local.encode(&x)?;
    let h_remote = remote.encode(&x)?;
    println!("encode: |local - remote| = {:.2e}", h_local.sub(&h_remote).norm());

    let cond = Conditioning::prompt("low rumble");
    let z = h_local.scaled(0.6);
    let eps_local = local.predict_noise(&z, 0.5, &cond)?;
    let eps_remote = remote.predict_noise(&z, 0.5, &cond)?;
    println!("predict_noise: |local - remote| = {:.2e}", eps_local.sub(&eps_remote).norm());

    let d_local = local.denoise_multistep(&z, 0.5, &cond, 2.0, 2)?;
    let d_remote = remote.denoise_multistep(&z, 0.5, &cond, 2.0, 2)?;
    println!("denoise_multistep: |local - remote| = {:.2e}", d_local.sub(&d_remote).norm());

    // the bridge carries no decoder Jacobian; callers fall back to waveform parameters
    match remote.decode_vjp(&h_local, &x) {
        Err(e) => println!("decode_vjp over the bridge: {e}"),
        Ok(_) => println!("decode_vjp over the bridge unexpectedly succeeded"),
    }
    Ok(())
}
