//! Prompt decomposition: caption a clip, ask an LLM for K-source prompt
//! sets through the fixed template, then review separated sources by
//! re-captioning them. Scripted mock clients stand in for the services;
//! set AUDIOSDS_LLM_URL (and optionally AUDIOSDS_LLM_TOKEN) to query a real
//! text endpoint instead.
//!
//! cargo run --example prompt_decomposition

use audio_sds::prompt::{
    audio_body, branch_refine, caption, render_template, suggest_decompositions, HttpClient, MockClient, RefineConfig,
    TextClient,
};
use audio_sds::signal::Waveform;

const LLM_RESPONSE: &str = include_str!("../tests/fixtures/prompt/llm_response.txt");

fn clip(freq: f64) -> audio_sds::Result<Waveform> {
    let mono: Vec<f64> = (0..800).map(|i| 0.2 * (std::f64::consts::TAU * freq * i as f64 / 8000.0).sin()).collect();
    Waveform::from_mono(&mono, 8000)
}

fn main() -> audio_sds::Result<()> {
    let mixture = clip(440.0)?;
    let captioner = MockClient::unavailable().with_response(&audio_body(&mixture), "Someone is clicking on a keyboard and talking.");
    let text = caption(&mixture, &captioner)?;
    println!("caption: {text}");

    let llm: Box<dyn TextClient> = match HttpClient::from_env("AUDIOSDS_LLM_URL", "AUDIOSDS_LLM_TOKEN") {
        Some(c) => Box::new(c),
        None => Box::new(MockClient::fixed(LLM_RESPONSE)),
    };
    let request = render_template(&text);
    println!("template request: {} lines", request.lines().count());
    let proposals = suggest_decompositions(&text, &[2, 3], llm.as_ref())?;
    for p in &proposals {
        println!("K = {}: {:?}", p.k, p.prompts);
    }

    // pretend the first K = 2 proposal produced these two sources
    let chosen = &proposals[0];
    let sources = [clip(220.0)?, clip(1760.0)?];
    let captioner = MockClient::unavailable()
        .with_response(&audio_body(&sources[0]), "quiet music with people talking")
        .with_response(&audio_body(&sources[1]), "keys clicking on a keyboard");
    let decision = branch_refine(&sources, &chosen.prompts, &captioner, llm.as_ref(), &RefineConfig::default())?;
    for r in &decision.reviews {
        println!("review {:?} vs {:?}: overlap {:.2}, {} event(s)", r.prompt, r.caption, r.overlap, r.events);
    }
    println!("decision: {:?}", decision.action);
    Ok(())
}
