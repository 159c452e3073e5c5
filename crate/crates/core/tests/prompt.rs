mod common;

use audio_sds::metrics::{clap_score, ClapField};
use audio_sds::prompt::{
    audio_body, body_key, branch_refine, caption, event_count, keyword_overlap, parse_proposals, render_template,
    suggest_decompositions, MockClient, RefineAction, RefineConfig, TextClient, CAPTION_SLOT, TEMPLATE,
};
use audio_sds::signal::Waveform;
use audio_sds::Error;
use common::*;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixtures_dir().join("prompt").join(name)).unwrap()
}

fn caption_text() -> String {
    fixture("caption.txt").trim().to_string()
}

fn clip(seed: u64) -> Waveform {
    random_wave(64, 8000, &mut rng(seed))
}

#[test]
fn example_response_parses_into_four_proposals() {
    let raw = fixture("llm_response.txt");
    let all: Vec<_> = parse_proposals(&raw, &caption_text()).into_iter().map(Result::unwrap).collect();
    assert_eq!(all.len(), 4);
    assert_eq!(all.iter().map(|p| p.k).collect::<Vec<_>>(), vec![2, 2, 3, 3]);
    assert_eq!(
        all[0].prompts,
        vec!["music playing quietly with indiscernible talking", "clicking on a keyboard"]
    );
    assert_eq!(all[3].prompts[1], "tapping and clicking from a computer keyboard");
    assert!(all.iter().all(|p| p.response_key == body_key(&raw)));
}

#[test]
fn suggestions_filter_by_k() {
    let llm = MockClient::fixed(fixture("llm_response.txt"));
    let two = suggest_decompositions(&caption_text(), &[2], &llm).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(two[0].prompts[1], "clicking on a keyboard");
    let both = suggest_decompositions(&caption_text(), &[2, 3], &llm).unwrap();
    assert_eq!(both.len(), 4);
    match suggest_decompositions(&caption_text(), &[4], &llm) {
        Err(Error::Parse { raw, .. }) => assert!(raw.contains("Channel 1 Prompt")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn request_body_is_the_template_with_the_caption_substituted() {
    let llm = MockClient::fixed(fixture("llm_response.txt"));
    let c = caption_text();
    suggest_decompositions(&c, &[2], &llm).unwrap();
    let sent = llm.requests();
    assert_eq!(sent.len(), 1);
    assert_eq!(TEMPLATE.matches(CAPTION_SLOT).count(), 1);
    let (head, tail) = TEMPLATE.split_once(CAPTION_SLOT).unwrap();
    assert_eq!(sent[0], format!("{head}{c}{tail}"));
    assert_eq!(sent[0], render_template(&c));
    assert!(TEMPLATE.starts_with("I have an audio file (e.g., a .wav)"));
    assert!(TEMPLATE.trim_end().ends_with("Here is the output caption for my audio: <AUDIO_CAPTION>"));
}

#[test]
fn malformed_blocks_are_rejected_with_reasons() {
    let raw = "Channel 2 Prompt: orphan\nChannel 1 Prompt: a\nChannel 3 Prompt: gap\n\
               Channel 1 Prompt: dup\nChannel 2 Prompt: DUP\nChannel 1 Prompt: solo\n";
    let parsed = parse_proposals(raw, "c");
    assert_eq!(parsed.len(), 4);
    assert!(parsed.iter().all(Result::is_err));
    assert!(matches!(
        suggest_decompositions("c", &[], &MockClient::fixed(raw)),
        Err(Error::Parse { .. })
    ));
    assert!(matches!(
        suggest_decompositions("c", &[2], &MockClient::fixed("no prompts here")),
        Err(Error::Parse { .. })
    ));
}

#[test]
fn captioner_is_keyed_by_the_audio_bytes() {
    let (a, b) = (clip(1), clip(2));
    let captioner = MockClient::unavailable()
        .with_response(&audio_body(&a), "a dog barks")
        .with_response(&audio_body(&b), "rain falls");
    assert_eq!(caption(&a, &captioner).unwrap(), "a dog barks");
    assert_eq!(caption(&b, &captioner).unwrap(), "rain falls");
    assert!(matches!(caption(&clip(3), &captioner), Err(Error::Client { .. })));
    assert!(matches!(caption(&a, &MockClient::fixed("  \n")), Err(Error::Protocol(_))));
}

#[test]
fn overlap_and_event_heuristics() {
    assert_eq!(keyword_overlap("clicking on a keyboard", "someone clicks a keyboard"), 1.0);
    assert_eq!(keyword_overlap("dog barking", "rain on a roof"), 0.0);
    let cfg = RefineConfig::default();
    assert_eq!(event_count("a dog barks", &cfg), 1);
    assert_eq!(event_count(&caption_text(), &cfg), 2);
    assert_eq!(event_count("rain falls; thunder rumbles then a car passes", &cfg), 3);
}

fn refine(captions: [&str; 2], llm: &dyn TextClient) -> audio_sds::prompt::RefineDecision {
    let (a, b) = (clip(1), clip(2));
    let captioner = MockClient::unavailable()
        .with_response(&audio_body(&a), captions[0])
        .with_response(&audio_body(&b), captions[1]);
    let prompts = vec!["talking".to_string(), "clicking on a keyboard".to_string()];
    branch_refine(&[a, b], &prompts, &captioner, llm, &RefineConfig::default()).unwrap()
}

#[test]
fn refine_keeps_matching_single_event_sources() {
    let d = refine(["a man is talking", "keyboard clicking"], &MockClient::unavailable());
    assert_eq!(d.action, RefineAction::Keep);
    assert!(d.warning.is_none());
    assert_eq!(d.reviews.len(), 2);
}

#[test]
fn refine_subdivides_a_source_with_several_events() {
    let d = refine(["people talking", "keyboard clicking and a phone rings"], &MockClient::unavailable());
    assert_eq!(d.action, RefineAction::Subdivide { index: 1 });
}

#[test]
fn refine_reprompts_on_mismatch() {
    let llm = MockClient::fixed(fixture("llm_response.txt"));
    let d = refine(["birds singing", "keyboard clicking"], &llm);
    match d.action {
        RefineAction::Reprompt { proposal } => assert_eq!(proposal.k, 2),
        other => panic!("{other:?}"),
    }
    assert!(llm.requests()[0].contains("birds singing. keyboard clicking."));
}

#[test]
fn refine_fails_open_when_a_service_is_down() {
    let d = refine(["birds singing", "keyboard clicking"], &MockClient::unavailable());
    assert_eq!(d.action, RefineAction::Keep);
    assert!(d.warning.is_some());
    let (a, b) = (clip(1), clip(2));
    let prompts = vec!["x".to_string(), "y".to_string()];
    let d = branch_refine(&[a, b], &prompts, &MockClient::unavailable(), &MockClient::unavailable(), &RefineConfig::default())
        .unwrap();
    assert_eq!(d.action, RefineAction::Keep);
    assert!(d.warning.unwrap().contains("no mock response"));
}

#[test]
fn clap_scores_are_parsed_and_range_checked() {
    let x = clip(1);
    assert_eq!(clap_score(&x, "p", None).unwrap(), ClapField::Unavailable);
    let ok = MockClient::fixed("0.30");
    assert_eq!(clap_score(&x, "p", Some(&ok)).unwrap(), ClapField::Score(0.30));
    let sent: serde_json::Value = serde_json::from_str(&ok.requests()[0]).unwrap();
    assert_eq!(sent["prompt"], "p");
    assert_eq!(sent["audio_wav_base64"], audio_body(&x));
    let json = MockClient::fixed(r#"{"score": -0.25}"#);
    assert_eq!(clap_score(&x, "p", Some(&json)).unwrap(), ClapField::Score(-0.25));
    assert!(matches!(clap_score(&x, "p", Some(&MockClient::fixed("1.7"))), Err(Error::Protocol(_))));
    assert!(matches!(clap_score(&x, "p", Some(&MockClient::fixed("n/a"))), Err(Error::Parse { .. })));
}
