//! Automated prompt sets for separation: caption the mixture, ask an LLM for
//! candidate decompositions, optionally re-caption the separated sources and
//! decide whether to keep, re-prompt or subdivide.

mod client;

pub use client::{body_key, HttpClient, MockClient, TextClient};

use std::collections::BTreeSet;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{encode_wav, WavEncoding, Waveform};

/// LLM instruction; the caption replaces [`CAPTION_SLOT`].
pub const TEMPLATE: &str = include_str!("template.txt");
pub const CAPTION_SLOT: &str = "<AUDIO_CAPTION>";

pub fn render_template(caption: &str) -> String {
    TEMPLATE.replacen(CAPTION_SLOT, caption, 1)
}

/// Request body sent to captioners and scorers: base64 of a float WAV.
pub fn audio_body(audio: &Waveform) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_wav(audio, WavEncoding::Float32))
}

/// Captions `audio`. Empty captions are a protocol error.
pub fn caption(audio: &Waveform, client: &dyn TextClient) -> Result<String> {
    let text = client.post(&audio_body(audio))?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Protocol("captioner returned an empty caption".into()));
    }
    Ok(text.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionProposal {
    pub k: usize,
    pub prompts: Vec<String>,
    pub caption: String,
    /// [`body_key`] of the raw LLM response the proposal came from.
    pub response_key: String,
}

impl DecompositionProposal {
    pub fn new(prompts: Vec<String>, caption: &str, response_key: &str) -> Result<Self> {
        let p = Self {
            k: prompts.len(),
            prompts,
            caption: caption.to_string(),
            response_key: response_key.to_string(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.prompts.len() != self.k {
            return Err(Error::Validation(format!("a decomposition needs K >= 2 prompts, got {}", self.prompts.len())));
        }
        let mut seen = BTreeSet::new();
        for p in &self.prompts {
            if p.trim().is_empty() {
                return Err(Error::Validation("empty prompt".into()));
            }
            if !seen.insert(p.trim().to_lowercase()) {
                return Err(Error::Validation(format!("duplicate prompt {p:?}")));
            }
        }
        Ok(())
    }
}

fn strip_quotes(s: &str) -> &str {
    s.trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '\u{201c}' | '\u{201d}' | '\u{2018}' | '\u{2019}' | '`'))
        .trim()
}

/// `Channel <n> Prompt: <text>` -> `(n, text)`.
fn channel_line(line: &str) -> Option<(usize, &str)> {
    let rest = line.trim_start().trim_start_matches(['-', '*', ' ']);
    let rest = rest.strip_prefix("Channel").or_else(|| rest.strip_prefix("channel"))?;
    let rest = rest.trim_start();
    let digits = rest.find(|c: char| !c.is_ascii_digit())?;
    let n: usize = rest[..digits].parse().ok()?;
    let rest = rest[digits..].trim_start();
    let rest = rest
        .strip_prefix("Prompt")
        .or_else(|| rest.strip_prefix("prompt"))?
        .trim_start()
        .strip_prefix(':')?;
    Some((n, strip_quotes(rest)))
}

/// Groups consecutive channel lines into blocks; a block starts at channel
/// 1 and must count up without gaps.
pub fn parse_blocks(raw: &str) -> Vec<std::result::Result<Vec<String>, String>> {
    let mut blocks = Vec::new();
    let mut current: Option<std::result::Result<Vec<String>, String>> = None;
    for line in raw.lines() {
        let Some((n, text)) = channel_line(line) else {
            continue;
        };
        if n == 1 {
            blocks.extend(current.take());
            current = Some(Ok(vec![text.to_string()]));
            continue;
        }
        match &mut current {
            Some(Ok(v)) if v.len() + 1 == n => v.push(text.to_string()),
            Some(Ok(v)) => {
                let msg = format!("channel {n} follows channel {}", v.len());
                current = Some(Err(msg));
            }
            Some(Err(_)) => {}
            None => current = Some(Err(format!("channel {n} before channel 1"))),
        }
    }
    blocks.extend(current);
    blocks
}

/// Every block of the response, validated into a proposal or rejected with
/// the reason.
pub fn parse_proposals(raw: &str, caption: &str) -> Vec<Result<DecompositionProposal>> {
    let key = body_key(raw);
    parse_blocks(raw)
        .into_iter()
        .map(|b| match b {
            Ok(prompts) => DecompositionProposal::new(prompts, caption, &key),
            Err(reason) => Err(Error::Validation(reason)),
        })
        .collect()
}

/// Asks the LLM for decompositions of `caption`. Returns the valid
/// proposals whose K is in `k_values` (all K when empty); every requested K
/// must be covered.
pub fn suggest_decompositions(caption: &str, k_values: &[usize], llm: &dyn TextClient) -> Result<Vec<DecompositionProposal>> {
    let raw = llm.post(&render_template(caption))?;
    let proposals: Vec<DecompositionProposal> = parse_proposals(&raw, caption)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|p| k_values.is_empty() || k_values.contains(&p.k))
        .collect();
    if proposals.is_empty() {
        return Err(Error::Parse {
            message: "no usable channel-prompt block in the response".into(),
            raw,
        });
    }
    for k in k_values {
        if !proposals.iter().any(|p| p.k == *k) {
            return Err(Error::Parse {
                message: format!("no proposal with K = {k}"),
                raw,
            });
        }
    }
    Ok(proposals)
}

/// Thresholds of the re-caption agreement heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Minimum fraction of a prompt's content words found in the
    /// re-caption for the source to count as matching.
    pub min_overlap: f64,
    /// Words that split a caption into separate events.
    pub event_separators: Vec<String>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            min_overlap: 0.5,
            event_separators: vec!["and".into(), "while".into(), "then".into(), "followed".into()],
        }
    }
}

const STOPWORDS: &[&str] = &[
    "the", "and", "with", "for", "from", "into", "onto", "over", "some", "someone", "something", "there",
    "this", "that", "are", "was", "were", "being", "been", "its", "their", "his", "her", "then", "while",
    "very", "background", "sound", "sounds", "audio", "can", "heard", "followed",
];

fn stem(w: &str) -> String {
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(s) = w.strip_suffix(suffix) {
            if s.len() >= 3 {
                return s.to_string();
            }
        }
    }
    w.to_string()
}

/// Lowercased, stemmed words of at least three letters, minus stopwords.
pub fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| w.len() >= 3 && !STOPWORDS.contains(&w.as_str()))
        .map(|w| stem(&w))
        .collect()
}

/// Fraction of the prompt's content words present in the caption.
pub fn keyword_overlap(prompt: &str, caption: &str) -> f64 {
    let p = content_words(prompt);
    if p.is_empty() {
        return 0.0;
    }
    let c = content_words(caption);
    p.intersection(&c).count() as f64 / p.len() as f64
}

/// Number of clauses with their own content words after splitting at the
/// configured separators and semicolons.
pub fn event_count(caption: &str, cfg: &RefineConfig) -> usize {
    let mut clauses = vec![String::new()];
    for token in caption.split_whitespace() {
        let bare: String = token.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        if cfg.event_separators.contains(&bare) {
            clauses.push(String::new());
            continue;
        }
        let last = clauses.last_mut().expect("non-empty");
        last.push(' ');
        last.push_str(token);
        if token.ends_with(';') {
            clauses.push(String::new());
        }
    }
    clauses.iter().filter(|c| !content_words(c).is_empty()).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RefineAction {
    Keep,
    /// A new prompt set suggested from the re-captions.
    Reprompt { proposal: DecompositionProposal },
    /// Source `index` seems to hold several events.
    Subdivide { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReview {
    pub prompt: String,
    pub caption: String,
    pub overlap: f64,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineDecision {
    pub action: RefineAction,
    pub reviews: Vec<SourceReview>,
    /// Set when a client failed and the decision fell back to `Keep`.
    pub warning: Option<String>,
}

impl RefineDecision {
    fn keep_with_warning(reviews: Vec<SourceReview>, e: &Error) -> Self {
        Self {
            action: RefineAction::Keep,
            reviews,
            warning: Some(e.to_string()),
        }
    }
}

/// Re-captions every separated source and compares it with its prompt:
/// a mismatch asks the LLM for a new prompt set, a matching caption with
/// several events subdivides that source, otherwise keep. Client failures
/// fail open to `Keep` with a warning.
pub fn branch_refine(
    sources: &[Waveform],
    prompts: &[String],
    captioner: &dyn TextClient,
    llm: &dyn TextClient,
    cfg: &RefineConfig,
) -> Result<RefineDecision> {
    if sources.len() != prompts.len() || sources.is_empty() {
        return Err(Error::invalid("need one prompt per separated source"));
    }
    let mut reviews = Vec::with_capacity(sources.len());
    for (x, p) in sources.iter().zip(prompts) {
        let c = match caption(x, captioner) {
            Ok(c) => c,
            Err(e) => return Ok(RefineDecision::keep_with_warning(reviews, &e)),
        };
        reviews.push(SourceReview {
            prompt: p.clone(),
            overlap: keyword_overlap(p, &c),
            events: event_count(&c, cfg),
            caption: c,
        });
    }
    if reviews.iter().any(|r| r.overlap < cfg.min_overlap) {
        let joined = reviews.iter().map(|r| r.caption.trim_end_matches('.')).collect::<Vec<_>>().join(". ");
        return Ok(match suggest_decompositions(&format!("{joined}."), &[sources.len()], llm) {
            Ok(mut ps) => RefineDecision {
                action: RefineAction::Reprompt { proposal: ps.remove(0) },
                reviews,
                warning: None,
            },
            Err(e) => RefineDecision::keep_with_warning(reviews, &e),
        });
    }
    let action = match reviews.iter().position(|r| r.events >= 2) {
        Some(index) => RefineAction::Subdivide { index },
        None => RefineAction::Keep,
    };
    Ok(RefineDecision {
        action,
        reviews,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_has_one_slot() {
        assert_eq!(TEMPLATE.matches(CAPTION_SLOT).count(), 1);
        let r = render_template("a dog barks.");
        assert!(r.ends_with("Here is the output caption for my audio: a dog barks.\n"));
        assert_eq!(r.len(), TEMPLATE.len() - CAPTION_SLOT.len() + "a dog barks.".len());
    }

    #[test]
    fn channel_lines_and_blocks() {
        assert_eq!(channel_line("Channel 2 Prompt: \u{201c}typing\u{201d}"), Some((2, "typing")));
        assert_eq!(channel_line("  - channel 10 prompt:  \"x\" "), Some((10, "x")));
        assert_eq!(channel_line("Channel two Prompt: x"), None);
        let raw = "Channel 1 Prompt: a\nChannel 2 Prompt: b\nnoise\nChannel 1 Prompt: c\nChannel 3 Prompt: d\n";
        let b = parse_blocks(raw);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0], Ok(vec!["a".to_string(), "b".to_string()]));
        assert!(b[1].is_err());
    }

    #[test]
    fn duplicate_prompts_are_rejected() {
        let raw = "Channel 1 Prompt: \"rain\"\nChannel 2 Prompt: \"Rain\"\n";
        let p = parse_proposals(raw, "c");
        assert!(matches!(p[0], Err(Error::Validation(_))));
    }

    #[test]
    fn overlap_and_events() {
        assert_eq!(keyword_overlap("clicking on a keyboard", "Someone is clicking keys on a keyboard."), 1.0);
        assert_eq!(keyword_overlap("saxophone", "cars passing"), 0.0);
        let cfg = RefineConfig::default();
        assert_eq!(event_count("A dog barks and a car horn honks.", &cfg), 2);
        assert_eq!(event_count("kick drum, bass, reverb", &cfg), 1);
    }

    #[test]
    fn empty_caption_is_a_protocol_error() {
        let w = Waveform::zeros(8, 8000).unwrap();
        assert!(matches!(caption(&w, &MockClient::fixed("  \n")), Err(Error::Protocol(_))));
    }
}
