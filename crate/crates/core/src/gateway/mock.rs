//! Deterministic stand-in endpoint for network-free runs.
//!
//! The mock answers from planted cue tokens of the form
//! `((cue:ATTR=VALUE))` found in the prompt payload: the latest token whose
//! name matches the prompt's attribute wins, and the mock answers VALUE.
//! Without a cue it answers a fixed, valid-but-wrong default per attribute,
//! so synthetic tests can place the correct answer at a chosen prefix
//! position and know that nothing else ever matches. Responses are a pure
//! function of the prompt text.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::corpus::Attribute;
use crate::gateway::{GatewayError, GenSettings, LlmEndpoint, RenderedPrompt};

/// Sentences the safety branch recognizes as explicit self-disclosure,
/// paired with the taxonomy answer given when one appears in a taxonomy
/// prompt. Synthetic corpora plant these to trigger UNSAFE verdicts.
pub const UNSAFE_MARKERS: [(&str, &str); 2] = [
    ("I am a single mom of two.", "Family Life and Relationship"),
    ("As a 25 year old woman, what should I do?", "Age"),
];

/// Taxonomy answer when neither a category cue nor a marker is present.
pub const DEFAULT_CATEGORY_ANSWER: &str = "Lifestyle and Habits";

/// Fixed default answer per attribute: always a member of the attribute's
/// valid label space, never one of the values synthetic profiles draw from.
pub fn default_answer(attribute: Attribute) -> &'static str {
    match attribute {
        Attribute::Age => "45+",
        Attribute::Gender => "Male",
        Attribute::Country => "Germany",
        Attribute::Religion => "other",
        Attribute::Education => "class_9_10",
        Attribute::Income => "less_than_20k",
        Attribute::Voting => "another_party",
    }
}

/// Cue-token name for an attribute, as written inside `((cue:...))`.
pub fn cue_name(attribute: Attribute) -> &'static str {
    match attribute {
        Attribute::Age => "age",
        Attribute::Gender => "gender",
        Attribute::Country => "country",
        Attribute::Religion => "religion",
        Attribute::Education => "education",
        Attribute::Income => "income",
        Attribute::Voting => "voting",
    }
}

/// Format a cue token for planting into synthetic message text.
pub fn cue_token(name: &str, value: &str) -> String {
    format!("((cue:{name}={value}))")
}

/// Find the value of the latest `((cue:name=VALUE))` token in `text` whose
/// name matches `name` case-insensitively.
pub fn latest_cue(text: &str, name: &str) -> Option<String> {
    let mut found = None;
    let mut rest = text;
    while let Some(start) = rest.find("((cue:") {
        let after = &rest[start + 6..];
        if let Some(end) = after.find("))") {
            let inner = &after[..end];
            if let Some((cue_name, value)) = inner.split_once('=') {
                if cue_name.trim().eq_ignore_ascii_case(name) {
                    found = Some(value.trim().to_string());
                }
            }
            rest = &after[end + 2..];
        } else {
            break;
        }
    }
    found
}

enum PromptKind {
    Safety,
    Taxonomy,
    Demographic(Attribute),
    Unknown,
}

fn classify_prompt(body: &str) -> PromptKind {
    if body.starts_with("You are a Privacy & Demographic Filter.") {
        return PromptKind::Safety;
    }
    if body.starts_with("You are a classifier that assigns a \"Personal Data Type\"") {
        return PromptKind::Taxonomy;
    }
    for attr in Attribute::ALL {
        let instruction = format!("the word \"{}\"", attr.label_keyword());
        if body.contains(&instruction) {
            return PromptKind::Demographic(attr);
        }
    }
    PromptKind::Unknown
}

/// The deterministic mock oracle.
#[derive(Debug, Default)]
pub struct MockOracle {
    calls: AtomicU64,
}

impl MockOracle {
    pub fn new() -> Self {
        MockOracle::default()
    }

    fn answer(&self, prompt: &RenderedPrompt) -> String {
        let payload = &prompt.payload_block;
        match classify_prompt(&prompt.body) {
            PromptKind::Safety => {
                let unsafe_hit = UNSAFE_MARKERS
                    .iter()
                    .any(|(marker, _)| payload.contains(marker));
                if unsafe_hit { "UNSAFE" } else { "SAFE" }.to_string()
            }
            PromptKind::Taxonomy => {
                if let Some(value) = latest_cue(payload, "category") {
                    return value;
                }
                for (marker, category) in UNSAFE_MARKERS {
                    if payload.contains(marker) {
                        return category.to_string();
                    }
                }
                DEFAULT_CATEGORY_ANSWER.to_string()
            }
            PromptKind::Demographic(attr) => match latest_cue(payload, cue_name(attr)) {
                Some(value) => format!("Reasoning: cue.\n{} {}", attr.label_keyword(), value),
                None => format!(
                    "Reasoning: default.\n{} {}",
                    attr.label_keyword(),
                    default_answer(attr)
                ),
            },
            PromptKind::Unknown => "Unrecognized prompt.".to_string(),
        }
    }
}

impl LlmEndpoint for MockOracle {
    fn complete_raw(
        &self,
        prompt: &RenderedPrompt,
        _settings: &GenSettings,
    ) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.answer(prompt))
    }

    fn model_id(&self) -> &str {
        "mock-oracle"
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
