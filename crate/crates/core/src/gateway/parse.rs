//! Oracle response parsing: split a completion into rationale and label.

use serde::{Deserialize, Serialize};

use crate::corpus::{canonicalize_label, Attribute};

/// A parsed oracle completion. `label` is `None` when no keyword line was
/// found; the rationale is always a substring of the raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub raw: String,
    pub rationale: String,
    pub label: Option<String>,
}

impl Attribute {
    /// The keyword that introduces the label line in this attribute's prompt.
    pub fn label_keyword(&self) -> &'static str {
        match self {
            Attribute::Age => "Bracket:",
            Attribute::Gender => "Gender:",
            Attribute::Country => "Country:",
            Attribute::Religion => "Religion:",
            Attribute::Education => "Education:",
            Attribute::Income => "Income:",
            Attribute::Voting => "Voting:",
        }
    }
}

/// Extract the label from the last line beginning (case-insensitively, after
/// optional leading whitespace) with the attribute keyword. Everything before
/// that line is the rationale. Chain-of-thought bodies sometimes restate the
/// keyword mid-reasoning, so the last match wins. No keyword line leaves the
/// label unparsed and the whole raw text as rationale. Total: never fails.
pub fn parse_labeled(raw: &str, attribute: Attribute) -> OracleResponse {
    let keyword = attribute.label_keyword().to_lowercase();
    let mut label_line: Option<(usize, &str)> = None;
    let mut offset = 0usize;
    for line in raw.split('\n') {
        let trimmed = line.trim_start();
        if trimmed.len() >= keyword.len() && trimmed[..keyword.len()].eq_ignore_ascii_case(&keyword)
        {
            label_line = Some((offset, trimmed));
        }
        offset += line.len() + 1;
    }

    match label_line {
        Some((start, line)) => {
            let value = line[keyword.len()..].trim();
            OracleResponse {
                raw: raw.to_string(),
                rationale: raw[..start].trim().to_string(),
                label: Some(canonicalize_label(value)),
            }
        }
        // No keyword line: the whole raw text is the rationale.
        None => OracleResponse {
            raw: raw.to_string(),
            rationale: raw.to_string(),
            label: None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reasoning_then_country_line() {
        let raw = "Reasoning: mentions Deutsche Bahn and the Buergeramt.\nCountry: Germany";
        let parsed = parse_labeled(raw, Attribute::Country);
        assert_eq!(parsed.label.as_deref(), Some("germany"));
        assert_eq!(
            parsed.rationale,
            "Reasoning: mentions Deutsche Bahn and the Buergeramt."
        );
        assert!(raw.contains(&parsed.rationale));
    }

    #[test]
    fn bare_label_line_has_empty_rationale() {
        let parsed = parse_labeled("Gender: Male", Attribute::Gender);
        assert_eq!(parsed.label.as_deref(), Some("male"));
        assert_eq!(parsed.rationale, "");
    }

    #[test]
    fn missing_keyword_is_unparsed() {
        let parsed = parse_labeled("I cannot tell.", Attribute::Country);
        assert_eq!(parsed.label, None);
        assert_eq!(parsed.rationale, "I cannot tell.");
    }

    #[test]
    fn last_keyword_line_wins() {
        let raw = "Bracket: could be anything.\nLet me reconsider the signals.\nBracket: 25-34";
        let parsed = parse_labeled(raw, Attribute::Age);
        assert_eq!(parsed.label.as_deref(), Some("25-34"));
        assert!(parsed.rationale.ends_with("reconsider the signals."));
    }

    #[test]
    fn keyword_must_start_the_line() {
        let parsed = parse_labeled("The Country: Germany is likely.", Attribute::Country);
        assert_eq!(parsed.label, None);
    }

    #[test]
    fn leading_whitespace_and_case_are_tolerated() {
        let parsed = parse_labeled("Reasoning: hmm.\n  cOuNtRy:   Brazil  ", Attribute::Country);
        assert_eq!(parsed.label.as_deref(), Some("brazil"));
    }

    #[test]
    fn parse_is_total_over_template_echoes() {
        // Feeding rendered template text back as a response must never panic.
        use crate::gateway::templates::{render, TemplateId};
        for id in TemplateId::ALL {
            let phrase = id.has_source_slot().then_some("google search history");
            let echo = render(id, phrase, &["hello"]).unwrap().full_text();
            for attr in Attribute::ALL {
                let parsed = parse_labeled(&echo, attr);
                assert_eq!(parsed.raw, echo);
            }
        }
    }

    #[test]
    fn label_is_canonicalized() {
        let parsed = parse_labeled("Bracket: 18\u{2013}24", Attribute::Age);
        assert_eq!(parsed.label.as_deref(), Some("18-24"));
    }

    proptest::proptest! {
        // Total over arbitrary input: never panics, raw is preserved, the
        // rationale is always a substring of raw, labels are canonical.
        #[test]
        fn parse_labeled_is_total(raw in "\\PC{0,200}") {
            for attr in Attribute::ALL {
                let parsed = parse_labeled(&raw, attr);
                proptest::prop_assert_eq!(&parsed.raw, &raw);
                proptest::prop_assert!(raw.contains(&parsed.rationale));
                if let Some(label) = &parsed.label {
                    proptest::prop_assert_eq!(
                        label.clone(),
                        crate::corpus::canonicalize_label(label)
                    );
                }
            }
        }
    }
}
