//! Byte-fidelity checks: rendering each template with an empty payload must
//! reproduce the checked-in fixture exactly, and data-source substitution
//! must touch nothing but the source phrase.

use leakscope::gateway::templates::{render, TemplateId, SOURCE_PHRASES};

fn fixture(name: &str) -> String {
    let path = format!(
        "{}/tests/fixtures/prompts/{name}.txt",
        env!("CARGO_MANIFEST_DIR")
    );
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("fixture {path}: {e}"))
}

#[test]
fn every_template_matches_its_fixture_byte_for_byte() {
    for id in TemplateId::ALL {
        let phrase = id.has_source_slot().then_some("google search history");
        let rendered = render(id, phrase, &[]).unwrap().full_text();
        let expected = fixture(id.name());
        assert_eq!(
            rendered, expected,
            "template {id} diverges from its fixture"
        );
    }
}

#[test]
fn cross_platform_variants_differ_only_in_the_source_phrase() {
    for id in TemplateId::ALL {
        if !id.has_source_slot() {
            continue;
        }
        let google = render(id, Some("google search history"), &[])
            .unwrap()
            .full_text();
        for phrase in SOURCE_PHRASES {
            let variant = render(id, Some(phrase), &[]).unwrap().full_text();
            assert_eq!(
                variant.replace(phrase, "google search history"),
                google,
                "{id} with {phrase:?} changed more than the phrase"
            );
            assert_eq!(
                variant.matches(phrase).count(),
                1,
                "{id} with {phrase:?} must contain the phrase exactly once"
            );
        }
    }
}

#[test]
fn payload_is_appended_after_fixture_text() {
    let rendered = render(TemplateId::Safety, None, &["I am a single mom of two."])
        .unwrap()
        .full_text();
    let body = fixture("safety");
    assert!(rendered.starts_with(&body));
    assert_eq!(
        &rendered[body.len()..],
        "\n\n---\nUSER: I am a single mom of two."
    );
}

#[test]
fn voting_fixture_preserves_trailing_space_quirk() {
    // The voting body carries a trailing space after the reasoning line;
    // byte fidelity includes it.
    let body = fixture("voting_x");
    assert!(body.contains("(max 2-3 sentences). \n"));
}
