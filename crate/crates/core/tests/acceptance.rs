//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 1–7 pin the quantitative contracts (baseline reproduction,
//! formula-level oracle equivalence, protocol semantics, prompt fidelity).
//! Criterion 8 is the stated substitute for headline corpus metrics that
//! depend on private donated data and a hosted model and are therefore out
//! of desk-scale reach: full synthetic closure, where every planted truth
//! is recovered end to end with the mock oracle. Criterion 9 checks warm
//! cache runs are network-free and byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use leakscope::audit::{discovery_point, discovery_summary, leak_curve, DEFAULT_LEAK_STEPS};
use leakscope::cohort::{build_cohort, CohortRule, ExclusionReason, LengthFloor};
use leakscope::corpus::{Attribute, DataStreamKind, UserRecord};
use leakscope::eval::{
    context_stats, majority_baseline, score_labels, score_traces, ContextConvention,
};
use leakscope::filter::{classify_category, classify_safety, VerdictKind};
use leakscope::gateway::templates::{render, TemplateId, SOURCE_PHRASES};
use leakscope::gateway::{
    parse_labeled, CachedEndpoint, CountryAliases, DiskCache, GenSettings, LlmEndpoint, MockOracle,
};
use leakscope::protocol::{
    run_matrix, smallest_covering_k, InferenceTrace, PrefixSchedule, TraceStore,
};
use leakscope::synth::{
    generate, CountRange, CuePlacement, CuePlan, DisclosurePlan, Manifest, SynthSpec,
};

fn criterion<F: FnOnce() + UnwindSafe>(number: u32, name: &str, body: F) {
    let result = catch_unwind(body);
    match &result {
        Ok(()) => println!("criterion {number} ({name}): PASS"),
        Err(_) => println!("criterion {number} ({name}): FAIL"),
    }
    if let Err(e) = result {
        resume_unwind(e);
    }
}

fn assert_within(label: &str, got: f64, expected: f64, tolerance: f64) {
    assert!(
        (got - expected).abs() <= tolerance,
        "{label}: got {got:.5}, expected {expected} ± {tolerance}"
    );
}

#[test]
fn criterion_1_majority_baseline_reproduction() {
    criterion(1, "majority-baseline reproduction", || {
        let start = Instant::now();
        let age = majority_baseline(&[389, 424, 185, 59]).unwrap();
        let gender = majority_baseline(&[359, 698]).unwrap();
        let country = majority_baseline(&[205, 456, 206, 190]).unwrap();
        println!("  age={age:.5} gender={gender:.5} country={country:.5}");
        assert!(start.elapsed() < Duration::from_secs(1), "runtime over 1 s");
        assert_within("age baseline", age, 0.23, 0.005);
        assert_within("country baseline", country, 0.26, 0.005);
        assert_within("gender baseline", gender, 0.52, 0.005);
    });
}

/// Flag indices recovered by running the mock safety filter over a stream.
fn filtered_flags(record: &UserRecord, endpoint: &dyn LlmEndpoint) -> Vec<usize> {
    let stream = record.chat_stream().expect("chat stream");
    classify_safety(stream, endpoint, &GenSettings::default(), 8)
        .into_iter()
        .filter(|v| v.verdict == VerdictKind::Unsafe)
        .map(|v| v.message_index)
        .collect()
}

#[test]
fn criterion_2_discovery_point_oracle_equivalence() {
    criterion(2, "discovery-point oracle equivalence", || {
        let start = Instant::now();
        let spec = SynthSpec {
            n_users: 500,
            messages: CountRange { min: 11, max: 60 },
            disclosure: DisclosurePlan::RandomFirstFlag,
            seed: 20,
            ..SynthSpec::default()
        };
        let (records, manifest) = generate(&spec).unwrap();
        let endpoint = MockOracle::new();

        let mut points = Vec::new();
        let mut brute_values = Vec::new();
        for record in &records {
            let planted = manifest.user(&record.user_id).unwrap();
            let flags = filtered_flags(record, &endpoint);
            let point = discovery_point(&record.user_id, &flags, planted.n_messages).unwrap();
            let first = planted.flags.iter().map(|f| f.index).min().unwrap();
            let brute = 100.0 * first as f64 / planted.n_messages as f64;
            assert_eq!(point.value, Some(brute), "user {}", record.user_id);
            brute_values.push(brute);
            points.push(point);
        }

        let summary = discovery_summary(&points, 5.0).unwrap();
        brute_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let brute_mean = brute_values.iter().sum::<f64>() / brute_values.len() as f64;
        let n = brute_values.len();
        let brute_median = if n % 2 == 1 {
            brute_values[n / 2]
        } else {
            (brute_values[n / 2 - 1] + brute_values[n / 2]) / 2.0
        };
        assert!((summary.mean - brute_mean).abs() < 1e-9);
        assert!((summary.median - brute_median).abs() < 1e-9);
        assert_eq!(
            endpoint.calls() as usize,
            records
                .iter()
                .map(|r| r.chat_stream().unwrap().len())
                .sum::<usize>()
        );
        assert!(
            start.elapsed() < Duration::from_secs(10),
            "runtime over 10 s"
        );
    });
}

#[test]
fn criterion_3_protocol_first_match_property() {
    criterion(3, "protocol first-match property", || {
        let start = Instant::now();
        let schedule = PrefixSchedule::default();
        let aliases = CountryAliases::bundled();
        let endpoint = MockOracle::new();
        let settings = GenSettings::default();
        let attributes = [Attribute::Age, Attribute::Gender];

        // Half the corpus gets cues at randomized indices, half gets none.
        let cued_spec = SynthSpec {
            n_users: 100,
            messages: CountRange { min: 11, max: 60 },
            cues: vec![
                CuePlan {
                    attribute: Attribute::Age,
                    placement: CuePlacement::Random,
                },
                CuePlan {
                    attribute: Attribute::Gender,
                    placement: CuePlacement::Random,
                },
            ],
            seed: 30,
            ..SynthSpec::default()
        };
        let bare_spec = SynthSpec {
            n_users: 100,
            messages: CountRange { min: 11, max: 60 },
            seed: 31,
            ..SynthSpec::default()
        };
        let (mut cued_records, cued_manifest) = generate(&cued_spec).unwrap();
        let (mut bare_records, _) = generate(&bare_spec).unwrap();
        for r in &mut cued_records {
            r.user_id = format!("cued-{}", r.user_id);
        }
        for r in &mut bare_records {
            r.user_id = format!("bare-{}", r.user_id);
        }

        let mut checked = 0usize;
        for record in cued_records.iter().chain(bare_records.iter()) {
            let outcome = run_matrix(
                std::slice::from_ref(record),
                &attributes,
                &[DataStreamKind::ChatAssistant],
                &endpoint,
                &settings,
                &schedule,
                &aliases,
                4,
                &BTreeSet::new(),
            );
            assert!(outcome.errors.is_empty());
            for trace in outcome.traces {
                let cued = trace.user_id.starts_with("cued-");
                if cued {
                    let raw_id = trace.user_id.trim_start_matches("cued-");
                    let planted = cued_manifest.user(raw_id).unwrap();
                    let cue = planted
                        .cues
                        .iter()
                        .find(|c| c.attribute == trace.attribute)
                        .unwrap();
                    let expected = smallest_covering_k(&schedule, planted.n_messages, cue.index);
                    assert_eq!(
                        trace.outcome.context_needed, expected,
                        "user {} attribute {}",
                        trace.user_id, trace.attribute
                    );
                } else {
                    assert_eq!(
                        trace.outcome.context_needed, None,
                        "cueless user {} must be NotReached",
                        trace.user_id
                    );
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 400);
        assert!(
            start.elapsed() < Duration::from_secs(30),
            "runtime over 30 s"
        );
    });
}

/// Independent per-definition scorer used as the criterion-4 oracle.
fn brute_force_metrics(
    classes: &[String],
    items: &[(String, Option<String>)],
) -> (Vec<(f64, f64, f64, usize)>, f64) {
    let other = "other".to_string();
    let mut full: Vec<String> = classes.to_vec();
    full.push(other.clone());
    let effective: Vec<String> = items
        .iter()
        .map(|(_, p)| match p {
            Some(l) if full.contains(l) => l.clone(),
            _ => other.clone(),
        })
        .collect();

    let mut per_class = Vec::new();
    let mut weighted = 0.0;
    for class in &full {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for ((truth, _), pred) in items.iter().zip(&effective) {
            let truth_is = truth == class;
            let pred_is = pred == class;
            match (truth_is, pred_is) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let support = tp + fn_;
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if support == 0 {
            0.0
        } else {
            tp as f64 / support as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += support as f64 / items.len() as f64 * f1;
        per_class.push((precision, recall, f1, support));
    }
    (per_class, weighted)
}

#[test]
fn criterion_4_metric_oracle_equivalence() {
    criterion(4, "metric oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for round in 0..1000 {
            let n_classes = rng.gen_range(2..=5usize);
            let classes: Vec<String> = (0..n_classes).map(|i| format!("k{i}")).collect();
            let n_items = rng.gen_range(1..=50usize);
            let items: Vec<(String, Option<String>)> = (0..n_items)
                .map(|_| {
                    let truth = classes[rng.gen_range(0..n_classes)].clone();
                    let prediction = match rng.gen_range(0..10u32) {
                        0 => None,
                        1 => Some("out-of-set".to_string()),
                        _ => Some(classes[rng.gen_range(0..n_classes)].clone()),
                    };
                    (truth, prediction)
                })
                .collect();

            let matrix = score_labels(&classes, &items).unwrap();
            let (brute_classes, brute_weighted) = brute_force_metrics(&classes, &items);
            assert_eq!(matrix.per_class.len(), brute_classes.len());
            for (metrics, (precision, recall, f1, support)) in
                matrix.per_class.iter().zip(&brute_classes)
            {
                assert!(
                    (metrics.precision - precision).abs() < 1e-12,
                    "round {round}"
                );
                assert!((metrics.recall - recall).abs() < 1e-12, "round {round}");
                assert!((metrics.f1 - f1).abs() < 1e-12, "round {round}");
                assert_eq!(metrics.support, *support, "round {round}");
            }
            assert!(
                (matrix.weighted_f1 - brute_weighted).abs() < 1e-12,
                "round {round}"
            );
        }
    });
}

#[test]
fn criterion_5_leak_curve_property() {
    criterion(5, "leak-curve linearity", || {
        for m in [2usize, 4, 8] {
            let spec = SynthSpec {
                n_users: 30,
                messages: CountRange { min: 100, max: 300 },
                disclosure: DisclosurePlan::EveryNth(m),
                seed: 50 + m as u64,
                ..SynthSpec::default()
            };
            let (_, manifest) = generate(&spec).unwrap();
            let per_user: Vec<(Vec<usize>, usize)> = manifest
                .users
                .iter()
                .map(|u| (u.flags.iter().map(|f| f.index).collect(), u.n_messages))
                .collect();
            let curve = leak_curve(&per_user, DEFAULT_LEAK_STEPS).unwrap();
            assert!(
                curve.fit.r_squared >= 0.99,
                "every-{m}th corpus: r² = {}",
                curve.fit.r_squared
            );
        }

        // All-flags corpus with lengths that are grid multiples: exact line.
        let spec = SynthSpec {
            n_users: 10,
            messages: CountRange { min: 100, max: 100 },
            disclosure: DisclosurePlan::All,
            seed: 55,
            ..SynthSpec::default()
        };
        let (_, manifest) = generate(&spec).unwrap();
        let per_user: Vec<(Vec<usize>, usize)> = manifest
            .users
            .iter()
            .map(|u| (u.flags.iter().map(|f| f.index).collect(), u.n_messages))
            .collect();
        let curve = leak_curve(&per_user, DEFAULT_LEAK_STEPS).unwrap();
        assert_eq!(
            curve.fit.r_squared, 1.0,
            "all-flags corpus must fit exactly"
        );
    });
}

#[test]
fn criterion_6_prompt_byte_fidelity() {
    criterion(6, "prompt byte fidelity", || {
        for id in TemplateId::ALL {
            let phrase = id.has_source_slot().then_some("google search history");
            let rendered = render(id, phrase, &[]).unwrap().full_text();
            let path = format!(
                "{}/tests/fixtures/prompts/{}.txt",
                env!("CARGO_MANIFEST_DIR"),
                id.name()
            );
            let fixture = std::fs::read_to_string(&path).unwrap();
            assert_eq!(rendered, fixture, "template {id}");

            if id.has_source_slot() {
                let google = rendered;
                for phrase in SOURCE_PHRASES {
                    let variant = render(id, Some(phrase), &[]).unwrap().full_text();
                    assert_eq!(
                        variant.replace(phrase, "google search history"),
                        google,
                        "{id}: {phrase:?} must differ only in the source phrase"
                    );
                }
            }
        }
    });
}

#[test]
fn criterion_7_listing_example_parsing() {
    criterion(7, "filter and label parsing on listing examples", || {
        let endpoint = MockOracle::new();
        let settings = GenSettings::default();
        let stream = leakscope::corpus::MessageStream::from_texts(
            DataStreamKind::ChatAssistant,
            [
                "My cat lungs are ruptured.",
                "I am a single mom of two.",
                "As a 25 year old woman, what should I do?",
            ],
        );
        let verdicts = classify_safety(&stream, &endpoint, &settings, 2);
        assert_eq!(
            verdicts.iter().map(|v| v.verdict).collect::<Vec<_>>(),
            vec![VerdictKind::Safe, VerdictKind::Unsafe, VerdictKind::Unsafe]
        );

        let parsed = parse_labeled(
            "Reasoning: The user mentions the efficiency of the Deutsche Bahn.\nCountry: Germany",
            Attribute::Country,
        );
        assert_eq!(parsed.label.as_deref(), Some("germany"));
    });
}

struct ClosureCorpus {
    records: Vec<UserRecord>,
    manifest: Manifest,
    flagged_users: BTreeSet<String>,
}

/// Mixed corpus: one sub-population carries a planted disclosure (and must
/// fall out of the cohort), the other carries cues only.
fn closure_corpus() -> ClosureCorpus {
    let flagged_spec = SynthSpec {
        n_users: 8,
        messages: CountRange { min: 15, max: 30 },
        disclosure: DisclosurePlan::FirstFlagAt(2),
        cues: vec![CuePlan {
            attribute: Attribute::Age,
            placement: CuePlacement::Random,
        }],
        seed: 80,
        ..SynthSpec::default()
    };
    let clean_spec = SynthSpec {
        n_users: 20,
        messages: CountRange { min: 15, max: 30 },
        cues: vec![
            CuePlan {
                attribute: Attribute::Age,
                placement: CuePlacement::Random,
            },
            CuePlan {
                attribute: Attribute::Gender,
                placement: CuePlacement::Random,
            },
        ],
        seed: 81,
        ..SynthSpec::default()
    };
    let (mut flagged_records, mut flagged_manifest) = generate(&flagged_spec).unwrap();
    let (mut clean_records, mut clean_manifest) = generate(&clean_spec).unwrap();
    let mut flagged_users = BTreeSet::new();
    for (r, m) in flagged_records
        .iter_mut()
        .zip(flagged_manifest.users.iter_mut())
    {
        r.user_id = format!("f-{}", r.user_id);
        m.user_id = r.user_id.clone();
        flagged_users.insert(r.user_id.clone());
    }
    for (r, m) in clean_records
        .iter_mut()
        .zip(clean_manifest.users.iter_mut())
    {
        r.user_id = format!("c-{}", r.user_id);
        m.user_id = r.user_id.clone();
    }
    let mut records = flagged_records;
    records.extend(clean_records);
    let mut manifest = flagged_manifest;
    manifest.users.extend(clean_manifest.users);
    ClosureCorpus {
        records,
        manifest,
        flagged_users,
    }
}

#[test]
fn criterion_8_synthetic_closure() {
    criterion(
        8,
        "end-to-end synthetic closure (headline corpus metrics are out of desk-scale reach)",
        || {
            let corpus = closure_corpus();
            let endpoint = MockOracle::new();
            let settings = GenSettings::default();

            // Filter: recover planted flags and categories exactly.
            let mut verdict_table = BTreeMap::new();
            for record in &corpus.records {
                let planted = corpus.manifest.user(&record.user_id).unwrap();
                let stream = record.chat_stream().unwrap();
                let verdicts = classify_safety(stream, &endpoint, &settings, 4);
                let flags: Vec<usize> = verdicts
                    .iter()
                    .filter(|v| v.verdict == VerdictKind::Unsafe)
                    .map(|v| v.message_index)
                    .collect();
                let expected: Vec<usize> = planted.flags.iter().map(|f| f.index).collect();
                assert_eq!(flags, expected, "flags for {}", record.user_id);

                let flagged_texts: Vec<(usize, String)> = flags
                    .iter()
                    .map(|&i| (i, stream.0[i].text.clone()))
                    .collect();
                let outcome = classify_category(&flagged_texts, &endpoint, &settings, 4);
                assert!(outcome.unknown.is_empty());
                let got: Vec<_> = outcome
                    .labels
                    .iter()
                    .map(|l| (l.message_index, l.category))
                    .collect();
                let planted_categories: Vec<_> = planted
                    .flags
                    .iter()
                    .map(|f| (f.index, f.category))
                    .collect();
                assert_eq!(got, planted_categories, "categories for {}", record.user_id);

                // Audit: discovery point equals the planted value.
                let point = discovery_point(&record.user_id, &flags, planted.n_messages).unwrap();
                let expected_value = expected
                    .iter()
                    .min()
                    .map(|&first| 100.0 * first as f64 / planted.n_messages as f64);
                assert_eq!(point.value, expected_value);

                verdict_table.insert(record.user_id.clone(), verdicts);
            }

            // Cohort: exactly the disclosure-planted users fall out.
            let cohort = build_cohort(
                &corpus.records,
                &verdict_table,
                &CohortRule {
                    length_floor: LengthFloor::Absolute(10),
                    require_all_safe: true,
                },
            )
            .unwrap();
            let excluded: BTreeSet<String> = cohort
                .excluded_ids()
                .iter()
                .map(|s| s.to_string())
                .collect();
            assert_eq!(excluded, corpus.flagged_users);
            for entry in cohort.entries.iter().filter(|e| !e.included) {
                assert_eq!(entry.reasons, vec![ExclusionReason::UnsafeMessage]);
            }

            // Inference on the cohort: every cue is recovered at exactly the
            // analytically smallest covering prefix, so evaluation is perfect.
            let included: Vec<UserRecord> = corpus
                .records
                .iter()
                .filter(|r| !corpus.flagged_users.contains(&r.user_id))
                .cloned()
                .collect();
            let schedule = PrefixSchedule::default();
            let outcome = run_matrix(
                &included,
                &[Attribute::Age, Attribute::Gender],
                &[DataStreamKind::ChatAssistant],
                &endpoint,
                &settings,
                &schedule,
                &CountryAliases::bundled(),
                8,
                &BTreeSet::new(),
            );
            assert!(outcome.errors.is_empty());
            assert_eq!(outcome.traces.len(), included.len() * 2);

            for trace in &outcome.traces {
                let planted = corpus.manifest.user(&trace.user_id).unwrap();
                let cue = planted
                    .cues
                    .iter()
                    .find(|c| c.attribute == trace.attribute)
                    .unwrap();
                let expected = smallest_covering_k(&schedule, planted.n_messages, cue.index);
                assert_eq!(trace.outcome.context_needed, expected);
                assert_eq!(
                    trace.outcome.final_label.as_deref(),
                    Some(trace.truth.as_str()),
                    "trace {} {} must recover the planted truth",
                    trace.user_id,
                    trace.attribute
                );
            }

            // Evaluation: perfect recovery scores weighted F1 = 1 per attribute.
            for attribute in [Attribute::Age, Attribute::Gender] {
                let traces: Vec<&InferenceTrace> = outcome
                    .traces
                    .iter()
                    .filter(|t| t.attribute == attribute)
                    .collect();
                let matrix = score_traces(attribute, &traces).unwrap();
                assert_eq!(matrix.weighted_f1, 1.0, "{attribute}");

                let stats =
                    context_stats(&traces, &schedule, ContextConvention::NotReachedAsFull).unwrap();
                let analytic_mean: f64 = traces
                    .iter()
                    .map(|t| {
                        let planted = corpus.manifest.user(&t.user_id).unwrap();
                        let cue = planted
                            .cues
                            .iter()
                            .find(|c| c.attribute == t.attribute)
                            .unwrap();
                        smallest_covering_k(&schedule, planted.n_messages, cue.index).unwrap()
                            as f64
                    })
                    .sum::<f64>()
                    / traces.len() as f64;
                assert!((stats.mean - analytic_mean).abs() < 1e-9);
                assert_eq!(stats.not_reached, 0);
            }
        },
    );
}

#[test]
fn criterion_9_warm_cache_resume() {
    criterion(
        9,
        "warm-cache rerun is network-free and byte-identical",
        || {
            let spec = SynthSpec {
                n_users: 6,
                messages: CountRange { min: 12, max: 25 },
                cues: vec![CuePlan {
                    attribute: Attribute::Gender,
                    placement: CuePlacement::Random,
                }],
                seed: 90,
                ..SynthSpec::default()
            };
            let (records, _) = generate(&spec).unwrap();
            let schedule = PrefixSchedule::default();
            let aliases = CountryAliases::bundled();
            let settings = GenSettings::default();
            let attributes = [Attribute::Age, Attribute::Gender];
            let kinds = [DataStreamKind::ChatAssistant];

            let cache_dir = tempfile::tempdir().unwrap();
            let out_dir = tempfile::tempdir().unwrap();

            let run = |store_name: &str| -> (u64, Vec<u8>) {
                let endpoint = CachedEndpoint::new(
                    MockOracle::new(),
                    DiskCache::new(cache_dir.path()).unwrap(),
                );
                let outcome = run_matrix(
                    &records,
                    &attributes,
                    &kinds,
                    &endpoint,
                    &settings,
                    &schedule,
                    &aliases,
                    4,
                    &BTreeSet::new(),
                );
                assert!(outcome.errors.is_empty());
                let store = TraceStore::new(out_dir.path().join(store_name));
                store.append_all(&outcome.traces).unwrap();
                let bytes = std::fs::read(store.path()).unwrap();
                (endpoint.calls(), bytes)
            };

            let (cold_calls, cold_bytes) = run("traces-cold.jsonl");
            assert!(cold_calls > 0);
            let (warm_calls, warm_bytes) = run("traces-warm.jsonl");
            assert_eq!(warm_calls, 0, "warm run must issue zero endpoint requests");
            assert_eq!(cold_bytes, warm_bytes, "traces must be byte-identical");
        },
    );
}
