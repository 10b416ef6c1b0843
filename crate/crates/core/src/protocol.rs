//! Step-wise incremental-prefix demographic inference.
//!
//! For each (user, attribute, stream) the adversary prompt runs once per
//! prefix size in the schedule, smallest first, and stops at the first
//! prefix whose canonicalized label matches the ground truth; no further
//! prefixes are queried after a match. Country matching goes through the
//! alias table. A trace that never matches ends with the 100%-prefix
//! prediction as its final label.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Attribute, DataStreamKind, MessageStream, UserRecord};
use crate::gateway::templates::{render, TemplateId};
use crate::gateway::{complete, parse_labeled, CountryAliases, GenSettings, LlmEndpoint};
use crate::parallel::bounded_map;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error(
        "schedule must be non-empty, strictly ascending in (0, 100], ending at 100; got {0:?}"
    )]
    InvalidSchedule(Vec<u32>),
    #[error("stream is empty")]
    EmptyStream,
    #[error("user {user_id} has no ground truth for {attribute}")]
    MissingGroundTruth {
        user_id: String,
        attribute: Attribute,
    },
    #[error("user {user_id} has no {kind} stream")]
    MissingStream {
        user_id: String,
        kind: DataStreamKind,
    },
    #[error("trace store io: {0}")]
    StoreIo(String),
    #[error("trace store line {line}: {reason}")]
    StoreFormat { line: usize, reason: String },
}

/// Ascending prefix percentages; the last entry is always 100.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSchedule(Vec<u32>);

impl Default for PrefixSchedule {
    /// 5, 10, ..., 100.
    fn default() -> Self {
        PrefixSchedule((1..=20).map(|i| i * 5).collect())
    }
}

impl PrefixSchedule {
    pub fn new(percentages: Vec<u32>) -> Result<Self, ProtocolError> {
        let ascending = percentages.windows(2).all(|w| w[0] < w[1]);
        let in_range = percentages.iter().all(|&k| k > 0 && k <= 100);
        if percentages.is_empty() || !ascending || !in_range || *percentages.last().unwrap() != 100
        {
            return Err(ProtocolError::InvalidSchedule(percentages));
        }
        Ok(PrefixSchedule(percentages))
    }

    pub fn percentages(&self) -> &[u32] {
        &self.0
    }

    pub fn floor(&self) -> u32 {
        self.0[0]
    }
}

/// Number of messages in the k% prefix of a stream of length `len`:
/// ceil(k/100 · len) with a floor of one message.
pub fn prefix_len(len: usize, k: u32) -> usize {
    ((k as usize * len).div_ceil(100)).max(1)
}

/// First max(1, ceil(k/100 · N)) messages of the stream.
pub fn prefix_slice(
    stream: &MessageStream,
    k: u32,
) -> Result<&[crate::corpus::Message], ProtocolError> {
    if stream.is_empty() {
        return Err(ProtocolError::EmptyStream);
    }
    let take = prefix_len(stream.len(), k).min(stream.len());
    Ok(&stream.0[..take])
}

/// Smallest scheduled k whose prefix covers a message index, if any.
/// This is the analytically expected context-needed for a cue planted at
/// `index` in a stream of `len` messages.
pub fn smallest_covering_k(schedule: &PrefixSchedule, len: usize, index: usize) -> Option<u32> {
    schedule
        .percentages()
        .iter()
        .copied()
        .find(|&k| prefix_len(len, k) > index)
}

/// One protocol step: the prefix size queried and what came back.
/// `label` is `None` when the response carried no parseable label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub k: u32,
    pub label: Option<String>,
    pub rationale: String,
}

/// Prefix percentage at which the prediction first matched ground truth;
/// `None` means no prefix up to 100% matched.
pub type ContextNeeded = Option<u32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub context_needed: ContextNeeded,
    /// Matched label when stopped early, else the 100%-prefix label;
    /// `None` when even the final response was unparseable.
    pub final_label: Option<String>,
    pub rationale_at_stopping: String,
}

/// Full record of one (user, attribute, stream) protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub user_id: String,
    pub attribute: Attribute,
    pub kind: DataStreamKind,
    pub truth: String,
    pub steps: Vec<TraceStep>,
    pub outcome: TraceOutcome,
}

impl InferenceTrace {
    pub fn key(&self) -> TraceKey {
        TraceKey {
            user_id: self.user_id.clone(),
            attribute: self.attribute,
            kind: self.kind,
        }
    }
}

/// Resume key for the trace store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TraceKey {
    pub user_id: String,
    pub attribute: Attribute,
    pub kind: DataStreamKind,
}

/// Canonical-match form for a parsed label: country labels go through the
/// alias table, everything else is already canonical.
fn match_form(attribute: Attribute, label: &str, aliases: &CountryAliases) -> String {
    if attribute == Attribute::Country {
        aliases.resolve(label)
    } else {
        label.to_string()
    }
}

/// Run the protocol for one (user, attribute, stream kind).
///
/// Endpoint failures at a step record the step as unparseable and the
/// protocol continues; only missing inputs are errors.
pub fn run_trace(
    user: &UserRecord,
    attribute: Attribute,
    kind: DataStreamKind,
    endpoint: &dyn LlmEndpoint,
    settings: &GenSettings,
    schedule: &PrefixSchedule,
    aliases: &CountryAliases,
) -> Result<InferenceTrace, ProtocolError> {
    let truth =
        attribute
            .truth_label(&user.profile)
            .ok_or_else(|| ProtocolError::MissingGroundTruth {
                user_id: user.user_id.clone(),
                attribute,
            })?;
    let truth = match_form(attribute, &truth, aliases);
    let stream = user
        .streams
        .get(&kind)
        .ok_or_else(|| ProtocolError::MissingStream {
            user_id: user.user_id.clone(),
            kind,
        })?;
    if stream.is_empty() {
        return Err(ProtocolError::EmptyStream);
    }

    let template = TemplateId::for_attribute(attribute, kind);
    let phrase = template.has_source_slot().then(|| kind.source_phrase());

    let mut steps = Vec::new();
    let mut outcome: Option<TraceOutcome> = None;

    for &k in schedule.percentages() {
        let prefix = prefix_slice(stream, k)?;
        let texts: Vec<&str> = prefix.iter().map(|m| m.text.as_str()).collect();
        let step = match render(template, phrase, &texts) {
            Ok(prompt) => match complete(endpoint, &prompt, settings) {
                Ok(raw) => {
                    let parsed = parse_labeled(&raw, attribute);
                    TraceStep {
                        k,
                        label: parsed.label,
                        rationale: parsed.rationale,
                    }
                }
                // Unparsed step: counts as non-matching, protocol continues.
                Err(e) => TraceStep {
                    k,
                    label: None,
                    rationale: format!("oracle error: {e}"),
                },
            },
            Err(e) => TraceStep {
                k,
                label: None,
                rationale: format!("render error: {e}"),
            },
        };

        let matched = step
            .label
            .as_deref()
            .map(|label| match_form(attribute, label, aliases) == truth)
            .unwrap_or(false);
        steps.push(step);

        if matched {
            let stopping = steps.last().unwrap();
            outcome = Some(TraceOutcome {
                context_needed: Some(k),
                final_label: stopping
                    .label
                    .as_deref()
                    .map(|l| match_form(attribute, l, aliases)),
                rationale_at_stopping: stopping.rationale.clone(),
            });
            break;
        }
    }

    let outcome = outcome.unwrap_or_else(|| {
        let last = steps.last().expect("schedule is non-empty");
        TraceOutcome {
            context_needed: None,
            final_label: last
                .label
                .as_deref()
                .map(|l| match_form(attribute, l, aliases)),
            rationale_at_stopping: last.rationale.clone(),
        }
    });

    Ok(InferenceTrace {
        user_id: user.user_id.clone(),
        attribute,
        kind,
        truth,
        steps,
        outcome,
    })
}

/// A (user, attribute, kind) combination skipped by [`run_matrix`], with
/// its machine-readable reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCombination {
    pub user_id: String,
    pub attribute: Attribute,
    pub kind: DataStreamKind,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct MatrixOutcome {
    pub traces: Vec<InferenceTrace>,
    pub skipped: Vec<SkippedCombination>,
    /// Per-trace errors, collected rather than fatal.
    pub errors: Vec<(TraceKey, String)>,
}

/// Compatibility rule for one combination; `Err` carries the skip reason.
fn combination_allowed(
    user: &UserRecord,
    attribute: Attribute,
    kind: DataStreamKind,
) -> Result<(), String> {
    if attribute == Attribute::Country {
        if kind != DataStreamKind::ChatAssistant {
            return Err("country_runs_on_chat_stream_only".to_string());
        }
        if user.profile.has_extended() {
            // Cross-platform-cohort users share one country by construction.
            return Err("country_dropped_for_extended_cohort".to_string());
        }
    }
    if attribute.is_extended() && attribute.truth_label(&user.profile).is_none() {
        return Err("missing_ground_truth".to_string());
    }
    if !user.streams.contains_key(&kind) {
        return Err("missing_stream".to_string());
    }
    Ok(())
}

/// Run every valid (user, attribute, kind) combination. Distinct traces run
/// concurrently up to `concurrency`; output order is deterministic (input
/// order: users × attributes × kinds as given). Already-completed keys are
/// skipped for resumption.
#[allow(clippy::too_many_arguments)]
pub fn run_matrix(
    users: &[UserRecord],
    attributes: &[Attribute],
    kinds: &[DataStreamKind],
    endpoint: &dyn LlmEndpoint,
    settings: &GenSettings,
    schedule: &PrefixSchedule,
    aliases: &CountryAliases,
    concurrency: usize,
    completed: &BTreeSet<TraceKey>,
) -> MatrixOutcome {
    let mut jobs: Vec<(&UserRecord, Attribute, DataStreamKind)> = Vec::new();
    let mut outcome = MatrixOutcome::default();

    for user in users {
        for &attribute in attributes {
            for &kind in kinds {
                let key = TraceKey {
                    user_id: user.user_id.clone(),
                    attribute,
                    kind,
                };
                if completed.contains(&key) {
                    continue;
                }
                match combination_allowed(user, attribute, kind) {
                    Ok(()) => jobs.push((user, attribute, kind)),
                    Err(reason) => outcome.skipped.push(SkippedCombination {
                        user_id: user.user_id.clone(),
                        attribute,
                        kind,
                        reason,
                    }),
                }
            }
        }
    }

    let results = bounded_map(&jobs, concurrency, |_, (user, attribute, kind)| {
        run_trace(
            user, *attribute, *kind, endpoint, settings, schedule, aliases,
        )
    });

    for ((user, attribute, kind), result) in jobs.iter().zip(results) {
        match result {
            Ok(trace) => outcome.traces.push(trace),
            Err(e) => outcome.errors.push((
                TraceKey {
                    user_id: user.user_id.clone(),
                    attribute: *attribute,
                    kind: *kind,
                },
                e.to_string(),
            )),
        }
    }
    outcome
}

/// Append-only JSONL trace store, resumable by (user, attribute, kind).
#[derive(Debug)]
pub struct TraceStore {
    path: PathBuf,
}

impl TraceStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        TraceStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_all(&self) -> Result<Vec<InferenceTrace>, ProtocolError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text =
            fs::read_to_string(&self.path).map_err(|e| ProtocolError::StoreIo(e.to_string()))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| ProtocolError::StoreFormat {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn completed_keys(&self) -> Result<BTreeSet<TraceKey>, ProtocolError> {
        Ok(self.read_all()?.iter().map(InferenceTrace::key).collect())
    }

    pub fn append_all(&self, traces: &[InferenceTrace]) -> Result<(), ProtocolError> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent).map_err(|e| ProtocolError::StoreIo(e.to_string()))?;
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| ProtocolError::StoreIo(e.to_string()))?;
        for trace in traces {
            let line =
                serde_json::to_string(trace).map_err(|e| ProtocolError::StoreIo(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| ProtocolError::StoreIo(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AgeBracket, DemographicProfile, Gender, Message};
    use crate::gateway::mock::cue_token;
    use crate::gateway::MockOracle;

    fn stream_with_cue(
        kind: DataStreamKind,
        n: usize,
        cue: Option<(&str, &str, usize)>,
    ) -> MessageStream {
        MessageStream(
            (0..n)
                .map(|i| {
                    let mut text = format!("filler message number {i}");
                    if let Some((name, value, at)) = cue {
                        if i == at {
                            text = format!("{} {}", cue_token(name, value), text);
                        }
                    }
                    Message {
                        index: i,
                        timestamp: None,
                        text,
                        source: kind,
                    }
                })
                .collect(),
        )
    }

    fn user_with(streams: Vec<(DataStreamKind, MessageStream)>, gender: Gender) -> UserRecord {
        UserRecord {
            user_id: "u1".to_string(),
            profile: DemographicProfile {
                age_bracket: AgeBracket::From25To34,
                gender,
                country: "India".to_string(),
                religion: None,
                education: None,
                income: None,
                voting: None,
            },
            streams: streams.into_iter().collect(),
        }
    }

    fn run(user: &UserRecord, attribute: Attribute, kind: DataStreamKind) -> InferenceTrace {
        run_trace(
            user,
            attribute,
            kind,
            &MockOracle::new(),
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
        )
        .unwrap()
    }

    #[test]
    fn schedule_default_is_five_to_one_hundred() {
        let s = PrefixSchedule::default();
        assert_eq!(s.percentages().len(), 20);
        assert_eq!(s.floor(), 5);
        assert_eq!(*s.percentages().last().unwrap(), 100);
    }

    #[test]
    fn schedule_validation() {
        assert!(PrefixSchedule::new(vec![5, 10, 100]).is_ok());
        assert!(PrefixSchedule::new(vec![]).is_err());
        assert!(PrefixSchedule::new(vec![5, 5, 100]).is_err());
        assert!(PrefixSchedule::new(vec![0, 100]).is_err());
        assert!(PrefixSchedule::new(vec![5, 50]).is_err());
        assert!(PrefixSchedule::new(vec![5, 101]).is_err());
    }

    #[test]
    fn prefix_lengths_follow_ceiling_rule() {
        let s = stream_with_cue(DataStreamKind::ChatAssistant, 20, None);
        assert_eq!(prefix_slice(&s, 5).unwrap().len(), 1);
        assert_eq!(prefix_slice(&s, 10).unwrap().len(), 2);
        assert_eq!(prefix_slice(&s, 100).unwrap().len(), 20);
        // Tiny stream: the floor of one message applies.
        let tiny = stream_with_cue(DataStreamKind::ChatAssistant, 3, None);
        assert_eq!(prefix_slice(&tiny, 5).unwrap().len(), 1);
    }

    #[test]
    fn empty_stream_is_rejected() {
        let empty = MessageStream::default();
        assert_eq!(
            prefix_slice(&empty, 5).unwrap_err(),
            ProtocolError::EmptyStream
        );
    }

    #[test]
    fn cue_in_first_message_stops_at_floor() {
        let stream = stream_with_cue(
            DataStreamKind::ChatAssistant,
            20,
            Some(("gender", "Female", 0)),
        );
        let user = user_with(
            vec![(DataStreamKind::ChatAssistant, stream)],
            Gender::Female,
        );
        let trace = run(&user, Attribute::Gender, DataStreamKind::ChatAssistant);
        assert_eq!(trace.outcome.context_needed, Some(5));
        assert_eq!(trace.outcome.final_label.as_deref(), Some("female"));
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.outcome.rationale_at_stopping, "Reasoning: cue.");
    }

    #[test]
    fn no_cue_reaches_one_hundred_with_default_label() {
        let stream = stream_with_cue(DataStreamKind::ChatAssistant, 20, None);
        let user = user_with(
            vec![(DataStreamKind::ChatAssistant, stream)],
            Gender::Female,
        );
        let trace = run(&user, Attribute::Gender, DataStreamKind::ChatAssistant);
        assert_eq!(trace.outcome.context_needed, None);
        // The mock's fixed default, canonicalized.
        assert_eq!(trace.outcome.final_label.as_deref(), Some("male"));
        assert_eq!(trace.steps.len(), 20);
    }

    #[test]
    fn cue_at_index_nine_of_twenty_needs_half_the_history() {
        // Smallest k with ceil(k/100 * 20) >= 10 is 50.
        let stream = stream_with_cue(
            DataStreamKind::ChatAssistant,
            20,
            Some(("gender", "Female", 9)),
        );
        let user = user_with(
            vec![(DataStreamKind::ChatAssistant, stream)],
            Gender::Female,
        );
        let trace = run(&user, Attribute::Gender, DataStreamKind::ChatAssistant);
        assert_eq!(trace.outcome.context_needed, Some(50));
        assert_eq!(
            smallest_covering_k(&PrefixSchedule::default(), 20, 9),
            Some(50)
        );
    }

    #[test]
    fn steps_are_ascending_prefix_of_schedule() {
        let stream = stream_with_cue(
            DataStreamKind::ChatAssistant,
            40,
            Some(("gender", "Female", 13)),
        );
        let user = user_with(
            vec![(DataStreamKind::ChatAssistant, stream)],
            Gender::Female,
        );
        let trace = run(&user, Attribute::Gender, DataStreamKind::ChatAssistant);
        let ks: Vec<u32> = trace.steps.iter().map(|s| s.k).collect();
        let schedule = PrefixSchedule::default();
        assert_eq!(ks[..], schedule.percentages()[..ks.len()]);
        assert!(ks.windows(2).all(|w| w[0] < w[1]));
        // First-match property: no earlier step matches the truth.
        let stop = trace.outcome.context_needed.unwrap();
        for step in &trace.steps {
            if step.k < stop {
                assert_ne!(step.label.as_deref(), Some(trace.truth.as_str()));
            }
        }
    }

    #[test]
    fn country_match_uses_alias_table() {
        let n = 10;
        let stream = stream_with_cue(
            DataStreamKind::ChatAssistant,
            n,
            Some(("country", "Bharat", 0)),
        );
        let user = user_with(vec![(DataStreamKind::ChatAssistant, stream)], Gender::Male);
        let trace = run(&user, Attribute::Country, DataStreamKind::ChatAssistant);
        // "Bharat" aliases to india, matching the survey country.
        assert_eq!(trace.outcome.context_needed, Some(5));
        assert_eq!(trace.outcome.final_label.as_deref(), Some("india"));
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let stream = stream_with_cue(DataStreamKind::ChatAssistant, 5, None);
        let user = user_with(vec![(DataStreamKind::ChatAssistant, stream)], Gender::Male);
        let err = run_trace(
            &user,
            Attribute::Religion,
            DataStreamKind::ChatAssistant,
            &MockOracle::new(),
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::MissingGroundTruth { .. }));
    }

    #[test]
    fn missing_stream_is_an_error() {
        let stream = stream_with_cue(DataStreamKind::ChatAssistant, 5, None);
        let user = user_with(vec![(DataStreamKind::ChatAssistant, stream)], Gender::Male);
        let err = run_trace(
            &user,
            Attribute::Gender,
            DataStreamKind::WebSearch,
            &MockOracle::new(),
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::MissingStream { .. }));
    }

    struct FlakyEndpoint {
        inner: MockOracle,
        fail_on: std::sync::Mutex<BTreeSet<u64>>,
        counter: std::sync::atomic::AtomicU64,
    }

    impl crate::gateway::LlmEndpoint for FlakyEndpoint {
        fn complete_raw(
            &self,
            prompt: &crate::gateway::RenderedPrompt,
            settings: &GenSettings,
        ) -> Result<String, crate::gateway::GatewayError> {
            let n = self
                .counter
                .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if self.fail_on.lock().unwrap().contains(&n) {
                return Err(crate::gateway::GatewayError::Transport("flaky".to_string()));
            }
            self.inner.complete_raw(prompt, settings)
        }
        fn model_id(&self) -> &str {
            "flaky"
        }
        fn calls(&self) -> u64 {
            self.counter.load(std::sync::atomic::Ordering::SeqCst)
        }
    }

    #[test]
    fn endpoint_failure_marks_step_unparsed_and_continues() {
        let stream = stream_with_cue(
            DataStreamKind::ChatAssistant,
            20,
            Some(("gender", "Female", 0)),
        );
        let user = user_with(
            vec![(DataStreamKind::ChatAssistant, stream)],
            Gender::Female,
        );
        // Fail every attempt of the first step (3 retries), succeed after.
        let endpoint = FlakyEndpoint {
            inner: MockOracle::new(),
            fail_on: std::sync::Mutex::new([0u64, 1, 2].into()),
            counter: std::sync::atomic::AtomicU64::new(0),
        };
        let settings = GenSettings {
            backoff_ms: 1,
            ..GenSettings::default()
        };
        let trace = run_trace(
            &user,
            Attribute::Gender,
            DataStreamKind::ChatAssistant,
            &endpoint,
            &settings,
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
        )
        .unwrap();
        assert_eq!(trace.steps[0].label, None);
        assert!(trace.steps[0].rationale.contains("oracle error"));
        // The cue is still in the 10% prefix, so the protocol recovers.
        assert_eq!(trace.outcome.context_needed, Some(10));
    }

    fn matrix_users() -> Vec<UserRecord> {
        let chat = || stream_with_cue(DataStreamKind::ChatAssistant, 10, None);
        let search = || stream_with_cue(DataStreamKind::WebSearch, 10, None);
        let mut basic_a = user_with(vec![(DataStreamKind::ChatAssistant, chat())], Gender::Male);
        basic_a.user_id = "a".to_string();
        let mut basic_b = user_with(
            vec![
                (DataStreamKind::ChatAssistant, chat()),
                (DataStreamKind::WebSearch, search()),
            ],
            Gender::Female,
        );
        basic_b.user_id = "b".to_string();
        let mut extended = user_with(vec![(DataStreamKind::ChatAssistant, chat())], Gender::Male);
        extended.user_id = "c".to_string();
        extended.profile.religion = Some(crate::corpus::Religion::Hindu);
        extended.profile.education = Some(crate::corpus::Education::GraduateOrAbove);
        extended.profile.income = Some(crate::corpus::Income::From20kTo50k);
        extended.profile.voting = Some(crate::corpus::Voting::RulingParty);
        vec![basic_a, basic_b, extended]
    }

    #[test]
    fn matrix_covers_valid_combinations_and_reports_skips() {
        let users = matrix_users();
        let outcome = run_matrix(
            &users,
            &[Attribute::Age, Attribute::Gender],
            &[DataStreamKind::ChatAssistant],
            &MockOracle::new(),
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
            4,
            &BTreeSet::new(),
        );
        // 3 users × 2 attributes × 1 kind, nothing skipped.
        assert_eq!(outcome.traces.len(), 6);
        assert!(outcome.skipped.is_empty());
        assert!(outcome.errors.is_empty());
    }

    #[test]
    fn matrix_skips_missing_streams_with_reason() {
        let users = matrix_users();
        let outcome = run_matrix(
            &users,
            &[Attribute::Gender],
            &[DataStreamKind::WebSearch],
            &MockOracle::new(),
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
            2,
            &BTreeSet::new(),
        );
        assert_eq!(outcome.traces.len(), 1); // only user b has WebSearch
        assert_eq!(outcome.skipped.len(), 2);
        assert!(outcome.skipped.iter().all(|s| s.reason == "missing_stream"));
    }

    #[test]
    fn matrix_drops_country_for_extended_cohort_users() {
        let users = matrix_users();
        let outcome = run_matrix(
            &users,
            &[Attribute::Country],
            &[DataStreamKind::ChatAssistant, DataStreamKind::WebSearch],
            &MockOracle::new(),
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
            2,
            &BTreeSet::new(),
        );
        // Users a and b run country on chat only; c is dropped entirely.
        assert_eq!(outcome.traces.len(), 2);
        let reasons: BTreeSet<&str> = outcome.skipped.iter().map(|s| s.reason.as_str()).collect();
        assert!(reasons.contains("country_runs_on_chat_stream_only"));
        assert!(reasons.contains("country_dropped_for_extended_cohort"));
    }

    #[test]
    fn completed_keys_are_not_rerun() {
        let users = matrix_users();
        let endpoint = MockOracle::new();
        let first = run_matrix(
            &users,
            &[Attribute::Gender],
            &[DataStreamKind::ChatAssistant],
            &endpoint,
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
            2,
            &BTreeSet::new(),
        );
        let done: BTreeSet<TraceKey> = first.traces.iter().map(InferenceTrace::key).collect();
        let second = run_matrix(
            &users,
            &[Attribute::Gender],
            &[DataStreamKind::ChatAssistant],
            &endpoint,
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
            2,
            &done,
        );
        assert!(second.traces.is_empty());
    }

    #[test]
    fn trace_store_round_trips_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path().join("traces.jsonl"));
        let users = matrix_users();
        let outcome = run_matrix(
            &users,
            &[Attribute::Age],
            &[DataStreamKind::ChatAssistant],
            &MockOracle::new(),
            &GenSettings::default(),
            &PrefixSchedule::default(),
            &CountryAliases::bundled(),
            2,
            &BTreeSet::new(),
        );
        store.append_all(&outcome.traces).unwrap();
        let back = store.read_all().unwrap();
        assert_eq!(back, outcome.traces);
        assert_eq!(store.completed_keys().unwrap().len(), 3);
    }

    proptest::proptest! {
        // Prefix lengths follow the ceiling rule with a floor of one and
        // grow monotonically in k; the smallest covering k really is the
        // first schedule entry whose prefix reaches the index.
        #[test]
        fn prefix_rule_properties(len in 1usize..300, index in 0usize..300) {
            let schedule = PrefixSchedule::default();
            let mut last = 0usize;
            for &k in schedule.percentages() {
                let take = prefix_len(len, k);
                proptest::prop_assert!(take >= 1 && take <= len.max(1));
                proptest::prop_assert!(take >= last);
                proptest::prop_assert_eq!(
                    take,
                    ((k as f64 / 100.0 * len as f64).ceil() as usize).max(1)
                );
                last = take;
            }
            proptest::prop_assert_eq!(prefix_len(len, 100), len);

            if index < len {
                match smallest_covering_k(&schedule, len, index) {
                    Some(k_star) => {
                        proptest::prop_assert!(prefix_len(len, k_star) > index);
                        for &k in schedule.percentages().iter().filter(|&&k| k < k_star) {
                            proptest::prop_assert!(prefix_len(len, k) <= index);
                        }
                    }
                    None => proptest::prop_assert!(false, "every index below len is coverable"),
                }
            }
        }
    }
}
