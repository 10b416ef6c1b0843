//! Two-pass disclosure filtering plus taxonomy classification.
//!
//! Pass one flags standard PII entities (six kinds) on English-language
//! messages for the disclosure audit. Pass two classifies every message
//! SAFE/UNSAFE for explicit demographic self-disclosure via the LLM
//! endpoint; UNSAFE messages then receive one of twenty personal-data
//! categories. Cohort exclusion is driven by the verdicts alone.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{canonicalize_label, MessageStream};
use crate::gateway::templates::{render, TemplateId};
use crate::gateway::{complete, GenSettings, LlmEndpoint};
use crate::parallel::bounded_map;

const BUNDLED_GAZETTEER: &str = include_str!("../assets/gazetteer.tsv");
const BUNDLED_ENGLISH_WORDS: &str = include_str!("../assets/english_words.txt");

/// Default token-hit fraction above which a message counts as English.
pub const DEFAULT_ENGLISH_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("entity flagger failed on message {message_index}: {reason}")]
    FlaggerError {
        message_index: usize,
        reason: String,
    },
    #[error("gazetteer line {line}: expected kind<TAB>surface")]
    GazetteerFormat { line: usize },
    #[error("gazetteer line {line}: unknown entity kind {kind:?}")]
    GazetteerKind { line: usize, kind: String },
}

/// The six flagged entity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    Gpe,
    Loc,
    Norp,
    Person,
    Org,
    Fac,
}

impl EntityKind {
    pub fn name(&self) -> &'static str {
        match self {
            EntityKind::Gpe => "GPE",
            EntityKind::Loc => "LOC",
            EntityKind::Norp => "NORP",
            EntityKind::Person => "PERSON",
            EntityKind::Org => "ORG",
            EntityKind::Fac => "FAC",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GPE" => Ok(Self::Gpe),
            "LOC" => Ok(Self::Loc),
            "NORP" => Ok(Self::Norp),
            "PERSON" => Ok(Self::Person),
            "ORG" => Ok(Self::Org),
            "FAC" => Ok(Self::Fac),
            other => Err(format!("unknown entity kind: {other}")),
        }
    }
}

/// One entity hit within one message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityFlag {
    pub message_index: usize,
    pub entity_kind: EntityKind,
    pub surface: String,
}

/// Pluggable entity detector; the baseline is [`GazetteerFlagger`], and an
/// external NER service can sit behind the same interface.
pub trait EntityFlagger: Send + Sync {
    fn flag_text(&self, text: &str) -> Result<Vec<(EntityKind, String)>, String>;
}

/// Token-fraction English detector backed by a common-word list. A token
/// counts as English-like when its lowercased form is in the list, or when
/// it is a pure-ASCII alphanumeric token containing a digit (version
/// numbers, model names, and similar code-ish tokens).
#[derive(Debug, Clone)]
pub struct EnglishGate {
    words: HashSet<String>,
    pub threshold: f64,
}

impl Default for EnglishGate {
    fn default() -> Self {
        Self::bundled(DEFAULT_ENGLISH_THRESHOLD)
    }
}

impl EnglishGate {
    pub fn bundled(threshold: f64) -> Self {
        EnglishGate {
            words: BUNDLED_ENGLISH_WORDS
                .split_whitespace()
                .map(|w| w.to_lowercase())
                .collect(),
            threshold,
        }
    }

    pub fn from_words<I: IntoIterator<Item = String>>(words: I, threshold: f64) -> Self {
        EnglishGate {
            words: words.into_iter().map(|w| w.to_lowercase()).collect(),
            threshold,
        }
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn is_english(&self, text: &str) -> bool {
        let mut total = 0usize;
        let mut hits = 0usize;
        for raw in text.split_whitespace() {
            let token = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if token.is_empty() {
                continue;
            }
            total += 1;
            let lowered = token.to_lowercase();
            let code_like = token.is_ascii()
                && token.chars().all(|c| c.is_ascii_alphanumeric())
                && token.chars().any(|c| c.is_ascii_digit());
            if self.words.contains(&lowered) || code_like {
                hits += 1;
            }
        }
        total > 0 && (hits as f64) / (total as f64) >= self.threshold
    }
}

/// Word with byte span, used by gazetteer and capitalization matching.
struct Word<'a> {
    text: &'a str,
    start: usize,
    end: usize,
}

fn words_with_spans(text: &str) -> Vec<Word<'_>> {
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() || (c == '\'' && start.is_some()) {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            words.push(Word {
                text: &text[s..i],
                start: s,
                end: i,
            });
        }
    }
    if let Some(s) = start {
        words.push(Word {
            text: &text[s..],
            start: s,
            end: text.len(),
        });
    }
    words
}

/// Baseline flagger: gazetteer lookup over countries, cities, demonyms,
/// organizations, and landmarks, plus a capitalized-sequence heuristic that
/// tags unmatched runs of two or more capitalized words as PERSON, or ORG
/// when the run ends in a corporate suffix.
pub struct GazetteerFlagger {
    entries: Vec<(EntityKind, Vec<String>)>,
    common_words: HashSet<String>,
    org_suffixes: HashSet<String>,
}

impl Default for GazetteerFlagger {
    fn default() -> Self {
        Self::bundled()
    }
}

impl GazetteerFlagger {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_GAZETTEER).expect("bundled gazetteer is well-formed")
    }

    /// Parse a `kind<TAB>surface` table, one entry per line.
    pub fn parse(table: &str) -> Result<Self, FilterError> {
        let mut entries = Vec::new();
        for (i, line) in table.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, surface) = line
                .split_once('\t')
                .ok_or(FilterError::GazetteerFormat { line: i + 1 })?;
            let kind: EntityKind = kind.parse().map_err(|_| FilterError::GazetteerKind {
                line: i + 1,
                kind: kind.to_string(),
            })?;
            let tokens: Vec<String> = surface
                .split_whitespace()
                .map(|t| t.to_lowercase())
                .collect();
            if !tokens.is_empty() {
                entries.push((kind, tokens));
            }
        }
        Ok(GazetteerFlagger {
            entries,
            common_words: BUNDLED_ENGLISH_WORDS
                .split_whitespace()
                .map(|w| w.to_lowercase())
                .collect(),
            org_suffixes: [
                "inc",
                "ltd",
                "llc",
                "corp",
                "corporation",
                "company",
                "university",
                "institute",
                "bank",
                "technologies",
                "systems",
                "labs",
                "group",
                "agency",
                "ministry",
            ]
            .into_iter()
            .map(str::to_string)
            .collect(),
        })
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    fn is_capitalized(word: &str) -> bool {
        let mut chars = word.chars();
        match chars.next() {
            Some(first) => {
                first.is_uppercase() && word.chars().all(|c| c.is_alphabetic() || c == '\'')
            }
            None => false,
        }
    }
}

impl EntityFlagger for GazetteerFlagger {
    fn flag_text(&self, text: &str) -> Result<Vec<(EntityKind, String)>, String> {
        let words = words_with_spans(text);
        let lowered: Vec<String> = words.iter().map(|w| w.text.to_lowercase()).collect();
        let mut flags: Vec<(usize, EntityKind, String)> = Vec::new();
        let mut covered = vec![false; words.len()];

        for (kind, tokens) in &self.entries {
            if tokens.len() > words.len() {
                continue;
            }
            for start in 0..=words.len() - tokens.len() {
                if lowered[start..start + tokens.len()] == tokens[..] {
                    let span = &text[words[start].start..words[start + tokens.len() - 1].end];
                    flags.push((words[start].start, *kind, span.to_string()));
                    for c in covered.iter_mut().skip(start).take(tokens.len()) {
                        *c = true;
                    }
                }
            }
        }

        // Capitalized runs not already matched by the gazetteer.
        let mut i = 0;
        while i < words.len() {
            let in_run = !covered[i] && words[i].text != "I" && Self::is_capitalized(words[i].text);
            if !in_run {
                i += 1;
                continue;
            }
            let mut j = i;
            while j < words.len()
                && !covered[j]
                && words[j].text != "I"
                && Self::is_capitalized(words[j].text)
            {
                j += 1;
            }
            let run = &words[i..j];
            if run.len() >= 2 {
                // Title-case phrases made entirely of everyday words are noise.
                let informative = run
                    .iter()
                    .any(|w| !self.common_words.contains(&w.text.to_lowercase()));
                if informative {
                    let kind = if self
                        .org_suffixes
                        .contains(&run[run.len() - 1].text.to_lowercase())
                    {
                        EntityKind::Org
                    } else {
                        EntityKind::Person
                    };
                    let span = &text[run[0].start..run[run.len() - 1].end];
                    flags.push((run[0].start, kind, span.to_string()));
                }
            }
            i = j;
        }

        flags.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(flags.into_iter().map(|(_, k, s)| (k, s)).collect())
    }
}

/// Client for an external NER service behind the same interface as the
/// baseline flagger, for parity runs against a real tagger. Wire format:
/// POST `{"text": ...}` to the service URL, response is a JSON list of
/// `{"kind": "GPE", "surface": ...}` objects; unknown kinds are errors.
pub struct HttpEntityFlagger {
    url: String,
    client: reqwest::blocking::Client,
    timeout: std::time::Duration,
}

impl HttpEntityFlagger {
    pub fn new(url: impl Into<String>) -> Self {
        HttpEntityFlagger {
            url: url.into(),
            client: reqwest::blocking::Client::new(),
            timeout: std::time::Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: std::time::Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

#[derive(Debug, Deserialize)]
struct ServiceEntity {
    kind: String,
    surface: String,
}

impl EntityFlagger for HttpEntityFlagger {
    fn flag_text(&self, text: &str) -> Result<Vec<(EntityKind, String)>, String> {
        let response = self
            .client
            .post(&self.url)
            .timeout(self.timeout)
            .json(&serde_json::json!({ "text": text }))
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("flagger service returned {status}"));
        }
        let entities: Vec<ServiceEntity> = response.json().map_err(|e| e.to_string())?;
        entities
            .into_iter()
            .map(|e| {
                e.kind
                    .parse::<EntityKind>()
                    .map(|kind| (kind, e.surface))
                    .map_err(|err| err.to_string())
            })
            .collect()
    }
}

/// Run the entity pass over a stream. Messages failing the English gate
/// produce no flags; results come back sorted by message index.
pub fn flag_entities(
    stream: &MessageStream,
    flagger: &dyn EntityFlagger,
    gate: &EnglishGate,
) -> Result<Vec<EntityFlag>, FilterError> {
    let mut flags = Vec::new();
    for msg in stream.iter() {
        if !gate.is_english(&msg.text) {
            continue;
        }
        let hits = flagger
            .flag_text(&msg.text)
            .map_err(|reason| FilterError::FlaggerError {
                message_index: msg.index,
                reason,
            })?;
        flags.extend(hits.into_iter().map(|(entity_kind, surface)| EntityFlag {
            message_index: msg.index,
            entity_kind,
            surface,
        }));
    }
    flags.sort_by_key(|f| f.message_index);
    Ok(flags)
}

/// SAFE/UNSAFE verdict for one message. Unresolved records an oracle
/// failure after retries; unresolved users are ineligible for the cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VerdictKind {
    Safe,
    Unsafe,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub message_index: usize,
    pub verdict: VerdictKind,
    pub raw: String,
}

/// Derive the verdict from a raw completion: search case-insensitively for
/// the standalone tokens UNSAFE then SAFE; UNSAFE wins when both appear,
/// neither means Unresolved. Standalone matching keeps the SAFE inside
/// "UNSAFE" from counting.
pub fn parse_safety_verdict(raw: &str) -> VerdictKind {
    let mut saw_safe = false;
    for word in words_with_spans(raw) {
        if word.text.eq_ignore_ascii_case("unsafe") {
            return VerdictKind::Unsafe;
        }
        if word.text.eq_ignore_ascii_case("safe") {
            saw_safe = true;
        }
    }
    if saw_safe {
        VerdictKind::Safe
    } else {
        VerdictKind::Unresolved
    }
}

/// Classify every message SAFE/UNSAFE. Total over the stream: one verdict
/// per message in index order; oracle failures become Unresolved verdicts
/// rather than errors.
pub fn classify_safety(
    stream: &MessageStream,
    endpoint: &dyn LlmEndpoint,
    settings: &GenSettings,
    concurrency: usize,
) -> Vec<SafetyVerdict> {
    let messages: Vec<_> = stream.iter().collect();
    bounded_map(&messages, concurrency, |_, msg| {
        let prompt = match render(TemplateId::Safety, None, &[msg.text.as_str()]) {
            Ok(p) => p,
            Err(e) => {
                return SafetyVerdict {
                    message_index: msg.index,
                    verdict: VerdictKind::Unresolved,
                    raw: format!("render error: {e}"),
                }
            }
        };
        match complete(endpoint, &prompt, settings) {
            Ok(raw) => SafetyVerdict {
                message_index: msg.index,
                verdict: parse_safety_verdict(&raw),
                raw,
            },
            Err(e) => SafetyVerdict {
                message_index: msg.index,
                verdict: VerdictKind::Unresolved,
                raw: format!("oracle error: {e}"),
            },
        }
    })
}

/// The twenty personal-information categories. `name()` is the canonical
/// spelling used in emitted tables; matching also accepts the spellings the
/// classification prompt lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Category {
    JobAndEducation,
    LifestyleAndHabits,
    MentalState,
    LocationAndMobility,
    Wealth,
    FamilyLife,
    PhysicalHealth,
    Religion,
    EthnicityAndCitizenship,
    PhysicalTraits,
    PersonalIdentifiers,
    AccountCredentials,
    RecreationalConsumption,
    SexualAndDatingActivities,
    PoliticalViews,
    Age,
    MentalHealth,
    CriminalRecords,
    Gender,
    SexualOrientation,
}

impl Category {
    pub const ALL: [Category; 20] = [
        Category::JobAndEducation,
        Category::LifestyleAndHabits,
        Category::MentalState,
        Category::LocationAndMobility,
        Category::Wealth,
        Category::FamilyLife,
        Category::PhysicalHealth,
        Category::Religion,
        Category::EthnicityAndCitizenship,
        Category::PhysicalTraits,
        Category::PersonalIdentifiers,
        Category::AccountCredentials,
        Category::RecreationalConsumption,
        Category::SexualAndDatingActivities,
        Category::PoliticalViews,
        Category::Age,
        Category::MentalHealth,
        Category::CriminalRecords,
        Category::Gender,
        Category::SexualOrientation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::JobAndEducation => "Job and education",
            Category::LifestyleAndHabits => "Lifestyle and habits",
            Category::MentalState => "Mental state, personality, mood",
            Category::LocationAndMobility => "Location and mobility",
            Category::Wealth => "Wealth, salary",
            Category::FamilyLife => "Family life and relationships",
            Category::PhysicalHealth => "Physical health, diagnosis",
            Category::Religion => "Religion",
            Category::EthnicityAndCitizenship => "Ethnicity and citizenship",
            Category::PhysicalTraits => "Physical traits",
            Category::PersonalIdentifiers => "Personal identifiers",
            Category::AccountCredentials => "Account credentials",
            Category::RecreationalConsumption => "Recreational consumption",
            Category::SexualAndDatingActivities => "Sexual and dating activities",
            Category::PoliticalViews => "Political views",
            Category::Age => "Age",
            Category::MentalHealth => "Mental health",
            Category::CriminalRecords => "Criminal records",
            Category::Gender => "Gender",
            Category::SexualOrientation => "Sexual orientation",
        }
    }

    /// Alternative spelling used by the classification prompt, where it
    /// differs from the canonical name.
    fn prompt_spelling(&self) -> Option<&'static str> {
        match self {
            Category::MentalState => Some("Mental State and Personality Mood"),
            Category::LocationAndMobility => Some("Location and Mobility Homeplace"),
            Category::Wealth => Some("Wealth Details Salary"),
            Category::FamilyLife => Some("Family Life and Relationship"),
            Category::PhysicalHealth => Some("Physical Health Diagnosis"),
            _ => None,
        }
    }

    /// Match an oracle output against the closed set by canonicalized exact
    /// match (commas and periods ignored).
    pub fn match_label(raw: &str) -> Option<Category> {
        let key = Self::match_key(raw);
        Category::ALL.into_iter().find(|c| {
            Self::match_key(c.name()) == key
                || c.prompt_spelling()
                    .is_some_and(|alt| Self::match_key(alt) == key)
        })
    }

    fn match_key(s: &str) -> String {
        canonicalize_label(&s.replace([',', '.'], " "))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Category {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Category::match_label(&s).ok_or_else(|| format!("unknown category: {s}"))
    }
}

impl From<Category> for String {
    fn from(c: Category) -> String {
        c.name().to_string()
    }
}

/// Taxonomy assignment for one UNSAFE message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLabel {
    pub message_index: usize,
    pub category: Category,
}

/// An oracle output that matched none of the twenty categories; excluded
/// from distributions, counted in the run report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownCategory {
    pub message_index: usize,
    pub raw_label: String,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryOutcome {
    pub labels: Vec<CategoryLabel>,
    pub unknown: Vec<UnknownCategory>,
}

/// Classify flagged (UNSAFE) messages into the twenty categories.
/// `flagged` pairs each message index with its text.
pub fn classify_category(
    flagged: &[(usize, String)],
    endpoint: &dyn LlmEndpoint,
    settings: &GenSettings,
    concurrency: usize,
) -> CategoryOutcome {
    let raw_results = bounded_map(flagged, concurrency, |_, (index, text)| {
        let prompt = match render(TemplateId::Taxonomy, None, &[text.as_str()]) {
            Ok(p) => p,
            Err(e) => return (*index, Err(format!("render error: {e}"))),
        };
        match complete(endpoint, &prompt, settings) {
            Ok(raw) => (*index, Ok(raw)),
            Err(e) => (*index, Err(format!("oracle error: {e}"))),
        }
    });

    let mut outcome = CategoryOutcome::default();
    for (message_index, result) in raw_results {
        match result {
            Ok(raw) => match Category::match_label(raw.trim()) {
                Some(category) => outcome.labels.push(CategoryLabel {
                    message_index,
                    category,
                }),
                None => outcome.unknown.push(UnknownCategory {
                    message_index,
                    raw_label: raw.trim().to_string(),
                }),
            },
            Err(raw_label) => outcome.unknown.push(UnknownCategory {
                message_index,
                raw_label,
            }),
        }
    }
    outcome
}

/// Per-stream filter verdicts, the unit written to the flags file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub user_id: String,
    pub kind: crate::corpus::DataStreamKind,
    pub entity_flags: Vec<EntityFlag>,
    pub verdicts: Vec<SafetyVerdict>,
    pub categories: Vec<CategoryLabel>,
    pub unknown_categories: Vec<UnknownCategory>,
}

impl FlagRecord {
    /// Indices of messages with an UNSAFE verdict, ascending.
    pub fn unsafe_indices(&self) -> Vec<usize> {
        self.verdicts
            .iter()
            .filter(|v| v.verdict == VerdictKind::Unsafe)
            .map(|v| v.message_index)
            .collect()
    }

    pub fn has_unresolved(&self) -> bool {
        self.verdicts
            .iter()
            .any(|v| v.verdict == VerdictKind::Unresolved)
    }
}

/// Run both passes and the taxonomy over one stream.
#[allow(clippy::too_many_arguments)]
pub fn run_filter(
    user_id: &str,
    kind: crate::corpus::DataStreamKind,
    stream: &MessageStream,
    flagger: &dyn EntityFlagger,
    gate: &EnglishGate,
    endpoint: &dyn LlmEndpoint,
    settings: &GenSettings,
    concurrency: usize,
) -> Result<FlagRecord, FilterError> {
    let entity_flags = flag_entities(stream, flagger, gate)?;
    let verdicts = classify_safety(stream, endpoint, settings, concurrency);
    let flagged: Vec<(usize, String)> = verdicts
        .iter()
        .filter(|v| v.verdict == VerdictKind::Unsafe)
        .map(|v| (v.message_index, stream.0[v.message_index].text.clone()))
        .collect();
    let outcome = classify_category(&flagged, endpoint, settings, concurrency);
    Ok(FlagRecord {
        user_id: user_id.to_string(),
        kind,
        entity_flags,
        verdicts,
        categories: outcome.labels,
        unknown_categories: outcome.unknown,
    })
}
