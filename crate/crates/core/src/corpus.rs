//! Shared domain types: messages, streams, demographic profiles, user records.
//!
//! Everything downstream (filtering, auditing, inference, evaluation) consumes
//! these types. They are immutable after construction and safe to share across
//! threads. The canonical on-disk form is one JSON-encoded [`UserRecord`] per
//! line, UTF-8, streams keyed by [`DataStreamKind`] names.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Canonical form for categorical labels: trimmed, case-folded, dash variants
/// mapped to ASCII hyphen, internal whitespace runs collapsed to one space.
///
/// Survey exports and LLM outputs disagree on dashes and case; comparisons
/// throughout the pipeline happen in this form. Idempotent.
pub fn canonicalize_label(s: &str) -> String {
    let folded: String = s
        .chars()
        .map(|c| match c {
            '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' | '\u{2212}' => '-',
            other => other,
        })
        .collect();
    folded
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// The data source a message stream was exported from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DataStreamKind {
    ChatAssistant,
    WebSearch,
    VideoSearch,
    VideoWatch,
}

impl DataStreamKind {
    pub const ALL: [DataStreamKind; 4] = [
        DataStreamKind::ChatAssistant,
        DataStreamKind::WebSearch,
        DataStreamKind::VideoSearch,
        DataStreamKind::VideoWatch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DataStreamKind::ChatAssistant => "ChatAssistant",
            DataStreamKind::WebSearch => "WebSearch",
            DataStreamKind::VideoSearch => "VideoSearch",
            DataStreamKind::VideoWatch => "VideoWatch",
        }
    }

    /// Phrase substituted into the data-source slot of cross-platform prompts.
    pub fn source_phrase(&self) -> &'static str {
        match self {
            DataStreamKind::ChatAssistant => "conversation history",
            DataStreamKind::WebSearch => "google search history",
            DataStreamKind::VideoSearch => "YouTube search history",
            DataStreamKind::VideoWatch => "YouTube watch history",
        }
    }
}

impl fmt::Display for DataStreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataStreamKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ChatAssistant" => Ok(Self::ChatAssistant),
            "WebSearch" => Ok(Self::WebSearch),
            "VideoSearch" => Ok(Self::VideoSearch),
            "VideoWatch" => Ok(Self::VideoWatch),
            other => Err(format!("unknown DataStreamKind: {other}")),
        }
    }
}

/// One user-authored item from a data stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    /// 0-based ordinal within the user's stream.
    pub index: usize,
    /// Epoch seconds; absent when the export omits times.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    pub text: String,
    pub source: DataStreamKind,
}

/// Chronologically ordered user-authored messages from one source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageStream(pub Vec<Message>);

impl MessageStream {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Message> {
        self.0.iter()
    }

    /// Build a stream from raw texts, assigning contiguous 0-based indices.
    pub fn from_texts<I, S>(kind: DataStreamKind, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MessageStream(
            texts
                .into_iter()
                .enumerate()
                .map(|(index, text)| Message {
                    index,
                    timestamp: None,
                    text: text.into(),
                    source: kind,
                })
                .collect(),
        )
    }
}

macro_rules! closed_label {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            pub fn label(&self) -> &'static str {
                match self {
                    $($name::$variant => $label,)+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let canon = canonicalize_label(s);
                $(if canon == canonicalize_label($label) {
                    return Ok($name::$variant);
                })+
                Err(format!(concat!("unknown ", stringify!($name), " label: {}"), s))
            }
        }

        impl TryFrom<String> for $name {
            type Error = String;
            fn try_from(s: String) -> Result<Self, Self::Error> {
                s.parse()
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.label().to_string()
            }
        }
    };
}

closed_label!(
    /// Survey age bracket.
    AgeBracket {
        From18To24 => "18-24",
        From25To34 => "25-34",
        From35To44 => "35-44",
        Over45 => "45+",
    }
);

closed_label!(
    /// Gender as recorded by the donation platform.
    Gender {
        Male => "Male",
        Female => "Female",
    }
);

closed_label!(
    /// Religion, extended-survey attribute.
    Religion {
        Hindu => "hindu",
        Muslim => "muslim",
        Christian => "christian",
        Other => "other",
    }
);

closed_label!(
    /// Highest education level completed, extended-survey attribute.
    Education {
        Class9To10 => "class_9_10",
        Class11To12Diploma => "class_11_12_diploma",
        GraduateOrAbove => "graduate_or_above",
    }
);

closed_label!(
    /// Monthly household income bracket, extended-survey attribute.
    Income {
        LessThan20k => "less_than_20k",
        From20kTo50k => "20k_to_50k",
        From50kTo1Lakh => "50k_to_1lakh",
        OneLakhOrMore => "1lakh_or_more",
    }
);

closed_label!(
    /// Voting preference at the most recent national election.
    Voting {
        RulingParty => "ruling_party",
        MainOpposition => "main_opposition",
        AnotherParty => "another_party",
    }
);

/// Ground-truth survey labels. The three core fields are always present;
/// the five extended fields exist only for cross-platform-cohort users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicProfile {
    pub age_bracket: AgeBracket,
    pub gender: Gender,
    pub country: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub religion: Option<Religion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education: Option<Education>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub income: Option<Income>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voting: Option<Voting>,
}

impl DemographicProfile {
    /// True when any of the five extended-survey fields is present.
    pub fn has_extended(&self) -> bool {
        self.religion.is_some()
            || self.education.is_some()
            || self.income.is_some()
            || self.voting.is_some()
    }
}

/// One donor: survey profile plus their exported streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub profile: DemographicProfile,
    pub streams: BTreeMap<DataStreamKind, MessageStream>,
}

impl UserRecord {
    pub fn chat_stream(&self) -> Option<&MessageStream> {
        self.streams.get(&DataStreamKind::ChatAssistant)
    }
}

/// A demographic attribute the inference protocol can target.
///
/// `Country` is open-label (the adversary may emit any country name); the
/// rest are closed-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Age,
    Gender,
    Country,
    Religion,
    Education,
    Income,
    Voting,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::Age,
        Attribute::Gender,
        Attribute::Country,
        Attribute::Religion,
        Attribute::Education,
        Attribute::Income,
        Attribute::Voting,
    ];

    /// The three attributes surveyed for every donor.
    pub const CORE: [Attribute; 3] = [Attribute::Age, Attribute::Gender, Attribute::Country];

    pub fn name(&self) -> &'static str {
        match self {
            Attribute::Age => "Age",
            Attribute::Gender => "Gender",
            Attribute::Country => "Country",
            Attribute::Religion => "Religion",
            Attribute::Education => "Education",
            Attribute::Income => "Income",
            Attribute::Voting => "Voting",
        }
    }

    /// Only present in the extended (cross-platform cohort) survey.
    pub fn is_extended(&self) -> bool {
        matches!(
            self,
            Attribute::Religion | Attribute::Education | Attribute::Income | Attribute::Voting
        )
    }

    pub fn is_open_label(&self) -> bool {
        matches!(self, Attribute::Country)
    }

    /// Closed label set in declared order; `None` for the open-label attribute.
    pub fn closed_set(&self) -> Option<Vec<String>> {
        fn labels<T: fmt::Display>(all: &[T]) -> Vec<String> {
            all.iter()
                .map(|v| canonicalize_label(&v.to_string()))
                .collect()
        }
        match self {
            Attribute::Age => Some(labels(AgeBracket::ALL)),
            Attribute::Gender => Some(labels(Gender::ALL)),
            Attribute::Country => None,
            Attribute::Religion => Some(labels(Religion::ALL)),
            Attribute::Education => Some(labels(Education::ALL)),
            Attribute::Income => Some(labels(Income::ALL)),
            Attribute::Voting => Some(labels(Voting::ALL)),
        }
    }

    /// Canonicalized ground-truth label for this attribute, if surveyed.
    pub fn truth_label(&self, profile: &DemographicProfile) -> Option<String> {
        let raw = match self {
            Attribute::Age => profile.age_bracket.to_string(),
            Attribute::Gender => profile.gender.to_string(),
            Attribute::Country => profile.country.clone(),
            Attribute::Religion => profile.religion?.to_string(),
            Attribute::Education => profile.education?.to_string(),
            Attribute::Income => profile.income?.to_string(),
            Attribute::Voting => profile.voting?.to_string(),
        };
        Some(canonicalize_label(&raw))
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match canonicalize_label(s).as_str() {
            "age" => Ok(Self::Age),
            "gender" => Ok(Self::Gender),
            "country" => Ok(Self::Country),
            "religion" => Ok(Self::Religion),
            "education" => Ok(Self::Education),
            "income" => Ok(Self::Income),
            "voting" => Ok(Self::Voting),
            other => Err(format!("unknown Attribute: {other}")),
        }
    }
}

/// One invariant violation found by [`validate_user`]. Violations are data,
/// not failures: a malformed record is reported, never panicked over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub user_id: String,
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.user_id, self.field, self.rule)
    }
}

/// Check every type invariant on a record; empty result means well-formed.
pub fn validate_user(record: &UserRecord) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut push = |field: &str, rule: String| {
        violations.push(Violation {
            user_id: record.user_id.clone(),
            field: field.to_string(),
            rule,
        });
    };

    if record.chat_stream().is_none() {
        push(
            "streams",
            "ChatAssistant stream must be present".to_string(),
        );
    }

    for (kind, stream) in &record.streams {
        for (pos, msg) in stream.iter().enumerate() {
            if msg.index != pos {
                push(
                    &format!("streams.{kind}[{pos}].index"),
                    format!(
                        "indices must be unique and contiguous from 0; found {} at position {pos}",
                        msg.index
                    ),
                );
            }
            if msg.text.trim().is_empty() {
                push(
                    &format!("streams.{kind}[{pos}].text"),
                    "text must be non-empty after whitespace trimming".to_string(),
                );
            }
            if msg.source != *kind {
                push(
                    &format!("streams.{kind}[{pos}].source"),
                    format!("source {} does not match stream key {kind}", msg.source),
                );
            }
        }
    }

    let extended = [
        ("religion", record.profile.religion.is_some()),
        ("education", record.profile.education.is_some()),
        ("income", record.profile.income.is_some()),
        ("voting", record.profile.voting.is_some()),
    ];
    let present = extended.iter().filter(|(_, p)| *p).count();
    if present != 0 && present != extended.len() {
        let missing: Vec<&str> = extended
            .iter()
            .filter(|(_, p)| !*p)
            .map(|(name, _)| *name)
            .collect();
        push(
            "profile",
            format!(
                "extended survey fields must be all present or all absent; missing: {}",
                missing.join(", ")
            ),
        );
    }

    violations
}

/// Serialize records to the canonical corpus form: one JSON object per line.
pub fn write_corpus<W: std::io::Write>(
    out: &mut W,
    records: &[UserRecord],
) -> Result<(), std::io::Error> {
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a canonical corpus file; names the offending line on failure.
pub fn read_corpus(input: &str) -> Result<Vec<UserRecord>, String> {
    input
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| format!("corpus line {}: {e}", i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_record() -> UserRecord {
        let mut streams = BTreeMap::new();
        streams.insert(
            DataStreamKind::ChatAssistant,
            MessageStream::from_texts(
                DataStreamKind::ChatAssistant,
                ["how do i sort a vec", "explain lifetimes"],
            ),
        );
        UserRecord {
            user_id: "u0001".to_string(),
            profile: DemographicProfile {
                age_bracket: AgeBracket::From18To24,
                gender: Gender::Female,
                country: "India".to_string(),
                religion: None,
                education: None,
                income: None,
                voting: None,
            },
            streams,
        }
    }

    #[test]
    fn well_formed_record_has_no_violations() {
        assert!(validate_user(&sample_record()).is_empty());
    }

    #[test]
    fn index_gap_is_reported() {
        let mut record = sample_record();
        record
            .streams
            .get_mut(&DataStreamKind::ChatAssistant)
            .unwrap()
            .0[1]
            .index = 2;
        let violations = validate_user(&record);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].rule.contains("contiguous"));
        assert_eq!(violations[0].user_id, "u0001");
    }

    #[test]
    fn en_dash_age_bracket_canonicalizes() {
        // Survey exports sometimes use an en-dash in the bracket.
        let parsed: AgeBracket = "18\u{2013}24".parse().unwrap();
        assert_eq!(parsed, AgeBracket::From18To24);
        let record = sample_record();
        assert!(validate_user(&record).is_empty());
    }

    #[test]
    fn missing_chat_stream_is_reported() {
        let mut record = sample_record();
        record.streams.clear();
        let violations = validate_user(&record);
        assert!(violations.iter().any(|v| v.rule.contains("ChatAssistant")));
    }

    #[test]
    fn empty_text_is_reported() {
        let mut record = sample_record();
        record
            .streams
            .get_mut(&DataStreamKind::ChatAssistant)
            .unwrap()
            .0[0]
            .text = "   ".to_string();
        let violations = validate_user(&record);
        assert!(violations.iter().any(|v| v.rule.contains("non-empty")));
    }

    #[test]
    fn partial_extended_profile_is_reported() {
        let mut record = sample_record();
        record.profile.religion = Some(Religion::Hindu);
        let violations = validate_user(&record);
        assert!(violations.iter().any(|v| v.field == "profile"));
    }

    #[test]
    fn canonicalize_folds_dashes_case_and_whitespace() {
        assert_eq!(canonicalize_label("  18\u{2013}24 "), "18-24");
        assert_eq!(
            canonicalize_label("Job  and\tEducation"),
            "job and education"
        );
        assert_eq!(canonicalize_label("GERMANY"), "germany");
        assert_eq!(canonicalize_label(""), "");
    }

    #[test]
    fn closed_sets_match_declared_order() {
        assert_eq!(
            Attribute::Age.closed_set().unwrap(),
            vec!["18-24", "25-34", "35-44", "45+"]
        );
        assert_eq!(Attribute::Country.closed_set(), None);
        assert_eq!(
            Attribute::Voting.closed_set().unwrap(),
            vec!["ruling_party", "main_opposition", "another_party"]
        );
    }

    #[test]
    fn truth_labels_are_canonical() {
        let record = sample_record();
        assert_eq!(
            Attribute::Age.truth_label(&record.profile),
            Some("18-24".to_string())
        );
        assert_eq!(
            Attribute::Gender.truth_label(&record.profile),
            Some("female".to_string())
        );
        assert_eq!(
            Attribute::Country.truth_label(&record.profile),
            Some("india".to_string())
        );
        assert_eq!(Attribute::Religion.truth_label(&record.profile), None);
    }

    #[test]
    fn corpus_round_trip_preserves_record() {
        let records = vec![sample_record()];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"ChatAssistant\""));
        let back = read_corpus(&text).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn profile_labels_serialize_exactly() {
        let profile = DemographicProfile {
            age_bracket: AgeBracket::Over45,
            gender: Gender::Male,
            country: "Nigeria".to_string(),
            religion: Some(Religion::Christian),
            education: Some(Education::GraduateOrAbove),
            income: Some(Income::From20kTo50k),
            voting: Some(Voting::MainOpposition),
        };
        let json = serde_json::to_value(&profile).unwrap();
        assert_eq!(json["age_bracket"], "45+");
        assert_eq!(json["gender"], "Male");
        assert_eq!(json["religion"], "christian");
        assert_eq!(json["education"], "graduate_or_above");
        assert_eq!(json["income"], "20k_to_50k");
        assert_eq!(json["voting"], "main_opposition");
    }

    fn arb_profile() -> impl Strategy<Value = DemographicProfile> {
        (
            prop::sample::select(AgeBracket::ALL.to_vec()),
            prop::sample::select(Gender::ALL.to_vec()),
            prop::sample::select(vec!["Brazil", "India", "Nigeria", "Pakistan"]),
            prop::option::of(prop::sample::select(Religion::ALL.to_vec())),
        )
            .prop_map(
                |(age_bracket, gender, country, religion)| DemographicProfile {
                    age_bracket,
                    gender,
                    country: country.to_string(),
                    education: religion.map(|_| Education::Class9To10),
                    income: religion.map(|_| Income::LessThan20k),
                    voting: religion.map(|_| Voting::RulingParty),
                    religion,
                },
            )
    }

    fn arb_record() -> impl Strategy<Value = UserRecord> {
        (
            "[a-z0-9]{1,8}",
            arb_profile(),
            prop::collection::vec("[a-zA-Z0-9 ?']{1,40}", 1..8),
            prop::collection::vec("[a-zA-Z0-9 ?']{1,30}", 0..4),
        )
            .prop_map(|(user_id, profile, chat, search)| {
                let mut streams = BTreeMap::new();
                streams.insert(
                    DataStreamKind::ChatAssistant,
                    MessageStream::from_texts(DataStreamKind::ChatAssistant, chat),
                );
                if !search.is_empty() {
                    streams.insert(
                        DataStreamKind::WebSearch,
                        MessageStream::from_texts(DataStreamKind::WebSearch, search),
                    );
                }
                UserRecord {
                    user_id,
                    profile,
                    streams,
                }
            })
    }

    proptest! {
        #[test]
        fn serde_round_trip(record in arb_record()) {
            let line = serde_json::to_string(&record).unwrap();
            let back: UserRecord = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, record);
        }

        #[test]
        fn canonicalize_is_idempotent(s in "\\PC{0,40}") {
            let once = canonicalize_label(&s);
            prop_assert_eq!(canonicalize_label(&once), once.clone());
        }
    }
}
