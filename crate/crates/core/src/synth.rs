//! Synthetic corpora with planted, recoverable ground truth.
//!
//! Generation is a pure function of the [`SynthSpec`]. Disclosure-planted
//! messages consist of a marker sentence the mock safety filter flags
//! UNSAFE; cue-planted messages carry `((cue:ATTR=VALUE))` tokens whose
//! value matches the user's true profile; everything else comes from a
//! neutral filler pool verified at generation time to pass the SAFE branch
//! and produce zero gazetteer hits. Profile values are drawn from pools
//! that exclude the mock oracle's fixed default answers, so a planted cue
//! is the only way the mock ever matches ground truth.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    AgeBracket, Attribute, DataStreamKind, DemographicProfile, Education, Gender, Income, Message,
    MessageStream, Religion, UserRecord, Voting,
};
use crate::filter::{Category, EnglishGate, EntityFlagger, GazetteerFlagger};
use crate::gateway::mock::{cue_token, UNSAFE_MARKERS};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid spec at {field}: {reason}")]
    SpecInvalid { field: String, reason: String },
    #[error("filler pool self-test failed: {0}")]
    FillerPoolContaminated(String),
}

/// Neutral filler sentences: lowercase (no capitalized-sequence hits), no
/// gazetteer surfaces, mostly common words so the English gate passes.
pub const FILLER_POOL: [&str; 18] = [
    "how do i center a div in css",
    "what is the difference between tcp and udp",
    "explain recursion with a simple example",
    "best way to learn piano chords at home",
    "how to make sourdough starter at home",
    "write a regex to match email addresses for me",
    "why is my code throwing an error",
    "can you suggest a good workout plan for me",
    "how do i convert a csv file to json",
    "what are some good books on economics",
    "tips for staying focused while studying",
    "how do i set up a reading habit",
    "explain how the internet works in simple words",
    "what should i cook with rice and beans",
    "how to fix a leaking kitchen tap",
    "give me some good ideas for a small gift",
    "how do i train for a long run",
    "what is a good way to save money every month",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

/// Where disclosure markers land in each user's chat stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisclosurePlan {
    /// No flagged messages at all.
    None,
    /// One marker per user, always at this index.
    FirstFlagAt(usize),
    /// One marker per user at a seeded random index.
    RandomFirstFlag,
    /// Markers at every m-th message (indices m-1, 2m-1, ...).
    EveryNth(usize),
    /// Every message is a marker.
    All,
}

/// Where a cue for one attribute lands in each user's streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuePlacement {
    AtIndex(usize),
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuePlan {
    pub attribute: Attribute,
    pub placement: CuePlacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub messages: CountRange,
    /// Streams generated per user; ChatAssistant is always required.
    pub streams: Vec<DataStreamKind>,
    /// Give every user the five extended survey fields.
    pub extended_profiles: bool,
    pub disclosure: DisclosurePlan,
    /// Weighted category plan for flagged messages; without one, the
    /// marker sentence's own category applies.
    pub category_weights: Option<Vec<(Category, f64)>>,
    pub cues: Vec<CuePlan>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 10,
            messages: CountRange { min: 20, max: 40 },
            streams: vec![DataStreamKind::ChatAssistant],
            extended_profiles: false,
            disclosure: DisclosurePlan::None,
            category_weights: None,
            cues: Vec::new(),
            seed: 0,
        }
    }
}

/// One planted disclosure: where it sits and the category it must classify
/// into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFlag {
    pub index: usize,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCue {
    pub attribute: Attribute,
    pub value: String,
    pub index: usize,
}

/// Everything the pipeline is expected to recover for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUser {
    pub user_id: String,
    pub profile: DemographicProfile,
    pub n_messages: usize,
    pub flags: Vec<PlantedFlag>,
    pub cues: Vec<PlantedCue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub users: Vec<PlantedUser>,
}

impl Manifest {
    pub fn user(&self, user_id: &str) -> Option<&PlantedUser> {
        self.users.iter().find(|u| u.user_id == user_id)
    }
}

fn validate(spec: &SynthSpec) -> Result<(), SynthError> {
    let invalid = |field: &str, reason: String| {
        Err(SynthError::SpecInvalid {
            field: field.to_string(),
            reason,
        })
    };
    if spec.messages.min == 0 || spec.messages.min > spec.messages.max {
        return invalid(
            "messages",
            format!(
                "need 1 <= min <= max, got {}..{}",
                spec.messages.min, spec.messages.max
            ),
        );
    }
    if !spec.streams.contains(&DataStreamKind::ChatAssistant) {
        return invalid("streams", "ChatAssistant stream is required".to_string());
    }
    match spec.disclosure {
        DisclosurePlan::FirstFlagAt(i) if i >= spec.messages.min => {
            return invalid(
                "disclosure.first_flag_at",
                format!(
                    "index {i} must be < every message count (min {})",
                    spec.messages.min
                ),
            );
        }
        DisclosurePlan::EveryNth(0) => {
            return invalid("disclosure.every_nth", "period must be >= 1".to_string());
        }
        _ => {}
    }
    for (i, cue) in spec.cues.iter().enumerate() {
        if let CuePlacement::AtIndex(at) = cue.placement {
            if at >= spec.messages.min {
                return invalid(
                    &format!("cues[{i}].at_index"),
                    format!(
                        "index {at} must be < every message count (min {})",
                        spec.messages.min
                    ),
                );
            }
        }
        if cue.attribute.is_extended() && !spec.extended_profiles {
            return invalid(
                &format!("cues[{i}].attribute"),
                format!("{} requires extended_profiles", cue.attribute),
            );
        }
    }
    if let Some(weights) = &spec.category_weights {
        if weights.is_empty() {
            return invalid(
                "category_weights",
                "must be non-empty when given".to_string(),
            );
        }
        if weights.iter().any(|(_, w)| *w <= 0.0 || !w.is_finite()) {
            return invalid("category_weights", "weights must be positive".to_string());
        }
    }
    Ok(())
}

/// Verify pool sentences are inert: SAFE under the mock's marker rule,
/// English-gated in, and free of gazetteer or heuristic entity hits.
fn self_test_filler_pool() -> Result<(), SynthError> {
    let gate = EnglishGate::default();
    let flagger = GazetteerFlagger::bundled();
    for filler in FILLER_POOL {
        if UNSAFE_MARKERS
            .iter()
            .any(|(marker, _)| filler.contains(marker))
        {
            return Err(SynthError::FillerPoolContaminated(format!(
                "{filler:?} contains an unsafe marker"
            )));
        }
        if !gate.is_english(filler) {
            return Err(SynthError::FillerPoolContaminated(format!(
                "{filler:?} fails the English gate"
            )));
        }
        let hits = flagger
            .flag_text(filler)
            .map_err(SynthError::FillerPoolContaminated)?;
        if !hits.is_empty() {
            return Err(SynthError::FillerPoolContaminated(format!(
                "{filler:?} produces entity flags: {hits:?}"
            )));
        }
    }
    Ok(())
}

/// Value pools per attribute, excluding the mock oracle's default answer
/// for that attribute.
fn profile_from(rng: &mut ChaCha8Rng, extended: bool) -> DemographicProfile {
    let age = *[
        AgeBracket::From18To24,
        AgeBracket::From25To34,
        AgeBracket::From35To44,
    ]
    .choose(rng)
    .unwrap();
    let gender = Gender::Female;
    let country = *["Brazil", "India", "Nigeria", "Pakistan"]
        .choose(rng)
        .unwrap();
    let (religion, education, income, voting) = if extended {
        (
            Some(
                *[Religion::Hindu, Religion::Muslim, Religion::Christian]
                    .choose(rng)
                    .unwrap(),
            ),
            Some(
                *[Education::Class11To12Diploma, Education::GraduateOrAbove]
                    .choose(rng)
                    .unwrap(),
            ),
            Some(
                *[
                    Income::From20kTo50k,
                    Income::From50kTo1Lakh,
                    Income::OneLakhOrMore,
                ]
                .choose(rng)
                .unwrap(),
            ),
            Some(
                *[Voting::RulingParty, Voting::MainOpposition]
                    .choose(rng)
                    .unwrap(),
            ),
        )
    } else {
        (None, None, None, None)
    };
    DemographicProfile {
        age_bracket: age,
        gender,
        country: country.to_string(),
        religion,
        education,
        income,
        voting,
    }
}

fn flag_indices(plan: &DisclosurePlan, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match plan {
        DisclosurePlan::None => Vec::new(),
        DisclosurePlan::FirstFlagAt(i) => vec![*i],
        DisclosurePlan::RandomFirstFlag => vec![rng.gen_range(0..n)],
        DisclosurePlan::EveryNth(m) => (0..n).filter(|i| (i + 1) % m == 0).collect(),
        DisclosurePlan::All => (0..n).collect(),
    }
}

fn weighted_category(weights: &[(Category, f64)], rng: &mut ChaCha8Rng) -> Category {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut draw = rng.gen_range(0.0..total);
    for (category, w) in weights {
        if draw < *w {
            return *category;
        }
        draw -= w;
    }
    weights.last().unwrap().0
}

/// The cue value planted for an attribute: the user's true profile label
/// in its survey spelling.
fn cue_value(attribute: Attribute, profile: &DemographicProfile) -> String {
    match attribute {
        Attribute::Age => profile.age_bracket.to_string(),
        Attribute::Gender => profile.gender.to_string(),
        Attribute::Country => profile.country.clone(),
        Attribute::Religion => profile.religion.map(|v| v.to_string()).unwrap_or_default(),
        Attribute::Education => profile.education.map(|v| v.to_string()).unwrap_or_default(),
        Attribute::Income => profile.income.map(|v| v.to_string()).unwrap_or_default(),
        Attribute::Voting => profile.voting.map(|v| v.to_string()).unwrap_or_default(),
    }
}

/// Generate a corpus and its manifest of planted truths.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<UserRecord>, Manifest), SynthError> {
    validate(spec)?;
    self_test_filler_pool()?;

    let mut records = Vec::with_capacity(spec.n_users);
    let mut manifest = Manifest {
        seed: spec.seed,
        users: Vec::with_capacity(spec.n_users),
    };

    for u in 0..spec.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u as u64 + 1);

        let n = rng.gen_range(spec.messages.min..=spec.messages.max);
        let profile = profile_from(&mut rng, spec.extended_profiles);

        let flags: Vec<PlantedFlag> = flag_indices(&spec.disclosure, n, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(ordinal, index)| {
                let category = match &spec.category_weights {
                    Some(weights) => weighted_category(weights, &mut rng),
                    None => {
                        let (_, answer) = UNSAFE_MARKERS[ordinal % UNSAFE_MARKERS.len()];
                        Category::match_label(answer).expect("marker categories are valid")
                    }
                };
                PlantedFlag { index, category }
            })
            .collect();

        let cues: Vec<PlantedCue> = spec
            .cues
            .iter()
            .map(|plan| {
                let index = match plan.placement {
                    CuePlacement::AtIndex(i) => i,
                    CuePlacement::Random => rng.gen_range(0..n),
                };
                PlantedCue {
                    attribute: plan.attribute,
                    value: cue_value(plan.attribute, &profile),
                    index,
                }
            })
            .collect();

        let user_id = format!("u{u:04}");
        let mut streams = std::collections::BTreeMap::new();
        for &kind in &spec.streams {
            let messages: Vec<Message> = (0..n)
                .map(|i| {
                    let filler = FILLER_POOL[rng.gen_range(0..FILLER_POOL.len())];
                    let flag = (kind == DataStreamKind::ChatAssistant)
                        .then(|| flags.iter().find(|f| f.index == i))
                        .flatten();
                    let mut text = match flag {
                        Some(planted) => {
                            let (marker, answer) =
                                UNSAFE_MARKERS[flags.iter().position(|f| f.index == i).unwrap()
                                    % UNSAFE_MARKERS.len()];
                            // The marker's own category needs no cue.
                            if Category::match_label(answer) == Some(planted.category) {
                                marker.to_string()
                            } else {
                                format!(
                                    "{marker} {}",
                                    cue_token("category", planted.category.name())
                                )
                            }
                        }
                        None => filler.to_string(),
                    };
                    for cue in cues.iter().filter(|c| c.index == i) {
                        text = format!(
                            "{} {}",
                            cue_token(crate::gateway::mock::cue_name(cue.attribute), &cue.value),
                            text
                        );
                    }
                    Message {
                        index: i,
                        timestamp: Some((1_700_000_000 + u * 86_400 + i * 60) as f64),
                        text,
                        source: kind,
                    }
                })
                .collect();
            streams.insert(kind, MessageStream(messages));
        }

        records.push(UserRecord {
            user_id: user_id.clone(),
            profile: profile.clone(),
            streams,
        });
        manifest.users.push(PlantedUser {
            user_id,
            profile,
            n_messages: n,
            flags,
            cues,
        });
    }

    Ok((records, manifest))
}
