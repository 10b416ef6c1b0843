//! Analytic-cohort construction.
//!
//! A user enters the cohort when their chat stream is longer than the
//! length floor and, by default, every one of its messages carries a SAFE
//! verdict. Unresolved verdicts exclude conservatively.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserRecord;
use crate::filter::{SafetyVerdict, VerdictKind};

#[derive(Debug, Error, PartialEq)]
pub enum CohortError {
    #[error("user {0} has no verdicts for the chat stream")]
    MissingVerdicts(String),
    #[error("user {user_id} has {verdicts} verdicts for {messages} chat messages")]
    IncompleteVerdicts {
        user_id: String,
        verdicts: usize,
        messages: usize,
    },
    #[error("percentile must lie in (0, 100), got {0}")]
    InvalidPercentile(f64),
}

/// How the minimum-length threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthFloor {
    /// Nearest-rank percentile of all chat lengths.
    Percentile(f64),
    /// Fixed message count.
    Absolute(usize),
}

/// Cohort membership rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortRule {
    pub length_floor: LengthFloor,
    pub require_all_safe: bool,
}

impl Default for CohortRule {
    fn default() -> Self {
        CohortRule {
            length_floor: LengthFloor::Percentile(10.0),
            require_all_safe: true,
        }
    }
}

/// Why a user was excluded; machine-readable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    ShortHistory,
    UnsafeMessage,
    UnresolvedVerdict,
}

impl ExclusionReason {
    pub fn name(&self) -> &'static str {
        match self {
            ExclusionReason::ShortHistory => "short_history",
            ExclusionReason::UnsafeMessage => "unsafe_message",
            ExclusionReason::UnresolvedVerdict => "unresolved_verdict",
        }
    }
}

/// One row of the cohort manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub user_id: String,
    pub included: bool,
    pub reasons: Vec<ExclusionReason>,
    pub chat_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    /// The length threshold actually applied; exclusion is length <= this.
    pub threshold: usize,
    pub entries: Vec<CohortEntry>,
}

impl Cohort {
    pub fn included_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.included)
            .map(|e| e.user_id.as_str())
            .collect()
    }

    pub fn excluded_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.included)
            .map(|e| e.user_id.as_str())
            .collect()
    }
}

/// Nearest-rank percentile over the sorted length multiset: the value at
/// rank ceil(p/100 · n), 1-based.
fn nearest_rank_percentile(lengths: &[usize], p: f64) -> usize {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Build the cohort. `verdicts` must carry one complete verdict list for
/// every user's ChatAssistant stream.
pub fn build_cohort(
    users: &[UserRecord],
    verdicts: &BTreeMap<String, Vec<SafetyVerdict>>,
    rule: &CohortRule,
) -> Result<Cohort, CohortError> {
    for user in users {
        let list = verdicts
            .get(&user.user_id)
            .ok_or_else(|| CohortError::MissingVerdicts(user.user_id.clone()))?;
        let messages = user.chat_stream().map(|s| s.len()).unwrap_or(0);
        if list.len() != messages {
            return Err(CohortError::IncompleteVerdicts {
                user_id: user.user_id.clone(),
                verdicts: list.len(),
                messages,
            });
        }
    }

    let lengths: Vec<usize> = users
        .iter()
        .map(|u| u.chat_stream().map(|s| s.len()).unwrap_or(0))
        .collect();
    let threshold = match rule.length_floor {
        LengthFloor::Absolute(n) => n,
        LengthFloor::Percentile(p) => {
            if !(0.0..100.0).contains(&p) || p <= 0.0 {
                return Err(CohortError::InvalidPercentile(p));
            }
            if lengths.is_empty() {
                0
            } else {
                nearest_rank_percentile(&lengths, p)
            }
        }
    };

    let entries = users
        .iter()
        .zip(&lengths)
        .map(|(user, &chat_length)| {
            let mut reasons = Vec::new();
            if chat_length <= threshold {
                reasons.push(ExclusionReason::ShortHistory);
            }
            if rule.require_all_safe {
                let list = &verdicts[&user.user_id];
                if list.iter().any(|v| v.verdict == VerdictKind::Unsafe) {
                    reasons.push(ExclusionReason::UnsafeMessage);
                }
                if list.iter().any(|v| v.verdict == VerdictKind::Unresolved) {
                    reasons.push(ExclusionReason::UnresolvedVerdict);
                }
            }
            CohortEntry {
                user_id: user.user_id.clone(),
                included: reasons.is_empty(),
                reasons,
                chat_length,
            }
        })
        .collect();

    Ok(Cohort { threshold, entries })
}
