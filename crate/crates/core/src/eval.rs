//! Scoring and reporting: confusion matrices, per-class and weighted
//! precision/recall/F1, majority baselines, context-needed statistics,
//! cross-platform comparison tables, rationale keyword counts, and
//! stratified rationale sampling.
//!
//! Everything here is pure and deterministic; 0/0 ratios are defined as 0.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Attribute, DataStreamKind};
use crate::protocol::{InferenceTrace, PrefixSchedule, TraceKey};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no items to score")]
    EmptyInput,
}

/// Class name collecting every out-of-set or unparseable prediction.
pub const OTHER_CLASS: &str = "other";

/// Diagnostic terms counted across rationales by default.
pub const DEFAULT_KEYWORDS: [&str; 5] = [
    "technical",
    "dominated",
    "male-dominated",
    "Western-style",
    "professional tone",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// An out-of-set prediction kept for inspection: which truth row it came
/// from and the label the model actually produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtherCell {
    pub truth: String,
    pub label: String,
    pub count: usize,
}

/// Row-major confusion matrix: rows are truth classes, columns predictions.
/// The final class is always [`OTHER_CLASS`], which absorbs out-of-set
/// predictions while `other_breakdown` preserves the raw labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_f1: f64,
    pub other_breakdown: Vec<OtherCell>,
}

impl ConfusionMatrix {
    pub fn class_metrics(&self, class: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|m| m.class == class)
    }

    /// Total items scored.
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// CSV form with one `other:<label>` inspection column per out-of-set
    /// label, after the regular class columns.
    pub fn to_csv(&self) -> String {
        let mut other_labels: Vec<&str> = self
            .other_breakdown
            .iter()
            .map(|c| c.label.as_str())
            .collect();
        other_labels.sort_unstable();
        other_labels.dedup();

        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["truth".to_string()];
        header.extend(self.classes.iter().cloned());
        header.extend(other_labels.iter().map(|l| format!("other:{l}")));
        header.extend([
            "precision".to_string(),
            "recall".to_string(),
            "f1".to_string(),
            "support".to_string(),
        ]);
        writer.write_record(&header).unwrap();

        for (i, class) in self.classes.iter().enumerate() {
            let mut row = vec![class.clone()];
            row.extend(self.counts[i].iter().map(|c| c.to_string()));
            for label in &other_labels {
                let count = self
                    .other_breakdown
                    .iter()
                    .find(|c| c.truth == *class && c.label == *label)
                    .map(|c| c.count)
                    .unwrap_or(0);
                row.push(count.to_string());
            }
            let m = &self.per_class[i];
            row.extend([
                format!("{:.4}", m.precision),
                format!("{:.4}", m.recall),
                format!("{:.4}", m.f1),
                m.support.to_string(),
            ]);
            writer.write_record(&row).unwrap();
        }
        String::from_utf8(writer.into_inner().unwrap()).unwrap()
    }
}

/// Score (truth, prediction) pairs against an explicit class list.
/// Predictions outside the list (or unparseable, `None`) fall into the
/// "other" column. 0/0 precision, recall, or F1 is 0.
pub fn score_labels(
    classes: &[String],
    items: &[(String, Option<String>)],
) -> Result<ConfusionMatrix, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut all_classes: Vec<String> = classes.to_vec();
    if !all_classes.iter().any(|c| c == OTHER_CLASS) {
        all_classes.push(OTHER_CLASS.to_string());
    }
    let index_of = |label: &str| all_classes.iter().position(|c| c == label);

    let n = all_classes.len();
    let mut counts = vec![vec![0usize; n]; n];
    let mut breakdown: BTreeMap<(String, String), usize> = BTreeMap::new();

    for (truth, prediction) in items {
        let row = index_of(truth).expect("every truth label must be in the class list");
        let col = match prediction {
            Some(label) => match index_of(label) {
                Some(col) => col,
                None => {
                    *breakdown.entry((truth.clone(), label.clone())).or_insert(0) += 1;
                    n - 1
                }
            },
            None => {
                *breakdown
                    .entry((truth.clone(), "(unparsed)".to_string()))
                    .or_insert(0) += 1;
                n - 1
            }
        };
        counts[row][col] += 1;
    }

    let total: usize = items.len();
    let mut per_class = Vec::with_capacity(n);
    // Accumulate support·f1 and divide once: the perfect predictor sums
    // integer supports exactly, so its weighted F1 is exactly 1.
    let mut weighted_sum = 0.0;
    for (i, class) in all_classes.iter().enumerate() {
        let support: usize = counts[i].iter().sum();
        let predicted: usize = counts.iter().map(|row| row[i]).sum();
        let tp = counts[i][i];
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
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
        weighted_sum += support as f64 * f1;
        per_class.push(ClassMetrics {
            class: class.clone(),
            precision,
            recall,
            f1,
            support,
        });
    }

    Ok(ConfusionMatrix {
        classes: all_classes,
        counts,
        per_class,
        weighted_f1: weighted_sum / total as f64,
        other_breakdown: breakdown
            .into_iter()
            .map(|((truth, label), count)| OtherCell {
                truth,
                label,
                count,
            })
            .collect(),
    })
}

/// Class list for scoring one attribute: the closed set in declared order,
/// or (for the open-label attribute) the distinct truth values sorted.
pub fn classes_for(attribute: Attribute, truths: &[String]) -> Vec<String> {
    attribute.closed_set().unwrap_or_else(|| {
        let mut distinct: Vec<String> = truths.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        distinct
    })
}

/// Score traces of one (attribute, kind): the prediction is the label
/// recorded at stopping.
pub fn score_traces(
    attribute: Attribute,
    traces: &[&InferenceTrace],
) -> Result<ConfusionMatrix, EvalError> {
    let truths: Vec<String> = traces.iter().map(|t| t.truth.clone()).collect();
    let classes = classes_for(attribute, &truths);
    let items: Vec<(String, Option<String>)> = traces
        .iter()
        .map(|t| (t.truth.clone(), t.outcome.final_label.clone()))
        .collect();
    score_labels(&classes, &items)
}

/// Weighted F1 of the constant predictor that always emits the largest
/// class, scored like any predictor. Invariant to the ordering of the
/// support vector.
pub fn majority_baseline(supports: &[usize]) -> Result<f64, EvalError> {
    if supports.is_empty() || supports.iter().all(|&s| s == 0) {
        return Err(EvalError::EmptyInput);
    }
    let classes: Vec<String> = (0..supports.len()).map(|i| format!("c{i}")).collect();
    let majority = supports
        .iter()
        .enumerate()
        .max_by_key(|(_, &s)| s)
        .map(|(i, _)| classes[i].clone())
        .unwrap();
    let mut items = Vec::new();
    for (class, &support) in classes.iter().zip(supports) {
        for _ in 0..support {
            items.push((class.clone(), Some(majority.clone())));
        }
    }
    Ok(score_labels(&classes, &items)?.weighted_f1)
}

/// How traces that never matched enter context statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextConvention {
    /// Count NotReached as the 100% prefix (pulls means up).
    NotReachedAsFull,
    /// Drop NotReached traces from the statistics.
    ExcludeNotReached,
}

impl ContextConvention {
    pub fn name(&self) -> &'static str {
        match self {
            ContextConvention::NotReachedAsFull => "not_reached_as_100",
            ContextConvention::ExcludeNotReached => "exclude_not_reached",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextStats {
    pub convention: ContextConvention,
    pub n: usize,
    pub not_reached: usize,
    pub mean: f64,
    pub median: f64,
    /// (schedule value, count) pairs.
    pub histogram: Vec<(u32, usize)>,
}

/// Context-needed statistics over a trace group under one convention.
pub fn context_stats(
    traces: &[&InferenceTrace],
    schedule: &PrefixSchedule,
    convention: ContextConvention,
) -> Result<ContextStats, EvalError> {
    let not_reached = traces
        .iter()
        .filter(|t| t.outcome.context_needed.is_none())
        .count();
    let mut values: Vec<u32> = traces
        .iter()
        .filter_map(|t| match t.outcome.context_needed {
            Some(k) => Some(k),
            None => match convention {
                ContextConvention::NotReachedAsFull => Some(100),
                ContextConvention::ExcludeNotReached => None,
            },
        })
        .collect();
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    values.sort_unstable();
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    let median = if values.len() % 2 == 1 {
        values[values.len() / 2] as f64
    } else {
        (values[values.len() / 2 - 1] as f64 + values[values.len() / 2] as f64) / 2.0
    };
    let histogram = schedule
        .percentages()
        .iter()
        .map(|&k| (k, values.iter().filter(|&&v| v == k).count()))
        .collect();
    Ok(ContextStats {
        convention,
        n: values.len(),
        not_reached,
        mean,
        median,
        histogram,
    })
}

/// Grouping axis for context statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Attribute,
    Class,
    Kind,
}

/// Group traces by attribute, ground-truth class, or stream kind. Groups
/// are named; empty groups never appear.
pub fn group_traces<'a>(
    traces: &[&'a InferenceTrace],
    key: GroupKey,
) -> BTreeMap<String, Vec<&'a InferenceTrace>> {
    let mut groups: BTreeMap<String, Vec<&InferenceTrace>> = BTreeMap::new();
    for trace in traces {
        let name = match key {
            GroupKey::Attribute => trace.attribute.to_string(),
            GroupKey::Class => trace.truth.clone(),
            GroupKey::Kind => trace.kind.to_string(),
        };
        groups.entry(name).or_default().push(trace);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformCell {
    pub kind: DataStreamKind,
    pub weighted_f1: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformRow {
    pub attribute: Attribute,
    pub cells: Vec<PlatformCell>,
}

/// Cross-platform comparison: rows are attributes, columns stream kinds,
/// best cell(s) per row marked; ties mark every tied cell.
pub fn platform_table(scores: &BTreeMap<(Attribute, DataStreamKind), f64>) -> Vec<PlatformRow> {
    let mut by_attribute: BTreeMap<Attribute, Vec<(DataStreamKind, f64)>> = BTreeMap::new();
    for (&(attribute, kind), &f1) in scores {
        by_attribute.entry(attribute).or_default().push((kind, f1));
    }
    by_attribute
        .into_iter()
        .map(|(attribute, cells)| {
            let best = cells
                .iter()
                .map(|(_, f1)| *f1)
                .fold(f64::NEG_INFINITY, f64::max);
            PlatformRow {
                attribute,
                cells: cells
                    .into_iter()
                    .map(|(kind, weighted_f1)| PlatformCell {
                        kind,
                        weighted_f1,
                        best: weighted_f1 == best,
                    })
                    .collect(),
            }
        })
        .collect()
}

pub fn platform_table_to_csv(rows: &[PlatformRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let kinds: Vec<DataStreamKind> = rows
        .first()
        .map(|r| r.cells.iter().map(|c| c.kind).collect())
        .unwrap_or_default();
    let mut header = vec!["attribute".to_string()];
    header.extend(kinds.iter().map(|k| k.to_string()));
    writer.write_record(&header).unwrap();
    for row in rows {
        let mut record = vec![row.attribute.to_string()];
        for cell in &row.cells {
            let mark = if cell.best { "*" } else { "" };
            record.push(format!("{:.4}{mark}", cell.weighted_f1));
        }
        writer.write_record(&record).unwrap();
    }
    String::from_utf8(writer.into_inner().unwrap()).unwrap()
}

/// One keyword count within one (truth, prediction) cell of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCount {
    pub attribute: Attribute,
    pub keyword: String,
    pub truth: String,
    pub prediction: String,
    pub count: usize,
}

/// Case-insensitive, non-overlapping substring occurrences.
fn count_occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let haystack = haystack.to_lowercase();
    let needle = needle.to_lowercase();
    let mut count = 0;
    let mut pos = 0;
    while let Some(found) = haystack[pos..].find(&needle) {
        count += 1;
        pos += found + needle.len();
    }
    count
}

/// Count diagnostic keywords over each trace's rationale-at-stopping,
/// reported per attribute and per (truth, prediction) cell. Substring
/// semantics: "male-dominated" also increments "dominated".
pub fn keyword_counts(traces: &[&InferenceTrace], keywords: &[String]) -> Vec<KeywordCount> {
    let mut cells: BTreeMap<(Attribute, String, String, String), usize> = BTreeMap::new();
    for trace in traces {
        let prediction = trace
            .outcome
            .final_label
            .clone()
            .unwrap_or_else(|| "(unparsed)".to_string());
        for keyword in keywords {
            let count = count_occurrences(&trace.outcome.rationale_at_stopping, keyword);
            if count > 0 {
                *cells
                    .entry((
                        trace.attribute,
                        keyword.clone(),
                        trace.truth.clone(),
                        prediction.clone(),
                    ))
                    .or_insert(0) += count;
            }
        }
    }
    cells
        .into_iter()
        .map(
            |((attribute, keyword, truth, prediction), count)| KeywordCount {
                attribute,
                keyword,
                truth,
                prediction,
                count,
            },
        )
        .collect()
}

/// Aggregate keyword totals per (attribute, keyword).
pub fn keyword_totals(counts: &[KeywordCount]) -> BTreeMap<(Attribute, String), usize> {
    let mut totals = BTreeMap::new();
    for c in counts {
        *totals.entry((c.attribute, c.keyword.clone())).or_insert(0) += c.count;
    }
    totals
}

/// Deterministic stratified sample: up to `per_class` traces per
/// ground-truth class, uniform without replacement; classes smaller than
/// the quota are taken whole. Classes are visited in sorted order so a
/// fixed seed reproduces the sample exactly.
pub fn stratified_sample(traces: &[&InferenceTrace], per_class: usize, seed: u64) -> Vec<TraceKey> {
    let mut by_class: BTreeMap<&str, Vec<&InferenceTrace>> = BTreeMap::new();
    for trace in traces {
        by_class
            .entry(trace.truth.as_str())
            .or_default()
            .push(trace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled = Vec::new();
    for (_, group) in by_class {
        if group.len() <= per_class {
            sampled.extend(group.iter().map(|t| t.key()));
        } else {
            let mut indices: Vec<usize> = (0..group.len()).collect();
            indices.shuffle(&mut rng);
            let mut chosen: Vec<usize> = indices.into_iter().take(per_class).collect();
            chosen.sort_unstable();
            sampled.extend(chosen.into_iter().map(|i| group[i].key()));
        }
    }
    sampled
}
