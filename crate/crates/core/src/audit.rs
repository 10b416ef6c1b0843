//! Disclosure-audit statistics: discovery points, category distributions,
//! and the cumulative leak curve with its linear fit.
//!
//! The audit runs over the full corpus before any cohort filtering; flags
//! here are the per-user indices of messages the safety filter marked
//! UNSAFE. All aggregation is pure and deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::Category;

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("stream for user {0} is empty")]
    EmptyStream(String),
    #[error("no data to aggregate")]
    NoData,
}

/// Normalized position of a user's first flagged message: 100 times the
/// 0-based first-flag index over the total message count. Absent when no
/// message was flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryPoint {
    pub user_id: String,
    pub value: Option<f64>,
}

/// Compute the discovery point for one user from their flagged message
/// indices (any order) and stream length.
pub fn discovery_point(
    user_id: &str,
    flag_indices: &[usize],
    total_messages: usize,
) -> Result<DiscoveryPoint, AuditError> {
    if total_messages == 0 {
        return Err(AuditError::EmptyStream(user_id.to_string()));
    }
    let value = flag_indices
        .iter()
        .min()
        .map(|&first| 100.0 * first as f64 / total_messages as f64);
    Ok(DiscoveryPoint {
        user_id: user_id.to_string(),
        value,
    })
}

/// Mean, median, and histogram of present discovery points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySummary {
    pub mean: f64,
    pub median: f64,
    /// Users with no flagged message, excluded from the statistics.
    pub absent: usize,
    pub bin_width: f64,
    /// (bin lower edge, count) pairs covering [0, 100).
    pub histogram: Vec<(f64, usize)>,
}

/// Median over a sorted slice: the average of the two middle order
/// statistics for even counts.
fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Summarize discovery points; Absent values are excluded and counted.
pub fn discovery_summary(
    points: &[DiscoveryPoint],
    bin_width: f64,
) -> Result<DiscoverySummary, AuditError> {
    let mut present: Vec<f64> = points.iter().filter_map(|p| p.value).collect();
    if present.is_empty() {
        return Err(AuditError::NoData);
    }
    present.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let median = median_sorted(&present);

    let bins = (100.0 / bin_width).ceil() as usize;
    let mut histogram: Vec<(f64, usize)> = (0..bins).map(|i| (i as f64 * bin_width, 0)).collect();
    for &v in &present {
        let bin = ((v / bin_width) as usize).min(bins - 1);
        histogram[bin].1 += 1;
    }

    Ok(DiscoverySummary {
        mean,
        median,
        absent: points.len() - present.len(),
        bin_width,
        histogram,
    })
}

/// Percentage of flagged messages per category within one group; columns
/// sum to 100 up to float noise.
pub type CategoryShare = BTreeMap<Category, f64>;

/// Distribution of categories over flagged messages, optionally grouped.
/// `group_of` maps each label's position to a group name (`None` groups
/// everything under "all"). Groups with no labels are omitted.
pub fn category_distribution(
    labels: &[(Category, Option<String>)],
) -> Result<BTreeMap<String, CategoryShare>, AuditError> {
    if labels.is_empty() {
        return Err(AuditError::NoData);
    }
    let mut counts: BTreeMap<String, BTreeMap<Category, usize>> = BTreeMap::new();
    for (category, group) in labels {
        let group = group.clone().unwrap_or_else(|| "all".to_string());
        *counts
            .entry(group)
            .or_default()
            .entry(*category)
            .or_insert(0) += 1;
    }

    let mut out = BTreeMap::new();
    for (group, per_category) in counts {
        let total: usize = per_category.values().sum();
        let mut share = CategoryShare::new();
        for category in Category::ALL {
            let count = per_category.get(&category).copied().unwrap_or(0);
            share.insert(category, 100.0 * count as f64 / total as f64);
        }
        out.insert(group, share);
    }
    Ok(out)
}

/// Least-squares line fit quality; `r_squared` is 1 − SS_res/SS_tot,
/// defined as 1.0 when both sums are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

fn least_squares(points: &[(f64, f64)]) -> LinearFit {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

/// Mean cumulative flagged count against fraction of history read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakCurve {
    /// Number of grid intervals; fractions are i/steps for i in 0..=steps.
    pub steps: usize,
    /// (fraction, mean cumulative flagged count) per grid point.
    pub points: Vec<(f64, f64)>,
    pub fit: LinearFit,
}

/// Default leak-curve grid: fractions 0, 0.01, ..., 1.
pub const DEFAULT_LEAK_STEPS: usize = 100;

/// Cumulative flagged count for one user at grid point i of `steps`:
/// the number of flags with index < ceil(i/steps · N), computed in integer
/// arithmetic so grid cutoffs are exact.
fn cumulative_at(sorted_flags: &[usize], len: usize, i: usize, steps: usize) -> usize {
    let cutoff = (i * len).div_ceil(steps);
    sorted_flags.partition_point(|&idx| idx < cutoff)
}

/// Build the cohort-average leak curve. Each user's flag set is evaluated
/// at every grid fraction of their own length, then averaged across users;
/// a user with no flags contributes the zero curve.
pub fn leak_curve(per_user: &[(Vec<usize>, usize)], steps: usize) -> Result<LeakCurve, AuditError> {
    if per_user.is_empty() {
        return Err(AuditError::NoData);
    }
    let sorted: Vec<(Vec<usize>, usize)> = per_user
        .iter()
        .map(|(flags, len)| {
            let mut f = flags.clone();
            f.sort_unstable();
            (f, *len)
        })
        .collect();

    let users = sorted.len() as f64;
    let points: Vec<(f64, f64)> = (0..=steps)
        .map(|i| {
            let fraction = i as f64 / steps as f64;
            let total: usize = sorted
                .iter()
                .map(|(flags, len)| cumulative_at(flags, *len, i, steps))
                .sum();
            (fraction, total as f64 / users)
        })
        .collect();

    let fit = least_squares(&points);
    Ok(LeakCurve { steps, points, fit })
}
