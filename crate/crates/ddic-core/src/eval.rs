//! Clustering metrics: unsupervised accuracy via optimal cluster-to-class
//! matching, normalized mutual information, purity, and mean ± std
//! aggregation over repeated runs.
//!
//! All metrics are label-name agnostic: predicted and true labels are
//! compacted to dense ids before any counting, so clusterings that differ
//! only by renaming score identically.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::math;

/// One run's metrics plus the context needed for result tables.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub purity: f64,
    pub seed: u64,
    pub ratio: f64,
    pub method: String,
    pub wall_time_s: f64,
}

/// Sample mean and (n−1) standard deviation per metric over a set of runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub nmi_mean: f64,
    pub nmi_std: f64,
    pub purity_mean: f64,
    pub purity_std: f64,
}

/// Entropy-normalization choice for [`nmi_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmiNorm {
    /// Divide mutual information by sqrt(H(true)·H(pred)) — the default.
    Geometric,
    /// Divide by the arithmetic mean (H(true)+H(pred))/2.
    Arithmetic,
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<(), CoreError> {
    if a.len() != b.len() {
        return Err(CoreError::Contract(format!(
            "label vectors of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(CoreError::Contract("label vectors must be nonempty".into()));
    }
    Ok(())
}

/// Remaps arbitrary ids to dense [0, k), first appearance first.
fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = Vec::new();
    let dense = labels
        .iter()
        .map(|&l| match ids.iter().position(|&known| known == l) {
            Some(pos) => pos,
            None => {
                ids.push(l);
                ids.len() - 1
            }
        })
        .collect();
    (dense, ids.len())
}

/// counts[t][p] = number of points with true class t and predicted cluster p.
fn contingency(truth: &[usize], pred: &[usize]) -> (Vec<Vec<usize>>, usize, usize) {
    let (t_dense, t_count) = densify(truth);
    let (p_dense, p_count) = densify(pred);
    let mut counts = vec![vec![0usize; p_count]; t_count];
    for (&t, &p) in t_dense.iter().zip(&p_dense) {
        counts[t][p] += 1;
    }
    (counts, t_count, p_count)
}

/// Minimum-cost perfect matching on a dense square cost matrix, O(n³)
/// shortest augmenting paths with potentials. Returns the column matched to
/// each row.
fn hungarian_min_cost(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let slack = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Unsupervised clustering accuracy: the best one-to-one cluster→class
/// matching (Hungarian algorithm on the square-padded contingency matrix),
/// as a fraction of points.
pub fn acc(truth: &[usize], pred: &[usize]) -> Result<f64, CoreError> {
    check_lengths(truth, pred)?;
    let (counts, t_count, p_count) = contingency(truth, pred);
    let size = t_count.max(p_count);
    let peak = *counts.iter().flatten().max().expect("nonempty") as i64;
    // Maximize matches by minimizing (peak − count) over a square padding.
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|t| {
            (0..size)
                .map(|p| {
                    let count = counts
                        .get(t)
                        .and_then(|row| row.get(p))
                        .copied()
                        .unwrap_or(0);
                    peak - count as i64
                })
                .collect()
        })
        .collect();
    let assignment = hungarian_min_cost(&cost);
    let matched: usize = assignment
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            counts
                .get(t)
                .and_then(|row| row.get(p))
                .copied()
                .unwrap_or(0)
        })
        .sum();
    Ok(matched as f64 / truth.len() as f64)
}

/// Normalized mutual information with a configurable normalizer.
///
/// Conventions: 1 when both partitions are single clusters (identical
/// trivial partitions), 0 when exactly one entropy is zero.
pub fn nmi_with(truth: &[usize], pred: &[usize], norm: NmiNorm) -> Result<f64, CoreError> {
    check_lengths(truth, pred)?;
    let (counts, t_count, p_count) = contingency(truth, pred);
    let n = truth.len() as f64;
    let t_totals: Vec<f64> = (0..t_count)
        .map(|t| counts[t].iter().sum::<usize>() as f64)
        .collect();
    let p_totals: Vec<f64> = (0..p_count)
        .map(|p| (0..t_count).map(|t| counts[t][p]).sum::<usize>() as f64)
        .collect();
    let entropy = |totals: &[f64]| -> f64 {
        -totals
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| (c / n) * math::ln(c / n))
            .sum::<f64>()
    };
    let h_t = entropy(&t_totals);
    let h_p = entropy(&p_totals);
    if h_t == 0.0 && h_p == 0.0 {
        return Ok(1.0);
    }
    if h_t == 0.0 || h_p == 0.0 {
        return Ok(0.0);
    }
    let mut mutual = 0.0;
    for t in 0..t_count {
        for p in 0..p_count {
            let joint = counts[t][p] as f64;
            if joint > 0.0 {
                mutual += (joint / n) * math::ln(n * joint / (t_totals[t] * p_totals[p]));
            }
        }
    }
    let denom = match norm {
        NmiNorm::Geometric => math::sqrt(h_t * h_p),
        NmiNorm::Arithmetic => 0.5 * (h_t + h_p),
    };
    Ok((mutual / denom).clamp(0.0, 1.0))
}

/// [`nmi_with`] under the geometric-mean normalizer.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64, CoreError> {
    nmi_with(truth, pred, NmiNorm::Geometric)
}

/// Fraction of points lying in their predicted cluster's dominant true
/// class.
pub fn purity(truth: &[usize], pred: &[usize]) -> Result<f64, CoreError> {
    check_lengths(truth, pred)?;
    let (counts, t_count, p_count) = contingency(truth, pred);
    let dominant: usize = (0..p_count)
        .map(|p| (0..t_count).map(|t| counts[t][p]).max().unwrap_or(0))
        .sum();
    Ok(dominant as f64 / truth.len() as f64)
}

/// Mean and sample standard deviation of each metric over the given runs.
pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateRow, CoreError> {
    if reports.is_empty() {
        return Err(CoreError::Contract(
            "cannot aggregate zero runs".into(),
        ));
    }
    let n = reports.len() as f64;
    let stats = |get: fn(&MetricsReport) -> f64| -> (f64, f64) {
        let mean = reports.iter().map(get).sum::<f64>() / n;
        if reports.len() == 1 {
            return (mean, 0.0);
        }
        let var = reports
            .iter()
            .map(|r| {
                let d = get(r) - mean;
                d * d
            })
            .sum::<f64>()
            / (n - 1.0);
        (mean, math::sqrt(var))
    };
    let (acc_mean, acc_std) = stats(|r| r.acc);
    let (nmi_mean, nmi_std) = stats(|r| r.nmi);
    let (purity_mean, purity_std) = stats(|r| r.purity);
    Ok(AggregateRow {
        runs: reports.len(),
        acc_mean,
        acc_std,
        nmi_mean,
        nmi_std,
        purity_mean,
        purity_std,
    })
}
