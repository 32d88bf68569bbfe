//! Missing-data formalism: MCAR masks, the NaN-sentinel observed matrix,
//! statistical fills (zero / column-mean / k-nearest-neighbor), and the
//! probability that a sample survives masking fully observed.
//!
//! Missingness is completely-at-random: each entry is dropped independently
//! with probability p. NaN is the in-memory missing sentinel, so an observed
//! matrix is self-describing even without its mask.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::math;
use crate::rng::{rng_from_seed, SeededRng};
use crate::tensor::Matrix;
use rand::Rng;

/// Binary observation indicator: 1 marks an observed entry, 0 a missing one.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    mask: Matrix,
}

impl MaskMatrix {
    /// Validates that every entry is exactly 0.0 or 1.0.
    pub fn new(mask: Matrix) -> Result<Self, CoreError> {
        if mask.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CoreError::Contract(
                "mask entries must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self { mask })
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask.get(i, j) == 1.0
    }

    pub fn observed_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&v| v == 1.0).count()
    }
}

/// A feature matrix with missing entries, its mask, and optional ground-truth
/// labels carried along for evaluation only.
#[derive(Clone, Debug)]
pub struct MaskedDataset {
    /// n×d matrix holding NaN exactly where `mask` is 0.
    pub observed: Matrix,
    pub mask: MaskMatrix,
    pub labels: Option<Vec<usize>>,
}

impl MaskedDataset {
    /// Builds a dataset from a sentinel-bearing matrix, deriving the mask
    /// from the NaN pattern. Non-NaN entries must be finite.
    pub fn from_observed(observed: Matrix, labels: Option<Vec<usize>>) -> Result<Self, CoreError> {
        if let Some(ref l) = labels {
            if l.len() != observed.rows() {
                return Err(CoreError::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    observed.rows()
                )));
            }
        }
        if observed.as_slice().iter().any(|v| v.is_infinite()) {
            return Err(CoreError::Contract(
                "observed entries must be finite or NaN".into(),
            ));
        }
        let mask = MaskMatrix {
            mask: observed.map(|v| if v.is_nan() { 0.0 } else { 1.0 }),
        };
        Ok(Self {
            observed,
            mask,
            labels,
        })
    }
}

/// Draws an n×d mask whose entries are independently 0 (missing) with
/// probability `p`, deterministically from `seed`.
pub fn generate_mask(n: usize, d: usize, p: f64, seed: u64) -> Result<MaskMatrix, CoreError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::Contract(format!(
            "missing ratio must lie in [0, 1], got {p}"
        )));
    }
    let mut rng: SeededRng = rng_from_seed(seed);
    let mask = Matrix::from_vec(
        n,
        d,
        (0..n * d)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
            .collect(),
    )?;
    Ok(MaskMatrix { mask })
}

/// Applies a mask to a finite matrix, writing the NaN sentinel where the
/// mask is 0.
pub fn apply_mask(x: &Matrix, m: &MaskMatrix) -> Result<MaskedDataset, CoreError> {
    if x.shape() != m.shape() {
        return Err(CoreError::Shape(format!(
            "data {:?} vs mask {:?}",
            x.shape(),
            m.shape()
        )));
    }
    if !x.is_finite() {
        return Err(CoreError::Contract(
            "data must be finite before masking".into(),
        ));
    }
    let observed = x.zip_map(m.as_matrix(), |v, b| if b == 1.0 { v } else { f64::NAN });
    Ok(MaskedDataset {
        observed,
        mask: m.clone(),
        labels: None,
    })
}

fn observed_column_means(observed: &Matrix) -> Vec<f64> {
    let (rows, cols) = observed.shape();
    let mut sums = vec![0.0; cols];
    let mut counts = vec![0usize; cols];
    for i in 0..rows {
        for (j, &v) in observed.row(i).iter().enumerate() {
            if !v.is_nan() {
                sums[j] += v;
                counts[j] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

/// Replaces each missing entry with its column's observed mean; a fully
/// missing column falls back to 0, the neutral value for normalized data.
pub fn mean_fill(ds: &MaskedDataset) -> Matrix {
    let means = observed_column_means(&ds.observed);
    let (rows, cols) = ds.observed.shape();
    let mut out = ds.observed.clone();
    for i in 0..rows {
        let row = out.row_mut(i);
        for j in 0..cols {
            if row[j].is_nan() {
                row[j] = means[j];
            }
        }
    }
    out
}

/// Replaces each missing entry with 0.
pub fn zero_fill(ds: &MaskedDataset) -> Matrix {
    ds.observed.map(|v| if v.is_nan() { 0.0 } else { v })
}

/// Mean squared difference between two sentinel-bearing rows over the
/// features observed in both; None when they share no observed feature.
fn shared_feature_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (&va, &vb) in a.iter().zip(b) {
        if !va.is_nan() && !vb.is_nan() {
            let diff = va - vb;
            acc += diff * diff;
            count += 1;
        }
    }
    (count > 0).then(|| acc / count as f64)
}

/// Fills each missing entry (i, j) with the mean of entry j over the k rows
/// nearest to row i — distance being the mean of squared differences over
/// mutually observed features — considering only rows that observe entry j.
/// Ties break toward the lower row index; when no candidate row shares a
/// feature with row i, the entry falls back to the column mean.
pub fn knn_fill(ds: &MaskedDataset, k: usize) -> Result<Matrix, CoreError> {
    let (rows, cols) = ds.observed.shape();
    if k == 0 {
        return Err(CoreError::Contract("k must be at least 1".into()));
    }
    if k >= rows {
        return Err(CoreError::Contract(format!(
            "k = {k} must be smaller than the row count {rows}"
        )));
    }
    let fallback = observed_column_means(&ds.observed);
    let mut out = ds.observed.clone();
    for i in 0..rows {
        if !ds.observed.row(i).iter().any(|v| v.is_nan()) {
            continue;
        }
        // (distance, row index) to every other row, nearest first.
        let mut neighbors: Vec<(f64, usize)> = (0..rows)
            .filter(|&r| r != i)
            .filter_map(|r| {
                shared_feature_distance(ds.observed.row(i), ds.observed.row(r))
                    .map(|dist| (dist, r))
            })
            .collect();
        neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for j in 0..cols {
            if !ds.observed.get(i, j).is_nan() {
                continue;
            }
            let mut sum = 0.0;
            let mut taken = 0usize;
            for &(_, r) in &neighbors {
                let v = ds.observed.get(r, j);
                if !v.is_nan() {
                    sum += v;
                    taken += 1;
                    if taken == k {
                        break;
                    }
                }
            }
            out.set(
                i,
                j,
                if taken > 0 {
                    sum / taken as f64
                } else {
                    fallback[j]
                },
            );
        }
    }
    Ok(out)
}

/// Probability that a d-dimensional sample keeps all features under
/// independent per-feature missingness p: (1 − p)^d.
pub fn fully_observed_prob(p: f64, d: usize) -> f64 {
    math::pow(1.0 - p, d as f64)
}

/// Merges a reconstruction into the observed data: observed entries are kept
/// verbatim, missing entries are taken from `x_hat`.
pub fn impute_from_reconstruction(ds: &MaskedDataset, x_hat: &Matrix) -> Result<Matrix, CoreError> {
    if ds.observed.shape() != x_hat.shape() {
        return Err(CoreError::Shape(format!(
            "observed {:?} vs reconstruction {:?}",
            ds.observed.shape(),
            x_hat.shape()
        )));
    }
    Ok(ds
        .observed
        .zip_map(x_hat, |obs, rec| if obs.is_nan() { rec } else { obs }))
}
