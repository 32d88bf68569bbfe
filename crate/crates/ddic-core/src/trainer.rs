//! End-to-end training: fill the missing entries, pretrain the autoencoder
//! on the transport loss, initialize centroids by k-means on the embeddings,
//! then jointly fine-tune network and centroids with Adam until the hard
//! assignment stabilizes.
//!
//! The network input stays fixed at the initial fill for the whole run;
//! reconstructions only feed the final imputation output. Every random
//! choice (init, shuffling, k-means) draws from streams derived from the
//! single config seed, so a fit is a pure function of (dataset, config).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dec::{
    decode, encode, hard_assign, soft_assign, total_loss, ArchitectureSpec, LossMode, LossNodes,
    LossOptions, ModelParams, ParamNodes,
};
use crate::error::CoreError;
use crate::incomplete::{impute_from_reconstruction, mean_fill, zero_fill, MaskedDataset};
use crate::rng::{mix_seed, rng_from_seed};
use crate::tensor::{pairwise_sq_dists, Matrix, Tape};
use rand::seq::SliceRandom;
use rand::Rng;

/// How missing entries are initialized before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillStrategy {
    Mean,
    Zero,
}

/// All knobs for [`fit`]; `new` supplies the conventional defaults.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Clustering-term weight γ.
    pub gamma: f64,
    /// Sinkhorn regularization ε.
    pub eps: f64,
    /// Adam learning rate η.
    pub lr: f64,
    /// Minibatch size (≥ 2; the trailing short batch is kept).
    pub batch_size: usize,
    /// Maximum joint-training epochs.
    pub max_iter: usize,
    /// Stop once the fraction of labels changed between consecutive epochs
    /// drops below this threshold (in [0, 1]).
    pub delta: f64,
    pub pretrain_epochs: usize,
    /// Iteration cap for the unrolled Sinkhorn loss.
    pub sinkhorn_unroll: usize,
    pub seed: u64,
    pub fill: FillStrategy,
    pub cluster_count: usize,
    /// Encoder hidden widths (decoder mirrors them).
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    /// Which loss terms to optimize during joint training.
    pub loss_mode: LossMode,
}

impl TrainConfig {
    pub fn new(cluster_count: usize) -> Self {
        Self {
            gamma: 100.0,
            eps: 0.01,
            lr: 0.001,
            batch_size: 256,
            max_iter: 200,
            delta: 0.001,
            pretrain_epochs: 50,
            sinkhorn_unroll: 200,
            seed: 0,
            fill: FillStrategy::Mean,
            cluster_count,
            hidden_dims: vec![500, 500, 1000],
            embedding_dim: 10,
            loss_mode: LossMode::Joint,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(CoreError::Contract(format!("gamma {} invalid", self.gamma)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(CoreError::Contract(format!("eps {} invalid", self.eps)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CoreError::Contract(format!(
                "learning rate {} invalid",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Contract(
                "batch_size must be at least 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(CoreError::Contract(format!(
                "delta must lie in [0, 1], got {}",
                self.delta
            )));
        }
        if self.sinkhorn_unroll == 0 {
            return Err(CoreError::Contract(
                "sinkhorn_unroll must be at least 1".into(),
            ));
        }
        if self.cluster_count == 0 {
            return Err(CoreError::Contract(
                "cluster_count must be at least 1".into(),
            ));
        }
        if self.embedding_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(CoreError::Contract(
                "network dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Why the joint loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Label-change fraction fell below delta.
    Delta,
    /// Epoch budget exhausted.
    MaxIter,
}

/// Per-epoch mean losses during joint training.
#[derive(Clone, Copy, Debug)]
pub struct LossRecord {
    pub recon: f64,
    pub cluster: f64,
    pub total: f64,
}

/// Training phase a progress record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Joint,
}

/// One line of machine-readable training progress.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based epoch within its phase.
    pub epoch: usize,
    pub recon_loss: f64,
    pub cluster_loss: f64,
    pub total_loss: f64,
    /// Fraction of labels that changed since the previous epoch; None
    /// during pretraining.
    pub label_change: Option<f64>,
}

/// Everything [`fit`] produces.
#[derive(Clone, Debug)]
pub struct FitResult {
    /// Hard cluster assignment, one label in [0, k) per row.
    pub labels: Vec<usize>,
    pub model: ModelParams,
    /// Observed entries verbatim, missing entries from the final
    /// reconstruction.
    pub imputed: Matrix,
    pub epochs_run: usize,
    pub stopped_by: StopReason,
    /// One record per joint epoch.
    pub loss_history: Vec<LossRecord>,
    /// Mean reconstruction loss per pretraining epoch.
    pub pretrain_history: Vec<f64>,
}

// Distinct stream tags so init, shuffling, and k-means never share draws.
const TAG_INIT: u64 = 1;
const TAG_PRETRAIN_SHUFFLE: u64 = 2;
const TAG_KMEANS: u64 = 3;
const TAG_JOINT_SHUFFLE: u64 = 4;

fn emit(progress: &mut Option<&mut dyn FnMut(&EpochRecord)>, rec: EpochRecord) {
    if let Some(cb) = progress {
        cb(&rec);
    }
}

// ---------------------------------------------------------------------------
// k-means

fn assign_nearest(dists: &Matrix) -> Vec<usize> {
    (0..dists.rows())
        .map(|i| {
            let row = dists.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn kmeans_single(
    x: &Matrix,
    k: usize,
    rng: &mut crate::rng::SeededRng,
    max_iters: usize,
) -> Result<(Vec<usize>, Matrix, f64), CoreError> {
    let n = x.rows();
    // k-means++ seeding: subsequent centers drawn proportional to the
    // squared distance to the nearest already-chosen center.
    let first = rng.random_range(0..n);
    let mut centroids = x.take_rows(&[first]);
    let mut nearest_sq: Vec<f64> = (0..n)
        .map(|i| {
            pairwise_sq_dists(&x.take_rows(&[i]), &centroids)
                .expect("same width")
                .get(0, 0)
        })
        .collect();
    let mut chosen = vec![first];
    while chosen.len() < k {
        let total: f64 = nearest_sq.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in nearest_sq.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(idx);
        centroids = x.take_rows(&chosen);
        let d_new = pairwise_sq_dists(x, &x.take_rows(&[idx]))?;
        for (i, cur) in nearest_sq.iter_mut().enumerate() {
            let d = d_new.get(i, 0);
            if d < *cur {
                *cur = d;
            }
        }
    }

    let mut prev_labels: Option<Vec<usize>> = None;
    for _ in 0..max_iters {
        let dists = pairwise_sq_dists(x, &centroids)?;
        let labels = assign_nearest(&dists);

        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (acc, &v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
                *acc += v;
            }
        }
        let mut had_empty = false;
        // Own squared distance to the assigned centroid, for repairs.
        let mut own_sq: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| dists.get(i, l)).collect();
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed an empty cluster at the point farthest from its
                // centroid; exclude it from later repairs in this pass.
                had_empty = true;
                let far = own_sq
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .expect("nonempty data");
                own_sq[far] = -1.0;
                let src = x.row(far).to_vec();
                sums.row_mut(j).copy_from_slice(&src);
                counts[j] = 1;
            } else {
                let inv = 1.0 / counts[j] as f64;
                for v in sums.row_mut(j) {
                    *v *= inv;
                }
            }
        }
        centroids = sums;
        let stable = !had_empty && prev_labels.as_ref() == Some(&labels);
        prev_labels = Some(labels);
        if stable {
            break;
        }
    }

    let dists = pairwise_sq_dists(x, &centroids)?;
    let labels = assign_nearest(&dists);
    let wcss: f64 = labels.iter().enumerate().map(|(i, &l)| dists.get(i, l)).sum();
    Ok((labels, centroids, wcss))
}

/// Lloyd's algorithm from k-means++ seeding, best of `restarts` by
/// within-cluster sum of squares; empty clusters are re-seeded from the
/// farthest point. Deterministic given `seed`.
pub fn kmeans(
    x: &Matrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<(Vec<usize>, Matrix), CoreError> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(CoreError::Contract(format!(
            "cluster count {k} must lie in [1, {n}]"
        )));
    }
    if x.cols() == 0 {
        return Err(CoreError::Contract("data needs at least one feature".into()));
    }
    if restarts == 0 {
        return Err(CoreError::Contract("restarts must be at least 1".into()));
    }
    if !x.is_finite() {
        return Err(CoreError::Contract("data must be finite".into()));
    }
    let mut best: Option<(Vec<usize>, Matrix, f64)> = None;
    for r in 0..restarts {
        let mut rng = rng_from_seed(mix_seed(seed, r as u64));
        let run = kmeans_single(x, k, &mut rng, max_iters)?;
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (labels, centroids, _) = best.expect("at least one restart");
    Ok((labels, centroids))
}

// ---------------------------------------------------------------------------
// Adam

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second-moment estimates for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .param_mats()
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over all parameter matrices. `grads`
/// aligns with [`ModelParams::param_mats`]; a `None` entry means zero
/// gradient for that matrix.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Option<Matrix>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), CoreError> {
    let mats = params.param_mats_mut();
    if grads.len() != mats.len() || state.m.len() != mats.len() {
        return Err(CoreError::Shape(format!(
            "{} gradients / {} moment slots for {} parameter matrices",
            grads.len(),
            state.m.len(),
            mats.len()
        )));
    }
    for (grad, param) in grads.iter().zip(&mats) {
        if let Some(g) = grad {
            if g.shape() != param.shape() {
                return Err(CoreError::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
        }
    }
    state.t += 1;
    let bc1 = 1.0 - crate::math::pow(BETA1, state.t as f64);
    let bc2 = 1.0 - crate::math::pow(BETA2, state.t as f64);
    for ((param, grad), (m, v)) in mats
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let slice = param.as_mut_slice();
        let ms = m.as_mut_slice();
        let vs = v.as_mut_slice();
        for (idx, p) in slice.iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g.as_slice()[idx]);
            ms[idx] = BETA1 * ms[idx] + (1.0 - BETA1) * g;
            vs[idx] = BETA2 * vs[idx] + (1.0 - BETA2) * g * g;
            let m_hat = ms[idx] / bc1;
            let v_hat = vs[idx] / bc2;
            *p -= lr * m_hat / (crate::math::sqrt(v_hat) + ADAM_EPS);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training phases

fn collect_grads(tape: &Tape, nodes: &ParamNodes) -> Vec<Option<Matrix>> {
    nodes
        .flat()
        .into_iter()
        .map(|id| tape.grad(id).cloned())
        .collect()
}

fn batches(n: usize, batch_size: usize, rng: &mut crate::rng::SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

struct BatchLosses {
    recon: f64,
    cluster: f64,
    total: f64,
}

fn run_batch(
    params: &mut ModelParams,
    x_batch: &Matrix,
    opts: &LossOptions,
    state: &mut AdamState,
    lr: f64,
    epoch: usize,
    batch: usize,
) -> Result<BatchLosses, CoreError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params);
    let LossNodes {
        total,
        recon,
        cluster,
    } = total_loss(&mut tape, &nodes, x_batch, opts, None)?;
    let total_val = tape.value(total).get(0, 0);
    if !total_val.is_finite() {
        return Err(CoreError::Training {
            epoch,
            batch,
            message: format!("loss became non-finite ({total_val})"),
        });
    }
    tape.backward(total)?;
    let grads = collect_grads(&tape, &nodes);
    let losses = BatchLosses {
        recon: recon.map_or(0.0, |id| tape.value(id).get(0, 0)),
        cluster: cluster.map_or(0.0, |id| tape.value(id).get(0, 0)),
        total: total_val,
    };
    adam_step(params, &grads, state, lr)?;
    Ok(losses)
}

/// Minibatch Adam on the reconstruction loss alone; returns the per-epoch
/// mean loss. Parameters are updated in place.
pub fn pretrain(
    params: &mut ModelParams,
    x_filled: &Matrix,
    config: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<Vec<f64>, CoreError> {
    config.validate()?;
    if x_filled.cols() != params.arch.input_dim {
        return Err(CoreError::Shape(format!(
            "data has {} columns, model expects {}",
            x_filled.cols(),
            params.arch.input_dim
        )));
    }
    if !x_filled.is_finite() {
        return Err(CoreError::Contract("pretraining data must be finite".into()));
    }
    let opts = LossOptions {
        eps: config.eps,
        gamma: 0.0,
        sinkhorn_unroll: config.sinkhorn_unroll,
        mode: LossMode::ReconstructionOnly,
    };
    let mut state = AdamState::new(params);
    let mut rng = rng_from_seed(mix_seed(config.seed, TAG_PRETRAIN_SHUFFLE));
    let mut history = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 1..=config.pretrain_epochs {
        let mut epoch_loss = 0.0;
        let epoch_batches = batches(x_filled.rows(), config.batch_size, &mut rng);
        let batch_count = epoch_batches.len();
        for (b, idx) in epoch_batches.into_iter().enumerate() {
            let x_batch = x_filled.take_rows(&idx);
            let losses = run_batch(params, &x_batch, &opts, &mut state, config.lr, epoch, b)?;
            epoch_loss += losses.recon;
        }
        let mean = epoch_loss / batch_count as f64;
        history.push(mean);
        emit(
            &mut progress,
            EpochRecord {
                phase: Phase::Pretrain,
                epoch,
                recon_loss: mean,
                cluster_loss: 0.0,
                total_loss: mean,
                label_change: None,
            },
        );
    }
    Ok(history)
}

fn embed_kmeans(
    params: &ModelParams,
    x_filled: &Matrix,
    k: usize,
    seed: u64,
) -> Result<(Vec<usize>, Matrix), CoreError> {
    let z = encode(params, x_filled)?;
    kmeans(&z, k, seed, 300, 10)
}

/// Cluster centers from k-means over the embeddings of the (pretrained)
/// model.
pub fn init_centroids(
    params: &ModelParams,
    x_filled: &Matrix,
    k: usize,
    seed: u64,
) -> Result<Matrix, CoreError> {
    embed_kmeans(params, x_filled, k, seed).map(|(_, centroids)| centroids)
}

/// Full training run on a masked dataset. See the module docs for the exact
/// phase order; emits one [`EpochRecord`] per epoch to `progress`.
pub fn fit_with_progress(
    ds: &MaskedDataset,
    config: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<FitResult, CoreError> {
    config.validate()?;
    let (n, d) = ds.observed.shape();
    if n == 0 || d == 0 {
        return Err(CoreError::Shape("dataset must be nonempty".into()));
    }
    if config.cluster_count > n {
        return Err(CoreError::Contract(format!(
            "cluster count {} exceeds sample count {n}",
            config.cluster_count
        )));
    }

    let x_filled = match config.fill {
        FillStrategy::Mean => mean_fill(ds),
        FillStrategy::Zero => zero_fill(ds),
    };
    let arch = ArchitectureSpec::new(
        d,
        config.hidden_dims.clone(),
        config.embedding_dim,
        config.cluster_count,
    )?;
    let mut params = ModelParams::glorot(&arch, mix_seed(config.seed, TAG_INIT));

    let pretrain_history = pretrain(
        &mut params,
        &x_filled,
        config,
        progress.as_mut().map(|p| &mut **p as _),
    )?;

    let (mut prev_labels, centroids) = embed_kmeans(
        &params,
        &x_filled,
        config.cluster_count,
        mix_seed(config.seed, TAG_KMEANS),
    )?;
    params.centroids = centroids;

    let opts = LossOptions {
        eps: config.eps,
        gamma: config.gamma,
        sinkhorn_unroll: config.sinkhorn_unroll,
        mode: config.loss_mode,
    };
    let mut state = AdamState::new(&params);
    let mut rng = rng_from_seed(mix_seed(config.seed, TAG_JOINT_SHUFFLE));
    let mut loss_history = Vec::new();
    let mut stopped_by = StopReason::MaxIter;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_iter {
        let mut sums = BatchLosses {
            recon: 0.0,
            cluster: 0.0,
            total: 0.0,
        };
        let epoch_batches = batches(n, config.batch_size, &mut rng);
        let batch_count = epoch_batches.len();
        for (b, idx) in epoch_batches.into_iter().enumerate() {
            let x_batch = x_filled.take_rows(&idx);
            let losses = run_batch(&mut params, &x_batch, &opts, &mut state, config.lr, epoch, b)?;
            sums.recon += losses.recon;
            sums.cluster += losses.cluster;
            sums.total += losses.total;
        }
        let record = LossRecord {
            recon: sums.recon / batch_count as f64,
            cluster: sums.cluster / batch_count as f64,
            total: sums.total / batch_count as f64,
        };
        loss_history.push(record);
        epochs_run = epoch;

        let z = encode(&params, &x_filled)?;
        let p = soft_assign(&z, &params.centroids)?;
        let labels = hard_assign(&p);
        let changed = labels
            .iter()
            .zip(&prev_labels)
            .filter(|(a, b)| a != b)
            .count() as f64
            / n as f64;
        emit(
            &mut progress,
            EpochRecord {
                phase: Phase::Joint,
                epoch,
                recon_loss: record.recon,
                cluster_loss: record.cluster,
                total_loss: record.total,
                label_change: Some(changed),
            },
        );
        prev_labels = labels;
        if changed < config.delta {
            stopped_by = StopReason::Delta;
            break;
        }
    }

    let z = encode(&params, &x_filled)?;
    let x_hat = decode(&params, &z)?;
    let imputed = impute_from_reconstruction(ds, &x_hat)?;
    Ok(FitResult {
        labels: prev_labels,
        model: params,
        imputed,
        epochs_run,
        stopped_by,
        loss_history,
        pretrain_history,
    })
}

/// [`fit_with_progress`] without a progress sink.
pub fn fit(ds: &MaskedDataset, config: &TrainConfig) -> Result<FitResult, CoreError> {
    fit_with_progress(ds, config, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incomplete::{apply_mask, generate_mask};

    fn tiny_config(k: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            max_iter: 10,
            pretrain_epochs: 5,
            eps: 0.1,
            hidden_dims: vec![8],
            embedding_dim: 2,
            ..TrainConfig::new(k)
        }
    }

    /// Three well-separated blobs whose class signal spreads over every
    /// third dimension, so masking single features keeps rows identifiable.
    fn blob_data(n_per: usize, d: usize, spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3usize {
            for _ in 0..n_per {
                let mut row = vec![0.0; d];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = rng.random::<f64>() * spread - spread / 2.0;
                    if j % 3 == c {
                        *v += 10.0;
                    }
                }
                rows.push(row);
                labels.push(c);
            }
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        (Matrix::from_vec(n_per * 3, d, flat).unwrap(), labels)
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = TrainConfig::new(3);
        c.validate().unwrap();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(3);
        c.delta = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(3);
        c.eps = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::new(0).validate().is_err());
    }

    #[test]
    fn kmeans_single_cluster_is_column_mean() {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]).unwrap();
        let (labels, centroids) = kmeans(&x, 1, 0, 300, 10).unwrap();
        assert_eq!(labels, vec![0, 0, 0]);
        assert!((centroids.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((centroids.get(0, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_separates_far_blobs() {
        let (x, truth) = blob_data(10, 2, 1.0, 5);
        let (labels, _) = kmeans(&x, 3, 42, 300, 10).unwrap();
        // Same-cluster-iff-same-blob, without fixing the label names.
        for i in 0..30 {
            for j in 0..30 {
                assert_eq!(
                    labels[i] == labels[j],
                    truth[i] == truth[j],
                    "rows {i},{j}"
                );
            }
        }
    }

    #[test]
    fn kmeans_matches_exhaustive_partition_oracle() {
        let pts = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2];
        let x = Matrix::from_vec(6, 1, pts.to_vec()).unwrap();
        // Brute force over all 2-colorings with both clusters nonempty.
        let mut best = f64::INFINITY;
        for mask in 1..63u32 {
            let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0, 0.0, 0);
            for (i, &p) in pts.iter().enumerate() {
                if mask & (1 << i) == 0 {
                    s0 += p;
                    n0 += 1;
                } else {
                    s1 += p;
                    n1 += 1;
                }
            }
            let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
            let wcss: f64 = pts
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let m = if mask & (1 << i) == 0 { m0 } else { m1 };
                    (p - m) * (p - m)
                })
                .sum();
            best = best.min(wcss);
        }
        let (labels, centroids) = kmeans(&x, 2, 7, 300, 10).unwrap();
        let dists = pairwise_sq_dists(&x, &centroids).unwrap();
        let wcss: f64 = labels.iter().enumerate().map(|(i, &l)| dists.get(i, l)).sum();
        assert!((wcss - best).abs() < 1e-9, "wcss {wcss} vs oracle {best}");
    }

    #[test]
    fn kmeans_contract_and_determinism() {
        let x = Matrix::zeros(3, 2);
        assert!(matches!(kmeans(&x, 4, 0, 10, 2), Err(CoreError::Contract(_))));
        assert!(matches!(kmeans(&x, 0, 0, 10, 2), Err(CoreError::Contract(_))));
        let (x, _) = blob_data(5, 2, 1.0, 9);
        let (l1, c1) = kmeans(&x, 3, 11, 300, 10).unwrap();
        let (l2, c2) = kmeans(&x, 3, 11, 300, 10).unwrap();
        assert_eq!(l1, l2);
        assert!(c1.bits_eq(&c2));
    }

    fn flat_grads(params: &ModelParams, value: f64) -> Vec<Option<Matrix>> {
        params
            .param_mats()
            .into_iter()
            .map(|p| Some(Matrix::filled(p.rows(), p.cols(), value)))
            .collect()
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let arch = ArchitectureSpec::new(3, vec![2], 2, 2).unwrap();
        let params0 = ModelParams::glorot(&arch, 1);
        let mut params = params0.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &flat_grads(&params0, 0.0), &mut state, 0.01).unwrap();
        for (a, b) in params.param_mats().iter().zip(params0.param_mats()) {
            assert!(a.bits_eq(b));
        }
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let arch = ArchitectureSpec::new(2, vec![], 2, 2).unwrap();
        let params0 = ModelParams::glorot(&arch, 2);
        let mut params = params0.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &flat_grads(&params0, 0.5), &mut state, 0.001).unwrap();
        for (after, before) in params.param_mats().iter().zip(params0.param_mats()) {
            for (a, b) in after.as_slice().iter().zip(before.as_slice()) {
                assert!(((b - a) - 0.001).abs() < 1e-9, "step {}", b - a);
            }
        }
    }

    #[test]
    fn adam_zero_lr_and_shape_mismatch() {
        let arch = ArchitectureSpec::new(2, vec![], 2, 2).unwrap();
        let params0 = ModelParams::glorot(&arch, 3);
        let mut params = params0.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &flat_grads(&params0, 1.0), &mut state, 0.0).unwrap();
        for (a, b) in params.param_mats().iter().zip(params0.param_mats()) {
            assert!(a.bits_eq(b));
        }
        let mut bad = flat_grads(&params0, 1.0);
        bad[0] = Some(Matrix::zeros(7, 7));
        assert!(matches!(
            adam_step(&mut params, &bad, &mut state, 0.1),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn pretrain_zero_epochs_and_zero_lr_keep_params() {
        let (x, _) = blob_data(8, 4, 1.0, 20);
        let arch = ArchitectureSpec::new(4, vec![8], 2, 3).unwrap();
        let params0 = ModelParams::glorot(&arch, 21);

        let mut config = tiny_config(3);
        config.pretrain_epochs = 0;
        let mut params = params0.clone();
        assert!(pretrain(&mut params, &x, &config, None).unwrap().is_empty());
        assert!(params.encoder_weights[0].bits_eq(&params0.encoder_weights[0]));

        let mut config = tiny_config(3);
        config.pretrain_epochs = 3;
        config.lr = 0.0;
        let mut params = params0.clone();
        pretrain(&mut params, &x, &config, None).unwrap();
        for (a, b) in params.param_mats().iter().zip(params0.param_mats()) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn pretrain_reduces_reconstruction_loss() {
        let mut wins = 0;
        for seed in 0..10u64 {
            let (x, _) = blob_data(8, 4, 1.0, 100 + seed);
            let arch = ArchitectureSpec::new(4, vec![8], 2, 3).unwrap();
            let mut params = ModelParams::glorot(&arch, 200 + seed);
            let mut config = tiny_config(3);
            config.pretrain_epochs = 30;
            config.seed = seed;
            let history = pretrain(&mut params, &x, &config, None).unwrap();
            if history.last().unwrap() < history.first().unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 9, "loss decreased in only {wins}/10 runs");
    }

    #[test]
    fn init_centroids_single_cluster_is_mean_embedding() {
        let (x, _) = blob_data(6, 4, 1.0, 30);
        let arch = ArchitectureSpec::new(4, vec![5], 2, 1).unwrap();
        let params = ModelParams::glorot(&arch, 31);
        let c = init_centroids(&params, &x, 1, 32).unwrap();
        let z = encode(&params, &x).unwrap();
        let n = z.rows() as f64;
        for j in 0..2 {
            let mean: f64 = (0..z.rows()).map(|i| z.get(i, j)).sum::<f64>() / n;
            assert!((c.get(0, j) - mean).abs() < 1e-12);
        }
        let c2 = init_centroids(&params, &x, 1, 32).unwrap();
        assert!(c.bits_eq(&c2));
    }

    #[test]
    fn init_centroids_land_inside_blobs() {
        // Identity encoder: embeddings are the data itself.
        let arch = ArchitectureSpec::new(2, vec![], 2, 3).unwrap();
        let mut params = ModelParams::zeros(&arch);
        params.encoder_weights[0].set(0, 0, 1.0);
        params.encoder_weights[0].set(1, 1, 1.0);
        let (x, truth) = blob_data(10, 2, 1.0, 33);
        let c = init_centroids(&params, &x, 3, 34).unwrap();
        for j in 0..3 {
            // Each centroid must fall inside exactly one blob's bounding box.
            let inside = (0..3).filter(|&blob| {
                let rows: Vec<usize> = truth
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t == blob)
                    .map(|(i, _)| i)
                    .collect();
                (0..2).all(|t| {
                    let lo = rows.iter().map(|&i| x.get(i, t)).fold(f64::INFINITY, f64::min);
                    let hi = rows
                        .iter()
                        .map(|&i| x.get(i, t))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (lo..=hi).contains(&c.get(j, t))
                })
            });
            assert_eq!(inside.count(), 1, "centroid {j} not inside one blob");
        }
    }

    fn masked_blobs(seed: u64) -> (MaskedDataset, Vec<usize>) {
        let (x, truth) = blob_data(20, 6, 1.0, seed);
        let mask = generate_mask(60, 6, 0.2, seed ^ 0x55).unwrap();
        let mut ds = apply_mask(&x, &mask).unwrap();
        ds.labels = Some(truth.clone());
        (ds, truth)
    }

    #[test]
    fn fit_stops_immediately_with_delta_one() {
        let (ds, _) = masked_blobs(40);
        let mut config = tiny_config(3);
        config.delta = 1.0;
        config.pretrain_epochs = 2;
        let result = fit(&ds, &config).unwrap();
        assert_eq!(result.epochs_run, 1);
        assert_eq!(result.stopped_by, StopReason::Delta);
        assert_eq!(result.loss_history.len(), 1);
    }

    #[test]
    fn fit_zero_epochs_returns_kmeans_init() {
        let (ds, _) = masked_blobs(41);
        let mut config = tiny_config(3);
        config.max_iter = 0;
        config.pretrain_epochs = 2;
        let result = fit(&ds, &config).unwrap();
        assert_eq!(result.stopped_by, StopReason::MaxIter);
        assert_eq!(result.epochs_run, 0);
        assert!(result.loss_history.is_empty());
        assert_eq!(result.labels.len(), 60);
        assert!(result.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn fit_is_deterministic_and_preserves_observed() {
        let (ds, _) = masked_blobs(42);
        let mut config = tiny_config(3);
        config.max_iter = 3;
        config.pretrain_epochs = 2;
        let a = fit(&ds, &config).unwrap();
        let b = fit(&ds, &config).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(a.imputed.bits_eq(&b.imputed));
        for i in 0..60 {
            for j in 0..6 {
                let obs = ds.observed.get(i, j);
                if !obs.is_nan() {
                    assert_eq!(a.imputed.get(i, j).to_bits(), obs.to_bits());
                } else {
                    assert!(!a.imputed.get(i, j).is_nan());
                }
            }
        }
    }

    #[test]
    fn fit_emits_progress_records() {
        let (ds, _) = masked_blobs(43);
        let mut config = tiny_config(3);
        config.max_iter = 2;
        config.delta = 0.0;
        config.pretrain_epochs = 2;
        let mut records = Vec::new();
        let mut sink = |r: &EpochRecord| records.push(*r);
        fit_with_progress(&ds, &config, Some(&mut sink)).unwrap();
        let pre = records.iter().filter(|r| r.phase == Phase::Pretrain).count();
        let joint = records.iter().filter(|r| r.phase == Phase::Joint).count();
        assert_eq!(pre, 2);
        assert_eq!(joint, 2);
        assert!(records
            .iter()
            .all(|r| (r.phase == Phase::Joint) == r.label_change.is_some()));
    }

    #[test]
    fn fit_recovers_well_separated_clusters() {
        let (ds, truth) = masked_blobs(44);
        let mut config = tiny_config(3);
        config.max_iter = 15;
        config.pretrain_epochs = 20;
        config.batch_size = 32;
        config.lr = 0.01;
        let result = fit(&ds, &config).unwrap();
        let acc = crate::eval::acc(&truth, &result.labels).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
        assert!(result
            .loss_history
            .iter()
            .all(|r| r.total.is_finite() && r.recon.is_finite() && r.cluster.is_finite()));
    }
}
