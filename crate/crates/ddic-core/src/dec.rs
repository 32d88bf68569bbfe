//! The clustering model: an MLP autoencoder, cluster centroids, Student-t
//! soft assignments, the sharpened self-training target distribution, and
//! the joint loss (transport-based reconstruction + KL clustering).
//!
//! Encoder layers are affine + ReLU except the final embedding layer, which
//! is linear; the decoder mirrors the encoder exactly. The target
//! distribution Q is always treated as a constant during backward — it is a
//! self-training target, not a differentiable function of the parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::math;
use crate::ot::sinkhorn_loss_node;
use crate::rng::rng_from_seed;
use crate::tensor::{pairwise_sq_dists, Matrix, NodeId, Tape};
use rand::Rng;

/// Layer widths of the autoencoder and the number of clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    /// Encoder hidden widths, in order; the decoder mirrors them. May be
    /// empty for a single affine encoder layer.
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub cluster_count: usize,
}

impl ArchitectureSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        embedding_dim: usize,
        cluster_count: usize,
    ) -> Result<Self, CoreError> {
        let spec = Self {
            input_dim,
            hidden_dims,
            embedding_dim,
            cluster_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The conventional deep-embedding architecture: hidden widths
    /// [500, 500, 1000] and a 10-dimensional embedding.
    pub fn default_for(input_dim: usize, cluster_count: usize) -> Result<Self, CoreError> {
        Self::new(input_dim, vec![500, 500, 1000], 10, cluster_count)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.input_dim == 0
            || self.embedding_dim == 0
            || self.cluster_count == 0
            || self.hidden_dims.iter().any(|&h| h == 0)
        {
            return Err(CoreError::Contract(
                "all architecture dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Encoder layer sizes: input → hiddens → embedding.
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    /// Decoder layer sizes: embedding → reversed hiddens → input.
    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.embedding_dim);
        dims.extend(self.hidden_dims.iter().rev());
        dims.push(self.input_dim);
        dims
    }
}

/// All trainable state: encoder and decoder layers plus cluster centroids.
///
/// A weight matrix is stored (fan_in × fan_out) so a batch maps through it
/// as X·W + b; biases are 1×fan_out rows.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub arch: ArchitectureSpec,
    pub encoder_weights: Vec<Matrix>,
    pub encoder_biases: Vec<Matrix>,
    pub decoder_weights: Vec<Matrix>,
    pub decoder_biases: Vec<Matrix>,
    /// k × embedding_dim matrix of cluster centers.
    pub centroids: Matrix,
}

fn layer_shapes(dims: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    dims.windows(2).map(|w| (w[0], w[1]))
}

impl ModelParams {
    pub fn zeros(arch: &ArchitectureSpec) -> Self {
        let build = |dims: &[usize]| -> (Vec<Matrix>, Vec<Matrix>) {
            layer_shapes(dims)
                .map(|(i, o)| (Matrix::zeros(i, o), Matrix::zeros(1, o)))
                .unzip()
        };
        let (encoder_weights, encoder_biases) = build(&arch.encoder_dims());
        let (decoder_weights, decoder_biases) = build(&arch.decoder_dims());
        Self {
            arch: arch.clone(),
            encoder_weights,
            encoder_biases,
            decoder_weights,
            decoder_biases,
            centroids: Matrix::zeros(arch.cluster_count, arch.embedding_dim),
        }
    }

    /// Seeded Glorot-uniform weights (±sqrt(6/(fan_in+fan_out))), zero
    /// biases, zero centroids (centroids are set later from embeddings).
    pub fn glorot(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut init = |dims: &[usize]| -> (Vec<Matrix>, Vec<Matrix>) {
            layer_shapes(dims)
                .map(|(fan_in, fan_out)| {
                    let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
                    let w = Matrix::from_vec(
                        fan_in,
                        fan_out,
                        (0..fan_in * fan_out)
                            .map(|_| rng.random_range(-bound..bound))
                            .collect(),
                    )
                    .expect("dims are consistent");
                    (w, Matrix::zeros(1, fan_out))
                })
                .unzip()
        };
        let (encoder_weights, encoder_biases) = init(&arch.encoder_dims());
        let (decoder_weights, decoder_biases) = init(&arch.decoder_dims());
        Self {
            arch: arch.clone(),
            encoder_weights,
            encoder_biases,
            decoder_weights,
            decoder_biases,
            centroids: Matrix::zeros(arch.cluster_count, arch.embedding_dim),
        }
    }

    /// Checks layer shapes against the architecture and that every entry is
    /// finite.
    pub fn validate(&self) -> Result<(), CoreError> {
        self.arch.validate()?;
        let check = |mats: &[Matrix], biases: &[Matrix], dims: &[usize], side: &str| {
            if mats.len() + 1 != dims.len() || biases.len() != mats.len() {
                return Err(CoreError::Shape(format!("{side} layer count")));
            }
            for (idx, ((w, b), (i, o))) in mats
                .iter()
                .zip(biases)
                .zip(layer_shapes(dims))
                .enumerate()
            {
                if w.shape() != (i, o) || b.shape() != (1, o) {
                    return Err(CoreError::Shape(format!("{side} layer {idx}")));
                }
            }
            Ok(())
        };
        check(
            &self.encoder_weights,
            &self.encoder_biases,
            &self.arch.encoder_dims(),
            "encoder",
        )?;
        check(
            &self.decoder_weights,
            &self.decoder_biases,
            &self.arch.decoder_dims(),
            "decoder",
        )?;
        if self.centroids.shape() != (self.arch.cluster_count, self.arch.embedding_dim) {
            return Err(CoreError::Shape("centroid matrix".into()));
        }
        let finite = self
            .param_mats()
            .into_iter()
            .all(|m| m.is_finite());
        if !finite {
            return Err(CoreError::NonFinite(String::from(
                "model parameters contain a non-finite entry",
            )));
        }
        Ok(())
    }

    /// All parameter matrices in a fixed order (encoder weight/bias pairs,
    /// decoder pairs, centroids) — the order optimizer state follows.
    pub fn param_mats(&self) -> Vec<&Matrix> {
        let mut mats = Vec::new();
        for (w, b) in self.encoder_weights.iter().zip(&self.encoder_biases) {
            mats.push(w);
            mats.push(b);
        }
        for (w, b) in self.decoder_weights.iter().zip(&self.decoder_biases) {
            mats.push(w);
            mats.push(b);
        }
        mats.push(&self.centroids);
        mats
    }

    /// Mutable view in the same order as [`Self::param_mats`].
    pub fn param_mats_mut(&mut self) -> Vec<&mut Matrix> {
        let mut mats: Vec<&mut Matrix> = Vec::new();
        for (w, b) in self
            .encoder_weights
            .iter_mut()
            .zip(self.encoder_biases.iter_mut())
        {
            mats.push(w);
            mats.push(b);
        }
        for (w, b) in self
            .decoder_weights
            .iter_mut()
            .zip(self.decoder_biases.iter_mut())
        {
            mats.push(w);
            mats.push(b);
        }
        mats.push(&mut self.centroids);
        mats
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(w);
    let bias = b.row(0);
    for i in 0..y.rows() {
        for (v, &bv) in y.row_mut(i).iter_mut().zip(bias) {
            *v += bv;
        }
    }
    y
}

fn forward_layers(weights: &[Matrix], biases: &[Matrix], x: &Matrix) -> Matrix {
    let last = weights.len() - 1;
    let mut h = x.clone();
    for (idx, (w, b)) in weights.iter().zip(biases).enumerate() {
        h = affine(&h, w, b);
        if idx != last {
            h = h.map(|v| if v > 0.0 { v } else { 0.0 });
        }
    }
    h
}

/// Maps a batch through the encoder to n×embedding_dim latent codes.
pub fn encode(params: &ModelParams, x: &Matrix) -> Result<Matrix, CoreError> {
    if x.cols() != params.arch.input_dim {
        return Err(CoreError::Shape(format!(
            "input has {} columns, encoder expects {}",
            x.cols(),
            params.arch.input_dim
        )));
    }
    Ok(forward_layers(
        &params.encoder_weights,
        &params.encoder_biases,
        x,
    ))
}

/// Maps latent codes back through the mirrored decoder to n×input_dim.
pub fn decode(params: &ModelParams, z: &Matrix) -> Result<Matrix, CoreError> {
    if z.cols() != params.arch.embedding_dim {
        return Err(CoreError::Shape(format!(
            "latent input has {} columns, decoder expects {}",
            z.cols(),
            params.arch.embedding_dim
        )));
    }
    Ok(forward_layers(
        &params.decoder_weights,
        &params.decoder_biases,
        z,
    ))
}

/// Tape handles for every parameter matrix, for building traced losses.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub encoder_weights: Vec<NodeId>,
    pub encoder_biases: Vec<NodeId>,
    pub decoder_weights: Vec<NodeId>,
    pub decoder_biases: Vec<NodeId>,
    pub centroids: NodeId,
}

impl ParamNodes {
    /// Registers every parameter matrix as a differentiable leaf.
    pub fn insert(tape: &mut Tape, params: &ModelParams) -> Self {
        let leaves =
            |tape: &mut Tape, mats: &[Matrix]| mats.iter().map(|m| tape.leaf(m)).collect();
        Self {
            encoder_weights: leaves(tape, &params.encoder_weights),
            encoder_biases: leaves(tape, &params.encoder_biases),
            decoder_weights: leaves(tape, &params.decoder_weights),
            decoder_biases: leaves(tape, &params.decoder_biases),
            centroids: tape.leaf(&params.centroids),
        }
    }

    /// Node ids in the order of [`ModelParams::param_mats`].
    pub fn flat(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for (w, b) in self.encoder_weights.iter().zip(&self.encoder_biases) {
            ids.push(*w);
            ids.push(*b);
        }
        for (w, b) in self.decoder_weights.iter().zip(&self.decoder_biases) {
            ids.push(*w);
            ids.push(*b);
        }
        ids.push(self.centroids);
        ids
    }
}

fn forward_layers_nodes(
    tape: &mut Tape,
    weights: &[NodeId],
    biases: &[NodeId],
    x: NodeId,
) -> NodeId {
    let rows = tape.value(x).rows();
    let last = weights.len() - 1;
    let mut h = x;
    for (idx, (&w, &b)) in weights.iter().zip(biases).enumerate() {
        let wx = tape.matmul(h, w);
        let bias = tape.broadcast_row(b, rows);
        h = tape.add(wx, bias);
        if idx != last {
            h = tape.relu(h);
        }
    }
    h
}

/// Traced [`encode`].
pub fn encode_nodes(tape: &mut Tape, params: &ParamNodes, x: NodeId) -> NodeId {
    forward_layers_nodes(tape, &params.encoder_weights, &params.encoder_biases, x)
}

/// Traced [`decode`].
pub fn decode_nodes(tape: &mut Tape, params: &ParamNodes, z: NodeId) -> NodeId {
    forward_layers_nodes(tape, &params.decoder_weights, &params.decoder_biases, z)
}

/// Row-stochastic soft assignment matrix; entries lie in (0,1] and every
/// row sums to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    values: Matrix,
}

impl AssignmentMatrix {
    pub fn new(values: Matrix) -> Result<Self, CoreError> {
        if values.cols() == 0 {
            return Err(CoreError::Contract(
                "an assignment needs at least one cluster".into(),
            ));
        }
        for i in 0..values.rows() {
            let mut sum = 0.0;
            for &v in values.row(i) {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(CoreError::Contract(format!(
                        "assignment entries must lie in (0, 1], got {v} in row {i}"
                    )));
                }
                sum += v;
            }
            if math::abs(sum - 1.0) > 1e-9 {
                return Err(CoreError::Contract(format!(
                    "assignment row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn clusters(&self) -> usize {
        self.values.cols()
    }
}

/// Student-t (one degree of freedom) soft assignment:
/// p_ij ∝ (1 + ‖z_i − μ_j‖²)^(−1), rows normalized to 1.
pub fn soft_assign(z: &Matrix, centroids: &Matrix) -> Result<AssignmentMatrix, CoreError> {
    if centroids.rows() == 0 {
        return Err(CoreError::Contract(
            "soft assignment needs at least one centroid".into(),
        ));
    }
    let dists = pairwise_sq_dists(z, centroids)?;
    let mut values = dists.map(|d| 1.0 / (1.0 + d));
    for i in 0..values.rows() {
        let row = values.row_mut(i);
        let inv_sum = 1.0 / row.iter().sum::<f64>();
        for v in row {
            *v *= inv_sum;
        }
    }
    AssignmentMatrix::new(values)
}

/// Traced [`soft_assign`]; returns the n×k probability node.
pub fn soft_assign_nodes(tape: &mut Tape, z: NodeId, centroids: NodeId) -> NodeId {
    let k = tape.value(centroids).rows();
    let dists = tape.pairwise_sq_dists(z, centroids);
    let shifted = tape.add_scalar(dists, 1.0);
    let kernel = tape.recip(shifted);
    let row_sums = tape.row_sum(kernel);
    let inv_sums = tape.recip(row_sums);
    let tiled = tape.broadcast_col(inv_sums, k);
    tape.mul(kernel, tiled)
}

/// Sharpened self-training target: q_ij ∝ p_ij² / f_j with soft cluster
/// frequencies f_j = Σ_i p_ij, rows normalized.
pub fn target_dist(p: &AssignmentMatrix) -> AssignmentMatrix {
    AssignmentMatrix {
        values: target_dist_matrix(p.values()),
    }
}

fn target_dist_matrix(p: &Matrix) -> Matrix {
    let freqs = p.col_sums();
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let src = p.row(i);
        let dst = out.row_mut(i);
        let mut sum = 0.0;
        for (j, &f) in freqs.iter().enumerate() {
            // An exactly-zero frequency column carries no mass anywhere and
            // is left out of the normalization.
            if f > 0.0 {
                dst[j] = src[j] * src[j] / f;
                sum += dst[j];
            }
        }
        let inv = 1.0 / sum;
        for v in dst {
            *v *= inv;
        }
    }
    out
}

/// KL(Q ‖ P) = Σ q_ij · log(q_ij / p_ij), with 0·log(0/p) = 0.
pub fn kl_loss(p: &Matrix, q: &Matrix) -> Result<f64, CoreError> {
    if p.shape() != q.shape() {
        return Err(CoreError::Shape(format!(
            "P {:?} vs Q {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let mut total = 0.0;
    for (&pv, &qv) in p.as_slice().iter().zip(q.as_slice()) {
        if qv == 0.0 {
            continue;
        }
        if pv == 0.0 {
            return Err(CoreError::Contract(
                "KL divergence undefined: q > 0 where p == 0".into(),
            ));
        }
        total += qv * math::ln(qv / pv);
    }
    Ok(total)
}

/// Argmax cluster per row, ties broken toward the lower index.
pub fn hard_assign(p: &AssignmentMatrix) -> Vec<usize> {
    let values = p.values();
    (0..values.rows())
        .map(|i| {
            let row = values.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Which terms of the joint objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Reconstruction + gamma × clustering (the full objective).
    Joint,
    /// Transport reconstruction term only.
    ReconstructionOnly,
    /// gamma × clustering term only.
    ClusteringOnly,
}

/// Settings for [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    /// Sinkhorn regularization strength.
    pub eps: f64,
    /// Clustering-term weight (γ ≥ 0).
    pub gamma: f64,
    /// Iteration cap for the unrolled transport loss.
    pub sinkhorn_unroll: usize,
    pub mode: LossMode,
}

/// Scalar loss nodes produced by [`total_loss`]; absent terms were not part
/// of the requested objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub recon: Option<NodeId>,
    pub cluster: Option<NodeId>,
}

/// Builds the joint objective L = L_s + γ·L_c on `tape` for one batch.
///
/// L_s is the debiased Sinkhorn divergence between the batch and its
/// reconstruction; L_c is KL(Q ‖ P) with P the traced soft assignment of the
/// batch embeddings. Q is `q_target` when given, otherwise it is derived
/// from the current P — either way it enters the graph as a constant, so no
/// gradient flows through it. With γ = 0 in joint mode the returned total is
/// the reconstruction node itself.
pub fn total_loss(
    tape: &mut Tape,
    params: &ParamNodes,
    x_batch: &Matrix,
    opts: &LossOptions,
    q_target: Option<&Matrix>,
) -> Result<LossNodes, CoreError> {
    let input_dim = tape.value(params.encoder_weights[0]).rows();
    if x_batch.cols() != input_dim {
        return Err(CoreError::Shape(format!(
            "batch has {} columns, encoder expects {input_dim}",
            x_batch.cols()
        )));
    }
    if x_batch.rows() == 0 {
        return Err(CoreError::Shape("batch must be nonempty".into()));
    }
    if !x_batch.is_finite() {
        return Err(CoreError::Contract("batch must be finite".into()));
    }
    if !(opts.gamma.is_finite() && opts.gamma >= 0.0) {
        return Err(CoreError::Contract(format!(
            "gamma must be nonnegative and finite, got {}",
            opts.gamma
        )));
    }

    let x = tape.constant(x_batch);
    let z = encode_nodes(tape, params, x);

    let recon = if opts.mode == LossMode::ClusteringOnly {
        None
    } else {
        let x_hat = decode_nodes(tape, params, z);
        Some(sinkhorn_loss_node(
            tape,
            x,
            x_hat,
            opts.eps,
            opts.sinkhorn_unroll,
        )?)
    };

    let needs_cluster = match opts.mode {
        LossMode::ReconstructionOnly => false,
        LossMode::ClusteringOnly => true,
        LossMode::Joint => opts.gamma > 0.0,
    };
    let cluster = if needs_cluster {
        let p = soft_assign_nodes(tape, z, params.centroids);
        let q = match q_target {
            Some(q) => {
                if q.shape() != tape.value(p).shape() {
                    return Err(CoreError::Shape(format!(
                        "target distribution {:?} vs assignments {:?}",
                        q.shape(),
                        tape.value(p).shape()
                    )));
                }
                q.clone()
            }
            None => target_dist_matrix(tape.value(p)),
        };
        // Σ q·log q is constant; the traced part is −Σ q·log p.
        let q_entropy: f64 = q
            .as_slice()
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * math::ln(v))
            .sum();
        let q_const = tape.constant(&q);
        let log_p = tape.log(p);
        let weighted = tape.mul(q_const, log_p);
        let cross = tape.sum_all(weighted);
        let neg_cross = tape.scalar_mul(cross, -1.0);
        Some(tape.add_scalar(neg_cross, q_entropy))
    } else {
        None
    };

    let total = match (opts.mode, recon, cluster) {
        (LossMode::ReconstructionOnly, Some(ls), _) => ls,
        (LossMode::ClusteringOnly, _, Some(lc)) => tape.scalar_mul(lc, opts.gamma),
        (LossMode::Joint, Some(ls), None) => ls,
        (LossMode::Joint, Some(ls), Some(lc)) => {
            let scaled = tape.scalar_mul(lc, opts.gamma);
            tape.add(ls, scaled)
        }
        _ => unreachable!("mode/term combinations are exhaustive"),
    };
    Ok(LossNodes {
        total,
        recon,
        cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small_arch() -> ArchitectureSpec {
        ArchitectureSpec::new(4, vec![3], 2, 2).unwrap()
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        )
        .unwrap()
    }

    fn randomize(params: &mut ModelParams, seed: u64) {
        let mut rng = rng_from_seed(seed);
        for m in params.param_mats_mut() {
            for v in m.as_mut_slice() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
    }

    #[test]
    fn architecture_rejects_zero_dims() {
        assert!(ArchitectureSpec::new(0, vec![3], 2, 2).is_err());
        assert!(ArchitectureSpec::new(4, vec![0], 2, 2).is_err());
        assert!(ArchitectureSpec::new(4, vec![], 2, 2).is_ok());
        let arch = small_arch();
        assert_eq!(arch.encoder_dims(), vec![4, 3, 2]);
        assert_eq!(arch.decoder_dims(), vec![2, 3, 4]);
    }

    #[test]
    fn zero_params_map_to_zero() {
        let params = ModelParams::zeros(&small_arch());
        let x = rand_matrix(5, 4, 1);
        let z = encode(&params, &x).unwrap();
        assert_eq!(z, Matrix::zeros(5, 2));
        assert_eq!(decode(&params, &z).unwrap(), Matrix::zeros(5, 4));
    }

    #[test]
    fn identity_single_layer_roundtrip() {
        let arch = ArchitectureSpec::new(3, vec![], 3, 2).unwrap();
        let mut params = ModelParams::zeros(&arch);
        for i in 0..3 {
            params.encoder_weights[0].set(i, i, 1.0);
            params.decoder_weights[0].set(i, i, 1.0);
        }
        let x = rand_matrix(4, 3, 2);
        let z = encode(&params, &x).unwrap();
        assert_eq!(z, x);
        assert_eq!(decode(&params, &z).unwrap(), x);
    }

    /// Scalar-loop forward pass, independent of the Matrix kernels.
    fn naive_forward(weights: &[Matrix], biases: &[Matrix], x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for (idx, (w, b)) in weights.iter().zip(biases).enumerate() {
            let mut y = Matrix::zeros(h.rows(), w.cols());
            for i in 0..h.rows() {
                for o in 0..w.cols() {
                    let mut acc = b.get(0, o);
                    for t in 0..w.rows() {
                        acc += h.get(i, t) * w.get(t, o);
                    }
                    if idx != weights.len() - 1 && acc < 0.0 {
                        acc = 0.0;
                    }
                    y.set(i, o, acc);
                }
            }
            h = y;
        }
        h
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut params = ModelParams::zeros(&small_arch());
        randomize(&mut params, 3);
        let x = rand_matrix(6, 4, 4);
        let z = encode(&params, &x).unwrap();
        let z_naive = naive_forward(&params.encoder_weights, &params.encoder_biases, &x);
        for (a, b) in z.as_slice().iter().zip(z_naive.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let xh = decode(&params, &z).unwrap();
        let xh_naive = naive_forward(&params.decoder_weights, &params.decoder_biases, &z);
        for (a, b) in xh.as_slice().iter().zip(xh_naive.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let params = ModelParams::zeros(&small_arch());
        assert!(matches!(
            encode(&params, &Matrix::zeros(2, 5)),
            Err(CoreError::Shape(_))
        ));
        assert!(matches!(
            decode(&params, &Matrix::zeros(2, 3)),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn glorot_is_seeded_and_bounded() {
        let arch = small_arch();
        let a = ModelParams::glorot(&arch, 11);
        let b = ModelParams::glorot(&arch, 11);
        let c = ModelParams::glorot(&arch, 12);
        assert!(a.encoder_weights[0].bits_eq(&b.encoder_weights[0]));
        assert!(!a.encoder_weights[0].bits_eq(&c.encoder_weights[0]));
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.encoder_weights[0].max_abs() <= bound);
        assert_eq!(a.encoder_biases[0], Matrix::zeros(1, 3));
        a.validate().unwrap();
    }

    #[test]
    fn traced_forward_matches_plain() {
        let mut params = ModelParams::zeros(&small_arch());
        randomize(&mut params, 5);
        let x = rand_matrix(4, 4, 6);
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params);
        let nx = tape.constant(&x);
        let nz = encode_nodes(&mut tape, &nodes, nx);
        let nxh = decode_nodes(&mut tape, &nodes, nz);
        assert!(tape.value(nz).bits_eq(&encode(&params, &x).unwrap()));
        let plain = decode(&params, &encode(&params, &x).unwrap()).unwrap();
        assert!(tape.value(nxh).bits_eq(&plain));
    }

    #[test]
    fn soft_assign_examples() {
        // z at the first centroid, distance 1 from the second.
        let z = Matrix::from_rows(&[&[0.0]]).unwrap();
        let mu = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let p = soft_assign(&z, &mu).unwrap();
        assert!((p.values().get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.values().get(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        // Equidistant point gets a uniform row.
        let z = Matrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let mu = Matrix::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let p = soft_assign(&z, &mu).unwrap();
        for j in 0..3 {
            assert!((p.values().get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }

        let none = Matrix::zeros(0, 2);
        assert!(matches!(
            soft_assign(&z, &none),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn soft_assign_matches_scalar_formula() {
        let z = rand_matrix(3, 2, 7);
        let mu = rand_matrix(2, 2, 8);
        let p = soft_assign(&z, &mu).unwrap();
        for i in 0..3 {
            let mut kernels = [0.0; 2];
            for j in 0..2 {
                let mut d = 0.0;
                for t in 0..2 {
                    let diff = z.get(i, t) - mu.get(j, t);
                    d += diff * diff;
                }
                kernels[j] = 1.0 / (1.0 + d);
            }
            let sum: f64 = kernels.iter().sum();
            for j in 0..2 {
                assert!((p.values().get(i, j) - kernels[j] / sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn traced_soft_assign_matches_plain() {
        let z = rand_matrix(5, 3, 9);
        let mu = rand_matrix(4, 3, 10);
        let plain = soft_assign(&z, &mu).unwrap();
        let mut tape = Tape::new();
        let nz = tape.constant(&z);
        let nmu = tape.constant(&mu);
        let np = soft_assign_nodes(&mut tape, nz, nmu);
        for (a, b) in tape
            .value(np)
            .as_slice()
            .iter()
            .zip(plain.values().as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_matrix_validates() {
        assert!(AssignmentMatrix::new(Matrix::from_rows(&[&[0.5, 0.5]]).unwrap()).is_ok());
        assert!(AssignmentMatrix::new(Matrix::from_rows(&[&[1.0, 0.0]]).unwrap()).is_err());
        assert!(AssignmentMatrix::new(Matrix::from_rows(&[&[0.6, 0.6]]).unwrap()).is_err());
    }

    #[test]
    fn target_dist_single_row_collapses_to_p() {
        let p = AssignmentMatrix::new(Matrix::from_rows(&[&[0.3, 0.7]]).unwrap()).unwrap();
        let q = target_dist(&p);
        for (a, b) in q.values().as_slice().iter().zip(p.values().as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn target_dist_uniform_is_fixed_point() {
        let p = AssignmentMatrix::new(Matrix::filled(4, 5, 0.2)).unwrap();
        let q = target_dist(&p);
        for &v in q.values().as_slice() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn target_dist_hand_example() {
        let p = AssignmentMatrix::new(
            Matrix::from_rows(&[&[0.8, 0.2], &[0.4, 0.6]]).unwrap(),
        )
        .unwrap();
        let q = target_dist(&p);
        // Exact fractions: rows [32/35, 3/35] and [8/35, 27/35].
        let exact = [32.0 / 35.0, 3.0 / 35.0, 8.0 / 35.0, 27.0 / 35.0];
        for (a, b) in q.values().as_slice().iter().zip(&exact) {
            assert!((a - b).abs() < 1e-12);
        }
        let rounded = [0.9143, 0.0857, 0.2286, 0.7714];
        for (a, b) in q.values().as_slice().iter().zip(&rounded) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn target_dist_skips_exactly_empty_column() {
        let p = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let q = target_dist_matrix(&p);
        assert_eq!(q, p);
    }

    #[test]
    fn kl_loss_examples() {
        let p = Matrix::from_rows(&[&[0.5, 0.5]]).unwrap();
        assert_eq!(kl_loss(&p, &p).unwrap(), 0.0);
        let q = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        assert!((kl_loss(&p, &q).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
        let zero_p = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert!(matches!(
            kl_loss(&zero_p, &q),
            Err(CoreError::Contract(_))
        ));
        assert!(matches!(
            kl_loss(&p, &Matrix::zeros(2, 2)),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn kl_loss_nonnegative_and_matches_loop() {
        for seed in 0..5u64 {
            let raw = rand_matrix(4, 3, 100 + seed).map(|v| v.abs() + 0.1);
            let mut pm = raw.clone();
            for i in 0..4 {
                let row = pm.row_mut(i);
                let s: f64 = row.iter().sum();
                for v in row {
                    *v /= s;
                }
            }
            let p = AssignmentMatrix::new(pm).unwrap();
            let q = target_dist(&p);
            let got = kl_loss(p.values(), q.values()).unwrap();
            let mut want = 0.0;
            for i in 0..4 {
                for j in 0..3 {
                    let (pv, qv) = (p.values().get(i, j), q.values().get(i, j));
                    want += qv * (qv / pv).ln();
                }
            }
            assert!((got - want).abs() < 1e-12);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn hard_assign_argmax_with_low_tie() {
        let p = AssignmentMatrix::new(Matrix::from_rows(&[&[0.9, 0.1]]).unwrap()).unwrap();
        assert_eq!(hard_assign(&p), vec![0]);
        let tie = AssignmentMatrix::new(Matrix::from_rows(&[&[0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(hard_assign(&tie), vec![0]);

        let p = soft_assign(&rand_matrix(6, 2, 20), &rand_matrix(3, 2, 21)).unwrap();
        let labels = hard_assign(&p);
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..3 {
                assert!(p.values().get(i, j) <= p.values().get(i, l));
            }
        }
        // Argmax is invariant under strictly increasing row transforms.
        let cubed = p.values().map(|v| v * v * v);
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..3 {
                assert!(cubed.get(i, j) <= cubed.get(i, l));
            }
        }
    }

    fn loss_opts(gamma: f64, mode: LossMode) -> LossOptions {
        LossOptions {
            eps: 0.1,
            gamma,
            sinkhorn_unroll: 200,
            mode,
        }
    }

    #[test]
    fn gamma_zero_total_is_the_reconstruction_node() {
        let mut params = ModelParams::zeros(&small_arch());
        randomize(&mut params, 30);
        let x = rand_matrix(4, 4, 31);
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params);
        let loss = total_loss(&mut tape, &nodes, &x, &loss_opts(0.0, LossMode::Joint), None)
            .unwrap();
        assert_eq!(loss.total, loss.recon.unwrap());
        assert!(loss.cluster.is_none());
    }

    #[test]
    fn perfect_autoencoder_with_fixed_point_target_has_zero_loss() {
        // Identity encoder/decoder on 1-D data; centroids placed symmetric
        // around every point so P is uniform and Q == P.
        let arch = ArchitectureSpec::new(1, vec![], 1, 2).unwrap();
        let mut params = ModelParams::zeros(&arch);
        params.encoder_weights[0].set(0, 0, 1.0);
        params.decoder_weights[0].set(0, 0, 1.0);
        params.centroids = Matrix::from_rows(&[&[2.0], &[-2.0]]).unwrap();
        let x = Matrix::from_rows(&[&[0.0], &[0.0], &[0.0]]).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params);
        let loss = total_loss(
            &mut tape,
            &nodes,
            &x,
            &loss_opts(100.0, LossMode::Joint),
            None,
        )
        .unwrap();
        assert!(tape.value(loss.total).get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn single_term_modes() {
        let mut params = ModelParams::zeros(&small_arch());
        randomize(&mut params, 40);
        let x = rand_matrix(4, 4, 41);

        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params);
        let rec_only = total_loss(
            &mut tape,
            &nodes,
            &x,
            &loss_opts(100.0, LossMode::ReconstructionOnly),
            None,
        )
        .unwrap();
        assert_eq!(rec_only.total, rec_only.recon.unwrap());
        assert!(rec_only.cluster.is_none());

        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params);
        let clu_only = total_loss(
            &mut tape,
            &nodes,
            &x,
            &loss_opts(100.0, LossMode::ClusteringOnly),
            None,
        )
        .unwrap();
        assert!(clu_only.recon.is_none());
        let lc = tape.value(clu_only.cluster.unwrap()).get(0, 0);
        assert!((tape.value(clu_only.total).get(0, 0) - 100.0 * lc).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        let arch = ArchitectureSpec::new(6, vec![8], 2, 2).unwrap();
        let mut params = ModelParams::zeros(&arch);
        randomize(&mut params, 50);
        params.centroids = rand_matrix(2, 2, 51);
        let x = rand_matrix(5, 6, 52);
        let opts = loss_opts(100.0, LossMode::Joint);

        // Freeze Q so the finite-difference oracle probes exactly the
        // function backward differentiates.
        let q = {
            let mut tape = Tape::new();
            let nodes = ParamNodes::insert(&mut tape, &params);
            let nx = tape.constant(&x);
            let nz = encode_nodes(&mut tape, &nodes, nx);
            let np = soft_assign_nodes(&mut tape, nz, nodes.centroids);
            target_dist_matrix(tape.value(np))
        };

        let params_ref = &params;
        let x_ref = &x;
        let q_ref = &q;
        let err = grad_check(
            move |tape, w0| {
                let constant =
                    |tape: &mut Tape, mats: &[Matrix]| mats.iter().map(|m| tape.constant(m)).collect();
                let mut nodes = ParamNodes {
                    encoder_weights: constant(tape, &params_ref.encoder_weights),
                    encoder_biases: constant(tape, &params_ref.encoder_biases),
                    decoder_weights: constant(tape, &params_ref.decoder_weights),
                    decoder_biases: constant(tape, &params_ref.decoder_biases),
                    centroids: tape.constant(&params_ref.centroids),
                };
                nodes.encoder_weights[0] = w0;
                total_loss(tape, &nodes, x_ref, &opts, Some(q_ref)).map(|l| l.total)
            },
            &params.encoder_weights[0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "first-layer weight gradient error {err}");
    }

    #[test]
    fn total_loss_rejects_bad_batches() {
        let params = ModelParams::zeros(&small_arch());
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params);
        assert!(matches!(
            total_loss(
                &mut tape,
                &nodes,
                &Matrix::zeros(3, 5),
                &loss_opts(1.0, LossMode::Joint),
                None
            ),
            Err(CoreError::Shape(_))
        ));
        assert!(matches!(
            total_loss(
                &mut tape,
                &nodes,
                &Matrix::filled(3, 4, f64::NAN),
                &loss_opts(1.0, LossMode::Joint),
                None
            ),
            Err(CoreError::Contract(_))
        ));
        assert!(matches!(
            total_loss(
                &mut tape,
                &nodes,
                &Matrix::zeros(3, 4),
                &loss_opts(-1.0, LossMode::Joint),
                None
            ),
            Err(CoreError::Contract(_))
        ));
    }
}
