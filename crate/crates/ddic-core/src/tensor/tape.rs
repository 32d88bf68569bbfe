//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] is an append-only arena of nodes; each op records its parents
//! and enough metadata to replay the chain rule. [`Tape::backward`] walks the
//! arena in reverse and accumulates exact gradients for every node that
//! (transitively) depends on a trainable leaf. Graphs are acyclic by
//! construction because ops can only reference already-existing nodes.
//!
//! The primitive set is exactly what the joint training loss needs: matrix
//! multiply, elementwise arithmetic, ReLU/exp/log/reciprocal, reductions,
//! row/column broadcasts, transpose, pairwise squared distances, row-wise
//! log-sum-exp, and the two fused Sinkhorn half-iteration updates
//! (`softmin_rows` / `softmin_cols`; the column update takes the transposed
//! cost so both directions stream through contiguous memory). The fused
//! updates return only the updated dual potential and recompute their softmax
//! weights during backward, so an unrolled Sinkhorn solve stores O(n+m) per
//! iteration instead of O(n·m).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::math;
use crate::tensor::kernels;
use crate::tensor::matrix::{logsumexp_rows, pairwise_sq_dists, Matrix};

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    RowSum(NodeId),
    ColSum(NodeId),
    SumAll(NodeId),
    BroadcastCol(NodeId),
    BroadcastRow(NodeId),
    Transpose(NodeId),
    PairwiseSqDists(NodeId, NodeId),
    LogSumExpRows(NodeId),
    // The fused softmin ops keep their forward log-sum-exp (O(n) per
    // iteration) so backward recomputes softmax weights with one exp sweep.
    SoftminRows { cost: NodeId, potential: NodeId, eps: f64, lse: Vec<f64> },
    SoftminCols { cost_t: NodeId, potential: NodeId, eps: f64, lse: Vec<f64> },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation graph with reverse-mode gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: participates in gradient computation.
    pub fn leaf(&mut self, value: &Matrix) -> NodeId {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Non-trainable input: gradients never flow into it.
    pub fn constant(&mut self, value: &Matrix) -> NodeId {
        self.push(value.clone(), Op::Constant, false)
    }

    /// 1×1 constant, convenient for scalar offsets.
    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(&Matrix::filled(1, 1, value))
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `id`;
    /// `None` means no gradient reached the node (i.e. it is zero).
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, parents: &[NodeId]) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    fn val(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.val(a).matmul(self.val(b));
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.val(a).add(self.val(b));
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.val(a).sub(self.val(b));
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.val(a).hadamard(self.val(b));
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.val(a).scale(c);
        self.push_op(value, Op::ScalarMul(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.val(a).add_scalar(c);
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = self.val(a).map(|x| 1.0 / x);
        self.push_op(value, Op::Recip(a), &[a])
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.val(a).map(math::exp);
        self.push_op(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.val(a).map(math::ln);
        self.push_op(value, Op::Log(a), &[a])
    }

    /// Row sums as an n×1 column.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let sums = self.val(a).row_sums();
        let value = Matrix::from_vec(sums.len(), 1, sums).expect("row_sums length");
        self.push_op(value, Op::RowSum(a), &[a])
    }

    /// Column sums as a 1×m row.
    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let sums = self.val(a).col_sums();
        let value = Matrix::from_vec(1, sums.len(), sums).expect("col_sums length");
        self.push_op(value, Op::ColSum(a), &[a])
    }

    /// Sum of all entries as a 1×1 scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.val(a).sum());
        self.push_op(value, Op::SumAll(a), &[a])
    }

    /// Tiles an n×1 column across `cols` columns.
    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> NodeId {
        let src = self.val(a);
        assert_eq!(src.cols(), 1, "broadcast_col expects an n×1 column");
        let mut value = Matrix::zeros(src.rows(), cols);
        for i in 0..src.rows() {
            let v = src.get(i, 0);
            value.row_mut(i).fill(v);
        }
        self.push_op(value, Op::BroadcastCol(a), &[a])
    }

    /// Tiles a 1×m row across `rows` rows.
    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> NodeId {
        let src = self.val(a);
        assert_eq!(src.rows(), 1, "broadcast_row expects a 1×m row");
        let mut value = Matrix::zeros(rows, src.cols());
        for i in 0..rows {
            value.row_mut(i).copy_from_slice(src.row(0));
        }
        self.push_op(value, Op::BroadcastRow(a), &[a])
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.val(a).transpose();
        self.push_op(value, Op::Transpose(a), &[a])
    }

    /// Pairwise squared distances between the rows of `x` and `y`.
    pub fn pairwise_sq_dists(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let value = pairwise_sq_dists(self.val(x), self.val(y))
            .expect("pairwise_sq_dists column mismatch");
        self.push_op(value, Op::PairwiseSqDists(x, y), &[x, y])
    }

    /// Row-wise log-sum-exp as an n×1 column.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let sums = logsumexp_rows(self.val(a)).expect("logsumexp_rows on empty matrix");
        let value = Matrix::from_vec(sums.len(), 1, sums).expect("logsumexp length");
        self.push_op(value, Op::LogSumExpRows(a), &[a])
    }

    /// Sinkhorn row half-iteration: given the cost matrix and the column dual
    /// `g` (1×m), returns the updated row dual `f` (n×1) with
    /// `f[i] = eps·log_a[i] − eps·logsumexp_j((g[j] − cost[i][j])/eps)`.
    /// `log_a` holds the log row marginals and is treated as a constant.
    pub fn softmin_rows(&mut self, cost: NodeId, potential: NodeId, log_a: &[f64], eps: f64) -> NodeId {
        let (rows, cols) = self.val(cost).shape();
        let pot = self.val(potential);
        assert_eq!(pot.shape(), (1, cols), "softmin_rows expects a 1×m dual");
        assert_eq!(log_a.len(), rows, "softmin_rows log-marginal length");
        let mut out = vec![0.0; rows];
        let mut lse = vec![0.0; rows];
        kernels::softmin_rows_into(self.val(cost), pot.as_slice(), log_a, eps, &mut out, &mut lse);
        let value = Matrix::from_vec(rows, 1, out).expect("softmin_rows length");
        self.push_op(
            value,
            Op::SoftminRows { cost, potential, eps, lse },
            &[cost, potential],
        )
    }

    /// Sinkhorn column half-iteration: given the **transposed** cost matrix
    /// (m×n) and the row dual `f` (n×1), returns the updated column dual `g`
    /// (1×m). Taking Cᵀ lets the update reuse the contiguous row kernel.
    pub fn softmin_cols(&mut self, cost_t: NodeId, potential: NodeId, log_b: &[f64], eps: f64) -> NodeId {
        let (rows_t, cols_t) = self.val(cost_t).shape();
        let pot = self.val(potential);
        assert_eq!(pot.shape(), (cols_t, 1), "softmin_cols expects an n×1 dual");
        assert_eq!(log_b.len(), rows_t, "softmin_cols log-marginal length");
        let mut out = vec![0.0; rows_t];
        let mut lse = vec![0.0; rows_t];
        kernels::softmin_rows_into(self.val(cost_t), pot.as_slice(), log_b, eps, &mut out, &mut lse);
        let value = Matrix::from_vec(1, rows_t, out).expect("softmin_cols length");
        self.push_op(
            value,
            Op::SoftminCols { cost_t, potential, eps, lse },
            &[cost_t, potential],
        )
    }

    /// Accumulates gradients of `root` into every reachable node.
    ///
    /// Gradients from a previous backward pass are cleared first, so repeated
    /// calls on the same tape are bit-identical.
    pub fn backward(&mut self, root: NodeId) -> Result<(), CoreError> {
        let shape = self.nodes[root.0].value.shape();
        if shape != (1, 1) {
            return Err(CoreError::Contract(format!(
                "backward requires a 1x1 scalar root, got {}x{}",
                shape.0, shape.1
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.take().expect("checked above");
            self.apply_rule(i, &op, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: Matrix) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    fn apply_rule(&mut self, out_idx: usize, op: &Op, g: &Matrix) {
        let out = NodeId(out_idx);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let d = g.matmul_nt(self.val(b));
                    self.accum(a, d);
                }
                if self.needs(b) {
                    let d = self.val(a).matmul_tn(g);
                    self.accum(b, d);
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    self.accum(a, g.clone());
                }
                if self.needs(b) {
                    self.accum(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    self.accum(a, g.clone());
                }
                if self.needs(b) {
                    self.accum(b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = g.hadamard(self.val(b));
                    self.accum(a, d);
                }
                if self.needs(b) {
                    let d = g.hadamard(self.val(a));
                    self.accum(b, d);
                }
            }
            Op::ScalarMul(a, c) => {
                if self.needs(a) {
                    self.accum(a, g.scale(c));
                }
            }
            Op::AddScalar(a) => {
                if self.needs(a) {
                    self.accum(a, g.clone());
                }
            }
            Op::Recip(a) => {
                if self.needs(a) {
                    // d(1/x)/dx = -1/x² = -out²
                    let out_val = self.val(out);
                    let d = g.hadamard(out_val).hadamard(out_val).scale(-1.0);
                    self.accum(a, d);
                }
            }
            Op::Relu(a) => {
                if self.needs(a) {
                    let d = g.zip_map(self.val(a), |gi, ai| if ai > 0.0 { gi } else { 0.0 });
                    self.accum(a, d);
                }
            }
            Op::Exp(a) => {
                if self.needs(a) {
                    let d = g.hadamard(self.val(out));
                    self.accum(a, d);
                }
            }
            Op::Log(a) => {
                if self.needs(a) {
                    let d = g.zip_map(self.val(a), |gi, ai| gi / ai);
                    self.accum(a, d);
                }
            }
            Op::RowSum(a) => {
                if self.needs(a) {
                    let (rows, cols) = self.val(a).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        d.row_mut(i).fill(g.get(i, 0));
                    }
                    self.accum(a, d);
                }
            }
            Op::ColSum(a) => {
                if self.needs(a) {
                    let (rows, cols) = self.val(a).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        d.row_mut(i).copy_from_slice(g.row(0));
                    }
                    self.accum(a, d);
                }
            }
            Op::SumAll(a) => {
                if self.needs(a) {
                    let (rows, cols) = self.val(a).shape();
                    self.accum(a, Matrix::filled(rows, cols, g.get(0, 0)));
                }
            }
            Op::BroadcastCol(a) => {
                if self.needs(a) {
                    let sums = g.row_sums();
                    let d = Matrix::from_vec(sums.len(), 1, sums).expect("row_sums length");
                    self.accum(a, d);
                }
            }
            Op::BroadcastRow(a) => {
                if self.needs(a) {
                    let sums = g.col_sums();
                    let d = Matrix::from_vec(1, sums.len(), sums).expect("col_sums length");
                    self.accum(a, d);
                }
            }
            Op::Transpose(a) => {
                if self.needs(a) {
                    self.accum(a, g.transpose());
                }
            }
            Op::PairwiseSqDists(x, y) => {
                // out[i][j] = Σ_t (x[i][t] − y[j][t])²
                // dX = 2·(diag(G·1)·X − G·Y), dY = 2·(diag(Gᵀ·1)·Y − Gᵀ·X)
                if self.needs(x) {
                    let rs = g.row_sums();
                    let gy = g.matmul(self.val(y));
                    let xv = self.val(x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let scale = rs[i];
                        let xr = xv.row(i);
                        let gyr = gy.row(i);
                        for (t, dst) in d.row_mut(i).iter_mut().enumerate() {
                            *dst = 2.0 * (scale * xr[t] - gyr[t]);
                        }
                    }
                    self.accum(x, d);
                }
                if self.needs(y) {
                    let cs = g.col_sums();
                    let gtx = g.matmul_tn(self.val(x));
                    let yv = self.val(y);
                    let mut d = Matrix::zeros(yv.rows(), yv.cols());
                    for j in 0..yv.rows() {
                        let scale = cs[j];
                        let yr = yv.row(j);
                        let gtxr = gtx.row(j);
                        for (t, dst) in d.row_mut(j).iter_mut().enumerate() {
                            *dst = 2.0 * (scale * yr[t] - gtxr[t]);
                        }
                    }
                    self.accum(y, d);
                }
            }
            Op::LogSumExpRows(a) => {
                if self.needs(a) {
                    let av = self.val(a);
                    let outs = self.val(out);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let u = g.get(i, 0);
                        let lse = outs.get(i, 0);
                        let src = av.row(i);
                        for (t, dst) in d.row_mut(i).iter_mut().enumerate() {
                            let shifted = src[t] - lse;
                            if shifted >= kernels::EXP_NEGLIGIBLE {
                                *dst = u * math::exp(shifted);
                            }
                        }
                    }
                    self.accum(a, d);
                }
            }
            Op::SoftminRows { cost, potential, eps, ref lse } => {
                let upstream: Vec<f64> = g.as_slice().to_vec();
                let needs_cost = self.needs(cost);
                let needs_pot = self.needs(potential);
                let cost_val = self.val(cost);
                let pot_val = self.val(potential);
                let mut cost_grad = needs_cost.then(|| Matrix::zeros(cost_val.rows(), cost_val.cols()));
                let mut pot_grad = needs_pot.then(|| vec![0.0; pot_val.cols()]);
                kernels::softmin_rows_backward(
                    cost_val,
                    pot_val.as_slice(),
                    eps,
                    lse,
                    &upstream,
                    cost_grad.as_mut(),
                    pot_grad.as_deref_mut(),
                );
                if let Some(cg) = cost_grad {
                    self.accum(cost, cg);
                }
                if let Some(pg) = pot_grad {
                    let len = pg.len();
                    let d = Matrix::from_vec(1, len, pg).expect("potential grad length");
                    self.accum(potential, d);
                }
            }
            Op::SoftminCols { cost_t, potential, eps, ref lse } => {
                // Same rule as SoftminRows applied to the stored Cᵀ; the
                // Transpose node routes the Cᵀ gradient back to the cost.
                let upstream: Vec<f64> = g.as_slice().to_vec();
                let needs_cost = self.needs(cost_t);
                let needs_pot = self.needs(potential);
                let cost_val = self.val(cost_t);
                let pot_val = self.val(potential);
                let mut cost_grad = needs_cost.then(|| Matrix::zeros(cost_val.rows(), cost_val.cols()));
                let mut pot_grad = needs_pot.then(|| vec![0.0; pot_val.rows()]);
                kernels::softmin_rows_backward(
                    cost_val,
                    pot_val.as_slice(),
                    eps,
                    lse,
                    &upstream,
                    cost_grad.as_mut(),
                    pot_grad.as_deref_mut(),
                );
                if let Some(cg) = cost_grad {
                    self.accum(cost_t, cg);
                }
                if let Some(pg) = pot_grad {
                    let len = pg.len();
                    let d = Matrix::from_vec(len, 1, pg).expect("potential grad length");
                    self.accum(potential, d);
                }
            }
        }
    }
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences with step `h`; returns the max over entries of
/// `|analytic − numeric| / max(1, |analytic|)`.
///
/// `f` must deterministically build a scalar (1×1) node from its input node.
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64, CoreError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, CoreError>,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x);
    let root = f(&mut tape, id)?;
    tape.backward(root)?;
    let root_val = tape.value(root).get(0, 0);
    if !root_val.is_finite() {
        return Err(CoreError::NonFinite(format!(
            "grad_check objective evaluated to {root_val}"
        )));
    }
    let analytic = tape
        .grad(id)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));

    let eval = |m: &Matrix| -> Result<f64, CoreError> {
        let mut t = Tape::new();
        let id = t.leaf(m);
        let root = f(&mut t, id)?;
        let v = t.value(root).get(0, 0);
        if !v.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "grad_check objective evaluated to {v}"
            )));
        }
        Ok(v)
    };

    let mut worst = 0.0_f64;
    for idx in 0..x.as_slice().len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[idx] += h;
        let mut minus = x.clone();
        minus.as_mut_slice()[idx] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.as_slice()[idx];
        let err = math::abs(a - numeric) / math::abs(a).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
