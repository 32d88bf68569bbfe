//! Shared numeric kernels for log-domain Sinkhorn updates.
//!
//! Both the plain solver in `ot` and the autodiff tape's softmin ops call
//! these functions, so the traced and untraced paths produce bit-identical
//! values. Only row-direction kernels exist: column updates run the same
//! kernels on a transposed cost, which keeps every pass cache-contiguous.

use crate::math;
use crate::tensor::Matrix;

/// Shifted exponents below this contribute less than one ulp relative to the
/// dominant term (exp(-37) ≈ 8.5e-17) and are skipped. At ε=0.01 the bulk of
/// a cost row sits far below the cutoff, which makes the row/column updates
/// several times cheaper without a measurable change in the result.
pub(crate) const EXP_NEGLIGIBLE: f64 = -37.0;

/// Max-shifted log Σ exp over an iterator (cloneable for the two passes).
pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All terms -inf (empty support) or an infinite entry upstream.
        return max;
    }
    let mut sum = 0.0;
    for v in values {
        let t = v - max;
        if t >= EXP_NEGLIGIBLE {
            sum += math::exp(t);
        }
    }
    max + math::ln(sum)
}

/// One Sinkhorn row half-iteration:
/// `f[i] = eps·log_a[i] − eps·logsumexp_j((g[j] − cost[i][j]) / eps)`.
/// Each row's log-sum-exp also lands in `lse_out` so a backward pass can
/// reuse the shift instead of paying a second exp sweep to recompute it.
pub(crate) fn softmin_rows_into(
    cost: &Matrix,
    g: &[f64],
    log_a: &[f64],
    eps: f64,
    out: &mut [f64],
    lse_out: &mut [f64],
) {
    let inv_eps = 1.0 / eps;
    for i in 0..cost.rows() {
        let row = cost.row(i);
        let lse = logsumexp(
            row.iter()
                .zip(g)
                .map(move |(&c, &gj)| (gj - c) * inv_eps),
        );
        lse_out[i] = lse;
        out[i] = eps * (log_a[i] - lse);
    }
}

/// Backward rule for `softmin_rows`: with row-softmax weights
/// `w[i][j] = exp((g[j] − c[i][j])/eps − lse[i])`, the derivatives are
/// `∂f[i]/∂c[i][j] = w[i][j]` and `∂f[i]/∂g[j] = −w[i][j]`.
/// `lse` is the forward pass's per-row log-sum-exp.
/// Accumulates `upstream[i] · ∂f[i]/∂·` into the provided buffers.
pub(crate) fn softmin_rows_backward(
    cost: &Matrix,
    g: &[f64],
    eps: f64,
    lse: &[f64],
    upstream: &[f64],
    cost_grad: Option<&mut Matrix>,
    g_grad: Option<&mut [f64]>,
) {
    let inv_eps = 1.0 / eps;
    let mut cost_grad = cost_grad;
    let mut g_grad = g_grad;
    for i in 0..cost.rows() {
        let u = upstream[i];
        let row = cost.row(i);
        let lse_i = lse[i];
        for (j, (&c, &gj)) in row.iter().zip(g).enumerate() {
            let shifted = (gj - c) * inv_eps - lse_i;
            if shifted < EXP_NEGLIGIBLE {
                continue;
            }
            let w = math::exp(shifted);
            if let Some(cg) = cost_grad.as_deref_mut() {
                cg.set(i, j, cg.get(i, j) + u * w);
            }
            if let Some(gg) = g_grad.as_deref_mut() {
                gg[j] -= u * w;
            }
        }
    }
}

/// Max of the two L1 marginal violations of the plan implied by duals (f, g):
/// `plan[i][j] = exp((f[i] + g[j] − cost[i][j]) / eps)`.
pub(crate) fn marginal_violation(
    cost: &Matrix,
    f: &[f64],
    g: &[f64],
    a: &[f64],
    b: &[f64],
    eps: f64,
) -> f64 {
    let inv_eps = 1.0 / eps;
    let (rows, cols) = cost.shape();
    let mut col_sums = alloc::vec![0.0; cols];
    let mut row_violation = 0.0;
    for i in 0..rows {
        let row = cost.row(i);
        let fi = f[i];
        let mut row_sum = 0.0;
        for j in 0..cols {
            let e = (fi + g[j] - row[j]) * inv_eps;
            // The exponent is bounded above by log a[i] after a row update,
            // so no overflow guard is needed here.
            let v = math::exp(e);
            row_sum += v;
            col_sums[j] += v;
        }
        row_violation += math::abs(row_sum - a[i]);
    }
    let mut col_violation = 0.0;
    for (s, &bj) in col_sums.iter().zip(b) {
        col_violation += math::abs(s - bj);
    }
    row_violation.max(col_violation)
}
