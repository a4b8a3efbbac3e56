//! Slice-level numeric kernels shared by the graph operations.

use crate::error::{contract, AutodiffError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. When `trans_a` is set, `a` is
/// stored as `k x m`; likewise `b` as `n x k` when `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are asserted, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax over the allowed positions; disallowed entries come out as exactly 0.
pub fn masked_softmax(logits: &[f64], allow: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != allow.len() {
        return contract(format!(
            "masked_softmax: {} logits vs {} mask entries",
            logits.len(),
            allow.len()
        ));
    }
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, allow, 1.0, &mut out)
        .map_err(|_| AutodiffError::EmptyAttention { row: 0 })?;
    Ok(out)
}

/// Row kernel: `out = softmax(scale * logits)` restricted to `allow`.
pub(crate) fn masked_softmax_into(
    logits: &[f64],
    allow: &[bool],
    scale: f64,
    out: &mut [f64],
) -> std::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for (&x, &ok) in logits.iter().zip(allow) {
        if ok && scale * x > max {
            max = scale * x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for ((o, &x), &ok) in out.iter_mut().zip(logits).zip(allow) {
        *o = if ok { (scale * x - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Natural log of `sum(exp(x))`, computed with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row `((x - mean) / sqrt(var + eps)) * gamma + beta` on a `[rows, d]` buffer.
///
/// Returns the output along with the normalized values and reciprocal
/// standard deviations needed for the backward pass.
pub fn layer_norm(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if d == 0 || x.len() % d != 0 || gamma.len() != d || beta.len() != d {
        return contract(format!(
            "layer_norm: input of {} values with d={d}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        ));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut normed = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = inv;
        for c in 0..d {
            let n = (row[c] - mean) * inv;
            normed[r * d + c] = n;
            out[r * d + c] = n * gamma[c] + beta[c];
        }
    }
    Ok((out, normed, rstd))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU, as used by GPT-2.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}
