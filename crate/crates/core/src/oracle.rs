//! Brute-force references. Everything here uses explicit loops over raw
//! indices and never calls into `Matrix::matmul` or the crossbar code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub seed: u64,
    /// (n, d, d_k, h)
    pub dims: (usize, usize, usize, usize),
    pub tolerance: f64,
    pub description: String,
}

impl OracleCase {
    pub fn new(seed: u64, dims: (usize, usize, usize, usize), tolerance: f64, description: impl Into<String>) -> Result<Self> {
        let (n, d, dk, h) = dims;
        if [n, d, dk, h].iter().any(|&v| v == 0 || v > 32) {
            return Err(Error::InvalidArgument(format!("oracle dims must be in 1..=32, got {dims:?}")));
        }
        Ok(Self {
            seed,
            dims,
            tolerance,
            description: description.into(),
        })
    }
}

pub fn float_softmax(x: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut e = vec![0.0; x.len()];
    let mut s = 0.0;
    for i in 0..x.len() {
        e[i] = (x[i] - m).exp();
        s += e[i];
    }
    for v in e.iter_mut() {
        *v /= s;
    }
    e
}

pub fn float_layernorm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let inv = 1.0 / (var + eps).sqrt();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) * inv + beta[i];
    }
    out
}

/// x·σ(1.702·x).
pub fn float_gelu_sigmoid(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

fn loops_product(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("oracle product", a.cols(), b.rows()));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    Ok(out)
}

/// (A·B)·C, checked against A·(B·C).
pub fn triple_product(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    let left = loops_product(&loops_product(a, b)?, c)?;
    let right = loops_product(a, &loops_product(b, c)?)?;
    let scale = left.max_abs().max(1.0);
    if left.max_abs_diff(&right) > 1e-9 * scale {
        return Err(Error::InvalidArgument("triple product is not associative within 1e-9".into()));
    }
    Ok(left)
}

/// Single-head attention: softmax(X·W_Qᵀ·W_K·Xᵀ/√d_k)·X·W_Vᵀ, with W_* of
/// shape d_k × d.
pub fn naive_attention(x: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    let (n, d) = x.shape();
    let dk = w_q.rows();
    for w in [w_q, w_k, w_v] {
        if w.shape() != (dk, d) {
            return Err(Error::shape("naive_attention weights", format!("({dk}, {d})"), format!("{:?}", w.shape())));
        }
    }
    let mut q = vec![vec![0.0; dk]; n];
    let mut k = vec![vec![0.0; dk]; n];
    let mut v = vec![vec![0.0; dk]; n];
    for t in 0..n {
        for c in 0..dk {
            let (mut sq, mut sk, mut sv) = (0.0, 0.0, 0.0);
            for e in 0..d {
                sq += x[(t, e)] * w_q[(c, e)];
                sk += x[(t, e)] * w_k[(c, e)];
                sv += x[(t, e)] * w_v[(c, e)];
            }
            q[t][c] = sq;
            k[t][c] = sk;
            v[t][c] = sv;
        }
    }
    let inv = 1.0 / (dk as f64).sqrt();
    let mut out = Matrix::zeros(n, dk);
    for i in 0..n {
        let mut scores = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..dk {
                s += q[i][c] * k[j][c];
            }
            scores[j] = s * inv;
        }
        let p = float_softmax(&scores);
        for c in 0..dk {
            let mut s = 0.0;
            for j in 0..n {
                s += p[j] * v[j][c];
            }
            out[(i, c)] = s;
        }
    }
    Ok(out)
}

/// Per-head weights for the multi-head oracle.
pub struct HeadWeights<'a> {
    pub w_q: &'a Matrix,
    pub w_k: &'a Matrix,
    pub w_v: &'a Matrix,
}

/// Concatenated heads times W_O.
pub fn naive_mhsa(x: &Matrix, heads: &[HeadWeights<'_>], w_o: &Matrix) -> Result<Matrix> {
    let n = x.rows();
    let mut concat: Vec<Vec<f64>> = vec![Vec::new(); n];
    for h in heads {
        let o = naive_attention(x, h.w_q, h.w_k, h.w_v)?;
        for (t, row) in concat.iter_mut().enumerate() {
            row.extend_from_slice(o.row(t));
        }
    }
    loops_product(&Matrix::from_rows(&concat), w_o)
}

/// Float post-LN encoder block: Z = LN(X + MHSA(X)), Y = LN(Z + GELU(Z·W1)·W2).
#[allow(clippy::too_many_arguments)]
pub fn naive_encoder_block(
    x: &Matrix,
    heads: &[HeadWeights<'_>],
    w_o: &Matrix,
    w1: &Matrix,
    w2: &Matrix,
    ln1: (&[f64], &[f64]),
    ln2: (&[f64], &[f64]),
    eps: f64,
) -> Result<Matrix> {
    let attn = naive_mhsa(x, heads, w_o)?;
    let (n, d) = x.shape();
    let mut z = Matrix::zeros(n, d);
    for t in 0..n {
        let mut r = vec![0.0; d];
        for c in 0..d {
            r[c] = x[(t, c)] + attn[(t, c)];
        }
        z.row_mut(t).copy_from_slice(&float_layernorm(&r, ln1.0, ln1.1, eps));
    }
    let hidden = loops_product(&z, w1)?.map(float_gelu_sigmoid);
    let ffn = loops_product(&hidden, w2)?;
    let mut y = Matrix::zeros(n, d);
    for t in 0..n {
        let mut r = vec![0.0; d];
        for c in 0..d {
            r[c] = z[(t, c)] + ffn[(t, c)];
        }
        y.row_mut(t).copy_from_slice(&float_layernorm(&r, ln2.0, ln2.1, eps));
    }
    Ok(y)
}

/// ‖got − want‖∞ / ‖want‖∞ (absolute when the reference is zero).
pub fn rel_inf_error(got: &Matrix, want: &Matrix) -> f64 {
    let diff = got.max_abs_diff(want);
    let norm = want.max_abs();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}
