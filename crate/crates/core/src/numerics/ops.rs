//! Tensor-level entry points for the differentiable primitives. Layer norm
//! records on a throwaway tape; attention is computed directly so it can take
//! queries and keys of different lengths.

use crate::error::{Error, Result};
use crate::numerics::tape::{softmax_in_place, Tape};
use crate::numerics::tensor::Tensor;

/// Variance epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Norms at or below this are rejected by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// `softmax(Q Kᵀ / sqrt(d_head)) V` per head, heads concatenated. `Q` may
/// have a different row count from `K` and `V`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = (q.rows(), q.cols());
    let m = k.rows();
    if n == 0 || m == 0 {
        return Err(Error::shape("attention needs at least one query and key"));
    }
    if k.cols() != d || v.cols() != d || v.rows() != m {
        return Err(Error::shape(format!(
            "attention q {}x{} k {}x{} v {}x{}",
            n,
            d,
            m,
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut scores = vec![0.0; m];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores);
            for (j, &p) in scores.iter().enumerate() {
                let vj = &v.row(j)[cols.clone()];
                for (c, x) in cols.clone().zip(vj) {
                    out[i * d + c] += p * x;
                }
            }
        }
    }
    Tensor::matrix(n, d, out)
}

/// Layer normalization over the last axis. The output keeps the input shape.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(&x.as_matrix());
    let g = tape.constant(gain);
    let b = tape.constant(bias);
    let out = tape.layer_norm(xv, g, b, LN_EPS)?;
    tape.value(out).clone().reshape(x.shape())
}

/// Unit-length copy of `v`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > NORM_FLOOR) {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
