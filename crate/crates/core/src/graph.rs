//! Weighted adjacency, normalized Laplacian, and the graph embedding that
//! feeds the critic.
//!
//! Edges come from a thresholded Gaussian kernel over pairwise distances:
//! `w_ij = exp(-dis_ij^2 / alpha_k^2)` when `i != j` and the value clears
//! `beta_k`, else 0. The thresholds are named `alpha_k`/`beta_k` to keep
//! them apart from the attention gate scalars.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Symmetric N x N matrix as a plain tensor, used for W and L.
pub type SquareMatrix = Tensor;

/// Validate a distance matrix: square, symmetric, nonnegative, zero diagonal.
fn validate_distances(dist: &Tensor) -> Result<usize> {
    if dist.shape().len() != 2 || dist.rows() != dist.cols() {
        return Err(TensorError::Dimension("distance matrix must be square".into()));
    }
    let n = dist.rows();
    for i in 0..n {
        if dist.at2(i, i) != 0.0 {
            return Err(TensorError::Dimension(format!(
                "distance matrix diagonal must be zero (row {})",
                i
            )));
        }
        for j in 0..n {
            let d = dist.at2(i, j);
            if d < 0.0 {
                return Err(TensorError::Dimension(format!(
                    "negative distance at ({}, {})",
                    i, j
                )));
            }
            if (d - dist.at2(j, i)).abs() > 1e-9 {
                return Err(TensorError::Dimension(format!(
                    "asymmetric distance at ({}, {})",
                    i, j
                )));
            }
        }
    }
    Ok(n)
}

/// Thresholded Gaussian-kernel adjacency.
pub fn build_adjacency(dist: &Tensor, alpha_k: f64, beta_k: f64) -> Result<SquareMatrix> {
    if !(alpha_k > 0.0) {
        return Err(TensorError::Dimension("alpha_k must be positive".into()));
    }
    if !(0.0..=1.0).contains(&beta_k) {
        return Err(TensorError::Dimension("beta_k must lie in [0, 1]".into()));
    }
    let n = validate_distances(dist)?;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist.at2(i, j);
            let v = (-(d * d) / (alpha_k * alpha_k)).exp();
            if v >= beta_k {
                w[i * n + j] = v;
            }
        }
    }
    Tensor::new(vec![n, n], w)
}

/// Symmetric normalized Laplacian `L = I - D^{-1/2} W D^{-1/2}`.
///
/// Isolated nodes (zero degree) get an identity row.
pub fn normalized_laplacian(w: &SquareMatrix) -> Result<SquareMatrix> {
    let n = w.rows();
    let mut dinv_sqrt = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = (0..n).map(|j| w.at2(i, j)).sum();
        dinv_sqrt[i] = if deg > 0.0 { deg.powf(-0.5) } else { 0.0 };
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let norm = dinv_sqrt[i] * w.at2(i, j) * dinv_sqrt[j];
            l[i * n + j] = if i == j { 1.0 - norm } else { -norm };
        }
    }
    Tensor::new(vec![n, n], l)
}

/// Pairwise Euclidean distances from coordinates.
pub fn euclidean_distances(coords: &[(f64, f64)]) -> Result<Tensor> {
    let n = coords.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            d[i * n + j] = (dx * dx + dy * dy).sqrt();
        }
    }
    Tensor::new(vec![n, n], d)
}

/// Graph embedding `X_l = L X^T`, differentiable through `x`.
///
/// `l` enters the tape as an untracked constant leaf.
pub fn graph_embed_on_tape(tape: &mut Tape, l: &SquareMatrix, x: Var) -> Result<Var> {
    let lv = tape.leaf(l.clone());
    let xt = tape.transpose(x)?;
    tape.matmul(lv, xt)
}

/// Value-level `X_l = L X^T` for callers without a tape.
pub fn graph_embed(l: &SquareMatrix, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = graph_embed_on_tape(&mut tape, l, xv)?;
    Ok(tape.value(out).clone())
}
