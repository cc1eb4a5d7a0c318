//! Downstream regressors for the utility evaluation: ordinary least
//! squares, SGD-trained linear, a variance-reduction regression tree, and a
//! one-hidden-layer MLP trained through the gradient tape. All fits are
//! deterministic given the seed.

use super::{DataMatrix, EvalError, Result};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressorKind {
    Ols,
    SgdLinear,
    Tree,
    Mlp,
}

impl RegressorKind {
    pub fn all() -> [RegressorKind; 4] {
        [
            RegressorKind::Ols,
            RegressorKind::SgdLinear,
            RegressorKind::Tree,
            RegressorKind::Mlp,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegressorKind::Ols => "ols",
            RegressorKind::SgdLinear => "sgd-linear",
            RegressorKind::Tree => "tree",
            RegressorKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone)]
pub enum FittedRegressor {
    Ols(OlsModel),
    SgdLinear(SgdModel),
    Tree(TreeModel),
    Mlp(MlpModel),
}

impl FittedRegressor {
    /// Predict the full target matrix for `x` (n x d row-major).
    pub fn predict(&self, x: &DataMatrix) -> Vec<f64> {
        match self {
            FittedRegressor::Ols(m) => m.predict(x),
            FittedRegressor::SgdLinear(m) => m.predict(x),
            FittedRegressor::Tree(m) => m.predict(x),
            FittedRegressor::Mlp(m) => m.predict(x),
        }
    }
}

/// Fit `kind` on flattened window features. `seed` drives any stochastic
/// part of the fit; OLS and the tree ignore it.
pub fn fit_regressor(kind: RegressorKind, train: &DataMatrix, seed: u64) -> Result<FittedRegressor> {
    if train.n == 0 {
        return Err(EvalError::Validation("empty training set".into()));
    }
    Ok(match kind {
        RegressorKind::Ols => FittedRegressor::Ols(OlsModel::fit(train)?),
        RegressorKind::SgdLinear => FittedRegressor::SgdLinear(SgdModel::fit(train, seed)),
        RegressorKind::Tree => FittedRegressor::Tree(TreeModel::fit(train)),
        RegressorKind::Mlp => FittedRegressor::Mlp(MlpModel::fit(train, seed)?),
    })
}

// ---------------------------------------------------------------------------
// OLS via normal equations with ridge jitter

#[derive(Debug, Clone)]
pub struct OlsModel {
    /// (d + 1) x k coefficients, intercept row last.
    w: Vec<f64>,
    d: usize,
    k: usize,
}

const RIDGE_JITTER: f64 = 1e-8;

impl OlsModel {
    fn fit(train: &DataMatrix) -> Result<OlsModel> {
        let w = ridge_least_squares(&train.x, &train.y, train.n, train.d, train.k)?;
        Ok(OlsModel { w, d: train.d, k: train.k })
    }

    fn predict(&self, x: &DataMatrix) -> Vec<f64> {
        let mut out = vec![0.0; x.n * self.k];
        for s in 0..x.n {
            let row = &x.x[s * self.d..(s + 1) * self.d];
            for j in 0..self.k {
                let mut v = self.w[self.d * self.k + j]; // intercept
                for (i, xi) in row.iter().enumerate() {
                    v += xi * self.w[i * self.k + j];
                }
                out[s * self.k + j] = v;
            }
        }
        out
    }

    /// Coefficient for (feature, output); feature index `d` is the intercept.
    pub fn coefficient(&self, feature: usize, output: usize) -> f64 {
        self.w[feature * self.k + output]
    }
}

/// Least squares with intercept and ridge jitter on an explicit n x d
/// design; returns (d + 1) x k coefficients, intercept row last.
fn ridge_least_squares(x: &[f64], y: &[f64], n: usize, d: usize, k: usize) -> Result<Vec<f64>> {
    let da = d + 1;
    let mut a = vec![0.0; da * da];
    let mut b = vec![0.0; da * k];
    for s in 0..n {
        let row = &x[s * d..(s + 1) * d];
        let ys = &y[s * k..(s + 1) * k];
        for i in 0..da {
            let xi = if i < d { row[i] } else { 1.0 };
            for j in i..da {
                let xj = if j < d { row[j] } else { 1.0 };
                a[i * da + j] += xi * xj;
            }
            for (jj, yv) in ys.iter().enumerate() {
                b[i * k + jj] += xi * yv;
            }
        }
    }
    for i in 0..da {
        for j in 0..i {
            a[i * da + j] = a[j * da + i];
        }
        a[i * da + i] += RIDGE_JITTER;
    }
    cholesky_solve(&a, &b, da, k)
}

/// Solve `A W = B` for symmetric positive definite `A` (m x m), `B` m x k.
fn cholesky_solve(a: &[f64], b: &[f64], m: usize, k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for p in 0..j {
                s -= l[i * m + p] * l[j * m + p];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(EvalError::Validation(
                        "normal equations not positive definite despite jitter".into(),
                    ));
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    // forward then back substitution per output column
    let mut w = vec![0.0; m * k];
    for col in 0..k {
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut s = b[i * k + col];
            for p in 0..i {
                s -= l[i * m + p] * y[p];
            }
            y[i] = s / l[i * m + i];
        }
        for i in (0..m).rev() {
            let mut s = y[i];
            for p in (i + 1)..m {
                s -= l[p * m + i] * w[p * k + col];
            }
            w[i * k + col] = s / l[i * m + i];
        }
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Linear model trained by per-sample SGD on standardized features

#[derive(Debug, Clone)]
pub struct SgdModel {
    w: Vec<f64>, // d x k
    b: Vec<f64>, // k
    mean: Vec<f64>,
    std: Vec<f64>,
    d: usize,
    k: usize,
}

const SGD_EPOCHS: usize = 50;
const SGD_LR0: f64 = 0.01;
const SGD_DECAY: f64 = 0.97;

impl SgdModel {
    fn fit(train: &DataMatrix, seed: u64) -> SgdModel {
        let (n, d, k) = (train.n, train.d, train.k);
        let (mean, std) = feature_stats(train);
        let mut w = vec![0.0; d * k];
        let mut b = vec![0.0; k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut xs = vec![0.0; d];
        let mut lr = SGD_LR0;
        for _ in 0..SGD_EPOCHS {
            order.shuffle(&mut rng);
            for &s in &order {
                for i in 0..d {
                    xs[i] = (train.x[s * d + i] - mean[i]) / std[i];
                }
                for j in 0..k {
                    let mut pred = b[j];
                    for i in 0..d {
                        pred += xs[i] * w[i * k + j];
                    }
                    let err = pred - train.y[s * k + j];
                    let g = 2.0 * err;
                    for i in 0..d {
                        w[i * k + j] -= lr * g * xs[i];
                    }
                    b[j] -= lr * g;
                }
            }
            lr *= SGD_DECAY;
        }
        SgdModel { w, b, mean, std, d, k }
    }

    fn predict(&self, x: &DataMatrix) -> Vec<f64> {
        let mut out = vec![0.0; x.n * self.k];
        for s in 0..x.n {
            for j in 0..self.k {
                let mut v = self.b[j];
                for i in 0..self.d {
                    let xs = (x.x[s * self.d + i] - self.mean[i]) / self.std[i];
                    v += xs * self.w[i * self.k + j];
                }
                out[s * self.k + j] = v;
            }
        }
        out
    }
}

fn feature_stats(train: &DataMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (train.n, train.d);
    let mut mean = vec![0.0; d];
    for s in 0..n {
        for i in 0..d {
            mean[i] += train.x[s * d + i];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut std = vec![0.0; d];
    for s in 0..n {
        for i in 0..d {
            let c = train.x[s * d + i] - mean[i];
            std[i] += c * c;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mean, std)
}

// ---------------------------------------------------------------------------
// Regression tree with variance-reduction splits

const TREE_MAX_DEPTH: usize = 8;
const TREE_MIN_SPLIT: usize = 8;
const TREE_MIN_LEAF: usize = 4;

#[derive(Debug, Clone)]
enum TreeNode {
    Leaf {
        value: Vec<f64>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TreeModel {
    nodes: Vec<TreeNode>,
    d: usize,
    k: usize,
}

impl TreeModel {
    fn fit(train: &DataMatrix) -> TreeModel {
        let mut model = TreeModel {
            nodes: Vec::new(),
            d: train.d,
            k: train.k,
        };
        let idx: Vec<usize> = (0..train.n).collect();
        model.grow(train, idx, 0);
        model
    }

    fn grow(&mut self, train: &DataMatrix, idx: Vec<usize>, depth: usize) -> usize {
        let k = train.k;
        let mean = column_means(train, &idx);
        let parent_sse = sse(train, &idx, &mean);
        let node_slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: mean.clone() });

        if depth >= TREE_MAX_DEPTH || idx.len() < TREE_MIN_SPLIT || parent_sse <= 1e-12 {
            return node_slot;
        }

        // best (feature, threshold) by summed-SSE reduction across outputs
        let mut best: Option<(f64, usize, f64, usize)> = None; // (reduction, feature, threshold, left count)
        let mut sorted = idx.clone();
        for f in 0..train.d {
            sorted.sort_by(|&a, &b| {
                train.x[a * train.d + f]
                    .partial_cmp(&train.x[b * train.d + f])
                    .unwrap()
            });
            let mut left_sum = vec![0.0; k];
            let mut left_sq = vec![0.0; k];
            let mut right_sum = vec![0.0; k];
            let mut right_sq = vec![0.0; k];
            for &s in &sorted {
                for j in 0..k {
                    let y = train.y[s * k + j];
                    right_sum[j] += y;
                    right_sq[j] += y * y;
                }
            }
            for pos in 1..sorted.len() {
                let moved = sorted[pos - 1];
                for j in 0..k {
                    let y = train.y[moved * k + j];
                    left_sum[j] += y;
                    left_sq[j] += y * y;
                    right_sum[j] -= y;
                    right_sq[j] -= y * y;
                }
                let xv_lo = train.x[sorted[pos - 1] * train.d + f];
                let xv_hi = train.x[sorted[pos] * train.d + f];
                if xv_hi <= xv_lo {
                    continue;
                }
                if pos < TREE_MIN_LEAF || sorted.len() - pos < TREE_MIN_LEAF {
                    continue;
                }
                let nl = pos as f64;
                let nr = (sorted.len() - pos) as f64;
                let mut child_sse = 0.0;
                for j in 0..k {
                    child_sse += left_sq[j] - left_sum[j] * left_sum[j] / nl;
                    child_sse += right_sq[j] - right_sum[j] * right_sum[j] / nr;
                }
                let reduction = parent_sse - child_sse;
                let better = match best {
                    None => reduction > 1e-12,
                    Some((r, bf, bt, _)) => {
                        reduction > r + 1e-12
                            || ((reduction - r).abs() <= 1e-12
                                && (f < bf || (f == bf && 0.5 * (xv_lo + xv_hi) < bt)))
                    }
                };
                if better {
                    best = Some((reduction, f, 0.5 * (xv_lo + xv_hi), pos));
                }
            }
        }

        if let Some((_, feature, threshold, _)) = best {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
                .iter()
                .partition(|&&s| train.x[s * train.d + feature] <= threshold);
            let left = self.grow(train, left_idx, depth + 1);
            let right = self.grow(train, right_idx, depth + 1);
            self.nodes[node_slot] = TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        node_slot
    }

    fn predict(&self, x: &DataMatrix) -> Vec<f64> {
        let mut out = vec![0.0; x.n * self.k];
        for s in 0..x.n {
            let row = &x.x[s * self.d..(s + 1) * self.d];
            let mut node = 0;
            loop {
                match &self.nodes[node] {
                    TreeNode::Leaf { value } => {
                        out[s * self.k..(s + 1) * self.k].copy_from_slice(value);
                        break;
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        node = if row[*feature] <= *threshold { *left } else { *right };
                    }
                }
            }
        }
        out
    }
}

fn column_means(train: &DataMatrix, idx: &[usize]) -> Vec<f64> {
    let k = train.k;
    let mut mean = vec![0.0; k];
    for &s in idx {
        for j in 0..k {
            mean[j] += train.y[s * k + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= idx.len() as f64;
    }
    mean
}

fn sse(train: &DataMatrix, idx: &[usize], mean: &[f64]) -> f64 {
    let k = train.k;
    let mut total = 0.0;
    for &s in idx {
        for j in 0..k {
            let c = train.y[s * k + j] - mean[j];
            total += c * c;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// One-hidden-layer MLP trained through the tape

const MLP_HIDDEN: usize = 64;
const MLP_ITERS: usize = 150;
const MLP_LR: f64 = 0.02;
const MLP_LEAKY: f64 = 0.01;
const RMS_RHO: f64 = 0.99;
const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct MlpModel {
    w1: Tensor, // d x hidden
    b1: Tensor, // 1 x hidden
    w2: Tensor, // hidden x k
    b2: Tensor, // 1 x k
    mean: Vec<f64>,
    std: Vec<f64>,
    d: usize,
    k: usize,
}

impl MlpModel {
    fn fit(train: &DataMatrix, seed: u64) -> Result<MlpModel> {
        let (n, d, k) = (train.n, train.d, train.k);
        let (mean, std) = feature_stats(train);
        let mut xs = vec![0.0; n * d];
        for s in 0..n {
            for i in 0..d {
                xs[s * d + i] = (train.x[s * d + i] - mean[i]) / std[i];
            }
        }
        let x = Tensor::new(vec![n, d], xs)?;
        let y = Tensor::new(vec![n, k], train.y.clone())?;
        let ones = Tensor::new(vec![n, 1], vec![1.0; n])?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |len: usize, scale: f64| -> Vec<f64> {
            (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut w1 = Tensor::new(vec![d, MLP_HIDDEN], gauss(d * MLP_HIDDEN, 1.0 / (d as f64).sqrt()))?;
        let mut b1 = Tensor::zeros(vec![1, MLP_HIDDEN]);
        let mut w2 = Tensor::new(
            vec![MLP_HIDDEN, k],
            gauss(MLP_HIDDEN * k, 1.0 / (MLP_HIDDEN as f64).sqrt()),
        )?;
        let mut b2 = Tensor::zeros(vec![1, k]);

        let param_len = w1.numel() + b1.numel() + w2.numel() + b2.numel();
        let mut rms_acc = vec![0.0; param_len];
        let lr = MLP_LR;

        for _ in 0..MLP_ITERS {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let onesv = tape.leaf(ones.clone());
            let w1v = tape.leaf(w1.clone());
            let b1v = tape.leaf(b1.clone());
            let w2v = tape.leaf(w2.clone());
            let b2v = tape.leaf(b2.clone());

            let h_lin = tape.matmul(xv, w1v)?;
            let b1_mat = tape.matmul(onesv, b1v)?;
            let h_aff = tape.add(h_lin, b1_mat)?;
            let h = tape.leaky_relu(h_aff, MLP_LEAKY)?;
            let out_lin = tape.matmul(h, w2v)?;
            let b2_mat = tape.matmul(onesv, b2v)?;
            let pred = tape.add(out_lin, b2_mat)?;
            let err = tape.sub(pred, yv)?;
            let sq = tape.mul(err, err)?;
            let loss = tape.mean(sq)?;
            let grads = tape.backward(loss)?;

            let mut flat_grad = Vec::with_capacity(param_len);
            for v in [w1v, b1v, w2v, b2v] {
                flat_grad.extend_from_slice(grads.grad(v));
            }
            let mut flat_param: Vec<f64> = Vec::with_capacity(param_len);
            for t in [&w1, &b1, &w2, &b2] {
                flat_param.extend_from_slice(t.data());
            }
            for i in 0..param_len {
                let g = flat_grad[i];
                rms_acc[i] = RMS_RHO * rms_acc[i] + (1.0 - RMS_RHO) * g * g;
                flat_param[i] -= lr * g / (rms_acc[i].sqrt() + RMS_EPS);
            }
            let mut offset = 0;
            for t in [&mut w1, &mut b1, &mut w2, &mut b2] {
                let len = t.numel();
                *t = Tensor::new(t.shape().to_vec(), flat_param[offset..offset + len].to_vec())?;
                offset += len;
            }
        }

        // exact ridge readout on the learned hidden features; strictly
        // improves the gradient-trained output layer and is deterministic
        let hidden = {
            let mut h = vec![0.0; n * MLP_HIDDEN];
            let w1d = w1.data();
            let b1d = b1.data();
            for s in 0..n {
                for j in 0..MLP_HIDDEN {
                    let mut v = b1d[j];
                    for i in 0..d {
                        v += x.data()[s * d + i] * w1d[i * MLP_HIDDEN + j];
                    }
                    h[s * MLP_HIDDEN + j] = if v > 0.0 { v } else { MLP_LEAKY * v };
                }
            }
            h
        };
        let readout = ridge_least_squares(&hidden, &train.y, n, MLP_HIDDEN, k)?;
        let mut w2_data = vec![0.0; MLP_HIDDEN * k];
        w2_data.copy_from_slice(&readout[..MLP_HIDDEN * k]);
        w2 = Tensor::new(vec![MLP_HIDDEN, k], w2_data)?;
        b2 = Tensor::new(vec![1, k], readout[MLP_HIDDEN * k..].to_vec())?;

        Ok(MlpModel {
            w1,
            b1,
            w2,
            b2,
            mean,
            std,
            d,
            k,
        })
    }

    fn predict(&self, x: &DataMatrix) -> Vec<f64> {
        let (d, k) = (self.d, self.k);
        let mut out = vec![0.0; x.n * k];
        let w1 = self.w1.data();
        let w2 = self.w2.data();
        let mut hidden = vec![0.0; MLP_HIDDEN];
        for s in 0..x.n {
            for (h_idx, h_slot) in hidden.iter_mut().enumerate() {
                let mut v = self.b1.data()[h_idx];
                for i in 0..d {
                    let xs = (x.x[s * d + i] - self.mean[i]) / self.std[i];
                    v += xs * w1[i * MLP_HIDDEN + h_idx];
                }
                *h_slot = if v > 0.0 { v } else { MLP_LEAKY * v };
            }
            for j in 0..k {
                let mut v = self.b2.data()[j];
                for (h_idx, h) in hidden.iter().enumerate() {
                    v += h * w2[h_idx * k + j];
                }
                out[s * k + j] = v;
            }
        }
        out
    }
}
