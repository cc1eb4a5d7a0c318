//! Noise-to-sample generator: a linear map on the noise vector followed by
//! a transposed 1-D convolution that expands one timestep into T.
//!
//! The noise z (length N) becomes N channels of length 1; the transposed
//! convolution with an N-in/N-out kernel of length T yields N channels of
//! length T, returned transposed as a T x N sample. The kernel is
//! initialized with its mean matched to the training-data mean so the
//! output distribution starts near the data's first moment.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Trainable generator parameters.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    /// N x N linear map applied to the noise vector.
    pub w: Tensor,
    /// N x 1 bias.
    pub b: Tensor,
    /// Transposed-conv kernel, layout [in = N, out = N, k = T].
    pub kernel: Tensor,
}

/// Tape handles for the generator parameters.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub w: Var,
    pub b: Var,
    pub kernel: Var,
}

impl GeneratorParams {
    /// Initialize for `n_nodes` nodes and sample length `t_len`.
    ///
    /// `kernel_mean`: mean of the kernel init distribution; pass the
    /// training-data mean (None falls back to a zero-mean kernel).
    pub fn init<R: Rng>(n_nodes: usize, t_len: usize, kernel_mean: Option<f64>, rng: &mut R) -> Self {
        Self::init_with_scale(n_nodes, t_len, kernel_mean, 1.0, rng)
    }

    /// [`GeneratorParams::init`] with an explicit kernel standard
    /// deviation. Small scales start the generator near zero output and
    /// let training grow the needed directions instead of unlearning
    /// initialization noise.
    pub fn init_with_scale<R: Rng>(
        n_nodes: usize,
        t_len: usize,
        kernel_mean: Option<f64>,
        kernel_sd: f64,
        rng: &mut R,
    ) -> Self {
        let km = kernel_mean.unwrap_or(0.0);
        let mut w = vec![0.0; n_nodes * n_nodes];
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                let noise: f64 = rng.sample(StandardNormal);
                w[i * n_nodes + j] = if i == j { 1.0 } else { 0.0 } + 0.02 * noise;
            }
        }
        let kernel: Vec<f64> = (0..n_nodes * n_nodes * t_len)
            .map(|_| km + kernel_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        GeneratorParams {
            w: Tensor::new(vec![n_nodes, n_nodes], w).expect("finite init"),
            b: Tensor::zeros(vec![n_nodes, 1]),
            kernel: Tensor::new(vec![n_nodes, n_nodes, t_len], kernel).expect("finite init"),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.w.rows()
    }

    pub fn t_len(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Named tensors in flat-vector order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gen.w", &self.w), ("gen.b", &self.b), ("gen.kernel", &self.kernel)]
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        self.w.numel() + self.b.numel() + self.kernel.numel()
    }

    /// In-place `params += scale * delta` over the flat order.
    pub fn apply_scaled(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.flat_len() {
            return Err(TensorError::Dimension(format!(
                "generator update length {} != {}",
                delta.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        for t in [&mut self.w, &mut self.b, &mut self.kernel] {
            let n = t.numel();
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(&delta[offset..offset + n])
                .map(|(p, d)| p + scale * d)
                .collect();
            *t = Tensor::new(t.shape().to_vec(), data)?;
            offset += n;
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> GeneratorVars {
        GeneratorVars {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
            kernel: tape.leaf(self.kernel.clone()),
        }
    }
}

/// Generator forward pass on a tape: `z` is an N x 1 leaf.
pub fn generate_on_tape(tape: &mut Tape, vars: GeneratorVars, z: Var) -> Result<Var> {
    let wz = tape.matmul(vars.w, z)?;
    let ztilde = tape.add(wz, vars.b)?; // N x 1 = N channels of length 1
    let channels = tape.trans_conv1d(ztilde, vars.kernel)?; // N x T
    tape.transpose(channels) // T x N
}

/// Value-level generation from a length-N noise vector.
pub fn generate(params: &GeneratorParams, z: &Tensor) -> Result<Tensor> {
    let n = params.n_nodes();
    if z.numel() != n {
        return Err(TensorError::Dimension(format!(
            "noise length {} != node count {}",
            z.numel(),
            n
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let zv = tape.leaf(Tensor::new(vec![n, 1], z.data().to_vec())?);
    let out = generate_on_tape(&mut tape, vars, zv)?;
    Ok(tape.value(out).clone())
}

/// I.i.d. standard normal noise vector of length `n`, reproducible per rng.
pub fn sample_noise<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n], data).expect("normal draws are finite")
}

/// Moment parameters for the transposed-convolution output distribution
/// check: noise entries ~ N(mu1, sigma1^2), kernel entries ~ N(mu2, sigma2^2),
/// `m` nonzero entries per transposed-convolution row.
#[derive(Debug, Clone, Copy)]
pub struct TheoremOneSpec {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub m: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TheoremOneReport {
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub closed_mean: f64,
    pub closed_var: f64,
    pub pass: bool,
}

/// Monte-Carlo check that one output entry `sum_{j=1..m} k_j x_j` has mean
/// `m mu1 mu2` and variance `m (s1^2 s2^2 + s1^2 mu2^2 + s2^2 mu1^2)`.
///
/// Passes when the empirical mean lies within 4 standard errors of the
/// closed form and the empirical variance within 3%.
pub fn verify_theorem1<R: Rng>(spec: &TheoremOneSpec, samples: usize, rng: &mut R) -> TheoremOneReport {
    assert!(samples >= 100_000, "at least 1e5 samples required");
    assert!(spec.sigma1 > 0.0 && spec.sigma2 > 0.0 && spec.m >= 1);

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut y = 0.0;
        for _ in 0..spec.m {
            let x: f64 = spec.mu1 + spec.sigma1 * rng.sample::<f64, _>(StandardNormal);
            let k: f64 = spec.mu2 + spec.sigma2 * rng.sample::<f64, _>(StandardNormal);
            y += k * x;
        }
        sum += y;
        sum_sq += y * y;
    }
    let n = samples as f64;
    let empirical_mean = sum / n;
    let empirical_var = (sum_sq - sum * sum / n) / (n - 1.0);

    let m = spec.m as f64;
    let (s1, s2) = (spec.sigma1 * spec.sigma1, spec.sigma2 * spec.sigma2);
    let closed_mean = m * spec.mu1 * spec.mu2;
    let closed_var = m * (s1 * s2 + s1 * spec.mu2 * spec.mu2 + s2 * spec.mu1 * spec.mu1);

    let mean_se = (closed_var / n).sqrt();
    let pass = (empirical_mean - closed_mean).abs() <= 4.0 * mean_se
        && (empirical_var - closed_var).abs() <= 0.03 * closed_var;

    TheoremOneReport {
        empirical_mean,
        empirical_var,
        closed_mean,
        closed_var,
        pass,
    }
}
