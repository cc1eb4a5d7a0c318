//! Critic: graph embedding plus gated spatial/temporal self-attention,
//! a shared temporal convolution, and a linear head.
//!
//! The gates alpha and beta start at exactly zero, so training begins from
//! the pure graph-embedding features and can grow the attention
//! contribution; with attention disabled both gates stay frozen at zero and
//! the attention blocks are skipped outright (the score is identical either
//! way).

use crate::graph::graph_embed_on_tape;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Leaky-rectifier slope after the temporal convolution.
pub const CRITIC_LEAKY_SLOPE: f64 = 0.2;

/// Static shape of the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorShape {
    pub n_nodes: usize,
    /// Time length of one input sample.
    pub t_len: usize,
    /// Spatial attention hidden width.
    pub m_dim: usize,
    /// Temporal attention hidden width.
    pub h_dim: usize,
    /// Temporal conv kernel length.
    pub kd_len: usize,
    pub attention_enabled: bool,
}

impl DiscriminatorShape {
    /// Defaults: M = H = ceil(T/2), kernel length 3 (valid padding).
    pub fn new(n_nodes: usize, t_len: usize, attention_enabled: bool) -> Self {
        DiscriminatorShape {
            n_nodes,
            t_len,
            m_dim: t_len.div_ceil(2),
            h_dim: t_len.div_ceil(2),
            kd_len: 3,
            attention_enabled,
        }
    }

    /// Flattened width after the temporal conv.
    pub fn head_width(&self) -> usize {
        self.n_nodes * (self.t_len - self.kd_len + 1)
    }
}

/// Trainable critic parameters.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub shape: DiscriminatorShape,
    /// T x M spatial query projection.
    pub ws_q: Tensor,
    /// T x M spatial key projection.
    pub ws_k: Tensor,
    /// Kernel-size-1 conv over the node axis, T -> T channels.
    pub vs_kernel: Tensor,
    /// N x H temporal query projection.
    pub wt_q: Tensor,
    /// N x H temporal key projection.
    pub wt_k: Tensor,
    /// Kernel-size-1 conv over the time axis, N -> N channels.
    pub vt_kernel: Tensor,
    /// Spatial attention gate, starts at exactly 0.
    pub alpha: Tensor,
    /// Temporal attention gate, starts at exactly 0.
    pub beta: Tensor,
    /// Shared per-node temporal conv kernel of length kd_len.
    pub kd: Tensor,
    /// 1 x head_width linear head.
    pub wd: Tensor,
    /// 1 x 1 head bias.
    pub bd: Tensor,
}

/// Tape handles for the critic parameters.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorVars {
    pub ws_q: Var,
    pub ws_k: Var,
    pub vs_kernel: Var,
    pub wt_q: Var,
    pub wt_k: Var,
    pub vt_kernel: Var,
    pub alpha: Var,
    pub beta: Var,
    pub kd: Var,
    pub wd: Var,
    pub bd: Var,
}

impl DiscriminatorParams {
    pub fn init<R: Rng>(shape: DiscriminatorShape, rng: &mut R) -> Self {
        assert!(shape.kd_len <= shape.t_len, "conv kernel longer than sample");
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let (n, t, m, h) = (shape.n_nodes, shape.t_len, shape.m_dim, shape.h_dim);
        let scale = 0.02;
        DiscriminatorParams {
            shape,
            ws_q: Tensor::new(vec![t, m], gauss(t * m, scale)).expect("finite init"),
            ws_k: Tensor::new(vec![t, m], gauss(t * m, scale)).expect("finite init"),
            vs_kernel: Tensor::new(vec![t, t, 1], gauss(t * t, scale)).expect("finite init"),
            wt_q: Tensor::new(vec![n, h], gauss(n * h, scale)).expect("finite init"),
            wt_k: Tensor::new(vec![n, h], gauss(n * h, scale)).expect("finite init"),
            vt_kernel: Tensor::new(vec![n, n, 1], gauss(n * n, scale)).expect("finite init"),
            alpha: Tensor::zeros(vec![1]),
            beta: Tensor::zeros(vec![1]),
            kd: Tensor::new(vec![shape.kd_len], gauss(shape.kd_len, scale)).expect("finite init"),
            wd: Tensor::new(vec![1, shape.head_width()], gauss(shape.head_width(), scale))
                .expect("finite init"),
            bd: Tensor::zeros(vec![1, 1]),
        }
    }

    /// Named tensors updated during training, in flat-vector order.
    /// Attention tensors participate only when attention is enabled.
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        if self.shape.attention_enabled {
            vec![
                ("disc.ws_q", &self.ws_q),
                ("disc.ws_k", &self.ws_k),
                ("disc.vs_kernel", &self.vs_kernel),
                ("disc.wt_q", &self.wt_q),
                ("disc.wt_k", &self.wt_k),
                ("disc.vt_kernel", &self.vt_kernel),
                ("disc.alpha", &self.alpha),
                ("disc.beta", &self.beta),
                ("disc.kd", &self.kd),
                ("disc.wd", &self.wd),
                ("disc.bd", &self.bd),
            ]
        } else {
            vec![("disc.kd", &self.kd), ("disc.wd", &self.wd), ("disc.bd", &self.bd)]
        }
    }

    /// Every tensor, for checkpointing.
    pub fn all_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("disc.ws_q", &self.ws_q),
            ("disc.ws_k", &self.ws_k),
            ("disc.vs_kernel", &self.vs_kernel),
            ("disc.wt_q", &self.wt_q),
            ("disc.wt_k", &self.wt_k),
            ("disc.vt_kernel", &self.vt_kernel),
            ("disc.alpha", &self.alpha),
            ("disc.beta", &self.beta),
            ("disc.kd", &self.kd),
            ("disc.wd", &self.wd),
            ("disc.bd", &self.bd),
        ]
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        if self.shape.attention_enabled {
            vec![
                &mut self.ws_q,
                &mut self.ws_k,
                &mut self.vs_kernel,
                &mut self.wt_q,
                &mut self.wt_k,
                &mut self.vt_kernel,
                &mut self.alpha,
                &mut self.beta,
                &mut self.kd,
                &mut self.wd,
                &mut self.bd,
            ]
        } else {
            vec![&mut self.kd, &mut self.wd, &mut self.bd]
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.trainable() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// In-place `params += scale * delta` over the flat order.
    pub fn apply_scaled(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.flat_len() {
            return Err(TensorError::Dimension(format!(
                "critic update length {} != {}",
                delta.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        for t in self.trainable_mut() {
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

    /// Clamp every trainable weight tensor to `[-c, c]` (WGAN critic weight
    /// clip). The attention gates alpha and beta are exempt: they start at
    /// zero and set the attention contribution's learned scale.
    pub fn clamp_weights(&mut self, c: f64) {
        let skip_gates = self.shape.attention_enabled;
        for (i, t) in self.trainable_mut().into_iter().enumerate() {
            // trainable order puts alpha at 6 and beta at 7 when attention is on
            if skip_gates && (i == 6 || i == 7) {
                continue;
            }
            let data: Vec<f64> = t.data().iter().map(|v| v.clamp(-c, c)).collect();
            *t = Tensor::new(t.shape().to_vec(), data).expect("clamp keeps values finite");
        }
    }

    pub fn register(&self, tape: &mut Tape) -> DiscriminatorVars {
        DiscriminatorVars {
            ws_q: tape.leaf(self.ws_q.clone()),
            ws_k: tape.leaf(self.ws_k.clone()),
            vs_kernel: tape.leaf(self.vs_kernel.clone()),
            wt_q: tape.leaf(self.wt_q.clone()),
            wt_k: tape.leaf(self.wt_k.clone()),
            vt_kernel: tape.leaf(self.vt_kernel.clone()),
            alpha: tape.leaf(self.alpha.clone()),
            beta: tape.leaf(self.beta.clone()),
            kd: tape.leaf(self.kd.clone()),
            wd: tape.leaf(self.wd.clone()),
            bd: tape.leaf(self.bd.clone()),
        }
    }

    /// Trainable vars in the same order as [`DiscriminatorParams::flat`].
    pub fn trainable_vars(&self, vars: &DiscriminatorVars) -> Vec<Var> {
        if self.shape.attention_enabled {
            vec![
                vars.ws_q,
                vars.ws_k,
                vars.vs_kernel,
                vars.wt_q,
                vars.wt_k,
                vars.vt_kernel,
                vars.alpha,
                vars.beta,
                vars.kd,
                vars.wd,
                vars.bd,
            ]
        } else {
            vec![vars.kd, vars.wd, vars.bd]
        }
    }
}

/// Spatial self-attention on a tape: nodes attend over nodes.
///
/// `Q = X^T Wq`, `K = X^T Wk` (N x M), value path is a kernel-size-1 conv
/// over the node axis with T channels; output `softmax(QK^T) V` is N x T.
pub fn spatial_attention_on_tape(tape: &mut Tape, vars: &DiscriminatorVars, x: Var) -> Result<Var> {
    let xt = tape.transpose(x)?; // N x T
    let q = tape.matmul(xt, vars.ws_q)?; // N x M
    let k = tape.matmul(xt, vars.ws_k)?; // N x M
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?; // N x N
    let attn = tape.softmax_rows(scores)?;
    let v_raw = tape.conv1d(x, vars.vs_kernel)?; // T channels over node axis
    let v = tape.transpose(v_raw)?; // N x T
    tape.matmul(attn, v)
}

/// Temporal self-attention on a tape: timesteps attend over timesteps.
///
/// `Q = X Wq`, `K = X Wk` (T x H), value path is a kernel-size-1 conv over
/// the time axis with N channels; output `softmax(QK^T) V` is T x N.
pub fn temporal_attention_on_tape(tape: &mut Tape, vars: &DiscriminatorVars, x: Var) -> Result<Var> {
    let q = tape.matmul(x, vars.wt_q)?; // T x H
    let k = tape.matmul(x, vars.wt_k)?; // T x H
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?; // T x T
    let attn = tape.softmax_rows(scores)?;
    let xt = tape.transpose(x)?; // N x T: N channels over time axis
    let v_raw = tape.conv1d(xt, vars.vt_kernel)?; // N x T
    let v = tape.transpose(v_raw)?; // T x N
    tape.matmul(attn, v)
}

/// Critic score on a tape; `x` is a T x N leaf and `laplacian` enters as a
/// constant. `Z = X_l + alpha X_s + beta X_t^T`, then the shared temporal
/// conv, a leaky rectifier, and the linear head.
pub fn score_on_tape(
    tape: &mut Tape,
    params: &DiscriminatorParams,
    vars: &DiscriminatorVars,
    laplacian: &Tensor,
    x: Var,
) -> Result<Var> {
    let xl = graph_embed_on_tape(tape, laplacian, x)?; // N x T
    let z = if params.shape.attention_enabled {
        let xs = spatial_attention_on_tape(tape, vars, x)?; // N x T
        let xt_attn = temporal_attention_on_tape(tape, vars, x)?; // T x N
        let gated_s = tape.mul_scalar(xs, vars.alpha)?;
        let xt_t = tape.transpose(xt_attn)?; // N x T
        let gated_t = tape.mul_scalar(xt_t, vars.beta)?;
        let partial = tape.add(xl, gated_s)?;
        tape.add(partial, gated_t)?
    } else {
        xl
    };
    let conv = tape.conv_rows(z, vars.kd)?; // N x (T - kd + 1)
    let act = tape.leaky_relu(conv, CRITIC_LEAKY_SLOPE)?;
    let width = params.shape.head_width();
    let flat = tape.reshape(act, vec![width, 1])?;
    let head = tape.matmul(vars.wd, flat)?; // 1 x 1
    tape.add(head, vars.bd)
}

/// Value-level spatial attention.
pub fn spatial_attention(params: &DiscriminatorParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = spatial_attention_on_tape(&mut tape, &vars, xv)?;
    Ok(tape.value(out).clone())
}

/// Value-level temporal attention.
pub fn temporal_attention(params: &DiscriminatorParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = temporal_attention_on_tape(&mut tape, &vars, xv)?;
    Ok(tape.value(out).clone())
}

/// Value-level critic score.
pub fn score(params: &DiscriminatorParams, laplacian: &Tensor, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = score_on_tape(&mut tape, params, &vars, laplacian, xv)?;
    Ok(tape.scalar_value(out))
}
