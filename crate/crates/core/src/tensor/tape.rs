//! Wengert tape: operations recorded forward, gradients replayed in reverse.
//!
//! One tape per forward pass. Every op validates shapes, computes the output
//! value eagerly, checks it for NaN/Inf, and records the backward rule.
//! `backward` may run exactly once per tape; tensors are immutable once
//! recorded, so two identical forward+backward passes are bit-identical.

use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Neg { a: usize },
    Mul { a: usize, b: usize },
    ScaleConst { a: usize, c: f64 },
    MulScalar { a: usize, s: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    MatMul { a: usize, b: usize },
    SoftmaxRows { a: usize },
    Conv1d { x: usize, k: usize },
    TransConv1d { x: usize, k: usize },
    ConvRows { x: usize, k: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Vec<f64>>,
}

impl Grads {
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Record a leaf tensor (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1-element var.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).numel(), 1);
        self.value(v).data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, what: &'static str) -> Result<Var> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite(what.into()));
        }
        Ok(self.push(op, value))
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                context,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(Op::Add { a: a.0, b: b.0 }, t, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(Op::Sub { a: a.0, b: b.0 }, t, "sub")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| -x).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(Op::Neg { a: a.0 }, t, "neg")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(Op::Mul { a: a.0, b: b.0 }, t, "mul")
    }

    /// Multiply by an untracked constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(Op::ScaleConst { a: a.0, c }, t, "scale")
    }

    /// Multiply a tensor by a tracked 1-element scalar var.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Dimension("mul_scalar: s must be 1-element".into()));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x * sv).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(Op::MulScalar { a: a.0, s: s.0 }, t, "mul_scalar")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(TensorError::Dimension("transpose expects 2-D".into()));
        }
        let (r, c) = (v.rows(), v.cols());
        let t = Tensor::new(vec![c, r], transpose_raw(v.data(), r, c))?;
        self.push_checked(Op::Transpose { a: a.0 }, t, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(TensorError::Dimension(format!(
                "reshape to {:?} incompatible with {} elements",
                shape,
                v.numel()
            )));
        }
        let t = Tensor::new(shape, v.data().to_vec())?;
        self.push_checked(Op::Reshape { a: a.0 }, t, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let t = Tensor::new(vec![1], vec![s])?;
        self.push_checked(Op::Sum { a: a.0 }, t, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let t = Tensor::new(vec![1], vec![s / n])?;
        self.push_checked(Op::Mean { a: a.0 }, t, "mean")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked(Op::LeakyRelu { a: a.0, slope }, t, "leaky_relu")
    }

    /// Matrix product `a[m,k] . b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                context: "matmul",
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let t = Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        self.push_checked(Op::MatMul { a: a.0, b: b.0 }, t, "matmul")
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(TensorError::Dimension("softmax_rows expects 2-D".into()));
        }
        let (r, c) = (v.rows(), v.cols());
        let t = Tensor::new(vec![r, c], softmax_rows_raw(v.data(), r, c))?;
        self.push_checked(Op::SoftmaxRows { a: a.0 }, t, "softmax_rows")
    }

    /// Valid cross-correlation of `x[cin, l]` with kernel `k[cout, cin, klen]`.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(k));
        if vx.shape().len() != 2 || vk.shape().len() != 3 {
            return Err(TensorError::Dimension("conv1d expects x[cin,l], k[cout,cin,klen]".into()));
        }
        let (cin, l) = (vx.shape()[0], vx.shape()[1]);
        let (cout, kcin, klen) = (vk.shape()[0], vk.shape()[1], vk.shape()[2]);
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                context: "conv1d channels",
                expected: vec![cout, cin, klen],
                got: vk.shape().to_vec(),
            });
        }
        if klen > l {
            return Err(TensorError::Dimension(format!(
                "conv1d kernel length {} exceeds input length {}",
                klen, l
            )));
        }
        let out = conv1d_raw(vx.data(), vk.data(), cin, l, cout, klen);
        let t = Tensor::new(vec![cout, l - klen + 1], out)?;
        self.push_checked(Op::Conv1d { x: x.0, k: k.0 }, t, "conv1d")
    }

    /// Transposed (fractionally-strided) convolution of `x[cin, l]` with
    /// kernel `k[cin, cout, klen]`; each input position scatters
    /// kernel-weighted copies, overlaps summed. Adjoint of [`Tape::conv1d`].
    pub fn trans_conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(k));
        if vx.shape().len() != 2 || vk.shape().len() != 3 {
            return Err(TensorError::Dimension(
                "trans_conv1d expects x[cin,l], k[cin,cout,klen]".into(),
            ));
        }
        let (cin, l) = (vx.shape()[0], vx.shape()[1]);
        let (kcin, cout, klen) = (vk.shape()[0], vk.shape()[1], vk.shape()[2]);
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                context: "trans_conv1d channels",
                expected: vec![cin, cout, klen],
                got: vk.shape().to_vec(),
            });
        }
        let out = trans_conv1d_raw(vx.data(), vk.data(), cin, l, cout, klen);
        let t = Tensor::new(vec![cout, l + klen - 1], out)?;
        self.push_checked(Op::TransConv1d { x: x.0, k: k.0 }, t, "trans_conv1d")
    }

    /// Valid convolution of every row of `x[r, l]` with one shared 1-D
    /// kernel `k[klen]`; rows never mix.
    pub fn conv_rows(&mut self, x: Var, k: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(k));
        if vx.shape().len() != 2 || vk.shape().len() != 1 {
            return Err(TensorError::Dimension("conv_rows expects x[r,l], k[klen]".into()));
        }
        let (r, l) = (vx.shape()[0], vx.shape()[1]);
        let klen = vk.shape()[0];
        if klen > l {
            return Err(TensorError::Dimension(format!(
                "conv_rows kernel length {} exceeds row length {}",
                klen, l
            )));
        }
        let lo = l - klen + 1;
        let mut out = vec![0.0; r * lo];
        for i in 0..r {
            for t in 0..lo {
                let mut s = 0.0;
                for j in 0..klen {
                    s += vx.data()[i * l + t + j] * vk.data()[j];
                }
                out[i * lo + t] = s;
            }
        }
        let t = Tensor::new(vec![r, lo], out)?;
        self.push_checked(Op::ConvRows { x: x.0, k: k.0 }, t, "conv_rows")
    }

    /// Reverse pass from a 1-element loss var. Consumes the tape's single
    /// backward allowance; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(TensorError::TapeMisuse(
                "backward already ran on this tape; record a new forward pass first",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Dimension("backward expects a 1-element loss".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            match self.nodes[idx].op.clone() {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    accumulate(&mut grads[a], &g, 1.0);
                    accumulate(&mut grads[b], &g, 1.0);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads[a], &g, 1.0);
                    accumulate(&mut grads[b], &g, -1.0);
                }
                Op::Neg { a } => accumulate(&mut grads[a], &g, -1.0),
                Op::Mul { a, b } => {
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let va = self.nodes[a].value.data();
                        let vb = self.nodes[b].value.data();
                        (zip_map(&g, vb, |x, y| x * y), zip_map(&g, va, |x, y| x * y))
                    };
                    accumulate(&mut grads[a], &da, 1.0);
                    accumulate(&mut grads[b], &db, 1.0);
                }
                Op::ScaleConst { a, c } => accumulate(&mut grads[a], &g, c),
                Op::MulScalar { a, s } => {
                    let sv = self.nodes[s].value.data()[0];
                    let ds: f64 = {
                        let va = self.nodes[a].value.data();
                        g.iter().zip(va).map(|(gi, ai)| gi * ai).sum()
                    };
                    accumulate(&mut grads[a], &g, sv);
                    grads[s][0] += ds;
                }
                Op::Transpose { a } => {
                    let (r, c) = {
                        let v = &self.nodes[a].value;
                        (v.rows(), v.cols())
                    };
                    // g has shape c x r; transpose back to r x c
                    let gt = transpose_raw(&g, c, r);
                    accumulate(&mut grads[a], &gt, 1.0);
                }
                Op::Reshape { a } => accumulate(&mut grads[a], &g, 1.0),
                Op::Sum { a } => {
                    let gv = g[0];
                    for slot in grads[a].iter_mut() {
                        *slot += gv;
                    }
                }
                Op::Mean { a } => {
                    let n = self.nodes[a].value.numel() as f64;
                    let gv = g[0] / n;
                    for slot in grads[a].iter_mut() {
                        *slot += gv;
                    }
                }
                Op::LeakyRelu { a, slope } => {
                    let da: Vec<f64> = {
                        let va = self.nodes[a].value.data();
                        g.iter()
                            .zip(va)
                            .map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi })
                            .collect()
                    };
                    accumulate(&mut grads[a], &da, 1.0);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let v = &self.nodes[a].value;
                        (v.rows(), v.cols())
                    };
                    let n = self.nodes[b].value.cols();
                    // dA = G . B^T ; dB = A^T . G
                    let (da, db) = {
                        let va = self.nodes[a].value.data();
                        let vb = self.nodes[b].value.data();
                        (matmul_nt(&g, vb, m, n, k), matmul_tn(va, &g, k, m, n))
                    };
                    accumulate(&mut grads[a], &da, 1.0);
                    accumulate(&mut grads[b], &db, 1.0);
                }
                Op::SoftmaxRows { a } => {
                    let da = {
                        let y = self.nodes[idx].value.data();
                        let (r, c) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                        softmax_rows_backward(y, &g, r, c)
                    };
                    accumulate(&mut grads[a], &da, 1.0);
                }
                Op::Conv1d { x, k } => {
                    let (cin, l) = {
                        let v = &self.nodes[x].value;
                        (v.shape()[0], v.shape()[1])
                    };
                    let (cout, klen) = {
                        let v = &self.nodes[k].value;
                        (v.shape()[0], v.shape()[2])
                    };
                    let (dx, dk) = {
                        let vx = self.nodes[x].value.data();
                        let vk = self.nodes[k].value.data();
                        // dx is the transposed convolution of g by the same
                        // kernel buffer reinterpreted as [cout, cin, klen].
                        let dx = trans_conv1d_raw(&g, vk, cout, l - klen + 1, cin, klen);
                        let mut dk = vec![0.0; cout * cin * klen];
                        let lo = l - klen + 1;
                        for o in 0..cout {
                            for i in 0..cin {
                                for j in 0..klen {
                                    let mut s = 0.0;
                                    for t in 0..lo {
                                        s += g[o * lo + t] * vx[i * l + t + j];
                                    }
                                    dk[(o * cin + i) * klen + j] = s;
                                }
                            }
                        }
                        (dx, dk)
                    };
                    accumulate(&mut grads[x], &dx, 1.0);
                    accumulate(&mut grads[k], &dk, 1.0);
                }
                Op::TransConv1d { x, k } => {
                    let (cin, l) = {
                        let v = &self.nodes[x].value;
                        (v.shape()[0], v.shape()[1])
                    };
                    let (cout, klen) = {
                        let v = &self.nodes[k].value;
                        (v.shape()[1], v.shape()[2])
                    };
                    let lo = l + klen - 1;
                    let (dx, dk) = {
                        let vx = self.nodes[x].value.data();
                        let vk = self.nodes[k].value.data();
                        // dx is the valid convolution of g by the same kernel
                        // buffer reinterpreted as [cin, cout, klen].
                        let dx = conv1d_raw(&g, vk, cout, lo, cin, klen);
                        let mut dk = vec![0.0; cin * cout * klen];
                        for i in 0..cin {
                            for o in 0..cout {
                                for j in 0..klen {
                                    let mut s = 0.0;
                                    for p in 0..l {
                                        s += vx[i * l + p] * g[o * lo + p + j];
                                    }
                                    dk[(i * cout + o) * klen + j] = s;
                                }
                            }
                        }
                        (dx, dk)
                    };
                    accumulate(&mut grads[x], &dx, 1.0);
                    accumulate(&mut grads[k], &dk, 1.0);
                }
                Op::ConvRows { x, k } => {
                    let (r, l) = {
                        let v = &self.nodes[x].value;
                        (v.shape()[0], v.shape()[1])
                    };
                    let klen = self.nodes[k].value.shape()[0];
                    let lo = l - klen + 1;
                    let (dx, dk) = {
                        let vx = self.nodes[x].value.data();
                        let vk = self.nodes[k].value.data();
                        let mut dx = vec![0.0; r * l];
                        let mut dk = vec![0.0; klen];
                        for i in 0..r {
                            for t in 0..lo {
                                let gi = g[i * lo + t];
                                for j in 0..klen {
                                    dx[i * l + t + j] += gi * vk[j];
                                    dk[j] += gi * vx[i * l + t + j];
                                }
                            }
                        }
                        (dx, dk)
                    };
                    accumulate(&mut grads[x], &dx, 1.0);
                    accumulate(&mut grads[k], &dk, 1.0);
                }
            }
            grads[idx] = g;
        }

        Ok(Grads { grads })
    }
}

/// Per-example gradients by microbatch-of-one replay: `loss_fn` rebuilds the
/// forward pass on a fresh tape for each example and reports which vars to
/// differentiate; the result is one flat gradient per example, identical to
/// running backward on that example alone.
pub fn per_example_grads<F>(mut loss_fn: F, batch: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<(Var, Vec<Var>)>,
{
    if batch.is_empty() {
        return Err(TensorError::Dimension("per_example_grads: empty batch".into()));
    }
    let mut out = Vec::with_capacity(batch.len());
    for (idx, example) in batch.iter().enumerate() {
        let mut run = || -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let (loss, params) = loss_fn(&mut tape, example)?;
            let grads = tape.backward(loss)?;
            let mut flat = Vec::new();
            for p in &params {
                flat.extend_from_slice(grads.grad(*p));
            }
            Ok(flat)
        };
        match run() {
            Ok(flat) => out.push(flat),
            Err(TensorError::NonFinite(what)) => {
                return Err(TensorError::NonFinite(format!("example {}: {}", idx, what)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// a[m,k] . b[n,k]^T -> [m,n]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// a[k,m]^T . b[k,n] -> [m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    out
}

fn softmax_rows_backward(y: &[f64], g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let yr = &y[i * c..(i + 1) * c];
        let gr = &g[i * c..(i + 1) * c];
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out[i * c + j] = yr[j] * (gr[j] - inner);
        }
    }
    out
}

/// y[o,t] = sum_{i,j} x[i, t+j] . k[o,i,j], valid range.
pub(crate) fn conv1d_raw(
    x: &[f64],
    k: &[f64],
    cin: usize,
    l: usize,
    cout: usize,
    klen: usize,
) -> Vec<f64> {
    let lo = l - klen + 1;
    let mut out = vec![0.0; cout * lo];
    for o in 0..cout {
        for i in 0..cin {
            let kbase = (o * cin + i) * klen;
            for t in 0..lo {
                let mut s = 0.0;
                for j in 0..klen {
                    s += x[i * l + t + j] * k[kbase + j];
                }
                out[o * lo + t] += s;
            }
        }
    }
    out
}

/// y[o, p+j] += x[i, p] . k[i,o,j]; output length l + klen - 1.
pub(crate) fn trans_conv1d_raw(
    x: &[f64],
    k: &[f64],
    cin: usize,
    l: usize,
    cout: usize,
    klen: usize,
) -> Vec<f64> {
    let lo = l + klen - 1;
    let mut out = vec![0.0; cout * lo];
    for i in 0..cin {
        for p in 0..l {
            let xv = x[i * l + p];
            if xv == 0.0 {
                continue;
            }
            for o in 0..cout {
                let kbase = (i * cout + o) * klen;
                for j in 0..klen {
                    out[o * lo + p + j] += xv * k[kbase + j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::identity(2));
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        // [[1,2]] . [[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_bt() {
        // d sum(A.B) / dA = ones . B^T
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);

        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let prod = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();

        // expected dA[i,p] = sum_j B[p,j]
        for i in 0..3 {
            for p in 0..4 {
                let expected: f64 = (0..2).map(|j| b.at2(p, j)).sum();
                let got = grads.grad(va)[i * 4 + p];
                assert!((got - expected).abs() < 1e-12);
            }
        }

        let report = check_gradients(
            |t, vars| {
                let p = t.matmul(vars[0], vars[1])?;
                t.sum(p)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let yb = tape.softmax_rows(big).unwrap();
        let d = tape.value(yb).data();
        assert!(d[0] > 1.0 - 1e-12 && d[1] < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![5, 7]);
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let y = tape.softmax_rows(vx).unwrap();
        for i in 0..5 {
            let s: f64 = tape.value(y).data()[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // shifting a row by a constant leaves the output unchanged
        let mut shifted = x.data().to_vec();
        for (j, v) in shifted.iter_mut().enumerate() {
            *v += (j / 7) as f64 * 3.5;
        }
        let mut tape2 = Tape::new();
        let vx2 = tape2.leaf(Tensor::new(vec![5, 7], shifted).unwrap());
        let y2 = tape2.softmax_rows(vx2).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape2.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_identity_kernel() {
        // k=1, kernel = identity per channel -> output equals input
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap());
        let k = tape.leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv1d_sliding_dot_product() {
        // x=[1,2,3], kernel=[1,1] -> [3,5]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv1d_kernel_longer_than_input_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2]));
        let k = tape.leaf(Tensor::zeros(vec![1, 1, 3]));
        assert!(tape.conv1d(x, k).is_err());
    }

    #[test]
    fn trans_conv1d_scatter_and_length() {
        // single position scatters the kernel: x=[2], k=[1,3] -> [2,6]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let y = tape.trans_conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 6.0]);

        // length-1 input with kernel length T -> output length T
        let t_len = 7;
        let mut tape2 = Tape::new();
        let x1 = tape2.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let kt = tape2.leaf(Tensor::new(vec![1, 1, t_len], vec![0.5; t_len]).unwrap());
        let y1 = tape2.trans_conv1d(x1, kt).unwrap();
        assert_eq!(tape2.value(y1).shape(), &[1, t_len]);
    }

    #[test]
    fn conv_trans_conv_adjoint_identity() {
        // dot(conv1d(x,K), y) == dot(x, trans_conv1d(y, K-as-trans))
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let cin = 3;
            let l = 4;
            let cout = 2;
            let klen = 2;
            let x = rand_tensor(&mut rng, vec![cin, l]);
            let k = rand_tensor(&mut rng, vec![cout, cin, klen]);
            let lo = l - klen + 1;
            let y = rand_tensor(&mut rng, vec![cout, lo]);

            let c = conv1d_raw(x.data(), k.data(), cin, l, cout, klen);
            let lhs = crate::tensor::dot(&c, y.data());

            // same kernel buffer reinterpreted as [cout, cin, klen] trans layout
            let tx = trans_conv1d_raw(y.data(), k.data(), cout, lo, cin, klen);
            let rhs = crate::tensor::dot(x.data(), &tx);
            assert!((lhs - rhs).abs() < 1e-10, "adjoint violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn all_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-4;

        // conv1d and trans_conv1d
        let x = rand_tensor(&mut rng, vec![2, 5]);
        let k = rand_tensor(&mut rng, vec![3, 2, 2]);
        let r = check_gradients(
            |t, v| {
                let c = t.conv1d(v[0], v[1])?;
                let act = t.leaky_relu(c, 0.1)?;
                t.sum(act)
            },
            &[x.clone(), k.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < tol, "conv1d {}", r.max_rel_err);

        let kt = rand_tensor(&mut rng, vec![2, 3, 4]);
        let r = check_gradients(
            |t, v| {
                let c = t.trans_conv1d(v[0], v[1])?;
                let sq = t.mul(c, c)?;
                t.mean(sq)
            },
            &[x.clone(), kt],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < tol, "trans_conv1d {}", r.max_rel_err);

        // conv_rows
        let k1 = rand_tensor(&mut rng, vec![3]);
        let r = check_gradients(
            |t, v| {
                let c = t.conv_rows(v[0], v[1])?;
                t.sum(c)
            },
            &[x.clone(), k1],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < tol, "conv_rows {}", r.max_rel_err);

        // softmax + matmul + transpose + mul_scalar + sub/neg/scale chains
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        let s = rand_tensor(&mut rng, vec![1]);
        let r = check_gradients(
            |t, v| {
                let soft = t.softmax_rows(v[0])?;
                let bt = t.transpose(v[1])?;
                let prod = t.matmul(soft, bt)?;
                let gated = t.mul_scalar(prod, v[2])?;
                let neg = t.neg(gated)?;
                let scaled = t.scale(neg, -1.7)?;
                let diff = t.sub(scaled, scaled)?;
                let total = t.add(scaled, diff)?;
                t.mean(total)
            },
            &[a, b, s],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < tol, "mixed chain {}", r.max_rel_err);
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 2.0, -0.2, 0.9]).unwrap());
            let k = tape.leaf(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
            let c = tape.conv_rows(x, k).unwrap();
            let sm = tape.softmax_rows(c).unwrap();
            let loss = tape.mean(sm).unwrap();
            let grads = tape.backward(loss).unwrap();
            (grads.grad(x).to_vec(), grads.grad(k).to_vec())
        };
        let (gx1, gk1) = run();
        let (gx2, gk2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gk1, gk2);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::TapeMisuse(_))));
    }

    #[test]
    fn per_example_singleton_equals_ordinary_gradient() {
        let w = Tensor::new(vec![2], vec![0.4, -0.3]).unwrap();
        let batch = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let build = |tape: &mut Tape, x: &Tensor| -> Result<(Var, Vec<Var>)> {
            let wv = tape.leaf(w.clone());
            let xv = tape.leaf(x.clone());
            let d = tape.sub(wv, xv)?;
            let sq = tape.mul(d, d)?;
            let loss = tape.sum(sq)?;
            Ok((loss, vec![wv]))
        };
        let per = per_example_grads(build, &batch).unwrap();

        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let xv = tape.leaf(batch[0].clone());
        let d = tape.sub(wv, xv).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(per[0], grads.grad(wv).to_vec());
    }

    #[test]
    fn per_example_mean_equals_gradient_of_mean_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&mut rng, vec![4]);
        let batch: Vec<Tensor> = (0..6).map(|_| rand_tensor(&mut rng, vec![4])).collect();

        let build = |tape: &mut Tape, x: &Tensor| -> Result<(Var, Vec<Var>)> {
            let wv = tape.leaf(w.clone());
            let xv = tape.leaf(x.clone());
            let d = tape.sub(wv, xv)?;
            let sq = tape.mul(d, d)?;
            let loss = tape.sum(sq)?;
            Ok((loss, vec![wv]))
        };
        let per = per_example_grads(build, &batch).unwrap();
        let mean_of_per: Vec<f64> = (0..4)
            .map(|j| per.iter().map(|g| g[j]).sum::<f64>() / batch.len() as f64)
            .collect();

        // gradient of the mean loss on a single tape
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let mut losses = Vec::new();
        for x in &batch {
            let xv = tape.leaf(x.clone());
            let d = tape.sub(wv, xv).unwrap();
            let sq = tape.mul(d, d).unwrap();
            losses.push(tape.sum(sq).unwrap());
        }
        let mut acc = losses[0];
        for l in &losses[1..] {
            acc = tape.add(acc, *l).unwrap();
        }
        let mean_loss = tape.scale(acc, 1.0 / batch.len() as f64).unwrap();
        let grads = tape.backward(mean_loss).unwrap();

        for (a, b) in mean_of_per.iter().zip(grads.grad(wv)) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel < 1e-10, "linearity violated: {a} vs {b}");
        }
    }

    #[test]
    fn per_example_quadratic_hand_gradient() {
        // ||w - x||^2 at w=0, x=[3,4] -> grad [-6,-8]
        let w = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let batch = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let per = per_example_grads(
            |tape, x| {
                let wv = tape.leaf(w.clone());
                let xv = tape.leaf(x.clone());
                let d = tape.sub(wv, xv)?;
                let sq = tape.mul(d, d)?;
                let loss = tape.sum(sq)?;
                Ok((loss, vec![wv]))
            },
            &batch,
        )
        .unwrap();
        assert_eq!(per[0], vec![-6.0, -8.0]);
    }

    #[test]
    fn per_example_empty_batch_errors() {
        let r = per_example_grads(|_t, _x| unreachable!(), &[]);
        assert!(r.is_err());
    }
}
