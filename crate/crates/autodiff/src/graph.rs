// SPDX-License-Identifier: Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; node order is a valid
//! topological order, so `backward` is a single reverse sweep. Most ops work
//! on rank-2 tensors. Sequence activations are channel-major (`C x L`) inside
//! convolutions and frame-major (`T x D`) elsewhere.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, AutodiffError, Result};
use crate::params::ModelParameters;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance, the one used for normalisation.
    pub var: Vec<S>,
    pub count: usize,
}

impl<S: Real> BatchStats<S> {
    /// `running = (1 - momentum) * running + momentum * batch`, using the
    /// unbiased variance for the running estimate.
    pub fn update_running(&self, running_mean: &mut [S], running_var: &mut [S], momentum: f64) {
        let m = S::of(momentum);
        let keep = S::one() - m;
        let bessel = if self.count > 1 {
            S::of(self.count as f64 / (self.count - 1) as f64)
        } else {
            S::one()
        };
        for c in 0..self.mean.len() {
            running_mean[c] = keep * running_mean[c] + m * self.mean[c];
            running_var[c] = keep * running_var[c] + m * self.var[c] * bessel;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            padding: 0,
        }
    }

    /// Output length for an input of `len` samples, `None` when empty.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRowVec(usize, usize),
    AddColVec(usize, usize),
    MulColVec(usize, usize),
    Scale(usize, S),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    MaskedMeanRows {
        x: usize,
        weights: Vec<S>,
    },
    Sum(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Transpose(usize),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        spec: ConvSpec,
        cols: Vec<S>,
    },
    Dropout {
        x: usize,
        mask: Vec<S>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// A computation graph under construction.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<String, usize>,
    grad_enabled: bool,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Real>(op: &'static str, data: &[S]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(AutodiffError::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn acc<S: Real>(slot: &mut Option<Vec<S>>, n: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); n])
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no gradients; parameters bind as constants.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[usize]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<S>,
        op: Op<S>,
        parents: &[usize],
    ) -> Result<Var> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, parents))
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a named parameter. Repeated binds return the same node.
    pub fn param(&mut self, params: &ModelParameters<S>, name: &str) -> Result<Var> {
        if let Some(&id) = self.params.get(name) {
            return Ok(Var(id));
        }
        let p = params.get(name)?;
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_or_else(|| shape_err(op, format!("expected rank 2, got {:?}", self.shape(v))), Ok)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", format!("[{m}x{k}] . [{k2}x{n}]"));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        self.push_checked("matmul", t, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push_checked(name, t, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `x[R x C] + b[C]`, broadcasting the bias over rows.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row_vec", x)?;
        if self.value(b).len() != c {
            return shape_err("add_row_vec", format!("bias {:?} for {c} columns", self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(bias).for_each(|(v, &bb)| *v += bb);
        }
        let t = Tensor::new(&[r, c], data)?;
        self.push_checked("add_row_vec", t, Op::AddRowVec(x.0, b.0), &[x.0, b.0])
    }

    /// `x[R x C] + b[R]`, broadcasting the bias over columns.
    pub fn add_col_vec(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_col_vec", x)?;
        if self.value(b).len() != r {
            return shape_err("add_col_vec", format!("bias {:?} for {r} rows", self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &bb) in data.chunks_mut(c).zip(bias) {
            row.iter_mut().for_each(|v| *v += bb);
        }
        let t = Tensor::new(&[r, c], data)?;
        self.push_checked("add_col_vec", t, Op::AddColVec(x.0, b.0), &[x.0, b.0])
    }

    /// Scales row `i` of `x[R x C]` by `s[i]`.
    pub fn mul_col_vec(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2("mul_col_vec", x)?;
        if self.value(s).len() != r {
            return shape_err("mul_col_vec", format!("scale {:?} for {r} rows", self.shape(s)));
        }
        let sc = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &k) in data.chunks_mut(c).zip(sc) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let t = Tensor::new(&[r, c], data)?;
        self.push_checked("mul_col_vec", t, Op::MulColVec(x.0, s.0), &[x.0, s.0])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = S::of(k);
        let data = self.value(x).data().iter().map(|&v| v * k).collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push_checked("scale", t, Op::Scale(x.0, k), &[x.0])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push_checked(name, t, op, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(S::zero()), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, |v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, |v| v.tanh(), Op::Tanh(x.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("softmax_rows", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(&[r, c], data)?;
        self.push_checked("softmax_rows", t, Op::SoftmaxRows(x.0), &[x.0])
    }

    /// Normalises each row of `x[R x C]` over its `C` features, then applies
    /// the affine `gamma`, `beta` (both length `C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm", x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("layer_norm", format!("affine params for {c} features"));
        }
        let eps = S::of(eps);
        let n = S::of(c as f64);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&[r, c], out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
        };
        self.push_checked("layer_norm", t, op, &[x.0, gamma.0, beta.0])
    }

    /// Training-mode batch norm over `x[C x N]`: channel `c` is normalised
    /// with the mean and biased variance of its `N` columns.
    pub fn batch_norm_1d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<S>)> {
        let (c, n) = self.dims2("batch_norm_1d", x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("batch_norm_1d", format!("affine params for {c} channels"));
        }
        let nn = S::of(n as f64);
        let eps = S::of(eps);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); c * n];
        let mut out = vec![S::zero(); c * n];
        let mut inv_std = vec![S::zero(); c];
        let mut means = vec![S::zero(); c];
        let mut vars = vec![S::zero(); c];
        for ch in 0..c {
            let row = &xs[ch * n..(ch + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            means[ch] = mean;
            vars[ch] = var;
            inv_std[ch] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[ch * n + j] = h;
                out[ch * n + j] = h * g[ch] + b[ch];
            }
        }
        let t = Tensor::new(&[c, n], out)?;
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
            train: true,
        };
        let v = self.push_checked("batch_norm_1d", t, op, &[x.0, gamma.0, beta.0])?;
        Ok((
            v,
            BatchStats {
                mean: means,
                var: vars,
                count: n,
            },
        ))
    }

    /// Evaluation-mode batch norm: a fixed per-channel affine map built from
    /// running statistics.
    pub fn batch_norm_1d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<Var> {
        let (c, n) = self.dims2("batch_norm_1d", x)?;
        if self.value(gamma).len() != c
            || self.value(beta).len() != c
            || running_mean.len() != c
            || running_var.len() != c
        {
            return shape_err("batch_norm_1d", format!("statistics for {c} channels"));
        }
        let eps = S::of(eps);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); c * n];
        let mut out = vec![S::zero(); c * n];
        for ch in 0..c {
            for j in 0..n {
                let h = (xs[ch * n + j] - running_mean[ch]) * inv_std[ch];
                xhat[ch * n + j] = h;
                out[ch * n + j] = h * g[ch] + b[ch];
            }
        }
        let t = Tensor::new(&[c, n], out)?;
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
            train: false,
        };
        self.push_checked("batch_norm_1d", t, op, &[x.0, gamma.0, beta.0])
    }

    /// Mean over `axis` of a rank-2 tensor, keeping the reduced axis as 1.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims2("mean_over_axis", x)?;
        let xs = self.value(x).data();
        let t = match axis {
            0 => {
                let mut out = vec![S::zero(); c];
                for row in xs.chunks(c) {
                    out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                }
                let n = S::of(r as f64);
                out.iter_mut().for_each(|o| *o = *o / n);
                Tensor::new(&[1, c], out)?
            }
            1 => {
                let n = S::of(c as f64);
                let out = xs.chunks(c).map(|row| row.iter().copied().sum::<S>() / n).collect();
                Tensor::new(&[r, 1], out)?
            }
            _ => return shape_err("mean_over_axis", format!("axis {axis} of a rank-2 tensor")),
        };
        self.push_checked("mean_over_axis", t, Op::Mean { x: x.0, axis }, &[x.0])
    }

    /// Weighted mean of the rows of `x[T x F]` where `mask[t]` is 1 for valid
    /// frames and 0 for padding. Yields `[1 x F]`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2("masked_mean_rows", x)?;
        let count = mask.iter().filter(|&&m| m).count();
        if mask.len() != r || count == 0 {
            return shape_err("masked_mean_rows", format!("mask of {} ({count} valid) for {r} rows", mask.len()));
        }
        let w = S::one() / S::of(count as f64);
        let weights: Vec<S> = mask.iter().map(|&m| if m { w } else { S::zero() }).collect();
        let mut out = vec![S::zero(); c];
        for (row, &wt) in self.value(x).data().chunks(c).zip(&weights) {
            if wt != S::zero() {
                out.iter_mut().zip(row).for_each(|(o, &v)| *o += v * wt);
            }
        }
        let t = Tensor::new(&[1, c], out)?;
        self.push_checked("masked_mean_rows", t, Op::MaskedMeanRows { x: x.0, weights }, &[x.0])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return shape_err("concat", format!("{} parts along axis {axis}", parts.len()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2("concat", p))
            .collect::<Result<_>>()?;
        let t = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return shape_err("concat", format!("row concat of {dims:?}"));
            }
            let mut data = Vec::with_capacity(dims.iter().map(|d| d.0 * c).sum());
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[dims.iter().map(|d| d.0).sum(), c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return shape_err("concat", format!("column concat of {dims:?}"));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for (&p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[i * d.1..(i + 1) * d.1]);
                }
            }
            Tensor::new(&[r, total], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_checked("concat", t, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transposed()?;
        Ok(self.push(t, Op::Transpose(x.0), &[x.0]))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start >= end || end > r {
            return shape_err("slice_rows", format!("{start}..{end} of {r} rows"));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(&[end - start, c], data)?;
        Ok(self.push(t, Op::SliceRows { x: x.0, start }, &[x.0]))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start >= end || end > c {
            return shape_err("slice_cols", format!("{start}..{end} of {c} columns"));
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xs[i * c + start..i * c + end]);
        }
        let t = Tensor::new(&[r, end - start], data)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    /// `x * w + b` with `x[R x in]`, `w[in x out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_vec(y, b)
    }

    /// 1-D cross-correlation of `x[C_in x L]` with `w[C_out x C_in x k]` plus
    /// bias `b[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (c_in, l) = self.dims2("conv1d", x)?;
        let [c_out, wc_in, k] = self.shape(w)[..] else {
            return shape_err("conv1d", format!("weight must be rank 3, got {:?}", self.shape(w)));
        };
        if wc_in != c_in || self.value(b).len() != c_out || k == 0 {
            return shape_err(
                "conv1d",
                format!("input [{c_in}x{l}], weight {:?}, bias {:?}", self.shape(w), self.shape(b)),
            );
        }
        let Some(l_out) = spec.output_len(l, k) else {
            return shape_err("conv1d", format!("input length {l} too short for kernel {k} with {spec:?}"));
        };
        let ck = c_in * k;
        let xs = self.value(x).data();
        let mut cols = vec![S::zero(); ck * l_out];
        for c in 0..c_in {
            let xrow = &xs[c * l..(c + 1) * l];
            for j in 0..k {
                let dst = &mut cols[(c * k + j) * l_out..(c * k + j + 1) * l_out];
                let off = (j * spec.dilation) as isize - spec.padding as isize;
                for (t, d) in dst.iter_mut().enumerate() {
                    let src = (t * spec.stride) as isize + off;
                    if src >= 0 && (src as usize) < l {
                        *d = xrow[src as usize];
                    }
                }
            }
        }
        let mut out = vec![S::zero(); c_out * l_out];
        S::gemm(c_out, ck, l_out, self.value(w).data(), false, &cols, false, &mut out, false);
        for (row, &bb) in out.chunks_mut(l_out).zip(self.value(b).data()) {
            row.iter_mut().for_each(|v| *v += bb);
        }
        let t = Tensor::new(&[c_out, l_out], out)?;
        let op = Op::Conv1d {
            x: x.0,
            w: w.0,
            b: b.0,
            spec,
            cols,
        };
        self.push_checked("conv1d", t, op, &[x.0, w.0, b.0])
    }

    /// Inverted dropout: surviving entries are scaled by `1 / (1 - p)`.
    /// Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return shape_err("dropout", format!("probability {p} must be < 1"));
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push_checked("dropout", t, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b {
            return shape_err("cross_entropy", format!("{} labels for {b} rows", labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { label, classes: c });
        }
        let xs = self.value(logits).data();
        let mut probs = xs.to_vec();
        let mut loss = S::zero();
        for (i, row) in xs.chunks(c).enumerate() {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            loss += lse - row[labels[i]];
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        loss = loss / S::of(b as f64);
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        self.push_checked("cross_entropy", Tensor::scalar(loss), op, &[logits.0])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let slot = &mut self.nodes[i].grad;
                let dst = acc(slot, g.len());
                dst.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, p: usize) -> bool {
        self.nodes[p].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a].value.dims2().unwrap();
                let n = out_shape[1];
                if self.wants(a) {
                    let ga = acc(&mut grads[a], m * k);
                    S::gemm(m, n, k, g, false, self.nodes[b].value.data(), true, ga, true);
                }
                if self.wants(b) {
                    let gb = acc(&mut grads[b], k * n);
                    S::gemm(k, m, n, self.nodes[a].value.data(), true, g, false, gb, true);
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(p) {
                        let gp = acc(&mut grads[p], g.len());
                        gp.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (p, other) in [(a, b), (b, a)] {
                    if self.wants(p) {
                        let o = self.nodes[other].value.data();
                        let gp = acc(&mut grads[p], g.len());
                        for ((d, &v), &w) in gp.iter_mut().zip(g).zip(o) {
                            *d += v * w;
                        }
                    }
                }
            }
            &Op::AddRowVec(x, b) => {
                let c = out_shape[1];
                if self.wants(x) {
                    let gx = acc(&mut grads[x], g.len());
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.wants(b) {
                    let gb = acc(&mut grads[b], c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::AddColVec(x, b) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                if self.wants(x) {
                    let gx = acc(&mut grads[x], g.len());
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.wants(b) {
                    let gb = acc(&mut grads[b], r);
                    for (d, row) in gb.iter_mut().zip(g.chunks(c)) {
                        *d += row.iter().copied().sum::<S>();
                    }
                }
            }
            &Op::MulColVec(x, s) => {
                let c = out_shape[1];
                let sv = self.nodes[s].value.data();
                let xv = self.nodes[x].value.data();
                if self.wants(x) {
                    let gx = acc(&mut grads[x], g.len());
                    for ((drow, grow), &k) in gx.chunks_mut(c).zip(g.chunks(c)).zip(sv) {
                        drow.iter_mut().zip(grow).for_each(|(d, &v)| *d += v * k);
                    }
                }
                if self.wants(s) {
                    let gs = acc(&mut grads[s], sv.len());
                    for ((d, grow), xrow) in gs.iter_mut().zip(g.chunks(c)).zip(xv.chunks(c)) {
                        *d += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
            }
            &Op::Scale(x, k) => {
                if self.wants(x) {
                    let gx = acc(&mut grads[x], g.len());
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * k);
                }
            }
            &Op::Relu(x) => {
                if self.wants(x) {
                    let xv = self.nodes[x].value.data();
                    let gx = acc(&mut grads[x], g.len());
                    for ((d, &v), &xx) in gx.iter_mut().zip(g).zip(xv) {
                        if xx > S::zero() {
                            *d += v;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if self.wants(x) {
                    let y = node.value.data();
                    let gx = acc(&mut grads[x], g.len());
                    for ((d, &v), &yy) in gx.iter_mut().zip(g).zip(y) {
                        *d += v * yy * (S::one() - yy);
                    }
                }
            }
            &Op::Tanh(x) => {
                if self.wants(x) {
                    let y = node.value.data();
                    let gx = acc(&mut grads[x], g.len());
                    for ((d, &v), &yy) in gx.iter_mut().zip(g).zip(y) {
                        *d += v * (S::one() - yy * yy);
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if self.wants(x) {
                    let c = out_shape[1];
                    let y = node.value.data();
                    let gx = acc(&mut grads[x], g.len());
                    for ((drow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<S>();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out_shape[1];
                self.norm_backward(g, *x, *gamma, *beta, xhat, grads, NormAxis::Rows { c, inv_std });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let n = out_shape[1];
                let axis = if *train {
                    NormAxis::Channels { n, inv_std }
                } else {
                    NormAxis::Affine { n, inv_std }
                };
                self.norm_backward(g, *x, *gamma, *beta, xhat, grads, axis);
            }
            &Op::Mean { x, axis } => {
                if self.wants(x) {
                    let (r, c) = self.nodes[x].value.dims2().unwrap();
                    let gx = acc(&mut grads[x], r * c);
                    if axis == 0 {
                        let k = S::one() / S::of(r as f64);
                        for row in gx.chunks_mut(c) {
                            row.iter_mut().zip(g).for_each(|(d, &v)| *d += v * k);
                        }
                    } else {
                        let k = S::one() / S::of(c as f64);
                        for (row, &v) in gx.chunks_mut(c).zip(g) {
                            row.iter_mut().for_each(|d| *d += v * k);
                        }
                    }
                }
            }
            Op::MaskedMeanRows { x, weights } => {
                if self.wants(*x) {
                    let c = out_shape[1];
                    let gx = acc(&mut grads[*x], weights.len() * c);
                    for (row, &w) in gx.chunks_mut(c).zip(weights) {
                        row.iter_mut().zip(g).for_each(|(d, &v)| *d += v * w);
                    }
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    let n = self.nodes[x].value.len();
                    let gx = acc(&mut grads[x], n);
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Concat { parts, axis } => {
                let total_c = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.nodes[p].value.dims2().unwrap();
                    if self.wants(p) {
                        let gp = acc(&mut grads[p], pr * pc);
                        if *axis == 0 {
                            let src = &g[offset * total_c..(offset + pr) * total_c];
                            gp.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        } else {
                            for i in 0..pr {
                                let src = &g[i * total_c + offset..i * total_c + offset + pc];
                                gp[i * pc..(i + 1) * pc]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, &v)| *d += v);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            &Op::Transpose(x) => {
                if self.wants(x) {
                    let (r, c) = (out_shape[0], out_shape[1]);
                    let gx = acc(&mut grads[x], r * c);
                    // out is r x c, input is c x r
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if self.wants(x) {
                    let (r, c) = self.nodes[x].value.dims2().unwrap();
                    let gx = acc(&mut grads[x], r * c);
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d += v);
                }
            }
            &Op::SliceCols { x, start } => {
                if self.wants(x) {
                    let (r, c) = self.nodes[x].value.dims2().unwrap();
                    let w = out_shape[1];
                    let gx = acc(&mut grads[x], r * c);
                    for i in 0..r {
                        gx[i * c + start..i * c + start + w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Conv1d { x, w, b, spec, cols } => {
                let (x, w, b) = (*x, *w, *b);
                let (c_out, l_out) = (out_shape[0], out_shape[1]);
                let (c_in, l) = self.nodes[x].value.dims2().unwrap();
                let k = self.nodes[w].value.shape()[2];
                let ck = c_in * k;
                if self.wants(b) {
                    let gb = acc(&mut grads[b], c_out);
                    for (d, row) in gb.iter_mut().zip(g.chunks(l_out)) {
                        *d += row.iter().copied().sum::<S>();
                    }
                }
                if self.wants(w) {
                    let gw = acc(&mut grads[w], c_out * ck);
                    S::gemm(c_out, l_out, ck, g, false, cols, true, gw, true);
                }
                if self.wants(x) {
                    let mut dcols = vec![S::zero(); ck * l_out];
                    S::gemm(ck, c_out, l_out, self.nodes[w].value.data(), true, g, false, &mut dcols, false);
                    let gx = acc(&mut grads[x], c_in * l);
                    for c in 0..c_in {
                        for j in 0..k {
                            let src = &dcols[(c * k + j) * l_out..(c * k + j + 1) * l_out];
                            let off = (j * spec.dilation) as isize - spec.padding as isize;
                            for (t, &v) in src.iter().enumerate() {
                                let pos = (t * spec.stride) as isize + off;
                                if pos >= 0 && (pos as usize) < l {
                                    gx[c * l + pos as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let gx = acc(&mut grads[*x], g.len());
                    for ((d, &v), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = probs.len() / labels.len();
                    let k = g[0] / S::of(labels.len() as f64);
                    let gl = acc(&mut grads[*logits], probs.len());
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { S::one() } else { S::zero() };
                            gl[i * c + j] += (probs[i * c + j] - onehot) * k;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        g: &[S],
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: &[S],
        grads: &mut [Option<Vec<S>>],
        axis: NormAxis<'_, S>,
    ) {
        let gam = self.nodes[gamma].value.data();
        let nfeat = gam.len();
        // (group index, affine index) for each flat position
        let (groups, group_len, inv_std, per_row_affine): (usize, usize, &[S], bool) = match axis {
            NormAxis::Rows { c, inv_std } => (g.len() / c, c, inv_std, true),
            NormAxis::Channels { n, inv_std } | NormAxis::Affine { n, inv_std } => {
                (g.len() / n, n, inv_std, false)
            }
        };
        let affine_idx = |grp: usize, j: usize| if per_row_affine { j } else { grp };
        if self.wants(gamma) {
            let gg = acc(&mut grads[gamma], nfeat);
            for grp in 0..groups {
                for j in 0..group_len {
                    let i = grp * group_len + j;
                    gg[affine_idx(grp, j)] += g[i] * xhat[i];
                }
            }
        }
        if self.wants(beta) {
            let gb = acc(&mut grads[beta], nfeat);
            for grp in 0..groups {
                for j in 0..group_len {
                    gb[affine_idx(grp, j)] += g[grp * group_len + j];
                }
            }
        }
        if self.wants(x) {
            let gx = acc(&mut grads[x], g.len());
            let n = S::of(group_len as f64);
            for grp in 0..groups {
                let base = grp * group_len;
                let is = inv_std[grp];
                if let NormAxis::Affine { .. } = axis {
                    for j in 0..group_len {
                        gx[base + j] += g[base + j] * gam[grp] * is;
                    }
                    continue;
                }
                let mut sum_d = S::zero();
                let mut sum_dx = S::zero();
                for j in 0..group_len {
                    let d = g[base + j] * gam[affine_idx(grp, j)];
                    sum_d += d;
                    sum_dx += d * xhat[base + j];
                }
                for j in 0..group_len {
                    let d = g[base + j] * gam[affine_idx(grp, j)];
                    gx[base + j] += is / n * (n * d - sum_d - xhat[base + j] * sum_dx);
                }
            }
        }
    }

    /// Adds this graph's leaf gradients into `params`. Every trainable entry
    /// ends up with a gradient slot; entries not used by the graph get zeros.
    pub fn accumulate_param_grads(&self, params: &mut ModelParameters<S>) {
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let slot = acc(&mut p.grad, p.value.len());
            if let Some(&id) = self.params.get(name) {
                if let Some(g) = &self.nodes[id].grad {
                    slot.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }

    /// Gradient of a bound parameter, if it received one.
    pub fn param_grad(&self, name: &str) -> Option<&[S]> {
        self.params.get(name).and_then(|&id| self.nodes[id].grad.as_deref())
    }
}

enum NormAxis<'a, S> {
    /// layer norm: each row of width `c` is a group, affine per column
    Rows { c: usize, inv_std: &'a [S] },
    /// batch norm: each channel row of length `n` is a group, affine per row
    Channels { n: usize, inv_std: &'a [S] },
    /// eval batch norm: fixed affine, no statistics dependence
    Affine { n: usize, inv_std: &'a [S] },
}

pub(crate) fn softmax_in_place<S: Real>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}
