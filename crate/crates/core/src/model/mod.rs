// SPDX-License-Identifier: Apache-2.0

//! Both encoder paths, the fusion module, the classification head and the
//! assembled models used by training.

pub mod acoustic;
pub mod fusion;
pub mod gradsuite;
pub mod head;
pub mod network;
pub mod tdnn;

use fusepath_autodiff::{kaiming_uniform, BatchStats, Graph, ModelParameters, Real, Result, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub use acoustic::AcousticConfig;
pub use fusion::{FusedEmbedding, FusionConfig, FusionStyle};
pub use head::HeadConfig;
pub use network::{ClipInput, ModelKind, Network};
pub use tdnn::TdnnConfig;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the mode, batch-norm statistics gathered in training
/// mode, and the dropout stream.
pub struct Forward<S> {
    pub mode: Mode,
    pub dropout: f64,
    pub rng: Option<ChaCha8Rng>,
    stats: Vec<(String, BatchStats<S>)>,
}

impl<S: Real> Forward<S> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            rng: None,
            stats: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            dropout: 0.0,
            rng: None,
            stats: Vec::new(),
        }
    }

    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = p;
        self.rng = Some(rng);
        self
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Folds the collected batch statistics into the running buffers of
    /// `params` and clears them.
    pub fn commit_running_stats(&mut self, params: &mut ModelParameters<S>) -> Result<()> {
        for (prefix, st) in self.stats.drain(..) {
            let mut mean = params.value(&format!("{prefix}.running_mean"))?.clone();
            let mut var = params.value(&format!("{prefix}.running_var"))?.clone();
            st.update_running(mean.data_mut(), var.data_mut(), BN_MOMENTUM);
            params.get_mut(&format!("{prefix}.running_mean"))?.value = mean;
            params.get_mut(&format!("{prefix}.running_var"))?.value = var;
        }
        Ok(())
    }

    pub fn pending_stats(&self) -> usize {
        self.stats.len()
    }

    fn dropout_var(&mut self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        match (&mut self.rng, self.mode) {
            (Some(rng), Mode::Train) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

pub(crate) fn init_linear<S: Real>(p: &mut ModelParameters<S>, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.weight"), kaiming_uniform(&[d_in, d_out], d_in, rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
}

pub(crate) fn init_conv<S: Real>(
    p: &mut ModelParameters<S>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    p.insert(format!("{name}.weight"), kaiming_uniform(&[c_out, c_in, k], c_in * k, rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

pub(crate) fn init_norm<S: Real>(p: &mut ModelParameters<S>, name: &str, c: usize) {
    p.insert(format!("{name}.gamma"), Tensor::full(&[c], S::one()));
    p.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
}

pub(crate) fn init_batch_norm<S: Real>(p: &mut ModelParameters<S>, name: &str, c: usize) {
    init_norm(p, name, c);
    p.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
    p.insert_buffer(format!("{name}.running_var"), Tensor::full(&[c], S::one()));
}

pub(crate) fn linear<S: Real>(g: &mut Graph<S>, p: &ModelParameters<S>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

pub(crate) fn layer_norm<S: Real>(g: &mut Graph<S>, p: &ModelParameters<S>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(p, &format!("{name}.gamma"))?;
    let beta = g.param(p, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Batch norm over a list of per-clip `C x T_i` tensors. In training mode
/// the statistics span every frame of every clip in the batch.
pub(crate) fn batch_norm<S: Real>(
    g: &mut Graph<S>,
    p: &ModelParameters<S>,
    name: &str,
    xs: &[Var],
    fwd: &mut Forward<S>,
) -> Result<Vec<Var>> {
    let gamma = g.param(p, &format!("{name}.gamma"))?;
    let beta = g.param(p, &format!("{name}.beta"))?;
    if fwd.is_train() {
        let joined = if xs.len() == 1 { xs[0] } else { g.concat(xs, 1)? };
        let (y, stats) = g.batch_norm_1d_train(joined, gamma, beta, BN_EPS)?;
        fwd.stats.push((name.to_string(), stats));
        if xs.len() == 1 {
            return Ok(vec![y]);
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut start = 0;
        for &x in xs {
            let n = g.shape(x)[1];
            out.push(g.slice_cols(y, start, start + n)?);
            start += n;
        }
        Ok(out)
    } else {
        let mean = p.value(&format!("{name}.running_mean"))?.data().to_vec();
        let var = p.value(&format!("{name}.running_var"))?.data().to_vec();
        xs.iter()
            .map(|&x| g.batch_norm_1d_eval(x, gamma, beta, &mean, &var, BN_EPS))
            .collect()
    }
}
