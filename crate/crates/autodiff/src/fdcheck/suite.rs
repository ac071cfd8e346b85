// SPDX-License-Identifier: Apache-2.0

//! Randomized finite-difference cases for every differentiable primitive.
//!
//! Kept in the library so downstream crates can fold these into their own
//! gradient suites next to their composite blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, GradCheck};
use crate::error::Result;
use crate::graph::{ConvSpec, Graph, Var};
use crate::params::ModelParameters;
use crate::rng::stream;
use crate::tensor::Tensor;

pub type Objective = Box<dyn Fn(&mut Graph<f64>, &ModelParameters<f64>) -> Result<Var>>;

/// One named check: parameters to perturb and a scalar objective over them.
pub struct Case {
    pub name: String,
    pub params: ModelParameters<f64>,
    pub objective: Objective,
}

impl Case {
    pub fn new(name: impl Into<String>, params: ModelParameters<f64>, objective: Objective) -> Self {
        Self {
            name: name.into(),
            params,
            objective,
        }
    }

    /// Step 1e-4, relative tolerance 1e-4, entries with absolute error
    /// below 1e-6 always pass.
    pub fn check(&self) -> Result<GradCheck> {
        check_gradients(&self.params, &self.objective, 1e-4, 1e-4, 1e-6)
    }
}

/// Uniform entries in [-1, 1).
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Fixed non-symmetric projection to a scalar, so the objective depends on
/// every output entry with a distinct weight.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect())?;
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

pub fn params_from(entries: Vec<(&str, Tensor<f64>)>) -> ModelParameters<f64> {
    let mut p = ModelParameters::new();
    for (n, t) in entries {
        p.insert(n, t);
    }
    p
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add_mul",
    "broadcasts",
    "activations",
    "softmax_rows",
    "layer_norm",
    "batch_norm_train",
    "batch_norm_eval",
    "reductions",
    "reshaping",
    "linear",
    "conv1d",
    "dropout",
    "cross_entropy",
    "mlp",
];

/// Builds the named primitive case with inputs drawn from `seed`.
pub fn primitive(name: &str, seed: u64) -> Option<Case> {
    let mut r = stream(seed, name);
    let (params, objective): (ModelParameters<f64>, Objective) = match name {
        "matmul" => (
            params_from(vec![("a", rand_tensor(&mut r, &[3, 4])), ("b", rand_tensor(&mut r, &[4, 2]))]),
            Box::new(|g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let y = g.matmul(a, b)?;
                weighted_sum(g, y)
            }),
        ),
        "add_mul" => (
            params_from(vec![("a", rand_tensor(&mut r, &[3, 3])), ("b", rand_tensor(&mut r, &[3, 3]))]),
            Box::new(|g, p| {
                let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                let s = g.add(a, b)?;
                let y = g.mul(s, a)?;
                let y = g.scale(y, -1.5)?;
                weighted_sum(g, y)
            }),
        ),
        "broadcasts" => (
            params_from(vec![
                ("x", rand_tensor(&mut r, &[3, 4])),
                ("r", rand_tensor(&mut r, &[4])),
                ("c", rand_tensor(&mut r, &[3])),
                ("s", rand_tensor(&mut r, &[3, 1])),
            ]),
            Box::new(|g, p| {
                let x = g.param(p, "x")?;
                let (rv, cv, sv) = (g.param(p, "r")?, g.param(p, "c")?, g.param(p, "s")?);
                let y = g.add_row_vec(x, rv)?;
                let y = g.add_col_vec(y, cv)?;
                let y = g.mul_col_vec(y, sv)?;
                weighted_sum(g, y)
            }),
        ),
        "activations" => (
            params_from(vec![("x", rand_tensor(&mut r, &[4, 5]))]),
            Box::new(|g, p| {
                let x = g.param(p, "x")?;
                let a = g.relu(x)?;
                let b = g.sigmoid(x)?;
                let c = g.tanh(x)?;
                let y = g.add(a, b)?;
                let y = g.mul(y, c)?;
                weighted_sum(g, y)
            }),
        ),
        "softmax_rows" => (
            params_from(vec![("x", rand_tensor(&mut r, &[3, 4]))]),
            Box::new(|g, p| {
                let x = g.param(p, "x")?;
                let y = g.softmax_rows(x)?;
                weighted_sum(g, y)
            }),
        ),
        "layer_norm" => (
            params_from(vec![
                ("x", rand_tensor(&mut r, &[3, 5])),
                ("g", rand_tensor(&mut r, &[5])),
                ("b", rand_tensor(&mut r, &[5])),
            ]),
            Box::new(|g, p| {
                let (x, ga, be) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
                let y = g.layer_norm(x, ga, be, 1e-5)?;
                weighted_sum(g, y)
            }),
        ),
        "batch_norm_train" => (
            params_from(vec![
                ("x", rand_tensor(&mut r, &[3, 6])),
                ("g", rand_tensor(&mut r, &[3])),
                ("b", rand_tensor(&mut r, &[3])),
            ]),
            Box::new(|g, p| {
                let (x, ga, be) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
                let (y, _) = g.batch_norm_1d_train(x, ga, be, 1e-5)?;
                weighted_sum(g, y)
            }),
        ),
        "batch_norm_eval" => (
            params_from(vec![
                ("x", rand_tensor(&mut r, &[3, 6])),
                ("g", rand_tensor(&mut r, &[3])),
                ("b", rand_tensor(&mut r, &[3])),
            ]),
            Box::new(|g, p| {
                let (x, ga, be) = (g.param(p, "x")?, g.param(p, "g")?, g.param(p, "b")?);
                let y = g.batch_norm_1d_eval(x, ga, be, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
                weighted_sum(g, y)
            }),
        ),
        "reductions" => (
            params_from(vec![("x", rand_tensor(&mut r, &[4, 3]))]),
            Box::new(|g, p| {
                let x = g.param(p, "x")?;
                let a = g.mean_over_axis(x, 0)?;
                let b = g.mean_over_axis(x, 1)?;
                let m = g.masked_mean_rows(x, &[true, false, true, true])?;
                let s1 = weighted_sum(g, a)?;
                let s2 = weighted_sum(g, b)?;
                let s3 = weighted_sum(g, m)?;
                let t = g.add(s1, s2)?;
                g.add(t, s3)
            }),
        ),
        "reshaping" => (
            params_from(vec![("x", rand_tensor(&mut r, &[4, 3])), ("y", rand_tensor(&mut r, &[4, 2]))]),
            Box::new(|g, p| {
                let (x, y) = (g.param(p, "x")?, g.param(p, "y")?);
                let c = g.concat(&[x, y], 1)?;
                let t = g.transpose(c)?;
                let s = g.slice_rows(t, 1, 4)?;
                let s = g.slice_cols(s, 1, 4)?;
                let xt = g.transpose(x)?;
                let xt = g.slice_cols(xt, 0, 3)?;
                let r0 = g.concat(&[s, xt], 0)?;
                weighted_sum(g, r0)
            }),
        ),
        "linear" => (
            params_from(vec![
                ("x", rand_tensor(&mut r, &[3, 4])),
                ("w", rand_tensor(&mut r, &[4, 2])),
                ("b", rand_tensor(&mut r, &[2])),
            ]),
            Box::new(|g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.linear(x, w, b)?;
                weighted_sum(g, y)
            }),
        ),
        "conv1d" => (
            params_from(vec![
                ("x", rand_tensor(&mut r, &[2, 8])),
                ("w", rand_tensor(&mut r, &[3, 2, 3])),
                ("b", rand_tensor(&mut r, &[3])),
            ]),
            Box::new(|g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = g.conv1d(x, w, b, ConvSpec::same(3, 1))?;
                let z = g.conv1d(x, w, b, ConvSpec { stride: 2, dilation: 2, padding: 1 })?;
                let s1 = weighted_sum(g, y)?;
                let s2 = weighted_sum(g, z)?;
                g.add(s1, s2)
            }),
        ),
        "dropout" => {
            // the mask is drawn from a fixed seed so every forward pass agrees
            let p = params_from(vec![("x", rand_tensor(&mut r, &[3, 5]))]);
            (
                p,
                Box::new(move |g, p| {
                    let x = g.param(p, "x")?;
                    let mut mask_rng = stream(seed, "dropout-mask");
                    let y = g.dropout(x, 0.3, &mut mask_rng)?;
                    weighted_sum(g, y)
                }),
            )
        }
        "cross_entropy" => (
            params_from(vec![("z", rand_tensor(&mut r, &[3, 4]))]),
            Box::new(|g, p| {
                let z = g.param(p, "z")?;
                g.cross_entropy(z, &[0, 3, 1])
            }),
        ),
        "mlp" => (
            params_from(vec![
                ("x", rand_tensor(&mut r, &[5, 4])),
                ("w1", rand_tensor(&mut r, &[4, 6])),
                ("b1", rand_tensor(&mut r, &[6])),
                ("w2", rand_tensor(&mut r, &[6, 3])),
                ("b2", rand_tensor(&mut r, &[3])),
            ]),
            Box::new(|g, p| {
                let x = g.param(p, "x")?;
                let (w1, b1) = (g.param(p, "w1")?, g.param(p, "b1")?);
                let (w2, b2) = (g.param(p, "w2")?, g.param(p, "b2")?);
                let h = g.linear(x, w1, b1)?;
                let h = g.tanh(h)?;
                let z = g.linear(h, w2, b2)?;
                g.cross_entropy(z, &[0, 1, 2, 1, 0])
            }),
        ),
        _ => return None,
    };
    Some(Case::new(name, params, objective))
}

/// Every primitive case for seeds `0..n_seeds`.
pub fn primitive_cases(n_seeds: u64) -> Vec<Case> {
    let mut out = Vec::new();
    for name in PRIMITIVES {
        for seed in 0..n_seeds {
            out.push(primitive(name, seed).expect("listed primitive"));
        }
    }
    out
}
