// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes in inference graphs, so
//! it stays independent of every backward rule it is used to verify.

pub mod suite;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ModelParameters;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over entries whose gradient is not near zero.
    pub max_rel_err: f64,
    /// Largest absolute error over all entries.
    pub max_abs_err: f64,
    pub worst: String,
    pub checked: usize,
    failures: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares autodiff gradients of a scalar objective with central
/// differences of step `h` for every trainable entry of `params`.
///
/// An entry passes when its relative error is below `rel_tol` or its
/// absolute error is below `abs_tol`.
pub fn check_gradients<F>(
    params: &ModelParameters<f64>,
    objective: F,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ModelParameters<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = objective(&mut g, params)?;
    g.backward(loss)?;
    let mut probe = params.clone();
    let eval = |p: &ModelParameters<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = objective(&mut g, p)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: String::new(),
        checked: 0,
        failures: 0,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let n = params.value(&name)?.len();
        let analytic: Vec<f64> = g.param_grad(&name).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        for i in 0..n {
            let orig = params.value(&name)?.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs >= abs_tol {
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
                }
                if rel >= rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}
