// SPDX-License-Identifier: Apache-2.0

//! Dense tensors with reverse-mode automatic differentiation, an Adam
//! optimizer and a flat checkpoint container.
//!
//! Graphs are built eagerly: every op computes its value immediately and
//! records what it needs for the backward sweep.
//!
//! ```
//! use fusepath_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.variable(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = g.sum(w).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

mod adam;
pub mod checkpoint;
mod error;
pub mod fdcheck;
mod graph;
mod params;
mod real;
pub mod rng;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{AutodiffError, Result};
pub use graph::{BatchStats, ConvSpec, Graph, Var};
pub use params::{kaiming_uniform, ModelParameters, Parameter};
pub use real::Real;
pub use tensor::Tensor;
