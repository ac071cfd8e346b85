// SPDX-License-Identifier: Apache-2.0

//! Attentive fusion of two small frame sequences, printing the score matrix
//! and the fused rows next to Add and Concat fusion.
//!
//! cargo run --example attentive_fusion

use fusepath::model::fusion::{add_fuse, attentive_fuse, concat_fuse};
use fusepath_autodiff::{Graph, ModelParameters, Tensor};

fn show(name: &str, t: &Tensor<f64>) {
    println!("{name}:");
    for i in 0..t.shape()[0] {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{v:7.3}")).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> fusepath_autodiff::Result<()> {
    let h_t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])?;
    let h_w = Tensor::from_rows(&[vec![0.5, -0.5], vec![2.0, 0.0], vec![0.0, 1.5]])?;
    let mut p = ModelParameters::new();
    p.insert("fusion.q.weight", Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.5, 1.0]])?);
    p.insert("fusion.q.bias", Tensor::zeros(&[2]));
    p.insert("fusion.k.weight", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?);
    p.insert("fusion.k.bias", Tensor::zeros(&[2]));

    let mut g = Graph::<f64>::inference();
    let (t, w) = (g.constant(h_t), g.constant(h_w));
    let f = attentive_fuse(&mut g, &p, t, w)?;
    show("scores", g.value(f.scores));
    show("attention h_r", g.value(f.h_r));
    let a = add_fuse(&mut g, &p, t, w)?;
    show("add", g.value(a));
    let c = concat_fuse(&mut g, t, w)?;
    show("concat", g.value(c));
    Ok(())
}
