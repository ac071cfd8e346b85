// SPDX-License-Identifier: Apache-2.0

//! Accuracy, precision, recall and F1 from a confusion matrix, plus the
//! inference helpers behind evaluation and embedding export.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use fusepath_autodiff::{Graph, ModelParameters};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::dataset::Split;
use crate::error::{FuseError, Result};
use crate::model::{Forward, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Micro,
    Weighted,
}

impl FromStr for Averaging {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            "weighted" => Ok(Self::Weighted),
            _ => Err(format!("unknown averaging `{s}` (macro|micro|weighted)")),
        }
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Macro => "macro",
            Self::Micro => "micro",
            Self::Weighted => "weighted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Averaging used for `precision`, `recall` and `f1`.
    pub averaging: Averaging,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

/// Builds the report. Undefined precision or recall (zero denominator)
/// counts as 0.
pub fn report_from_confusion(confusion: &[Vec<u64>], labels: &[String], averaging: Averaging) -> MetricsReport {
    let c = confusion.len();
    let n: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|i| {
            let support: u64 = confusion[i].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[i]).sum();
            let precision = ratio(confusion[i][i], predicted);
            let recall = ratio(confusion[i][i], support);
            ClassMetrics {
                label: labels.get(i).cloned().unwrap_or_else(|| i.to_string()),
                precision,
                recall,
                f1: f1(precision, recall),
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c.max(1) as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n.max(1) as f64
    };
    let (macro_precision, macro_recall, macro_f1) = (mean(|m| m.precision), mean(|m| m.recall), mean(|m| m.f1));
    let accuracy = ratio(trace, n);
    let (precision, recall, f1_avg) = match averaging {
        Averaging::Macro => (macro_precision, macro_recall, macro_f1),
        // single-label: every miss is one false positive and one false negative
        Averaging::Micro => (accuracy, accuracy, accuracy),
        Averaging::Weighted => (weighted(|m| m.precision), weighted(|m| m.recall), weighted(|m| m.f1)),
    };
    MetricsReport {
        n,
        accuracy,
        macro_precision,
        macro_recall,
        macro_f1,
        averaging,
        precision,
        recall,
        f1: f1_avg,
        per_class,
        confusion: confusion.to_vec(),
    }
}

/// Micro-averaged recall computed from per-class counts, independent of
/// the accuracy formula.
pub fn micro_recall(confusion: &[Vec<u64>]) -> f64 {
    let tp: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    let fn_: u64 = (0..confusion.len())
        .map(|i| confusion[i].iter().sum::<u64>() - confusion[i][i])
        .sum();
    ratio(tp, tp + fn_)
}

/// Eval-mode outputs for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipOutput {
    pub index: usize,
    pub logits: Vec<f32>,
    pub embedding: Vec<f32>,
    pub prediction: usize,
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Eval-mode forward over `indices` in order, `chunk` clips per graph.
pub fn infer(
    net: &Network,
    params: &ModelParameters<f32>,
    corpus: &Corpus,
    indices: &[usize],
    chunk: usize,
) -> Result<Vec<ClipOutput>> {
    let mut out = Vec::with_capacity(indices.len());
    for group in indices.chunks(chunk.max(1)) {
        let inputs: Vec<_> = group.iter().map(|&i| corpus.clips[i].input()).collect();
        let mut g = Graph::inference();
        let res = net.forward(&mut g, params, &inputs, &mut Forward::eval())?;
        let logits = g.value(res.logits);
        let emb = g.value(res.pooled);
        for (r, &index) in group.iter().enumerate() {
            let l = logits.row(r).to_vec();
            out.push(ClipOutput {
                index,
                prediction: argmax(&l),
                logits: l,
                embedding: emb.row(r).to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn evaluate(
    net: &Network,
    params: &ModelParameters<f32>,
    corpus: &Corpus,
    split: Split,
    averaging: Averaging,
    chunk: usize,
) -> Result<MetricsReport> {
    let indices = corpus.split_indices(split);
    if indices.is_empty() {
        return Err(FuseError::Data(format!("split `{split}` is empty")));
    }
    let outputs = infer(net, params, corpus, &indices, chunk)?;
    let truth: Vec<usize> = indices.iter().map(|&i| corpus.clips[i].label).collect();
    let pred: Vec<usize> = outputs.iter().map(|o| o.prediction).collect();
    let confusion = confusion_matrix(&truth, &pred, net.head.n_classes);
    Ok(report_from_confusion(&confusion, &corpus.labels, averaging))
}

/// Writes `id,label,v_0..v_{F-1}` rows of pooled pre-head embeddings.
pub fn export_embeddings(
    net: &Network,
    params: &ModelParameters<f32>,
    corpus: &Corpus,
    split: Split,
    chunk: usize,
    path: &Path,
) -> Result<usize> {
    let indices = corpus.split_indices(split);
    let outputs = infer(net, params, corpus, &indices, chunk)?;
    let mut text = String::from("id,label");
    for j in 0..net.embedding_dim() {
        text += &format!(",v_{j}");
    }
    text.push('\n');
    for o in &outputs {
        let clip = &corpus.clips[o.index];
        text += &format!("{},{}", clip.id, corpus.labels[clip.label]);
        for v in &o.embedding {
            text += &format!(",{v}");
        }
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| FuseError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| FuseError::io(path, e))?;
    Ok(outputs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_computed_binary_case() {
        let r = report_from_confusion(&[vec![2, 0], vec![1, 1]], &labels(2), Averaging::Macro);
        assert!((r.accuracy - 0.75).abs() < 1e-12);
        assert!((r.macro_precision - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((r.macro_recall - 0.75).abs() < 1e-12);
        assert!((r.macro_f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let truth = [0, 1, 2, 2, 1];
        let r = report_from_confusion(&confusion_matrix(&truth, &truth, 3), &labels(3), Averaging::Macro);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn absent_classes_score_zero() {
        let r = report_from_confusion(&confusion_matrix(&[1, 1], &[1, 1], 3), &labels(3), Averaging::Macro);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert_eq!(r.per_class[0].precision, 0.0);
        assert_eq!(r.per_class[2].precision, 0.0);
        assert!((r.macro_recall - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_and_micro() {
        let m = [vec![2, 0], vec![1, 1]];
        let r = report_from_confusion(&m, &labels(2), Averaging::Micro);
        assert_eq!(r.recall, 0.75);
        let r = report_from_confusion(&m, &labels(2), Averaging::Weighted);
        // class supports 2 and 2
        assert!((r.recall - 0.75).abs() < 1e-12);
        assert!((r.precision - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
