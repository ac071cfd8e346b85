// SPDX-License-Identifier: Apache-2.0

//! Single path versus fusion, fusion styles, and training strategies on one
//! corpus. Cells sharing a configuration are trained once: both stage-1
//! encoders feed every stage-2 cell, and the attention multi-stage cell
//! appears in all three groups.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Strategy};
use crate::corpus::Corpus;
use crate::dataset::Split;
use crate::error::{FuseError, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{FusionStyle, ModelKind};
use crate::train::{end_to_end_train, save_model, stage1_train, stage2_finetune, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub kind: ModelKind,
    pub strategy: Strategy,
}

impl Cell {
    pub fn name(&self) -> String {
        match self.kind {
            ModelKind::Fusion(_) => format!("{}_{}", self.kind, self.strategy),
            _ => self.kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub test: MetricsReport,
    pub train_accuracy: f64,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `path`, `style` or `strategy`.
    pub group: String,
    pub cell: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: BTreeMap<String, CellResult>,
    pub summary: Vec<SummaryRow>,
}

impl AblationReport {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("group,cell,accuracy,precision,recall,f1\n");
        for r in &self.summary {
            s += &format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.group, r.cell, r.accuracy, r.precision, r.recall, r.f1
            );
        }
        s
    }

    pub fn cell(&self, kind: ModelKind, strategy: Strategy) -> Option<&CellResult> {
        self.cells.get(&Cell { kind, strategy }.name())
    }
}

/// Table rows in report order, grouped as single-path versus fusion,
/// fusion style, and training strategy.
pub fn layout() -> Vec<(&'static str, Cell)> {
    let ms = Strategy::MultiStage;
    let att = ModelKind::Fusion(FusionStyle::Attention);
    let mut rows = vec![
        ("path", Cell { kind: ModelKind::Tdnn, strategy: ms }),
        ("path", Cell { kind: ModelKind::Acoustic, strategy: ms }),
        ("path", Cell { kind: att, strategy: ms }),
    ];
    for style in FusionStyle::ALL {
        rows.push(("style", Cell { kind: ModelKind::Fusion(style), strategy: ms }));
    }
    rows.push(("strategy", Cell { kind: att, strategy: Strategy::EndToEnd }));
    rows.push(("strategy", Cell { kind: att, strategy: ms }));
    rows
}

fn summarise(cfg: &RunConfig, corpus: &Corpus, t: &Trained) -> Result<CellResult> {
    let test = evaluate(&t.net, &t.params, corpus, Split::Test, cfg.eval.averaging, cfg.eval.batch_size)?;
    let train = evaluate(&t.net, &t.params, corpus, Split::Train, cfg.eval.averaging, cfg.eval.batch_size)?;
    let (Some(first), Some(last)) = (t.log.records.first(), t.log.records.last()) else {
        return Err(FuseError::Config("ablation needs at least one epoch per stage".into()));
    };
    Ok(CellResult {
        cell: String::new(),
        test,
        train_accuracy: train.accuracy,
        first_epoch_loss: first.mean_loss,
        final_epoch_loss: last.mean_loss,
    })
}

/// Trains every distinct cell of [`layout`]. With `out_dir` set, each cell's
/// checkpoint, log and metrics are written there along with `report.json`
/// and `summary.csv`.
pub fn ablation_matrix(cfg: &RunConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<AblationReport> {
    let rows = layout();
    let mut cells: BTreeMap<String, CellResult> = BTreeMap::new();
    let save = |cell: Cell, t: &Trained, cells: &mut BTreeMap<String, CellResult>| -> Result<()> {
        let name = cell.name();
        let mut r = summarise(cfg, corpus, t)?;
        r.cell = name.clone();
        info!("ablation cell {name}: test accuracy {:.3}", r.test.accuracy);
        if let Some(dir) = out_dir {
            let stage = t.log.last().map(|l| l.stage.clone()).unwrap_or_default();
            let epochs = t.log.records.len();
            save_model(&dir.join(format!("{name}.fpck")), &t.net, &t.params, None, cfg, &stage, epochs)?;
            t.log.write(&dir.join(format!("{name}.log.jsonl")))?;
            let json = serde_json::to_string_pretty(&r.test).expect("report serialises");
            std::fs::write(dir.join(format!("{name}.metrics.json")), json + "\n")
                .map_err(|e| FuseError::io(dir, e))?;
        }
        cells.insert(name, r);
        Ok(())
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
    }
    let ms = Strategy::MultiStage;
    let tdnn = stage1_train(cfg, corpus, ModelKind::Tdnn)?;
    save(Cell { kind: ModelKind::Tdnn, strategy: ms }, &tdnn, &mut cells)?;
    let acoustic = stage1_train(cfg, corpus, ModelKind::Acoustic)?;
    save(Cell { kind: ModelKind::Acoustic, strategy: ms }, &acoustic, &mut cells)?;
    for style in FusionStyle::ALL {
        let t = stage2_finetune(cfg, corpus, style, &tdnn.params, &acoustic.params)?;
        save(Cell { kind: ModelKind::Fusion(style), strategy: ms }, &t, &mut cells)?;
    }
    let e2e = end_to_end_train(cfg, corpus, FusionStyle::Attention)?;
    save(
        Cell {
            kind: ModelKind::Fusion(FusionStyle::Attention),
            strategy: Strategy::EndToEnd,
        },
        &e2e,
        &mut cells,
    )?;

    let summary = rows
        .iter()
        .map(|(group, cell)| {
            let r = &cells[&cell.name()];
            SummaryRow {
                group: group.to_string(),
                cell: cell.name(),
                accuracy: r.test.accuracy,
                precision: r.test.precision,
                recall: r.test.recall,
                f1: r.test.f1,
            }
        })
        .collect();
    let report = AblationReport { cells, summary };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report).expect("report serialises");
        std::fs::write(dir.join("report.json"), json + "\n").map_err(|e| FuseError::io(dir, e))?;
        std::fs::write(dir.join("summary.csv"), report.summary_csv()).map_err(|e| FuseError::io(dir, e))?;
    }
    Ok(report)
}
