// SPDX-License-Identifier: Apache-2.0

//! Stage-1 single-path training, stage-2 fused fine-tuning, the end-to-end
//! baseline, deterministic batching and model checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fusepath_autodiff::checkpoint::{self, CheckpointMeta};
use fusepath_autodiff::rng::stream;
use fusepath_autodiff::{adam_step, AdamState, Graph, ModelParameters, Tensor};
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::dataset::Split;
use crate::error::{FuseError, Result};
use crate::metrics::{argmax, infer};
use crate::model::{ClipInput, Forward, FusionStyle, ModelKind, Network};

/// A padded mini-batch. Waveforms and MFCC matrices are zero-padded to the
/// longest clip; the lengths mark the valid prefix of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// `B x max_samples`.
    pub waves: Vec<f32>,
    pub max_samples: usize,
    pub wave_len: Vec<usize>,
    /// `B x max_frames x features`.
    pub mfcc: Vec<f32>,
    pub max_frames: usize,
    pub features: usize,
    /// Per clip, `true` for real frames and `false` for padding.
    pub frame_mask: Vec<Vec<bool>>,
}

impl Batch {
    fn build(corpus: &Corpus, indices: &[usize]) -> Self {
        let clips: Vec<_> = indices.iter().map(|&i| &corpus.clips[i]).collect();
        let max_samples = clips.iter().map(|c| c.wave.len()).max().unwrap_or(0);
        let max_frames = clips.iter().map(|c| c.frames).max().unwrap_or(0);
        let features = clips.first().map_or(0, |c| c.features);
        let mut waves = vec![0.0; clips.len() * max_samples];
        let mut mfcc = vec![0.0; clips.len() * max_frames * features];
        for (b, c) in clips.iter().enumerate() {
            waves[b * max_samples..b * max_samples + c.wave.len()].copy_from_slice(&c.wave);
            let off = b * max_frames * features;
            mfcc[off..off + c.mfcc.len()].copy_from_slice(&c.mfcc);
        }
        Self {
            indices: indices.to_vec(),
            labels: clips.iter().map(|c| c.label).collect(),
            waves,
            max_samples,
            wave_len: clips.iter().map(|c| c.wave.len()).collect(),
            mfcc,
            max_frames,
            features,
            frame_mask: clips.iter().map(|c| (0..max_frames).map(|t| t < c.frames).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Padded `max_frames x features` MFCC of batch row `b`.
    pub fn padded_mfcc(&self, b: usize) -> Tensor<f32> {
        let n = self.max_frames * self.features;
        Tensor::new(&[self.max_frames, self.features], self.mfcc[b * n..(b + 1) * n].to_vec()).expect("shape")
    }

    /// Encoder inputs with the padding stripped, so every clip is encoded
    /// exactly as it would be on its own.
    pub fn inputs(&self) -> Vec<ClipInput<f32>> {
        (0..self.len())
            .map(|b| {
                let frames = self.frame_mask[b].iter().filter(|&&m| m).count();
                let off = b * self.max_frames * self.features;
                let wave = &self.waves[b * self.max_samples..b * self.max_samples + self.wave_len[b]];
                ClipInput {
                    mfcc: Tensor::new(&[frames, self.features], self.mfcc[off..off + frames * self.features].to_vec())
                        .expect("shape"),
                    wave: Tensor::new(&[1, wave.len()], wave.to_vec()).expect("shape"),
                }
            })
            .collect()
    }
}

/// Shuffles `items` with a stream keyed by `(seed, epoch)` and cuts it into
/// padded batches of at most `batch_size` clips.
pub fn make_batches(corpus: &Corpus, items: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
    let mut order = items.to_vec();
    order.shuffle(&mut stream(seed, &format!("data_order/{epoch}")));
    order.chunks(batch_size.max(1)).map(|c| Batch::build(corpus, c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| FuseError::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Settings for one call of [`fit`].
#[derive(Debug, Clone)]
pub struct Schedule {
    pub stage: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub eval_chunk: usize,
}

impl Schedule {
    pub fn new(cfg: &RunConfig, stage: &str, learning_rate: f64, epochs: usize) -> Self {
        Self {
            stage: stage.to_string(),
            learning_rate,
            epochs,
            batch_size: cfg.train.batch_size,
            dropout: cfg.train.dropout,
            seed: cfg.seed,
            eval_chunk: cfg.eval.batch_size,
        }
    }
}

/// One optimiser step on a batch; returns `(loss, correct predictions)`.
pub fn train_step(
    net: &Network,
    params: &mut ModelParameters<f32>,
    adam: &mut AdamState<f32>,
    batch: &Batch,
    fwd: &mut Forward<f32>,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, params, &batch.inputs(), fwd)?;
    let loss = g.cross_entropy(out.logits, &batch.labels)?;
    let logits = g.value(out.logits);
    let correct = (0..batch.len()).filter(|&b| argmax(logits.row(b)) == batch.labels[b]).count();
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    g.accumulate_param_grads(params);
    fwd.commit_running_stats(params)?;
    adam_step(params, adam)?;
    Ok((value, correct))
}

/// Eval-mode accuracy on `indices`, `None` when empty.
pub fn accuracy(
    net: &Network,
    params: &ModelParameters<f32>,
    corpus: &Corpus,
    indices: &[usize],
    chunk: usize,
) -> Result<Option<f64>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let out = infer(net, params, corpus, indices, chunk)?;
    let correct = out.iter().filter(|o| o.prediction == corpus.clips[o.index].label).count();
    Ok(Some(correct as f64 / indices.len() as f64))
}

/// Eval-mode mean cross-entropy on `indices`.
pub fn mean_loss(
    net: &Network,
    params: &ModelParameters<f32>,
    corpus: &Corpus,
    indices: &[usize],
    chunk: usize,
) -> Result<f64> {
    let out = infer(net, params, corpus, indices, chunk)?;
    let mut total = 0.0;
    for o in &out {
        let mut g: Graph<f32> = Graph::inference();
        let l = g.constant(Tensor::new(&[1, o.logits.len()], o.logits.clone())?);
        let ce = g.cross_entropy(l, &[corpus.clips[o.index].label])?;
        total += g.value(ce).item() as f64;
    }
    Ok(total / out.len().max(1) as f64)
}

/// Adam training of every trainable parameter on the train split, one log
/// record per epoch.
pub fn fit(
    net: &Network,
    params: &mut ModelParameters<f32>,
    corpus: &Corpus,
    sched: &Schedule,
    log: &mut TrainLog,
) -> Result<()> {
    let train = corpus.require_split(Split::Train)?;
    let val = corpus.split_indices(Split::Val);
    if let Some(c) = train.iter().map(|&i| corpus.clips[i].label).find(|&l| l >= net.head.n_classes) {
        return Err(FuseError::Data(format!("label {c} outside {} classes", net.head.n_classes)));
    }
    let mut adam = AdamState::new(sched.learning_rate);
    let mut fwd = Forward::train().with_dropout(sched.dropout, stream(sched.seed, &format!("dropout/{}", sched.stage)));
    for epoch in 0..sched.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in make_batches(corpus, &train, sched.batch_size, sched.seed, epoch) {
            let (loss, ok) = train_step(net, params, &mut adam, &batch, &mut fwd)?;
            loss_sum += loss * batch.len() as f64;
            correct += ok;
        }
        let val_acc = accuracy(net, params, corpus, &val, sched.eval_chunk)?;
        let rec = EpochRecord {
            stage: sched.stage.clone(),
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {} loss {:.4} train_acc {:.3} val_acc {:?}",
            rec.stage, rec.epoch, rec.mean_loss, rec.train_acc, rec.val_acc
        );
        log.records.push(rec);
    }
    Ok(())
}

/// Output of a training run: the network shape, its parameters and the log.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: Network,
    pub params: ModelParameters<f32>,
    pub log: TrainLog,
}

pub fn stage_tag(kind: ModelKind, strategy_e2e: bool) -> String {
    match (kind, strategy_e2e) {
        (ModelKind::Tdnn | ModelKind::Acoustic, _) => format!("stage1-{kind}"),
        (ModelKind::Fusion(s), false) => format!("stage2-{s}"),
        (ModelKind::Fusion(s), true) => format!("end_to_end-{s}"),
    }
}

/// Trains one encoder path with its own head (`kind` is `Tdnn` or
/// `Acoustic`).
pub fn stage1_train(cfg: &RunConfig, corpus: &Corpus, kind: ModelKind) -> Result<Trained> {
    let lr = match kind {
        ModelKind::Tdnn => cfg.train.lr_tdnn_stage1,
        ModelKind::Acoustic => cfg.train.lr_acoustic_stage1,
        ModelKind::Fusion(_) => return Err(FuseError::Config("stage 1 trains a single path".into())),
    };
    let net = cfg.network(kind, corpus.n_classes());
    let mut params = net.init(cfg.seed);
    let mut log = TrainLog::default();
    let sched = Schedule::new(cfg, &stage_tag(kind, false), lr, cfg.train.epochs_stage1);
    fit(&net, &mut params, corpus, &sched, &mut log)?;
    Ok(Trained { net, params, log })
}

/// Fresh fused model whose encoders are overwritten with the stage-1
/// weights, running statistics included.
pub fn stage2_init(
    cfg: &RunConfig,
    n_classes: usize,
    style: FusionStyle,
    tdnn: &ModelParameters<f32>,
    acoustic: &ModelParameters<f32>,
) -> Result<(Network, ModelParameters<f32>)> {
    let net = cfg.network(ModelKind::Fusion(style), n_classes);
    let mut params: ModelParameters<f32> = net.init(cfg.seed);
    params.overlay(tdnn, "tdnn.")?;
    params.overlay(acoustic, "acoustic.")?;
    Ok((net, params))
}

/// Stage 2: fine-tunes the whole fused model at `lr_stage2`.
pub fn stage2_finetune(
    cfg: &RunConfig,
    corpus: &Corpus,
    style: FusionStyle,
    tdnn: &ModelParameters<f32>,
    acoustic: &ModelParameters<f32>,
) -> Result<Trained> {
    let (net, mut params) = stage2_init(cfg, corpus.n_classes(), style, tdnn, acoustic)?;
    let mut log = TrainLog::default();
    let kind = ModelKind::Fusion(style);
    let sched = Schedule::new(cfg, &stage_tag(kind, false), cfg.train.lr_stage2, cfg.train.epochs_stage2);
    fit(&net, &mut params, corpus, &sched, &mut log)?;
    Ok(Trained { net, params, log })
}

/// Baseline: the fused model trained jointly from scratch.
pub fn end_to_end_train(cfg: &RunConfig, corpus: &Corpus, style: FusionStyle) -> Result<Trained> {
    let kind = ModelKind::Fusion(style);
    let net = cfg.network(kind, corpus.n_classes());
    let mut params = net.init(cfg.seed);
    let mut log = TrainLog::default();
    let sched = Schedule::new(cfg, &stage_tag(kind, true), cfg.train.lr_end_to_end, cfg.train.epochs_end_to_end);
    fit(&net, &mut params, corpus, &sched, &mut log)?;
    Ok(Trained { net, params, log })
}

/// Writes `params` with a sidecar carrying the network shape and the
/// resolved config. `head` optionally goes to its own file, referenced from
/// the sidecar.
pub fn save_model(
    path: &Path,
    net: &Network,
    params: &ModelParameters<f32>,
    head: Option<(&Path, &ModelParameters<f32>)>,
    cfg: &RunConfig,
    stage: &str,
    epoch: usize,
) -> Result<()> {
    let mut extra = serde_json::Map::new();
    extra.insert("network".into(), serde_json::to_value(net).expect("network serialises"));
    extra.insert("config".into(), serde_json::Value::String(cfg.to_toml()));
    let meta = |extra| CheckpointMeta {
        config_hash: cfg.hash(),
        stage: stage.to_string(),
        epoch,
        extra,
    };
    if let Some((head_path, head_params)) = head {
        let name = head_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        extra.insert("head_checkpoint".into(), serde_json::Value::String(name));
        checkpoint::save(head_path, head_params, &meta(serde_json::Map::new()))?;
    }
    checkpoint::save(path, params, &meta(extra))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub net: Network,
    pub params: ModelParameters<f32>,
    pub config: RunConfig,
    pub meta: CheckpointMeta,
}

/// Loads a checkpoint written by [`save_model`], merging a separate head
/// file when the sidecar names one.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (mut params, meta) = checkpoint::load(path)?;
    let bad = |m: &str| FuseError::Model(fusepath_autodiff::AutodiffError::Checkpoint(format!("{}: {m}", path.display())));
    let net: Network = meta
        .extra
        .get("network")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| bad("sidecar lacks a network description"))?;
    let text = meta
        .extra
        .get("config")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("sidecar lacks the resolved config"))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut config = RunConfig::from_toml_str(text, &base)?;
    // the snapshot stores paths already resolved
    config.base_dir = PathBuf::new();
    if let Some(head) = meta.extra.get("head_checkpoint").and_then(|v| v.as_str()) {
        let (h, _) = checkpoint::load(&base.join(head))?;
        params.merge(h);
    }
    // the container does not record which entries are buffers; the network
    // layout does
    let expected: ModelParameters<f32> = net.init(0);
    for (name, p) in expected.iter() {
        let found = params.get_mut(name)?;
        found.trainable = p.trainable;
        if found.value.shape() != p.value.shape() {
            return Err(FuseError::Model(fusepath_autodiff::AutodiffError::ParameterShape {
                name: name.clone(),
                expected: p.value.shape().to_vec(),
                found: found.value.shape().to_vec(),
            }));
        }
    }
    Ok(LoadedModel {
        net,
        params,
        config,
        meta,
    })
}
