// SPDX-License-Identifier: Apache-2.0

//! Command surface of the `fusepath` binary.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fusepath_autodiff::ModelParameters;
use log::info;
use serde::Serialize;

use crate::ablation::ablation_matrix;
use crate::audio::{cmvn, load_wav, mfcc, resample, write_feature_dump};
use crate::config::RunConfig;
use crate::corpus::{Corpus, MODEL_RATE};
use crate::dataset::{load_manifest, synthesize_corpus, Split, SynthSpec};
use crate::error::{FuseError, Result};
use crate::metrics::{evaluate, export_embeddings, Averaging};
use crate::model::ModelKind;
use crate::train::{end_to_end_train, load_model, save_model, stage1_train, stage2_finetune, Trained};

#[derive(Debug, Parser)]
#[command(name = "fusepath", version, about = "Dual-path voice pathology detection with attentive fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its manifest.
    Synth {
        /// TOML synthesis spec; overrides the preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// `binary` or `four-class`, used without --spec.
        #[arg(long, default_value = "binary")]
        preset: String,
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print MFCC shape and statistics for a WAV file.
    Features {
        #[arg(long)]
        wav: PathBuf,
        /// Write the CMVN-normalised matrix as an FMX1 dump.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 1: train one encoder path with its own head.
    TrainStage1 {
        /// `tdnn` or `acoustic`.
        #[arg(long)]
        path: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 2: reload both encoders and fine-tune the fused model.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tdnn_ckpt: PathBuf,
        #[arg(long)]
        acoustic_ckpt: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the fused model from scratch in one stage.
    TrainE2e {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the manifest recorded with the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        averaging: Option<String>,
        /// Defaults to `<ckpt>.<split>.metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the single-path, fusion-style and strategy comparisons.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write pooled pre-head embeddings as CSV.
    ExportEmb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| FuseError::Config(format!("unknown split `{s}` (train|val|test)")))
}

/// Loads a config, applies `--seed` and pins every path to its resolved
/// location.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.paths.manifest = cfg.manifest_path().display().to_string();
    cfg.paths.out_dir = cfg.out_dir().display().to_string();
    cfg.base_dir = PathBuf::new();
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Corpus> {
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.manifest_path());
    let m = load_manifest(&path)?;
    let corpus = Corpus::load(&m, &cfg.mfcc)?;
    if cfg.head.n_classes != 0 && cfg.head.n_classes != corpus.n_classes() {
        return Err(FuseError::Config(format!(
            "head.n_classes is {} but the manifest has {} labels",
            cfg.head.n_classes,
            corpus.n_classes()
        )));
    }
    Ok(corpus)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    manifest: String,
    outputs: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| FuseError::io(path, e))
}

/// Writes `<stem>.config.toml` and `<stem>.run.json` next to the outputs.
fn snapshot(cfg: &RunConfig, dir: &Path, stem: &str, command: &str, outputs: &[PathBuf]) -> Result<()> {
    write_text(&dir.join(format!("{stem}.config.toml")), &cfg.to_toml())?;
    let run = RunManifest {
        command,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        manifest: cfg.paths.manifest.clone(),
        outputs: outputs
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&run).expect("run manifest serialises");
    write_text(&dir.join(format!("{stem}.run.json")), &(json + "\n"))
}

fn save_trained(cfg: &RunConfig, t: &Trained, stem: &str, command: &str, separate_head: bool) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    let ckpt = dir.join(format!("{stem}.fpck"));
    let log_path = dir.join(format!("{stem}.log.jsonl"));
    let stage = t.log.last().map(|r| r.stage.clone()).unwrap_or_default();
    let epochs = t.log.records.len();
    let mut outputs = vec![ckpt.clone(), log_path.clone()];
    if separate_head {
        let head_path = dir.join(format!("{stem}_head.fpck"));
        let prefix = t.net.kind.encoder_prefix().unwrap_or("");
        let encoder = t.params.subset(prefix);
        let head: ModelParameters<f32> = t.params.subset("head.");
        save_model(&ckpt, &t.net, &encoder, Some((&head_path, &head)), cfg, &stage, epochs)?;
        outputs.push(head_path);
    } else {
        save_model(&ckpt, &t.net, &t.params, None, cfg, &stage, epochs)?;
    }
    t.log.write(&log_path)?;
    snapshot(cfg, &dir, stem, command, &outputs)?;
    info!("wrote {}", ckpt.display());
    Ok(ckpt)
}

/// Prints `line` to stdout.
fn say(line: impl AsRef<str>) {
    println!("{}", line.as_ref());
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            spec,
            preset,
            n_per_class,
            seed,
            out,
        } => {
            let mut s = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| FuseError::io(&path, e))?;
                    toml::from_str::<SynthSpec>(&text)
                        .map_err(|e| FuseError::Config(format!("{}: {}", path.display(), e.message().trim())))?
                }
                None => match preset.as_str() {
                    "binary" => SynthSpec::binary(n_per_class, 0),
                    "four-class" => SynthSpec::four_class(n_per_class, 0),
                    other => return Err(FuseError::Config(format!("unknown preset `{other}` (binary|four-class)"))),
                },
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let m = synthesize_corpus(&s, &out)?;
            say(format!(
                "clips={} classes={} manifest={}",
                m.entries.len(),
                m.n_classes(),
                out.join("manifest.jsonl").display()
            ));
        }
        Command::Features { wav, dump, config } => {
            let cfg = match config {
                Some(p) => load_config(&p, None)?,
                None => RunConfig::default(),
            };
            let clip = resample(&load_wav(&wav)?, MODEL_RATE)?;
            let raw = mfcc(&clip, &cfg.mfcc)?;
            let feat = cmvn(&raw);
            let n = raw.data().len() as f64;
            let mean = raw.data().iter().sum::<f64>() / n;
            let sd = (raw.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            say(format!(
                "frames={} features={} frame_rate={} mean={mean:.6} std={sd:.6}",
                raw.frames(),
                raw.features(),
                raw.frame_rate
            ));
            if let Some(d) = dump {
                write_feature_dump(&d, &feat)?;
            }
        }
        Command::TrainStage1 { path, config, seed } => {
            let cfg = load_config(&config, seed)?;
            let kind = match path.as_str() {
                "tdnn" => ModelKind::Tdnn,
                "acoustic" => ModelKind::Acoustic,
                other => return Err(FuseError::Config(format!("unknown path `{other}` (tdnn|acoustic)"))),
            };
            let corpus = load_corpus(&cfg, None)?;
            let t = stage1_train(&cfg, &corpus, kind)?;
            let ckpt = save_trained(&cfg, &t, &format!("stage1_{path}"), "train-stage1", true)?;
            say(format!("checkpoint={}", ckpt.display()));
        }
        Command::TrainStage2 {
            config,
            tdnn_ckpt,
            acoustic_ckpt,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let corpus = load_corpus(&cfg, None)?;
            let tdnn = load_model(&tdnn_ckpt)?;
            let acoustic = load_model(&acoustic_ckpt)?;
            let style = cfg.fusion.style;
            let t = stage2_finetune(&cfg, &corpus, style, &tdnn.params, &acoustic.params)?;
            let ckpt = save_trained(&cfg, &t, &format!("stage2_{style}"), "train-stage2", false)?;
            say(format!("checkpoint={}", ckpt.display()));
        }
        Command::TrainE2e { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let corpus = load_corpus(&cfg, None)?;
            let style = cfg.fusion.style;
            let t = end_to_end_train(&cfg, &corpus, style)?;
            let ckpt = save_trained(&cfg, &t, &format!("e2e_{style}"), "train-e2e", false)?;
            say(format!("checkpoint={}", ckpt.display()));
        }
        Command::Eval {
            ckpt,
            split,
            manifest,
            averaging,
            out,
        } => {
            let split = parse_split(&split)?;
            let m = load_model(&ckpt)?;
            let avg = match averaging {
                Some(a) => a.parse::<Averaging>().map_err(FuseError::Config)?,
                None => m.config.eval.averaging,
            };
            let corpus = load_corpus(&m.config, manifest.as_deref())?;
            let report = evaluate(&m.net, &m.params, &corpus, split, avg, m.config.eval.batch_size)?;
            let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
            let out = out.unwrap_or_else(|| {
                let mut s = ckpt.as_os_str().to_owned();
                s.push(format!(".{split}.metrics.json"));
                PathBuf::from(s)
            });
            write_text(&out, &json)?;
            print!("{json}");
        }
        Command::Ablate { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let corpus = load_corpus(&cfg, None)?;
            let dir = cfg.out_dir().join("ablation");
            let report = ablation_matrix(&cfg, &corpus, Some(&dir))?;
            snapshot(&cfg, &dir, "ablation", "ablate", &[dir.join("report.json"), dir.join("summary.csv")])?;
            print!("{}", report.summary_csv());
        }
        Command::ExportEmb {
            ckpt,
            out,
            split,
            manifest,
        } => {
            let split = parse_split(&split)?;
            let m = load_model(&ckpt)?;
            let corpus = load_corpus(&m.config, manifest.as_deref())?;
            let n = export_embeddings(&m.net, &m.params, &corpus, split, m.config.eval.batch_size, &out)?;
            say(format!("rows={n} dim={} out={}", m.net.embedding_dim(), out.display()));
        }
    }
    Ok(())
}
