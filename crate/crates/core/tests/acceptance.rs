// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria 1 to 8. Each criterion runs in isolation and prints
//! one PASS or FAIL line; the test fails if any criterion does.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fusepath::ablation::{layout, AblationReport};
use fusepath::audio::{dct_matrix, hz_to_mel, resample, AudioClip, MfccConfig};
use fusepath::config::{RunConfig, Strategy};
use fusepath::corpus::Corpus;
use fusepath::dataset::{synthesize_corpus, Split, SynthSpec};
use fusepath::metrics::{micro_recall, report_from_confusion, Averaging};
use fusepath::model::fusion::attentive_fuse;
use fusepath::model::gradsuite::composite_cases;
use fusepath::model::{FusionStyle, ModelKind};
use fusepath::train::{load_model, save_model, stage1_train, stage2_init};
use fusepath_autodiff::fdcheck::suite::{primitive_cases, rand_tensor};
use fusepath_autodiff::rng::stream;
use fusepath_autodiff::{Graph, ModelParameters, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fusepath"));
    c.env("FUSEPATH_LOG", "warn");
    c
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

// 1

fn gradient_suite() -> String {
    let start = Instant::now();
    let (mut checked, mut cases) = (0, 0);
    for case in primitive_cases(5).into_iter().chain(composite_cases(5)) {
        let r = case.check().unwrap();
        assert!(r.passed(), "{}: worst {} rel {:.2e}", case.name, r.worst, r.max_rel_err);
        checked += r.checked;
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1} s");
    format!("{cases} cases, {checked} entries, {secs:.1} s")
}

// 2

fn fusion_params(r: &mut ChaCha8Rng, d_t: usize, d_w: usize, d: usize) -> ModelParameters<f64> {
    let mut p = ModelParameters::new();
    p.insert("fusion.q.weight", rand_tensor(r, &[d_t, d]));
    p.insert("fusion.q.bias", rand_tensor(r, &[d]));
    p.insert("fusion.k.weight", rand_tensor(r, &[d_w, d]));
    p.insert("fusion.k.bias", rand_tensor(r, &[d]));
    p
}

fn fusion_structure() -> String {
    let (d_t, d_w, d) = (3, 4, 5);
    for seed in 0..20 {
        let mut r = stream(seed, "acceptance-fusion");
        let t = r.gen_range(1..9);
        let p = fusion_params(&mut r, d_t, d_w, d);
        let (tv, wv) = (rand_tensor(&mut r, &[t, d_t]), rand_tensor(&mut r, &[t, d_w]));
        let mut g = Graph::<f64>::inference();
        let (ht, hw) = (g.constant(tv.clone()), g.constant(wv.clone()));
        let f = attentive_fuse(&mut g, &p, ht, hw).unwrap();
        let sc = g.value(f.scores);
        for i in 0..t {
            let row = sc.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // the trailing columns of the fused matrix are h_w itself
        let hr = g.value(f.h_r);
        let hf = g.value(f.h_f);
        for i in 0..t {
            assert_eq!(&hr.row(i)[d_t..], wv.row(i));
            assert_eq!(&hr.row(i)[..d_t], hf.row(i));
        }
        if t == 1 {
            assert_eq!(sc.data(), &[1.0]);
            assert_eq!(hf, &tv);
        }
    }

    // single frame, exact
    let mut r = stream(99, "acceptance-fusion");
    let p = fusion_params(&mut r, d_t, d_w, d);
    let tv = rand_tensor(&mut r, &[1, d_t]);
    let mut g = Graph::<f64>::inference();
    let (ht, hw) = (g.constant(tv.clone()), g.constant(rand_tensor(&mut r, &[1, d_w])));
    let f = attentive_fuse(&mut g, &p, ht, hw).unwrap();
    assert_eq!(g.value(f.scores).data(), &[1.0]);
    assert_eq!(g.value(f.h_f), &tv);

    // zero query projection attends uniformly
    let t = 6;
    let mut p = fusion_params(&mut r, d_t, d_w, d);
    p.insert("fusion.q.weight", Tensor::zeros(&[d_t, d]));
    p.insert("fusion.q.bias", Tensor::zeros(&[d]));
    let tv = rand_tensor(&mut r, &[t, d_t]);
    let mut g = Graph::<f64>::inference();
    let (ht, hw) = (g.constant(tv.clone()), g.constant(rand_tensor(&mut r, &[t, d_w])));
    let f = attentive_fuse(&mut g, &p, ht, hw).unwrap();
    assert!(g.value(f.scores).data().iter().all(|v| (v - 1.0 / t as f64).abs() < 1e-6));
    for j in 0..d_t {
        let mean = (0..t).map(|i| tv.at(i, j)).sum::<f64>() / t as f64;
        for i in 0..t {
            assert!((g.value(f.h_f).at(i, j) - mean).abs() < 1e-6);
        }
    }

    // two frames, scalar features, unit projections
    let col = |v: &[f64]| Tensor::new(&[v.len(), 1], v.to_vec()).unwrap();
    let mut p = ModelParameters::new();
    p.insert("fusion.q.weight", col(&[1.0]));
    p.insert("fusion.q.bias", Tensor::zeros(&[1]));
    p.insert("fusion.k.weight", col(&[1.0]));
    p.insert("fusion.k.bias", Tensor::zeros(&[1]));
    let mut g = Graph::<f64>::inference();
    let (ht, hw) = (g.constant(col(&[1.0, 3.0])), g.constant(col(&[2.0, 4.0])));
    let f = attentive_fuse(&mut g, &p, ht, hw).unwrap();
    let h = g.value(f.h_r).at(0, 0);
    assert!((h - 2.7616).abs() < 5e-5, "{h}");
    format!("20 random instances, hand example h_r[0,0] = {h:.4}")
}

// 3

fn dsp_suite() -> String {
    let m = hz_to_mel(1000.0);
    assert!((m - 999.99).abs() <= 0.01, "mel(1000) = {m}");

    let dct = dct_matrix(40, 40);
    let mut worst: f64 = 0.0;
    for i in 0..40 {
        for j in 0..40 {
            let dot: f64 = (0..40).map(|k| dct[i][k] * dct[j][k]).sum();
            worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");

    let cfg = MfccConfig::default();
    let mut r = stream(5, "acceptance-frames");
    for _ in 0..100 {
        let n = r.gen_range(400..64000);
        // frames: window 400 samples, hop 160, no padding
        let want = (n - 400) / 160 + 1;
        assert_eq!(cfg.frame_count(n, 16000), Some(want));
        let clip = AudioClip::new(vec![0.1; n], 16000, 0, "x").unwrap();
        assert_eq!(fusepath::audio::mfcc(&clip, &cfg).unwrap().frames(), want, "n = {n}");
    }

    let sine: Vec<f32> = (0..44100)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 44100.0).sin() as f32 * 0.5)
        .collect();
    let out = resample(&AudioClip::new(sine, 44100, 0, "tone").unwrap(), 16000).unwrap();
    let x = out.samples();
    // one second at 16 kHz, so bin k is k Hz
    let mag = |k: usize| {
        let w = 2.0 * std::f64::consts::PI * k as f64 / x.len() as f64;
        let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(a, b), (n, &v)| {
            (a + v as f64 * (w * n as f64).cos(), b - v as f64 * (w * n as f64).sin())
        });
        re * re + im * im
    };
    let peak = (300..600).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
    assert!((peak as f64 - 440.0).abs() <= 1.0, "peak {peak}");
    format!("mel(1000) = {m:.4}, DCT error {worst:.1e}, tone peak {peak} Hz")
}

// 4 and 5

const DESK: &str = "seed = 0
paths.manifest = \"corpus/manifest.jsonl\"
paths.out_dir = \"runs\"
train.batch_size = 16
";

fn ablation_run(dir: &Path) -> (AblationReport, String, f64) {
    let corpus = dir.join("corpus");
    run_ok(&["synth", "--preset", "binary", "--n-per-class", "100", "--seed", "7", "--out", s(&corpus)]);
    let cfg = dir.join("desk.toml");
    fs::write(&cfg, DESK).unwrap();
    let start = Instant::now();
    let csv = run_ok(&["ablate", "--config", s(&cfg)]);
    let secs = start.elapsed().as_secs_f64();
    let json = fs::read_to_string(dir.join("runs/ablation/report.json")).unwrap();
    (serde_json::from_str(&json).unwrap(), csv, secs)
}

fn pipeline(report: &AblationReport, secs: f64) -> String {
    let att = ModelKind::Fusion(FusionStyle::Attention);
    let cell = report.cell(att, Strategy::MultiStage).unwrap();
    let ln2 = 2f64.ln();
    assert!(cell.test.accuracy >= 0.85, "test accuracy {}", cell.test.accuracy);
    assert!(cell.train_accuracy >= 0.95, "train accuracy {}", cell.train_accuracy);
    for kind in [ModelKind::Tdnn, ModelKind::Acoustic] {
        let first = report.cell(kind, Strategy::MultiStage).unwrap().first_epoch_loss;
        assert!((first - ln2).abs() < 0.2, "{kind} stage-1 epoch-0 loss {first}");
    }
    assert!((cell.first_epoch_loss - ln2).abs() < 0.2, "stage-2 epoch-0 loss {}", cell.first_epoch_loss);
    assert!(secs < 900.0, "{secs:.0} s");
    format!(
        "test {:.3}, train {:.3}, stage-2 epoch-0 loss {:.4}, {:.0} s",
        cell.test.accuracy, cell.train_accuracy, cell.first_epoch_loss, secs
    )
}

fn ablation_table(report: &AblationReport, csv: &str) -> String {
    let rows = layout();
    assert_eq!(report.summary.len(), rows.len());
    assert_eq!(csv.lines().count(), rows.len() + 1);
    for (row, (group, cell)) in report.summary.iter().zip(&rows) {
        assert_eq!(row.group, *group);
        assert_eq!(row.cell, cell.name());
        for v in [row.accuracy, row.precision, row.recall, row.f1] {
            assert!((0.0..=1.0).contains(&v), "{}: {v}", row.cell);
        }
    }
    let att = report.cell(ModelKind::Fusion(FusionStyle::Attention), Strategy::MultiStage).unwrap();
    for kind in [ModelKind::Tdnn, ModelKind::Acoustic] {
        let single = report.cell(kind, Strategy::MultiStage).unwrap().test.accuracy;
        assert!(att.test.accuracy >= single - 0.02, "attention {} vs {kind} {single}", att.test.accuracy);
    }
    let accs: Vec<String> = report.summary.iter().map(|r| format!("{}={:.2}", r.cell, r.accuracy)).collect();
    accs.join(" ")
}

// 6

/// Runs synth, both stage-1 paths, stage 2 and eval into `dir`.
fn small_pipeline(dir: &Path) {
    run_ok(&["synth", "--n-per-class", "16", "--seed", "2", "--out", s(&dir.join("corpus"))]);
    let cfg = dir.join("small.toml");
    let body = DESK.to_string() + "train.epochs_stage1 = 2\ntrain.epochs_stage2 = 2\n";
    fs::write(&cfg, body).unwrap();
    let runs = dir.join("runs");
    run_ok(&["train-stage1", "--path", "tdnn", "--config", s(&cfg)]);
    run_ok(&["train-stage1", "--path", "acoustic", "--config", s(&cfg)]);
    run_ok(&[
        "train-stage2",
        "--config",
        s(&cfg),
        "--tdnn-ckpt",
        s(&runs.join("stage1_tdnn.fpck")),
        "--acoustic-ckpt",
        s(&runs.join("stage1_acoustic.fpck")),
    ]);
    run_ok(&["eval", "--ckpt", s(&runs.join("stage2_attention.fpck"))]);
}

fn without_wall_time(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v
        })
        .collect()
}

fn determinism() -> String {
    // both runs use the same location because resolved paths are recorded
    let root = tempfile::tempdir().unwrap();
    let work = root.path().join("work");
    let first = root.path().join("first");
    small_pipeline(&work);
    fs::rename(&work, &first).unwrap();
    small_pipeline(&work);

    let runs_a = first.join("runs");
    let mut names: Vec<String> = fs::read_dir(&runs_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut compared = 0;
    for name in &names {
        let a = fs::read(runs_a.join(name)).unwrap();
        let b = fs::read(work.join("runs").join(name)).unwrap();
        if name.ends_with(".log.jsonl") {
            let (a, b) = (String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
            assert_eq!(without_wall_time(&a), without_wall_time(&b), "{name}");
        } else {
            assert!(a == b, "{name} differs");
        }
        compared += 1;
    }
    assert!(names.iter().any(|n| n.ends_with(".fpck")));
    assert!(names.iter().any(|n| n.ends_with(".metrics.json")));
    format!("{compared} artifacts identical")
}

// 7

fn metrics_oracle() -> String {
    let labels = vec!["a".to_string(), "b".to_string()];
    let r = report_from_confusion(&[vec![2, 0], vec![1, 1]], &labels, Averaging::Macro);
    for (got, want) in [
        (r.accuracy, 0.75),
        (r.macro_precision, 0.8333),
        (r.macro_recall, 0.75),
        (r.macro_f1, 0.7333),
    ] {
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
    for seed in 0..20 {
        let mut g = stream(seed, "acceptance-confusion");
        let c = g.gen_range(2..6);
        let mut m: Vec<Vec<u64>> = (0..c).map(|_| (0..c).map(|_| g.gen_range(0..30)).collect()).collect();
        m[0][0] += 1;
        let names: Vec<String> = (0..c).map(|i| i.to_string()).collect();
        let acc = report_from_confusion(&m, &names, Averaging::Micro).accuracy;
        assert!((micro_recall(&m) - acc).abs() < 1e-12, "seed {seed}");
    }
    "hand example and 20 random matrices".into()
}

// 8

fn reload_fidelity() -> String {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_corpus(&SynthSpec::binary(20, 5), &dir.path().join("corpus")).unwrap();
    let corpus = Corpus::load(&m, &Default::default()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 16;
    cfg.train.epochs_stage1 = 2;
    let mut saved = Vec::new();
    for kind in [ModelKind::Tdnn, ModelKind::Acoustic] {
        let t = stage1_train(&cfg, &corpus, kind).unwrap();
        let prefix = kind.encoder_prefix().unwrap();
        let path = dir.path().join(format!("{kind}.fpck"));
        let head = dir.path().join(format!("{kind}_head.fpck"));
        let head_params = t.params.subset("head.");
        save_model(&path, &t.net, &t.params.subset(prefix), Some((&head, &head_params)), &cfg, "stage1", 2).unwrap();
        saved.push((t.params.subset(prefix), load_model(&path).unwrap().params.subset(prefix)));
    }
    let mut n = 0;
    for style in FusionStyle::ALL {
        let (_, params) = stage2_init(&cfg, 2, style, &saved[0].1, &saved[1].1).unwrap();
        for (trained, _) in &saved {
            for (name, p) in trained.iter() {
                let q = params.get(name).unwrap();
                let same = p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same && p.value.shape() == q.value.shape(), "{style}: {name}");
                n += 1;
            }
        }
    }
    assert!(!corpus.split_indices(Split::Train).is_empty());
    format!("{n} tensors bit-exact across 3 styles")
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Result<String, String>)> = Vec::new();
    let mut check = |n: usize, name: &'static str, f: &mut dyn FnMut() -> String| {
        let r = catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())
        });
        match &r {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
            Err(why) => println!("criterion {n} {name}: FAIL ({why})"),
        }
        results.push((n, name, r));
    };

    check(1, "gradient suite", &mut gradient_suite);
    check(2, "fusion structure", &mut fusion_structure);
    check(3, "dsp suite", &mut dsp_suite);

    let dir = tempfile::tempdir().unwrap();
    let run = catch_unwind(AssertUnwindSafe(|| ablation_run(dir.path()))).ok();
    check(4, "synthetic pipeline", &mut || {
        let (report, _, secs) = run.as_ref().expect("ablate run failed");
        pipeline(report, *secs)
    });
    check(5, "ablation harness", &mut || {
        let (report, csv, _) = run.as_ref().expect("ablate run failed");
        ablation_table(report, csv)
    });

    check(6, "determinism", &mut determinism);
    check(7, "metrics oracle", &mut metrics_oracle);
    check(8, "stage-2 reload fidelity", &mut reload_fidelity);

    let failed: Vec<String> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| format!("{} {}", r.0, r.1))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
