use std::fs;
use std::path::Path;

use jferc::config::RunConfig;
use jferc::data::build_dataset;
use jferc::experiments::{run_ablation, run_sweep, sweep_csv, SweepParam, Variant};
use jferc::manifest::write_manifest;
use jferc::run::{run_eval, run_train, CHECKPOINT_FILE, CONFUSION_FILE, LOG_FILE, METRICS_FILE};
use jferc::synth::{synth_dataset, SynthOptions};
use jferc::train::{rising_loss_window, train, RunLog};
use jferc_core::checkpoint::encode_store;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "model.model_dim=16",
        "model.heads=2",
        "model.extractor_heads=2",
        "model.ffn_dim=32",
        "optim.epochs=2",
        "optim.batch_size=8",
        "optim.lr=0.001",
    ])
    .unwrap();
    c
}

fn write_corpus(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let recs = synth_dataset(n, &[0.4, 0.3, 0.2, 0.1], &RunConfig::default().classes, seed, &SynthOptions::default()).unwrap();
    let p = dir.join("manifest.jsonl");
    write_manifest(&p, &recs).unwrap();
    p
}

#[test]
fn zero_lambda_and_no_icl_are_bitwise_identical() {
    let recs = synth_dataset(40, &[0.25; 4], &RunConfig::default().classes, 1, &SynthOptions::default()).unwrap();
    let mut a = small_config();
    a.icl.lambda = 0.0;
    let mut b = small_config();
    b.ablation.no_icl = true;
    let data = build_dataset(&a, &recs, Path::new("."), None).unwrap();
    let (ta, sa) = train(&a, &data, &mut RunLog::default(), None).unwrap();
    let (tb, sb) = train(&b, &data, &mut RunLog::default(), None).unwrap();
    assert_eq!(encode_store(&ta.store), encode_store(&tb.store));
    assert_eq!(sa, sb);
    assert!(sa.epochs.iter().all(|e| e.icl == 0.0));

    let (tc, _) = train(&small_config(), &data, &mut RunLog::default(), None).unwrap();
    assert_ne!(encode_store(&ta.store), encode_store(&tc.store));
}

#[test]
fn train_writes_every_output_and_eval_reproduces_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 60, 2);
    let out = dir.path().join("run");
    let run = run_train(&small_config(), &manifest, &out).unwrap();
    for f in [CHECKPOINT_FILE, "config.json", "vocab.tsv", LOG_FILE, METRICS_FILE, CONFUSION_FILE] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join(LOG_FILE)).unwrap();
    for key in ["seed = 0", "optim.lr = 0.001 [set]", "optim.batch_size = 8 [set]", "icl.tau = 0.07 [default]", "frontend.mel_bins = 80", "fusion.routing", "epoch 2 loss"] {
        assert!(log.contains(key), "log lacks {key:?}:\n{log}");
    }
    assert_eq!(run.summary.epochs.len(), 2);

    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(metrics["split"], "test");
    assert_eq!(metrics["accuracy"], run.metrics.accuracy);
    assert!(metrics["per_class_f1"].get("angry").is_some());

    let csv = fs::read_to_string(out.join(CONFUSION_FILE)).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "true\\predicted,neutral,happy,sad,angry");
    for (row, support) in rows[1..].iter().zip(&run.metrics.support) {
        let sum: u64 = row.split(',').skip(1).map(|x| x.parse::<u64>().unwrap()).sum();
        assert_eq!(sum, *support);
    }

    let eval_out = dir.path().join("eval");
    let m = run_eval(&out, &manifest, Some(jferc::manifest::Split::Test), &eval_out).unwrap();
    assert_eq!(m, run.metrics);
    assert_eq!(fs::read(eval_out.join(METRICS_FILE)).unwrap(), fs::read(out.join(METRICS_FILE)).unwrap());
    let all = run_eval(&out, &manifest, None, &eval_out).unwrap();
    assert_eq!(all.total, 60);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 40, 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_train(&small_config(), &manifest, &a).unwrap();
    run_train(&small_config(), &manifest, &b).unwrap();
    for f in [CHECKPOINT_FILE, METRICS_FILE, CONFUSION_FILE, LOG_FILE, "config.json", "vocab.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_rejects_labels_outside_the_trained_set() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 24, 4);
    let out = dir.path().join("run");
    let mut cfg = small_config();
    cfg.optim.epochs = 1;
    run_train(&cfg, &manifest, &out).unwrap();
    let text = fs::read_to_string(&manifest).unwrap().replacen("\"label\":\"neutral\"", "\"label\":\"bored\"", 1);
    let other = dir.path().join("other.jsonl");
    fs::write(&other, text).unwrap();
    let err = format!("{:#}", run_eval(&out, &other, None, &dir.path().join("e")).unwrap_err());
    assert!(err.contains("bored"), "{err}");
}

#[test]
fn non_finite_losses_abort_with_the_batch_and_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 24, 5);
    let mut cfg = small_config();
    cfg.optim.lr = 1e300;
    let out = dir.path().join("run");
    let err = format!("{:#}", run_train(&cfg, &manifest, &out).unwrap_err());
    assert!(err.contains("batch"), "{err}");
    assert!(out.join("nonfinite_dump.json").exists());
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("nonfinite_dump.json")).unwrap()).unwrap();
    assert!(dump["ids"].as_array().is_some_and(|a| !a.is_empty()));
    assert!(fs::read_to_string(out.join(LOG_FILE)).unwrap().contains("error: non-finite"));
}

#[test]
fn sweep_rows_match_the_grid_and_failures_become_nan() {
    let recs = synth_dataset(30, &[0.25; 4], &RunConfig::default().classes, 6, &SynthOptions::default()).unwrap();
    let mut cfg = small_config();
    cfg.optim.epochs = 1;
    let data = build_dataset(&cfg, &recs, Path::new("."), None).unwrap();
    let points = run_sweep(&cfg, &data, SweepParam::Blocks, &[1, 0], &mut RunLog::default()).unwrap();
    assert_eq!(points.len(), 2);
    assert!(points[0].accuracy.is_finite() && points[1].accuracy.is_nan());
    let csv = sweep_csv(SweepParam::Blocks, &points);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("n_blocks,0,NaN,NaN"), "{csv}");
    assert_eq!(SweepParam::Blocks.default_grid(), [1, 2, 3, 4, 5]);
    assert_eq!(SweepParam::JointLen.default_grid(), [1, 2, 4, 8, 16, 24, 32]);
}

#[test]
fn ablation_reports_every_row_as_a_signed_delta() {
    let recs = synth_dataset(30, &[0.25; 4], &RunConfig::default().classes, 7, &SynthOptions::default()).unwrap();
    let mut cfg = small_config();
    cfg.optim.epochs = 1;
    let data = build_dataset(&cfg, &recs, Path::new("."), None).unwrap();
    let mut log = RunLog::default();
    let report = run_ablation(&cfg, &data, &Variant::ALL, &[0, 1], &mut log).unwrap();
    assert_eq!(report.runs.len(), 10);
    assert!(log.as_str().contains("firewall holds"));
    let table = report.table();
    for row in ["Ours", "w/o JFM", "w/o v_j", "w/o ICL", "JFM(ours)", "Concatenate"] {
        assert!(table.contains(row), "{row}:\n{table}");
    }
    let (da, _) = report.delta(Variant::NoJfm).unwrap();
    let line = table.lines().find(|l| l.starts_with("w/o JFM")).unwrap();
    assert!(line.contains(&format!("{:+.2}", 100.0 * da)), "{line}");
    assert_eq!(report.delta(Variant::Full), Some((0.0, 0.0)));
    assert_eq!(report.csv().lines().count(), 1 + 10 + 5);
}

#[test]
fn rising_loss_is_flagged_only_after_epoch_ten() {
    let falling: Vec<f64> = (0..60).map(|e| 10.0 / (1.0 + e as f64)).collect();
    assert_eq!(rising_loss_window(&falling), None);
    let mut early = falling.clone();
    early[2] = 50.0;
    assert_eq!(rising_loss_window(&early), None);
    let mut late = falling.clone();
    for (e, l) in late.iter_mut().enumerate().skip(30) {
        *l = 1.0 + 0.1 * e as f64;
    }
    let (a, b) = rising_loss_window(&late).unwrap();
    assert!(a >= 10 && b == a + 20, "{a} {b}");
    assert_eq!(rising_loss_window(&falling[..25]), None);
}
