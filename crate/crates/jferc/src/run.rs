//! The `train` and `eval` commands and their output files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use jferc_core::metrics::MetricsReport;
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{build_dataset, Dataset};
use crate::formats::{read_vocab, save_checkpoint, write_vocab};
use crate::manifest::{read_manifest, Split};
use crate::train::{restore, train, RunLog, TrainSummary};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const LOG_FILE: &str = "training.log";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";

pub fn load_dataset(cfg: &RunConfig, manifest: &Path, vocab: Option<jferc_core::text::Vocab>) -> Result<Dataset> {
    let records = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    build_dataset(cfg, &records, base, vocab)
}

/// Test split if it has examples, else validation, else training.
pub fn report_split(data: &Dataset) -> Split {
    [Split::Test, Split::Val]
        .into_iter()
        .find(|s| !data.split(*s).is_empty())
        .unwrap_or(Split::Train)
}

pub fn metrics_json(report: &MetricsReport, classes: &[String], split: &str) -> String {
    let per_class = |xs: &[f64]| -> BTreeMap<&str, f64> { classes.iter().map(String::as_str).zip(xs.iter().copied()).collect() };
    let support: BTreeMap<&str, u64> = classes.iter().map(String::as_str).zip(report.support.iter().copied()).collect();
    let v = json!({
        "split": split,
        "classes": classes,
        "total": report.total,
        "accuracy": report.accuracy,
        "weighted_f1": report.weighted_f1,
        "per_class_f1": per_class(&report.per_class_f1),
        "per_class_precision": per_class(&report.per_class_precision),
        "per_class_recall": per_class(&report.per_class_recall),
        "support": support,
        "confusion": report.confusion,
    });
    let mut s = serde_json::to_string_pretty(&v).expect("metrics serialize");
    s.push('\n');
    s
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(report: &MetricsReport, classes: &[String]) -> String {
    let mut s = String::from("true\\predicted");
    for c in classes {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (c, row) in classes.iter().zip(&report.confusion) {
        s.push_str(c);
        for n in row {
            s.push(',');
            s.push_str(&n.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn write_metrics(out: &Path, report: &MetricsReport, classes: &[String], split: Split) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(METRICS_FILE), metrics_json(report, classes, split.name()))?;
    fs::write(out.join(CONFUSION_FILE), confusion_csv(report, classes))?;
    Ok(())
}

pub fn log_config(log: &mut RunLog, cfg: &RunConfig) {
    log.line("config:");
    for line in cfg.provenance_lines() {
        log.line(format!("  {line}"));
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub summary: TrainSummary,
    pub metrics: MetricsReport,
    pub split: Split,
}

/// Train on `manifest` and write checkpoint, config, vocabulary, log,
/// metrics and confusion matrix into `out`.
pub fn run_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<TrainRun> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut log = RunLog::default();
    log_config(&mut log, cfg);
    let data = load_dataset(cfg, manifest, None)?;
    let result = train(cfg, &data, &mut log, Some(out));
    let (trained, summary) = match result {
        Ok(r) => r,
        Err(e) => {
            log.line(format!("error: {e:#}"));
            fs::write(out.join(LOG_FILE), log.as_str())?;
            return Err(e);
        }
    };
    let split = report_split(&data);
    let metrics = trained.evaluate(&data.split(split))?;
    log.line(format!(
        "{} accuracy {:.4} weighted_f1 {:.4}",
        split.name(),
        metrics.accuracy,
        metrics.weighted_f1
    ));
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trained.store)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    if let Some(v) = &data.vocab {
        write_vocab(&out.join(VOCAB_FILE), v)?;
    }
    write_metrics(out, &metrics, &cfg.classes, split)?;
    fs::write(out.join(LOG_FILE), log.as_str())?;
    Ok(TrainRun { summary, metrics, split })
}

/// Evaluate a trained run directory on one split of `manifest` (all
/// records when `split` is `None`).
pub fn run_eval(run_dir: &Path, manifest: &Path, split: Option<Split>, out: &Path) -> Result<MetricsReport> {
    let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let vocab_path = run_dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() { Some(read_vocab(&vocab_path)?) } else { None };
    let data = load_dataset(&cfg, manifest, vocab)?;
    let trained = restore(&cfg, &data, &run_dir.join(CHECKPOINT_FILE))?;
    let examples: Vec<_> = match split {
        Some(s) => data.split(s),
        None => data.examples.iter().collect(),
    };
    let metrics = trained.evaluate(&examples)?;
    fs::create_dir_all(out)?;
    let tag = split.map_or("all", Split::name);
    fs::write(out.join(METRICS_FILE), metrics_json(&metrics, &cfg.classes, tag))?;
    fs::write(out.join(CONFUSION_FILE), confusion_csv(&metrics, &cfg.classes))?;
    Ok(metrics)
}
