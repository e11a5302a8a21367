//! Mini-batch training and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use jferc_core::metrics::MetricsReport;
use jferc_core::model::{argmax, EmotionModel, ModelInput};
use jferc_core::optim::AdamState;
use jferc_core::rng::SeededRng;
use jferc_core::{ParamStore, Tape};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{Dataset, Example};
use crate::manifest::Split;

/// Forward passes during evaluation are chunked to bound tape memory.
const EVAL_CHUNK: usize = 64;
/// Trailing window of the loss smoother used for the rising-loss flag.
const SMOOTHING: usize = 5;
const FLAG_WINDOW: usize = 20;
const FLAG_AFTER_EPOCH: usize = 10;

/// Plain-text run log. Lines carry no timestamps so identical runs produce
/// identical logs.
#[derive(Debug, Default, Clone)]
pub struct RunLog {
    text: String,
}

impl RunLog {
    pub fn line(&mut self, s: impl AsRef<str>) {
        log::info!("{}", s.as_ref());
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

pub struct Trained {
    pub model: EmotionModel,
    pub store: ParamStore,
}

impl Trained {
    pub fn predict(&self, examples: &[&Example]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_CHUNK) {
            let inputs: Vec<&ModelInput> = chunk.iter().map(|e| &e.input).collect();
            out.extend(self.model.predict(&self.store, &inputs)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, examples: &[&Example]) -> Result<MetricsReport> {
        if examples.is_empty() {
            bail!("nothing to evaluate");
        }
        let preds = self.predict(examples)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        Ok(MetricsReport::compute(&labels, &preds, self.model.config.num_classes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub erc: f64,
    pub icl: f64,
    /// Accuracy of the predictions made while training through the epoch.
    pub running_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub val_weighted_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: usize,
    /// Accuracy of the kept parameters on the training split.
    pub train_accuracy: f64,
    /// First epoch at which the target training accuracy was confirmed.
    pub reached_target: Option<usize>,
    /// First `(start, end)` epoch window over which the smoothed loss rose.
    pub loss_flag: Option<(usize, usize)>,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    batch: usize,
    ids: Vec<&'a str>,
    erc: Option<f64>,
    icl: Option<f64>,
    total: Option<f64>,
    error: Option<String>,
    non_finite_params: Vec<String>,
    logits: Option<Vec<f64>>,
}

fn dump_non_finite(dir: Option<&Path>, dump: &NonFiniteDump<'_>) -> String {
    let json = serde_json::to_string_pretty(dump).expect("dump serializes");
    match dir {
        Some(d) => {
            let path = d.join("nonfinite_dump.json");
            match std::fs::write(&path, &json) {
                Ok(()) => format!("offending tensors dumped to {}", path.display()),
                Err(e) => format!("could not write {}: {e}\n{json}", path.display()),
            }
        }
        None => json,
    }
}

/// Train on the `Train` split. Validation metrics are logged each epoch
/// when a `Val` split exists.
pub fn train(cfg: &RunConfig, data: &Dataset, log: &mut RunLog, dump_dir: Option<&Path>) -> Result<(Trained, TrainSummary)> {
    cfg.validate()?;
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        bail!("training split is empty");
    }
    let val_set = data.split(Split::Val);
    let model_cfg = cfg.model_config(data.vocab_size(), data.uses_embeddings());
    let root = SeededRng::new(cfg.seed);
    let mut store = ParamStore::new();
    let model = EmotionModel::new(model_cfg, &mut store, &mut root.split(1))?;
    let mut adam = AdamState::new(cfg.adam(), &store);
    let mut shuffler = root.split(2);
    let lambda = cfg.icl_lambda();
    log.line(format!(
        "train {} val {} test {} examples, {} parameters",
        train_set.len(),
        val_set.len(),
        data.split(Split::Test).len(),
        store.num_scalars()
    ));

    let mut trained = Trained { model, store };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut reached_target = None;

    for epoch in 1..=cfg.optim.epochs {
        shuffler.shuffle(&mut order);
        let (mut loss_sum, mut erc_sum, mut icl_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let examples: Vec<&Example> = chunk.iter().map(|&i| train_set[i]).collect();
            let inputs: Vec<&ModelInput> = examples.iter().map(|e| &e.input).collect();
            let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
            let ids = || examples.iter().map(|e| e.id.as_str()).collect::<Vec<_>>();
            let classes = trained.model.config.num_classes;

            let step = {
                let mut tape = Tape::new(&trained.store);
                match trained.model.loss(&mut tape, &inputs, &labels, &cfg.icl, lambda) {
                    Err(e) => Err(NonFiniteDump {
                        epoch,
                        batch,
                        ids: ids(),
                        erc: None,
                        icl: None,
                        total: None,
                        error: Some(e.to_string()),
                        non_finite_params: Vec::new(),
                        logits: None,
                    }),
                    Ok(out) => {
                        let total = tape.scalar(out.total);
                        let erc = tape.scalar(out.erc);
                        let icl = out.icl.map(|v| tape.scalar(v));
                        let logits = tape.value(out.batch.logits).to_vec();
                        if !total.is_finite() {
                            Err(NonFiniteDump {
                                epoch,
                                batch,
                                ids: ids(),
                                erc: Some(erc),
                                icl,
                                total: Some(total),
                                error: None,
                                non_finite_params: non_finite_params(&trained.store),
                                logits: Some(logits),
                            })
                        } else {
                            let grads = tape.backward(out.total)?;
                            Ok((grads, total, erc, icl.unwrap_or(0.0), logits))
                        }
                    }
                }
            };
            let (grads, total, erc, icl, logits) = match step {
                Ok(s) => s,
                Err(dump) => {
                    let where_ = dump_non_finite(dump_dir, &dump);
                    bail!("non-finite loss at epoch {epoch} batch {batch}: {where_}");
                }
            };
            correct += logits.chunks_exact(classes).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
            trained.store.zero_grad();
            grads.accumulate_into(&mut trained.store);
            if let Err(e) = adam.step(&mut trained.store) {
                let dump = NonFiniteDump {
                    epoch,
                    batch,
                    ids: ids(),
                    erc: Some(erc),
                    icl: Some(icl),
                    total: Some(total),
                    error: Some(e.to_string()),
                    non_finite_params: non_finite_params(&trained.store),
                    logits: Some(logits),
                };
                let where_ = dump_non_finite(dump_dir, &dump);
                bail!("non-finite gradient at epoch {epoch} batch {batch}: {where_}");
            }
            loss_sum += total;
            erc_sum += erc;
            icl_sum += icl;
            batches += 1;
        }

        let (val_accuracy, val_weighted_f1) = if val_set.is_empty() {
            (None, None)
        } else {
            let m = trained.evaluate(&val_set)?;
            (Some(m.accuracy), Some(m.weighted_f1))
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            erc: erc_sum / batches as f64,
            icl: icl_sum / batches as f64,
            running_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
            val_weighted_f1,
        };
        let mut line = format!(
            "epoch {epoch} loss {:.6} erc {:.6} icl {:.6} train_acc {:.4}",
            stats.loss, stats.erc, stats.icl, stats.running_accuracy
        );
        if let (Some(a), Some(f)) = (val_accuracy, val_weighted_f1) {
            let _ = write!(line, " val_acc {a:.4} val_wf1 {f:.4}");
        }
        log.line(line);
        history.push(stats);

        if cfg.optim.select_best_val {
            if let Some(f) = val_weighted_f1 {
                if best.as_ref().is_none_or(|(b, _, _)| f > *b) {
                    best = Some((f, epoch, trained.store.clone()));
                }
            }
        }
        if let Some(target) = cfg.optim.target_train_accuracy {
            // The running accuracy lags the parameters; confirm on the split.
            if history.last().unwrap().running_accuracy >= target || epoch == cfg.optim.epochs {
                let acc = trained.evaluate(&train_set)?.accuracy;
                if acc >= target {
                    log.line(format!("epoch {epoch} train accuracy {acc:.4} reached target {target}"));
                    reached_target = Some(epoch);
                    break;
                }
            }
        }
    }

    let last_epoch = history.len();
    let selected_epoch = match best {
        Some((f, epoch, store)) if reached_target.is_none() => {
            log.line(format!("selected epoch {epoch} with val_wf1 {f:.4}"));
            trained.store = store;
            epoch
        }
        _ => last_epoch,
    };
    let train_accuracy = trained.evaluate(&train_set)?.accuracy;
    log.line(format!("train accuracy {train_accuracy:.4}"));
    let loss_flag = rising_loss_window(&history.iter().map(|s| s.loss).collect::<Vec<_>>());
    if let Some((a, b)) = loss_flag {
        log.line(format!("warning: smoothed training loss rose between epochs {a} and {b}"));
    }
    Ok((
        trained,
        TrainSummary {
            epochs: history,
            selected_epoch,
            train_accuracy,
            reached_target,
            loss_flag,
        },
    ))
}

fn non_finite_params(store: &ParamStore) -> Vec<String> {
    store
        .iter()
        .filter(|(_, t)| !t.is_finite() || t.grad().iter().any(|g| !g.is_finite()))
        .map(|(n, _)| n.to_string())
        .collect()
}

/// First 20-epoch window starting after epoch 10 whose trailing 5-epoch
/// mean loss ends higher than it starts. Epochs are 1-based.
pub fn rising_loss_window(losses: &[f64]) -> Option<(usize, usize)> {
    let smooth: Vec<f64> = (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(SMOOTHING);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect();
    (FLAG_AFTER_EPOCH..=losses.len())
        .take_while(|&start| start + FLAG_WINDOW <= losses.len())
        .find(|&start| smooth[start + FLAG_WINDOW - 1] > smooth[start - 1])
        .map(|start| (start, start + FLAG_WINDOW))
}

/// Load a trained run's parameters into a freshly built network.
pub fn restore(cfg: &RunConfig, data: &Dataset, checkpoint: &Path) -> Result<Trained> {
    let model_cfg = cfg.model_config(data.vocab_size(), data.uses_embeddings());
    let mut store = ParamStore::new();
    let model = EmotionModel::new(model_cfg, &mut store, &mut SeededRng::new(cfg.seed).split(1))?;
    crate::formats::load_checkpoint(checkpoint, &mut store).context("checkpoint does not match the run config")?;
    Ok(Trained { model, store })
}
