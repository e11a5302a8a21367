//! From manifest records to network inputs: labels, splits, tokenization,
//! embedding lookup and the audio frontend. Features are computed once per
//! dataset and shared by every run over it.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use jferc_core::audio::{mel_filterbank, mel_spectrogram_with, patchify, FrontendConfig};
use jferc_core::model::{ModelInput, TextFeatures};
use jferc_core::rng::SeededRng;
use jferc_core::text::{tokenize_truncated, Vocab};
use jferc_core::Tensor;

use crate::config::RunConfig;
use crate::formats::load_embeddings;
use crate::manifest::{AudioSource, Split, UtteranceRecord};
use crate::wav::read_wav;

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub input: ModelInput,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub examples: Vec<Example>,
    /// Present when the text side is tokens.
    pub vocab: Option<Vocab>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn uses_embeddings(&self) -> bool {
        self.vocab.is_none()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.as_ref().map_or(0, Vocab::len)
    }
}

pub fn label_index(classes: &[String], label: &str, id: &str) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == label)
        .with_context(|| format!("record {id}: label {label:?} is not one of the configured classes {classes:?}"))
}

/// Records that carry a `split` keep it; the rest are split per class in
/// the configured proportions after a seeded shuffle.
pub fn assign_splits(records: &[UtteranceRecord], labels: &[usize], fractions: [f64; 3], seed: u64) -> Vec<Split> {
    let mut out: Vec<Option<Split>> = records.iter().map(|r| r.split).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let root = SeededRng::new(seed).split(0x5eed);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| labels[i] == c && out[i].is_none()).collect();
        root.split(c as u64).shuffle(&mut idx);
        let n = idx.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).clamp(n.min(1), n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = Some(if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    out.into_iter().map(|s| s.expect("every record assigned")).collect()
}

/// Mel patches of one waveform, reusing filterbanks across sample rates.
pub struct AudioFrontend {
    cfg: FrontendConfig,
    banks: BTreeMap<u32, Tensor>,
}

impl AudioFrontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            banks: BTreeMap::new(),
        })
    }

    pub fn patches(&mut self, w: &jferc_core::audio::Waveform) -> Result<Tensor> {
        let sr = w.sample_rate();
        let cfg = self.cfg;
        let fb = match self.banks.entry(sr) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(mel_filterbank(cfg.mel_bins, cfg.fft_size, sr, cfg.f_min, cfg.f_max_for(sr))?)
            }
        };
        let mel = mel_spectrogram_with(w, &cfg, fb)?;
        Ok(patchify(&mel, cfg.patch_time, cfg.patch_freq)?.patches)
    }
}

/// Build every example. `vocab` is reused when given (evaluation of a
/// trained run); otherwise it is built from the training split.
pub fn build_dataset(cfg: &RunConfig, records: &[UtteranceRecord], base_dir: &Path, vocab: Option<Vocab>) -> Result<Dataset> {
    let labels = records
        .iter()
        .map(|r| label_index(&cfg.classes, &r.label, &r.id))
        .collect::<Result<Vec<_>>>()?;
    let splits = assign_splits(records, &labels, cfg.data.split, cfg.split_seed());

    let with_text = records.iter().filter(|r| r.text.is_some()).count();
    let embeddings = match with_text {
        0 => true,
        n if n == records.len() => false,
        _ => bail!("manifest mixes text and embedding_ref records"),
    };

    let vocab = if embeddings {
        None
    } else {
        Some(vocab.unwrap_or_else(|| {
            Vocab::build(
                records
                    .iter()
                    .zip(&splits)
                    .filter(|(_, s)| **s == Split::Train)
                    .filter_map(|(r, _)| r.text.as_deref()),
            )
        }))
    };

    let mut frontend = AudioFrontend::new(cfg.frontend)?;
    let mut containers: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    let mut truncated = 0usize;
    let mut examples = Vec::with_capacity(records.len());
    for ((r, &label), &split) in records.iter().zip(&labels).zip(&splits) {
        let text = match (&vocab, r.embedding_target()) {
            (Some(v), _) => {
                let (ids, cut) = tokenize_truncated(r.text.as_deref().unwrap_or_default(), v, cfg.model.max_seq_len);
                truncated += cut as usize;
                TextFeatures::Tokens(ids)
            }
            (None, Some((file, name))) => {
                if !containers.contains_key(file) {
                    containers.insert(file.to_string(), load_embeddings(&base_dir.join(file))?);
                }
                let t = containers[file]
                    .get(name)
                    .with_context(|| format!("record {}: no embedding {name:?} in {file}", r.id))?;
                if t.shape()[1] != cfg.data.source_embed_dim {
                    bail!(
                        "record {}: embedding width {} does not match data.source_embed_dim {}",
                        r.id,
                        t.shape()[1],
                        cfg.data.source_embed_dim
                    );
                }
                TextFeatures::Embedding(t.clone())
            }
            (None, None) => unreachable!("records are validated"),
        };
        let wave = match &r.audio {
            AudioSource::Path(p) => read_wav(&base_dir.join(p)).with_context(|| format!("record {}", r.id))?,
            AudioSource::Synth(spec) => spec.render().with_context(|| format!("record {}", r.id))?,
        };
        let patches = frontend.patches(&wave).with_context(|| format!("record {}: audio frontend", r.id))?;
        examples.push(Example {
            id: r.id.clone(),
            label,
            split,
            input: ModelInput { text, patches },
        });
    }
    if truncated > 0 {
        log::warn!("{truncated} utterances truncated to {} tokens", cfg.model.max_seq_len);
    }
    Ok(Dataset {
        classes: cfg.classes.clone(),
        examples,
        vocab,
    })
}
