//! Run configuration: one JSON document, every field defaulted.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use jferc_core::audio::FrontendConfig;
use jferc_core::fusion::Routing;
use jferc_core::model::{FusionMode, ModelConfig};
use jferc_core::objectives::IclConfig;
use jferc_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Emotion class names; manifest labels must come from this list.
    pub classes: Vec<String>,
    pub model: ModelSection,
    pub frontend: FrontendConfig,
    pub fusion: FusionSection,
    pub optim: OptimSection,
    pub icl: IclConfig,
    pub ablation: AblationSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    pub heads: usize,
    pub extractor_heads: usize,
    pub ffn_dim: usize,
    pub n_blocks: usize,
    pub joint_len: usize,
    pub max_seq_len: usize,
    pub audio_positions: bool,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub routing: Routing,
    pub mode: FusionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop as soon as training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
    /// Keep the parameters of the epoch with the best validation W-F1
    /// instead of the last epoch.
    pub select_best_val: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Late fusion in place of the joint-based fusion blocks.
    pub no_jfm: bool,
    /// Joint length 0.
    pub no_joint: bool,
    /// Contrastive weight 0.
    pub no_icl: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Train, validation and test fractions for records without a `split`.
    pub split: [f64; 3],
    /// Seed of the split; `seed` when unset.
    pub split_seed: Option<u64>,
    /// Width of precomputed text embeddings, when the manifest uses them.
    pub source_embed_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: ["neutral", "happy", "sad", "angry"].map(String::from).to_vec(),
            model: ModelSection::default(),
            frontend: FrontendConfig::default(),
            fusion: FusionSection::default(),
            optim: OptimSection::default(),
            icl: IclConfig::default(),
            ablation: AblationSection::default(),
            data: DataSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            model_dim: m.model_dim,
            heads: m.heads,
            extractor_heads: m.extractor_heads,
            ffn_dim: m.ffn_dim,
            n_blocks: m.n_blocks,
            joint_len: m.joint_len,
            max_seq_len: m.max_seq_len,
            audio_positions: m.audio_positions,
            init_std: m.init_std,
            layer_norm_eps: m.layer_norm_eps,
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            batch_size: 32,
            epochs: 20,
            target_train_accuracy: None,
            select_best_val: true,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            split: [0.8, 0.1, 0.1],
            split_seed: None,
            source_embed_dim: jferc_core::text::SOURCE_EMBED_DIM,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Set one dotted key, e.g. `icl.tau=0.1` or `fusion.routing=literal`.
    /// The value is read as JSON, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .with_context(|| format!("unknown config key {key:?}"))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(root).with_context(|| format!("bad value {value:?} for {key}"))?;
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.data.split_seed.unwrap_or(self.seed)
    }

    pub fn fusion_mode(&self) -> FusionMode {
        if self.ablation.no_jfm {
            FusionMode::Late
        } else {
            self.fusion.mode
        }
    }

    pub fn joint_len(&self) -> usize {
        if self.ablation.no_joint {
            0
        } else {
            self.model.joint_len
        }
    }

    pub fn icl_lambda(&self) -> f64 {
        if self.ablation.no_icl {
            0.0
        } else {
            self.icl.lambda
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    /// Network shape for a text side of `vocab_size` tokens, or of
    /// precomputed embeddings when `embeddings` is set.
    pub fn model_config(&self, vocab_size: usize, embeddings: bool) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            model_dim: m.model_dim,
            heads: m.heads,
            extractor_heads: m.extractor_heads,
            ffn_dim: m.ffn_dim,
            n_blocks: m.n_blocks,
            joint_len: self.joint_len(),
            num_classes: self.classes.len(),
            vocab_size,
            source_embed_dim: embeddings.then_some(self.data.source_embed_dim),
            patch_dim: self.frontend.patch_dim(),
            max_seq_len: m.max_seq_len,
            routing: self.fusion.routing,
            mode: self.fusion_mode(),
            audio_positions: m.audio_positions,
            init_std: m.init_std,
            layer_norm_eps: m.layer_norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            bail!("need at least 2 classes, got {}", self.classes.len());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.is_empty() || self.classes[..i].contains(c) {
                bail!("class names must be non-empty and unique, got {:?}", self.classes);
            }
        }
        if self.ablation.no_jfm && self.fusion.mode != FusionMode::Jfm {
            bail!("ablation.no_jfm conflicts with fusion.mode = {:?}", self.fusion.mode);
        }
        self.model_config(3, false).validate()?;
        self.frontend.validate()?;
        self.icl.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            bail!("optim.lr must be positive, got {}", o.lr);
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            bail!("optim.beta1/beta2 must lie in [0, 1) and optim.eps be positive");
        }
        if o.batch_size == 0 || o.epochs == 0 {
            bail!("optim.batch_size and optim.epochs must be at least 1");
        }
        if let Some(t) = o.target_train_accuracy {
            if !(0.0..=1.0).contains(&t) {
                bail!("optim.target_train_accuracy must lie in [0, 1], got {t}");
            }
        }
        let s = self.data.split;
        if s.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!("data.split fractions must be in [0, 1] and sum to 1, got {s:?}");
        }
        if s[0] == 0.0 {
            bail!("data.split leaves no training data");
        }
        if self.data.source_embed_dim == 0 {
            bail!("data.source_embed_dim must be positive");
        }
        Ok(())
    }

    /// One `key = value` line per leaf, tagged `default` or `set`.
    pub fn provenance_lines(&self) -> Vec<String> {
        let mut ours = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut ours);
        let mut defaults = Vec::new();
        flatten("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut defaults);
        ours.into_iter()
            .map(|(k, v)| {
                let tag = if defaults.iter().any(|(dk, dv)| dk == &k && dv == &v) { "default" } else { "set" };
                let note = match k.as_str() {
                    "icl.tau" | "icl.lambda" | "icl.normalize" => " (decision: not given by the paper)",
                    _ => "",
                };
                format!("{k} = {v} [{tag}]{note}")
            })
            .collect()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}
