//! The full emotion recognition network and its batch objective.

use alloc::format;
use alloc::vec::Vec;

use crate::fusion::{self, extract_cls, fusion_forward, init_fusion_state, JFBlock, Routing};
use crate::layers::{encoder_stack, sinusoidal_positions, EncoderLayerParams, Linear, INIT_STD, LAYER_NORM_EPS};
use crate::objectives::{classify, concat_fused, erc_loss, icl_loss, total_loss, EmotionHead, IclConfig};
use crate::rng::SeededRng;
use crate::text::{TextEncoder, EXTRACTOR_HEADS, MAX_SEQ_LEN};
use crate::{Error, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// How the two modalities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FusionMode {
    /// Stacked joint-based fusion blocks.
    #[default]
    Jfm,
    /// Text CLS and the CLS of a separately encoded audio stream,
    /// concatenated straight into the classifier.
    Concat,
    /// Late fusion: mean-pooled text features and mean-pooled audio features
    /// from a separate audio encoder.
    Late,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub model_dim: usize,
    /// Heads of the fusion and audio encoders.
    pub heads: usize,
    /// Heads of the text feature extractor.
    pub extractor_heads: usize,
    pub ffn_dim: usize,
    pub n_blocks: usize,
    pub joint_len: usize,
    pub num_classes: usize,
    /// Token vocabulary size; ignored when `source_embed_dim` is set.
    pub vocab_size: usize,
    /// Width of precomputed text embeddings, if those are used.
    pub source_embed_dim: Option<usize>,
    /// Flattened patch width, `patch_time · patch_freq`.
    pub patch_dim: usize,
    pub max_seq_len: usize,
    pub routing: Routing,
    pub mode: FusionMode,
    /// Add sinusoidal positions to the audio patch tokens.
    pub audio_positions: bool,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            extractor_heads: EXTRACTOR_HEADS,
            ffn_dim: 256,
            n_blocks: fusion::DEFAULT_BLOCKS,
            joint_len: fusion::DEFAULT_JOINT_LEN,
            num_classes: 4,
            vocab_size: 3,
            source_embed_dim: None,
            patch_dim: 64,
            max_seq_len: MAX_SEQ_LEN,
            routing: Routing::Fixed,
            mode: FusionMode::Jfm,
            audio_positions: false,
            init_std: INIT_STD,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        for (name, heads) in [("heads", self.heads), ("extractor_heads", self.extractor_heads)] {
            if heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(heads) {
                return bad(format!("model_dim {} must be a positive multiple of {name} {heads}", self.model_dim));
            }
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.mode == FusionMode::Jfm && self.n_blocks == 0 {
            return bad("n_blocks must be at least 1 for joint fusion".into());
        }
        if self.mode != FusionMode::Jfm && self.n_blocks == 0 {
            return bad("n_blocks sets the audio encoder depth and must be at least 1".into());
        }
        if self.patch_dim == 0 {
            return bad("patch_dim must be positive".into());
        }
        if self.source_embed_dim.is_none() && self.vocab_size < 3 {
            return bad("vocab_size must include the special tokens".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if !(self.init_std > 0.0 && self.layer_norm_eps > 0.0) {
            return bad("init_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Text side of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum TextFeatures {
    /// `[CLS, ...]` token ids.
    Tokens(Vec<u32>),
    /// Precomputed `[S, source_dim]` features, row 0 standing in for CLS.
    Embedding(Tensor),
}

/// One utterance ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub text: TextFeatures,
    /// Flattened spectrogram patches, `[P, patch_dim]`.
    pub patches: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
enum AudioPath {
    Joint(Vec<JFBlock>),
    Separate(Vec<EncoderLayerParams>),
}

/// Parameter layout of the network. Values live in a separate
/// [`ParamStore`], read through a [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionModel {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub audio_proj: Linear,
    pub audio_cls: Option<ParamId>,
    audio: AudioPath,
    pub head: EmotionHead,
}

/// Nodes produced by [`EmotionModel::forward_batch`].
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    /// `[K, d]`
    pub cls_mt: Var,
    /// `[K, d]`
    pub cls_tm: Var,
    /// `[K, C]`
    pub logits: Var,
    /// `[K, C]`
    pub probs: Var,
}

/// Frobenius norms of finite-difference Jacobians across modalities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossModalSensitivity {
    /// `‖∂cls_mt / ∂F_m‖`
    pub audio_to_mt: f64,
    /// `‖∂cls_tm / ∂F_t‖`
    pub text_to_tm: f64,
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub batch: BatchOutput,
    pub erc: Var,
    pub icl: Option<Var>,
    pub total: Var,
}

impl EmotionModel {
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.model_dim;
        let text = match c.source_embed_dim {
            Some(src) => TextEncoder::with_adapter(store, src, d, c.extractor_heads, c.ffn_dim, c.init_std, rng)?,
            None => TextEncoder::with_vocab(store, c.vocab_size, d, c.extractor_heads, c.ffn_dim, c.init_std, rng)?,
        };
        let audio_proj = Linear::new(store, "audio.proj", c.patch_dim, d, c.init_std, rng);
        let audio_cls = match c.mode {
            FusionMode::Late => None,
            _ => Some(store.normal("audio.cls", &[1, d], c.init_std, rng)),
        };
        let audio = match c.mode {
            FusionMode::Jfm => AudioPath::Joint(
                (0..c.n_blocks)
                    .map(|l| JFBlock::new(store, l, d, c.heads, c.ffn_dim, c.joint_len, c.init_std, rng))
                    .collect::<Result<_>>()?,
            ),
            FusionMode::Concat | FusionMode::Late => AudioPath::Separate(
                (0..c.n_blocks)
                    .map(|l| EncoderLayerParams::new(store, &format!("audio.encoder.{l}"), d, c.heads, c.ffn_dim, c.init_std, rng))
                    .collect::<Result<_>>()?,
            ),
        };
        let head = EmotionHead::new(store, d, c.num_classes, c.init_std, rng);
        Ok(Self {
            config,
            text,
            audio_proj,
            audio_cls,
            audio,
            head,
        })
    }

    pub fn blocks(&self) -> &[JFBlock] {
        match &self.audio {
            AudioPath::Joint(b) => b,
            AudioPath::Separate(_) => &[],
        }
    }

    /// `F_t`, `[S, d]`.
    pub fn text_features(&self, tape: &mut Tape<'_>, text: &TextFeatures) -> Result<Var> {
        let eps = self.config.layer_norm_eps;
        match text {
            TextFeatures::Tokens(ids) => {
                let ids = &ids[..ids.len().min(self.config.max_seq_len)];
                self.text.embed_and_extract(tape, ids, eps)
            }
            TextFeatures::Embedding(t) => {
                let (s, w) = t.as_matrix_dims();
                let s = s.min(self.config.max_seq_len);
                let x = tape.constant(s, w, t.data()[..s * w].to_vec())?;
                self.text.extract_precomputed(tape, x, eps)
            }
        }
    }

    /// `F_m`, `[P, d]`.
    pub fn audio_tokens(&self, tape: &mut Tape<'_>, patches: &Tensor) -> Result<Var> {
        let (p, w) = patches.as_matrix_dims();
        if w != self.config.patch_dim {
            return Err(Error::shape("patchify_and_project", &[p, w], &[p, self.config.patch_dim]));
        }
        let x = tape.constant(p, w, patches.data().to_vec())?;
        let tokens = self.audio_proj.forward(tape, x)?;
        if self.config.audio_positions {
            let d = self.config.model_dim;
            let pos = tape.constant(p, d, sinusoidal_positions(p, d))?;
            tape.add(tokens, pos)
        } else {
            Ok(tokens)
        }
    }

    /// Per-utterance pair of summary vectors, each `[1, d]`.
    pub fn encode(&self, tape: &mut Tape<'_>, input: &ModelInput) -> Result<(Var, Var)> {
        let f_t = self.text_features(tape, &input.text)?;
        let f_m = self.audio_tokens(tape, &input.patches)?;
        self.fuse(tape, f_t, f_m)
    }

    /// Everything after the frontends: `F_t [S, d]` and `F_m [P, d]` to the
    /// `(cls_mt, cls_tm)` pair.
    pub fn fuse(&self, tape: &mut Tape<'_>, f_t: Var, f_m: Var) -> Result<(Var, Var)> {
        let eps = self.config.layer_norm_eps;
        match (&self.audio, self.config.mode) {
            (AudioPath::Joint(blocks), _) => {
                let cls = self.audio_cls.expect("joint fusion has an audio CLS");
                let state = init_fusion_state(tape, f_t, f_m, cls, self.config.routing)?;
                let (f_mt, f_tm) = fusion_forward(tape, state, blocks, self.config.routing, eps)?;
                extract_cls(tape, f_mt, f_tm)
            }
            (AudioPath::Separate(layers), FusionMode::Concat) => {
                let cls = tape.param(self.audio_cls.expect("concat mode has an audio CLS"));
                let a = tape.concat_rows(&[cls, f_m])?;
                let a = encoder_stack(tape, layers, a, eps)?;
                Ok((tape.row(f_t, 0)?, tape.row(a, 0)?))
            }
            (AudioPath::Separate(layers), _) => {
                let a = encoder_stack(tape, layers, f_m, eps)?;
                Ok((tape.mean_rows(f_t)?, tape.mean_rows(a)?))
            }
        }
    }

    /// Central-difference Jacobian norms of each summary vector with respect
    /// to the other modality's fusion input, see [`CrossModalSensitivity`].
    pub fn cross_modal_sensitivity(&self, store: &ParamStore, input: &ModelInput, h: f64) -> Result<CrossModalSensitivity> {
        let mut tape = Tape::new(store);
        let f_t = self.text_features(&mut tape, &input.text)?;
        let f_m = self.audio_tokens(&mut tape, &input.patches)?;
        let (t_dims, m_dims) = (tape.dims(f_t), tape.dims(f_m));
        let (t_val, m_val) = (tape.value(f_t).to_vec(), tape.value(f_m).to_vec());
        let run = |t: &[f64], m: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut tape = Tape::new(store);
            let ft = tape.constant(t_dims.0, t_dims.1, t.to_vec())?;
            let fm = tape.constant(m_dims.0, m_dims.1, m.to_vec())?;
            let (mt, tm) = self.fuse(&mut tape, ft, fm)?;
            Ok((tape.value(mt).to_vec(), tape.value(tm).to_vec()))
        };
        let mut audio_to_mt = 0.0;
        let mut buf = m_val.clone();
        for i in 0..buf.len() {
            buf[i] = m_val[i] + h;
            let (plus, _) = run(&t_val, &buf)?;
            buf[i] = m_val[i] - h;
            let (minus, _) = run(&t_val, &buf)?;
            buf[i] = m_val[i];
            audio_to_mt += squared_slope(&plus, &minus, h);
        }
        let mut text_to_tm = 0.0;
        let mut buf = t_val.clone();
        for i in 0..buf.len() {
            buf[i] = t_val[i] + h;
            let (_, plus) = run(&buf, &m_val)?;
            buf[i] = t_val[i] - h;
            let (_, minus) = run(&buf, &m_val)?;
            buf[i] = t_val[i];
            text_to_tm += squared_slope(&plus, &minus, h);
        }
        Ok(CrossModalSensitivity {
            audio_to_mt: crate::math::sqrt(audio_to_mt),
            text_to_tm: crate::math::sqrt(text_to_tm),
        })
    }

    pub fn forward_batch(&self, tape: &mut Tape<'_>, inputs: &[&ModelInput]) -> Result<BatchOutput> {
        if inputs.is_empty() {
            return Err(Error::Empty { op: "forward_batch" });
        }
        let mut mts = Vec::with_capacity(inputs.len());
        let mut tms = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (mt, tm) = self.encode(tape, input)?;
            mts.push(mt);
            tms.push(tm);
        }
        let cls_mt = tape.concat_rows(&mts)?;
        let cls_tm = tape.concat_rows(&tms)?;
        let (probs, logits) = classify(tape, cls_mt, cls_tm, &self.head)?;
        Ok(BatchOutput {
            cls_mt,
            cls_tm,
            logits,
            probs,
        })
    }

    /// Forward pass plus `L_ERC + λ·L_ICL`. The contrastive term is skipped
    /// entirely when `lambda` is 0.
    pub fn loss(&self, tape: &mut Tape<'_>, inputs: &[&ModelInput], labels: &[usize], icl: &IclConfig, lambda: f64) -> Result<LossOutput> {
        if labels.len() != inputs.len() {
            return Err(Error::shape("loss", &[inputs.len()], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.config.num_classes,
            });
        }
        let batch = self.forward_batch(tape, inputs)?;
        let erc = erc_loss(tape, batch.probs, labels)?;
        let icl_var = if lambda != 0.0 && inputs.len() >= 2 {
            let f = concat_fused(tape, batch.cls_mt, batch.cls_tm, icl.normalizes())?;
            Some(icl_loss(tape, f, labels, icl)?)
        } else {
            None
        };
        let total = total_loss(tape, erc, icl_var, lambda)?;
        Ok(LossOutput {
            batch,
            erc,
            icl: icl_var,
            total,
        })
    }

    /// Argmax class per input.
    pub fn predict(&self, store: &ParamStore, inputs: &[&ModelInput]) -> Result<Vec<usize>> {
        let mut tape = Tape::new(store);
        let out = self.forward_batch(&mut tape, inputs)?;
        let c = self.config.num_classes;
        Ok(tape
            .value(out.logits)
            .chunks_exact(c)
            .map(argmax)
            .collect())
    }
}

fn squared_slope(plus: &[f64], minus: &[f64], h: f64) -> f64 {
    plus.iter()
        .zip(minus)
        .map(|(p, q)| {
            let s = (p - q) / (2.0 * h);
            s * s
        })
        .sum()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
