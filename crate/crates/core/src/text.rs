//! Text frontend: a whitespace/punctuation tokenizer, a trainable embedding
//! table with sinusoidal positions, and the two-layer transformer feature
//! extractor. Precomputed utterance embeddings enter through a linear adapter
//! in front of the same extractor.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::layers::{encoder_stack, sinusoidal_positions, EncoderLayerParams, Linear};
use crate::rng::SeededRng;
use crate::{Error, ParamId, ParamStore, Result, Tape, Var};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";

/// Number of layers in the text feature extractor.
pub const EXTRACTOR_LAYERS: usize = 2;
/// Default attention heads of the text feature extractor.
pub const EXTRACTOR_HEADS: usize = 8;
/// Feature width of externally precomputed text embeddings.
pub const SOURCE_EMBED_DIM: usize = 768;
/// Longest token sequence, CLS included.
pub const MAX_SEQ_LEN: usize = 64;

/// Token ↔ id map with dense ids; 0, 1, 2 are PAD, UNK and CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    ids: BTreeMap<String, u32>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Self {
            ids: BTreeMap::new(),
            tokens: Vec::new(),
        };
        for t in [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN] {
            v.push(t.to_string());
        }
        v
    }
}

impl Vocab {
    /// Vocabulary over every token in `texts`, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ordered: Vec<(String, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut v = Self::default();
        for (tok, _) in ordered {
            if !v.ids.contains_key(&tok) {
                v.push(tok);
            }
        }
        v
    }

    /// Rebuild from `(token, id)` pairs; ids must be exactly `0..n` with the
    /// three special tokens in their reserved slots.
    pub fn from_pairs<I: IntoIterator<Item = (String, u32)>>(pairs: I) -> Result<Self> {
        let mut by_id: BTreeMap<u32, String> = BTreeMap::new();
        for (tok, id) in pairs {
            if by_id.insert(id, tok.clone()).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary id {id}")));
            }
        }
        let mut v = Self {
            ids: BTreeMap::new(),
            tokens: Vec::new(),
        };
        for (expect, (id, tok)) in by_id.into_iter().enumerate() {
            if id as usize != expect {
                return Err(Error::Format(format!("vocabulary ids not dense: missing {expect}")));
            }
            if v.ids.contains_key(&tok) {
                return Err(Error::Format(format!("duplicate vocabulary token {tok:?}")));
            }
            v.push(tok);
        }
        for (id, name) in [(PAD, PAD_TOKEN), (UNK, UNK_TOKEN), (CLS, CLS_TOKEN)] {
            if v.tokens.get(id as usize).map(String::as_str) != Some(name) {
                return Err(Error::Format(format!("vocabulary id {id} must be {name}")));
            }
        }
        Ok(v)
    }

    fn push(&mut self, tok: String) {
        self.ids.insert(tok.clone(), self.tokens.len() as u32);
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `(token, id)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32))
    }
}

/// Lowercase, then split on whitespace; every punctuation character becomes
/// its own token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// `[CLS, ids...]`, unknown tokens mapped to UNK.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids = alloc::vec![CLS];
    ids.extend(split_tokens(text).iter().map(|t| vocab.id(t).unwrap_or(UNK)));
    ids
}

/// Tokenize and cut to `max_len` ids; the flag reports whether anything was
/// dropped.
pub fn tokenize_truncated(text: &str, vocab: &Vocab, max_len: usize) -> (Vec<u32>, bool) {
    let mut ids = tokenize(text, vocab);
    let cut = ids.len() > max_len.max(1);
    ids.truncate(max_len.max(1));
    (ids, cut)
}

/// Where text features come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TextInput {
    /// Trainable embedding table plus sinusoidal positions.
    Tokens { table: ParamId, vocab_size: usize },
    /// External `[S, source_dim]` features projected to the model width.
    Precomputed { adapter: Linear, source_dim: usize },
}

/// Text encoder producing `F_t`, `[S, d]` with CLS at row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub input: TextInput,
    pub extractor: Vec<EncoderLayerParams>,
    pub model_dim: usize,
}

impl TextEncoder {
    pub fn with_vocab(
        store: &mut ParamStore,
        vocab_size: usize,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let table = store.normal("text.embed", &[vocab_size, model_dim], std, rng);
        let extractor = Self::extractor(store, model_dim, heads, ffn_dim, std, rng)?;
        Ok(Self {
            input: TextInput::Tokens { table, vocab_size },
            extractor,
            model_dim,
        })
    }

    pub fn with_adapter(
        store: &mut ParamStore,
        source_dim: usize,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let adapter = Linear::new(store, "text.adapter", source_dim, model_dim, std, rng);
        let extractor = Self::extractor(store, model_dim, heads, ffn_dim, std, rng)?;
        Ok(Self {
            input: TextInput::Precomputed { adapter, source_dim },
            extractor,
            model_dim,
        })
    }

    fn extractor(
        store: &mut ParamStore,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Vec<EncoderLayerParams>> {
        (0..EXTRACTOR_LAYERS)
            .map(|l| EncoderLayerParams::new(store, &format!("text.extractor.{l}"), model_dim, heads, ffn_dim, std, rng))
            .collect()
    }

    /// Embedding lookup, position add and the extractor layers.
    pub fn embed_and_extract(&self, tape: &mut Tape<'_>, ids: &[u32], eps: f64) -> Result<Var> {
        let TextInput::Tokens { table, vocab_size } = self.input else {
            return Err(Error::Config("text encoder expects precomputed embeddings".into()));
        };
        if ids.is_empty() {
            return Err(Error::Empty { op: "embed_and_extract" });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad as usize,
                vocab: vocab_size,
            });
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(table);
        let x = tape.gather(table, &idx)?;
        let pos = tape.constant(ids.len(), self.model_dim, sinusoidal_positions(ids.len(), self.model_dim))?;
        let x = tape.add(x, pos)?;
        encoder_stack(tape, &self.extractor, x, eps)
    }

    /// Adapter from the source width to the model width, then the extractor.
    pub fn extract_precomputed(&self, tape: &mut Tape<'_>, features: Var, eps: f64) -> Result<Var> {
        let (s, d) = tape.dims(features);
        let TextInput::Precomputed { adapter, source_dim } = self.input else {
            return Err(Error::Config(format!(
                "precomputed text features of width {d} given to a token-embedding encoder; configure source_embed_dim"
            )));
        };
        if d != source_dim {
            return Err(Error::shape("extract_precomputed", &[s, source_dim], &[s, d]));
        }
        if s == 0 {
            return Err(Error::Empty { op: "extract_precomputed" });
        }
        let x = adapter.forward(tape, features)?;
        encoder_stack(tape, &self.extractor, x, eps)
    }
}
