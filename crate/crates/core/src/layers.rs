//! Trainable building blocks: affine maps, multi-head self-attention, the
//! pre-norm transformer encoder layer and the two-layer GELU MLP.

use alloc::format;
use alloc::vec::Vec;

use crate::rng::SeededRng;
use crate::{Error, ParamId, ParamStore, Result, Tape, Var};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Weight initialization scale: Gaussian(0, 0.02).
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), &[d_in, d_out], std, rng),
            b: Some(store.zeros(format!("{name}.b"), &[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), &[d_in, d_out], std, rng),
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            w: store.duplicate(format!("{name}.w"), self.w),
            b: self.b.map(|b| store.duplicate(format!("{name}.b"), b)),
            ..*self
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            gain: store.duplicate(format!("{name}.gain"), self.gain),
            bias: store.duplicate(format!("{name}.bias"), self.bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, eps: f64) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, eps)
    }
}

/// Query/key/value/output projections of a multi-head self-attention block.
///
/// Each `d×d` projection holds all heads side by side: head `h` owns columns
/// `h·d/heads .. (h+1)·d/heads` of the query, key and value maps and the
/// matching rows of the output map. The key map has no bias: a key bias only
/// shifts each score row by a constant, which the softmax cancels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, std: f64, rng: &mut SeededRng) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            query: Linear::new(store, &format!("{name}.wq"), dim, dim, std, rng),
            key: Linear::without_bias(store, &format!("{name}.wk"), dim, dim, std, rng),
            value: Linear::new(store, &format!("{name}.wv"), dim, dim, std, rng),
            output: Linear::new(store, &format!("{name}.wo"), dim, dim, std, rng),
            heads,
        })
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            query: self.query.duplicate(store, &format!("{name}.wq")),
            key: self.key.duplicate(store, &format!("{name}.wk")),
            value: self.value.duplicate(store, &format!("{name}.wv")),
            output: self.output.duplicate(store, &format!("{name}.wo")),
            heads: self.heads,
        }
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model dim {dim} must be a positive multiple of head count {heads}"
        )));
    }
    Ok(())
}

/// Scaled dot-product self-attention over the rows of `x: [S, d]` with no
/// positional information, followed by the output projection.
pub fn multi_head_self_attention(tape: &mut Tape<'_>, x: Var, p: &AttentionParams) -> Result<Var> {
    let (s, _) = tape.dims(x);
    if s == 0 {
        return Err(Error::Empty {
            op: "multi_head_self_attention",
        });
    }
    let q = p.query.forward(tape, x)?;
    let k = p.key.forward(tape, x)?;
    let v = p.value.forward(tape, x)?;
    let a = tape.attention(q, k, v, p.heads)?;
    p.output.forward(tape, a)
}

/// One pre-norm transformer encoder layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub model_dim: usize,
}

impl EncoderLayerParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let attn = AttentionParams::new(store, &format!("{name}.attn"), model_dim, heads, std, rng)?;
        Ok(Self {
            attn,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), model_dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), model_dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), model_dim, ffn_dim, std, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn_dim, model_dim, std, rng),
            model_dim,
        })
    }

    /// Fresh parameters under `name` holding copies of these values.
    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            attn: self.attn.duplicate(store, &format!("{name}.attn")),
            ln1: self.ln1.duplicate(store, &format!("{name}.ln1")),
            ln2: self.ln2.duplicate(store, &format!("{name}.ln2")),
            ff1: self.ff1.duplicate(store, &format!("{name}.ff1")),
            ff2: self.ff2.duplicate(store, &format!("{name}.ff2")),
            model_dim: self.model_dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.attn.heads
    }

    /// `h = x + MHSA(LN(x))`, then `h + FFN(LN(h))`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, eps: f64) -> Result<Var> {
        let (s, d) = tape.dims(x);
        if d != self.model_dim {
            return Err(Error::shape("transformer_encoder_layer", &[s, d], &[s, self.model_dim]));
        }
        let n1 = self.ln1.forward(tape, x, eps)?;
        let a = multi_head_self_attention(tape, n1, &self.attn)?;
        let h = tape.add(x, a)?;
        let n2 = self.ln2.forward(tape, h, eps)?;
        let f = self.ff1.forward(tape, n2)?;
        let f = tape.gelu(f)?;
        let f = self.ff2.forward(tape, f)?;
        tape.add(h, f)
    }
}

/// Apply a stack of encoder layers in order.
pub fn encoder_stack(tape: &mut Tape<'_>, layers: &[EncoderLayerParams], mut x: Var, eps: f64) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, x, eps)?;
    }
    Ok(x)
}

/// `Linear → GELU → Linear`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, std, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, std, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Fixed sinusoidal position table of shape `[len, dim]`, row-major.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = crate::math::pow(10_000.0, -2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 {
                crate::math::sin(angle)
            } else {
                crate::math::cos(angle)
            };
        }
    }
    out
}
