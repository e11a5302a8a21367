//! Joint-based fusion: stacked blocks in which a text stream and an audio
//! stream exchange information only through short sequences of trainable
//! joint tokens.
//!
//! Per block, with audio stream `A` and text stream `T`:
//!
//! 1. `VTrans([A; v])` refreshes the joint `v`; its last `J` rows are `v̂`.
//! 2. `LTrans([T; MLP(v̂)])`, first `|T|` rows, is the new text stream.
//! 3. `LTrans′([T; v′])` refreshes the other joint `v′` into `v̂′`.
//! 4. `VTrans′([A; MLP′(v̂′)])`, first `|A|` rows, is the new audio stream.
//!
//! Both directions read the same layer-`l` streams. The joint rows emitted by
//! steps 2 and 4 are dropped, and every block owns fresh joints.

use alloc::format;

use crate::layers::{EncoderLayerParams, Mlp};
use crate::rng::SeededRng;
use crate::{Error, ParamId, ParamStore, Result, Tape, Var};

/// Default number of JF blocks.
pub const DEFAULT_BLOCKS: usize = 2;
/// Default joint length.
pub const DEFAULT_JOINT_LEN: usize = 4;

/// Which encoder family each stream passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Routing {
    /// The audio stream always flows through the vision-side encoders and
    /// the text stream through the language-side encoders.
    #[default]
    Fixed,
    /// Each block feeds `F_{m→t}` to the vision-side encoder and emits the
    /// next `F_{m→t}` from the language-side encoder, so the streams trade
    /// encoder families (and token counts) at every block.
    Literal,
}

/// The two joint sequences of one block, `[J, d]` each; absent when `J = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointVectors {
    pub v: Option<ParamId>,
    pub v_prime: Option<ParamId>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JFBlock {
    pub vtrans: EncoderLayerParams,
    pub ltrans: EncoderLayerParams,
    pub vtrans_prime: EncoderLayerParams,
    pub ltrans_prime: EncoderLayerParams,
    pub mlp: Mlp,
    pub mlp_prime: Mlp,
    pub joints: JointVectors,
}

impl JFBlock {
    /// Parameters are registered as `jf.<layer>.<component>.<tensor>`. The
    /// primed encoders start as copies of the unprimed ones.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        layer: usize,
        model_dim: usize,
        heads: usize,
        ffn_dim: usize,
        joint_len: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let p = format!("jf.{layer}");
        let vtrans = EncoderLayerParams::new(store, &format!("{p}.vtrans"), model_dim, heads, ffn_dim, std, rng)?;
        let ltrans = EncoderLayerParams::new(store, &format!("{p}.ltrans"), model_dim, heads, ffn_dim, std, rng)?;
        let vtrans_prime = vtrans.duplicate(store, &format!("{p}.vtrans_prime"));
        let ltrans_prime = ltrans.duplicate(store, &format!("{p}.ltrans_prime"));
        let mlp = Mlp::new(store, &format!("{p}.mlp"), model_dim, model_dim, model_dim, std, rng);
        let mlp_prime = Mlp::new(store, &format!("{p}.mlp_prime"), model_dim, model_dim, model_dim, std, rng);
        let joints = if joint_len == 0 {
            JointVectors {
                v: None,
                v_prime: None,
                len: 0,
            }
        } else {
            JointVectors {
                v: Some(store.normal(format!("{p}.joint.v"), &[joint_len, model_dim], std, rng)),
                v_prime: Some(store.normal(format!("{p}.joint_prime.v"), &[joint_len, model_dim], std, rng)),
                len: joint_len,
            }
        };
        Ok(Self {
            vtrans,
            ltrans,
            vtrans_prime,
            ltrans_prime,
            mlp,
            mlp_prime,
            joints,
        })
    }
}

/// `f_mt` is `F_{m→t}^l` and `f_tm` is `F_{t→m}^l`. Under fixed routing
/// `f_mt` is the text-shaped stream and `f_tm` the audio-shaped one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionState {
    pub f_mt: Var,
    pub f_tm: Var,
    pub layer: usize,
}

/// Layer-0 state from text features `[S, d]` (CLS at row 0) and projected
/// audio patches `[P, d]`. The audio stream gets the learned CLS row
/// `audio_cls` prepended.
pub fn init_fusion_state(tape: &mut Tape<'_>, text: Var, patches: Var, audio_cls: ParamId, routing: Routing) -> Result<FusionState> {
    let (s, dt) = tape.dims(text);
    let (p, da) = tape.dims(patches);
    if dt != da {
        return Err(Error::shape("init_fusion_state", &[s, dt], &[p, da]));
    }
    let cls = tape.param(audio_cls);
    let audio = tape.concat_rows(&[cls, patches])?;
    let (f_mt, f_tm) = match routing {
        Routing::Fixed => (text, audio),
        Routing::Literal => (audio, text),
    };
    Ok(FusionState { f_mt, f_tm, layer: 0 })
}

/// Run `[x; joint]` through `layer` and return the last `joint_len` rows.
fn refresh_joint(tape: &mut Tape<'_>, layer: &EncoderLayerParams, x: Var, joint: Var, eps: f64) -> Result<Var> {
    let n = tape.dims(x).0;
    let j = tape.dims(joint).0;
    let xj = tape.concat_rows(&[x, joint])?;
    let out = layer.forward(tape, xj, eps)?;
    tape.slice_rows(out, n, j)
}

/// Run `[x; joint]` through `layer` and keep the first `|x|` rows.
fn absorb_joint(tape: &mut Tape<'_>, layer: &EncoderLayerParams, x: Var, joint: Var, eps: f64) -> Result<Var> {
    let n = tape.dims(x).0;
    let xj = tape.concat_rows(&[x, joint])?;
    let out = layer.forward(tape, xj, eps)?;
    tape.slice_rows(out, 0, n)
}

pub fn jf_block_forward(tape: &mut Tape<'_>, state: FusionState, block: &JFBlock, routing: Routing, eps: f64) -> Result<FusionState> {
    // (stream read by VTrans, stream read by LTrans)
    let (vis_in, lang_in) = match routing {
        Routing::Fixed => (state.f_tm, state.f_mt),
        Routing::Literal => (state.f_mt, state.f_tm),
    };
    let (lang_out, vis_out) = match (block.joints.v, block.joints.v_prime) {
        (Some(v), Some(v_prime)) => {
            let d = tape.dims(vis_in).1;
            let v = tape.param(v);
            let jd = tape.dims(v).1;
            if jd != d {
                return Err(Error::shape("jf_block_forward", &[block.joints.len, jd], &[block.joints.len, d]));
            }
            let v_hat = refresh_joint(tape, &block.vtrans, vis_in, v, eps)?;
            let v_bar = block.mlp.forward(tape, v_hat)?;
            let lang_out = absorb_joint(tape, &block.ltrans, lang_in, v_bar, eps)?;

            let v_prime = tape.param(v_prime);
            let v_hat_prime = refresh_joint(tape, &block.ltrans_prime, lang_in, v_prime, eps)?;
            let v_bar_prime = block.mlp_prime.forward(tape, v_hat_prime)?;
            let vis_out = absorb_joint(tape, &block.vtrans_prime, vis_in, v_bar_prime, eps)?;
            (lang_out, vis_out)
        }
        _ => {
            let lang_out = block.ltrans.forward(tape, lang_in, eps)?;
            let vis_out = block.vtrans_prime.forward(tape, vis_in, eps)?;
            (lang_out, vis_out)
        }
    };
    // LTrans emits F_{m→t}^{l+1}; VTrans′ emits F_{t→m}^{l+1}.
    Ok(FusionState {
        f_mt: lang_out,
        f_tm: vis_out,
        layer: state.layer + 1,
    })
}

/// Apply every block in order; returns `(F_{m→t}^N, F_{t→m}^N)`.
pub fn fusion_forward(tape: &mut Tape<'_>, mut state: FusionState, blocks: &[JFBlock], routing: Routing, eps: f64) -> Result<(Var, Var)> {
    if blocks.is_empty() {
        return Err(Error::Config(
            "joint fusion needs at least one block; use late fusion to disable it".into(),
        ));
    }
    for block in blocks {
        state = jf_block_forward(tape, state, block, routing, eps)?;
    }
    Ok((state.f_mt, state.f_tm))
}

/// Row 0 of each final stream.
pub fn extract_cls(tape: &mut Tape<'_>, f_mt: Var, f_tm: Var) -> Result<(Var, Var)> {
    Ok((tape.row(f_mt, 0)?, tape.row(f_tm, 0)?))
}
