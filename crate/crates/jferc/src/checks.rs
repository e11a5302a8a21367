//! Self-checks run by the `gradcheck` command and the acceptance suite.

use anyhow::{ensure, Result};
use jferc_core::gradcheck::{compare_gradients, finite_difference_gradients_with, GradCheckReport, Stencil};
use jferc_core::model::{EmotionModel, ModelConfig, ModelInput, TextFeatures};
use jferc_core::objectives::IclConfig;
use jferc_core::rng::SeededRng;
use jferc_core::{ParamStore, Tape, Tensor};

/// Step of the five-point stencil used on the full network.
pub const MODEL_FD_STEP: f64 = 1e-3;
/// Noise added to the initial parameters before checking. At init the joint
/// MLP outputs have variance close to the layer-norm eps, so the loss has
/// kinks narrower than any usable step.
pub const PARAM_SPREAD: f64 = 0.3;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// d=8, heads=2, N=2, J=2, C=3.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        model_dim: 8,
        heads: 2,
        extractor_heads: 2,
        ffn_dim: 16,
        n_blocks: 2,
        joint_len: 2,
        num_classes: 3,
        vocab_size: 6,
        patch_dim: 6,
        ..ModelConfig::default()
    }
}

/// `k` random inputs of 3 text tokens (CLS and two words) and 4 patches.
pub fn micro_inputs(cfg: &ModelConfig, k: usize, seed: u64) -> Vec<ModelInput> {
    let mut rng = SeededRng::new(seed);
    (0..k)
        .map(|_| {
            let word = |rng: &mut SeededRng| 3 + rng.below(cfg.vocab_size - 3) as u32;
            let ids = vec![2, word(&mut rng), word(&mut rng)];
            let patches: Vec<f64> = (0..4 * cfg.patch_dim).map(|_| rng.range(0.0, 2.0)).collect();
            ModelInput {
                text: TextFeatures::Tokens(ids),
                patches: Tensor::new(&[4, cfg.patch_dim], patches).expect("shape matches"),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub scalars: usize,
}

/// Reverse-mode against finite-difference gradients of the total loss
/// (classification plus contrastive) on the micro network with K = 4.
pub fn micro_gradcheck(seed: u64) -> Result<GradcheckOutcome> {
    let cfg = micro_config();
    let mut store = ParamStore::new();
    let model = EmotionModel::new(cfg.clone(), &mut store, &mut SeededRng::new(seed))?;
    let mut rng = SeededRng::new(seed).split(100);
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.normal() * PARAM_SPREAD;
        }
    }
    let inputs = micro_inputs(&cfg, 4, seed.wrapping_add(200));
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let labels = [0, 1, 0, 2];
    let icl = IclConfig::default();

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(&store);
        let out = model.loss(&mut tape, &refs, &labels, &icl, icl.lambda)?;
        ensure!(out.icl.is_some(), "contrastive term inactive");
        let grads = tape.backward(out.total)?;
        store
            .ids()
            .map(|id| grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()]))
            .collect()
    };
    let numeric = finite_difference_gradients_with(&mut store, MODEL_FD_STEP, Stencil::FivePoint, |s| {
        let mut tape = Tape::new(s);
        let out = model.loss(&mut tape, &refs, &labels, &icl, icl.lambda)?;
        Ok(tape.scalar(out.total))
    })?;
    let report = compare_gradients(&analytic, &numeric, 1e-8);
    let worst_param = store.name(store.ids().nth(report.param_index).expect("index in range")).to_string();
    Ok(GradcheckOutcome {
        report,
        worst_param,
        scalars: store.num_scalars(),
    })
}
