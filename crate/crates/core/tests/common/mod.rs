#![allow(dead_code)]

use jferc_core::gradcheck::{compare_gradients, finite_difference_gradients_with, GradCheckReport, Stencil};
use jferc_core::model::{EmotionModel, ModelConfig, ModelInput, TextFeatures};
use jferc_core::objectives::IclConfig;
use jferc_core::rng::SeededRng;
use jferc_core::{ParamStore, Tape, Tensor};

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

/// K random inputs, 3 text tokens (CLS + 2) and 4 audio patches each.
pub fn micro_inputs(cfg: &ModelConfig, k: usize, seed: u64) -> Vec<ModelInput> {
    let mut rng = SeededRng::new(seed);
    (0..k)
        .map(|_| {
            let ids = vec![2, 3 + rng.below(cfg.vocab_size - 3) as u32, 3 + rng.below(cfg.vocab_size - 3) as u32];
            let patches: Vec<f64> = (0..4 * cfg.patch_dim).map(|_| rng.range(0.0, 2.0)).collect();
            ModelInput {
                text: TextFeatures::Tokens(ids),
                patches: Tensor::new(&[4, cfg.patch_dim], patches).unwrap(),
            }
        })
        .collect()
}

/// Perturb every parameter with Gaussian noise. At init the joint MLP output
/// rows have variance near the layer-norm eps, which gives the loss kinks
/// narrower than any usable finite-difference step.
pub fn spread_params(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.normal() * std;
        }
    }
}

pub fn analytic_gradients(model: &EmotionModel, store: &ParamStore, inputs: &[&ModelInput], labels: &[usize], icl: &IclConfig) -> Vec<Vec<f64>> {
    let mut tape = Tape::new(store);
    let out = model.loss(&mut tape, inputs, labels, icl, icl.lambda).unwrap();
    let grads = tape.backward(out.total).unwrap();
    store
        .ids()
        .map(|id| grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()]))
        .collect()
}

/// Step for the five-point stencil on the micro model.
pub const MODEL_FD_STEP: f64 = 1e-3;

pub fn model_gradcheck(model: &EmotionModel, store: &mut ParamStore, inputs: &[&ModelInput], labels: &[usize], icl: &IclConfig) -> GradCheckReport {
    let analytic = analytic_gradients(model, store, inputs, labels, icl);
    let numeric = finite_difference_gradients_with(store, MODEL_FD_STEP, Stencil::FivePoint, |s| {
        let mut tape = Tape::new(s);
        let out = model.loss(&mut tape, inputs, labels, icl, icl.lambda)?;
        Ok(tape.scalar(out.total))
    })
    .unwrap();
    compare_gradients(&analytic, &numeric, 1e-8)
}
