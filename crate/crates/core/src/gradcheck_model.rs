//! Whole-model gradient verification: a relaxed-mode toy model's loss is
//! checked against central finite differences in 64-bit arithmetic,
//! covering theta, gate weights, and every attention/MLP matrix.

use crate::error::{Error, Result};
use crate::layers::Phase;
use crate::model::{build_model, ForwardInput, Model, ModelConfig};
use crate::neurons::LifMode;
use crate::numerics::{grad_check, Element, GradCheckReport, ParamSet, Tape, Tensor};
use crate::training::cross_entropy_loss;

pub const GRADCHECK_STEP: f64 = 5e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// The standard toy configuration for gradient verification: two blocks,
/// d = 16, T = 4, 4 tokens, relaxed neurons.
pub fn toy_gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        time_steps: 4,
        in_channels: 1,
        image_h: 8,
        image_w: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        seed: 12,
        ..Default::default()
    };
    cfg.neuron.mode = LifMode::Relaxed;
    cfg
}

/// Deterministic input batch for the check.
fn probe_batch(cfg: &ModelConfig, batch: usize) -> (Tensor<f64>, Vec<usize>) {
    let frame = cfg.in_channels * cfg.image_h * cfg.image_w;
    let frames = Tensor::from_fn(vec![cfg.time_steps, batch, cfg.in_channels, cfg.image_h, cfg.image_w], |i| {
        // a fixed quasi-random drive with spike-scale magnitudes
        let x = ((i * 2654435761) % 97) as f64 / 97.0;
        if x > 0.6 {
            1.2 * x
        } else {
            0.1 * x
        }
    });
    let labels = (0..batch).map(|b| (b * (frame % 3 + 1)) % cfg.num_classes).collect();
    (frames, labels)
}

/// Evaluate the toy loss as a pure function of the parameters.
fn toy_loss(cfg: &ModelConfig, params: &ParamSet<f64>, with_grad: Option<&mut ParamSet<f64>>) -> Result<f64> {
    // fresh model each call so batch-norm state never leaks between
    // finite-difference evaluations
    let mut model: Model<f64> = build_model(cfg)?;
    for id in model.params.ids().collect::<Vec<_>>() {
        let src = params.value(id).clone();
        *model.params.value_mut(id) = src;
    }
    let (frames, labels) = probe_batch(cfg, 4);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, ForwardInput::Temporal(&frames), Phase::GradCheck)?;
    let loss = cross_entropy_loss(&mut tape, out.logits, &labels, 0.1)?;
    let value = tape.value(loss).item()?.into_f64();
    if let Some(grads) = with_grad {
        tape.backward(loss, &mut model.params)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            grads.accumulate_grad(id, model.params.grad(id).data());
        }
    }
    Ok(value)
}

/// Run the finite-difference verification on a relaxed-mode model config.
/// Errors if the config is not in relaxed mode.
pub fn gradcheck_model_with_step(
    cfg: &ModelConfig,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.neuron.mode != LifMode::Relaxed {
        return Err(Error::contract(
            "gradient verification requires relaxed-mode neurons (finite differences of a hard threshold are meaningless)",
        ));
    }
    let template: Model<f64> = build_model(cfg)?;
    let mut params = template.params.clone();
    grad_check(
        |p| toy_loss(cfg, p, None),
        |p: &mut ParamSet<f64>| {
            let snapshot = p.clone();
            toy_loss(cfg, &snapshot, Some(p))?;
            Ok(())
        },
        &mut params,
        h,
        seed,
        true,
    )
}

/// [`gradcheck_model_with_step`] at the default step size.
pub fn gradcheck_model(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    gradcheck_model_with_step(cfg, seed, GRADCHECK_STEP)
}
