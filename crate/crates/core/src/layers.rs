//! Small shared building blocks: batch-norm layer state, parameter
//! initialization, and the forward phase switch.

use crate::error::Result;
use crate::numerics::{BnRunning, Element, ParamId, ParamSet, Tape, Tensor, ValueId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Controls batch-norm statistics and side effects for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, running buffers updated.
    Train,
    /// Running statistics, no side effects.
    Eval,
    /// Batch statistics without touching running buffers: keeps the loss a
    /// pure function of the parameters for finite-difference checks.
    GradCheck,
}

impl Phase {
    pub fn train_stats(self) -> bool {
        matches!(self, Phase::Train | Phase::GradCheck)
    }

    pub fn update_running(self) -> bool {
        matches!(self, Phase::Train)
    }
}

/// Batch normalization over the trailing channel axis with learnable
/// scale/shift and running statistics (scale 1, shift 0, mean 0, var 1 at
/// init).
#[derive(Clone, Debug)]
pub struct BnLayer<F: Element> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BnRunning<F>,
    pub channels: usize,
}

impl<F: Element> BnLayer<F> {
    pub fn register(params: &mut ParamSet<F>, name: &str, channels: usize) -> Result<Self> {
        let gamma = params.register(format!("{name}.gamma"), Tensor::full(vec![channels], F::one()))?;
        let beta = params.register(format!("{name}.beta"), Tensor::zeros(vec![channels]))?;
        Ok(BnLayer { gamma, beta, running: BnRunning::new(channels), channels })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        x: ValueId,
        phase: Phase,
    ) -> Result<ValueId> {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.batchnorm(
            x,
            gamma,
            beta,
            &mut self.running,
            phase.train_stats(),
            phase.update_running(),
        )
    }

    pub fn cast<G: Element>(&self) -> BnLayer<G> {
        BnLayer {
            gamma: self.gamma,
            beta: self.beta,
            running: self.running.cast::<G>(),
            channels: self.channels,
        }
    }
}

/// Kaiming-style fan-in uniform init: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<F: Element>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    shape: Vec<usize>,
) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::from_f64(rng.gen_range(-bound..bound)))
}

/// Register a weight matrix `[fan_in, fan_out]` with fan-in uniform init.
pub fn register_linear<F: Element>(
    params: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    name: impl Into<String>,
    fan_in: usize,
    fan_out: usize,
) -> Result<ParamId> {
    let w = kaiming_uniform(rng, fan_in, vec![fan_in, fan_out]);
    params.register(name, w)
}

/// x [rows, in] * W [in, out]
pub fn linear<F: Element>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    x: ValueId,
    w: ParamId,
) -> Result<ValueId> {
    let wv = tape.param(params, w);
    tape.matmul(x, wv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let wa = kaiming_uniform::<f32>(&mut a, 16, vec![16, 8]);
        let wb = kaiming_uniform::<f32>(&mut b, 16, vec![16, 8]);
        assert_eq!(wa.data(), wb.data());
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(wa.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn bn_train_normalizes_then_eval_uses_running() {
        let mut params = ParamSet::<f64>::new();
        let mut bn = BnLayer::register(&mut params, "bn", 2).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 3.0, 30.0, 5.0, 50.0, 7.0, 70.0]).unwrap();

        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x);
        let y = bn.forward(&mut tape, &params, xi, Phase::Train).unwrap();
        // per-channel mean ~0, var ~1 with scale 1 shift 0
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| tape.value(y).data()[r * 2 + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running buffers moved toward the batch statistics
        assert!(bn.running.mean[0] > 0.0);
        assert!(bn.running.var[1] > 1.0);
    }

    #[test]
    fn bn_eval_before_any_training_is_identity_normalization() {
        let mut params = ParamSet::<f64>::new();
        let mut bn = BnLayer::register(&mut params, "bn", 3).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let y = bn.forward(&mut tape, &params, x, Phase::Eval).unwrap();
        // mean 0, var 1 running stats: y = x / sqrt(1 + eps)
        let denom = (1.0f64 + 1e-5).sqrt();
        for (yi, xi) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((yi - xi / denom).abs() < 1e-12);
        }
    }
}
