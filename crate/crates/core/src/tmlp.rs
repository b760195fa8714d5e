//! Temporal MLP: the up-projection is replaced by a gated recurrence that
//! runs from the last time step toward the first, so future hidden states
//! condition earlier ones; the down-projection and output batch norm are
//! kept.
//!
//! The recurrence applies single-step neurons (fresh state each r — time
//! flows against the membrane's own arrow there), while the output path
//! `Y_t = LIF(BN(W_o h_t))` runs a temporal neuron along ascending t.

use crate::error::{Error, Result};
use crate::layers::{linear, register_linear, BnLayer, Phase};
use crate::neurons::{lif_sequence, lif_single, LifMode, LifParams};
use crate::numerics::{Element, ParamId, ParamSet, Tape, Tensor, ValueId};
use crate::tea::TemporalDirection;
use rand_chacha::ChaCha8Rng;

pub const GATE_BIAS_INIT: f64 = -1.0;

/// Parameters of one temporal MLP: shared input projection `w_in` (d -> h),
/// gate maps `w_fx` (d -> h) and `w_fh` (h -> h) with bias, down projection
/// `w_o` (h -> d), output batch norm.
#[derive(Clone, Debug)]
pub struct TmlpLayer<F: Element> {
    pub w_in: ParamId,
    pub w_fx: ParamId,
    pub w_fh: ParamId,
    pub w_o: ParamId,
    pub gate_bias: ParamId,
    pub bn: BnLayer<F>,
    pub lif: LifParams,
    pub direction: TemporalDirection,
    /// Test hook: force every gate to a constant instead of the sigmoid.
    pub gate_override: Option<f64>,
    pub d_model: usize,
    pub hidden: usize,
}

pub struct TmlpOutput {
    pub y: ValueId,
    /// Hidden states in ascending time order (exposed for causality tests).
    pub hidden: Vec<ValueId>,
}

impl<F: Element> TmlpLayer<F> {
    pub fn register(
        params: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        hidden: usize,
        lif: LifParams,
        direction: TemporalDirection,
    ) -> Result<Self> {
        if hidden < d_model {
            return Err(Error::contract(format!(
                "tmlp hidden width {hidden} must be >= model width {d_model}"
            )));
        }
        let w_in = register_linear(params, rng, format!("{name}.w_in"), d_model, hidden)?;
        let w_fx = register_linear(params, rng, format!("{name}.w_fx"), d_model, hidden)?;
        let w_fh = register_linear(params, rng, format!("{name}.w_fh"), hidden, hidden)?;
        let gate_bias = params.register(
            format!("{name}.gate_bias"),
            Tensor::full(vec![hidden], F::from_f64(GATE_BIAS_INIT)),
        )?;
        let w_o = register_linear(params, rng, format!("{name}.w_o"), hidden, d_model)?;
        let bn = BnLayer::register(params, &format!("{name}.bn"), d_model)?;
        Ok(TmlpLayer {
            w_in,
            w_fx,
            w_fh,
            w_o,
            gate_bias,
            bn,
            lif,
            direction,
            gate_override: None,
            d_model,
            hidden,
        })
    }

    /// Forward over a stacked input `[T, ..., d]`. The recurrence order is
    /// decreasing r for `Backward` (the default), increasing r for
    /// `Forward`; it is inherently sequential either way.
    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        x: ValueId,
        phase: Phase,
    ) -> Result<TmlpOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() < 2 || *shape.last().unwrap() != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "tmlp",
                lhs: shape,
                rhs: vec![self.d_model],
            });
        }
        let t_steps = shape[0];
        if t_steps == 0 {
            return Err(Error::contract("tmlp requires T >= 1"));
        }
        let rows: usize = shape[1..shape.len() - 1].iter().product();

        let mut x_flat = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let xt = tape.index0(x, t)?;
            x_flat.push(tape.reshape(xt, vec![rows, self.d_model])?);
        }

        // visit order: anchor step first, then the gated recurrence
        let order: Vec<usize> = match self.direction {
            TemporalDirection::Backward => (0..t_steps).rev().collect(),
            TemporalDirection::Forward => (0..t_steps).collect(),
        };

        let mut hidden: Vec<Option<ValueId>> = vec![None; t_steps];
        let mut prev: Option<ValueId> = None;
        for &r in &order {
            let inject = linear(tape, params, x_flat[r], self.w_in)?;
            let h_r = match prev {
                None => lif_single(tape, inject, &self.lif)?,
                Some(h_prev) => {
                    let gate = match self.gate_override {
                        Some(gv) => tape.constant(Tensor::full(
                            vec![rows, self.hidden],
                            F::from_f64(gv),
                        )),
                        None => {
                            let gx = linear(tape, params, x_flat[r], self.w_fx)?;
                            let gh = linear(tape, params, h_prev, self.w_fh)?;
                            let pre = tape.add(gx, gh)?;
                            let bias = tape.param(params, self.gate_bias);
                            let pre = tape.add(pre, bias)?;
                            tape.sigmoid(pre)
                        }
                    };
                    // same gate value in both terms (single-gate design)
                    let carry = tape.mul(gate, h_prev)?;
                    let neg_gate = tape.scale(gate, -F::one());
                    let one_minus = tape.add_scalar(neg_gate, F::one());
                    let fresh = tape.mul(one_minus, inject)?;
                    let drive = tape.add(carry, fresh)?;
                    lif_single(tape, drive, &self.lif)?
                }
            };
            hidden[r] = Some(h_r);
            prev = Some(h_r);
        }
        let hidden: Vec<ValueId> = hidden.into_iter().map(|h| h.expect("all steps visited")).collect();

        // output path: Y_t = LIF(BN(W_o h_t)), batch norm pooled over all steps
        let stacked = tape.stack(&hidden)?;
        let flat = tape.reshape(stacked, vec![t_steps * rows, self.hidden])?;
        let down = linear(tape, params, flat, self.w_o)?;
        let normed = self.bn.forward(tape, params, down, phase)?;
        let per_step = tape.reshape(normed, vec![t_steps, rows, self.d_model])?;
        let y = lif_sequence(tape, per_step, &self.lif)?;
        let y = tape.reshape(y, shape)?;
        Ok(TmlpOutput { y, hidden })
    }

    pub fn cast<G: Element>(&self) -> TmlpLayer<G> {
        TmlpLayer {
            w_in: self.w_in,
            w_fx: self.w_fx,
            w_fh: self.w_fh,
            w_o: self.w_o,
            gate_bias: self.gate_bias,
            bn: self.bn.cast::<G>(),
            lif: self.lif,
            direction: self.direction,
            gate_override: self.gate_override,
            d_model: self.d_model,
            hidden: self.hidden,
        }
    }
}

/// Weights extracted for the reference implementation below.
pub struct TmlpRefWeights {
    pub w_in: Tensor<f64>,
    pub w_fx: Tensor<f64>,
    pub w_fh: Tensor<f64>,
    pub w_o: Tensor<f64>,
    pub gate_bias: Tensor<f64>,
    pub gamma: Tensor<f64>,
    pub beta: Tensor<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub lif: LifParams,
    pub direction: TemporalDirection,
    pub gate_override: Option<f64>,
}

impl TmlpRefWeights {
    pub fn extract<F: Element>(params: &ParamSet<F>, layer: &TmlpLayer<F>) -> Self {
        TmlpRefWeights {
            w_in: params.value(layer.w_in).cast(),
            w_fx: params.value(layer.w_fx).cast(),
            w_fh: params.value(layer.w_fh).cast(),
            w_o: params.value(layer.w_o).cast(),
            gate_bias: params.value(layer.gate_bias).cast(),
            gamma: params.value(layer.bn.gamma).cast(),
            beta: params.value(layer.bn.beta).cast(),
            running_mean: layer.bn.running.mean.iter().map(|v| v.into_f64()).collect(),
            running_var: layer.bn.running.var.iter().map(|v| v.into_f64()).collect(),
            lif: layer.lif,
            direction: layer.direction,
            gate_override: layer.gate_override,
        }
    }
}

/// Independent re-derivation of the temporal MLP used as an oracle: plain
/// nested loops, no tape, no code shared with [`TmlpLayer::forward`].
pub fn tmlp_reference(x: &Tensor<f64>, w: &TmlpRefWeights, train_stats: bool) -> Tensor<f64> {
    let shape = x.shape().to_vec();
    let t_steps = shape[0];
    let d = *shape.last().unwrap();
    let rows: usize = shape[1..shape.len() - 1].iter().product();
    let h = w.gate_bias.numel();

    let matvec_rows = |inp: &[f64], wm: &Tensor<f64>, din: usize, dout: usize| -> Vec<f64> {
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for j in 0..dout {
                let mut acc = 0.0;
                for p in 0..din {
                    acc += inp[r * din + p] * wm.data()[p * dout + j];
                }
                out[r * dout + j] = acc;
            }
        }
        out
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    // single-step neuron from rest
    let fire_once = |drive: &[f64]| -> Vec<f64> {
        drive
            .iter()
            .map(|&cur| {
                let mem = w.lif.v_rest + (cur - 0.0) / w.lif.tau;
                match w.lif.mode {
                    LifMode::Spiking => f64::from(mem >= w.lif.v_th),
                    LifMode::Relaxed => sig(w.lif.surrogate_width * (mem - w.lif.v_th)),
                }
            })
            .collect()
    };

    let step_input = |t: usize| &x.data()[t * rows * d..(t + 1) * rows * d];

    let order: Vec<usize> = match w.direction {
        TemporalDirection::Backward => (0..t_steps).rev().collect(),
        TemporalDirection::Forward => (0..t_steps).collect(),
    };
    let mut hidden: Vec<Vec<f64>> = vec![Vec::new(); t_steps];
    let mut prev: Option<usize> = None;
    for &r in &order {
        let inject = matvec_rows(step_input(r), &w.w_in, d, h);
        let h_r = match prev {
            None => fire_once(&inject),
            Some(p) => {
                let h_prev = &hidden[p];
                let mut drive = vec![0.0; rows * h];
                let gx = matvec_rows(step_input(r), &w.w_fx, d, h);
                let gh = matvec_rows(h_prev, &w.w_fh, h, h);
                for i in 0..rows * h {
                    let gate = match w.gate_override {
                        Some(gv) => gv,
                        None => sig(gx[i] + gh[i] + w.gate_bias.data()[i % h]),
                    };
                    drive[i] = gate * h_prev[i] + (1.0 - gate) * inject[i];
                }
                fire_once(&drive)
            }
        };
        hidden[r] = h_r;
        prev = Some(r);
    }

    // Y_t = LIF(BN(W_o h_t)) with statistics pooled over every step
    let mut down = vec![0.0; t_steps * rows * d];
    for t in 0..t_steps {
        let o = matvec_rows(&hidden[t], &w.w_o, h, d);
        down[t * rows * d..(t + 1) * rows * d].copy_from_slice(&o);
    }
    let all_rows = t_steps * rows;
    let (mean, var) = if train_stats {
        let mut mean = vec![0.0; d];
        for r in 0..all_rows {
            for c in 0..d {
                mean[c] += down[r * d + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= all_rows as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..all_rows {
            for c in 0..d {
                let dv = down[r * d + c] - mean[c];
                var[c] += dv * dv;
            }
        }
        for v in var.iter_mut() {
            *v /= all_rows as f64;
        }
        (mean, var)
    } else {
        (w.running_mean.clone(), w.running_var.clone())
    };
    let mut normed = vec![0.0; down.len()];
    for r in 0..all_rows {
        for c in 0..d {
            let xhat = (down[r * d + c] - mean[c]) / (var[c] + 1e-5).sqrt();
            normed[r * d + c] = w.gamma.data()[c] * xhat + w.beta.data()[c];
        }
    }

    // temporal neuron along ascending t
    let mut out = vec![0.0; normed.len()];
    let mut mem = vec![w.lif.v_rest; rows * d];
    for t in 0..t_steps {
        for i in 0..rows * d {
            let cur = normed[t * rows * d + i];
            let charged = mem[i] + (cur - (mem[i] - w.lif.v_rest)) / w.lif.tau;
            let (spike, next) = match w.lif.mode {
                LifMode::Spiking => {
                    if charged >= w.lif.v_th {
                        (1.0, w.lif.v_reset)
                    } else {
                        (0.0, charged)
                    }
                }
                LifMode::Relaxed => {
                    (sig(w.lif.surrogate_width * (charged - w.lif.v_th)), charged)
                }
            };
            out[t * rows * d + i] = spike;
            mem[i] = next;
        }
    }
    Tensor::new(shape, out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn make_layer(
        d: usize,
        hidden: usize,
        seed: u64,
        direction: TemporalDirection,
    ) -> (ParamSet<f64>, TmlpLayer<f64>) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = TmlpLayer::register(
            &mut params,
            &mut rng,
            "tmlp",
            d,
            hidden,
            LifParams::default(),
            direction,
        )
        .unwrap();
        (params, layer)
    }

    fn random_input(t_steps: usize, rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![t_steps, rows, d], |_| rng.gen_range(0.0..1.5))
    }

    #[test]
    fn forward_matches_reference_oracle() {
        for (direction, train_stats) in [
            (TemporalDirection::Backward, false),
            (TemporalDirection::Backward, true),
            (TemporalDirection::Forward, false),
        ] {
            let (params, mut layer) = make_layer(3, 6, 11, direction);
            let x = random_input(4, 5, 3, 17);
            let phase = if train_stats { Phase::GradCheck } else { Phase::Eval };

            let refw = TmlpRefWeights::extract(&params, &layer);
            let want = tmlp_reference(&x, &refw, train_stats);

            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(x);
            let out = layer.forward(&mut tape, &params, xi, phase).unwrap();
            for (g, w) in tape.value(out.y).data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-6, "{direction:?} train={train_stats}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn relaxed_mode_also_matches_reference() {
        let (params, mut layer) = make_layer(3, 6, 23, TemporalDirection::Backward);
        layer.lif = LifParams::relaxed();
        let x = random_input(3, 4, 3, 29);
        let refw = TmlpRefWeights::extract(&params, &layer);
        let want = tmlp_reference(&x, &refw, false);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x);
        let out = layer.forward(&mut tape, &params, xi, Phase::Eval).unwrap();
        for (g, w) in tape.value(out.y).data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn single_step_is_degenerate_sequence() {
        let (params, mut layer) = make_layer(3, 6, 31, TemporalDirection::Backward);
        let x = random_input(1, 4, 3, 37);
        let refw = TmlpRefWeights::extract(&params, &layer);
        let want = tmlp_reference(&x, &refw, false);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x);
        let out = layer.forward(&mut tape, &params, xi, Phase::Eval).unwrap();
        assert_eq!(tape.value(out.y).data(), want.data());
        assert_eq!(out.hidden.len(), 1);
    }

    #[test]
    fn zero_input_matches_reference_too() {
        let (params, mut layer) = make_layer(2, 4, 41, TemporalDirection::Backward);
        let x = Tensor::zeros(vec![3, 2, 2]);
        let refw = TmlpRefWeights::extract(&params, &layer);
        let want = tmlp_reference(&x, &refw, false);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x);
        let out = layer.forward(&mut tape, &params, xi, Phase::Eval).unwrap();
        assert_eq!(tape.value(out.y).data(), want.data());
    }

    #[test]
    fn saturated_gate_is_pure_backward_carry() {
        let (params, mut layer) = make_layer(3, 6, 43, TemporalDirection::Backward);
        layer.gate_override = Some(1.0);
        let x = random_input(3, 4, 3, 47);

        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x);
        let out = layer.forward(&mut tape, &params, xi, Phase::Eval).unwrap();
        // h_r = LIF(h_{r+1}) for r < T-1
        for r in (0..2).rev() {
            let h_next = out.hidden[r + 1];
            let want = lif_single(&mut tape, h_next, &layer.lif).unwrap();
            assert_eq!(
                tape.value(out.hidden[r]).data(),
                tape.value(want).data(),
                "r = {r}"
            );
        }
    }

    #[test]
    fn closed_gate_is_time_independent_mlp() {
        let (params, mut layer) = make_layer(3, 6, 53, TemporalDirection::Backward);
        layer.gate_override = Some(0.0);
        let x = random_input(3, 4, 3, 59);

        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.clone());
        let out = layer.forward(&mut tape, &params, xi, Phase::Eval).unwrap();
        // every h_r = LIF(W_in x_r), no backward flow
        for r in 0..3 {
            let xt = tape.constant(
                Tensor::new(vec![4, 3], x.data()[r * 12..(r + 1) * 12].to_vec()).unwrap(),
            );
            let inj = linear(&mut tape, &params, xt, layer.w_in).unwrap();
            let want = lif_single(&mut tape, inj, &layer.lif).unwrap();
            assert_eq!(tape.value(out.hidden[r]).data(), tape.value(want).data());
        }
    }

    #[test]
    fn hidden_states_ignore_earlier_inputs() {
        // backward recurrence: perturbing X at r < t leaves h_t unchanged
        let (params, mut layer) = make_layer(3, 6, 61, TemporalDirection::Backward);
        let x = random_input(4, 2, 3, 67);
        let mut perturbed = x.clone();
        // rewrite the whole time-0 frame so some spike is guaranteed to flip
        for v in &mut perturbed.data_mut()[..6] {
            *v += 50.0;
        }

        let run = |layer: &mut TmlpLayer<f64>, input: Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(input);
            let out = layer.forward(&mut tape, &params, xi, Phase::Eval).unwrap();
            out.hidden
                .iter()
                .map(|&h| tape.value(h).data().to_vec())
                .collect::<Vec<_>>()
        };
        let base = run(&mut layer, x);
        let moved = run(&mut layer, perturbed);
        for t in 1..4 {
            assert_eq!(base[t], moved[t], "h_{t} must not depend on x_0");
        }
        assert_ne!(base[0], moved[0], "h_0 should see its own input");
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let (params, layer) = make_layer(2, 4, 71, TemporalDirection::Backward);
        // probe the gate directly at spike-scale inputs
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![2, 2], 1.5));
        let gx = linear(&mut tape, &params, x, layer.w_fx).unwrap();
        let h = tape.constant(Tensor::full(vec![2, 4], 1.0));
        let gh = linear(&mut tape, &params, h, layer.w_fh).unwrap();
        let pre = tape.add(gx, gh).unwrap();
        let bias = tape.param(&params, layer.gate_bias);
        let pre = tape.add(pre, bias).unwrap();
        let gate = tape.sigmoid(pre);
        assert!(tape
            .value(gate)
            .data()
            .iter()
            .all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn outputs_are_binary_spikes() {
        let (params, mut layer) = make_layer(3, 6, 73, TemporalDirection::Backward);
        let x = random_input(4, 5, 3, 79);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x);
        let out = layer.forward(&mut tape, &params, xi, Phase::Train).unwrap();
        assert!(tape.value(out.y).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn gradients_reach_all_weight_matrices() {
        let (mut params, mut layer) = make_layer(3, 6, 83, TemporalDirection::Backward);
        let x = random_input(4, 5, 3, 89);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x);
        let out = layer.forward(&mut tape, &params, xi, Phase::Train).unwrap();
        let loss = tape.sum_all(out.y).unwrap();
        tape.backward(loss, &mut params).unwrap();
        for w in [layer.w_in, layer.w_fx, layer.w_fh, layer.w_o] {
            let norm: f64 = params.grad(w).data().iter().map(|g| g * g).sum();
            assert!(norm > 0.0, "dead parameter {}", params.name(w));
        }
    }

    #[test]
    fn rejects_zero_time_steps_and_narrow_hidden() {
        let (params, mut layer) = make_layer(3, 6, 97, TemporalDirection::Backward);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![0, 2, 3]));
        assert!(layer.forward(&mut tape, &params, x, Phase::Eval).is_err());

        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(TmlpLayer::register(
            &mut ps,
            &mut rng,
            "bad",
            8,
            4,
            LifParams::default(),
            TemporalDirection::Backward,
        )
        .is_err());
    }
}
