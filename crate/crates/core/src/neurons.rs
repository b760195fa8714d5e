//! Discrete-time Leaky Integrate-and-Fire neuron with hard reset.
//!
//! The membrane update is the forward-Euler form `H = v + (1/tau)(I - (v -
//! v_rest))`. Spiking mode thresholds hard (`S = 1[H >= v_th]`, reset to
//! `v_reset`) and uses a sigmoid-derivative surrogate in the backward pass;
//! relaxed mode replaces the threshold with `S = sigmoid(a(H - v_th))` and
//! skips the reset so the forward pass itself is differentiable and finite
//! differences are meaningful.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, Tensor, ValueId};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LifMode {
    #[default]
    Spiking,
    Relaxed,
}

/// Membrane constants. Defaults are the framework-conventional choice:
/// tau = 2, threshold 1, rest/reset 0, surrogate width 4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub v_rest: f64,
    pub v_reset: f64,
    pub surrogate_width: f64,
    pub mode: LifMode,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 2.0,
            v_th: 1.0,
            v_rest: 0.0,
            v_reset: 0.0,
            surrogate_width: 4.0,
            mode: LifMode::Spiking,
        }
    }
}

impl LifParams {
    pub fn relaxed() -> Self {
        LifParams { mode: LifMode::Relaxed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 1.0 {
            return Err(Error::contract(format!(
                "LIF tau must be >= 1.0 (decay 1/tau in (0,1]), got {}",
                self.tau
            )));
        }
        if self.v_th <= self.v_rest {
            return Err(Error::contract(format!(
                "LIF threshold {} must exceed resting potential {}",
                self.v_th, self.v_rest
            )));
        }
        Ok(())
    }
}

/// Per-unit membrane potentials for one forward pass. Lazily initialized to
/// `v_rest` on first use; never carried across separate forward calls.
#[derive(Debug, Default)]
pub struct LifState {
    v: Option<ValueId>,
}

impl LifState {
    pub fn new() -> Self {
        LifState { v: None }
    }

    pub fn membrane(&self) -> Option<ValueId> {
        self.v
    }
}

/// One membrane step: charge, fire, reset. Returns the spike tensor and
/// updates the state in place.
pub fn lif_step<F: Element>(
    tape: &mut Tape<F>,
    state: &mut LifState,
    input: ValueId,
    params: &LifParams,
) -> Result<ValueId> {
    params.validate()?;
    let shape = tape.shape(input).to_vec();
    let v = match state.v {
        Some(v) => {
            if tape.shape(v) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "lif_step",
                    lhs: tape.shape(v).to_vec(),
                    rhs: shape,
                });
            }
            v
        }
        None => tape.constant(Tensor::full(shape.clone(), F::from_f64(params.v_rest))),
    };

    // H = v + (1/tau) * (input - (v - v_rest))
    let inv_tau = F::from_f64(1.0 / params.tau);
    let drive = tape.sub(input, v)?;
    let drive = if params.v_rest != 0.0 {
        tape.add_scalar(drive, F::from_f64(params.v_rest))
    } else {
        drive
    };
    let scaled = tape.scale(drive, inv_tau);
    let h = tape.add(v, scaled)?;

    let v_th = F::from_f64(params.v_th);
    let width = F::from_f64(params.surrogate_width);
    let (spikes, v_next) = match params.mode {
        LifMode::Spiking => {
            let s = tape.spike(h, v_th, width);
            // v' = H * (1 - S) + v_reset * S
            let neg_s = tape.scale(s, -F::one());
            let one_minus_s = tape.add_scalar(neg_s, F::one());
            let mut v_next = tape.mul(h, one_minus_s)?;
            if params.v_reset != 0.0 {
                let reset = tape.scale(s, F::from_f64(params.v_reset));
                v_next = tape.add(v_next, reset)?;
            }
            (s, v_next)
        }
        LifMode::Relaxed => {
            let shifted = tape.add_scalar(h, -v_th);
            let pre = tape.scale(shifted, width);
            (tape.sigmoid(pre), h)
        }
    };
    state.v = Some(v_next);
    Ok(spikes)
}

/// Fold [`lif_step`] over the leading (time) axis of a stacked input with a
/// fresh state. Output is stacked the same way.
pub fn lif_sequence<F: Element>(
    tape: &mut Tape<F>,
    inputs: ValueId,
    params: &LifParams,
) -> Result<ValueId> {
    let t_steps = *tape
        .shape(inputs)
        .first()
        .ok_or_else(|| Error::contract("lif_sequence input must have a time axis"))?;
    if t_steps < 1 {
        return Err(Error::contract("lif_sequence requires T >= 1"));
    }
    let mut state = LifState::new();
    let mut spikes = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let x_t = tape.index0(inputs, t)?;
        spikes.push(lif_step(tape, &mut state, x_t, params)?);
    }
    tape.stack(&spikes)
}

/// Single-step threshold application from rest (fresh state each call).
pub fn lif_single<F: Element>(
    tape: &mut Tape<F>,
    input: ValueId,
    params: &LifParams,
) -> Result<ValueId> {
    let mut state = LifState::new();
    lif_step(tape, &mut state, input, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamSet;

    fn run_sequence(inputs: &[f64], params: &LifParams) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let mut state = LifState::new();
        let mut spikes = Vec::new();
        let mut membranes = Vec::new();
        for &x in inputs {
            let xv = tape.constant(Tensor::new(vec![1], vec![x]).unwrap());
            let s = lif_step(&mut tape, &mut state, xv, params).unwrap();
            spikes.push(tape.value(s).data()[0]);
            membranes.push(tape.value(state.membrane().unwrap()).data()[0]);
        }
        (spikes, membranes)
    }

    #[test]
    fn rest_stays_at_rest() {
        let (spikes, membranes) = run_sequence(&[0.0], &LifParams::default());
        assert_eq!(spikes, vec![0.0]);
        assert_eq!(membranes, vec![0.0]);
    }

    // v=0, input 2.5, tau=2: H = 1.25 >= 1 -> spike, hard reset to 0.
    #[test]
    fn suprathreshold_step_spikes_and_resets() {
        let (spikes, membranes) = run_sequence(&[2.5], &LifParams::default());
        assert_eq!(spikes, vec![1.0]);
        assert_eq!(membranes, vec![0.0]);
    }

    // Constant 0.8 drive converges toward 0.8 < v_th without ever spiking:
    // H sequence 0.4, 0.6, 0.7, 0.75, ...
    #[test]
    fn subthreshold_convergence_trace() {
        let (spikes, membranes) =
            run_sequence(&[0.8, 0.8, 0.8, 0.8, 0.8, 0.8], &LifParams::default());
        assert!(spikes.iter().all(|&s| s == 0.0));
        let expected = [0.4, 0.6, 0.7, 0.75, 0.775, 0.7875];
        for (m, e) in membranes.iter().zip(expected) {
            assert!((m - e).abs() < 1e-6, "membrane {m} vs {e}");
        }
        assert!(membranes.iter().all(|&m| m < 0.8));
    }

    // Reset between steps makes identical suprathreshold steps identical.
    #[test]
    fn reset_makes_steps_identical() {
        let (spikes, _) = run_sequence(&[2.5, 2.5], &LifParams::default());
        assert_eq!(spikes, vec![1.0, 1.0]);
    }

    #[test]
    fn sequence_of_one_equals_single_step() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(Tensor::new(vec![1, 2], vec![2.5, 0.3]).unwrap());
        let seq = lif_sequence(&mut tape, x, &LifParams::default()).unwrap();
        let single_in = tape.index0(x, 0).unwrap();
        let single = lif_single(&mut tape, single_in, &LifParams::default()).unwrap();
        assert_eq!(tape.value(seq).data(), tape.value(single).data());
    }

    #[test]
    fn all_zero_input_stays_silent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![4, 3]));
        let s = lif_sequence(&mut tape, x, &LifParams::default()).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spiking_outputs_are_binary_and_reset_exact() {
        let mut tape = Tape::<f64>::new();
        let mut state = LifState::new();
        let p = LifParams { v_reset: 0.25, ..Default::default() };
        let x = tape.constant(Tensor::new(vec![3], vec![5.0, -1.0, 2.3]).unwrap());
        let s = lif_step(&mut tape, &mut state, x, &p).unwrap();
        for &v in tape.value(s).data() {
            assert!(v == 0.0 || v == 1.0);
        }
        let m = tape.value(state.membrane().unwrap()).data();
        // spiking units sit exactly at v_reset
        assert_eq!(m[0], 0.25);
        assert_eq!(m[2], 0.25);
        // sub-threshold membranes stay below threshold
        assert!(m[1] < p.v_th);
    }

    #[test]
    fn relaxed_mode_bounded_and_monotone() {
        let p = LifParams::relaxed();
        let mut tape = Tape::<f64>::new();
        let xs: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.5).collect();
        let x = tape.constant(Tensor::new(vec![xs.len()], xs).unwrap());
        let s = lif_single(&mut tape, x, &p).unwrap();
        let out = tape.value(s).data();
        for w in out.windows(2) {
            assert!(w[1] > w[0], "relaxed output must be monotone in input");
        }
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    // |H - v_th| > 2 with width 4 puts relaxed and spiking within 1e-3.
    #[test]
    fn modes_agree_in_saturated_regime() {
        for &input in &[8.0, -6.0] {
            let mut spiking = None;
            let mut relaxed = None;
            for (mode, out) in [
                (LifMode::Spiking, &mut spiking),
                (LifMode::Relaxed, &mut relaxed),
            ] {
                let p = LifParams { mode, ..Default::default() };
                let mut tape = Tape::<f64>::new();
                let x = tape.constant(Tensor::new(vec![1], vec![input]).unwrap());
                let s = lif_single(&mut tape, x, &p).unwrap();
                *out = Some(tape.value(s).data()[0]);
            }
            let h = input / 2.0;
            assert!((h - 1.0).abs() > 2.0);
            assert!((spiking.unwrap() - relaxed.unwrap()).abs() < 0.001);
        }
    }

    #[test]
    fn surrogate_gradient_flows_through_hard_threshold() {
        let mut params = ParamSet::<f64>::new();
        let w = params
            .register("w", Tensor::new(vec![1], vec![1.9]).unwrap())
            .unwrap();
        let mut tape = Tape::<f64>::new();
        let wv = tape.param(&params, w);
        let s = lif_single(&mut tape, wv, &LifParams::default()).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss, &mut params).unwrap();
        // H = w/2 = 0.95; surrogate a*s*(1-s) at a(H-1) = -0.2, chained by dH/dw = 0.5
        let s_val = 1.0 / (1.0 + f64::exp(0.2));
        let expected = 4.0 * s_val * (1.0 - s_val) * 0.5;
        let got = params.grad(w).data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(LifParams { tau: 0.5, ..Default::default() }.validate().is_err());
        assert!(LifParams { v_th: 0.0, v_rest: 0.0, ..Default::default() }
            .validate()
            .is_err());
    }
}
