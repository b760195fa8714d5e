//! Temporal enhanced attention: a T x T lower-triangular row-stochastic mask
//! built from one learnable scalar, applied along the time axis of the
//! value-bearing branch as a single matrix product — an exponential moving
//! average over history computed with no step-wise recursion.

use crate::error::{Error, Result};
use crate::neurons::{lif_sequence, LifParams};
use crate::numerics::{Element, MaskBoundary, ParamId, ParamSet, Tape, Tensor, ValueId};
use serde::{Deserialize, Serialize};

/// Fusion direction along the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalDirection {
    /// Past to present (the lower-triangular mask as written).
    #[default]
    Forward,
    /// Future to present: the time axis is reversed around the mask product.
    Backward,
}

/// One learnable scalar per TEA instance. The decay factor is derived as
/// `alpha = 0.5 + 0.5 * sigmoid(theta)`, so alpha stays in (0.5, 1.0) and
/// theta = 0 starts at alpha = 0.75.
#[derive(Clone, Copy, Debug)]
pub struct TeaParams {
    pub theta: ParamId,
}

impl TeaParams {
    pub fn register<F: Element>(
        params: &mut ParamSet<F>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let theta = params.register(name, Tensor::scalar(F::zero()))?;
        Ok(TeaParams { theta })
    }
}

pub fn alpha_of_theta(theta: f64) -> f64 {
    0.5 + 0.5 / (1.0 + (-theta).exp())
}

/// Record `alpha = 0.5 + 0.5 * sigmoid(theta)` on the tape.
pub fn alpha_node<F: Element>(tape: &mut Tape<F>, theta: ValueId) -> ValueId {
    let s = tape.sigmoid(theta);
    let half = tape.scale(s, F::from_f64(0.5));
    tape.add_scalar(half, F::from_f64(0.5))
}

/// Build the temporal mask from a scalar `alpha` node. Row i holds
/// `alpha (1-alpha)^(i-j)` for 1 <= j <= i and the boundary mass
/// `(1-alpha)^i` at j = 0; strictly zero above the diagonal. Differentiable
/// with respect to theta through `alpha`.
pub fn build_mask<F: Element>(
    tape: &mut Tape<F>,
    alpha: ValueId,
    t_steps: usize,
) -> Result<ValueId> {
    tape.ema_mask(alpha, t_steps, MaskBoundary::Ema)
}

/// The literal reading of the mask formula where both indicator terms fire
/// at (i >= j, j = 0). Rows then sum to `1 + alpha (1-alpha)^i`; kept only
/// for comparison in tests.
pub fn build_mask_literal<F: Element>(
    tape: &mut Tape<F>,
    alpha: ValueId,
    t_steps: usize,
) -> Result<ValueId> {
    tape.ema_mask(alpha, t_steps, MaskBoundary::LiteralDoubleCount)
}

/// Apply the mask along the leading time axis: `V~[i] = sum_j M[i,j] V[j]`,
/// one matrix product over flattened trailing axes. The output is
/// real-valued (a convex combination of spike frames).
pub fn apply_mask<F: Element>(tape: &mut Tape<F>, mask: ValueId, v: ValueId) -> Result<ValueId> {
    let mshape = tape.shape(mask).to_vec();
    let vshape = tape.shape(v).to_vec();
    if mshape.len() != 2 || mshape[0] != mshape[1] {
        return Err(Error::contract(format!("mask must be square, got {mshape:?}")));
    }
    if vshape.first() != Some(&mshape[0]) {
        return Err(Error::ShapeMismatch { op: "apply_mask", lhs: mshape, rhs: vshape });
    }
    let t_steps = vshape[0];
    let rest: usize = vshape[1..].iter().product();
    let flat = tape.reshape(v, vec![t_steps, rest])?;
    let fused = tape.matmul(mask, flat)?;
    tape.reshape(fused, vshape)
}

/// Full TEA branch on a value-bearing spike tensor `[T, ...]`: mask fusion
/// followed by a LIF pass that re-binarizes the convex combination so
/// downstream spike semantics hold. `Backward` reverses time around the
/// mask product, turning past-to-present fusion into future-to-present.
pub fn tea_branch<F: Element>(
    tape: &mut Tape<F>,
    x_value: ValueId,
    params: &ParamSet<F>,
    tea: &TeaParams,
    lif: &LifParams,
    direction: TemporalDirection,
) -> Result<ValueId> {
    let t_steps = *tape
        .shape(x_value)
        .first()
        .ok_or_else(|| Error::contract("tea_branch input must have a time axis"))?;
    let theta = tape.param(params, tea.theta);
    let alpha = alpha_node(tape, theta);
    let mask = build_mask(tape, alpha, t_steps)?;
    let fused = match direction {
        TemporalDirection::Forward => apply_mask(tape, mask, x_value)?,
        TemporalDirection::Backward => {
            let rev = tape.time_reverse(x_value)?;
            let fused = apply_mask(tape, mask, rev)?;
            tape.time_reverse(fused)?
        }
    };
    lif_sequence(tape, fused, lif)
}

/// Sequential oracle for the mask product: the step-wise recursion
/// `v~[i] = (1-alpha) v~[i-1] + alpha v[i]` with `v~[0] = v[0]`.
/// Test-only reference; intentionally shares no code with the mask path.
pub fn ema_reference(theta: f64, v: &Tensor<f64>) -> Tensor<f64> {
    let alpha = alpha_of_theta(theta);
    let t_steps = v.shape().first().copied().unwrap_or(0);
    let rest: usize = v.shape()[1..].iter().product();
    let mut out = v.clone();
    for i in 1..t_steps {
        for j in 0..rest {
            let prev = out.data()[(i - 1) * rest + j];
            let cur = v.data()[i * rest + j];
            out.data_mut()[i * rest + j] = (1.0 - alpha) * prev + alpha * cur;
        }
    }
    out
}
