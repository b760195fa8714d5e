//! Central finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit only; the model under test must be in relaxed mode so that
//! the loss is actually differentiable (finite differences of a hard
//! threshold are meaningless).

use super::params::ParamSet;
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (flat coordinate, analytic, numeric) of the worst coordinate
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param: Vec<ParamCheck>,
}

/// Coordinates per parameter beyond which the check subsamples.
pub const MAX_COORDS_PER_PARAM: usize = 64;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compare analytic gradients against central differences
/// `(f(p+h) - f(p-h)) / 2h`, coordinate by coordinate (subsampled to at most
/// [`MAX_COORDS_PER_PARAM`] per parameter, seeded selection).
///
/// `loss` must be a pure function of the parameter values. `analytic_grads`
/// populates `params` grad buffers once (typically one forward + backward).
/// `relaxed` asserts the caller put the model into relaxed mode.
pub fn grad_check(
    loss: impl Fn(&ParamSet<f64>) -> Result<f64>,
    analytic_grads: impl FnOnce(&mut ParamSet<f64>) -> Result<()>,
    params: &mut ParamSet<f64>,
    h: f64,
    seed: u64,
    relaxed: bool,
) -> Result<GradCheckReport> {
    if !relaxed {
        return Err(Error::contract(
            "grad_check requires relaxed mode: finite differences of a hard threshold are meaningless",
        ));
    }
    params.zero_grads();
    analytic_grads(params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, per_param: Vec::new() };

    for id in params.ids().collect::<Vec<_>>() {
        let numel = params.value(id).numel();
        let coords: Vec<usize> = if numel <= MAX_COORDS_PER_PARAM {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, MAX_COORDS_PER_PARAM).into_vec()
        };

        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_err: 0.0,
            coords_checked: coords.len(),
            worst: None,
        };
        for &c in &coords {
            let orig = params.value(id).data()[c];
            params.value_mut(id).data_mut()[c] = orig + h;
            let f_plus = loss(params)?;
            params.value_mut(id).data_mut()[c] = orig - h;
            let f_minus = loss(params)?;
            params.value_mut(id).data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = params.grad(id).data()[c];
            let e = rel_err(analytic, numeric);
            if e >= check.max_rel_err {
                check.max_rel_err = e;
                check.worst = Some((c, analytic, numeric));
            }
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.per_param.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::{Element, Tensor};

    #[test]
    fn requires_relaxed_mode() {
        let mut params = ParamSet::<f64>::new();
        params.register("w", Tensor::scalar(0.0)).unwrap();
        let err = grad_check(|_| Ok(0.0), |_| Ok(()), &mut params, 1e-4, 0, false);
        assert!(err.is_err());
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = ParamSet::<f64>::new();
        params.register("w", Tensor::zeros(vec![3])).unwrap();
        let report =
            grad_check(|_| Ok(42.0), |_| Ok(()), &mut params, 1e-4, 0, true).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    // f(theta) = 0.5 + 0.5*sigmoid(theta) at theta = 0: d/dtheta = 0.125.
    #[test]
    fn alpha_parameterization_closed_form() {
        let mut params = ParamSet::<f64>::new();
        let theta = params.register("theta", Tensor::scalar(0.0)).unwrap();

        let eval = |ps: &ParamSet<f64>| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let th = tape.param(ps, theta);
            let s = tape.sigmoid(th);
            let half = tape.scale(s, 0.5);
            let alpha = tape.add_scalar(half, 0.5);
            Ok(tape.value(alpha).item()?.into_f64())
        };
        let report = grad_check(
            eval,
            |ps: &mut ParamSet<f64>| {
                let mut tape = Tape::new();
                let th = tape.param(ps, theta);
                let s = tape.sigmoid(th);
                let half = tape.scale(s, 0.5);
                let alpha = tape.add_scalar(half, 0.5);
                tape.backward(alpha, ps)
            },
            &mut params,
            1e-4,
            7,
            true,
        )
        .unwrap();
        let analytic = params.grad(theta).data()[0];
        assert!((analytic - 0.125).abs() < 1e-12, "analytic {analytic}");
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
