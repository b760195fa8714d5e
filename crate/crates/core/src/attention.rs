//! Spiking attention variants operating on stacked spike tensors
//! `[T, B, N, D]`: quadratic spiking self-attention (SSA), spike-driven
//! aggregation (SDSA), linear-complexity QK token attention (QKTA), and the
//! recursive-query TIM baseline.

use crate::error::{Error, Result};
use crate::neurons::{lif_sequence, lif_single, LifParams};
use crate::numerics::{Element, Tape, ValueId};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Ssa,
    Sdsa,
    #[default]
    Qkta,
    Tim,
}

/// Fixed pre-LIF scaling for token-token products (the established choice
/// for spiking attention stacks).
pub const ATTENTION_SCALE: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub heads: usize,
    pub scale: f64,
    /// Recursion weight for TIM only; must lie in [0, 1].
    pub tim_alpha: f64,
    pub lif: LifParams,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::Qkta,
            heads: 1,
            scale: ATTENTION_SCALE,
            tim_alpha: 0.5,
            lif: LifParams::default(),
        }
    }
}

impl AttentionConfig {
    pub fn with_kind(kind: AttentionKind) -> Self {
        AttentionConfig { kind, ..Default::default() }
    }

    fn check_heads(&self, d: usize) -> Result<usize> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention heads",
                lhs: vec![d],
                rhs: vec![self.heads],
            });
        }
        Ok(d / self.heads)
    }
}

fn step_dims<F: Element>(tape: &Tape<F>, x: ValueId) -> Result<(usize, usize, usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::contract(format!(
            "attention expects [T, B, N, D], got {:?}",
            s
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// [B, N, D] -> [B*H, N, Dh] with head h owning channels [h*Dh, (h+1)*Dh).
fn split_heads<F: Element>(
    tape: &mut Tape<F>,
    x: ValueId,
    b: usize,
    n: usize,
    heads: usize,
    dh: usize,
) -> Result<ValueId> {
    let grouped = tape.reshape(x, vec![b, n, heads, dh])?;
    let swapped = tape.permute(grouped, &[0, 2, 1, 3])?;
    tape.reshape(swapped, vec![b * heads, n, dh])
}

/// Inverse of [`split_heads`].
fn merge_heads<F: Element>(
    tape: &mut Tape<F>,
    x: ValueId,
    b: usize,
    n: usize,
    heads: usize,
    dh: usize,
) -> Result<ValueId> {
    let grouped = tape.reshape(x, vec![b, heads, n, dh])?;
    let swapped = tape.permute(grouped, &[0, 2, 1, 3])?;
    tape.reshape(swapped, vec![b, n, heads * dh])
}

/// Pre-neuron SSA activation `A_t = Q_t K_t^T V_t * scale`, stacked over time.
pub fn ssa_preactivation<F: Element>(
    tape: &mut Tape<F>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    cfg: &AttentionConfig,
) -> Result<ValueId> {
    let (t_steps, b, n, d) = step_dims(tape, q)?;
    for other in [k, v] {
        if tape.shape(other) != tape.shape(q) {
            return Err(Error::ShapeMismatch {
                op: "ssa",
                lhs: tape.shape(q).to_vec(),
                rhs: tape.shape(other).to_vec(),
            });
        }
    }
    let dh = cfg.check_heads(d)?;
    let mut steps = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let qt = tape.index0(q, t)?;
        let kt = tape.index0(k, t)?;
        let vt = tape.index0(v, t)?;
        let qh = split_heads(tape, qt, b, n, cfg.heads, dh)?;
        let kh = split_heads(tape, kt, b, n, cfg.heads, dh)?;
        let vh = split_heads(tape, vt, b, n, cfg.heads, dh)?;
        let scores = tape.batch_matmul(qh, kh, false, true)?;
        let mixed = tape.batch_matmul(scores, vh, false, false)?;
        let scaled = tape.scale(mixed, F::from_f64(cfg.scale));
        steps.push(merge_heads(tape, scaled, b, n, cfg.heads, dh)?);
    }
    tape.stack(&steps)
}

/// SSA: `LIF(Q K^T V * scale)` with the neuron run along the time axis.
pub fn ssa_forward<F: Element>(
    tape: &mut Tape<F>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    cfg: &AttentionConfig,
) -> Result<ValueId> {
    let pre = ssa_preactivation(tape, q, k, v, cfg)?;
    lif_sequence(tape, pre, &cfg.lif)
}

/// SDSA: per-query scores `SUM_j Q_i . K_j` are spiked, then broadcast-gate
/// the value rows: `output = V A * scale`. The key sum is taken once per
/// head, so no N x N product is formed.
pub fn sdsa_forward<F: Element>(
    tape: &mut Tape<F>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    cfg: &AttentionConfig,
) -> Result<ValueId> {
    let (t_steps, b, n, d) = step_dims(tape, q)?;
    let dh = cfg.check_heads(d)?;
    let mut score_steps = Vec::with_capacity(t_steps);
    let mut v_heads = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let qt = tape.index0(q, t)?;
        let kt = tape.index0(k, t)?;
        let vt = tape.index0(v, t)?;
        let qh = split_heads(tape, qt, b, n, cfg.heads, dh)?;
        let kh = split_heads(tape, kt, b, n, cfg.heads, dh)?;
        v_heads.push(split_heads(tape, vt, b, n, cfg.heads, dh)?);
        // SUM(Q K^T) over keys == Q . (sum of key rows)
        let ksum = tape.sum_axes(kh, &[1])?;
        let ksum_col = tape.reshape(ksum, vec![b * cfg.heads, dh, 1])?;
        let scores = tape.batch_matmul(qh, ksum_col, false, false)?;
        score_steps.push(tape.reshape(scores, vec![b * cfg.heads, n])?);
    }
    let scores = tape.stack(&score_steps)?;
    let gates = lif_sequence(tape, scores, &cfg.lif)?;
    let mut out_steps = Vec::with_capacity(t_steps);
    for (t, &vh) in v_heads.iter().enumerate() {
        let gate_t = tape.index0(gates, t)?;
        let gate_full = tape.expand_last(gate_t, dh)?;
        let gate_full = tape.reshape(gate_full, vec![b * cfg.heads, n, dh])?;
        let gated = tape.mul(vh, gate_full)?;
        let scaled = tape.scale(gated, F::from_f64(cfg.scale));
        out_steps.push(merge_heads(tape, scaled, b, n, cfg.heads, dh)?);
    }
    tape.stack(&out_steps)
}

/// Per-step binary token mask of QKTA: row-sum the query channels per head,
/// spike the sums (fresh neuron per step), and use the spikes directly as
/// the selection mask. Shape `[B, N, H]`.
pub fn qkta_token_mask<F: Element>(
    tape: &mut Tape<F>,
    q_step: ValueId,
    cfg: &AttentionConfig,
) -> Result<ValueId> {
    let s = tape.shape(q_step).to_vec();
    if s.len() != 3 {
        return Err(Error::contract(format!(
            "qkta_token_mask expects [B, N, D], got {:?}",
            s
        )));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = cfg.check_heads(d)?;
    let grouped = tape.reshape(q_step, vec![b, n, cfg.heads, dh])?;
    let sums = tape.sum_axes(grouped, &[3])?;
    lif_single(tape, sums, &cfg.lif)
}

/// Expand a `[B, N, H]` token mask over head channels to `[B, N, D]`.
pub fn expand_token_mask<F: Element>(
    tape: &mut Tape<F>,
    mask: ValueId,
    dh: usize,
) -> Result<ValueId> {
    let s = tape.shape(mask).to_vec();
    let expanded = tape.expand_last(mask, dh)?;
    tape.reshape(expanded, vec![s[0], s[1], s[2] * dh])
}

/// QKTA: `X'_t = m_t (.) K_t` with the mask from [`qkta_token_mask`].
/// Complexity O(N D) per step; no token-token product is formed.
pub fn qkta_forward<F: Element>(
    tape: &mut Tape<F>,
    q: ValueId,
    k: ValueId,
    cfg: &AttentionConfig,
) -> Result<ValueId> {
    let (t_steps, b, n, d) = step_dims(tape, q)?;
    if tape.shape(k) != tape.shape(q) {
        return Err(Error::ShapeMismatch {
            op: "qkta",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let dh = cfg.check_heads(d)?;
    let mut steps = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let qt = tape.index0(q, t)?;
        let kt = tape.index0(k, t)?;
        let mask = qkta_token_mask(tape, qt, cfg)?;
        let mask_full = expand_token_mask(tape, mask, dh)?;
        debug_assert_eq!(tape.shape(mask_full), &[b, n, d]);
        steps.push(tape.mul(kt, mask_full)?);
    }
    tape.stack(&steps)
}

/// TIM query update: `Q'[0] = Q[0]`, `Q'[t] = (1-alpha) Q[t] + alpha
/// f(Q'[t-1])`. `f` is the step-wise extractor (identity in tests; a spiking
/// channel-mixing map in the model). Inherently sequential in t.
pub fn tim_update<F: Element>(
    tape: &mut Tape<F>,
    q: ValueId,
    alpha: f64,
    mut f: impl FnMut(&mut Tape<F>, ValueId) -> Result<ValueId>,
) -> Result<ValueId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!(
            "tim_update alpha must lie in [0,1], got {alpha}"
        )));
    }
    let t_steps = *tape
        .shape(q)
        .first()
        .ok_or_else(|| Error::contract("tim_update input must have a time axis"))?;
    let mut out = Vec::with_capacity(t_steps);
    out.push(tape.index0(q, 0)?);
    let a = F::from_f64(alpha);
    let one_minus = F::from_f64(1.0 - alpha);
    for t in 1..t_steps {
        let qt = tape.index0(q, t)?;
        let carried = f(tape, out[t - 1])?;
        let lhs = tape.scale(qt, one_minus);
        let rhs = tape.scale(carried, a);
        out.push(tape.add(lhs, rhs)?);
    }
    tape.stack(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn binary_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            if state >> 63 == 1 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn ssa_zero_query_is_silent() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(vec![2, 1, 3, 4]));
        let k = tape.constant(binary_tensor(vec![2, 1, 3, 4], 1));
        let v = tape.constant(binary_tensor(vec![2, 1, 3, 4], 2));
        let out = ssa_forward(&mut tape, q, k, v, &AttentionConfig::default()).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    // N = 1, D = 1, Q = K = V = 1: A = 0.125 < v_th, so no spike at t = 1.
    #[test]
    fn ssa_single_token_below_threshold() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let cfg = AttentionConfig::default();
        let pre = ssa_preactivation(&mut tape, one, one, one, &cfg).unwrap();
        assert_eq!(tape.value(pre).data(), &[0.125]);
        let out = ssa_forward(&mut tape, one, one, one, &cfg).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn ssa_preactivation_matches_triple_loop_oracle() {
        let (t_steps, b, n, d) = (2, 2, 5, 8);
        let cfg = AttentionConfig { heads: 2, ..Default::default() };
        let dh = d / cfg.heads;
        let (qt, kt, vt) = (
            binary_tensor(vec![t_steps, b, n, d], 11),
            binary_tensor(vec![t_steps, b, n, d], 12),
            binary_tensor(vec![t_steps, b, n, d], 13),
        );
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(qt.clone());
        let k = tape.constant(kt.clone());
        let v = tape.constant(vt.clone());
        let pre = ssa_preactivation(&mut tape, q, k, v, &cfg).unwrap();
        let got = tape.value(pre).data();

        let at = |t: usize, bb: usize, i: usize, c: usize, x: &Tensor<f64>| {
            x.data()[((t * b + bb) * n + i) * d + c]
        };
        for t in 0..t_steps {
            for bb in 0..b {
                for h in 0..cfg.heads {
                    for i in 0..n {
                        for c in 0..dh {
                            let mut acc = 0.0;
                            for j in 0..n {
                                let mut qk = 0.0;
                                for e in 0..dh {
                                    qk += at(t, bb, i, h * dh + e, &qt)
                                        * at(t, bb, j, h * dh + e, &kt);
                                }
                                acc += qk * at(t, bb, j, h * dh + c, &vt);
                            }
                            let got_v = got[((t * b + bb) * n + i) * d + h * dh + c];
                            let want = acc * cfg.scale;
                            assert_eq!(got_v, want, "t={t} b={bb} h={h} i={i} c={c}");
                            // integer count times scale
                            assert_eq!(want / cfg.scale, (want / cfg.scale).round());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sdsa_zero_query_silent_and_bounded_by_values() {
        let cfg = AttentionConfig::default();
        let mut tape = Tape::<f64>::new();
        let q0 = tape.constant(Tensor::zeros(vec![2, 1, 4, 4]));
        let k = tape.constant(binary_tensor(vec![2, 1, 4, 4], 3));
        let v = tape.constant(binary_tensor(vec![2, 1, 4, 4], 4));
        let out = sdsa_forward(&mut tape, q0, k, v, &cfg).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));

        // gate <= 1 bounds output elementwise by V * scale
        let q = tape.constant(binary_tensor(vec![2, 1, 4, 4], 5));
        let out = sdsa_forward(&mut tape, q, k, v, &cfg).unwrap();
        let vv = tape.value(v).data();
        for (o, &vi) in tape.value(out).data().iter().zip(vv) {
            assert!(*o <= vi * cfg.scale + 1e-12);
        }
    }

    #[test]
    fn sdsa_score_counts_all_key_matches() {
        // single query of ones against N all-ones keys: pre-LIF score = N * D
        let (n, d) = (3, 4);
        let cfg = AttentionConfig::default();
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::full(vec![1, 1, n, d], 1.0));
        let kh = tape.index0(q, 0).unwrap();
        let kh = split_heads(&mut tape, kh, 1, n, 1, d).unwrap();
        let ksum = tape.sum_axes(kh, &[1]).unwrap();
        let ksum_col = tape.reshape(ksum, vec![1, d, 1]).unwrap();
        let qh = tape.index0(q, 0).unwrap();
        let qh = split_heads(&mut tape, qh, 1, n, 1, d).unwrap();
        let scores = tape.batch_matmul(qh, ksum_col, false, false).unwrap();
        assert!(tape
            .value(scores)
            .data()
            .iter()
            .all(|&s| s == (n * d) as f64));
        let _ = cfg;
    }

    // Q = [[1,0,1],[0,0,0]], tau=2, v_th=1: s=[2,0] -> H=[1,0] -> m=[1,0];
    // K = [[1,1,0],[0,1,1]] -> X' = [[1,1,0],[0,0,0]]
    #[test]
    fn qkta_hand_stepped_mask() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(
            Tensor::new(vec![1, 1, 2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let k = tape.constant(
            Tensor::new(vec![1, 1, 2, 3], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
        );
        let out = qkta_forward(&mut tape, q, k, &AttentionConfig::default()).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn qkta_saturated_mask_passes_keys_through() {
        // all-ones queries with D/tau >= v_th select every token
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::full(vec![2, 1, 3, 4], 1.0));
        let k = tape.constant(binary_tensor(vec![2, 1, 3, 4], 6));
        let out = qkta_forward(&mut tape, q, k, &AttentionConfig::default()).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(k).data());
    }

    #[test]
    fn qkta_rows_are_key_rows_or_zero() {
        let cfg = AttentionConfig { heads: 1, ..Default::default() };
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(binary_tensor(vec![3, 2, 4, 4], 7));
        let k = tape.constant(binary_tensor(vec![3, 2, 4, 4], 8));
        let out = qkta_forward(&mut tape, q, k, &cfg).unwrap();
        let (ov, kv) = (tape.value(out).data(), tape.value(k).data());
        for row in 0..(3 * 2 * 4) {
            let o = &ov[row * 4..(row + 1) * 4];
            let krow = &kv[row * 4..(row + 1) * 4];
            assert!(o == krow || o.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tim_identity_cases() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(binary_tensor(vec![4, 2, 3], 9));
        let ident = |_t: &mut Tape<f64>, x: ValueId| Ok(x);

        let same = tim_update(&mut tape, q, 0.0, ident).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(q).data());

        let carry = tim_update(&mut tape, q, 1.0, ident).unwrap();
        let q0 = tape.value(q).data()[..6].to_vec();
        for t in 0..4 {
            assert_eq!(&tape.value(carry).data()[t * 6..(t + 1) * 6], &q0[..]);
        }

        assert!(tim_update(&mut tape, q, 1.5, ident).is_err());
    }

    #[test]
    fn tim_unrolled_two_steps() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = tim_update(&mut tape, q, 0.5, |_t, x| Ok(x)).unwrap();
        // Q'[1] = 0.5 q1 + 0.5 q0
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    // closed form: Q'[t] = (1-a) sum_{j=1..t} a^(t-j) Q[j] + a^t Q[0]
    #[test]
    fn tim_matches_geometric_closed_form() {
        for &alpha in &[0.0, 0.5, 1.0] {
            let t_steps = 8;
            let qt = binary_tensor(vec![t_steps, 3], 10);
            let mut tape = Tape::<f64>::new();
            let q = tape.constant(qt.clone());
            let out = tim_update(&mut tape, q, alpha, |_t, x| Ok(x)).unwrap();
            let got = tape.value(out).data();
            for t in 0..t_steps {
                for c in 0..3 {
                    let mut want = alpha.powi(t as i32) * qt.data()[c];
                    for j in 1..=t {
                        want += (1.0 - alpha)
                            * alpha.powi((t - j) as i32)
                            * qt.data()[j * 3 + c];
                    }
                    let g = got[t * 3 + c];
                    assert!((g - want).abs() < 1e-6, "alpha={alpha} t={t} c={c}: {g} vs {want}");
                }
            }
        }
    }

    #[test]
    fn batch_axis_never_mixes() {
        // permuting the batch permutes outputs identically
        let cfg = AttentionConfig { heads: 2, ..Default::default() };
        let (t_steps, b, n, d) = (2, 2, 3, 4);
        let q = binary_tensor(vec![t_steps, b, n, d], 21);
        let k = binary_tensor(vec![t_steps, b, n, d], 22);
        let v = binary_tensor(vec![t_steps, b, n, d], 23);

        let swap_batch = |x: &Tensor<f64>| {
            let mut out = x.clone();
            let stride = n * d;
            for t in 0..t_steps {
                for i in 0..stride {
                    let a = (t * b) * stride + i;
                    let bb = (t * b + 1) * stride + i;
                    out.data_mut().swap(a, bb);
                }
            }
            out
        };

        for kind in [AttentionKind::Ssa, AttentionKind::Sdsa, AttentionKind::Qkta] {
            let run = |qx: &Tensor<f64>, kx: &Tensor<f64>, vx: &Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let qi = tape.constant(qx.clone());
                let ki = tape.constant(kx.clone());
                let vi = tape.constant(vx.clone());
                let cfg = AttentionConfig { kind, ..cfg };
                let out = match kind {
                    AttentionKind::Ssa => ssa_forward(&mut tape, qi, ki, vi, &cfg).unwrap(),
                    AttentionKind::Sdsa => sdsa_forward(&mut tape, qi, ki, vi, &cfg).unwrap(),
                    AttentionKind::Qkta => qkta_forward(&mut tape, qi, ki, &cfg).unwrap(),
                    AttentionKind::Tim => unreachable!(),
                };
                tape.value(out).clone()
            };
            let base = run(&q, &k, &v);
            let swapped = run(&swap_batch(&q), &swap_batch(&k), &swap_batch(&v));
            assert_eq!(swap_batch(&base).data(), swapped.data(), "{kind:?}");
        }
    }
}
