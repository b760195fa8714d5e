//! Reverse-topological gradient accumulation over a recorded tape.

use super::kernels::{mm_nn, mm_nt, mm_tn, sigmoid};
use super::params::ParamSet;
use super::tape::{
    for_each_reduced_index, permute_data, reverse_axis0, MaskBoundary, Op, Tape, ValueId,
};
use super::tensor::Element;
use crate::error::{Error, Result};

impl<F: Element> Tape<F> {
    /// Propagate gradients from a scalar loss back to every reachable
    /// parameter, accumulating into `params` grad buffers. Calling this twice
    /// without `params.zero_grads()` in between adds the two gradients.
    pub fn backward(&self, loss: ValueId, params: &mut ParamSet<F>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.node_needs_grad(i) {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.step_backward(i, &g, &mut grads, params);
        }
        Ok(())
    }

    fn step_backward(
        &self,
        i: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        params: &mut ParamSet<F>,
    ) {
        // Accumulate `delta` into the grad buffer of `id` unless it is a
        // constant subgraph.
        macro_rules! acc {
            ($id:expr, $write:expr) => {
                if self.node_needs_grad($id.0) {
                    let numel = self.node_value($id.0).numel();
                    let buf = grads[$id.0].get_or_insert_with(|| vec![F::zero(); numel]);
                    let f: &mut dyn FnMut(&mut [F]) = &mut $write;
                    f(buf);
                }
            };
        }

        match self.node_op(ValueId(i)) {
            Op::Leaf => {}
            Op::Param(pid) => params.accumulate_grad(*pid, g),
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(a, |buf: &mut [F]| mm_nt(buf, g, bv, m, n, k));
                acc!(b, |buf: &mut [F]| mm_tn(buf, av, g, m, k, n));
            }
            Op::BatchMatMul { a, b, trans_a, trans_b } => {
                self.batch_matmul_backward(*a, *b, *trans_a, *trans_b, g, grads, params)
            }
            Op::Add { a, b } => {
                acc!(a, |buf: &mut [F]| add_into(buf, g));
                let bn = self.value(*b).numel();
                acc!(b, |buf: &mut [F]| {
                    for (idx, &gi) in g.iter().enumerate() {
                        buf[idx % bn] += gi;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc!(a, |buf: &mut [F]| add_into(buf, g));
                let bn = self.value(*b).numel();
                acc!(b, |buf: &mut [F]| {
                    for (idx, &gi) in g.iter().enumerate() {
                        buf[idx % bn] -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bn = bv.len();
                acc!(a, |buf: &mut [F]| {
                    for (idx, &gi) in g.iter().enumerate() {
                        buf[idx] += gi * bv[idx % bn];
                    }
                });
                acc!(b, |buf: &mut [F]| {
                    for (idx, &gi) in g.iter().enumerate() {
                        buf[idx % bn] += gi * av[idx];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                acc!(a, |buf: &mut [F]| {
                    for (bi, &gi) in buf.iter_mut().zip(g) {
                        *bi += gi * c;
                    }
                });
            }
            Op::AddScalar { a } => {
                acc!(a, |buf: &mut [F]| add_into(buf, g));
            }
            Op::Sigmoid { a } => {
                let y = self.node_value(i).data();
                acc!(a, |buf: &mut [F]| {
                    for (idx, &gi) in g.iter().enumerate() {
                        buf[idx] += gi * y[idx] * (F::one() - y[idx]);
                    }
                });
            }
            Op::Spike { a, v_th, width } => {
                let (v_th, w) = (*v_th, *width);
                let h = self.value(*a).data();
                acc!(a, |buf: &mut [F]| {
                    for (idx, &gi) in g.iter().enumerate() {
                        let s = sigmoid(w * (h[idx] - v_th));
                        buf[idx] += gi * w * s * (F::one() - s);
                    }
                });
            }
            Op::Stack { parts } => {
                let sn = if parts.is_empty() { 0 } else { self.value(parts[0]).numel() };
                for (j, p) in parts.iter().enumerate() {
                    let gs = &g[j * sn..(j + 1) * sn];
                    acc!(p, |buf: &mut [F]| add_into(buf, gs));
                }
            }
            Op::Index0 { a, index } => {
                let sn = g.len();
                let off = index * sn;
                acc!(a, |buf: &mut [F]| add_into(&mut buf[off..off + sn], g));
            }
            Op::Reshape { a } => {
                acc!(a, |buf: &mut [F]| add_into(buf, g));
            }
            Op::Permute { a, perm } => {
                let out_shape = self.node_value(i).shape();
                let mut inv = vec![0usize; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                let back = permute_data(g, out_shape, &inv);
                acc!(a, |buf: &mut [F]| add_into(buf, &back));
            }
            Op::SumAxes { a, axes } => {
                let in_shape = self.value(*a).shape().to_vec();
                let mut reduce = vec![false; in_shape.len()];
                for &ax in axes {
                    reduce[ax] = true;
                }
                acc!(a, |buf: &mut [F]| {
                    for_each_reduced_index(&in_shape, &reduce, |in_idx, out_idx| {
                        buf[in_idx] += g[out_idx];
                    });
                });
            }
            Op::ExpandLast { a, n } => {
                let n = *n;
                acc!(a, |buf: &mut [F]| {
                    for (idx, bi) in buf.iter_mut().enumerate() {
                        for j in 0..n {
                            *bi += g[idx * n + j];
                        }
                    }
                });
            }
            Op::TimeReverse { a } => {
                let shape = self.node_value(i).shape().to_vec();
                let back = reverse_axis0(g, &shape);
                acc!(a, |buf: &mut [F]| add_into(buf, &back));
            }
            Op::LogSoftmax { a } => {
                let y = self.node_value(i).data();
                let cols = *self.node_value(i).shape().last().unwrap();
                acc!(a, |buf: &mut [F]| {
                    for r in 0..y.len() / cols {
                        let row = r * cols;
                        let mut s = F::zero();
                        for c in 0..cols {
                            s += g[row + c];
                        }
                        for c in 0..cols {
                            buf[row + c] += g[row + c] - y[row + c].exp() * s;
                        }
                    }
                });
            }
            Op::EmaMask { alpha, steps, boundary } => {
                let a = self.value(*alpha).data()[0];
                let da = ema_mask_alpha_grad(a, *steps, *boundary, g);
                acc!(alpha, |buf: &mut [F]| buf[0] += da);
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                let c = invstd.len();
                let rows = g.len() / c;
                let xh = xhat.data();
                let gv = self.value(*gamma).data();

                let mut dbeta = vec![F::zero(); c];
                let mut dgamma = vec![F::zero(); c];
                for r in 0..rows {
                    for ch in 0..c {
                        let gi = g[r * c + ch];
                        dbeta[ch] += gi;
                        dgamma[ch] += gi * xh[r * c + ch];
                    }
                }
                acc!(beta, |buf: &mut [F]| add_into(buf, &dbeta));
                acc!(gamma, |buf: &mut [F]| add_into(buf, &dgamma));

                if *train {
                    let m = F::from_f64(rows as f64);
                    acc!(x, |buf: &mut [F]| {
                        for r in 0..rows {
                            for ch in 0..c {
                                let idx = r * c + ch;
                                let dxhat = g[idx] * gv[ch];
                                // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                                let term = m * dxhat
                                    - gv[ch] * dbeta[ch]
                                    - xh[idx] * gv[ch] * dgamma[ch];
                                buf[idx] += invstd[ch] / m * term;
                            }
                        }
                    });
                } else {
                    acc!(x, |buf: &mut [F]| {
                        for r in 0..rows {
                            for ch in 0..c {
                                let idx = r * c + ch;
                                buf[idx] += g[idx] * gv[ch] * invstd[ch];
                            }
                        }
                    });
                }
            }
        }
    }

    fn batch_matmul_backward(
        &self,
        a: ValueId,
        b: ValueId,
        trans_a: bool,
        trans_b: bool,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        params: &mut ParamSet<F>,
    ) {
        let _ = params;
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let groups = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let n = if trans_b { sb[1] } else { sb[2] };
        let (a_sl, b_sl) = (sa[1] * sa[2], sb[1] * sb[2]);
        let g_sl = m * n;
        let av = self.value(a).data();
        let bv = self.value(b).data();

        if self.node_needs_grad(a.0) {
            let numel = av.len();
            let buf = grads[a.0].get_or_insert_with(|| vec![F::zero(); numel]);
            for gi in 0..groups {
                let gsl = &g[gi * g_sl..(gi + 1) * g_sl];
                let bsl = &bv[gi * b_sl..(gi + 1) * b_sl];
                let da = &mut buf[gi * a_sl..(gi + 1) * a_sl];
                match (trans_a, trans_b) {
                    (false, false) => mm_nt(da, gsl, bsl, m, n, k),
                    (false, true) => mm_nn(da, gsl, bsl, m, n, k),
                    (true, false) => mm_nt(da, bsl, gsl, k, n, m),
                    (true, true) => {
                        let mut tmp = vec![F::zero(); m * k];
                        mm_nn(&mut tmp, gsl, bsl, m, n, k);
                        for r in 0..m {
                            for cc in 0..k {
                                da[cc * m + r] += tmp[r * k + cc];
                            }
                        }
                    }
                }
            }
        }
        if self.node_needs_grad(b.0) {
            let numel = bv.len();
            let buf = grads[b.0].get_or_insert_with(|| vec![F::zero(); numel]);
            for gi in 0..groups {
                let gsl = &g[gi * g_sl..(gi + 1) * g_sl];
                let asl = &av[gi * a_sl..(gi + 1) * a_sl];
                let db = &mut buf[gi * b_sl..(gi + 1) * b_sl];
                match (trans_a, trans_b) {
                    (false, false) => mm_tn(db, asl, gsl, m, k, n),
                    (false, true) => mm_tn(db, gsl, asl, m, n, k),
                    (true, false) => mm_nn(db, asl, gsl, k, m, n),
                    (true, true) => {
                        let mut tmp = vec![F::zero(); k * n];
                        mm_nn(&mut tmp, asl, gsl, k, m, n);
                        for r in 0..k {
                            for cc in 0..n {
                                db[cc * k + r] += tmp[r * n + cc];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into<F: Element>(buf: &mut [F], delta: &[F]) {
    for (b, &d) in buf.iter_mut().zip(delta) {
        *b += d;
    }
}

/// d(mask)/d(alpha), contracted with the upstream mask gradient.
fn ema_mask_alpha_grad<F: Element>(
    alpha: F,
    steps: usize,
    boundary: MaskBoundary,
    g: &[F],
) -> F {
    let om = F::one() - alpha;
    let mut total = F::zero();
    // om_pows[p] = (1-alpha)^p
    let mut om_pows = Vec::with_capacity(steps + 1);
    let mut p = F::one();
    for _ in 0..=steps {
        om_pows.push(p);
        p = p * om;
    }
    for i in 0..steps {
        // boundary column j = 0: d/da (1-a)^i = -i (1-a)^(i-1)
        let mut d0 = if i == 0 {
            F::zero()
        } else {
            -F::from_f64(i as f64) * om_pows[i - 1]
        };
        if boundary == MaskBoundary::LiteralDoubleCount {
            // extra term a*(1-a)^i at j = 0
            let extra = if i == 0 {
                F::one()
            } else {
                om_pows[i] - alpha * F::from_f64(i as f64) * om_pows[i - 1]
            };
            d0 += extra;
        }
        total += g[i * steps] * d0;
        for j in 1..=i {
            let k = i - j;
            // d/da a*(1-a)^k = (1-a)^k - a*k*(1-a)^(k-1)
            let d = if k == 0 {
                F::one()
            } else {
                om_pows[k] - alpha * F::from_f64(k as f64) * om_pows[k - 1]
            };
            total += g[i * steps + j] * d;
        }
    }
    total
}

