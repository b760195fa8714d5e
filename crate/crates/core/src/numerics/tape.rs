//! Eager reverse-mode tape: every operation records its inputs and saved
//! activations; `backward` replays the records in reverse and accumulates
//! gradients into the owning [`ParamSet`].

use super::kernels::{mm_nn, mm_nt, mm_tn, sigmoid};
use super::params::{ParamId, ParamSet};
use super::tensor::{strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Boundary handling for the exponential-moving-average mask.
///
/// `Ema` is the row-stochastic reading (first column carries the remaining
/// mass `(1-alpha)^i` alone). `LiteralDoubleCount` additionally fires the
/// geometric term at j = 0, which breaks row-stochasticity; it exists only so
/// tests can compare the two readings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskBoundary {
    #[default]
    Ema,
    LiteralDoubleCount,
}

#[derive(Clone, Debug)]
pub enum Op<F: Element> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    /// Per-slice matrix product over a shared leading group axis.
    /// `trans_*` interprets the operand slice as transposed.
    BatchMatMul {
        a: ValueId,
        b: ValueId,
        trans_a: bool,
        trans_b: bool,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        c: F,
    },
    AddScalar {
        a: ValueId,
    },
    Sigmoid {
        a: ValueId,
    },
    /// Hard threshold spike with sigmoid-derivative surrogate backward.
    Spike {
        a: ValueId,
        v_th: F,
        width: F,
    },
    Stack {
        parts: Vec<ValueId>,
    },
    Index0 {
        a: ValueId,
        index: usize,
    },
    Reshape {
        a: ValueId,
    },
    Permute {
        a: ValueId,
        perm: Vec<usize>,
    },
    SumAxes {
        a: ValueId,
        axes: Vec<usize>,
    },
    /// Repeat each element `n` times along a new trailing axis.
    ExpandLast {
        a: ValueId,
        n: usize,
    },
    TimeReverse {
        a: ValueId,
    },
    LogSoftmax {
        a: ValueId,
    },
    EmaMask {
        alpha: ValueId,
        steps: usize,
        boundary: MaskBoundary,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Tensor<F>,
        invstd: Vec<F>,
        train: bool,
    },
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded operation graph. Single-threaded per model instance; values are
/// immutable after creation.
pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Snapshot a parameter's current value as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> ValueId {
        self.push(params.value(id).clone(), Op::Param(id), true)
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        mm_nn(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs))
    }

    pub fn batch_matmul(
        &mut self,
        a: ValueId,
        b: ValueId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch { op: "batch_matmul", lhs: sa, rhs: sb });
        }
        let g = sa[0];
        let (m, k1) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k1 != k2 {
            return Err(Error::ShapeMismatch { op: "batch_matmul", lhs: sa, rhs: sb });
        }
        let k = k1;
        let mut out = vec![F::zero(); g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            let asl = &da[gi * sa[1] * sa[2]..(gi + 1) * sa[1] * sa[2]];
            let bsl = &db[gi * sb[1] * sb[2]..(gi + 1) * sb[1] * sb[2]];
            let osl = &mut out[gi * m * n..(gi + 1) * m * n];
            match (trans_a, trans_b) {
                (false, false) => mm_nn(osl, asl, bsl, m, k, n),
                (false, true) => mm_nt(osl, asl, bsl, m, k, n),
                (true, false) => mm_tn(osl, asl, bsl, k, m, n),
                (true, true) => {
                    // a^T * b^T; cold path, materialize a^T.
                    let mut at = vec![F::zero(); m * k];
                    for r in 0..k {
                        for c in 0..m {
                            at[c * k + r] = asl[r * m + c];
                        }
                    }
                    mm_nt(osl, &at, bsl, m, k, n);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_a, trans_b },
            needs,
        ))
    }

    // ---- pointwise ------------------------------------------------------

    fn broadcast_check(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn pointwise(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<ValueId> {
        self.broadcast_check(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let bn = bv.numel().max(1);
        let data: Vec<F> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bn]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    /// Elementwise sum; `b`'s shape must be a trailing suffix of `a`'s
    /// (leading-axis broadcast only).
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.pointwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.pointwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.pointwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: ValueId, c: F) -> ValueId {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Scale { a, c }, needs)
    }

    pub fn add_scalar(&mut self, a: ValueId, c: F) -> ValueId {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| x + c).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::AddScalar { a }, needs)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let data: Vec<F> = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid { a }, needs)
    }

    /// Heaviside spike 1[x >= v_th]; backward uses the sigmoid-derivative
    /// surrogate `width * s * (1 - s)` with `s = sigmoid(width * (x - v_th))`.
    pub fn spike(&mut self, a: ValueId, v_th: F, width: F) -> ValueId {
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x >= v_th { F::one() } else { F::zero() })
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Spike { a, v_th, width }, needs)
    }

    // ---- structure ------------------------------------------------------

    pub fn stack(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::contract("stack of zero tensors"));
        }
        let part_shape = self.shape(parts[0]).to_vec();
        let part_numel: usize = part_shape.iter().product();
        let mut data = Vec::with_capacity(parts.len() * part_numel);
        let mut needs = false;
        for &p in parts {
            if self.shape(p) != part_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: part_shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
            needs |= self.needs(p);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&part_shape);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Stack { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Select slice `index` along axis 0.
    pub fn index0(&mut self, a: ValueId, index: usize) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::contract(format!(
                "index0 {} out of bounds for shape {:?}",
                index, shape
            )));
        }
        let rest: Vec<usize> = shape[1..].to_vec();
        let slice: usize = rest.iter().product();
        let data = self.value(a).data()[index * slice..(index + 1) * slice].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(rest, data)?, Op::Index0 { a, index }, needs))
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let out = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, needs))
    }

    pub fn permute(&mut self, a: ValueId, perm: &[usize]) -> Result<ValueId> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!(
                "invalid permutation {:?} for rank {}",
                perm, rank
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(self.value(a).data(), &in_shape, perm);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute { a, perm: perm.to_vec() },
            needs,
        ))
    }

    /// Sum over the given axes (dropped from the output shape).
    pub fn sum_axes(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut reduce = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::contract(format!(
                    "sum axis {} out of range for shape {:?}",
                    ax, in_shape
                )));
            }
            reduce[ax] = true;
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduce[i]).map(|i| in_shape[i]).collect();
        let mut out = vec![F::zero(); out_shape.iter().product::<usize>().max(1)];
        for_each_reduced_index(&in_shape, &reduce, |in_idx, out_idx| {
            out[out_idx] += self.nodes[a.0].value.data()[in_idx];
        });
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::SumAxes { a, axes: axes.to_vec() },
            needs,
        ))
    }

    /// Full reduction to a scalar (shape []).
    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes)
    }

    pub fn mean_axes(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        let in_shape = self.shape(a).to_vec();
        let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, F::from_f64(1.0 / count as f64)))
    }

    pub fn expand_last(&mut self, a: ValueId, n: usize) -> Result<ValueId> {
        if n == 0 {
            return Err(Error::contract("expand_last with n = 0"));
        }
        let mut shape = self.shape(a).to_vec();
        shape.push(n);
        let mut data = Vec::with_capacity(self.value(a).numel() * n);
        for &x in self.value(a).data() {
            for _ in 0..n {
                data.push(x);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::ExpandLast { a, n }, needs))
    }

    /// Reverse along axis 0 (the time axis).
    pub fn time_reverse(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::contract("time_reverse of a scalar"));
        }
        let out = reverse_axis0(self.value(a).data(), &shape);
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::TimeReverse { a }, needs))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::contract("log_softmax of a scalar"));
        }
        let cols = *shape.last().unwrap();
        let data = self.value(a).data();
        let mut out = vec![F::zero(); data.len()];
        for (r, row) in data.chunks(cols).enumerate() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut acc = F::zero();
            for &x in row {
                acc += (x - max).exp();
            }
            let lse = max + acc.ln();
            for (c, &x) in row.iter().enumerate() {
                out[r * cols + c] = x - lse;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { a }, needs))
    }

    /// Build the T x T lower-triangular EMA mask from a scalar decay factor
    /// `alpha`: row i carries `alpha * (1-alpha)^(i-j)` for 1 <= j <= i and
    /// `(1-alpha)^i` at j = 0, so each row is a convex combination of history.
    pub fn ema_mask(
        &mut self,
        alpha: ValueId,
        steps: usize,
        boundary: MaskBoundary,
    ) -> Result<ValueId> {
        if steps < 1 {
            return Err(Error::contract("ema_mask requires T >= 1"));
        }
        if self.value(alpha).numel() != 1 {
            return Err(Error::contract("ema_mask alpha must be scalar"));
        }
        let a = self.value(alpha).data()[0];
        let one_minus = F::one() - a;
        let mut m = vec![F::zero(); steps * steps];
        for i in 0..steps {
            // boundary column j = 0
            let mut pow = F::one();
            for _ in 0..i {
                pow = pow * one_minus;
            }
            m[i * steps] = pow;
            if boundary == MaskBoundary::LiteralDoubleCount {
                m[i * steps] += a * pow;
            }
            for j in 1..=i {
                let mut p = F::one();
                for _ in 0..(i - j) {
                    p = p * one_minus;
                }
                m[i * steps + j] = a * p;
            }
        }
        let needs = self.needs(alpha);
        Ok(self.push(
            Tensor::new(vec![steps, steps], m)?,
            Op::EmaMask { alpha, steps, boundary },
            needs,
        ))
    }

    /// Batch normalization over the last (channel) axis; statistics pool over
    /// all leading axes jointly. `running` is updated in train mode only.
    pub fn batchnorm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running: &mut BnRunning<F>,
        train: bool,
        update_running: bool,
    ) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        let channels = *shape.last().ok_or_else(|| Error::contract("batchnorm of a scalar"))?;
        if self.value(gamma).numel() != channels || self.value(beta).numel() != channels {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if running.mean.len() != channels {
            return Err(Error::contract(format!(
                "batchnorm running stats length {} != channels {}",
                running.mean.len(),
                channels
            )));
        }
        let eps = F::from_f64(BN_EPS);
        let data = self.value(x).data();
        let rows = data.len() / channels;

        let (mean, var) = if train {
            let mut mean = vec![F::zero(); channels];
            for row in data.chunks(channels) {
                for (c, &v) in row.iter().enumerate() {
                    mean[c] += v;
                }
            }
            let inv_rows = F::from_f64(1.0 / rows as f64);
            for m in mean.iter_mut() {
                *m *= inv_rows;
            }
            let mut var = vec![F::zero(); channels];
            for row in data.chunks(channels) {
                for (c, &v) in row.iter().enumerate() {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v *= inv_rows;
            }
            if update_running {
                let mom = F::from_f64(BN_MOMENTUM);
                let keep = F::one() - mom;
                for c in 0..channels {
                    running.mean[c] = keep * running.mean[c] + mom * mean[c];
                    running.var[c] = keep * running.var[c] + mom * var[c];
                }
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };

        let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); data.len()];
        for (r, row) in data.chunks(channels).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                xhat[r * channels + c] = (v - mean[c]) * invstd[c];
            }
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![F::zero(); data.len()];
        for r in 0..rows {
            for c in 0..channels {
                out[r * channels + c] = gv[c] * xhat[r * channels + c] + bv[c];
            }
        }
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train },
            needs,
        ))
    }

    pub(crate) fn node_op(&self, id: ValueId) -> &Op<F> {
        &self.nodes[id.0].op
    }

    pub(crate) fn node_value(&self, idx: usize) -> &Tensor<F> {
        &self.nodes[idx].value
    }

    pub(crate) fn node_needs_grad(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running batch-norm statistics; initialized to mean 0, variance 1 so an
/// eval pass before any training step is well defined.
#[derive(Clone, Debug)]
pub struct BnRunning<F: Element> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Element> BnRunning<F> {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    pub fn cast<G: Element>(&self) -> BnRunning<G> {
        BnRunning {
            mean: self.mean.iter().map(|v| G::from_f64(v.into_f64())).collect(),
            var: self.var.iter().map(|v| G::from_f64(v.into_f64())).collect(),
        }
    }
}

pub(crate) fn permute_data<F: Element>(data: &[F], in_shape: &[usize], perm: &[usize]) -> Vec<F> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![F::zero(); data.len()];
    // out multi-index o[j] equals input index i[perm[j]]
    let mut idx = vec![0usize; in_shape.len()];
    for (flat, &v) in data.iter().enumerate() {
        let mut rem = flat;
        for (ax, &st) in in_strides.iter().enumerate() {
            idx[ax] = rem / st;
            rem %= st;
        }
        let mut out_flat = 0;
        for (j, &p) in perm.iter().enumerate() {
            out_flat += idx[p] * out_strides[j];
        }
        out[out_flat] = v;
    }
    out
}

pub(crate) fn reverse_axis0<F: Element>(data: &[F], shape: &[usize]) -> Vec<F> {
    let t = shape[0];
    let slice: usize = shape[1..].iter().product();
    let mut out = vec![F::zero(); data.len()];
    for i in 0..t {
        out[(t - 1 - i) * slice..(t - i) * slice].copy_from_slice(&data[i * slice..(i + 1) * slice]);
    }
    out
}

/// Visit every element of a tensor, yielding (input flat index, reduced
/// output flat index) with `reduce[ax]` axes dropped.
pub(crate) fn for_each_reduced_index(
    shape: &[usize],
    reduce: &[bool],
    mut f: impl FnMut(usize, usize),
) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let out_shape: Vec<usize> = (0..shape.len()).filter(|&i| !reduce[i]).map(|i| shape[i]).collect();
    let out_strides = strides_of(&out_shape);
    // per input axis: stride contribution in the output index space
    let mut contrib = vec![0usize; shape.len()];
    let mut oi = 0;
    for ax in 0..shape.len() {
        if !reduce[ax] {
            contrib[ax] = out_strides[oi];
            oi += 1;
        }
    }
    let mut idx = vec![0usize; shape.len()];
    let mut out_idx = 0usize;
    for flat in 0..numel {
        f(flat, out_idx);
        // odometer increment
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            out_idx += contrib[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out_idx -= contrib[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}
