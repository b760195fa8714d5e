//! Static-to-spike encoders: direct, phase, rate, and time-to-first-spike.
//!
//! All four map a normalized input tensor (values in [0,1]) to a time-major
//! tensor with a new leading axis of length T. Direct repeats the intensity;
//! phase and TTFS emit graded amplitudes (weighted spikes) that the first LIF
//! layer re-binarizes; rate draws i.i.d. Bernoulli spikes from a
//! counter-based generator so results do not depend on batch order.

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Direct,
    Phase,
    Rate,
    Ttfs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub kind: EncoderKind,
    pub t_steps: usize,
    /// Only the rate encoder consumes randomness.
    pub seed: u64,
}

impl Default for EncodingSpec {
    fn default() -> Self {
        EncodingSpec { kind: EncoderKind::Direct, t_steps: 4, seed: 0 }
    }
}

impl EncodingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps < 1 {
            return Err(Error::contract("encoder requires T >= 1"));
        }
        Ok(())
    }
}

/// Dispatch on the encoder kind. Output shape is `[T, ...input shape]`.
pub fn encode<F: Element>(spec: &EncodingSpec, x: &Tensor<F>) -> Result<Tensor<F>> {
    spec.validate()?;
    match spec.kind {
        EncoderKind::Direct => encode_direct(x, spec.t_steps),
        EncoderKind::Phase => encode_phase(x, spec.t_steps),
        EncoderKind::Rate => encode_rate(x, spec.t_steps, spec.seed),
        EncoderKind::Ttfs => encode_ttfs(x, spec.t_steps),
    }
}

fn time_major_shape<F: Element>(x: &Tensor<F>, t_steps: usize) -> Vec<usize> {
    let mut shape = vec![t_steps];
    shape.extend_from_slice(x.shape());
    shape
}

/// S_t = x for every step: the intensity itself is repeated as a constant
/// input current.
pub fn encode_direct<F: Element>(x: &Tensor<F>, t_steps: usize) -> Result<Tensor<F>> {
    for (i, &v) in x.data().iter().enumerate() {
        let v = v.into_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range { value: v, index: i });
        }
    }
    let mut data = Vec::with_capacity(t_steps * x.numel());
    for _ in 0..t_steps {
        data.extend_from_slice(x.data());
    }
    Tensor::new(time_major_shape(x, t_steps), data)
}

/// 8-bit phase code: v = min(floor(256 x), 255); step t (1-based) addresses
/// bit 7-b of v with b = (t-1) mod 8 (MSB first) and emits amplitude
/// 2^-(b+1) when the bit is set. For T = 8 the emitted amplitudes sum to
/// exactly v/256.
pub fn encode_phase<F: Element>(x: &Tensor<F>, t_steps: usize) -> Result<Tensor<F>> {
    let n = x.numel();
    let mut data = vec![F::zero(); t_steps * n];
    for (i, &v) in x.data().iter().enumerate() {
        let clamped = v.into_f64().clamp(0.0, 1.0);
        let byte = ((256.0 * clamped).floor() as u32).min(255) as u8;
        for t in 0..t_steps {
            let b = t % 8;
            if byte >> (7 - b) & 1 == 1 {
                data[t * n + i] = F::from_f64(f64::powi(2.0, -((b + 1) as i32)));
            }
        }
    }
    Tensor::new(time_major_shape(x, t_steps), data)
}

/// Bernoulli(x) spikes, i.i.d. across steps and pixels. The generator is
/// counter-based and keyed by (seed, step, pixel index), so the draw for a
/// given element never depends on how the data is batched.
pub fn encode_rate<F: Element>(x: &Tensor<F>, t_steps: usize, seed: u64) -> Result<Tensor<F>> {
    let n = x.numel();
    let mut data = vec![F::zero(); t_steps * n];
    for (i, &v) in x.data().iter().enumerate() {
        let p = v.into_f64().clamp(0.0, 1.0);
        for t in 0..t_steps {
            if counter_uniform(seed, t as u64, i as u64) < p {
                data[t * n + i] = F::one();
            }
        }
    }
    Tensor::new(time_major_shape(x, t_steps), data)
}

/// Time-to-first-spike: each pixel fires at most once at step
/// t* = 1 + floor((1-x) T) with amplitude 1/t*; x = 0 gives t* = T+1 and
/// stays silent rather than being clamped onto the final step.
pub fn encode_ttfs<F: Element>(x: &Tensor<F>, t_steps: usize) -> Result<Tensor<F>> {
    let n = x.numel();
    let mut data = vec![F::zero(); t_steps * n];
    for (i, &v) in x.data().iter().enumerate() {
        let clamped = v.into_f64().clamp(0.0, 1.0);
        let t_star = 1 + ((1.0 - clamped) * t_steps as f64).floor() as usize;
        if t_star <= t_steps {
            data[(t_star - 1) * n + i] = F::from_f64(1.0 / t_star as f64);
        }
    }
    Tensor::new(time_major_shape(x, t_steps), data)
}

/// Encode a batch `[B, ...]` image by image into `[T, B, ...]`. Each sample
/// is keyed by its own stable `sample_keys` entry (dataset index, not batch
/// position), so rate draws are independent of how samples are batched.
pub fn encode_batch<F: Element>(
    spec: &EncodingSpec,
    images: &Tensor<F>,
    sample_keys: &[u64],
) -> Result<Tensor<F>> {
    spec.validate()?;
    let batch = *images
        .shape()
        .first()
        .ok_or_else(|| Error::contract("encode_batch input must have a batch axis"))?;
    if sample_keys.len() != batch {
        return Err(Error::contract(format!(
            "encode_batch got {} sample keys for batch {}",
            sample_keys.len(),
            batch
        )));
    }
    let image_shape: Vec<usize> = images.shape()[1..].to_vec();
    let pixels: usize = image_shape.iter().product();
    let t_steps = spec.t_steps;

    let mut out_shape = vec![t_steps, batch];
    out_shape.extend_from_slice(&image_shape);
    let mut data = vec![F::zero(); t_steps * batch * pixels];
    for (b, &key) in sample_keys.iter().enumerate() {
        let img = Tensor::new(
            image_shape.clone(),
            images.data()[b * pixels..(b + 1) * pixels].to_vec(),
        )?;
        let per_sample_spec = EncodingSpec {
            seed: spec.seed ^ key.wrapping_mul(0x9e3779b97f4a7c15),
            ..*spec
        };
        let enc = encode(&per_sample_spec, &img)?;
        for t in 0..t_steps {
            let dst = (t * batch + b) * pixels;
            data[dst..dst + pixels].copy_from_slice(&enc.data()[t * pixels..(t + 1) * pixels]);
        }
    }
    Tensor::new(out_shape, data)
}

/// First spike step (1-based) under TTFS, if any.
pub fn ttfs_spike_step(x: f64, t_steps: usize) -> Option<usize> {
    let t_star = 1 + ((1.0 - x.clamp(0.0, 1.0)) * t_steps as f64).floor() as usize;
    (t_star <= t_steps).then_some(t_star)
}

/// Deterministic uniform draw in [0,1) from a splitmix64-style mix of
/// (seed, step, element index).
fn counter_uniform(seed: u64, t: u64, idx: u64) -> f64 {
    let mut z = seed
        .wrapping_add(t.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(idx.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
