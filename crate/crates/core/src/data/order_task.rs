//! Synthetic temporal-order task: two fixed orthogonal patterns are placed
//! at two distinct random time steps; the label says which came first. The
//! multiset of frames is label-invariant by construction, so only temporal
//! order carries information — a time-pooled classifier sits at chance.

use super::TemporalDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct OrderTaskSpec {
    pub t_steps: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_samples: usize,
    /// Gaussian pixel noise level (clipped to [0,1] after addition).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for OrderTaskSpec {
    fn default() -> Self {
        OrderTaskSpec { t_steps: 8, grid_h: 8, grid_w: 8, n_samples: 1000, noise_sigma: 0.05, seed: 0 }
    }
}

/// Pattern A: all-ones left half. Pattern B: all-ones right half. Disjoint
/// supports, hence orthogonal as vectors.
pub fn patterns(grid_h: usize, grid_w: usize) -> (Vec<f32>, Vec<f32>) {
    let mut a = vec![0.0f32; grid_h * grid_w];
    let mut b = vec![0.0f32; grid_h * grid_w];
    for y in 0..grid_h {
        for x in 0..grid_w {
            if x < grid_w / 2 {
                a[y * grid_w + x] = 1.0;
            } else {
                b[y * grid_w + x] = 1.0;
            }
        }
    }
    (a, b)
}

pub fn gen_order_task(spec: &OrderTaskSpec) -> Result<TemporalDataset> {
    if spec.t_steps < 4 {
        return Err(Error::contract("order task requires T >= 4"));
    }
    if spec.grid_w < 2 {
        return Err(Error::contract("order task grid too narrow for two patterns"));
    }
    let (t_steps, h, w, n) = (spec.t_steps, spec.grid_h, spec.grid_w, spec.n_samples);
    let frame = h * w;
    let (pat_a, pat_b) = patterns(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut frames = vec![0.0f32; t_steps * n * frame];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let step_a = rng.gen_range(0..t_steps);
        let step_b = loop {
            let s = rng.gen_range(0..t_steps);
            if s != step_a {
                break s;
            }
        };
        labels.push(usize::from(step_a < step_b));
        for (step, pat) in [(step_a, &pat_a), (step_b, &pat_b)] {
            let off = (step * n + i) * frame;
            frames[off..off + frame].copy_from_slice(pat);
        }
        // independent pixel noise on every frame of the clip
        for t in 0..t_steps {
            let off = (t * n + i) * frame;
            for p in &mut frames[off..off + frame] {
                *p = (*p + (gaussian(&mut rng) * spec.noise_sigma) as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(TemporalDataset {
        frames: Tensor::new(vec![t_steps, n, 1, h, w], frames)?,
        labels,
        split: "order-task".into(),
    })
}

/// Standard-normal draw via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
