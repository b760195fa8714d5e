//! Dataset ingestion and synthesis: IDX files, desk-scale reductions, row
//! serialization, and a synthetic temporal-order task that only temporal
//! models can solve.

mod idx;
mod order_task;
mod synth_digits;

pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use order_task::{gen_order_task, OrderTaskSpec};
pub use synth_digits::{generate_digits, write_digits_idx};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Static dataset: `[N, C, H, W]` inputs in [0,1] plus integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let s = self.inputs.shape();
        (s[1], s[2], s[3])
    }

    /// Copy rows `indices` into a batch tensor `[B, C, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (c, h, w) = self.sample_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("sized above"),
            labels,
        )
    }

    /// Contiguous head/tail split.
    pub fn split_at(&self, n: usize, head_tag: &str, tail_tag: &str) -> (Dataset, Dataset) {
        let (c, h, w) = self.sample_dims();
        let stride = c * h * w;
        let head = Dataset {
            inputs: Tensor::new(
                vec![n, c, h, w],
                self.inputs.data()[..n * stride].to_vec(),
            )
            .expect("split in range"),
            labels: self.labels[..n].to_vec(),
            split: head_tag.to_string(),
        };
        let tail = Dataset {
            inputs: Tensor::new(
                vec![self.len() - n, c, h, w],
                self.inputs.data()[n * stride..].to_vec(),
            )
            .expect("split in range"),
            labels: self.labels[n..].to_vec(),
            split: tail_tag.to_string(),
        };
        (head, tail)
    }
}

/// Time-major dataset `[T, N, C, H, W]`: already temporal, bypasses the
/// encoder.
#[derive(Clone, Debug)]
pub struct TemporalDataset {
    pub frames: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: String,
}

impl TemporalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn time_steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[2], s[3], s[4])
    }

    /// Gather a batch into `[T, B, C, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.frames.shape().to_vec();
        let (t_steps, n) = (s[0], s[1]);
        let stride: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(t_steps * indices.len() * stride);
        for t in 0..t_steps {
            for &i in indices {
                let off = (t * n + i) * stride;
                data.extend_from_slice(&self.frames.data()[off..off + stride]);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![t_steps, indices.len(), s[2], s[3], s[4]], data)
                .expect("sized above"),
            labels,
        )
    }

    pub fn split_at(&self, n: usize, head_tag: &str, tail_tag: &str) -> (TemporalDataset, TemporalDataset) {
        let s = self.frames.shape().to_vec();
        let (t_steps, total) = (s[0], s[1]);
        let stride: usize = s[2..].iter().product();
        let head_idx: Vec<usize> = (0..n).collect();
        let tail_idx: Vec<usize> = (n..total).collect();
        let make = |idx: &[usize], tag: &str| {
            let (frames, labels) = self.gather(idx);
            TemporalDataset { frames, labels, split: tag.to_string() }
        };
        let _ = (t_steps, stride);
        (make(&head_idx, head_tag), make(&tail_idx, tail_tag))
    }
}

/// Non-overlapping mean pooling by `factor` on every image.
pub fn downsample(dataset: &Dataset, factor: usize) -> Result<Dataset> {
    let (c, h, w) = dataset.sample_dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (nh, nw) = (h / factor, w / factor);
    let n = dataset.len();
    let mut out = vec![0.0f32; n * c * nh * nw];
    let norm = (factor * factor) as f32;
    for i in 0..n * c {
        let src = &dataset.inputs.data()[i * h * w..(i + 1) * h * w];
        let dst = &mut out[i * nh * nw..(i + 1) * nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(y * factor + dy) * w + x * factor + dx];
                    }
                }
                dst[y * nw + x] = acc / norm;
            }
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, c, nh, nw], out)?,
        labels: dataset.labels.clone(),
        split: dataset.split.clone(),
    })
}

/// Serialize each image row-by-row into a time-major sequence: step t
/// carries row t as a `1 x 1 x W` frame (T = H).
pub fn serialize_rows(dataset: &Dataset) -> Result<TemporalDataset> {
    let (c, h, w) = dataset.sample_dims();
    if c != 1 {
        return Err(Error::contract(format!(
            "row serialization expects single-channel images, got {c}"
        )));
    }
    let n = dataset.len();
    let mut out = vec![0.0f32; h * n * w];
    for t in 0..h {
        for i in 0..n {
            let src = &dataset.inputs.data()[i * h * w + t * w..i * h * w + (t + 1) * w];
            out[(t * n + i) * w..(t * n + i) * w + w].copy_from_slice(src);
        }
    }
    Ok(TemporalDataset {
        frames: Tensor::new(vec![h, n, 1, 1, w], out)?,
        labels: dataset.labels.clone(),
        split: dataset.split.clone(),
    })
}
