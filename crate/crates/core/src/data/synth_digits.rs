//! Deterministic synthetic digit images in the MNIST layout (28x28, ten
//! classes), for offline runs where the real IDX files are unavailable.
//! Seven-segment glyphs with random shift, scale, stroke intensity, and
//! pixel noise; written to disk in canonical IDX format on request.

use super::{write_idx, Dataset};
use crate::error::Result;
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const DIGIT_SIDE: usize = 28;

// seven-segment endpoints in a unit box: (x0, y0, x1, y1)
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.2, 0.08, 0.8, 0.08), // A top
    (0.8, 0.08, 0.8, 0.5),  // B upper right
    (0.8, 0.5, 0.8, 0.92),  // C lower right
    (0.2, 0.92, 0.8, 0.92), // D bottom
    (0.2, 0.5, 0.2, 0.92),  // E lower left
    (0.2, 0.08, 0.2, 0.5),  // F upper left
    (0.2, 0.5, 0.8, 0.5),   // G middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn dist_to_segment(px: f64, py: f64, seg: (f64, f64, f64, f64)) -> f64 {
    let (x0, y0, x1, y1) = seg;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Generate `n` labeled digit images `[n, 1, 28, 28]`, classes balanced in
/// round-robin order before the seeded appearance jitter.
pub fn generate_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = DIGIT_SIDE;
    let mut data = vec![0.0f32; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        labels.push(digit);
        let scale = rng.gen_range(0.75..1.05) * side as f64;
        let off_x = rng.gen_range(-3.0..3.0) + (side as f64 - scale) / 2.0;
        let off_y = rng.gen_range(-3.0..3.0) + (side as f64 - scale) / 2.0;
        let intensity = rng.gen_range(0.65..1.0);
        let thickness = rng.gen_range(0.05..0.09);
        let img = &mut data[i * side * side..(i + 1) * side * side];
        for y in 0..side {
            for x in 0..side {
                // map pixel center back into glyph box coordinates
                let gx = (x as f64 + 0.5 - off_x) / scale;
                let gy = (y as f64 + 0.5 - off_y) / scale;
                let mut best = f64::INFINITY;
                for &s in DIGIT_SEGMENTS[digit] {
                    best = best.min(dist_to_segment(gx, gy, SEGMENTS[s]));
                }
                let ink = if best < thickness {
                    1.0
                } else if best < thickness * 2.0 {
                    // soft edge
                    1.0 - (best - thickness) / thickness
                } else {
                    0.0
                };
                let noise = rng.gen_range(-0.04..0.04);
                img[y * side + x] = ((ink * intensity + noise) as f32).clamp(0.0, 1.0);
            }
        }
    }
    Dataset {
        inputs: Tensor::new(vec![n, 1, side, side], data).expect("sized above"),
        labels,
        split: "synthetic-digits".into(),
    }
}

/// Generate and persist as an IDX image/label pair.
pub fn write_digits_idx(n: usize, seed: u64, images_path: &Path, labels_path: &Path) -> Result<()> {
    let ds = generate_digits(n, seed);
    write_idx(&ds, images_path, labels_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_idx;

    #[test]
    fn digits_are_deterministic_balanced_and_in_range() {
        let a = generate_digits(100, 3);
        let b = generate_digits(100, 3);
        assert_eq!(a.inputs.data(), b.inputs.data());
        for d in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == d).count(), 10);
        }
        assert!(a.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn glyph_classes_are_visually_distinct() {
        // noiseless class means must differ pairwise by a clear margin
        let ds = generate_digits(200, 5);
        let side = DIGIT_SIDE * DIGIT_SIDE;
        let mut means = vec![vec![0.0f64; side]; 10];
        for i in 0..200 {
            for p in 0..side {
                means[ds.labels[i]][p] += ds.inputs.data()[i * side + p] as f64 / 20.0;
            }
        }
        for a in 0..10 {
            for b in (a + 1)..10 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 1.0, "classes {a} and {b} too close: {dist}");
            }
        }
    }

    #[test]
    fn idx_roundtrip_matches_canonical_layout() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("train-images.idx");
        let lab = dir.path().join("train-labels.idx");
        write_digits_idx(50, 7, &img, &lab).unwrap();
        let back = load_idx(&img, &lab).unwrap();
        assert_eq!(back.len(), 50);
        assert_eq!(back.inputs.shape(), &[50, 1, 28, 28]);
    }
}
