//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wingbeat::{AudioBuffer, FeatureSet, Label, ModelConfig};

pub fn tone(freq: f64, amp: f64, rate: u32, len: usize) -> AudioBuffer {
    AudioBuffer::new(
        (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect(),
        rate,
    )
    .unwrap()
}

/// Independent segment count: full windows at multiples of the slide,
/// plus one padded remainder when at least half a segment is left over
/// and not all audio is already covered.
pub fn expected_segments(len: usize, l: usize, s: usize) -> usize {
    let full = if len >= l { 1 + (len - l) / s } else { 0 };
    let covered = if full == 0 { 0 } else { (full - 1) * s + l };
    let left = len.saturating_sub(full * s);
    full + usize::from(covered < len && left >= l / 2 && len > 0)
}

/// Conv `k*cin*p + p` per convolution, `2p` learnable BN parameters per
/// norm, a 1x1 projection where the channel count changes, then the two
/// dense layers on the flattened `p * (H >> B) * (W >> B)` map.
pub fn params_by_hand(c: &ModelConfig) -> usize {
    let (kh, kw) = c.kernel;
    let p = c.filters;
    let (h, w) = c.input_shape;
    let mut total = 0;
    let mut channels = 1;
    for _ in 0..c.blocks {
        total += kh * kw * channels * p + p + 2 * p;
        total += kh * kw * p * p + p + 2 * p;
        if channels != p {
            total += channels * p + p;
        }
        channels = p;
    }
    let flat = p * (h >> c.blocks) * (w >> c.blocks);
    total + flat * c.dense_width + c.dense_width + 2 * c.dense_width + 2
}

/// The 3 × 3 grid of kernel sizes against (blocks, filters) pairs.
pub fn param_grid() -> Vec<ModelConfig> {
    let mut grid = Vec::new();
    for k in [3, 5, 7] {
        for (b, p) in [(3, 16), (4, 32), (5, 64)] {
            grid.push(ModelConfig {
                kernel: (k, k),
                blocks: b,
                filters: p,
                ..ModelConfig::default()
            });
        }
    }
    grid
}

/// Metrics straight from label pairs, without a confusion matrix:
/// (accuracy, precision, recall, F1), undefined ratios as 0. Every value is
/// an exact fraction of integers rounded once, so results compare exactly.
pub fn brute_force(pred: &[bool], truth: &[bool]) -> (f64, f64, f64, f64) {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let predicted_pos: Vec<usize> = (0..pred.len()).filter(|&i| pred[i]).collect();
    let actual_pos = truth.iter().filter(|&&t| t).count();
    let hits = predicted_pos.iter().filter(|&&i| truth[i]).count();
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    // Harmonic mean of hits/a and hits/b in exact arithmetic:
    // 2 / (a/hits + b/hits) = 2 hits / (a + b).
    let f1 = if hits == 0 { 0.0 } else { frac(2 * hits, predicted_pos.len() + actual_pos) };
    (
        frac(correct, pred.len()),
        frac(hits, predicted_pos.len()),
        frac(hits, actual_pos),
        f1,
    )
}

/// Noisy `bins × frames` maps whose class is one bright row, a quarter of
/// the way down for positives and three quarters for negatives. Each
/// sample is its own group.
pub fn banded(pos: usize, neg: usize, bins: usize, frames: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..pos + neg {
        let label = if i < pos { Label::Positive } else { Label::Negative };
        let row = if label == Label::Positive { bins / 4 } else { 3 * bins / 4 };
        for r in 0..bins {
            for _ in 0..frames {
                let base = if r == row { 0.9 } else { 0.1 };
                data.push(base + rng.gen_range(-0.05..0.05));
            }
        }
        labels.push(label);
    }
    FeatureSet {
        bins,
        frames,
        fft_size: 2 * (bins - 1),
        hop: 1,
        sample_rate: 8000,
        data,
        groups: (0..labels.len()).map(|i| format!("s{i}")).collect(),
        labels,
    }
}
