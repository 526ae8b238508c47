//! Grad-CAM heatmaps over the last residual block.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wingbeat_tensor::{Graph, Mode, Tensor};

use crate::dataset::Label;
use crate::dsp::Matrix;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::model::Model;

/// Class-activation map at feature resolution, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Matrix,
    pub target: Label,
}

impl Heatmap {
    /// Fraction of total heat in rows where `keep(row)` holds; 0 for an
    /// all-zero map.
    pub fn row_mass(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let (mut inside, mut total) = (0.0f64, 0.0f64);
        for r in 0..self.values.rows {
            let s: f64 = (0..self.values.cols).map(|c| self.values.get(r, c) as f64).sum();
            total += s;
            if keep(r) {
                inside += s;
            }
        }
        if total > 0.0 {
            inside / total
        } else {
            0.0
        }
    }
}

/// Grad-CAM of `feature` (`bins × frames`, row-major) for `target`.
///
/// The target score is the pre-softmax logit; channel weights are the
/// spatial mean of its gradient at the last block's output.
pub fn grad_cam(model: &Model, feature: &[f32], target: Label) -> Result<Heatmap> {
    let (h, w) = model.cfg.input_shape;
    if feature.len() != h * w {
        return Err(Error::InvalidArgument(format!(
            "feature of {} values does not match model input {h}x{w}",
            feature.len()
        )));
    }
    let x = Tensor::from_vec(vec![1, 1, h, w], feature.to_vec())?;
    let mut g = Graph::new();
    // Eval mode: dropout is the identity, so the generator is never used.
    let t = model.trace(&mut g, x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    g.retain(t.last_block);
    let score = g.column(t.logits, target.index())?;
    let score = g.sum(score);
    g.backward(score)?;

    let act = g.value(t.last_block);
    let (c, ah, aw) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = ah * aw;
    let zeros;
    let grad = match g.grad(t.last_block) {
        Some(gr) => gr,
        None => {
            zeros = Tensor::zeros(act.shape());
            &zeros
        }
    };
    let mut cam = vec![0.0f32; plane];
    for k in 0..c {
        let gk = &grad.data()[k * plane..(k + 1) * plane];
        let alpha = gk.iter().sum::<f32>() / plane as f32;
        let ak = &act.data()[k * plane..(k + 1) * plane];
        for (o, &a) in cam.iter_mut().zip(ak) {
            *o += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = bilinear(&cam, ah, aw, h, w);
    let peak = values.data.iter().fold(0.0f32, |m, &v| m.max(v));
    if peak > 0.0 {
        values.data.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Heatmap { values, target })
}

/// Resize with half-pixel centers and edge clamping.
pub fn bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Matrix {
    let coord = |d: usize, s: usize, n: usize| -> (usize, usize, f32) {
        let pos = ((d as f64 + 0.5) * s as f64 / n as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(s - 1), (pos - lo as f64) as f32)
    };
    let mut out = Matrix::zeros(dh, dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.set(y, x, top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Colour assigned to full heat.
pub const WARM: [u8; 3] = [255, 64, 0];

/// Binary PPM (P6): the spectrogram as gray, blended toward [`WARM`] by the
/// heat. Low frequencies at the bottom, as spectrograms are usually drawn.
pub fn overlay_bytes(heatmap: &Heatmap, spec: &Matrix) -> Result<Vec<u8>> {
    let (rows, cols) = (spec.rows, spec.cols);
    if (heatmap.values.rows, heatmap.values.cols) != (rows, cols) {
        return Err(Error::InvalidArgument(format!(
            "heatmap {}x{} does not match spectrogram {rows}x{cols}",
            heatmap.values.rows, heatmap.values.cols
        )));
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        for c in 0..cols {
            let gray = spec.get(r, c).clamp(0.0, 1.0) * 255.0;
            let heat = heatmap.values.get(r, c).clamp(0.0, 1.0);
            for &warm in &WARM {
                out.push((gray * (1.0 - heat) + warm as f32 * heat).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn heatmap_overlay(heatmap: &Heatmap, spec: &Matrix, path: &Path) -> Result<()> {
    let bytes = overlay_bytes(heatmap, spec)?;
    atomic_write(path, |w| w.write_all(&bytes).map_err(|e| Error::io(path, e)))
}
