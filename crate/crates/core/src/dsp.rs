//! STFT features: dB magnitude spectrogram with an 80 dB floor, normalized
//! into [0, 1].

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

/// dB floor relative to the segment maximum.
pub const TOP_DB: f32 = 80.0;

/// Row-major real matrix; rows are frequency bins, columns time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .data
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.data[best] { i } else { best });
        (i / self.cols.max(1), i % self.cols.max(1))
    }

    /// Row of the maximum within column `c`.
    pub fn column_argmax(&self, c: usize) -> usize {
        (0..self.rows).fold(0, |best, r| if self.get(r, c) > self.get(best, c) { r } else { best })
    }
}

/// Hann window taper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 1024,
            hop: 256,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let cfg = StftConfig {
            fft_size,
            hop,
            window: Window::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::Config(format!("fft size {} is not a power of two", self.fft_size)));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!(
                "hop {} must lie in 1..={}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `1 + floor((len - W) / H)`, or 0 when shorter than one window.
    pub fn frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }

    fn taper(&self) -> Vec<f64> {
        let n = self.fft_size as f64;
        match self.window {
            Window::Hann => (0..self.fft_size)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                .collect(),
        }
    }
}

/// Normalized spectrogram, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Matrix,
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.values.rows
    }

    pub fn frames(&self) -> usize {
        self.values.cols
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.fft_size as f64
    }
}

/// Per-frame magnitude spectra, `bins x frames`, no padding or centering.
pub fn stft_magnitude(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Matrix> {
    cfg.validate()?;
    if buf.len() < cfg.fft_size {
        return Err(Error::InvalidArgument(format!(
            "buffer of {} samples shorter than STFT window {}",
            buf.len(),
            cfg.fft_size
        )));
    }
    let frames = cfg.frames(buf.len());
    let bins = cfg.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let taper = cfg.taper();
    let mut out = Matrix::zeros(bins, frames);
    let mut frame = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, c) in frame.iter_mut().enumerate() {
            *c = Complex::new(buf.samples[start + i] as f64 * taper[i], 0.0);
        }
        fft.process(&mut frame);
        for (k, c) in frame.iter().take(bins).enumerate() {
            out.set(k, t, c.norm() as f32);
        }
    }
    Ok(out)
}

/// Magnitude in dB relative to the segment maximum, clamped to [-80, 0].
/// Digital silence maps to -80 everywhere.
pub fn stft_db(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Matrix> {
    let mut m = stft_magnitude(buf, cfg)?;
    let peak = m.data.iter().fold(0.0f32, |a, &b| a.max(b));
    for v in &mut m.data {
        *v = if peak > 0.0 && *v > 0.0 {
            (20.0 * (*v as f64 / peak as f64).log10()).clamp(-(TOP_DB as f64), 0.0) as f32
        } else {
            -TOP_DB
        };
    }
    Ok(m)
}

/// `x / 80 + 1` elementwise, mapping [-80, 0] dB onto [0, 1].
pub fn normalize_db(db: &Matrix) -> Result<Matrix> {
    if let Some(&bad) = db.data.iter().find(|v| !(-TOP_DB..=0.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("dB value {bad} outside [-80, 0]")));
    }
    Ok(Matrix {
        rows: db.rows,
        cols: db.cols,
        data: db.data.iter().map(|&x| x / TOP_DB + 1.0).collect(),
    })
}

/// Full feature path for one segment.
pub fn spectrogram(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    let values = normalize_db(&stft_db(buf, cfg)?)?;
    Ok(Spectrogram {
        values,
        fft_size: cfg.fft_size,
        hop: cfg.hop,
        sample_rate: buf.sample_rate,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of an `n_mels` band bank spanning 0 Hz to Nyquist,
/// equally spaced on the HTK mel scale.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels)
        .map(|j| mel_to_hz(top * j as f64 / (n_mels - 1) as f64))
        .collect()
}

/// Triangular mel bands applied along the frequency axis of a power (or
/// magnitude) spectrogram with `fft_size / 2 + 1` rows.
///
/// The first and last bands are half-triangles anchored at 0 Hz and
/// Nyquist, so the weights at every bin sum to one and total energy per
/// frame is preserved.
pub fn mel_filterbank(spec_power: &Matrix, n_mels: usize, sample_rate: u32) -> Result<Matrix> {
    if n_mels < 2 {
        return Err(Error::InvalidArgument("need at least 2 mel bands".into()));
    }
    if n_mels > spec_power.rows {
        return Err(Error::InvalidArgument(format!(
            "{n_mels} mel bands exceed {} frequency bins",
            spec_power.rows
        )));
    }
    let bins = spec_power.rows;
    let nyquist = sample_rate as f64 / 2.0;
    let centers = mel_centers(n_mels, sample_rate);
    let mut out = Matrix::zeros(n_mels, spec_power.cols);
    for k in 0..bins {
        let f = nyquist * k as f64 / (bins - 1).max(1) as f64;
        // Band j with centers[j] <= f < centers[j + 1].
        let j = centers.partition_point(|&c| c <= f).saturating_sub(1).min(n_mels - 2);
        let w_hi = ((f - centers[j]) / (centers[j + 1] - centers[j])).clamp(0.0, 1.0) as f32;
        let w_lo = 1.0 - w_hi;
        for t in 0..spec_power.cols {
            let p = spec_power.get(k, t);
            let lo = out.get(j, t) + w_lo * p;
            out.set(j, t, lo);
            let hi = out.get(j + 1, t) + w_hi * p;
            out.set(j + 1, t, hi);
        }
    }
    Ok(out)
}

/// Mel-scaled counterpart of [`spectrogram`]: power spectra pooled into
/// `n_mels` bands, then the same 80 dB range and `[0, 1]` scaling.
pub fn mel_spectrogram(buf: &AudioBuffer, cfg: &StftConfig, n_mels: usize) -> Result<Spectrogram> {
    let mut power = stft_magnitude(buf, cfg)?;
    power.data.iter_mut().for_each(|v| *v *= *v);
    let mut m = mel_filterbank(&power, n_mels, buf.sample_rate)?;
    let peak = m.data.iter().fold(0.0f32, |a, &b| a.max(b));
    for v in &mut m.data {
        let db = if peak > 0.0 && *v > 0.0 {
            (10.0 * (*v as f64 / peak as f64).log10()).max(-(TOP_DB as f64)) as f32
        } else {
            -TOP_DB
        };
        *v = db / TOP_DB + 1.0;
    }
    Ok(Spectrogram {
        values: m,
        fft_size: cfg.fft_size,
        hop: cfg.hop,
        sample_rate: buf.sample_rate,
    })
}

/// 8-bit binary PGM, frequency on rows with the lowest bin at the bottom;
/// value 1.0 maps to 255.
pub fn spectrogram_to_image(spec: &Spectrogram, path: &Path) -> Result<()> {
    let bytes = pgm_bytes(&spec.values);
    atomic_write(path, |w| w.write_all(&bytes).map_err(|e| Error::io(path, e)))
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).floor() as u8
}

pub fn pgm_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols, m.rows).into_bytes();
    for r in (0..m.rows).rev() {
        out.extend((0..m.cols).map(|c| to_u8(m.get(r, c))));
    }
    out
}
