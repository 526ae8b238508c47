//! Seeded synthetic wingbeat and noise audio, and labeled dataset recipes
//! built from them.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{rms, write_wav, AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::dataset::{write_manifest, Label, ManifestEntry};
use crate::error::{Error, Result};

/// Interval between steps of the fundamental's random walk.
const JITTER_STEP_S: f64 = 0.1;

/// Harmonic stack with a slowly wandering fundamental.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WingbeatProfile {
    pub fundamental_hz: f64,
    pub n_harmonics: usize,
    /// Amplitude ratio between consecutive harmonics, in (0, 1].
    pub harmonic_decay: f64,
    /// Standard deviation of the fundamental's step per 100 ms.
    pub freq_jitter_hz: f64,
    /// Peak amplitude in [0, 1].
    pub amplitude: f64,
}

impl WingbeatProfile {
    pub const fn aegypti_male() -> Self {
        WingbeatProfile {
            fundamental_hz: 600.0,
            n_harmonics: 3,
            harmonic_decay: 0.6,
            freq_jitter_hz: 5.0,
            amplitude: 0.8,
        }
    }

    pub const fn aegypti_female() -> Self {
        WingbeatProfile {
            fundamental_hz: 450.0,
            ..Self::aegypti_male()
        }
    }

    /// Off-target species stand-in.
    pub const fn off_target() -> Self {
        WingbeatProfile {
            fundamental_hz: 300.0,
            ..Self::aegypti_male()
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.n_harmonics == 0 || self.fundamental_hz <= 0.0 {
            return Err(Error::InvalidArgument("profile needs a positive fundamental and harmonics".into()));
        }
        // Jitter is bounded to +/-10% of the fundamental.
        if self.fundamental_hz * 1.1 * self.n_harmonics as f64 >= nyquist {
            return Err(Error::InvalidArgument(format!(
                "{} harmonics of {} Hz exceed Nyquist ({nyquist} Hz)",
                self.n_harmonics, self.fundamental_hz
            )));
        }
        if !(self.harmonic_decay > 0.0 && self.harmonic_decay <= 1.0) {
            return Err(Error::InvalidArgument("harmonic decay must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.amplitude) || self.freq_jitter_hz < 0.0 {
            return Err(Error::InvalidArgument("amplitude must lie in [0, 1], jitter >= 0".into()));
        }
        Ok(())
    }

    /// Nominal harmonic frequencies `k * f0`.
    pub fn harmonics(&self) -> Vec<f64> {
        (1..=self.n_harmonics).map(|k| k as f64 * self.fundamental_hz).collect()
    }
}

fn samples_for(duration_s: f64, sample_rate: u32) -> usize {
    (duration_s.max(0.0) * sample_rate as f64).round() as usize
}

pub fn synth_wingbeat(
    profile: &WingbeatProfile,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioBuffer> {
    profile.validate(sample_rate)?;
    let n = samples_for(duration_s, sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = profile.fundamental_hz;

    let knots = (duration_s / JITTER_STEP_S).ceil() as usize + 2;
    let step = Normal::new(0.0, profile.freq_jitter_hz.max(1e-12)).expect("finite std-dev");
    let mut f = f0;
    let track: Vec<f64> = (0..knots)
        .map(|_| {
            let cur = f;
            if profile.freq_jitter_hz > 0.0 {
                f = (f + step.sample(&mut rng)).clamp(0.9 * f0, 1.1 * f0);
            }
            cur
        })
        .collect();

    let weights: Vec<f64> = (0..profile.n_harmonics)
        .map(|k| profile.harmonic_decay.powi(k as i32))
        .collect();
    let norm: f64 = weights.iter().sum();
    let mut phases: Vec<f64> = (0..profile.n_harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let knot_len = JITTER_STEP_S * sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let pos = i as f64 / knot_len;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let fi = track[j] + (track[j + 1] - track[j]) * frac;
            let mut acc = 0.0;
            for (k, (ph, w)) in phases.iter_mut().zip(&weights).enumerate() {
                acc += w * ph.sin();
                *ph = (*ph + 2.0 * PI * (k + 1) as f64 * fi / sample_rate as f64) % (2.0 * PI);
            }
            (profile.amplitude * acc / norm) as f32
        })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Uniform white noise in `[-amplitude, amplitude]`.
    White,
    /// 1/f power spectrum, peak-normalized to `amplitude`.
    Pink,
    /// Amplitude-modulated random tones, peak-normalized to `amplitude`.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
}

pub fn synth_noise(
    kind: NoiseKind,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
    amplitude: f64,
) -> Result<AudioBuffer> {
    if !(0.0..=1.0).contains(&amplitude) {
        return Err(Error::InvalidArgument(format!("noise amplitude {amplitude} outside [0, 1]")));
    }
    let n = samples_for(duration_s, sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        NoiseKind::Pink => pink(n, &mut rng),
        NoiseKind::Babble => babble(n, sample_rate, &mut rng),
    };
    let scale = match kind {
        NoiseKind::White => amplitude,
        _ => {
            let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                amplitude / peak
            } else {
                0.0
            }
        }
    };
    Ok(AudioBuffer {
        samples: raw.iter().map(|&v| (v * scale) as f32).collect(),
        sample_rate,
    })
}

/// Gaussian spectrum shaped by `1/sqrt(f)` and inverted.
fn pink(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let scale = 1.0 / (k as f64).sqrt();
        let mut c = Complex::new(gauss.sample(rng), gauss.sample(rng)) * scale;
        if 2 * k == n {
            c.im = 0.0;
        }
        spec[k] = c;
        spec[n - k] = c.conj();
    }
    FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|c| c.re).collect()
}

fn babble(n: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const TONES: usize = 8;
    let sr = sample_rate as f64;
    let top = (0.45 * sr).min(3500.0);
    let tones: Vec<(f64, f64, f64, f64)> = (0..TONES)
        .map(|_| {
            (
                rng.gen_range(150.0..top),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(2.0..6.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            tones
                .iter()
                .map(|&(f, ph, am, am_ph)| {
                    let env = 0.5 + 0.5 * (2.0 * PI * am * t + am_ph).sin();
                    env * (2.0 * PI * f * t + ph).sin()
                })
                .sum()
        })
        .collect()
}

/// Sum of `signal` and `noise` with the noise scaled to the requested RMS
/// ratio. Both components share a final gain that keeps the peak <= 1.
#[derive(Debug, Clone)]
pub struct Mix {
    pub mixed: AudioBuffer,
    pub signal_gain: f64,
    pub noise_gain: f64,
}

pub fn mix_at_snr(signal: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<Mix> {
    if signal.sample_rate != noise.sample_rate || signal.len() != noise.len() {
        return Err(Error::InvalidArgument("signal and noise must share rate and length".into()));
    }
    let (rs, rn) = (signal.rms(), noise.rms());
    let mut noise_gain = if rn > 0.0 { rs / rn / 10f64.powf(snr_db / 20.0) } else { 0.0 };
    let mut signal_gain = 1.0;
    let mut samples: Vec<f64> = signal
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(&s, &v)| s as f64 + noise_gain * v as f64)
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        let g = 0.99 / peak;
        samples.iter_mut().for_each(|v| *v *= g);
        signal_gain *= g;
        noise_gain *= g;
    }
    Ok(Mix {
        mixed: AudioBuffer {
            samples: samples.into_iter().map(|v| v as f32).collect(),
            sample_rate: signal.sample_rate,
        },
        signal_gain,
        noise_gain,
    })
}

/// Measured signal-to-noise ratio of a [`Mix`] in dB.
pub fn mix_snr_db(signal: &AudioBuffer, noise: &AudioBuffer, mix: &Mix) -> f64 {
    20.0 * ((mix.signal_gain * rms(&signal.samples)) / (mix.noise_gain * rms(&noise.samples))).log10()
}

/// Recipe for a labeled synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetRecipe {
    pub positives: usize,
    pub negatives: usize,
    /// Noise mixed into every wingbeat clip; `None` keeps wingbeats clean.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub positive_profiles: Vec<WingbeatProfile>,
    pub off_target_profile: WingbeatProfile,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        DatasetRecipe {
            positives: 200,
            negatives: 200,
            snr_db: Some(10.0),
            seed: 7,
            sample_rate: DEFAULT_SAMPLE_RATE,
            // One default segment: 1024 + 59 * 256 samples at 8 kHz.
            duration_s: 16_128.0 / 8000.0,
            positive_profiles: vec![WingbeatProfile::aegypti_male(), WingbeatProfile::aegypti_female()],
            off_target_profile: WingbeatProfile::off_target(),
        }
    }
}

/// What a generated clip contains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipKind {
    Wingbeat { profile: WingbeatProfile, noise: Option<NoiseKind> },
    Noise(NoiseKind),
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub name: String,
    pub label: Label,
    pub kind: ClipKind,
    pub audio: AudioBuffer,
}

fn clip_seed(seed: u64, label: Label, index: usize) -> u64 {
    let tag = match label {
        Label::Positive => 0x5157_0000_0000_0000u64,
        Label::Negative => 0x4e45_0000_0000_0000u64,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag ^ index as u64
}

fn jittered(base: &WingbeatProfile, rng: &mut ChaCha8Rng) -> WingbeatProfile {
    WingbeatProfile {
        fundamental_hz: base.fundamental_hz * rng.gen_range(0.95..1.05),
        harmonic_decay: (base.harmonic_decay * rng.gen_range(0.85..1.15)).min(1.0),
        amplitude: base.amplitude * rng.gen_range(0.4..1.0),
        ..*base
    }
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.positive_profiles.is_empty() {
            return Err(Error::Config("recipe needs at least one positive profile".into()));
        }
        if self.duration_s <= 0.0 {
            return Err(Error::Config("clip duration must be positive".into()));
        }
        for p in self.positive_profiles.iter().chain([&self.off_target_profile]) {
            p.validate(self.sample_rate)?;
        }
        Ok(())
    }

    /// Generate clip `index` of the given class.
    pub fn clip(&self, label: Label, index: usize) -> Result<Clip> {
        let seed = clip_seed(self.seed, label, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_kind = NoiseKind::ALL[rng.gen_range(0..NoiseKind::ALL.len())];
        let (prefix, wingbeat) = match label {
            Label::Positive => {
                let base = &self.positive_profiles[index % self.positive_profiles.len()];
                ("pos", Some(jittered(base, &mut rng)))
            }
            Label::Negative if index % 2 == 1 => ("neg", Some(jittered(&self.off_target_profile, &mut rng))),
            Label::Negative => ("neg", None),
        };
        let noise_seed = rng.gen();
        let (kind, audio) = match wingbeat {
            Some(profile) => {
                let clean = synth_wingbeat(&profile, self.duration_s, self.sample_rate, rng.gen())?;
                match self.snr_db {
                    Some(snr) => {
                        let noise = synth_noise(noise_kind, self.duration_s, self.sample_rate, noise_seed, 0.5)?;
                        let mix = mix_at_snr(&clean, &noise, snr)?;
                        (ClipKind::Wingbeat { profile, noise: Some(noise_kind) }, mix.mixed)
                    }
                    None => (ClipKind::Wingbeat { profile, noise: None }, clean),
                }
            }
            None => {
                let amp = rng.gen_range(0.1..0.9);
                let noise = synth_noise(noise_kind, self.duration_s, self.sample_rate, noise_seed, amp)?;
                (ClipKind::Noise(noise_kind), noise)
            }
        };
        Ok(Clip {
            name: format!("{prefix}_{index:04}"),
            label,
            kind,
            audio,
        })
    }

    pub fn clips(&self) -> Result<Vec<Clip>> {
        self.validate()?;
        let jobs: Vec<(Label, usize)> = (0..self.positives)
            .map(|i| (Label::Positive, i))
            .chain((0..self.negatives).map(|i| (Label::Negative, i)))
            .collect();
        jobs.par_iter().map(|&(l, i)| self.clip(l, i)).collect()
    }
}

/// Write every clip of `recipe` as a WAV under `out_dir` plus
/// `out_dir/manifest.csv`; returns the manifest path.
pub fn synth_dataset(recipe: &DatasetRecipe, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let clips = recipe.clips()?;
    clips
        .par_iter()
        .map(|c| write_wav(&c.audio, &out_dir.join(format!("{}.wav", c.name))))
        .collect::<Result<Vec<()>>>()?;
    let entries: Vec<ManifestEntry> = clips
        .iter()
        .map(|c| ManifestEntry {
            path: PathBuf::from(format!("{}.wav", c.name)),
            label: c.label,
            group: c.name.clone(),
        })
        .collect();
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}
