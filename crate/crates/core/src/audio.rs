//! WAV decode/encode and audio standardization (anti-alias low-pass plus
//! resampling to the analysis rate).

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

/// Analysis sample rate used throughout the pipeline.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Number of taps of the anti-alias FIR (odd, so the group delay is an
/// integer number of samples).
pub const FIR_TAPS: usize = 255;

const MIN_RATE: u32 = 8000;
const MAX_RATE: u32 = 48000;

/// Mono PCM signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some((i, &v)) = samples.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::SampleOutOfRange { index: i, value: v });
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioBuffer {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64).sqrt()
}

/// Result of decoding, with the number of float samples clamped into [-1, 1].
#[derive(Debug, Clone)]
pub struct Decoded {
    pub audio: AudioBuffer,
    pub clamped: usize,
}

/// Read a PCM16 or float32 WAV with one or two channels, downmixed to mono.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    decode_wav(path).map(|d| d.audio)
}

pub fn decode_wav(path: &Path) -> Result<Decoded> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::UnsupportedWav {
            path: path.into(),
            msg: format!("{} channels", spec.channels),
        });
    }
    if !(MIN_RATE..=MAX_RATE).contains(&spec.sample_rate) {
        return Err(Error::UnsupportedWav {
            path: path.into(),
            msg: format!("sample rate {} Hz outside {MIN_RATE}-{MAX_RATE}", spec.sample_rate),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedWav {
                path: path.into(),
                msg: format!("{fmt:?} {bits}-bit samples"),
            })
        }
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyWav { path: path.into() });
    }
    let ch = spec.channels as usize;
    let mut clamped = 0;
    let samples = interleaved
        .chunks(ch)
        .map(|frame| {
            let v = frame.iter().sum::<f32>() / ch as f32;
            let v = if v.is_finite() { v } else { 0.0 };
            if v.abs() > 1.0 {
                clamped += 1;
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} samples into [-1, 1]", path.display());
    }
    Ok(Decoded {
        audio: AudioBuffer {
            samples,
            sample_rate: spec.sample_rate,
        },
        clamped,
    })
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => match io.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => Error::io(path, io),
            _ => Error::MalformedWav {
                path: path.into(),
                msg: io.to_string(),
            },
        },
        hound::Error::Unsupported | hound::Error::TooWide | hound::Error::InvalidSampleFormat => {
            Error::UnsupportedWav {
                path: path.into(),
                msg: e.to_string(),
            }
        }
        other => Error::MalformedWav {
            path: path.into(),
            msg: other.to_string(),
        },
    }
}

/// Write a mono PCM16 WAV. Every sample must lie in [-1, 1].
pub fn write_wav(buf: &AudioBuffer, path: &Path) -> Result<()> {
    if let Some((index, &value)) = buf
        .samples
        .iter()
        .enumerate()
        .find(|(_, v)| !(-1.0..=1.0).contains(*v))
    {
        return Err(Error::SampleOutOfRange { index, value });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    atomic_write(path, |w| {
        let mut writer = hound::WavWriter::new(w, spec).map_err(|e| wav_err(path, e))?;
        for &s in &buf.samples {
            let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(|e| wav_err(path, e))?;
        }
        writer.finalize().map_err(|e| wav_err(path, e))
    })
}

/// Hamming-windowed sinc low-pass taps with unit DC gain.
pub fn lowpass_taps(cutoff_hz: f64, sample_rate: u32) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate as f64;
    let mid = (FIR_TAPS - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..FIR_TAPS)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (FIR_TAPS - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Zero-phase FIR low-pass: the filter's group delay is removed so the
/// output is aligned with, and as long as, the input.
pub fn lowpass_fir(buf: &AudioBuffer, cutoff_hz: f64) -> Result<AudioBuffer> {
    let nyquist = buf.sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    let taps = lowpass_taps(cutoff_hz, buf.sample_rate);
    let delay = (FIR_TAPS - 1) / 2;
    let x = &buf.samples;
    let n = x.len() as isize;
    let samples = (0..x.len() as isize)
        .map(|i| {
            let mut acc = 0.0f64;
            for (k, &h) in taps.iter().enumerate() {
                let j = i + k as isize - delay as isize;
                if (0..n).contains(&j) {
                    acc += h * x[j as usize] as f64;
                }
            }
            acc as f32
        })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: buf.sample_rate,
    })
}

/// Linear-interpolation resampler. The caller band-limits below
/// `target_rate / 2` first when downsampling (see [`standardize_audio`]).
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let ratio = buf.sample_rate as f64 / target_rate as f64;
    let out_len = (buf.len() as f64 * target_rate as f64 / buf.sample_rate as f64).round() as usize;
    let x = &buf.samples;
    let last = x.len().saturating_sub(1);
    let samples = (0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let j = (t.floor() as usize).min(last);
            let frac = t - j as f64;
            let a = x[j] as f64;
            let b = x[(j + 1).min(last)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: target_rate,
    })
}

/// Bring any input to `target_rate`: low-pass at `target_rate / 2` when the
/// source rate is higher, then resample.
pub fn standardize_audio(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if buf.sample_rate > target_rate {
        let filtered = lowpass_fir(buf, target_rate as f64 / 2.0)?;
        resample(&filtered, target_rate)
    } else {
        resample(buf, target_rate)
    }
}
