//! Overlapping fixed-length segmentation.

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};

/// Segment geometry derived from the STFT window so that every segment
/// yields exactly `frames` spectrogram columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub frames: usize,
    pub segment_len: usize,
    pub slide: usize,
}

impl SegmentSpec {
    /// `segment_len = W + (F - 1) * H`, `slide = segment_len / 2`.
    pub fn new(frames: usize, stft: &StftConfig) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Config("frames per feature must be >= 1".into()));
        }
        let segment_len = stft.fft_size + (frames - 1) * stft.hop;
        let slide = segment_len / 2;
        if slide == 0 {
            return Err(Error::Config(format!("segment of {segment_len} samples has no slide")));
        }
        Ok(SegmentSpec {
            frames,
            segment_len,
            slide,
        })
    }

    /// Offsets of the segments `segment` will emit for a buffer of `len`
    /// samples, and whether the last one is a zero-padded remainder.
    pub fn offsets(&self, len: usize) -> (Vec<usize>, bool) {
        let (l, s) = (self.segment_len, self.slide);
        let mut offsets: Vec<usize> = if len >= l {
            (0..=(len - l) / s).map(|i| i * s).collect()
        } else {
            Vec::new()
        };
        let covered = offsets.last().map_or(0, |&o| o + l);
        let next = offsets.last().map_or(0, |&o| o + s);
        // A remainder is kept when it carries uncovered audio and at least
        // half a segment of samples.
        let remainder = covered < len && len - next >= l / 2 && len > 0;
        if remainder {
            offsets.push(next);
        }
        (offsets, remainder)
    }

    pub fn count(&self, len: usize) -> usize {
        self.offsets(len).0.len()
    }
}

/// Sliding window of `segment_len` samples advancing by `slide`.
pub fn segment(buf: &AudioBuffer, spec: &SegmentSpec) -> Vec<AudioBuffer> {
    let (offsets, _) = spec.offsets(buf.len());
    offsets
        .into_iter()
        .map(|o| {
            let end = (o + spec.segment_len).min(buf.len());
            let mut samples = buf.samples[o..end].to_vec();
            samples.resize(spec.segment_len, 0.0);
            AudioBuffer {
                samples,
                sample_rate: buf.sample_rate,
            }
        })
        .collect()
}
