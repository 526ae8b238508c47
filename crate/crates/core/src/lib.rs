//! Acoustic wingbeat classification: audio standardization, STFT features,
//! a residual CNN trained with class-balanced cross-validation, Grad-CAM
//! explanations and int8 dynamic-range quantization.

pub mod audio;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fsutil;
pub mod model;
pub mod segment;
pub mod synth;
pub mod train;

pub use audio::AudioBuffer;
pub use dataset::{FeatureSet, FoldPlan, Label, ManifestEntry, PipelineConfig};
pub use dsp::{Spectrogram, StftConfig};
pub use error::{Error, Result};
pub use segment::SegmentSpec;
pub use eval::{Confusion, MetricsReport};
pub use model::{Model, ModelConfig};
pub use train::{FoldReport, TrainConfig};
