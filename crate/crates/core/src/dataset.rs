//! Manifests, feature extraction, stratified group-aware folds and
//! class-balanced batch sampling.
//!
//! # Feature cache format (`WBFT`)
//!
//! All integers are little-endian `u32`.
//!
//! | field | size |
//! |-------|------|
//! | magic `WBFT` | 4 bytes |
//! | version (1) | u32 |
//! | n, bins, frames | 3 × u32 |
//! | fft_size, hop, sample_rate | 3 × u32 |
//! | features, row-major `n × bins × frames` | f32 × n·bins·frames |
//! | labels (0 negative, 1 positive) | u8 × n |
//! | group ids | n × (u32 length + UTF-8 bytes) |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wingbeat_tensor::Tensor;

use crate::audio::{read_wav, standardize_audio, DEFAULT_SAMPLE_RATE};
use crate::dsp::{spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, atomic_write_bytes, put_str, put_u32, read_bytes, Reader};
use crate::segment::{segment, SegmentSpec};

pub const FEATURE_MAGIC: &[u8; 4] = b"WBFT";
pub const FEATURE_VERSION: u32 = 1;

/// Binary target: presence or absence of the target species.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    /// Class index used by the model head: negative 0, positive 1.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" | "1" | "true" => Ok(Label::Positive),
            "negative" | "neg" | "0" | "false" => Ok(Label::Negative),
            other => Err(format!("unknown label {other:?} (expected positive or negative)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    /// Source-recording id; every segment of a group lands in one fold.
    pub group: String,
}

const MANIFEST_HEADER: [&str; 3] = ["path", "label", "group"];

/// Parse a `path,label,group` CSV. Relative paths resolve against the
/// manifest's directory; an empty group defaults to the file stem.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let row_err = |row: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(row_err(1, format!("header must be `path,label,group`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut seen: HashMap<PathBuf, usize> = HashMap::new();
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            row_err(row, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let rel = &record[0];
        if rel.is_empty() {
            return Err(row_err(row, "empty path".into()));
        }
        let label: Label = record[1].parse().map_err(|m| row_err(row, m))?;
        let resolved = base.join(rel);
        if let Some(first) = seen.insert(resolved.clone(), row) {
            return Err(row_err(row, format!("duplicate path {rel:?} (first on line {first})")));
        }
        let group = match &record[2] {
            "" => Path::new(rel)
                .file_stem()
                .map_or_else(|| rel.to_string(), |s| s.to_string_lossy().into_owned()),
            g => g.to_string(),
        };
        entries.push(ManifestEntry {
            path: resolved,
            label,
            group,
        });
    }
    Ok(entries)
}

/// Write entries as manifest CSV. Paths are written as given.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let fail = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        csv.write_record(MANIFEST_HEADER).map_err(fail)?;
        for e in entries {
            let label = e.label.to_string();
            csv.write_record([e.path.to_string_lossy().as_ref(), label.as_str(), e.group.as_str()])
                .map_err(fail)?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

/// Audio-to-feature settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    /// Spectrogram columns per feature.
    pub frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            stft: StftConfig::default(),
            frames: 60,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.segment_spec().map(|_| ())
    }

    pub fn segment_spec(&self) -> Result<SegmentSpec> {
        SegmentSpec::new(self.frames, &self.stft)
    }

    pub fn bins(&self) -> usize {
        self.stft.bins()
    }

    /// Standardized, segmented audio of one decoded buffer.
    pub fn segments_for(&self, buf: &crate::audio::AudioBuffer) -> Result<Vec<crate::audio::AudioBuffer>> {
        let spec = self.segment_spec()?;
        let std = standardize_audio(buf, self.sample_rate)?;
        Ok(segment(&std, &spec))
    }

    /// Features for one decoded buffer: standardize, segment, spectrogram.
    pub fn features_for(&self, buf: &crate::audio::AudioBuffer) -> Result<Vec<Vec<f32>>> {
        self.segments_for(buf)?
            .iter()
            .map(|seg| spectrogram(seg, &self.stft).map(|s| s.values.data))
            .collect()
    }
}

/// Labeled spectrogram features stored contiguously, `n × bins × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub bins: usize,
    pub frames: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub data: Vec<f32>,
    pub labels: Vec<Label>,
    pub groups: Vec<String>,
}

impl FeatureSet {
    pub fn empty(cfg: &PipelineConfig) -> Self {
        FeatureSet {
            bins: cfg.bins(),
            frames: cfg.frames,
            fft_size: cfg.stft.fft_size,
            hop: cfg.stft.hop,
            sample_rate: cfg.sample_rate,
            data: Vec::new(),
            labels: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.bins * self.frames
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        let n = self.feature_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Model input `[indices.len(), 1, bins, frames]`.
    pub fn input(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.feature_len());
        for &i in indices {
            data.extend_from_slice(self.feature(i));
        }
        Tensor::from_vec(vec![indices.len(), 1, self.bins, self.frames], data).expect("consistent feature shape")
    }

    pub fn targets(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i].index()).collect()
    }

    fn push(&mut self, feature: &[f32], label: Label, group: &str) {
        debug_assert_eq!(feature.len(), self.feature_len());
        self.data.extend_from_slice(feature);
        self.labels.push(label);
        self.groups.push(group.to_string());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + self.data.len() * 4 + self.len() * 16);
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [
            FEATURE_VERSION,
            self.len() as u32,
            self.bins as u32,
            self.frames as u32,
            self.fft_size as u32,
            self.hop as u32,
            self.sample_rate,
        ] {
            put_u32(&mut out, v);
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|l| l.index() as u8));
        for g in &self.groups {
            put_str(&mut out, g);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            kind: "feature cache",
            msg: msg.to_string(),
        };
        let mut r = Reader::new(bytes);
        if r.take(4) != Some(FEATURE_MAGIC) {
            return Err(bad("missing WBFT magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                kind: "feature cache",
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        let mut h = [0usize; 6];
        for v in &mut h {
            *v = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        }
        let [n, bins, frames, fft_size, hop, sample_rate] = h;
        let total = n
            .checked_mul(bins)
            .and_then(|v| v.checked_mul(frames))
            .ok_or_else(|| bad("shape overflows"))?;
        let data = r.f32s(total).ok_or_else(|| bad("truncated feature data"))?;
        let labels = r
            .take(n)
            .ok_or_else(|| bad("truncated labels"))?
            .iter()
            .map(|&b| Label::from_index(b as usize).ok_or_else(|| bad("label byte not 0 or 1")))
            .collect::<Result<Vec<_>>>()?;
        let groups = (0..n)
            .map(|_| r.string().ok_or_else(|| bad("truncated or non-UTF-8 group id")))
            .collect::<Result<Vec<_>>>()?;
        if !r.is_done() {
            return Err(bad("trailing bytes"));
        }
        Ok(FeatureSet {
            bins,
            frames,
            fft_size,
            hop,
            sample_rate: sample_rate as u32,
            data,
            labels,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}

/// Decode every manifest file and turn it into labeled features. Files are
/// processed in parallel; output order follows the manifest.
pub fn build_features(entries: &[ManifestEntry], cfg: &PipelineConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    let per_file: Vec<Vec<Vec<f32>>> = entries
        .par_iter()
        .map(|e| {
            read_wav(&e.path)
                .and_then(|buf| cfg.features_for(&buf))
                .map_err(|err| err.in_file(&e.path))
        })
        .collect::<Result<_>>()?;
    let mut fs = FeatureSet::empty(cfg);
    for (e, feats) in entries.iter().zip(&per_file) {
        if feats.is_empty() {
            log::warn!("{}: shorter than half a segment, no features", e.path.display());
        }
        for f in feats {
            fs.push(f, e.label, &e.group);
        }
    }
    Ok(fs)
}

/// Fold assignment per feature plus inverse-frequency class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    /// Indexed by [`Label::index`]: `total / (2 * count)`.
    pub class_weights: [f64; 2],
}

impl FoldPlan {
    pub fn weight(&self, label: Label) -> f64 {
        self.class_weights[label.index()]
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

/// `total / (2 * count_c)` for each class.
pub fn class_weights(labels: &[Label]) -> [f64; 2] {
    let pos = labels.iter().filter(|&&l| l == Label::Positive).count() as f64;
    let neg = labels.len() as f64 - pos;
    let total = labels.len() as f64;
    [total / (2.0 * neg), total / (2.0 * pos)]
}

/// Stratified k-fold assignment. With `grouped`, all features sharing a
/// group id go to the same fold; groups are labeled by their majority class.
pub fn plan_folds(fs: &FeatureSet, k: usize, seed: u64, grouped: bool) -> Result<FoldPlan> {
    let (pos, neg) = (fs.count(Label::Positive), fs.count(Label::Negative));
    if pos == 0 || neg == 0 {
        return Err(Error::Config(format!("folds need both classes (positive {pos}, negative {neg})")));
    }
    if k < 2 || k > pos.min(neg) {
        return Err(Error::Config(format!(
            "k = {k} folds invalid for {pos} positive / {neg} negative features"
        )));
    }

    // Units to assign: groups (BTreeMap for a seed-only dependence) or
    // individual features.
    let units: Vec<Vec<usize>> = if grouped {
        let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, g) in fs.groups.iter().enumerate() {
            by_group.entry(g.as_str()).or_default().push(i);
        }
        by_group.into_values().collect()
    } else {
        (0..fs.len()).map(|i| vec![i]).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![usize::MAX; fs.len()];
    for class in [Label::Negative, Label::Positive] {
        let mut members: Vec<&Vec<usize>> = units
            .iter()
            .filter(|u| {
                let p = u.iter().filter(|&&i| fs.labels[i] == Label::Positive).count();
                let majority = if 2 * p > u.len() { Label::Positive } else { Label::Negative };
                majority == class
            })
            .collect();
        if members.len() < k {
            return Err(Error::Config(format!(
                "k = {k} folds but only {} {class} groups",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        // Largest groups first, then greedily into the emptiest fold.
        members.sort_by_key(|u| std::cmp::Reverse(u.len()));
        let mut load = vec![0usize; k];
        for u in members {
            let fold = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
            load[fold] += u.len();
            for &i in u {
                assignments[i] = fold;
            }
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        class_weights: class_weights(&fs.labels),
    })
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
}

/// Endless, seeded stream of class-balanced batches drawn with replacement
/// from the training folds.
pub struct BatchStream<'a> {
    fs: &'a FeatureSet,
    pool: Vec<usize>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    batch_size: usize,
}

impl<'a> BatchStream<'a> {
    pub fn next_indices(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| self.pool[self.dist.sample(&mut self.rng)])
            .collect()
    }

    pub fn train_size(&self) -> usize {
        self.pool.len()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let indices = self.next_indices();
        Some(Batch {
            x: self.fs.input(&indices),
            y: self.fs.targets(&indices),
            indices,
        })
    }
}

/// Balanced sampler over every fold except `fold`. Weights are the
/// inverse-frequency formula applied to the training pool's own counts, so
/// each draw is positive with probability exactly 1/2.
pub fn weighted_batches<'a>(
    fs: &'a FeatureSet,
    plan: &FoldPlan,
    fold: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream<'a>> {
    if fold >= plan.k || plan.assignments.len() != fs.len() {
        return Err(Error::InvalidArgument(format!("fold {fold} not in plan of {} folds", plan.k)));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let pool = plan.train_indices(fold);
    let labels: Vec<Label> = pool.iter().map(|&i| fs.labels[i]).collect();
    let w = class_weights(&labels);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("training folds for fold {fold} lack a class")));
    }
    let dist = WeightedIndex::new(labels.iter().map(|l| w[l.index()])).expect("positive finite weights");
    Ok(BatchStream {
        fs,
        pool,
        dist,
        rng: ChaCha8Rng::seed_from_u64(seed),
        batch_size,
    })
}

/// Group ids appearing in more than one fold.
pub fn leaking_groups(fs: &FeatureSet, plan: &FoldPlan) -> Vec<String> {
    let mut fold_of: HashMap<&str, usize> = HashMap::new();
    let mut leaks = HashSet::new();
    for (g, &f) in fs.groups.iter().zip(&plan.assignments) {
        if *fold_of.entry(g.as_str()).or_insert(f) != f {
            leaks.insert(g.clone());
        }
    }
    let mut v: Vec<String> = leaks.into_iter().collect();
    v.sort();
    v
}
