//! Subcommand implementations.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wingbeat::audio::read_wav;
use wingbeat::dataset::{build_features, load_manifest};
use wingbeat::dsp::{mel_spectrogram, pgm_bytes, spectrogram, Matrix};
use wingbeat::eval::{
    confusion_render, greedy_sweep, metrics, Axis, AxisCandidates, Confusion, MetricsReport, SweepPlan, SweepPoint,
    SweepScore,
};
use wingbeat::explain::{grad_cam, heatmap_overlay};
use wingbeat::fsutil::{atomic_write_bytes, read_bytes};
use wingbeat::model::{fold_batchnorm, quantize_dynamic, QuantizedModel};
use wingbeat::synth::synth_dataset;
use wingbeat::train::{cross_validate, write_summary};
use wingbeat::{Error, FeatureSet, Label, Model, ModelConfig, PipelineConfig, Result, StftConfig};
use wingbeat_tensor::Tensor;

use crate::config::RunConfig;
use crate::{Command, DataArgs, PipelineArgs, TrainArgs};

pub fn dispatch(command: Command, mut cfg: RunConfig) -> Result<()> {
    match command {
        Command::Synth {
            out,
            pos,
            neg,
            snr_db,
            clean,
        } => {
            if let Some(n) = pos {
                cfg.recipe.positives = n;
            }
            if let Some(n) = neg {
                cfg.recipe.negatives = n;
            }
            if clean {
                cfg.recipe.snr_db = None;
            } else if snr_db.is_some() {
                cfg.recipe.snr_db = snr_db;
            }
            synth(&cfg.resolve()?, &out)
        }
        Command::Features {
            manifest,
            out,
            images,
            legacy_mel,
            pipeline,
        } => {
            apply_pipeline(&mut cfg, &pipeline);
            features(&cfg.resolve()?, &manifest, &out, images.as_deref(), legacy_mel)
        }
        Command::Train {
            data,
            out,
            pipeline,
            train: targs,
        } => {
            let cache = open_cache(&mut cfg, &data)?;
            apply_pipeline(&mut cfg, &pipeline);
            apply_train(&mut cfg, &targs);
            train(&cfg.resolve_for_training()?, &data, cache, &out)
        }
        Command::Evaluate {
            model,
            data,
            out,
            pipeline,
        } => {
            let cache = open_cache(&mut cfg, &data)?;
            apply_pipeline(&mut cfg, &pipeline);
            evaluate(&cfg.resolve()?, &model, &data, cache, out.as_deref())
        }
        Command::Sweep {
            manifest,
            out,
            axes,
            train: targs,
        } => {
            apply_train(&mut cfg, &targs);
            sweep(&cfg.resolve()?, &manifest, &out, axes.as_deref())
        }
        Command::Gradcam {
            model,
            input,
            class,
            segment,
            out,
            pipeline,
        } => {
            apply_pipeline(&mut cfg, &pipeline);
            let target: Label = class.parse().map_err(Error::InvalidArgument)?;
            gradcam(&cfg.resolve()?, &model, &input, target, segment, &out)
        }
        Command::Quantize { model, out, features } => quantize(&model, &out, features.as_deref()),
        Command::Infer {
            model,
            input,
            json,
            pipeline,
        } => {
            apply_pipeline(&mut cfg, &pipeline);
            infer(&cfg.resolve()?, &model, &input, json)
        }
        Command::Bench { model, n, out } => bench(&cfg.resolve()?, &model, n, out.as_deref()),
    }
}

fn apply_pipeline(cfg: &mut RunConfig, a: &PipelineArgs) {
    let p = &mut cfg.pipeline;
    if let Some(v) = a.sample_rate {
        p.sample_rate = v;
        cfg.recipe.sample_rate = v;
    }
    if let Some(v) = a.fft_size {
        p.stft.fft_size = v;
    }
    if let Some(v) = a.hop {
        p.stft.hop = v;
    }
    if let Some(v) = a.frames {
        p.frames = v;
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    let (m, t) = (&mut cfg.model, &mut cfg.train);
    if let Some(k) = a.kernel {
        m.kernel = (k, k);
    }
    if let Some(v) = a.blocks {
        m.blocks = v;
    }
    if let Some(v) = a.filters {
        m.filters = v;
    }
    if let Some(v) = a.dense_width {
        m.dense_width = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.folds {
        t.folds = v;
    }
    if a.no_group_folds {
        t.group_folds = false;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn in_file(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write_bytes(path, text.as_bytes())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = synth_dataset(&cfg.recipe, out)?;
    println!(
        "{} positive and {} negative clips; manifest {}",
        cfg.recipe.positives,
        cfg.recipe.negatives,
        manifest.display()
    );
    Ok(())
}

fn features(cfg: &RunConfig, manifest: &Path, out: &Path, images: Option<&Path>, legacy_mel: Option<usize>) -> Result<()> {
    let entries = load_manifest(manifest)?;
    let fs = build_features(&entries, &cfg.pipeline)?;
    fs.save(out)?;
    if let Some(dir) = images {
        create_dir(dir)?;
        for e in &entries {
            let stem = e.path.file_stem().map_or_else(|| "clip".into(), |s| s.to_string_lossy());
            let segments = read_wav(&e.path).and_then(|b| cfg.pipeline.segments_for(&b))
                .map_err(in_file(&e.path))?;
            for (i, seg) in segments.iter().enumerate() {
                let spec = spectrogram(seg, &cfg.pipeline.stft)?;
                atomic_write_bytes(&dir.join(format!("{stem}_{i:03}.pgm")), &pgm_bytes(&spec.values))?;
                if let Some(bands) = legacy_mel {
                    let mel = mel_spectrogram(seg, &cfg.pipeline.stft, bands)?;
                    atomic_write_bytes(&dir.join(format!("{stem}_{i:03}_mel.pgm")), &pgm_bytes(&mel.values))?;
                }
            }
        }
    }
    println!(
        "{} features ({} positive, {} negative) of {}x{} from {} recordings -> {}",
        fs.len(),
        fs.count(Label::Positive),
        fs.count(Label::Negative),
        fs.bins,
        fs.frames,
        entries.len(),
        out.display()
    );
    Ok(())
}

/// Load the feature cache, if that is the data source, and take the
/// pipeline it was built with as the baseline for later overrides.
fn open_cache(cfg: &mut RunConfig, data: &DataArgs) -> Result<Option<FeatureSet>> {
    let Some(path) = &data.features else {
        return Ok(None);
    };
    let fs = FeatureSet::load(path)?;
    let p = &mut cfg.pipeline;
    p.sample_rate = fs.sample_rate;
    p.stft.fft_size = fs.fft_size;
    p.stft.hop = fs.hop;
    p.frames = fs.frames;
    Ok(Some(fs))
}

/// Features from a manifest, or the opened cache, which must match the
/// pipeline.
fn load_data(data: &DataArgs, cache: Option<FeatureSet>, pipeline: &PipelineConfig) -> Result<FeatureSet> {
    let Some(fs) = cache else {
        let manifest = data.manifest.as_deref().expect("clap requires one data source");
        return build_features(&load_manifest(manifest)?, pipeline);
    };
    let path = data.features.as_deref().unwrap_or(Path::new("features"));
    let built = (fs.sample_rate, fs.fft_size, fs.hop, fs.frames);
    let wanted = (pipeline.sample_rate, pipeline.stft.fft_size, pipeline.stft.hop, pipeline.frames);
    if built != wanted {
        return Err(Error::Config(format!(
            "{}: features were built with (sample rate, fft size, hop, frames) = {built:?}, \
             but the pipeline is {wanted:?}",
            path.display()
        )));
    }
    Ok(fs)
}

fn check_shape(model: &ModelConfig, pipeline: &PipelineConfig) -> Result<()> {
    let produced = (pipeline.bins(), pipeline.frames);
    if model.input_shape != produced {
        return Err(Error::Config(format!(
            "model expects {:?} features but the pipeline produces {produced:?}; \
             pass the --fft-size and --frames it was trained with",
            model.input_shape
        )));
    }
    Ok(())
}

fn metrics_line(m: &MetricsReport) -> String {
    format!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        m.accuracy, m.precision, m.recall, m.f1
    )
}

fn train(cfg: &RunConfig, data: &DataArgs, cache: Option<FeatureSet>, out: &Path) -> Result<()> {
    let fs = load_data(data, cache, &cfg.pipeline)?;
    create_dir(out)?;
    let started = Instant::now();
    let cv = cross_validate(&fs, &cfg.model, &cfg.train)?;
    let summary = cv.summary();
    cv.models[summary.selected_fold].save(&out.join("model.wbnn"))?;
    cv.write_reports(&out.join("folds.jsonl"))?;
    let (table, csv) = confusion_render(&summary.pooled);
    atomic_write_bytes(&out.join("confusion.csv"), csv.as_bytes())?;
    write_summary(&summary, &out.join("summary.json"))?;
    let s = &summary.metrics;
    println!(
        "{}-fold cross-validation of {} features, {} parameters, {:.0} s",
        summary.folds,
        summary.samples,
        summary.params,
        started.elapsed().as_secs_f64()
    );
    for (name, stat) in [
        ("accuracy", s.accuracy),
        ("precision", s.precision),
        ("recall", s.recall),
        ("f1", s.f1),
    ] {
        println!("  {name:<9} {:.4} ± {:.4}", stat.mean, stat.std);
    }
    print!("{table}");
    println!(
        "model of fold {} -> {}",
        summary.selected_fold,
        out.join("model.wbnn").display()
    );
    Ok(())
}

/// A float or a quantized model behind one prediction interface.
enum Classifier {
    Float(Model),
    Quantized(QuantizedModel),
}

impl Classifier {
    fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        if bytes.starts_with(b"WBNQ") {
            QuantizedModel::from_bytes(&bytes, path).map(Classifier::Quantized)
        } else {
            Model::from_bytes(&bytes, path).map(Classifier::Float)
        }
    }

    fn config(&self) -> &ModelConfig {
        match self {
            Classifier::Float(m) => &m.cfg,
            Classifier::Quantized(q) => &q.cfg,
        }
    }

    /// Positive-class probability per input.
    fn positive(&self, x: &Tensor<f32>) -> Result<Vec<f32>> {
        let probs = match self {
            Classifier::Float(m) => m.predict(x)?,
            Classifier::Quantized(q) => q.predict(x)?,
        };
        Ok(probs.data().chunks(2).map(|p| p[1]).collect())
    }
}

fn feature_tensor(features: &[Vec<f32>], (h, w): (usize, usize)) -> Result<Tensor<f32>> {
    Ok(Tensor::from_vec(vec![features.len(), 1, h, w], features.concat())?)
}

fn predicted(p: f32) -> Label {
    if p > 0.5 {
        Label::Positive
    } else {
        Label::Negative
    }
}

#[derive(Serialize)]
struct Evaluation {
    samples: usize,
    confusion: Confusion,
    metrics: MetricsReport,
}

fn evaluate(
    cfg: &RunConfig,
    model: &Path,
    data: &DataArgs,
    cache: Option<FeatureSet>,
    out: Option<&Path>,
) -> Result<()> {
    let clf = Classifier::load(model)?;
    check_shape(clf.config(), &cfg.pipeline)?;
    let fs = load_data(data, cache, &cfg.pipeline)?;
    let all: Vec<usize> = (0..fs.len()).collect();
    let preds: Vec<Label> = clf.positive(&fs.input(&all))?.into_iter().map(predicted).collect();
    let confusion = Confusion::from_pairs(&preds, &fs.labels);
    let report = Evaluation {
        samples: fs.len(),
        confusion,
        metrics: metrics(&confusion)?,
    };
    let (table, csv) = confusion_render(&confusion);
    println!("{} features: {}", fs.len(), metrics_line(&report.metrics));
    print!("{table}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&report, &dir.join("metrics.json"))?;
        atomic_write_bytes(&dir.join("confusion.csv"), csv.as_bytes())?;
    }
    Ok(())
}

/// Candidate values examined in the original parameter study.
fn default_plan() -> SweepPlan {
    let axis = |axis, values: &[usize]| AxisCandidates {
        axis,
        values: values.to_vec(),
    };
    SweepPlan {
        baseline: SweepPoint::default(),
        axes: vec![
            axis(Axis::Kernel, &[3, 5, 7]),
            axis(Axis::Blocks, &[3, 4, 5]),
            axis(Axis::Frames, &[50, 60, 70]),
            axis(Axis::Window, &[512, 1024, 2048]),
            axis(Axis::Filters, &[16, 32, 64]),
            axis(Axis::Hop, &[128, 256, 512]),
        ],
    }
}

/// Keep the listed axes of `plan`, in the listed order.
fn order_axes(plan: SweepPlan, names: &[String]) -> Result<SweepPlan> {
    let mut axes = Vec::with_capacity(names.len());
    for name in names {
        let axis: Axis = name.parse().map_err(Error::InvalidArgument)?;
        if axes.iter().any(|a: &AxisCandidates| a.axis == axis) {
            return Err(Error::InvalidArgument(format!("sweep axis {name:?} listed twice")));
        }
        let found = plan
            .axes
            .iter()
            .find(|a| a.axis == axis)
            .ok_or_else(|| Error::InvalidArgument(format!("sweep plan has no candidates for {name:?}")))?;
        axes.push(found.clone());
    }
    Ok(SweepPlan { axes, ..plan })
}

fn sweep(cfg: &RunConfig, manifest: &Path, out: &Path, axes: Option<&[String]>) -> Result<()> {
    let mut plan = cfg.sweep.clone().unwrap_or_else(default_plan);
    if let Some(names) = axes {
        plan = order_axes(plan, names)?;
    }
    plan.validate()?;
    let entries = load_manifest(manifest)?;
    create_dir(out)?;
    let mut cache: HashMap<(usize, usize, usize), FeatureSet> = HashMap::new();
    let log = greedy_sweep(&plan, |p| {
        let pipeline = PipelineConfig {
            sample_rate: cfg.pipeline.sample_rate,
            stft: StftConfig::new(p.window, p.hop)?,
            frames: p.frames,
        };
        pipeline.validate()?;
        let fs = match cache.entry((p.window, p.hop, p.frames)) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => v.insert(build_features(&entries, &pipeline)?),
        };
        let model = ModelConfig {
            kernel: (p.kernel, p.kernel),
            blocks: p.blocks,
            filters: p.filters,
            input_shape: (pipeline.bins(), p.frames),
            ..cfg.model
        };
        let summary = cross_validate(fs, &model, &cfg.train)?.summary();
        let score = SweepScore {
            metrics: summary.metrics.mean(),
            params: summary.params,
        };
        log::info!("{p:?}: {}", metrics_line(&score.metrics));
        Ok(score)
    })?;

    let mut jsonl = String::new();
    let mut csv = String::from("axis,kernel,blocks,frames,window,filters,hop,accuracy,precision,recall,f1,params\n");
    for r in &log.records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
        let (p, m) = (&r.point, &r.score.metrics);
        let axis = serde_json::to_value(r.axis)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            axis.as_str().unwrap_or_default(),
            p.kernel,
            p.blocks,
            p.frames,
            p.window,
            p.filters,
            p.hop,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            r.score.params
        );
    }
    atomic_write_bytes(&out.join("sweep.jsonl"), jsonl.as_bytes())?;
    atomic_write_bytes(&out.join("sweep.csv"), csv.as_bytes())?;
    write_json(&log.best, &out.join("best.json"))?;
    print!("{csv}");
    let b = &log.best;
    println!(
        "best: K{} B{} P{} W{} H{} F{}",
        b.kernel, b.blocks, b.filters, b.window, b.hop, b.frames
    );
    Ok(())
}

fn gradcam(cfg: &RunConfig, model: &Path, input: &Path, target: Label, segment: usize, out: &Path) -> Result<()> {
    let model = Model::load(model)?;
    check_shape(&model.cfg, &cfg.pipeline)?;
    let features = read_wav(input)
        .and_then(|b| cfg.pipeline.features_for(&b))
        .map_err(in_file(input))?;
    let feature = features.get(segment).ok_or_else(|| {
        Error::InvalidArgument(format!("{} has {} segments; no segment {segment}", input.display(), features.len()))
    })?;
    let heat = grad_cam(&model, feature, target)?;
    let (rows, cols) = model.cfg.input_shape;
    let spec = Matrix {
        rows,
        cols,
        data: feature.clone(),
    };
    heatmap_overlay(&heat, &spec, out)?;
    let hottest = (0..rows)
        .map(|r| (r, (0..cols).map(|c| heat.values.get(r, c)).sum::<f32>()))
        .fold((0, f32::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
    let bin_hz = cfg.pipeline.sample_rate as f64 / cfg.pipeline.stft.fft_size as f64;
    println!(
        "{} heatmap of segment {segment}: hottest row {} (~{:.0} Hz) -> {}",
        target,
        hottest.0,
        hottest.0 as f64 * bin_hz,
        out.display()
    );
    Ok(())
}

fn quantize(model_path: &Path, out: &Path, features: Option<&Path>) -> Result<()> {
    let model = Model::load(model_path)?;
    let q = quantize_dynamic(&model);
    q.save(out)?;
    let float_bytes = fold_batchnorm(&model).payload_bytes();
    let q_bytes = q.payload_bytes();
    println!(
        "weight payload {float_bytes} -> {q_bytes} bytes ({:.3}x) -> {}",
        q_bytes as f64 / float_bytes as f64,
        out.display()
    );
    if let Some(path) = features {
        let fs = FeatureSet::load(path)?;
        if (fs.bins, fs.frames) != model.cfg.input_shape {
            return Err(Error::Config(format!(
                "{}: features are {}x{}, model expects {:?}",
                path.display(),
                fs.bins,
                fs.frames,
                model.cfg.input_shape
            )));
        }
        let all: Vec<usize> = (0..fs.len()).collect();
        let x = fs.input(&all);
        let a = Classifier::Float(model).positive(&x)?;
        let b = Classifier::Quantized(q).positive(&x)?;
        let agree = a.iter().zip(&b).filter(|(x, y)| predicted(**x) == predicted(**y)).count();
        println!(
            "argmax agreement {agree}/{} ({:.2}%)",
            fs.len(),
            100.0 * agree as f64 / fs.len().max(1) as f64
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SegmentProb {
    segment: usize,
    probability: f32,
}

#[derive(Serialize)]
struct Inference {
    segments: Vec<SegmentProb>,
    /// Maximum over segments.
    aggregate: f32,
    label: Label,
}

fn infer(cfg: &RunConfig, model: &Path, input: &Path, json: bool) -> Result<()> {
    let clf = Classifier::load(model)?;
    check_shape(clf.config(), &cfg.pipeline)?;
    let features = read_wav(input)
        .and_then(|b| cfg.pipeline.features_for(&b))
        .map_err(in_file(input))?;
    let probs = clf.positive(&feature_tensor(&features, clf.config().input_shape)?)?;
    let aggregate = probs.iter().copied().fold(0.0f32, f32::max);
    let result = Inference {
        segments: probs
            .iter()
            .enumerate()
            .map(|(segment, &probability)| SegmentProb { segment, probability })
            .collect(),
        aggregate,
        label: predicted(aggregate),
    };
    if json {
        println!("{}", serde_json::to_string(&result)?);
    } else {
        for s in &result.segments {
            println!("segment {}: {:.2}%", s.segment, 100.0 * s.probability);
        }
        println!("aggregate: {:.2}% ({})", 100.0 * aggregate, result.label);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Latency {
    mean_ms: f64,
    p50_ms: f64,
    p95_ms: f64,
}

impl Latency {
    fn of(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let rank = |q: f64| ms[((q * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1];
        Latency {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
        }
    }
}

#[derive(Serialize)]
struct BenchReport {
    n: usize,
    float: Latency,
    quantized: Latency,
    /// Quantized over float mean latency.
    ratio: f64,
    float_payload_bytes: usize,
    quantized_payload_bytes: usize,
}

fn time_ms(n: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    f()?;
    (0..n)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

fn bench(cfg: &RunConfig, model: &Path, n: usize, out: Option<&Path>) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()));
    }
    let model = Model::load(model)?;
    let q = quantize_dynamic(&model);
    let (h, w) = model.cfg.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x = Tensor::from_vec(vec![1, 1, h, w], (0..h * w).map(|_| rng.gen::<f32>()).collect())?;
    let float = Latency::of(time_ms(n, || model.predict(&x).map(|_| ()))?);
    let quantized = Latency::of(time_ms(n, || q.predict(&x).map(|_| ()))?);
    let report = BenchReport {
        n,
        ratio: quantized.mean_ms / float.mean_ms,
        float,
        quantized,
        float_payload_bytes: fold_batchnorm(&model).payload_bytes(),
        quantized_payload_bytes: q.payload_bytes(),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = out {
        write_json(&report, path)?;
    }
    Ok(())
}
