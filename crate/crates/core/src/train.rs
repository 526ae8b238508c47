//! Training loop and k-fold cross-validation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wingbeat_tensor::{Adam, AdamConfig, Graph, Mode, Tensor};

use crate::dataset::{plan_folds, weighted_batches, FeatureSet, FoldPlan, Label};
use crate::error::{Error, Result};
use crate::eval::{metrics, Confusion, MetricStats, MetricsReport};
use crate::fsutil::atomic_write;
use crate::model::{Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub folds: usize,
    /// Stop when the epoch loss has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    /// Keep all features of one group in one fold.
    pub group_folds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            seed: 7,
            folds: 10,
            early_stop_patience: None,
            group_folds: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// Seed for everything random in one fold.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed ^ fold as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub confusion: Confusion,
    pub metrics: MetricsReport,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
    pub test_size: usize,
}

/// Mean cross-entropy of one batch after an Adam step.
fn train_step(
    model: &mut Model,
    opt: &mut Adam<f32>,
    x: Tensor<f32>,
    y: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let t = model.trace(&mut g, x, Mode::Train, rng)?;
    let mut onehot = vec![0.0f32; y.len() * 2];
    for (i, &c) in y.iter().enumerate() {
        onehot[i * 2 + c] = 1.0;
    }
    let loss = g.softmax_cross_entropy(t.logits, Tensor::from_vec(vec![y.len(), 2], onehot)?)?;
    let value = g.value(loss).item().expect("scalar loss") as f64;
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss became {value}")));
    }
    g.backward(loss)?;
    let zeros: Vec<Tensor<f32>>;
    let grads: Vec<&Tensor<f32>> = if t.params.iter().all(|&p| g.grad(p).is_some()) {
        t.params.iter().map(|&p| g.grad(p).unwrap()).collect()
    } else {
        zeros = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        t.params.iter().zip(&zeros).map(|(&p, z)| g.grad(p).unwrap_or(z)).collect()
    };
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    opt.step(&mut model.params_mut(), &grads)?;
    model.update_running_stats(&t.bn_stats);
    Ok(value)
}

/// Train a fresh model on `indices` drawn through `batches`, for
/// `ceil(train / batch)` steps per epoch.
pub(crate) fn fit(
    model: &mut Model,
    tcfg: &TrainConfig,
    mut batches: crate::dataset::BatchStream<'_>,
    seed: u64,
    label: &str,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(AdamConfig {
        lr: tcfg.lr,
        ..AdamConfig::default()
    });
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0D50));
    let steps = batches.train_size().div_ceil(tcfg.batch_size);
    let mut losses = Vec::with_capacity(tcfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..tcfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let b = batches.next().expect("endless stream");
            total += train_step(model, &mut opt, b.x, &b.y, &mut dropout_rng)?;
        }
        let mean = total / steps as f64;
        log::info!("{label} epoch {}/{}: loss {mean:.5}", epoch + 1, tcfg.epochs);
        losses.push(mean);
        if let Some(patience) = tcfg.early_stop_patience {
            if mean < best {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log::info!("{label}: early stop after epoch {}", epoch + 1);
                    break;
                }
            }
        }
    }
    Ok(losses)
}

/// Eval-mode argmax predictions for `indices`.
pub fn predict_labels(model: &Model, fs: &FeatureSet, indices: &[usize]) -> Result<Vec<Label>> {
    let probs = model.predict(&fs.input(indices))?;
    Ok(probs
        .data()
        .chunks(2)
        .map(|p| if p[1] > p[0] { Label::Positive } else { Label::Negative })
        .collect())
}

pub fn check_model_fits(fs: &FeatureSet, mcfg: &ModelConfig) -> Result<()> {
    if mcfg.input_shape != (fs.bins, fs.frames) {
        return Err(Error::Config(format!(
            "model input {:?} differs from feature shape ({}, {})",
            mcfg.input_shape, fs.bins, fs.frames
        )));
    }
    Ok(())
}

pub fn train_one(
    fs: &FeatureSet,
    plan: &FoldPlan,
    fold: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(Model, FoldReport)> {
    tcfg.validate()?;
    check_model_fits(fs, mcfg)?;
    let seed = tcfg.fold_seed(fold);
    let mut model = Model::build(mcfg, seed)?;
    let batches = weighted_batches(fs, plan, fold, tcfg.batch_size, seed)?;
    let losses = fit(&mut model, tcfg, batches, seed, &format!("fold {fold}"))?;

    let test = plan.test_indices(fold);
    let truth: Vec<Label> = test.iter().map(|&i| fs.labels[i]).collect();
    let confusion = Confusion::from_pairs(&predict_labels(&model, fs, &test)?, &truth);
    let report = FoldReport {
        fold,
        metrics: metrics(&confusion)?,
        confusion,
        losses,
        test_size: test.len(),
    };
    log::info!(
        "fold {fold}: accuracy {:.4} f1 {:.4} on {} held out",
        report.metrics.accuracy,
        report.metrics.f1,
        test.len()
    );
    Ok((model, report))
}

/// Train on every sample, for the overfit check or a final model.
pub fn train_all(fs: &FeatureSet, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    tcfg.validate()?;
    check_model_fits(fs, mcfg)?;
    if fs.count(Label::Positive) == 0 || fs.count(Label::Negative) == 0 {
        return Err(Error::Config("training needs both classes".into()));
    }
    // A single pseudo-fold that no sample belongs to.
    let plan = FoldPlan {
        k: 1,
        assignments: vec![1; fs.len()],
        class_weights: crate::dataset::class_weights(&fs.labels),
    };
    let mut model = Model::build(mcfg, tcfg.seed)?;
    let batches = weighted_batches(fs, &plan, 0, tcfg.batch_size, tcfg.seed)?;
    let losses = fit(&mut model, tcfg, batches, tcfg.seed, "full")?;
    Ok((model, losses))
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub plan: FoldPlan,
    pub reports: Vec<FoldReport>,
    pub models: Vec<Model>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub folds: usize,
    pub samples: usize,
    pub params: usize,
    pub metrics: MetricStats,
    /// Sum of the per-fold confusion matrices.
    pub pooled: Confusion,
    /// Fold whose model is kept as the output model.
    pub selected_fold: usize,
}

impl CrossValidation {
    /// Fold with the best held-out F1, ties to the lowest index.
    pub fn best_fold(&self) -> usize {
        let mut best = 0;
        for r in &self.reports {
            if r.metrics.f1 > self.reports[best].metrics.f1 {
                best = r.fold;
            }
        }
        best
    }

    pub fn summary(&self) -> Summary {
        let ms: Vec<MetricsReport> = self.reports.iter().map(|r| r.metrics).collect();
        Summary {
            folds: self.plan.k,
            samples: self.plan.assignments.len(),
            params: self.models.first().map_or(0, |m| m.count_params()),
            metrics: MetricStats::of(&ms),
            pooled: self.reports.iter().fold(Confusion::default(), |a, r| a.merge(&r.confusion)),
            selected_fold: self.best_fold(),
        }
    }

    /// One JSON object per fold, in fold order.
    pub fn write_reports(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            use std::io::Write;
            for r in &self.reports {
                serde_json::to_writer(&mut *w, r)?;
                writeln!(w).map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        })
    }
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, summary)?;
        use std::io::Write;
        writeln!(w).map_err(|e| Error::io(path, e))
    })
}

/// k independent trainings from fresh initializations. Folds run on the
/// current rayon pool; results are ordered by fold.
pub fn cross_validate(fs: &FeatureSet, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<CrossValidation> {
    tcfg.validate()?;
    mcfg.validate()?;
    check_model_fits(fs, mcfg)?;
    let plan = plan_folds(fs, tcfg.folds, tcfg.seed, tcfg.group_folds)?;
    let results: Vec<(Model, FoldReport)> = (0..plan.k)
        .into_par_iter()
        .map(|fold| train_one(fs, &plan, fold, mcfg, tcfg))
        .collect::<Result<_>>()?;
    let (models, reports) = results.into_iter().unzip();
    Ok(CrossValidation { plan, reports, models })
}
