//! The residual convolutional classifier.
//!
//! `blocks` repetitions of
//!
//! ```text
//! x ── conv K×K ─ BN ─ ReLU ─ conv K×K ─ BN ──(+)── ReLU ── maxpool 2×2 ── dropout
//!  └──────────── identity or 1×1 conv ────────┘
//! ```
//!
//! followed by `flatten → dense(dense_width) + ReLU → dense(2) → softmax`.
//! Class 1 is the positive (target species) class.

mod quant;
mod serial;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wingbeat_tensor::{kernels, BatchStats, Graph, Mode, Tensor, Var};

use crate::error::{Error, Result};

pub use quant::{
    fold_batchnorm, quantize_dynamic, FoldedBlock, FoldedModel, QuantizedLayer, QuantizedModel, QuantizedWeight,
    QUANT_MAGIC, QUANT_VERSION,
};
pub use serial::{MODEL_MAGIC, MODEL_VERSION};

/// Samples per chunk when predicting on large inputs.
const PREDICT_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Convolution kernel `(kh, kw)`.
    pub kernel: (usize, usize),
    pub blocks: usize,
    /// Filters in every convolution of every block.
    pub filters: usize,
    pub dense_width: usize,
    /// Feature shape `(bins, frames)`.
    pub input_shape: (usize, usize),
    pub dropout: f64,
    pub bn_eps: f64,
    /// Weight of the old value in the running-statistics update.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel: (5, 5),
            blocks: 5,
            filters: 32,
            dense_width: 256,
            input_shape: (513, 60),
            dropout: 0.2,
            bn_eps: 0.001,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.filters == 0 || self.dense_width == 0 {
            return bad("blocks, filters and dense_width must be >= 1".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad(format!("kernel {:?} must be nonzero", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be > 0 and bn_momentum in [0, 1)".into());
        }
        let (mut h, mut w) = self.input_shape;
        for b in 0..self.blocks {
            if h < 2 || w < 2 {
                return bad(format!(
                    "input {:?} collapses to {h}x{w} before pooling in block {}",
                    self.input_shape,
                    b + 1
                ));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Spatial size after every block's pooling.
    pub fn final_spatial(&self) -> (usize, usize) {
        let (h, w) = self.input_shape;
        (h >> self.blocks, w >> self.blocks)
    }

    pub fn flat_len(&self) -> usize {
        let (h, w) = self.final_spatial();
        self.filters * h * w
    }
}

/// Convolution weight `[O, C, kh, kw]` and bias `[O]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub running_mean: Tensor<f32>,
    pub running_var: Tensor<f32>,
}

/// Dense weight `[in, out]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub bn1: Norm,
    pub conv2: Conv,
    pub bn2: Norm,
    /// 1×1 projection when the block changes the channel count.
    pub skip: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub blocks: Vec<ResBlock>,
    pub hidden: Dense,
    pub head: Dense,
}

/// Graph handles produced by [`Model::trace`].
pub struct Trace {
    pub logits: Var,
    pub probs: Var,
    /// Output of the last residual block, before its pooling.
    pub last_block: Var,
    /// Trainable parameters in [`Model::params_mut`] order.
    pub params: Vec<Var>,
    /// Batch statistics of every norm layer (train mode only).
    pub bn_stats: Vec<BatchStats<f32>>,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}

impl Conv {
    fn init(out: usize, cin: usize, (kh, kw): (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        Conv {
            w: he_uniform(&[out, cin, kh, kw], cin * kh * kw, rng),
            b: Tensor::zeros(&[out]),
        }
    }
}

impl Norm {
    fn init(c: usize) -> Self {
        Norm {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
        }
    }

    fn update(&mut self, stats: &BatchStats<f32>, momentum: f32) {
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

impl Dense {
    fn init(d: usize, o: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: he_uniform(&[d, o], d, rng),
            b: Tensor::zeros(&[o]),
        }
    }
}

impl Model {
    /// He-uniform weights, zero biases, identity batch norms. The output
    /// layer starts at zero so the first updates are not spent undoing
    /// large random logits from the growing residual stream.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = cfg.filters;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let cin = if i == 0 { 1 } else { p };
                ResBlock {
                    conv1: Conv::init(p, cin, cfg.kernel, &mut rng),
                    bn1: Norm::init(p),
                    conv2: Conv::init(p, p, cfg.kernel, &mut rng),
                    bn2: Norm::init(p),
                    skip: (cin != p).then(|| Conv::init(p, cin, (1, 1), &mut rng)),
                }
            })
            .collect();
        Ok(Model {
            cfg: *cfg,
            blocks,
            hidden: Dense::init(cfg.flat_len(), cfg.dense_width, &mut rng),
            head: Dense {
                w: Tensor::zeros(&[cfg.dense_width, 2]),
                b: Tensor::zeros(&[2]),
            },
        })
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor<f32>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([&b.conv1.w, &b.conv1.b, &b.bn1.gamma, &b.bn1.beta]);
            v.extend([&b.conv2.w, &b.conv2.b, &b.bn2.gamma, &b.bn2.beta]);
            if let Some(s) = &b.skip {
                v.extend([&s.w, &s.b]);
            }
        }
        v.extend([&self.hidden.w, &self.hidden.b, &self.head.w, &self.head.b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend([&mut b.conv1.w, &mut b.conv1.b, &mut b.bn1.gamma, &mut b.bn1.beta]);
            v.extend([&mut b.conv2.w, &mut b.conv2.b, &mut b.bn2.gamma, &mut b.bn2.beta]);
            if let Some(s) = &mut b.skip {
                v.extend([&mut s.w, &mut s.b]);
            }
        }
        v.extend([&mut self.hidden.w, &mut self.hidden.b, &mut self.head.w, &mut self.head.b]);
        v
    }

    /// Number of trainable scalars; running statistics are excluded.
    pub fn count_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let (h, w) = self.cfg.input_shape;
        match *x.shape() {
            [_, 1, xh, xw] if xh == h && xw == w => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "input shape {:?} does not match model input [N, 1, {h}, {w}]",
                x.shape()
            ))),
        }
    }

    /// Record a forward pass on `g`. Dropout draws from `rng` in train mode.
    pub fn trace<R: Rng>(&self, g: &mut Graph<f32>, x: Tensor<f32>, mode: Mode, rng: &mut R) -> Result<Trace> {
        self.check_input(&x)?;
        let eps = self.cfg.bn_eps as f32;
        let params: Vec<Var> = self.params().into_iter().map(|t| g.param(t.clone())).collect();
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches topology");
        let mut bn_stats = Vec::new();
        let mut h = g.input(x);
        let mut last_block = h;
        for block in &self.blocks {
            let (w1, b1, g1, be1) = (next(), next(), next(), next());
            let (w2, b2, g2, be2) = (next(), next(), next(), next());
            let skip = block.skip.as_ref().map(|_| (next(), next()));

            let a = g.conv2d(h, w1, Some(b1))?;
            let (a, s1) = g.batchnorm2d(a, g1, be1, &block.bn1.running_mean, &block.bn1.running_var, eps, mode)?;
            let a = g.relu(a)?;
            let a = g.conv2d(a, w2, Some(b2))?;
            let (a, s2) = g.batchnorm2d(a, g2, be2, &block.bn2.running_mean, &block.bn2.running_var, eps, mode)?;
            bn_stats.extend(s1.into_iter().chain(s2));
            let shortcut = match skip {
                Some((ws, bs)) => g.conv2d(h, ws, Some(bs))?,
                None => h,
            };
            let sum = g.add(a, shortcut)?;
            last_block = g.relu(sum)?;
            let pooled = g.maxpool2d(last_block)?;
            h = g.dropout(pooled, self.cfg.dropout, mode, rng)?;
        }
        let flat = g.flatten(h)?;
        let (wh, bh, wo, bo) = (next(), next(), next(), next());
        let hidden = g.dense(flat, wh, bh)?;
        let hidden = g.relu(hidden)?;
        let logits = g.dense(hidden, wo, bo)?;
        let probs = g.softmax(logits, 1)?;
        Ok(Trace {
            logits,
            probs,
            last_block,
            params,
            bn_stats,
        })
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<f32>]) {
        let m = self.cfg.bn_momentum as f32;
        let norms = self.blocks.iter_mut().flat_map(|b| [&mut b.bn1, &mut b.bn2]);
        for (n, s) in norms.zip(stats) {
            n.update(s, m);
        }
    }

    /// Eval-mode logits `[N, 2]` without recording a graph.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        chunked(x, |c| self.logits_chunk(c))
    }

    fn logits_chunk(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let eps = self.cfg.bn_eps as f32;
        let bn = |t: &Tensor<f32>, n: &Norm| {
            kernels::batchnorm_eval(t, &n.gamma, &n.beta, &n.running_mean, &n.running_var, eps)
        };
        let mut h = x;
        for b in &self.blocks {
            let a = bn(&kernels::conv2d(&h, &b.conv1.w, Some(&b.conv1.b))?, &b.bn1)?;
            let a = kernels::relu(&a);
            let a = bn(&kernels::conv2d(&a, &b.conv2.w, Some(&b.conv2.b))?, &b.bn2)?;
            h = residual_tail(a, &h, b.skip.as_ref())?;
        }
        head_forward(h, &self.hidden, &self.head)
    }

    /// Eval-mode class probabilities `[N, 2]`.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(kernels::softmax(&self.logits(x)?, 1)?)
    }
}

/// `maxpool(relu(a + shortcut(x)))`.
pub(crate) fn residual_tail(a: Tensor<f32>, x: &Tensor<f32>, skip: Option<&Conv>) -> Result<Tensor<f32>> {
    let projected;
    let shortcut = match skip {
        Some(s) => {
            projected = kernels::conv2d(x, &s.w, Some(&s.b))?;
            &projected
        }
        None => x,
    };
    let mut a = a;
    for (v, &s) in a.data_mut().iter_mut().zip(shortcut.data()) {
        *v = (*v + s).max(0.0);
    }
    Ok(kernels::maxpool2x2(&a)?.0)
}

pub(crate) fn head_forward(h: Tensor<f32>, hidden: &Dense, head: &Dense) -> Result<Tensor<f32>> {
    let n = h.shape()[0];
    let rest = h.len() / n.max(1);
    let flat = h.reshape(&[n, rest])?;
    let z = kernels::relu(&kernels::dense(&flat, &hidden.w, &hidden.b)?);
    Ok(kernels::dense(&z, &head.w, &head.b)?)
}

/// Apply `f` to slices of at most [`PREDICT_CHUNK`] samples and concatenate.
pub(crate) fn chunked(
    x: &Tensor<f32>,
    f: impl Fn(Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    let mut rows = Vec::with_capacity(n * 2);
    for start in (0..n).step_by(PREDICT_CHUNK) {
        let end = (start + PREDICT_CHUNK).min(n);
        rows.extend_from_slice(f(x.slice_outer(start, end)?)?.data());
    }
    Ok(Tensor::from_vec(vec![n, 2], rows)?)
}

/// Parameter count from the configuration alone.
pub fn count_params_closed_form(cfg: &ModelConfig) -> usize {
    let (kh, kw) = cfg.kernel;
    let p = cfg.filters;
    let conv = |cin: usize, k: usize| k * cin * p + p;
    let mut total = 0;
    for i in 0..cfg.blocks {
        let cin = if i == 0 { 1 } else { p };
        total += conv(cin, kh * kw) + 2 * p + conv(p, kh * kw) + 2 * p;
        if cin != p {
            total += conv(cin, 1);
        }
    }
    total + cfg.flat_len() * cfg.dense_width + cfg.dense_width + cfg.dense_width * 2 + 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            kernel: (3, 3),
            blocks: 2,
            filters: 4,
            dense_width: 8,
            input_shape: (9, 8),
            ..ModelConfig::default()
        }
    }

    fn input(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = cfg.input_shape;
        let data = (0..n * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(vec![n, 1, h, w], data).unwrap()
    }

    #[test]
    fn minimal_and_collapsing_configs() {
        let one = ModelConfig {
            blocks: 1,
            input_shape: (4, 4),
            ..small()
        };
        let m = Model::build(&one, 0).unwrap();
        assert_eq!(one.final_spatial(), (2, 2));
        assert_eq!(m.predict(&input(1, &one, 0)).unwrap().shape(), &[1, 2]);
        let six = ModelConfig {
            blocks: 6,
            input_shape: (8, 8),
            ..small()
        };
        assert!(matches!(Model::build(&six, 0), Err(Error::Config(_))));
    }

    #[test]
    fn default_count() {
        assert_eq!(count_params_closed_form(&ModelConfig::default()), 364_066);
    }

    #[test]
    fn trace_matches_predict_in_eval() {
        let cfg = small();
        let m = Model::build(&cfg, 3).unwrap();
        let x = input(3, &cfg, 1);
        let mut g = Graph::new();
        let t = m.trace(&mut g, x.clone(), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = m.predict(&x).unwrap();
        for (a, b) in g.value(t.probs).data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(t.bn_stats.is_empty());
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let cfg = small();
        let mut m = Model::build(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let t = m
            .trace(&mut g, input(4, &cfg, 2), Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(t.bn_stats.len(), 2 * cfg.blocks);
        let before = m.blocks[0].bn1.running_mean.clone();
        m.update_running_stats(&t.bn_stats);
        let expected = 0.1 * t.bn_stats[0].mean[0] + 0.9 * before.data()[0];
        assert!((m.blocks[0].bn1.running_mean.data()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = Model::build(&small(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }
}
