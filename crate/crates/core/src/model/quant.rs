//! Batch-norm folding and int8 dynamic-range quantization.
//!
//! `WBNQ` files (little-endian):
//!
//! ```text
//! "WBNQ" | version u32 | config: u32 len + JSON | layer count u32 |
//! per layer: u32 len + name | ndim u32 | dims u32 × ndim | channel axis u32 |
//!            scales f32 × channels | weights i8 × prod(dims) | bias f32 × channels
//! ```

use std::path::Path;

use wingbeat_tensor::{kernels, Tensor};

use super::serial::{format_err, read_header, read_tensor_header};
use super::{chunked, head_forward, residual_tail, Conv, Dense, Model, ModelConfig};
use crate::error::Result;
use crate::fsutil::{atomic_write_bytes, put_f32, put_str, put_u32, read_bytes, Reader};

pub const QUANT_MAGIC: &[u8; 4] = b"WBNQ";
pub const QUANT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FoldedBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

/// Float network with every batch norm absorbed into its convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedModel {
    pub cfg: ModelConfig,
    pub blocks: Vec<FoldedBlock>,
    pub hidden: Dense,
    pub head: Dense,
}

fn fold_conv(c: &Conv, n: &super::Norm, eps: f32) -> Conv {
    let (scale, shift) = kernels::bn_eval_affine(&n.gamma, &n.beta, &n.running_mean, &n.running_var, eps);
    let per_out = c.w.len() / scale.len();
    let mut w = c.w.clone();
    for (o, chunk) in w.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[o]);
    }
    let b = c.b.data().iter().zip(scale.iter().zip(&shift)).map(|(&b, (&s, &t))| b * s + t).collect();
    Conv {
        w,
        b: Tensor::from_vec(c.b.shape().to_vec(), b).expect("bias shape"),
    }
}

/// `conv → BN(eval)` becomes a single convolution with rescaled weights.
pub fn fold_batchnorm(model: &Model) -> FoldedModel {
    let eps = model.cfg.bn_eps as f32;
    FoldedModel {
        cfg: model.cfg,
        blocks: model
            .blocks
            .iter()
            .map(|b| FoldedBlock {
                conv1: fold_conv(&b.conv1, &b.bn1, eps),
                conv2: fold_conv(&b.conv2, &b.bn2, eps),
                skip: b.skip.clone(),
            })
            .collect(),
        hidden: model.hidden.clone(),
        head: model.head.clone(),
    }
}

impl FoldedModel {
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        chunked(x, |mut h| {
            for b in &self.blocks {
                let a = kernels::relu(&kernels::conv2d(&h, &b.conv1.w, Some(&b.conv1.b))?);
                let a = kernels::conv2d(&a, &b.conv2.w, Some(&b.conv2.b))?;
                h = residual_tail(a, &h, b.skip.as_ref())?;
            }
            head_forward(h, &self.hidden, &self.head)
        })
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(kernels::softmax(&self.logits(x)?, 1)?)
    }

    /// Weight-bearing layers in file order: `(name, weight, bias, channel axis)`.
    fn layers(&self) -> Vec<(String, &Tensor<f32>, &Tensor<f32>, usize)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.conv1"), &b.conv1.w, &b.conv1.b, 0));
            v.push((format!("block{i}.conv2"), &b.conv2.w, &b.conv2.b, 0));
            if let Some(s) = &b.skip {
                v.push((format!("block{i}.skip"), &s.w, &s.b, 0));
            }
        }
        v.push(("hidden".into(), &self.hidden.w, &self.hidden.b, 1));
        v.push(("head".into(), &self.head.w, &self.head.b, 1));
        v
    }

    /// Bytes of f32 weights and biases.
    pub fn payload_bytes(&self) -> usize {
        self.layers().iter().map(|(_, w, b, _)| 4 * (w.len() + b.len())).sum()
    }
}

/// Symmetric int8 weights with one scale per output channel:
/// `w ≈ q * scale[c]`, `scale[c] = max|w_c| / 127`. An all-zero channel
/// gets scale 0 and dequantizes to zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    pub shape: Vec<usize>,
    /// 0 for `[O, C, kh, kw]` convolutions, 1 for `[D, O]` dense layers.
    pub axis: usize,
    pub scales: Vec<f32>,
    pub data: Vec<i8>,
}

impl QuantizedWeight {
    fn channel_of(shape: &[usize], axis: usize, i: usize) -> usize {
        let inner: usize = shape[axis + 1..].iter().product();
        (i / inner) % shape[axis]
    }

    pub fn quantize(w: &Tensor<f32>, axis: usize) -> Self {
        let shape = w.shape().to_vec();
        let mut max = vec![0.0f32; shape[axis]];
        for (i, &v) in w.data().iter().enumerate() {
            let c = Self::channel_of(&shape, axis, i);
            max[c] = max[c].max(v.abs());
        }
        let scales: Vec<f32> = max.iter().map(|m| m / 127.0).collect();
        let data = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = scales[Self::channel_of(&shape, axis, i)];
                if s == 0.0 {
                    0
                } else {
                    (v / s).round().clamp(-127.0, 127.0) as i8
                }
            })
            .collect();
        QuantizedWeight {
            shape,
            axis,
            scales,
            data,
        }
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f32 * self.scales[Self::channel_of(&self.shape, self.axis, i)])
            .collect();
        Tensor::from_vec(self.shape.clone(), data).expect("shape matches data")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub weight: QuantizedWeight,
    pub bias: Tensor<f32>,
}

/// Int8 weights with float activations. The dequantized network is
/// materialized once at construction and reused by every inference.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub cfg: ModelConfig,
    pub layers: Vec<QuantizedLayer>,
    runtime: FoldedModel,
}

pub fn quantize_dynamic(model: &Model) -> QuantizedModel {
    let folded = fold_batchnorm(model);
    let layers = folded
        .layers()
        .into_iter()
        .map(|(name, w, b, axis)| QuantizedLayer {
            name,
            weight: QuantizedWeight::quantize(w, axis),
            bias: b.clone(),
        })
        .collect();
    QuantizedModel::from_layers(model.cfg, layers)
}

impl QuantizedModel {
    fn from_layers(cfg: ModelConfig, layers: Vec<QuantizedLayer>) -> Self {
        let mut it = layers.iter().map(|l| (l.weight.dequantize(), l.bias.clone()));
        let mut next = || {
            let (w, b) = it.next().expect("layer list matches topology");
            Conv { w, b }
        };
        let blocks = (0..cfg.blocks)
            .map(|i| FoldedBlock {
                conv1: next(),
                conv2: next(),
                skip: (i == 0 && cfg.filters != 1).then(&mut next),
            })
            .collect();
        let Conv { w, b } = next();
        let hidden = Dense { w, b };
        let Conv { w, b } = next();
        let head = Dense { w, b };
        QuantizedModel {
            cfg,
            layers,
            runtime: FoldedModel {
                cfg,
                blocks,
                hidden,
                head,
            },
        }
    }

    /// Class probabilities `[N, 2]`.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.runtime.predict(x)
    }

    /// Bytes of int8 weights, f32 scales and f32 biases.
    pub fn payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + 4 * l.weight.scales.len() + 4 * l.bias.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(QUANT_MAGIC);
        put_u32(&mut out, QUANT_VERSION);
        put_str(&mut out, &serde_json::to_string(&self.cfg).expect("config serializes"));
        put_u32(&mut out, self.layers.len() as u32);
        for l in &self.layers {
            put_str(&mut out, &l.name);
            put_u32(&mut out, l.weight.shape.len() as u32);
            for &d in &l.weight.shape {
                put_u32(&mut out, d as u32);
            }
            put_u32(&mut out, l.weight.axis as u32);
            l.weight.scales.iter().for_each(|&s| put_f32(&mut out, s));
            out.extend(l.weight.data.iter().map(|&q| q as u8));
            l.bias.data().iter().for_each(|&b| put_f32(&mut out, b));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        const KIND: &str = "quantized model";
        let mut r = Reader::new(bytes);
        let cfg = read_header(&mut r, path, QUANT_MAGIC, QUANT_VERSION, KIND)?;
        cfg.validate().map_err(|e| format_err(path, KIND, e.to_string()))?;
        // Expected layout comes from a freshly built float model.
        let reference = fold_batchnorm(&Model::build(&cfg, 0)?);
        let expected = reference.layers();
        let count = r.u32().ok_or_else(|| format_err(path, KIND, "truncated layer count"))? as usize;
        if count != expected.len() {
            return Err(format_err(path, KIND, format!("{count} layers, config implies {}", expected.len())));
        }
        let mut layers = Vec::with_capacity(count);
        for (name, w, b, axis) in expected {
            let (found, dims) = read_tensor_header(&mut r, path, KIND)?;
            let file_axis = r.u32().ok_or_else(|| format_err(path, KIND, "truncated axis"))? as usize;
            if found != name || dims != w.shape() || file_axis != axis {
                return Err(format_err(
                    path,
                    KIND,
                    format!("layer {found:?} {dims:?} where config expects {name:?} {:?}", w.shape()),
                ));
            }
            let trunc = || format_err(path, KIND, format!("truncated data for {name}"));
            let channels = dims[axis];
            let scales = r.f32s(channels).ok_or_else(trunc)?;
            let data = r.take(w.len()).ok_or_else(trunc)?.iter().map(|&b| b as i8).collect();
            let bias = Tensor::from_vec(b.shape().to_vec(), r.f32s(b.len()).ok_or_else(trunc)?)?;
            layers.push(QuantizedLayer {
                name,
                weight: QuantizedWeight {
                    shape: dims,
                    axis,
                    scales,
                    data,
                },
                bias,
            });
        }
        if !r.is_done() {
            return Err(format_err(path, KIND, "trailing bytes"));
        }
        Ok(Self::from_layers(cfg, layers))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}
