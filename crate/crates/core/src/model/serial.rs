//! `WBNN` float model files.
//!
//! Little-endian throughout:
//!
//! ```text
//! "WBNN" | version u32 | config: u32 len + JSON | tensor count u32 |
//! per tensor: u32 len + name | ndim u32 | dims u32 × ndim | f32 × prod(dims)
//! ```
//!
//! Tensors appear in topology order, running statistics included.

use std::path::Path;

use wingbeat_tensor::Tensor;

use super::{Conv, Model, ModelConfig, Norm};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write_bytes, put_f32, put_str, put_u32, read_bytes, Reader};

pub const MODEL_MAGIC: &[u8; 4] = b"WBNN";
pub const MODEL_VERSION: u32 = 1;

impl Model {
    /// Named tensors in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            named_conv(&mut v, &format!("block{i}.conv1"), &b.conv1);
            named_norm(&mut v, &format!("block{i}.bn1"), &b.bn1);
            named_conv(&mut v, &format!("block{i}.conv2"), &b.conv2);
            named_norm(&mut v, &format!("block{i}.bn2"), &b.bn2);
            if let Some(s) = &b.skip {
                named_conv(&mut v, &format!("block{i}.skip"), s);
            }
        }
        v.push(("hidden.w".into(), &self.hidden.w));
        v.push(("hidden.b".into(), &self.hidden.b));
        v.push(("head.w".into(), &self.head.w));
        v.push(("head.b".into(), &self.head.b));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend([&mut b.conv1.w, &mut b.conv1.b]);
            v.extend(norm_mut(&mut b.bn1));
            v.extend([&mut b.conv2.w, &mut b.conv2.b]);
            v.extend(norm_mut(&mut b.bn2));
            if let Some(s) = &mut b.skip {
                v.extend([&mut s.w, &mut s.b]);
            }
        }
        v.extend([&mut self.hidden.w, &mut self.hidden.b, &mut self.head.w, &mut self.head.b]);
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut out, MODEL_VERSION);
        put_str(&mut out, &serde_json::to_string(&self.cfg).expect("config serializes"));
        let tensors = self.named_tensors();
        put_u32(&mut out, tensors.len() as u32);
        for (name, t) in tensors {
            put_tensor(&mut out, &name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let cfg: ModelConfig = read_header(&mut r, path, MODEL_MAGIC, MODEL_VERSION, "model")?;
        // The seed is irrelevant: every tensor is overwritten below.
        let mut model = Model::build(&cfg, 0).map_err(|e| format_err(path, "model", e.to_string()))?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32().ok_or_else(|| format_err(path, "model", "truncated tensor count"))? as usize;
        if count != expected.len() {
            return Err(format_err(
                path,
                "model",
                format!("{count} tensors, config implies {}", expected.len()),
            ));
        }
        for ((name, shape), slot) in expected.iter().zip(model.named_tensors_mut()) {
            *slot = read_tensor(&mut r, path, "model", name, shape)?;
        }
        if !r.is_done() {
            return Err(format_err(path, "model", "trailing bytes"));
        }
        Ok(model)
    }

    /// Write atomically to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}

fn named_conv<'a>(v: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, c: &'a Conv) {
    v.push((format!("{prefix}.w"), &c.w));
    v.push((format!("{prefix}.b"), &c.b));
}

fn named_norm<'a>(v: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, n: &'a Norm) {
    v.push((format!("{prefix}.gamma"), &n.gamma));
    v.push((format!("{prefix}.beta"), &n.beta));
    v.push((format!("{prefix}.running_mean"), &n.running_mean));
    v.push((format!("{prefix}.running_var"), &n.running_var));
}

fn norm_mut(n: &mut Norm) -> [&mut Tensor<f32>; 4] {
    [&mut n.gamma, &mut n.beta, &mut n.running_mean, &mut n.running_var]
}

pub(crate) fn format_err(path: &Path, kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        kind,
        msg: msg.into(),
    }
}

pub(crate) fn read_header(
    r: &mut Reader<'_>,
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    kind: &'static str,
) -> Result<ModelConfig> {
    if r.take(4) != Some(magic.as_slice()) {
        return Err(format_err(path, kind, format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let found = r.u32().ok_or_else(|| format_err(path, kind, "truncated header"))?;
    if found != version {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            kind,
            found,
            expected: version,
        });
    }
    let json = r.string().ok_or_else(|| format_err(path, kind, "truncated config"))?;
    serde_json::from_str(&json).map_err(|e| format_err(path, kind, format!("config: {e}")))
}

pub(crate) fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_str(out, name);
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        put_f32(out, v);
    }
}

pub(crate) fn read_tensor(
    r: &mut Reader<'_>,
    path: &Path,
    kind: &'static str,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<f32>> {
    let (found, dims) = read_tensor_header(r, path, kind)?;
    if found != name || dims != shape {
        return Err(format_err(
            path,
            kind,
            format!("tensor {found:?} {dims:?} where config expects {name:?} {shape:?}"),
        ));
    }
    let data = r
        .f32s(dims.iter().product())
        .ok_or_else(|| format_err(path, kind, format!("truncated data for {name}")))?;
    Ok(Tensor::from_vec(dims, data)?)
}

pub(crate) fn read_tensor_header(r: &mut Reader<'_>, path: &Path, kind: &'static str) -> Result<(String, Vec<usize>)> {
    let trunc = || format_err(path, kind, "truncated tensor header");
    let name = r.string().ok_or_else(trunc)?;
    let ndim = r.u32().ok_or_else(trunc)? as usize;
    if ndim > 8 {
        return Err(format_err(path, kind, format!("tensor {name:?} has {ndim} dims")));
    }
    let dims = (0..ndim)
        .map(|_| r.u32().map(|d| d as usize).ok_or_else(trunc))
        .collect::<Result<Vec<_>>>()?;
    Ok((name, dims))
}
