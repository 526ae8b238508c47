//! Forward and backward kernels on plain tensors.
//!
//! [`Graph`](crate::Graph) records these; inference paths call them directly
//! so no tape is kept alive.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements per GEMM call.
const COL_CHUNK_ELEMS: usize = 1 << 20;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pt: usize,
    pl: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize]) -> Result<Self> {
        if x.len() != 4 {
            return Err(TensorError::shape("conv2d", "input [N,C,H,W]", x));
        }
        if w.len() != 4 || w[1] != x[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("weight [O,{},kh,kw]", x[1]),
                w,
            ));
        }
        if w[2] == 0 || w[3] == 0 {
            return Err(TensorError::shape("conv2d", "non-empty kernel", w));
        }
        Ok(ConvGeom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            // "same" padding; extra row/column (even kernels) goes after.
            pt: (w[2] - 1) / 2,
            pl: (w[3] - 1) / 2,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn chunk_rows(&self, chunk_elems: usize) -> usize {
        (chunk_elems / (self.ckk() * self.w).max(1)).clamp(1, self.h.max(1))
    }
}

/// Column index range `[lo, hi)` of an output row whose source column
/// `x + shift` lies inside `[0, width)`.
fn valid_cols(width: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (width as isize - shift).clamp(0, width as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(xs: &[T], g: &ConvGeom, y0: usize, y1: usize, col: &mut [T]) {
    let n = (y1 - y0) * g.w;
    for c in 0..g.c {
        let plane = &xs[c * g.hw()..(c + 1) * g.hw()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let shift = kx as isize - g.pl as isize;
                let (lo, hi) = valid_cols(g.w, shift);
                for y in y0..y1 {
                    let d = &mut dst[(y - y0) * g.w..(y - y0 + 1) * g.w];
                    let sy = y as isize + ky as isize - g.pt as isize;
                    if sy < 0 || sy >= g.h as isize || lo >= hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    let s0 = (lo as isize + shift) as usize;
                    d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, y0: usize, y1: usize, dxs: &mut [T]) {
    let n = (y1 - y0) * g.w;
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &mut dxs[c * hw..(c + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * n..(row + 1) * n];
                let shift = kx as isize - g.pl as isize;
                let (lo, hi) = valid_cols(g.w, shift);
                if lo >= hi {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - g.pt as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let s = &src[(y - y0) * g.w + lo..(y - y0) * g.w + hi];
                    let d0 = sy as usize * g.w + (lo as isize + shift) as usize;
                    for (d, &v) in plane[d0..d0 + (hi - lo)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero "same" padding.
/// `x: [N,C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]` -> `[N,O,H,W]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    conv2d_chunked(x, w, b, COL_CHUNK_ELEMS)
}

fn conv2d_chunked<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    chunk_elems: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape())?;
    if let Some(b) = b {
        if b.shape() != [g.o] {
            return Err(TensorError::shape("conv2d", format!("bias [{}]", g.o), b.shape()));
        }
    }
    let hw = g.hw();
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let rows = g.chunk_rows(chunk_elems);
    let mut col = vec![T::zero(); g.ckk() * rows * g.w];
    let wv = MatView::dense(g.o, g.ckk());
    for s in 0..g.n {
        let xs = &x.data()[s * g.c * hw..(s + 1) * g.c * hw];
        let os = &mut out[s * g.o * hw..(s + 1) * g.o * hw];
        let mut y0 = 0;
        while y0 < g.h {
            let y1 = (y0 + rows).min(g.h);
            let ncols = (y1 - y0) * g.w;
            im2col(xs, &g, y0, y1, &mut col);
            gemm(
                T::one(),
                w.data(),
                wv,
                &col,
                MatView::dense(g.ckk(), ncols),
                T::zero(),
                os,
                MatView::dense(g.o, ncols).with_rs(hw).at(y0 * g.w),
            );
            y0 = y1;
        }
        if let Some(b) = b {
            for (o, plane) in os.chunks_mut(hw).enumerate() {
                let bo = b.data()[o];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Tensor::from_vec(vec![g.n, g.o, g.h, g.w], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    conv2d_backward_chunked(x, w, dy, need_dx, COL_CHUNK_ELEMS)
}

fn conv2d_backward_chunked<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    chunk_elems: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape())?;
    if dy.shape() != [g.n, g.o, g.h, g.w] {
        return Err(TensorError::shape("conv2d_backward", "dy [N,O,H,W]", dy.shape()));
    }
    let hw = g.hw();
    let ckk = g.ckk();
    let mut dw = vec![T::zero(); g.o * ckk];
    let mut db = vec![T::zero(); g.o];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let rows = g.chunk_rows(chunk_elems);
    let mut col = vec![T::zero(); ckk * rows * g.w];
    let mut dcol = if need_dx { vec![T::zero(); ckk * rows * g.w] } else { Vec::new() };
    for s in 0..g.n {
        let xs = &x.data()[s * g.c * hw..(s + 1) * g.c * hw];
        let dys = &dy.data()[s * g.o * hw..(s + 1) * g.o * hw];
        for (o, plane) in dys.chunks(hw).enumerate() {
            db[o] += plane.iter().copied().sum::<T>();
        }
        let mut y0 = 0;
        while y0 < g.h {
            let y1 = (y0 + rows).min(g.h);
            let ncols = (y1 - y0) * g.w;
            let dyv = MatView::dense(g.o, ncols).with_rs(hw).at(y0 * g.w);
            im2col(xs, &g, y0, y1, &mut col);
            // dW[O, CKK] += dY[O, N] * col^T
            gemm(
                T::one(),
                dys,
                dyv,
                &col,
                MatView::dense(ckk, ncols).t(),
                T::one(),
                &mut dw,
                MatView::dense(g.o, ckk),
            );
            if let Some(dx) = dx.as_mut() {
                // dcol[CKK, N] = W^T * dY
                gemm(
                    T::one(),
                    w.data(),
                    MatView::dense(g.o, ckk).t(),
                    dys,
                    dyv,
                    T::zero(),
                    &mut dcol,
                    MatView::dense(ckk, ncols),
                );
                col2im_add(&dcol, &g, y0, y1, &mut dx[s * g.c * hw..(s + 1) * g.c * hw]);
            }
            y0 = y1;
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)).transpose()?,
        dw: Tensor::from_vec(w.shape().to_vec(), dw)?,
        db: Tensor::from_vec(vec![g.o], db)?,
    })
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::shape(op, "[N,C,H,W]", shape)),
    }
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatch<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over `N*H*W`.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channel_param<T: Scalar>(op: &'static str, p: &Tensor<T>, c: usize) -> Result<()> {
    if p.shape() != [c] {
        return Err(TensorError::shape(op, format!("[{c}]"), p.shape()));
    }
    Ok(())
}

pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnBatch<T>)> {
    let (n, c, h, w) = nchw("batchnorm2d", x.shape())?;
    check_channel_param("batchnorm2d", gamma, c)?;
    check_channel_param("batchnorm2d", beta, c)?;
    let hw = h * w;
    let count = T::from_usize((n * hw).max(1)).unwrap();
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut sq = T::zero();
        for i in 0..n {
            for &v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let scale: Vec<T> = (0..c).map(|ch| gamma.data()[ch] * inv_std[ch]).collect();
    let shift: Vec<T> = (0..c)
        .map(|ch| beta.data()[ch] - mean[ch] * scale[ch])
        .collect();
    let y = affine_channels(x, &scale, &shift);
    Ok((y, BnBatch { mean, var, inv_std }))
}

pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = nchw("batchnorm2d", x.shape())?;
    for p in [gamma, beta, running_mean, running_var] {
        check_channel_param("batchnorm2d", p, c)?;
    }
    let (scale, shift) = bn_eval_affine(gamma, beta, running_mean, running_var, eps);
    Ok(affine_channels(x, &scale, &shift))
}

/// Eval-mode batch norm as a per-channel `scale * x + shift`.
pub fn bn_eval_affine<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let c = gamma.len();
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt())
        .collect();
    let shift = (0..c)
        .map(|ch| beta.data()[ch] - running_mean.data()[ch] * scale[ch])
        .collect();
    (scale, shift)
}

fn affine_channels<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut out = x.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let (a, b) = (scale[ch], shift[ch]);
            out[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = a * *v + b);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("shape preserved")
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn batchnorm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnBatch<T>,
    dy: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (n, c, h, w) = nchw("batchnorm2d_backward", x.shape())?;
    let hw = h * w;
    let m = T::from_usize((n * hw).max(1)).unwrap();
    let (xd, dyd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, is) = (stats.mean[ch], stats.inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (&xv, &g) in xd[r.clone()].iter().zip(&dyd[r]) {
                sum_dy += g;
                sum_dy_xhat += g * (xv - mu) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma.data()[ch] * is / m;
        for i in 0..n {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((d, &xv), &g) in dx[r.clone()].iter_mut().zip(&xd[r.clone()]).zip(&dyd[r]) {
                let xhat = (xv - mu) * is;
                *d = k * (m * g - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::from_vec(x.shape().to_vec(), dx)?,
        dgamma: Tensor::from_vec(vec![c], dgamma)?,
        dbeta: Tensor::from_vec(vec![c], dbeta)?,
    })
}

pub fn batchnorm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (n, c, h, w) = nchw("batchnorm2d_backward", x.shape())?;
    let hw = h * w;
    let (xd, dyd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let is = T::one() / (running_var.data()[ch] + eps).sqrt();
        let mu = running_mean.data()[ch];
        let k = gamma.data()[ch] * is;
        for i in 0..n {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((d, &xv), &g) in dx[r.clone()].iter_mut().zip(&xd[r.clone()]).zip(&dyd[r]) {
                *d = k * g;
                dgamma[ch] += g * (xv - mu) * is;
                dbeta[ch] += g;
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::from_vec(x.shape().to_vec(), dx)?,
        dgamma: Tensor::from_vec(vec![c], dgamma)?,
        dbeta: Tensor::from_vec(vec![c], dbeta)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and the flat input index of each maximum.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = nchw("maxpool2d", x.shape())?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(TensorError::shape("maxpool2d", "spatial dims >= 2", x.shape()));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, oh, ow], out)?, arg))
}

/// `x: [N,D]`, `w: [D,O]`, `b: [O]` -> `x w + b`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, o) = dense_dims(x, w, b)?;
    let mut out = vec![T::zero(); n * o];
    for row in out.chunks_mut(o) {
        row.copy_from_slice(b.data());
    }
    gemm(
        T::one(),
        x.data(),
        MatView::dense(n, d),
        w.data(),
        MatView::dense(d, o),
        T::one(),
        &mut out,
        MatView::dense(n, o),
    );
    Tensor::from_vec(vec![n, o], out)
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d) = match *x.shape() {
        [n, d] => (n, d),
        _ => return Err(TensorError::shape("dense", "input [N,D]", x.shape())),
    };
    let o = match *w.shape() {
        [wd, o] if wd == d => o,
        _ => return Err(TensorError::shape("dense", format!("weight [{d},O]"), w.shape())),
    };
    if b.shape() != [o] {
        return Err(TensorError::shape("dense", format!("bias [{o}]"), b.shape()));
    }
    Ok((n, d, o))
}

pub struct DenseGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[1];
    let mut dx = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); d * o];
    gemm(
        T::one(),
        dy.data(),
        MatView::dense(n, o),
        w.data(),
        MatView::dense(d, o).t(),
        T::zero(),
        &mut dx,
        MatView::dense(n, d),
    );
    gemm(
        T::one(),
        x.data(),
        MatView::dense(n, d).t(),
        dy.data(),
        MatView::dense(n, o),
        T::zero(),
        &mut dw,
        MatView::dense(d, o),
    );
    let mut db = vec![T::zero(); o];
    for row in dy.data().chunks(o) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(DenseGrads {
        dx: Tensor::from_vec(vec![n, d], dx)?,
        dw: Tensor::from_vec(vec![d, o], dw)?,
        db: Tensor::from_vec(vec![o], db)?,
    })
}

/// (outer, axis length, inner) strides of `shape` around `axis`.
pub(crate) fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split("softmax", x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| xd[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..len {
                let e = (xd[idx(k)] - mx).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..len {
                out[idx(k)] /= s;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split("softmax_backward", y.shape(), axis)?;
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx)
}

/// Clamp applied to probabilities before the logarithm in the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean over the batch of `-sum_i y_i ln(clamp(p_i))`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    check_ce(probs, targets)?;
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let (lo, hi) = (T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP));
    let mut total = T::zero();
    for (p, y) in probs.data().chunks(k).zip(targets.data().chunks(k)) {
        for (&pi, &yi) in p.iter().zip(y) {
            if yi != T::zero() {
                total -= yi * pi.max(lo).min(hi).ln();
            }
        }
    }
    Ok(total / T::from_usize(n.max(1)).unwrap())
}

fn check_ce<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if probs.ndim() != 2 {
        return Err(TensorError::shape("cross_entropy", "probs [N,K]", probs.shape()));
    }
    if targets.shape() != probs.shape() {
        return Err(TensorError::shape(
            "cross_entropy",
            format!("targets {:?}", probs.shape()),
            targets.shape(),
        ));
    }
    let k = probs.shape()[1];
    let tol = T::lit(1e-5);
    for row in probs.data().chunks(k.max(1)) {
        let s: T = row.iter().copied().sum();
        if (s - T::one()).abs() > tol {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("probability row sums to {s:?}, expected 1"),
            ));
        }
    }
    Ok(())
}

pub fn cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>, dl: T) -> Tensor<T> {
    let n = T::from_usize(probs.shape()[0].max(1)).unwrap();
    let (lo, hi) = (T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP));
    let data = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| {
            if y == T::zero() || p < lo || p > hi {
                T::zero()
            } else {
                -dl * y / (p * n)
            }
        })
        .collect();
    Tensor::from_vec(probs.shape().to_vec(), data).expect("shape preserved")
}

/// Gradient of the batch-mean log-softmax cross-entropy with respect to the
/// logits: `dl * (p - y) / N`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>, dl: T) -> Tensor<T> {
    let n = T::from_usize(probs.shape()[0].max(1)).unwrap();
    let data = probs.data().iter().zip(targets.data()).map(|(&p, &y)| dl * (p - y) / n).collect();
    Tensor::from_vec(probs.shape().to_vec(), data).expect("shape preserved")
}
