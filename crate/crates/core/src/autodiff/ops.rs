//! Differentiable layers recorded onto a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, MatRef, Scalar, Tensor};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fully connected

struct FcBackward;

impl<T: Scalar> Backward<T> for FcBackward {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, i) = (x.dim(0), x.dim(1));
        let o = w.dim(1);
        let g = MatRef::new(grad.data(), b, o);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); b * i];
            matmul_into(g, MatRef::new(w.data(), i, o).t(), T::zero(), &mut dx);
            Tensor::from_vec_unchecked(vec![b, i], dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); i * o];
            matmul_into(MatRef::new(x.data(), b, i).t(), g, T::zero(), &mut dw);
            Tensor::from_vec_unchecked(vec![i, o], dw)
        });
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); o];
            for row in grad.data().chunks_exact(o) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            Tensor::from_vec_unchecked(vec![o], db)
        });
        vec![dx, dw, db]
    }
}

/// `y = x W + b` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
pub fn fc_affine<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xv, wv, bv) = (tape.value(x), tape.value(weight), tape.value(bias));
    expect_rank("fc_affine", xv, 2)?;
    expect_rank("fc_affine", wv, 2)?;
    if xv.dim(1) != wv.dim(0) || bv.shape() != [wv.dim(1)] {
        return Err(Error::Dimension {
            op: "fc_affine",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    let (b, i, o) = (xv.dim(0), xv.dim(1), wv.dim(1));
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bv.data());
    }
    matmul_into(MatRef::new(xv.data(), b, i), MatRef::new(wv.data(), i, o), T::one(), &mut out);
    Ok(tape.push(Tensor::from_vec_unchecked(vec![b, o], out), &[x, weight, bias], FcBackward))
}

// ---------------------------------------------------------------------------
// relu

struct ReluBackward;

impl<T: Scalar> Backward<T> for ReluBackward {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(Tensor::from_vec_unchecked(grad.shape().to_vec(), data))]
    }
}

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
    tape.push(out, &[x], ReluBackward)
}

// ---------------------------------------------------------------------------
// dropout

struct MaskBackward<T> {
    mask: Vec<T>,
}

impl<T: Scalar> Backward<T> for MaskBackward<T> {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let data = grad.data().iter().zip(&self.mask).map(|(&g, &m)| g * m).collect();
        vec![Some(Tensor::from_vec_unchecked(grad.shape().to_vec(), data))]
    }
}

/// Inverted dropout: in training each element is zeroed with probability
/// `ratio` and survivors are scaled by `1 / (1 - ratio)`. Evaluation mode and
/// `ratio == 0` return `x` itself.
pub fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    ratio: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("dropout ratio must lie in [0, 1), got {ratio}")));
    }
    if mode == Mode::Eval || ratio == 0.0 {
        return Ok(x);
    }
    let keep_scale = T::of(1.0 / (1.0 - ratio));
    let xv = tape.value(x);
    let mask: Vec<T> = (0..xv.len())
        .map(|_| if rng.random::<f64>() < ratio { T::zero() } else { keep_scale })
        .collect();
    Ok(apply_mask(tape, x, mask))
}

/// Multiplies `x` elementwise by a fixed mask (the deterministic half of
/// dropout, also used to check its gradient).
pub fn apply_mask<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: Vec<T>) -> Var {
    let xv = tape.value(x);
    assert_eq!(mask.len(), xv.len(), "mask size");
    let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    let out = Tensor::from_vec_unchecked(xv.shape().to_vec(), data);
    tape.push(out, &[x], MaskBackward { mask })
}

// ---------------------------------------------------------------------------
// conv2d

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "{op}: extent {size} with window {k}, stride {stride}, pad {pad} gives a non-integral output"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Writes the patches of one sample into columns `offset..offset + oh * ow`
/// of a column matrix with row stride `stride_row`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T], stride_row: usize, offset: usize) {
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * stride_row + offset..row * stride_row + offset + g.col_cols()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid outputs are ox in [lo, hi)
                        let lo = g.pad.saturating_sub(kj).min(g.ow);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow).max(lo);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        let s0 = lo + kj - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T], stride_row: usize, offset: usize) {
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * stride_row + offset..row * stride_row + offset + g.col_cols()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kj).min(g.ow);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow).max(lo);
                        let s0 = base + lo + kj - g.pad;
                        for (d, &v) in dx[s0..s0 + hi - lo].iter_mut().zip(&src[oy * g.ow + lo..oy * g.ow + hi]) {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvBackward {
    geom: ConvGeom,
}

impl<T: Scalar> Backward<T> for ConvBackward {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        let (x, k) = (inputs[0], inputs[1]);
        let batch = x.dim(0);
        let kout = k.dim(0);
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let in_size = g.c * g.h * g.w;
        let out_size = kout * cols;
        let kmat = MatRef::new(k.data(), kout, rows);

        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dk = needs[1].then(|| vec![T::zero(); k.len()]);
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..batch {
            let gb = MatRef::new(&grad.data()[b * out_size..(b + 1) * out_size], kout, cols);
            if let Some(dk) = dk.as_mut() {
                im2col(&x.data()[b * in_size..(b + 1) * in_size], g, &mut col, cols, 0);
                matmul_into(gb, MatRef::new(&col, rows, cols).t(), T::one(), dk);
            }
            if let Some(dx) = dx.as_mut() {
                matmul_into(kmat.t(), gb, T::zero(), &mut col);
                col2im(&col, g, &mut dx[b * in_size..(b + 1) * in_size], cols, 0);
            }
        }
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); kout];
            for plane in grad.data().chunks_exact(out_size) {
                for (acc, r) in db.iter_mut().zip(plane.chunks_exact(cols)) {
                    *acc = *acc + r.iter().copied().sum::<T>();
                }
            }
            Tensor::from_vec_unchecked(vec![kout], db)
        });
        let dx = dx.map(|d| Tensor::from_vec_unchecked(x.shape().to_vec(), d));
        let dk = dk.map(|d| Tensor::from_vec_unchecked(k.shape().to_vec(), d));
        vec![dx, dk, db]
    }
}

/// Cross-correlation of `x: [B, C, H, W]` with `kernel: [K, C, kh, kw]`.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Var,
    bias: Var,
    spec: Conv2dSpec,
) -> Result<Var> {
    let (xv, kv, bv) = (tape.value(x), tape.value(kernel), tape.value(bias));
    expect_rank("conv2d", xv, 4)?;
    expect_rank("conv2d", kv, 4)?;
    if xv.dim(1) != kv.dim(1) || bv.shape() != [kv.dim(0)] {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: xv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        });
    }
    let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
    let (kout, kh, kw) = (kv.dim(0), kv.dim(2), kv.dim(3));
    let geom = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        oh: conv_out_extent("conv2d", h, kh, spec.stride, spec.pad)?,
        ow: conv_out_extent("conv2d", w, kw, spec.stride, spec.pad)?,
        stride: spec.stride,
        pad: spec.pad,
    };
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_size = c * h * w;
    let out_size = kout * cols;
    let mut out = vec![T::zero(); batch * out_size];
    let mut col = vec![T::zero(); rows * cols];
    let kmat = MatRef::new(kv.data(), kout, rows);
    for b in 0..batch {
        im2col(&xv.data()[b * in_size..(b + 1) * in_size], &geom, &mut col, cols, 0);
        let ob = &mut out[b * out_size..(b + 1) * out_size];
        for (ko, plane) in ob.chunks_exact_mut(cols).enumerate() {
            plane.fill(bv.data()[ko]);
        }
        matmul_into(kmat, MatRef::new(&col, rows, cols), T::one(), ob);
    }
    let out = Tensor::from_vec_unchecked(vec![batch, kout, geom.oh, geom.ow], out);
    Ok(tape.push(out, &[x, kernel, bias], ConvBackward { geom }))
}

// ---------------------------------------------------------------------------
// max pooling

struct RouteBackward {
    /// Flat input index that produced each output element.
    argmax: Vec<u32>,
}

impl<T: Scalar> Backward<T> for RouteBackward {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src as usize] = d[src as usize] + g;
        }
        vec![Some(dx)]
    }
}

/// Max over `window x window` patches of `x: [B, C, H, W]`. Ties resolve to
/// the first position in row-major scan order, and the gradient is routed
/// only to that position.
pub fn maxpool2d<T: Scalar>(tape: &mut Tape<T>, x: Var, window: usize, stride: usize) -> Result<Var> {
    let xv = tape.value(x);
    expect_rank("maxpool2d", xv, 4)?;
    let (batch, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
    let oh = conv_out_extent("maxpool2d", h, window, stride, 0)?;
    let ow = conv_out_extent("maxpool2d", w, window, stride, 0)?;
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut argmax = Vec::with_capacity(batch * c * oh * ow);
    let data = xv.data();
    for plane in 0..batch * c {
        let base = plane * h * w;
        if window == 2 && stride == 2 {
            for oy in 0..oh {
                let r0 = base + 2 * oy * w;
                let (top, bottom) = (&data[r0..r0 + w], &data[r0 + w..r0 + 2 * w]);
                for ox in 0..ow {
                    let cand = [(top[2 * ox], 0), (top[2 * ox + 1], 1), (bottom[2 * ox], w), (bottom[2 * ox + 1], w + 1)];
                    let mut best = cand[0];
                    for &cv in &cand[1..] {
                        if cv.0 > best.0 {
                            best = cv;
                        }
                    }
                    out.push(best.0);
                    argmax.push((r0 + 2 * ox + best.1) as u32);
                }
            }
            continue;
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best as u32);
            }
        }
    }
    let out = Tensor::from_vec_unchecked(vec![batch, c, oh, ow], out);
    Ok(tape.push(out, &[x], RouteBackward { argmax }))
}

// ---------------------------------------------------------------------------
// losses

struct SoftmaxCeBackward<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxCeBackward<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let batch = self.labels.len();
        let scale = grad.item() / T::of(batch as f64);
        let mut d = self.probs.clone();
        for (row, &label) in self.labels.iter().enumerate() {
            let r = &mut d[row * self.classes..(row + 1) * self.classes];
            r[label] = r[label] - T::one();
            for v in r.iter_mut() {
                *v = *v * scale;
            }
        }
        vec![Some(Tensor::from_vec_unchecked(inputs[0].shape().to_vec(), d))]
    }
}

/// Row-wise softmax of `[B, C]` logits.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<T> {
    let classes = logits.dim(1);
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        probs.extend(exps.into_iter().map(|e| e / total));
    }
    probs
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lv = tape.value(logits);
    expect_rank("softmax_cross_entropy", lv, 2)?;
    let (batch, classes) = (lv.dim(0), lv.dim(1));
    if labels.len() != batch {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            lhs: lv.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Label { label, classes, row });
    }
    let mut loss = 0.0;
    for (row, &label) in lv.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
    }
    loss /= batch as f64;
    let probs = softmax_rows(lv);
    let out = Tensor::scalar(T::of(loss));
    Ok(tape.push(out, &[logits], SoftmaxCeBackward { probs, labels: labels.to_vec(), classes }))
}

struct L2Backward;

impl<T: Scalar> Backward<T> for L2Backward {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (pred, gt) = (inputs[0], inputs[1]);
        let scale = grad.item() * T::of(2.0 / pred.dim(0) as f64);
        let diff: Vec<T> = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p - g) * scale).collect();
        let dgt = needs[1].then(|| {
            Tensor::from_vec_unchecked(gt.shape().to_vec(), diff.iter().map(|&d| -d).collect())
        });
        vec![Some(Tensor::from_vec_unchecked(pred.shape().to_vec(), diff)), dgt]
    }
}

/// Keypoint regression loss on `[B, 2N]` coordinate rows: per sample the sum
/// over keypoints of the squared Euclidean distance, averaged over the batch.
pub fn l2_keypoint_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let (pv, gv) = (tape.value(pred), tape.value(gt));
    if pv.shape() != gv.shape() || pv.rank() != 2 {
        return Err(Error::Dimension {
            op: "l2_keypoint_loss",
            lhs: pv.shape().to_vec(),
            rhs: gv.shape().to_vec(),
        });
    }
    let total: f64 = pv
        .data()
        .iter()
        .zip(gv.data())
        .map(|(&p, &g)| (p.as_f64() - g.as_f64()).powi(2))
        .sum();
    let out = Tensor::scalar(T::of(total / pv.dim(0) as f64));
    Ok(tape.push(out, &[pred, gt], L2Backward))
}

// ---------------------------------------------------------------------------
// structural helpers

struct ReshapeBackward;

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::from_vec_unchecked(inputs[0].shape().to_vec(), grad.data().to_vec()))]
    }
}

/// Collapses all trailing axes: `[B, ...] -> [B, prod(...)]`.
pub fn flatten<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let batch = xv.dim(0);
    let rest = xv.len() / batch;
    let out = Tensor::from_vec_unchecked(vec![batch, rest], xv.data().to_vec());
    tape.push(out, &[x], ReshapeBackward)
}

struct WeightedSumBackward {
    weights: Vec<f64>,
}

impl<T: Scalar> Backward<T> for WeightedSumBackward {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        self.weights.iter().map(|&w| Some(Tensor::scalar(g * T::of(w)))).collect()
    }
}

/// `sum_i w_i * term_i` over one-element terms.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total = 0.0;
    for &(v, w) in terms {
        let value = tape.value(v);
        if value.len() != 1 {
            return Err(Error::Shape(format!("weighted_sum term has shape {:?}", value.shape())));
        }
        total += w * value.item().as_f64();
    }
    let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
    let weights = terms.iter().map(|t| t.1).collect();
    Ok(tape.push(Tensor::scalar(T::of(total)), &vars, WeightedSumBackward { weights }))
}

struct DotBackward<T> {
    weights: Vec<T>,
}

impl<T: Scalar> Backward<T> for DotBackward<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        let data = self.weights.iter().map(|&w| w * g).collect();
        vec![Some(Tensor::from_vec_unchecked(inputs[0].shape().to_vec(), data))]
    }
}

/// `sum(x * weights)` with constant weights; reduces any tensor to a scalar.
pub fn dot_const<T: Scalar>(tape: &mut Tape<T>, x: Var, weights: Vec<T>) -> Var {
    let xv = tape.value(x);
    assert_eq!(xv.len(), weights.len(), "dot_const size");
    let total: T = xv.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
    tape.push(Tensor::scalar(total), &[x], DotBackward { weights })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn fc_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = fc_affine(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w0 = tape.constant(t(&[2, 2], &[0.0; 4]));
        let b1 = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = fc_affine(&mut tape, x, w0, b1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn fc_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let msg = fc_affine(&mut tape, x, w, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn relu_values_and_grads() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = relu(&mut tape, x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let neg = tape.input(t(&[4], &[-1.0, -0.5, -2.0, -3.0]));
        let y = relu(&mut tape, neg);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let loss = dot_const(&mut tape, y, vec![1.0; 4]);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(neg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.input(t(&[4], &[1.0, -2.0, 3.0, 4.0]));
        let y = dropout(&mut tape, x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_keep_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let n = 100_000;
        let x = tape.input(Tensor::<f32>::full(&[n], 1.0));
        let y = dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "surviving fraction {frac}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn conv_unit_kernel_and_box_sum() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let x = tape.constant(t(&[1, 1, 5, 5], &img));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = conv2d(&mut tape, x, k, b, Conv2dSpec { stride: 1, pad: 0 }).unwrap();
        assert_eq!(tape.value(y).data(), &img[..]);

        let ones = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let k3 = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = conv2d(&mut tape, ones, k3, b, Conv2dSpec { stride: 1, pad: 0 }).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(conv2d(&mut tape, x, k, b, Conv2dSpec { stride: 2, pad: 0 }).is_err());
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = maxpool2d(&mut tape, x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::full(&[1, 1, 2, 2], 7.0));
        let y = maxpool2d(&mut tape, x, 2, 2).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::<f64>::zeros(&[2, 4]));
        let loss = softmax_cross_entropy(&mut tape, logits, &[0, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let sat = tape.input(t(&[1, 3], &[0.0, 1e6, 0.0]));
        let loss = softmax_cross_entropy(&mut tape, sat, &[1]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        let err = softmax_cross_entropy(&mut tape, sat, &[3]).unwrap_err();
        assert!(matches!(err, Error::Label { label: 3, classes: 3, row: 0 }));
    }

    #[test]
    fn keypoint_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.input(t(&[1, 4], &[0.1, 0.2, 0.5, 0.5]));
        let loss = l2_keypoint_loss(&mut tape, p, p).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let gt = tape.constant(t(&[1, 2], &[0.2, 0.1]));
        let pred = tape.input(t(&[1, 2], &[0.5, 0.5]));
        let loss = l2_keypoint_loss(&mut tape, pred, gt).unwrap();
        assert!((tape.value(loss).item() - 0.25).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(pred).unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

        let short = tape.constant(t(&[1, 4], &[0.0; 4]));
        assert!(l2_keypoint_loss(&mut tape, pred, short).is_err());
    }

    #[test]
    fn backward_reaches_every_param() {
        use crate::autodiff::param::ParamStore;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let w = store.add_xavier("w", &[3, 2], 3, 2, 1.0, &mut rng);
        let b = store.add_zeros("b", &[2], 1.0);
        let unused = store.add_zeros("unused", &[5], 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 3], 0.5));
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let y = fc_affine(&mut tape, x, wv, bv).unwrap();
        let loss = dot_const(&mut tape, y, vec![1.0; 8]);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.get(b).grad.data(), &[4.0, 4.0]);
        for p in store.iter() {
            assert_eq!(p.grad.shape(), p.value.shape());
        }
        assert!(store.get(unused).grad.data().iter().all(|&v| v == 0.0));
    }
}
