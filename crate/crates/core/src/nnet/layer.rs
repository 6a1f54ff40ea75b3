//! Layer library: convolution, max pooling, ReLU, fully connected, dropout,
//! max-pooling dropout, and softmax, each with forward and backward passes.
//!
//! Activations are batched row-major tensors shaped [batch, ...]; conv and
//! pooling layers expect [batch, channels, height, width].

use super::tensor::{gemm, Scalar, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Layer kind plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Fc {
        units: usize,
    },
    Dropout {
        p: f64,
    },
    MaxPoolDropout {
        window: usize,
        stride: usize,
        p: f64,
    },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::MaxPoolDropout { .. } => "maxpool_dropout",
            LayerKind::Softmax => "softmax",
        }
    }
}

/// A layer kind together with whether its parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn trainable(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            trainable: true,
        }
    }

    pub fn frozen(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            trainable: false,
        }
    }
}

/// A layer instance; weight and bias are present for conv and fc only.
/// Conv weights are [filters, in_channels, kh, kw]; fc weights are
/// [units, in_dim]; biases are [filters] and [units].
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Scalar> {
    pub spec: LayerSpec,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Per-layer state captured during a training-mode forward pass, consumed
/// by the matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T: Scalar> {
    /// Layer ran in inference mode (frozen prefix); not differentiable.
    Skip,
    Conv {
        input_shape: Vec<usize>,
        /// Unrolled input patches, [batch] x [c*kh*kw, oh*ow] concatenated.
        cols: Vec<T>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        /// Flat input index of each window maximum.
        argmax: Vec<u32>,
    },
    Relu {
        /// True where the output (equivalently the input) was positive.
        positive: Vec<bool>,
    },
    Fc {
        input_shape: Vec<usize>,
        /// Input flattened to [batch, in_dim].
        input: Vec<T>,
    },
    Dropout {
        kept: Vec<bool>,
    },
    MaxPoolDropout {
        input_shape: Vec<usize>,
        /// Flat input index of the retained maximum, or u32::MAX if the
        /// whole window was dropped.
        chosen: Vec<u32>,
    },
    Softmax {
        probs: Tensor<T>,
    },
}

/// Per-layer parameter gradients, aligned with the layer list.
pub type Gradients<T> = Vec<Option<(Tensor<T>, Tensor<T>)>>;

fn shape_err(idx: usize, kind: &LayerKind, detail: String) -> Error {
    Error::ShapeMismatch(format!("layer {idx} ({}): {detail}", kind.name()))
}

/// Per-sample output shape of a layer given its per-sample input shape.
/// Validates the hyperparameters against the incoming geometry.
pub fn infer_shape(idx: usize, spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    match spec.kind {
        LayerKind::Conv {
            filters,
            kernel: (kh, kw),
            stride,
            pad,
        } => {
            if filters == 0 || kh == 0 || kw == 0 || stride == 0 {
                return Err(Error::InvalidParameter(format!(
                    "layer {idx}: conv needs nonzero filters, kernel and stride"
                )));
            }
            let [c, h, w] = conv_input_dims(idx, &spec.kind, input)?;
            let _ = c;
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            if ph < kh || pw < kw {
                return Err(shape_err(
                    idx,
                    &spec.kind,
                    format!("kernel {kh}x{kw} exceeds padded input {ph}x{pw}"),
                ));
            }
            Ok(vec![filters, (ph - kh) / stride + 1, (pw - kw) / stride + 1])
        }
        LayerKind::MaxPool { window, stride } | LayerKind::MaxPoolDropout { window, stride, .. } => {
            if window == 0 || stride == 0 {
                return Err(Error::InvalidParameter(format!(
                    "layer {idx}: pooling needs nonzero window and stride"
                )));
            }
            if let LayerKind::MaxPoolDropout { p, .. } = spec.kind {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::InvalidParameter(format!(
                        "layer {idx}: dropout probability {p} outside [0, 1)"
                    )));
                }
            }
            let [c, h, w] = conv_input_dims(idx, &spec.kind, input)?;
            if h < window || w < window {
                return Err(shape_err(
                    idx,
                    &spec.kind,
                    format!("window {window} exceeds input {h}x{w}"),
                ));
            }
            Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Fc { units } => {
            if units == 0 {
                return Err(Error::InvalidParameter(format!(
                    "layer {idx}: fc needs at least one unit"
                )));
            }
            Ok(vec![units])
        }
        LayerKind::Dropout { p } => {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "layer {idx}: dropout probability {p} outside [0, 1)"
                )));
            }
            Ok(input.to_vec())
        }
        LayerKind::Softmax => Ok(input.to_vec()),
    }
}

fn conv_input_dims(idx: usize, kind: &LayerKind, input: &[usize]) -> Result<[usize; 3]> {
    match input {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(shape_err(
            idx,
            kind,
            format!("expected [channels, height, width] input, got {other:?}"),
        )),
    }
}

impl<T: Scalar> Layer<T> {
    /// Build a layer for the given per-sample input shape, initializing
    /// parameters He-uniform from the rng. Returns the layer and its
    /// per-sample output shape.
    pub fn build(
        idx: usize,
        spec: LayerSpec,
        input: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, Vec<usize>)> {
        let out = infer_shape(idx, &spec, input)?;
        let (weight, bias) = match spec.kind {
            LayerKind::Conv {
                filters,
                kernel: (kh, kw),
                ..
            } => {
                let c = input[0];
                let fan_in = c * kh * kw;
                let w = he_uniform(&[filters, c, kh, kw], fan_in, rng);
                (Some(w), Some(Tensor::zeros(&[filters])))
            }
            LayerKind::Fc { units } => {
                let fan_in: usize = input.iter().product();
                let w = he_uniform(&[units, fan_in], fan_in, rng);
                (Some(w), Some(Tensor::zeros(&[units])))
            }
            _ => (None, None),
        };
        Ok((Layer { spec, weight, bias }, out))
    }

    /// Forward in inference mode: dropout layers pass through, max-pooling
    /// dropout acts as plain max pooling.
    pub fn forward_infer(&self, idx: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.spec.kind {
            LayerKind::Conv { stride, pad, .. } => {
                self.conv_forward(idx, x, stride, pad, false).map(|(y, _)| y)
            }
            LayerKind::MaxPool { window, stride }
            | LayerKind::MaxPoolDropout { window, stride, .. } => {
                maxpool_forward(idx, x, window, stride).map(|(y, _)| y)
            }
            LayerKind::Relu => Ok(relu_forward(x).0),
            LayerKind::Fc { .. } => self.fc_forward(idx, x).map(|(y, _)| y),
            LayerKind::Dropout { .. } => Ok(x.clone()),
            LayerKind::Softmax => softmax_forward(x),
        }
    }

    /// Forward in training mode, capturing the cache backward needs.
    pub fn forward_train(
        &self,
        idx: usize,
        x: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        match self.spec.kind {
            LayerKind::Conv { stride, pad, .. } => {
                let (y, cols) = self.conv_forward(idx, x, stride, pad, true)?;
                Ok((
                    y,
                    Cache::Conv {
                        input_shape: x.shape.clone(),
                        cols: cols.expect("conv cache requested"),
                    },
                ))
            }
            LayerKind::MaxPool { window, stride } => {
                let (y, argmax) = maxpool_forward(idx, x, window, stride)?;
                Ok((
                    y,
                    Cache::MaxPool {
                        input_shape: x.shape.clone(),
                        argmax,
                    },
                ))
            }
            LayerKind::Relu => {
                let (y, positive) = relu_forward(x);
                Ok((y, Cache::Relu { positive }))
            }
            LayerKind::Fc { .. } => {
                let (y, flat) = self.fc_forward(idx, x)?;
                Ok((
                    y,
                    Cache::Fc {
                        input_shape: x.shape.clone(),
                        input: flat,
                    },
                ))
            }
            LayerKind::Dropout { p } => {
                let keep = 1.0 - p;
                let kept: Vec<bool> = (0..x.numel()).map(|_| rng.gen_bool(keep)).collect();
                let scale = T::from_f64(1.0 / keep);
                let mut y = x.clone();
                for (v, &k) in y.data.iter_mut().zip(&kept) {
                    *v = if k { *v * scale } else { T::ZERO };
                }
                Ok((y, Cache::Dropout { kept }))
            }
            LayerKind::MaxPoolDropout { window, stride, p } => {
                let (y, chosen) = maxpool_dropout_forward(idx, x, window, stride, p, rng)?;
                Ok((
                    y,
                    Cache::MaxPoolDropout {
                        input_shape: x.shape.clone(),
                        chosen,
                    },
                ))
            }
            LayerKind::Softmax => {
                let y = softmax_forward(x)?;
                Ok((
                    y.clone(),
                    Cache::Softmax { probs: y },
                ))
            }
        }
    }

    /// Backward pass: given the gradient of the loss with respect to this
    /// layer's output, return the gradient with respect to its input and,
    /// for parameterized layers, (dweight, dbias). `need_dx` skips the
    /// input-gradient computation at the backward boundary.
    pub fn backward(
        &self,
        idx: usize,
        cache: &Cache<T>,
        d_out: &Tensor<T>,
        need_dx: bool,
    ) -> Result<(Option<Tensor<T>>, Option<(Tensor<T>, Tensor<T>)>)> {
        let stale = || Error::State(format!("layer {idx}: backward without a forward cache"));
        match (&self.spec.kind, cache) {
            (LayerKind::Conv { stride, pad, .. }, Cache::Conv { input_shape, cols }) => {
                self.conv_backward(d_out, input_shape, cols, *stride, *pad, need_dx)
            }
            (LayerKind::MaxPool { .. }, Cache::MaxPool { input_shape, argmax }) => {
                let dx = scatter_pool_grad(d_out, input_shape, argmax, need_dx);
                Ok((dx, None))
            }
            (LayerKind::Relu, Cache::Relu { positive }) => {
                if !need_dx {
                    return Ok((None, None));
                }
                let mut dx = d_out.clone();
                for (g, &pos) in dx.data.iter_mut().zip(positive) {
                    if !pos {
                        *g = T::ZERO;
                    }
                }
                Ok((Some(dx), None))
            }
            (LayerKind::Fc { .. }, Cache::Fc { input_shape, input }) => {
                self.fc_backward(d_out, input_shape, input, need_dx)
            }
            (LayerKind::Dropout { p }, Cache::Dropout { kept }) => {
                if !need_dx {
                    return Ok((None, None));
                }
                let scale = T::from_f64(1.0 / (1.0 - p));
                let mut dx = d_out.clone();
                for (g, &k) in dx.data.iter_mut().zip(kept) {
                    *g = if k { *g * scale } else { T::ZERO };
                }
                Ok((Some(dx), None))
            }
            (LayerKind::MaxPoolDropout { .. }, Cache::MaxPoolDropout { input_shape, chosen }) => {
                let dx = scatter_pool_grad(d_out, input_shape, chosen, need_dx);
                Ok((dx, None))
            }
            (LayerKind::Softmax, Cache::Softmax { probs }) => {
                if !need_dx {
                    return Ok((None, None));
                }
                Ok((Some(softmax_backward(probs, d_out)), None))
            }
            _ => Err(stale()),
        }
    }

    fn conv_forward(
        &self,
        idx: usize,
        x: &Tensor<T>,
        stride: usize,
        pad: usize,
        want_cache: bool,
    ) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let w = self.weight.as_ref().expect("conv weight");
        let b = self.bias.as_ref().expect("conv bias");
        let [f, c, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
        let (n, xc, h, xw) = batch_chw(idx, &self.spec.kind, x)?;
        if xc != c {
            return Err(shape_err(
                idx,
                &self.spec.kind,
                format!("input has {xc} channels, weights expect {c}"),
            ));
        }
        let out_shape = infer_shape(idx, &self.spec, &[c, h, xw])?;
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let (ckk, ohow) = (c * kh * kw, oh * ow);

        let mut y = Tensor::zeros(&[n, f, oh, ow]);
        let mut cache = if want_cache {
            Some(vec![T::ZERO; n * ckk * ohow])
        } else {
            None
        };
        let mut scratch = vec![T::ZERO; ckk * ohow];
        for img in 0..n {
            let col: &mut [T] = match cache.as_mut() {
                Some(all) => &mut all[img * ckk * ohow..(img + 1) * ckk * ohow],
                None => &mut scratch,
            };
            im2col(
                &x.data[img * c * h * xw..(img + 1) * c * h * xw],
                c,
                h,
                xw,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                col,
            );
            let out = &mut y.data[img * f * ohow..(img + 1) * f * ohow];
            gemm(false, false, f, ckk, ohow, 1.0, &w.data, col, 0.0, out);
            for fi in 0..f {
                let bv = b.data[fi];
                for v in &mut out[fi * ohow..(fi + 1) * ohow] {
                    *v += bv;
                }
            }
        }
        Ok((y, cache))
    }

    fn conv_backward(
        &self,
        d_out: &Tensor<T>,
        input_shape: &[usize],
        cols: &[T],
        stride: usize,
        pad: usize,
        need_dx: bool,
    ) -> Result<(Option<Tensor<T>>, Option<(Tensor<T>, Tensor<T>)>)> {
        let w = self.weight.as_ref().expect("conv weight");
        let [f, c, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
        let (n, oh, ow) = (d_out.shape[0], d_out.shape[2], d_out.shape[3]);
        let (h, xw) = (input_shape[2], input_shape[3]);
        let (ckk, ohow) = (c * kh * kw, oh * ow);

        let mut dw = Tensor::zeros(&w.shape);
        let mut db = Tensor::zeros(&[f]);
        let mut dx = need_dx.then(|| Tensor::zeros(input_shape));
        let mut dcol = vec![T::ZERO; ckk * ohow];
        for img in 0..n {
            let dy = &d_out.data[img * f * ohow..(img + 1) * f * ohow];
            let col = &cols[img * ckk * ohow..(img + 1) * ckk * ohow];
            // dW += dY * colᵀ, accumulated across the batch.
            gemm(false, true, f, ohow, ckk, 1.0, dy, col, 1.0, &mut dw.data);
            for fi in 0..f {
                let mut acc = T::ZERO;
                for &g in &dy[fi * ohow..(fi + 1) * ohow] {
                    acc += g;
                }
                db.data[fi] += acc;
            }
            if let Some(dx) = dx.as_mut() {
                gemm(true, false, ckk, f, ohow, 1.0, &w.data, dy, 0.0, &mut dcol);
                col2im(
                    &dcol,
                    c,
                    h,
                    xw,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut dx.data[img * c * h * xw..(img + 1) * c * h * xw],
                );
            }
        }
        Ok((dx, Some((dw, db))))
    }

    fn fc_forward(&self, idx: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let w = self.weight.as_ref().expect("fc weight");
        let b = self.bias.as_ref().expect("fc bias");
        let (u, d) = (w.shape[0], w.shape[1]);
        let n = x.batch();
        if x.per_sample() != d {
            return Err(shape_err(
                idx,
                &self.spec.kind,
                format!("input has {} features per sample, weights expect {d}", x.per_sample()),
            ));
        }
        let mut y = Tensor::zeros(&[n, u]);
        gemm(false, true, n, d, u, 1.0, &x.data, &w.data, 0.0, &mut y.data);
        for row in 0..n {
            for (v, &bv) in y.data[row * u..(row + 1) * u].iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        Ok((y, x.data.clone()))
    }

    fn fc_backward(
        &self,
        d_out: &Tensor<T>,
        input_shape: &[usize],
        input: &[T],
        need_dx: bool,
    ) -> Result<(Option<Tensor<T>>, Option<(Tensor<T>, Tensor<T>)>)> {
        let w = self.weight.as_ref().expect("fc weight");
        let (u, d) = (w.shape[0], w.shape[1]);
        let n = d_out.shape[0];

        let mut dw = Tensor::zeros(&[u, d]);
        gemm(true, false, u, n, d, 1.0, &d_out.data, input, 0.0, &mut dw.data);
        let mut db = Tensor::zeros(&[u]);
        for row in 0..n {
            for (acc, &g) in db.data.iter_mut().zip(&d_out.data[row * u..(row + 1) * u]) {
                *acc += g;
            }
        }
        let dx = if need_dx {
            let mut dx = Tensor::zeros(&[n, d]);
            gemm(false, false, n, u, d, 1.0, &d_out.data, &w.data, 0.0, &mut dx.data);
            Some(dx.reshape(input_shape)?)
        } else {
            None
        };
        Ok((dx, Some((dw, db))))
    }
}

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn batch_chw<T: Scalar>(
    idx: usize,
    kind: &LayerKind,
    x: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    match x.shape.as_slice() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(shape_err(
            idx,
            kind,
            format!("expected [batch, channels, height, width], got {other:?}"),
        )),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let ohow = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * ohow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        col[row + oy * ow + ox] =
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                x[(ch * h + iy as usize) * w + ix as usize]
                            } else {
                                T::ZERO
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ohow = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * ohow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            dx[(ch * h + iy as usize) * w + ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn maxpool_forward<T: Scalar>(
    idx: usize,
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let kind = LayerKind::MaxPool { window, stride };
    let (n, c, h, w) = batch_chw(idx, &kind, x)?;
    let out_shape = infer_shape(idx, &LayerSpec::frozen(kind), &[c, h, w])?;
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    let mut best = plane + y0 * w + x0;
                    let mut best_v = x.data[best];
                    for wy in 0..window {
                        for wx in 0..window {
                            let i = plane + (y0 + wy) * w + (x0 + wx);
                            if x.data[i] > best_v {
                                best_v = x.data[i];
                                best = i;
                            }
                        }
                    }
                    y.data[oi] = best_v;
                    argmax[oi] = best as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Max-pooling dropout: each activation in a pooling window is retained
/// with probability 1 - p before the max is taken; a fully dropped window
/// outputs zero. Retention draws happen in raster order within each
/// window, windows in output raster order, so a seeded rng pins the masks.
fn maxpool_dropout_forward<T: Scalar>(
    idx: usize,
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let kind = LayerKind::MaxPoolDropout { window, stride, p };
    let (n, c, h, w) = batch_chw(idx, &kind, x)?;
    let out_shape = infer_shape(idx, &LayerSpec::frozen(kind), &[c, h, w])?;
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let keep = 1.0 - p;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut chosen = vec![u32::MAX; n * c * oh * ow];
    let mut window_vals = vec![T::ZERO; window * window];
    let mut window_idx = vec![0usize; window * window];
    let mut keep_flags = vec![false; window * window];
    let mut oi = 0;
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    let mut m = 0;
                    for wy in 0..window {
                        for wx in 0..window {
                            let i = plane + (y0 + wy) * w + (x0 + wx);
                            window_vals[m] = x.data[i];
                            window_idx[m] = i;
                            keep_flags[m] = p == 0.0 || rng.gen_bool(keep);
                            m += 1;
                        }
                    }
                    if let Some(local) = masked_window_argmax(&window_vals, &keep_flags) {
                        y.data[oi] = window_vals[local];
                        chosen[oi] = window_idx[local] as u32;
                    }
                    oi += 1;
                }
            }
        }
    }
    Ok((y, chosen))
}

/// Index of the maximum among retained window entries, or None when every
/// entry was dropped (the all-dropped window outputs zero).
pub fn masked_window_argmax<T: Scalar>(values: &[T], kept: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &k)) in values.iter().zip(kept).enumerate() {
        if !k {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

fn scatter_pool_grad<T: Scalar>(
    d_out: &Tensor<T>,
    input_shape: &[usize],
    targets: &[u32],
    need_dx: bool,
) -> Option<Tensor<T>> {
    if !need_dx {
        return None;
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&t, &g) in targets.iter().zip(&d_out.data) {
        if t != u32::MAX {
            dx.data[t as usize] += g;
        }
    }
    Some(dx)
}

fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mut y = x.clone();
    let mut positive = vec![false; y.numel()];
    for (v, pos) in y.data.iter_mut().zip(&mut positive) {
        if *v > T::ZERO {
            *pos = true;
        } else {
            *v = T::ZERO;
        }
    }
    (y, positive)
}

/// Row-wise softmax over the flattened per-sample dimension, computed with
/// the max-subtraction trick so any finite input maps to a probability
/// vector.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.batch();
    let k = x.per_sample();
    if k == 0 {
        return Err(Error::ShapeMismatch("softmax on an empty tensor".into()));
    }
    let mut y = x.clone();
    for row in 0..n {
        let r = &mut y.data[row * k..(row + 1) * k];
        let mut m = r[0];
        for &v in r.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::ZERO;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
    Ok(y)
}

/// Softmax Jacobian-vector product: dx_i = y_i (dy_i - sum_j dy_j y_j),
/// applied per row.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let n = probs.batch();
    let k = probs.per_sample();
    let mut dx = Tensor::zeros(&probs.shape);
    for row in 0..n {
        let y = &probs.data[row * k..(row + 1) * k];
        let dy = &d_out.data[row * k..(row + 1) * k];
        let mut dot = T::ZERO;
        for (&yi, &di) in y.iter().zip(dy) {
            dot += yi * di;
        }
        for ((out, &yi), &di) in dx.data[row * k..(row + 1) * k].iter_mut().zip(y).zip(dy) {
            *out = yi * (di - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn layer(kind: LayerKind, input: &[usize], seed: u64) -> Layer<f64> {
        Layer::build(0, LayerSpec::trainable(kind), input, &mut rng(seed))
            .unwrap()
            .0
    }

    /// Direct nested-loop correlation, the conv forward oracle.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c, h, xw) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (f, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (xw + 2 * pad - kw) / stride + 1;
        let mut y = Tensor::zeros(&[n, f, oh, ow]);
        for img in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data[fi];
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < xw as isize {
                                        acc += x.data
                                            [((img * c + ch) * h + iy as usize) * xw + ix as usize]
                                            * w.data[((fi * c + ch) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        y.data[((img * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::from_data(
            shape,
            (0..shape.iter().product())
                .map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_conv_is_identity() {
        let mut l = layer(
            LayerKind::Conv {
                filters: 1,
                kernel: (1, 1),
                stride: 1,
                pad: 0,
            },
            &[1, 4, 4],
            0,
        );
        l.weight.as_mut().unwrap().data[0] = 1.0;
        l.bias.as_mut().unwrap().data[0] = 0.0;
        let x = random_tensor(&[2, 1, 4, 4], 1);
        let y = l.forward_infer(0, &x).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        for (seed, stride, pad) in [(2u64, 1usize, 0usize), (3, 1, 1), (4, 2, 0), (5, 2, 1)] {
            let l = layer(
                LayerKind::Conv {
                    filters: 3,
                    kernel: (3, 3),
                    stride,
                    pad,
                },
                &[2, 5, 6],
                seed,
            );
            let x = random_tensor(&[2, 2, 5, 6], seed + 100);
            let y = l.forward_infer(0, &x).unwrap();
            let want = conv_oracle(&x, l.weight.as_ref().unwrap(), l.bias.as_ref().unwrap(), stride, pad);
            assert_eq!(y.shape, want.shape);
            for (a, b) in y.data.iter().zip(&want.data) {
                let rel = (a - b).abs() / (a.abs() + b.abs()).max(1e-9);
                assert!(rel < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let l = layer(LayerKind::Relu, &[3], 0);
        let x = Tensor::from_data(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = l.forward_infer(0, &x).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        let l = layer(LayerKind::MaxPool { window: 2, stride: 2 }, &[1, 4, 4], 0);
        let x = Tensor::from_data(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 6.0, //
                3.0, 4.0, 7.0, 8.0, //
                9.0, 10.0, 13.0, 14.0, //
                11.0, 12.0, 15.0, 16.0,
            ],
        )
        .unwrap();
        let y = l.forward_infer(0, &x).unwrap();
        assert_eq!(y.shape, vec![1, 1, 2, 2]);
        assert_eq!(y.data, vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let x = random_tensor(&[4, 6], 9);
        let y = softmax_forward(&x).unwrap();
        for row in 0..4 {
            let r = &y.data[row * 6..(row + 1) * 6];
            let sum: f64 = r.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
        // Extreme but finite logits still normalize.
        let hard = Tensor::from_data(&[1, 3], vec![1e4, -1e4, 0.0]).unwrap();
        let yh = softmax_forward(&hard).unwrap();
        let sum: f64 = yh.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_zero_p_keeps_everything() {
        let l = layer(LayerKind::Dropout { p: 0.0 }, &[8], 0);
        let x = random_tensor(&[2, 8], 10);
        let (y, _) = l.forward_train(0, &x, &mut rng(0)).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn dropout_scales_survivors() {
        let l = layer(LayerKind::Dropout { p: 0.5 }, &[1000], 0);
        let x = Tensor::from_data(&[1, 1000], vec![1.0; 1000]).unwrap();
        let (y, cache) = l.forward_train(0, &x, &mut rng(42)).unwrap();
        let Cache::Dropout { kept } = cache else {
            panic!("wrong cache")
        };
        for (v, k) in y.data.iter().zip(&kept) {
            assert_eq!(*v, if *k { 2.0 } else { 0.0 });
        }
        // Inference mode is the identity.
        assert_eq!(l.forward_infer(0, &x).unwrap().data, x.data);
    }

    #[test]
    fn maxpool_dropout_p_zero_equals_maxpool() {
        let mp = layer(LayerKind::MaxPool { window: 2, stride: 2 }, &[2, 6, 6], 0);
        let mpd = layer(
            LayerKind::MaxPoolDropout {
                window: 2,
                stride: 2,
                p: 0.0,
            },
            &[2, 6, 6],
            0,
        );
        let x = random_tensor(&[3, 2, 6, 6], 11);
        let a = mp.forward_infer(0, &x).unwrap();
        let (b, _) = mpd.forward_train(0, &x, &mut rng(5)).unwrap();
        assert_eq!(a.data, b.data);
        // Inference mode of maxpool_dropout is plain maxpool too.
        assert_eq!(mpd.forward_infer(0, &x).unwrap().data, a.data);
    }

    #[test]
    fn masked_window_argmax_hand_cases() {
        // Window {4, 2, 1, 3} with mask {keep, drop, keep, keep}: the
        // retained values are {4, 1, 3}, so the max is 4 at index 0.
        let vals = [4.0f64, 2.0, 1.0, 3.0];
        let idx = masked_window_argmax(&vals, &[true, false, true, true]).unwrap();
        assert_eq!(vals[idx], 4.0);
        // Dropping the maximum exposes the runner-up.
        let idx = masked_window_argmax(&vals, &[false, true, true, true]).unwrap();
        assert_eq!(vals[idx], 3.0);
        // All dropped: no survivor, output will be zero.
        assert_eq!(masked_window_argmax(&vals, &[false; 4]), None);
    }

    #[test]
    fn maxpool_dropout_all_dropped_outputs_zero() {
        let l = layer(
            LayerKind::MaxPoolDropout {
                window: 2,
                stride: 2,
                p: 0.999,
            },
            &[1, 2, 2],
            0,
        );
        let x = Tensor::from_data(&[1, 1, 2, 2], vec![5.0, 3.0, 2.0, 1.0]).unwrap();
        // With p = 0.999 a fixed rng drops every element almost surely;
        // scan a few streams to find one that drops all four, then check
        // the zero-output convention.
        let mut found = false;
        for seed in 0..20 {
            let (y, cache) = l.forward_train(0, &x, &mut rng(seed)).unwrap();
            let Cache::MaxPoolDropout { chosen, .. } = cache else {
                panic!("wrong cache")
            };
            if chosen[0] == u32::MAX {
                assert_eq!(y.data[0], 0.0);
                found = true;
                break;
            }
        }
        assert!(found, "no all-dropped window in 20 streams at p=0.999");
    }

    #[test]
    fn build_rejects_bad_hyperparameters() {
        let mut r = rng(0);
        let bad = [
            LayerKind::Dropout { p: 1.0 },
            LayerKind::MaxPoolDropout {
                window: 2,
                stride: 2,
                p: -0.1,
            },
            LayerKind::Conv {
                filters: 0,
                kernel: (3, 3),
                stride: 1,
                pad: 0,
            },
            LayerKind::MaxPool { window: 9, stride: 1 },
        ];
        for kind in bad {
            assert!(
                Layer::<f32>::build(0, LayerSpec::trainable(kind), &[1, 4, 4], &mut r).is_err(),
                "{kind:?} should fail"
            );
        }
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let l = layer(
            LayerKind::Conv {
                filters: 2,
                kernel: (3, 3),
                stride: 1,
                pad: 0,
            },
            &[2, 5, 5],
            0,
        );
        let wrong = random_tensor(&[1, 3, 5, 5], 0);
        let err = l.forward_infer(7, &wrong).unwrap_err().to_string();
        assert!(err.contains("layer 7"), "{err}");
        assert!(err.contains("conv"), "{err}");
    }
}
