//! Layer vocabulary of the reference network.
//!
//! Spatial activations use height × width × channel order. Convolutions have
//! valid padding; pooling windows are square with stride equal to the window.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

fn one() -> usize {
    1
}

impl LayerKind {
    fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                ..
            } => Some((
                vec![kernel_h, kernel_w, in_channels, out_channels],
                out_channels,
            )),
            LayerKind::Dense { inputs, outputs } => Some((vec![inputs, outputs], outputs)),
            _ => None,
        }
    }

    /// Whether activations after this layer are exposed by default.
    pub fn is_default_probe(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Dense { .. }
        )
    }
}

/// Accumulated parameter gradients of one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        self.weights
            .iter_mut()
            .zip(&other.weights)
            .for_each(|(a, b)| *a += b);
        self.bias.iter_mut().zip(&other.bias).for_each(|(a, b)| *a += b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Conv: `[kh, kw, in, out]`; dense: `[inputs, outputs]`; row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(kind: LayerKind, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        match kind.param_shapes() {
            Some((w_shape, b_len)) => {
                let w_len: usize = w_shape.iter().product();
                ensure!(
                    w_len > 0 && weights.len() == w_len && bias.len() == b_len,
                    Error::Shape(format!(
                        "{kind:?} expects {w_len} weights and {b_len} biases, got {} and {}",
                        weights.len(),
                        bias.len()
                    ))
                );
            }
            None => ensure!(
                weights.is_empty() && bias.is_empty(),
                Error::Shape(format!("{kind:?} has no parameters"))
            ),
        }
        if let LayerKind::Conv2d { stride, .. } = kind {
            ensure!(stride >= 1, Error::Shape("conv stride must be ≥ 1".into()));
        }
        if let LayerKind::MaxPool { size } = kind {
            ensure!(size >= 1, Error::Shape("pool size must be ≥ 1".into()));
        }
        ensure!(
            weights.iter().chain(&bias).all(|v| v.is_finite()),
            Error::NonFinite(format!("{kind:?} parameters"))
        );
        Ok(Self {
            kind,
            weights,
            bias,
        })
    }

    pub fn dense(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        Self::new(LayerKind::Dense { inputs, outputs }, weights, bias)
    }

    pub fn conv2d(
        kernel: (usize, usize),
        channels: (usize, usize),
        stride: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        Self::new(
            LayerKind::Conv2d {
                kernel_h: kernel.0,
                kernel_w: kernel.1,
                in_channels: channels.0,
                out_channels: channels.1,
                stride,
            },
            weights,
            bias,
        )
    }

    pub fn relu() -> Self {
        Self::parameterless(LayerKind::Relu)
    }

    pub fn max_pool(size: usize) -> Self {
        Self::parameterless(LayerKind::MaxPool { size })
    }

    pub fn flatten() -> Self {
        Self::parameterless(LayerKind::Flatten)
    }

    pub fn softmax() -> Self {
        Self::parameterless(LayerKind::Softmax)
    }

    fn parameterless(kind: LayerKind) -> Self {
        Self {
            kind,
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    /// He-normal weights and zero biases for parametric kinds.
    pub fn init<R: Rng + ?Sized>(kind: LayerKind, rng: &mut R) -> Result<Self> {
        let Some((w_shape, b_len)) = kind.param_shapes() else {
            return Self::new(kind, Vec::new(), Vec::new());
        };
        let fan_in: usize = w_shape[..w_shape.len() - 1].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = w_shape.iter().product();
        let weights = (0..n).map(|_| normal.sample(rng)).collect();
        Self::new(kind, weights, vec![0.0; b_len])
    }

    pub fn has_params(&self) -> bool {
        !self.weights.is_empty()
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        self.kind.param_shapes().map(|(w, _)| w)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| {
            Err(Error::Shape(format!(
                "{:?} cannot take input of shape {input:?}: {what}",
                self.kind
            )))
        };
        match self.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                if input.len() != 3 {
                    return mismatch("expected height × width × channels");
                }
                if input[2] != in_channels {
                    return mismatch("channel count differs");
                }
                if input[0] < kernel_h || input[1] < kernel_w {
                    return mismatch("kernel larger than input");
                }
                Ok(vec![
                    (input[0] - kernel_h) / stride + 1,
                    (input[1] - kernel_w) / stride + 1,
                    out_channels,
                ])
            }
            LayerKind::MaxPool { size } => {
                if input.len() != 3 {
                    return mismatch("expected height × width × channels");
                }
                if input[0] < size || input[1] < size {
                    return mismatch("pool window larger than input");
                }
                Ok(vec![input[0] / size, input[1] / size, input[2]])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return mismatch("expected a flat vector");
                }
                Ok(vec![outputs])
            }
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return mismatch("expected a flat vector");
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
        }
    }

    pub fn forward(&self, input: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
        match self.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                let (w_in, (oh, ow)) = (in_shape[1], (out_shape[0], out_shape[1]));
                let mut out = vec![0.0; oh * ow * out_channels];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = &mut out[(oy * ow + ox) * out_channels..][..out_channels];
                        o.copy_from_slice(&self.bias);
                        for ky in 0..kernel_h {
                            for kx in 0..kernel_w {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                let px = &input[(iy * w_in + ix) * in_channels..][..in_channels];
                                for (ci, &v) in px.iter().enumerate() {
                                    let w = &self.weights
                                        [((ky * kernel_w + kx) * in_channels + ci) * out_channels..]
                                        [..out_channels];
                                    for (acc, wv) in o.iter_mut().zip(w) {
                                        *acc += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
            LayerKind::MaxPool { size } => {
                let (w_in, c) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let (idx, _) = pool_argmax(input, w_in, c, size, oy, ox, ch);
                            out[(oy * ow + ox) * c + ch] = input[idx];
                        }
                    }
                }
                out
            }
            LayerKind::Dense { inputs, outputs } => {
                let mut out = self.bias.clone();
                for (&v, w) in input[..inputs].iter().zip(self.weights.chunks_exact(outputs)) {
                    if v == 0.0 {
                        continue;
                    }
                    for (acc, wv) in out.iter_mut().zip(w) {
                        *acc += v * wv;
                    }
                }
                out
            }
            LayerKind::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::Flatten => input.to_vec(),
            LayerKind::Softmax => softmax(input),
        }
    }

    /// Propagates `grad_out` (∂loss/∂output) back to ∂loss/∂input,
    /// accumulating parameter gradients into `grads` when given.
    pub fn backward(
        &self,
        input: &[f64],
        in_shape: &[usize],
        output: &[f64],
        out_shape: &[usize],
        grad_out: &[f64],
        grads: Option<&mut ParamGrad>,
    ) -> Vec<f64> {
        match self.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                let w_in = in_shape[1];
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let mut grad_in = vec![0.0; input.len()];
                let mut grads = grads;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = &grad_out[(oy * ow + ox) * out_channels..][..out_channels];
                        if let Some(pg) = grads.as_deref_mut() {
                            pg.bias.iter_mut().zip(g).for_each(|(b, gv)| *b += gv);
                        }
                        for ky in 0..kernel_h {
                            for kx in 0..kernel_w {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                let base = (iy * w_in + ix) * in_channels;
                                for ci in 0..in_channels {
                                    let woff =
                                        ((ky * kernel_w + kx) * in_channels + ci) * out_channels;
                                    let w = &self.weights[woff..woff + out_channels];
                                    grad_in[base + ci] +=
                                        w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                                    if let Some(pg) = grads.as_deref_mut() {
                                        let v = input[base + ci];
                                        pg.weights[woff..woff + out_channels]
                                            .iter_mut()
                                            .zip(g)
                                            .for_each(|(wg, gv)| *wg += v * gv);
                                    }
                                }
                            }
                        }
                    }
                }
                grad_in
            }
            LayerKind::MaxPool { size } => {
                let (w_in, c) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let mut grad_in = vec![0.0; input.len()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let (idx, _) = pool_argmax(input, w_in, c, size, oy, ox, ch);
                            grad_in[idx] += grad_out[(oy * ow + ox) * c + ch];
                        }
                    }
                }
                grad_in
            }
            LayerKind::Dense { inputs, outputs } => {
                if let Some(pg) = grads {
                    for (&v, wg) in input[..inputs].iter().zip(pg.weights.chunks_exact_mut(outputs)) {
                        wg.iter_mut()
                            .zip(grad_out)
                            .for_each(|(wg, g)| *wg += v * g);
                    }
                    pg.bias.iter_mut().zip(grad_out).for_each(|(b, g)| *b += g);
                }
                (0..inputs)
                    .map(|i| {
                        self.weights[i * outputs..(i + 1) * outputs]
                            .iter()
                            .zip(grad_out)
                            .map(|(w, g)| w * g)
                            .sum()
                    })
                    .collect()
            }
            LayerKind::Relu => input
                .iter()
                .zip(grad_out)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            LayerKind::Flatten => grad_out.to_vec(),
            LayerKind::Softmax => {
                let dot: f64 = output.iter().zip(grad_out).map(|(p, g)| p * g).sum();
                output
                    .iter()
                    .zip(grad_out)
                    .map(|(p, g)| p * (g - dot))
                    .collect()
            }
        }
    }
}

/// Flat input index and value of the maximum in one pooling window; the
/// first maximum in row-major window order wins ties.
fn pool_argmax(
    input: &[f64],
    w_in: usize,
    c: usize,
    size: usize,
    oy: usize,
    ox: usize,
    ch: usize,
) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for dy in 0..size {
        for dx in 0..size {
            let idx = ((oy * size + dy) * w_in + ox * size + dx) * c + ch;
            if best.0 == usize::MAX || input[idx] > best.1 {
                best = (idx, input[idx]);
            }
        }
    }
    best
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
