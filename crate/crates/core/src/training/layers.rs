//! Layer kernels: forward pass and hand-written backward pass.
//!
//! Activations are flat row-major `Tensor`s. A layer's backward pass receives
//! its own input and output from the forward pass and the gradient of the loss
//! w.r.t. its output; it accumulates parameter gradients and, when asked,
//! returns the gradient w.r.t. its input.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// `[C, T] -> [F, C, T-K+1]`, one kernel of length K per filter shared
    /// across channels. Weight `[F, K]`, bias `[F]`.
    TemporalConv {
        filters: usize,
        kernel: usize,
    },
    /// `[F, C, T] -> [S, T]`, mixes all filters and channels.
    /// Weight `[S, F, C]`, bias `[S]`.
    SpatialConv {
        outputs: usize,
        filters: usize,
        channels: usize,
    },
    Square,
    /// Averages windows along the last axis.
    MeanPool {
        window: usize,
        stride: usize,
    },
    /// `ln(max(x, floor))`.
    SafeLog {
        floor: f64,
    },
    Flatten,
    Dropout {
        p: f64,
    },
    /// `[I] -> [O]`. Weight `[O, I]`, bias `[O]`.
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Tanh,
    Relu,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::TemporalConv { .. } => "temporal_conv",
            Layer::SpatialConv { .. } => "spatial_conv",
            Layer::Square => "square",
            Layer::MeanPool { .. } => "mean_pool",
            Layer::SafeLog { .. } => "log",
            Layer::Flatten => "flatten",
            Layer::Dropout { .. } => "dropout",
            Layer::Linear { .. } => "linear",
            Layer::Tanh => "tanh",
            Layer::Relu => "relu",
        }
    }

    /// Weight and bias shapes, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::TemporalConv { filters, kernel } => Some((vec![filters, kernel], vec![filters])),
            Layer::SpatialConv {
                outputs,
                filters,
                channels,
            } => Some((vec![outputs, filters, channels], vec![outputs])),
            Layer::Linear { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    /// Xavier fan-in and fan-out of the weight.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::TemporalConv { filters, kernel } => Some((kernel, filters * kernel)),
            Layer::SpatialConv {
                outputs,
                filters,
                channels,
            } => Some((filters * channels, outputs * channels)),
            Layer::Linear { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: String| Error::ShapeMismatch {
            expected,
            got: format!("{input:?}"),
        };
        match *self {
            Layer::TemporalConv { filters, kernel } => match *input {
                [c, t] if t >= kernel => Ok(vec![filters, c, t - kernel + 1]),
                _ => Err(mismatch(format!("[channels, samples >= {kernel}]"))),
            },
            Layer::SpatialConv {
                outputs,
                filters,
                channels,
            } => match *input {
                [f, c, t] if f == filters && c == channels => Ok(vec![outputs, t]),
                _ => Err(mismatch(format!("[{filters}, {channels}, samples]"))),
            },
            Layer::MeanPool { window, stride } => match input.split_last() {
                Some((&t, lead)) if t >= window && stride > 0 => {
                    let mut s = lead.to_vec();
                    s.push((t - window) / stride + 1);
                    Ok(s)
                }
                _ => Err(mismatch(format!("last axis >= {window}"))),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear { inputs, outputs } => {
                if input.iter().product::<usize>() == inputs && input.len() == 1 {
                    Ok(vec![outputs])
                } else {
                    Err(mismatch(format!("[{inputs}]")))
                }
            }
            Layer::Square | Layer::SafeLog { .. } | Layer::Dropout { .. } | Layer::Tanh | Layer::Relu => {
                Ok(input.to_vec())
            }
        }
    }

    /// Forward pass. `mask` is the dropout mask (already scaled by `1/(1-p)`),
    /// `None` meaning dropout is inactive.
    pub fn forward(&self, x: &Tensor, params: Option<(&Tensor, &Tensor)>, mask: Option<&[f64]>) -> Result<Tensor> {
        let shape = self.output_shape(x.shape())?;
        let xd = x.data();
        let data = match *self {
            Layer::TemporalConv { filters, kernel } => {
                let (w, b) = params.expect("temporal conv has parameters");
                let (c, t) = (x.shape()[0], x.shape()[1]);
                let tout = t - kernel + 1;
                let mut out = vec![0.0; filters * c * tout];
                for f in 0..filters {
                    let wf = &w.data()[f * kernel..(f + 1) * kernel];
                    for ch in 0..c {
                        let dst = &mut out[(f * c + ch) * tout..(f * c + ch + 1) * tout];
                        dst.fill(b.data()[f]);
                        let row = &xd[ch * t..(ch + 1) * t];
                        for (k, &wk) in wf.iter().enumerate() {
                            axpy(wk, &row[k..k + tout], dst);
                        }
                    }
                }
                out
            }
            Layer::SpatialConv {
                outputs,
                filters,
                channels,
            } => {
                let (w, b) = params.expect("spatial conv has parameters");
                let t = x.shape()[2];
                let mut out = vec![0.0; outputs * t];
                for s in 0..outputs {
                    let dst = &mut out[s * t..(s + 1) * t];
                    dst.fill(b.data()[s]);
                    for fc in 0..filters * channels {
                        axpy(w.data()[s * filters * channels + fc], &xd[fc * t..(fc + 1) * t], dst);
                    }
                }
                out
            }
            Layer::Square => xd.iter().map(|v| v * v).collect(),
            Layer::MeanPool { window, stride } => {
                let t = *x.shape().last().expect("pool input has an axis");
                let tout = shape[shape.len() - 1];
                let scale = 1.0 / window as f64;
                let mut out = Vec::with_capacity(xd.len() / t * tout);
                for row in xd.chunks_exact(t) {
                    for j in 0..tout {
                        out.push(row[j * stride..j * stride + window].iter().sum::<f64>() * scale);
                    }
                }
                out
            }
            Layer::SafeLog { floor } => xd.iter().map(|&v| v.max(floor).ln()).collect(),
            Layer::Flatten => xd.to_vec(),
            Layer::Dropout { .. } => match mask {
                Some(m) => xd.iter().zip(m).map(|(v, m)| v * m).collect(),
                None => xd.to_vec(),
            },
            Layer::Linear { inputs, outputs } => {
                let (w, b) = params.expect("linear has parameters");
                (0..outputs)
                    .map(|o| b.data()[o] + dot(&w.data()[o * inputs..(o + 1) * inputs], xd))
                    .collect()
            }
            Layer::Tanh => xd.iter().map(|v| v.tanh()).collect(),
            Layer::Relu => xd.iter().map(|v| v.max(0.0)).collect(),
        };
        Ok(Tensor::from_parts(shape, data))
    }

    /// Backward pass. Adds parameter gradients into `grads` (weight, bias)
    /// and returns the input gradient when `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        gy: &[f64],
        params: Option<(&Tensor, &Tensor)>,
        mask: Option<&[f64]>,
        grads: Option<(&mut [f64], &mut [f64])>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let xd = x.data();
        match *self {
            Layer::TemporalConv { filters, kernel } => {
                let (w, _) = params.expect("temporal conv has parameters");
                let (c, t) = (x.shape()[0], x.shape()[1]);
                let tout = t - kernel + 1;
                if let Some((gw, gb)) = grads {
                    for f in 0..filters {
                        for ch in 0..c {
                            let g = &gy[(f * c + ch) * tout..(f * c + ch + 1) * tout];
                            gb[f] += g.iter().sum::<f64>();
                            let row = &xd[ch * t..(ch + 1) * t];
                            for k in 0..kernel {
                                gw[f * kernel + k] += dot(g, &row[k..k + tout]);
                            }
                        }
                    }
                }
                need_input.then(|| {
                    let mut gx = vec![0.0; c * t];
                    for f in 0..filters {
                        for ch in 0..c {
                            let g = &gy[(f * c + ch) * tout..(f * c + ch + 1) * tout];
                            let dst = &mut gx[ch * t..(ch + 1) * t];
                            for k in 0..kernel {
                                axpy(w.data()[f * kernel + k], g, &mut dst[k..k + tout]);
                            }
                        }
                    }
                    gx
                })
            }
            Layer::SpatialConv {
                outputs,
                filters,
                channels,
            } => {
                let (w, _) = params.expect("spatial conv has parameters");
                let t = x.shape()[2];
                let fc_n = filters * channels;
                if let Some((gw, gb)) = grads {
                    for s in 0..outputs {
                        let g = &gy[s * t..(s + 1) * t];
                        gb[s] += g.iter().sum::<f64>();
                        for fc in 0..fc_n {
                            gw[s * fc_n + fc] += dot(g, &xd[fc * t..(fc + 1) * t]);
                        }
                    }
                }
                need_input.then(|| {
                    let mut gx = vec![0.0; fc_n * t];
                    for fc in 0..fc_n {
                        let dst = &mut gx[fc * t..(fc + 1) * t];
                        for s in 0..outputs {
                            axpy(w.data()[s * fc_n + fc], &gy[s * t..(s + 1) * t], dst);
                        }
                    }
                    gx
                })
            }
            Layer::Square => need_input.then(|| xd.iter().zip(gy).map(|(x, g)| 2.0 * x * g).collect()),
            Layer::MeanPool { window, stride } => need_input.then(|| {
                let t = *x.shape().last().expect("pool input has an axis");
                let tout = *y.shape().last().expect("pool output has an axis");
                let scale = 1.0 / window as f64;
                let mut gx = vec![0.0; xd.len()];
                for (dst, g) in gx.chunks_exact_mut(t).zip(gy.chunks_exact(tout)) {
                    for (j, &gj) in g.iter().enumerate() {
                        dst[j * stride..j * stride + window]
                            .iter_mut()
                            .for_each(|d| *d += gj * scale);
                    }
                }
                gx
            }),
            Layer::SafeLog { floor } => need_input.then(|| {
                xd.iter()
                    .zip(gy)
                    .map(|(&x, &g)| if x > floor { g / x } else { 0.0 })
                    .collect()
            }),
            Layer::Flatten => need_input.then(|| gy.to_vec()),
            Layer::Dropout { .. } => need_input.then(|| match mask {
                Some(m) => gy.iter().zip(m).map(|(g, m)| g * m).collect(),
                None => gy.to_vec(),
            }),
            Layer::Linear { inputs, outputs } => {
                let (w, _) = params.expect("linear has parameters");
                if let Some((gw, gb)) = grads {
                    for o in 0..outputs {
                        gb[o] += gy[o];
                        axpy(gy[o], xd, &mut gw[o * inputs..(o + 1) * inputs]);
                    }
                }
                need_input.then(|| {
                    let mut gx = vec![0.0; inputs];
                    for o in 0..outputs {
                        axpy(gy[o], &w.data()[o * inputs..(o + 1) * inputs], &mut gx);
                    }
                    gx
                })
            }
            Layer::Tanh => need_input.then(|| y.data().iter().zip(gy).map(|(y, g)| (1.0 - y * y) * g).collect()),
            Layer::Relu => need_input.then(|| {
                xd.iter()
                    .zip(gy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            }),
        }
    }
}

/// `dst += a * x`.
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], dst: &mut [f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Dot product with four fixed accumulation lanes, so the summation order
/// (and the result) does not depend on the platform.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}
