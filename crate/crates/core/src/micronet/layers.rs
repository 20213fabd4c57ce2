use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{col2im, conv_backward, conv_forward, gemm, im2col, ConvGeometry, Layout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of a [`Network`](super::Network).
///
/// Convolutions use "same" padding (`kernel / 2`) and require an odd kernel.
/// A residual block's inner layers must preserve the shape of their input.
/// A dense block's unit `l` applies ReLU then a convolution to the channel
/// concatenation of the block input and the `l` previous unit outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        units: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    ResidualBlock {
        inner: Vec<LayerSpec>,
    },
    DenseBlock {
        in_channels: usize,
        growth: usize,
        layers: usize,
        kernel: usize,
    },
    Dropout {
        rate: f64,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::DenseBlock { .. } => "dense_block",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Parameter tensor shapes in storage order (weights before biases).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, units } => vec![vec![*inputs, *units], vec![*units]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![kernel * kernel * in_channels, *out_channels], vec![*out_channels]],
            LayerSpec::ResidualBlock { inner } => inner.iter().flat_map(LayerSpec::param_shapes).collect(),
            LayerSpec::DenseBlock {
                in_channels,
                growth,
                layers,
                kernel,
            } => (0..*layers)
                .flat_map(|l| {
                    let c = in_channels + l * growth;
                    [vec![kernel * kernel * c, *growth], vec![*growth]]
                })
                .collect(),
            LayerSpec::Dropout { .. } | LayerSpec::Relu | LayerSpec::Flatten => Vec::new(),
        }
    }

    pub fn param_tensors(&self) -> usize {
        match self {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => 2,
            LayerSpec::ResidualBlock { inner } => inner.iter().map(LayerSpec::param_tensors).sum(),
            LayerSpec::DenseBlock { layers, .. } => 2 * layers,
            _ => 0,
        }
    }

    /// Output shape for an input of shape `input`; `layer` names the layer
    /// in error messages.
    pub fn output_shape(&self, input: &[usize], layer: &str) -> Result<Vec<usize>> {
        let err = |detail: String| Err(Error::shape(layer, detail));
        match self {
            LayerSpec::Dense { inputs, units } => {
                if input.len() != 1 || input[0] != *inputs {
                    return err(format!("expects [{inputs}], got {input:?}"));
                }
                if *units == 0 {
                    return err("zero units".into());
                }
                Ok(vec![*units])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let [h, w, c] = input[..] else {
                    return err(format!("expects H×W×{in_channels}, got {input:?}"));
                };
                if c != *in_channels {
                    return err(format!("expects {in_channels} channels, got {c}"));
                }
                if kernel % 2 == 0 || *stride == 0 || *out_channels == 0 {
                    return err(format!(
                        "kernel {kernel} must be odd, stride {stride} and channels {out_channels} positive"
                    ));
                }
                let g = ConvGeometry {
                    h,
                    w,
                    c,
                    kernel: *kernel,
                    stride: *stride,
                };
                let (oh, ow) = g.out_hw();
                Ok(vec![oh, ow, *out_channels])
            }
            LayerSpec::ResidualBlock { inner } => {
                let mut shape = input.to_vec();
                for (i, spec) in inner.iter().enumerate() {
                    shape = spec.output_shape(&shape, &format!("{layer}.{i} ({})", spec.name()))?;
                }
                if shape != input {
                    return err(format!("residual branch maps {input:?} to {shape:?}"));
                }
                Ok(shape)
            }
            LayerSpec::DenseBlock {
                in_channels,
                growth,
                layers,
                kernel,
            } => {
                let [h, w, c] = input[..] else {
                    return err(format!("expects H×W×{in_channels}, got {input:?}"));
                };
                if c != *in_channels {
                    return err(format!("expects {in_channels} channels, got {c}"));
                }
                if kernel % 2 == 0 || (*layers > 0 && *growth == 0) {
                    return err("kernel must be odd and growth positive".into());
                }
                Ok(vec![h, w, in_channels + layers * growth])
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Per-forward state: dropout randomness and optional instrumentation.
pub(crate) struct Pass<'r> {
    pub rng: Option<&'r mut ChaCha8Rng>,
    /// Collected ReLU activation patterns, when requested.
    pub relu_pattern: Option<Vec<bool>>,
    /// Inputs seen by each dense-block unit (before its ReLU), when requested.
    pub unit_inputs: Option<Vec<Tensor>>,
}

impl Pass<'_> {
    pub fn eval() -> Self {
        Pass {
            rng: None,
            relu_pattern: None,
            unit_inputs: None,
        }
    }
}

pub(crate) enum Cache {
    Dense {
        input: Vec<f64>,
    },
    Conv {
        cols: Vec<f64>,
        geometry: ConvGeometry,
    },
    Residual {
        inner: Vec<Cache>,
    },
    DenseBlock {
        units: Vec<DenseUnitCache>,
        h: usize,
        w: usize,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
    Relu {
        active: Vec<bool>,
    },
    Flatten {
        shape: Vec<usize>,
    },
}

pub(crate) struct DenseUnitCache {
    active: Vec<bool>,
    cols: Vec<f64>,
    geometry: ConvGeometry,
}

fn check_finite(t: &Tensor, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: layer.to_string(),
        })
    }
}

fn relu_in_place(data: &mut [f64]) -> Vec<bool> {
    data.iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

/// Concatenates two H×W maps along the channel axis.
fn concat_channels(a: &[f64], ca: usize, b: &[f64], cb: usize, pixels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels * (ca + cb));
    for p in 0..pixels {
        out.extend_from_slice(&a[p * ca..(p + 1) * ca]);
        out.extend_from_slice(&b[p * cb..(p + 1) * cb]);
    }
    out
}

pub(crate) fn forward_layer(
    spec: &LayerSpec,
    params: &[Tensor],
    x: Tensor,
    pass: &mut Pass<'_>,
    layer: &str,
) -> Result<(Tensor, Cache)> {
    let out_shape = spec.output_shape(x.shape(), layer)?;
    let (y, cache) = match spec {
        LayerSpec::Dense { units, .. } => {
            let (w, b) = (&params[0], &params[1]);
            let mut out = b.data().to_vec();
            let input = x.into_data();
            gemm(
                1,
                input.len(),
                *units,
                &input,
                Layout::row_major(input.len()),
                w.data(),
                Layout::row_major(*units),
                1.0,
                &mut out,
            );
            (Tensor::new(out_shape, out)?, Cache::Dense { input })
        }
        LayerSpec::Conv2d { kernel, stride, .. } => {
            let (h, w, c) = x.hwc()?;
            let geometry = ConvGeometry {
                h,
                w,
                c,
                kernel: *kernel,
                stride: *stride,
            };
            let cols = im2col(x.data(), geometry);
            let (oh, ow) = geometry.out_hw();
            let out = conv_forward(&cols, oh * ow, params[0].data(), params[1].data());
            (Tensor::new(out_shape, out)?, Cache::Conv { cols, geometry })
        }
        LayerSpec::ResidualBlock { inner } => {
            let mut h = x.clone();
            let mut caches = Vec::with_capacity(inner.len());
            let mut offset = 0;
            for (i, sub) in inner.iter().enumerate() {
                let n = sub.param_tensors();
                let name = format!("{layer}.{i} ({})", sub.name());
                let (next, cache) = forward_layer(sub, &params[offset..offset + n], h, pass, &name)?;
                offset += n;
                h = next;
                caches.push(cache);
            }
            if h.shape() != x.shape() {
                return Err(Error::shape(
                    layer,
                    format!("residual branch changed shape {:?} to {:?}", x.shape(), h.shape()),
                ));
            }
            (h.add(&x)?, Cache::Residual { inner: caches })
        }
        LayerSpec::DenseBlock {
            in_channels,
            growth,
            layers,
            kernel,
        } => {
            let (h, w, _) = x.hwc()?;
            let pixels = h * w;
            let mut features = x.into_data();
            let mut channels = *in_channels;
            let mut units = Vec::with_capacity(*layers);
            for l in 0..*layers {
                if let Some(seen) = pass.unit_inputs.as_mut() {
                    seen.push(Tensor::new(vec![h, w, channels], features.clone())?);
                }
                let mut activated = features.clone();
                let active = relu_in_place(&mut activated);
                if let Some(pattern) = pass.relu_pattern.as_mut() {
                    pattern.extend_from_slice(&active);
                }
                let geometry = ConvGeometry {
                    h,
                    w,
                    c: channels,
                    kernel: *kernel,
                    stride: 1,
                };
                let cols = im2col(&activated, geometry);
                let new = conv_forward(&cols, pixels, params[2 * l].data(), params[2 * l + 1].data());
                features = concat_channels(&features, channels, &new, *growth, pixels);
                channels += growth;
                units.push(DenseUnitCache { active, cols, geometry });
            }
            (Tensor::new(out_shape, features)?, Cache::DenseBlock { units, h, w })
        }
        LayerSpec::Dropout { rate } => match pass.rng.as_mut() {
            Some(rng) if *rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                    .collect();
                let mut y = x;
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                (y, Cache::Dropout { mask: Some(mask) })
            }
            _ => (x, Cache::Dropout { mask: None }),
        },
        LayerSpec::Relu => {
            let mut y = x;
            let active = relu_in_place(y.data_mut());
            if let Some(pattern) = pass.relu_pattern.as_mut() {
                pattern.extend_from_slice(&active);
            }
            (y, Cache::Relu { active })
        }
        LayerSpec::Flatten => {
            let shape = x.shape().to_vec();
            (x.reshape(&out_shape)?, Cache::Flatten { shape })
        }
    };
    check_finite(&y, layer)?;
    Ok((y, cache))
}

/// Propagates `dy` through one layer, accumulating into `grads` (aligned with
/// `params`) and returning the gradient with respect to the layer input.
pub(crate) fn backward_layer(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &Cache,
    dy: Tensor,
    grads: &mut [Tensor],
    layer: &str,
) -> Result<Tensor> {
    let dx = match (spec, cache) {
        (LayerSpec::Dense { inputs, units }, Cache::Dense { input }) => {
            let w = &params[0];
            let (gw, rest) = grads.split_at_mut(1);
            let d = dy.data();
            // dW += xᵀ dy, db += dy
            gemm(
                *inputs,
                1,
                *units,
                input,
                Layout::row_major(1),
                d,
                Layout::row_major(*units),
                1.0,
                gw[0].data_mut(),
            );
            for (g, v) in rest[0].data_mut().iter_mut().zip(d) {
                *g += v;
            }
            let mut dx = vec![0.0; *inputs];
            gemm(
                1,
                *units,
                *inputs,
                d,
                Layout::row_major(*units),
                w.data(),
                Layout::transposed(*units),
                0.0,
                &mut dx,
            );
            Tensor::new(vec![*inputs], dx)?
        }
        (LayerSpec::Conv2d { .. }, Cache::Conv { cols, geometry }) => {
            let (oh, ow) = geometry.out_hw();
            let (gw, gb) = grads.split_at_mut(1);
            let dcols = conv_backward(
                cols,
                oh * ow,
                params[0].data(),
                dy.data(),
                gw[0].data_mut(),
                gb[0].data_mut(),
            );
            Tensor::new(vec![geometry.h, geometry.w, geometry.c], col2im(&dcols, *geometry))?
        }
        (LayerSpec::ResidualBlock { inner }, Cache::Residual { inner: caches }) => {
            let offsets: Vec<usize> = inner
                .iter()
                .scan(0, |acc, s| {
                    let start = *acc;
                    *acc += s.param_tensors();
                    Some(start)
                })
                .collect();
            let mut d = dy.clone();
            for (i, (sub, c)) in inner.iter().zip(caches).enumerate().rev() {
                let n = sub.param_tensors();
                let o = offsets[i];
                let name = format!("{layer}.{i} ({})", sub.name());
                d = backward_layer(sub, &params[o..o + n], c, d, &mut grads[o..o + n], &name)?;
            }
            // identity path
            d.add(&dy)?
        }
        (
            LayerSpec::DenseBlock {
                in_channels, growth, ..
            },
            Cache::DenseBlock { units, h, w },
        ) => {
            let pixels = h * w;
            let total = in_channels + units.len() * growth;
            let mut d = dy.into_data();
            let mut channels = total;
            for (l, unit) in units.iter().enumerate().rev() {
                let prev = channels - growth;
                // split d into the unit's input part and its new channels
                let mut d_prev = Vec::with_capacity(pixels * prev);
                let mut d_new = Vec::with_capacity(pixels * growth);
                for p in 0..pixels {
                    let row = &d[p * channels..(p + 1) * channels];
                    d_prev.extend_from_slice(&row[..prev]);
                    d_new.extend_from_slice(&row[prev..]);
                }
                let (gw, gb) = grads[2 * l..2 * l + 2].split_at_mut(1);
                let dcols = conv_backward(
                    &unit.cols,
                    pixels,
                    params[2 * l].data(),
                    &d_new,
                    gw[0].data_mut(),
                    gb[0].data_mut(),
                );
                let d_act = col2im(&dcols, unit.geometry);
                for ((dp, da), on) in d_prev.iter_mut().zip(&d_act).zip(&unit.active) {
                    if *on {
                        *dp += da;
                    }
                }
                d = d_prev;
                channels = prev;
            }
            Tensor::new(vec![*h, *w, *in_channels], d)?
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
            let mut d = dy;
            if let Some(mask) = mask {
                for (v, m) in d.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            d
        }
        (LayerSpec::Relu, Cache::Relu { active }) => {
            let mut d = dy;
            for (v, on) in d.data_mut().iter_mut().zip(active) {
                if !on {
                    *v = 0.0;
                }
            }
            d
        }
        (LayerSpec::Flatten, Cache::Flatten { shape }) => dy.reshape(shape)?,
        _ => return Err(Error::shape(layer, "cache does not match layer kind")),
    };
    check_finite(&dx, layer)?;
    for g in grads.iter() {
        check_finite(g, layer)?;
    }
    Ok(dx)
}
