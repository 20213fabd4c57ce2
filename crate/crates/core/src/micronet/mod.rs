//! A small differentiable CNN core: dense, convolution, residual and
//! densely-connected blocks, dropout, weighted softmax cross-entropy,
//! reverse-mode gradients and Adam.

mod adam;
pub mod arch;
pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod loss;
mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use adam::{Adam, AdamState};
pub use layers::LayerSpec;
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_grad};

use crate::error::{Error, Result};
use crate::fusion::ScoreVector;
use crate::tensor::Tensor;
use layers::{backward_layer, forward_layer, Cache, Pass};

/// A sequential network whose output is a vector of raw class scores.
///
/// When `metadata_width > 0` the metadata vector is appended to the input of
/// the first top-level dense layer, whose `inputs` count includes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    metadata_width: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    metadata_layer: Option<usize>,
    classes: usize,
}

fn layer_name(index: usize, spec: &LayerSpec) -> String {
    format!("layer {index} ({})", spec.name())
}

impl Network {
    /// Validates the layer chain and allocates zero-valued parameters.
    pub fn new(input_shape: Vec<usize>, metadata_width: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape("input", format!("invalid input shape {input_shape:?}")));
        }
        let metadata_layer = layers.iter().position(|l| matches!(l, LayerSpec::Dense { .. }));
        if metadata_width > 0 && metadata_layer.is_none() {
            return Err(Error::shape(
                "input",
                "metadata needs a dense layer to be concatenated into",
            ));
        }
        let mut shape = input_shape.clone();
        for (i, spec) in layers.iter().enumerate() {
            if Some(i) == metadata_layer && metadata_width > 0 {
                if shape.len() != 1 {
                    return Err(Error::shape(
                        layer_name(i, spec),
                        format!("metadata concatenation needs a flat input, got {shape:?}"),
                    ));
                }
                shape[0] += metadata_width;
            }
            shape = spec.output_shape(&shape, &layer_name(i, spec))?;
        }
        if shape.len() != 1 {
            return Err(Error::shape(
                "output",
                format!("scores must be a vector, got {shape:?}"),
            ));
        }
        let params = layers
            .iter()
            .flat_map(LayerSpec::param_shapes)
            .map(|s| Tensor::zeros(&s))
            .collect();
        Ok(Network {
            input_shape,
            metadata_width,
            layers,
            params,
            metadata_layer,
            classes: shape[0],
        })
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            if p.rank() == 2 {
                let std = (2.0 / p.shape()[0] as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                p.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            } else {
                p.fill(0.0);
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn metadata_width(&self) -> usize {
        self.metadata_width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replaces every parameter; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape(
                "parameters",
                "parameter shapes do not match the layer specs",
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over parameter shapes and little-endian values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            p.digest_into(&mut hasher);
        }
        hex::encode(hasher.finalize())
    }

    fn check_inputs(&self, pixels: &Tensor, metadata: &[f64]) -> Result<()> {
        if pixels.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                "input",
                format!("expected {:?}, got {:?}", self.input_shape, pixels.shape()),
            ));
        }
        if metadata.len() != self.metadata_width {
            return Err(Error::shape(
                "input",
                format!(
                    "expected {} metadata values, got {}",
                    self.metadata_width,
                    metadata.len()
                ),
            ));
        }
        if !pixels.is_finite() || metadata.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "input".into() });
        }
        Ok(())
    }

    fn run(&self, pixels: &Tensor, metadata: &[f64], pass: &mut Pass<'_>) -> Result<(Tensor, Vec<Cache>)> {
        self.check_inputs(pixels, metadata)?;
        let mut x = pixels.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for (i, spec) in self.layers.iter().enumerate() {
            if Some(i) == self.metadata_layer && self.metadata_width > 0 {
                let mut joined = x.into_data();
                joined.extend_from_slice(metadata);
                x = Tensor::vector(joined);
            }
            let n = spec.param_tensors();
            let (y, cache) = forward_layer(spec, &self.params[offset..offset + n], x, pass, &layer_name(i, spec))?;
            offset += n;
            x = y;
            caches.push(cache);
        }
        Ok((x, caches))
    }

    /// Raw (pre-softmax) class scores. With `train_mode` off dropout is the
    /// identity and `rng_seed` is unused.
    pub fn forward(&self, pixels: &Tensor, metadata: &[f64], train_mode: bool, rng_seed: u64) -> Result<ScoreVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut pass = Pass::eval();
        if train_mode {
            pass.rng = Some(&mut rng);
        }
        let (scores, _) = self.run(pixels, metadata, &mut pass)?;
        Ok(ScoreVector::new(scores.into_data()))
    }

    /// Weighted softmax cross-entropy loss and its gradient with respect to
    /// every parameter. `dropout_seed` enables train-mode dropout.
    pub fn backward(
        &self,
        pixels: &Tensor,
        metadata: &[f64],
        target: usize,
        class_weights: &[f64],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (loss, grads, _) = self.backward_scored(pixels, metadata, target, class_weights, dropout_seed)?;
        Ok((loss, grads))
    }

    /// `backward`, also returning the forward pass's scores.
    pub fn backward_scored(
        &self,
        pixels: &Tensor,
        metadata: &[f64],
        target: usize,
        class_weights: &[f64],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Tensor>, ScoreVector)> {
        if class_weights.len() != self.classes {
            return Err(Error::shape(
                "loss",
                format!("{} class weights for {} classes", class_weights.len(), self.classes),
            ));
        }
        if target >= self.classes {
            return Err(Error::LabelOutOfRange {
                index: 0,
                label: target,
                classes: self.classes,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
        let mut pass = Pass::eval();
        if dropout_seed.is_some() {
            pass.rng = Some(&mut rng);
        }
        let (scores, caches) = self.run(pixels, metadata, &mut pass)?;
        let (loss, dscores) = softmax_cross_entropy_grad(scores.data(), target, class_weights[target])?;

        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for spec in &self.layers {
            offsets.push(acc);
            acc += spec.param_tensors();
        }
        let mut d = Tensor::vector(dscores);
        for (i, (spec, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            let (o, n) = (offsets[i], spec.param_tensors());
            d = backward_layer(
                spec,
                &self.params[o..o + n],
                cache,
                d,
                &mut grads[o..o + n],
                &layer_name(i, spec),
            )?;
            if Some(i) == self.metadata_layer && self.metadata_width > 0 {
                let mut data = d.into_data();
                data.truncate(data.len() - self.metadata_width);
                d = Tensor::vector(data);
            }
        }
        Ok((loss, grads, ScoreVector::new(scores.into_data())))
    }

    /// Every ReLU on/off decision taken during a forward pass, in execution
    /// order. Finite-difference checks use it to detect kinks.
    pub fn relu_pattern(&self, pixels: &Tensor, metadata: &[f64], dropout_seed: Option<u64>) -> Result<Vec<bool>> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
        let mut pass = Pass::eval();
        pass.relu_pattern = Some(Vec::new());
        if dropout_seed.is_some() {
            pass.rng = Some(&mut rng);
        }
        self.run(pixels, metadata, &mut pass)?;
        Ok(pass.relu_pattern.unwrap_or_default())
    }
}

/// A residual unit `x ↦ F(x) + x` with its own parameters.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    inner: Vec<LayerSpec>,
    params: Vec<Tensor>,
}

impl ResidualBlock {
    /// Zero-initialised block; `F` must map `input_shape` onto itself.
    pub fn new(inner: Vec<LayerSpec>, input_shape: &[usize]) -> Result<Self> {
        let spec = LayerSpec::ResidualBlock { inner: inner.clone() };
        spec.output_shape(input_shape, "residual_block")?;
        let params = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(ResidualBlock { inner, params })
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// The branch `F(x)` alone.
    pub fn branch(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let mut offset = 0;
        let mut pass = Pass::eval();
        for (i, spec) in self.inner.iter().enumerate() {
            let n = spec.param_tensors();
            let name = format!("residual_block.{i} ({})", spec.name());
            h = forward_layer(spec, &self.params[offset..offset + n], h, &mut pass, &name)?.0;
            offset += n;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let spec = LayerSpec::ResidualBlock {
            inner: self.inner.clone(),
        };
        Ok(forward_layer(&spec, &self.params, x.clone(), &mut Pass::eval(), "residual_block")?.0)
    }
}

/// A densely-connected block with its own parameters.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    spec: LayerSpec,
    params: Vec<Tensor>,
}

impl DenseBlock {
    pub fn new(in_channels: usize, growth: usize, layers: usize, kernel: usize) -> Self {
        let spec = LayerSpec::DenseBlock {
            in_channels,
            growth,
            layers,
            kernel,
        };
        let params = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        DenseBlock { spec, params }
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Output plus the concatenated input seen by each internal unit.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut pass = Pass::eval();
        pass.unit_inputs = Some(Vec::new());
        let (y, _) = forward_layer(&self.spec, &self.params, x.clone(), &mut pass, "dense_block")?;
        Ok((y, pass.unit_inputs.unwrap_or_default()))
    }
}
