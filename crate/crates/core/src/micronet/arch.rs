//! Desk-scale residual and densely-connected classifiers.
//!
//! Both share a strided 3×3 stem and the same fully connected head: a stack
//! of `fc_layers` ReLU layers of width `fc_width`, each followed by dropout,
//! with the metadata vector joined to the first of them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Residual,
    Dense,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Residual => "residual",
            Architecture::Dense => "dense",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "residual" | "resnet" => Ok(Architecture::Residual),
            "dense" | "densenet" => Ok(Architecture::Dense),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square network input, in pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    pub residual_blocks: usize,
    pub dense_blocks: usize,
    pub dense_layers: usize,
    pub growth: usize,
    pub fc_width: usize,
    pub fc_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 16,
            stem_channels: 8,
            residual_blocks: 2,
            dense_blocks: 1,
            dense_layers: 2,
            growth: 8,
            fc_width: 64,
            fc_layers: 3,
            dropout: 0.5,
        }
    }
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride,
    }
}

fn out_side(side: usize, stride: usize) -> usize {
    (side - 1) / stride + 1
}

/// Layer stack for `arch`; parameters are zero until initialised.
pub fn build_network(
    arch: Architecture,
    cfg: &ModelConfig,
    channels: usize,
    metadata_width: usize,
    classes: usize,
) -> Result<Network> {
    if cfg.input_size == 0 || cfg.stem_channels == 0 || cfg.fc_width == 0 || classes == 0 {
        return Err(Error::Config("model sizes must be positive".into()));
    }
    let mut layers = vec![conv(channels, cfg.stem_channels, 3, 2), LayerSpec::Relu];
    let mut side = out_side(cfg.input_size, 2);
    let mut ch = cfg.stem_channels;
    match arch {
        Architecture::Residual => {
            for _ in 0..cfg.residual_blocks {
                layers.push(LayerSpec::ResidualBlock {
                    inner: vec![conv(ch, ch, 3, 1), LayerSpec::Relu, conv(ch, ch, 3, 1)],
                });
                layers.push(LayerSpec::Relu);
            }
        }
        Architecture::Dense => {
            for b in 0..cfg.dense_blocks {
                if b > 0 {
                    // transition: halve channels and resolution
                    let next = (ch / 2).max(1);
                    layers.push(conv(ch, next, 1, 2));
                    side = out_side(side, 2);
                    ch = next;
                }
                layers.push(LayerSpec::DenseBlock {
                    in_channels: ch,
                    growth: cfg.growth,
                    layers: cfg.dense_layers,
                    kernel: 3,
                });
                ch += cfg.dense_layers * cfg.growth;
            }
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::Flatten);
    let mut width = side * side * ch + metadata_width;
    for _ in 0..cfg.fc_layers {
        layers.push(LayerSpec::Dense {
            inputs: width,
            units: cfg.fc_width,
        });
        layers.push(LayerSpec::Relu);
        if cfg.dropout > 0.0 {
            layers.push(LayerSpec::Dropout { rate: cfg.dropout });
        }
        width = cfg.fc_width;
    }
    layers.push(LayerSpec::Dense {
        inputs: width,
        units: classes,
    });
    Network::new(vec![cfg.input_size, cfg.input_size, channels], metadata_width, layers)
}
