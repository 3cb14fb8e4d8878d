//! Declarative model description, read from and written to TOML.
//!
//! ```toml
//! name = "mnist-dynamic"
//! seed = 7
//! activation = "dynamic"      # default for blocks without their own
//! reduction = 16
//!
//! [input]
//! channels = 1
//! height = 28
//! width = 28
//!
//! [stem]
//! out_channels = 16
//! kernel = 3
//! stride = 2
//!
//! [[blocks]]
//! in_channels = 16
//! out_channels = 32
//! stride = 2
//!
//! [classifier]
//! classes = 10
//! ```

use serde::{Deserialize, Serialize};

use crate::act::DEFAULT_REDUCTION;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationMode {
    /// RSign + RPReLU with learned static parameters.
    Static,
    /// DySign + DyPReLU.
    Dynamic,
    /// DySign + static RPReLU.
    DynamicSignOnly,
    /// No binarization: real conv + RPReLU. Used for distillation teachers.
    Real,
}

impl ActivationMode {
    pub fn dynamic_sign(self) -> bool {
        matches!(self, ActivationMode::Dynamic | ActivationMode::DynamicSignOnly)
    }

    pub fn dynamic_prelu(self) -> bool {
        self == ActivationMode::Dynamic
    }

    pub fn binary(self) -> bool {
        self != ActivationMode::Real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationMode>,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    pub input: InputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<StemSpec>,
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierSpec>,
}

fn default_kernel() -> usize {
    3
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

/// Spatial extent after a block; `None` when the geometry does not chain.
pub(crate) fn conv_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (extent + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Feature-map shape `(channels, height, width)` at each stage boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::config(toml_path(&e), e.message().to_string()))?;
        Ok(cfg)
    }

    /// Canonical text encoding with every block's activation resolved.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always serializes")
    }

    /// Fills each block's activation from the model default.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        for (i, b) in cfg.blocks.iter_mut().enumerate() {
            if b.activation.is_none() {
                b.activation = self.activation;
            }
            if b.activation.is_none() {
                return Err(Error::config(
                    format!("blocks[{i}].activation"),
                    "no activation mode given for the block or the model",
                ));
            }
        }
        cfg.activation = None;
        Ok(cfg)
    }

    pub fn block_activation(&self, i: usize) -> ActivationMode {
        self.blocks[i]
            .activation
            .or(self.activation)
            .expect("validated config")
    }

    /// Same model with every block switched to `mode`.
    pub fn with_activation(&self, mode: ActivationMode) -> ModelConfig {
        let mut cfg = self.clone();
        cfg.activation = Some(mode);
        cfg.blocks.iter_mut().for_each(|b| b.activation = None);
        cfg
    }

    /// Checks that channel counts and spatial extents chain, returning the
    /// shape entering each block plus the final feature-map shape.
    pub fn validate(&self) -> Result<Vec<StageShape>> {
        let inp = &self.input;
        if inp.channels == 0 || inp.height == 0 || inp.width == 0 {
            return Err(Error::config("input", "all input extents must be >= 1"));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction", "must be >= 1"));
        }
        let mut cur = StageShape {
            channels: inp.channels,
            height: inp.height,
            width: inp.width,
        };
        if let Some(stem) = &self.stem {
            if stem.out_channels == 0 {
                return Err(Error::config("stem.out_channels", "must be >= 1"));
            }
            if stem.kernel == 0 || stem.kernel % 2 == 0 {
                return Err(Error::config("stem.kernel", "must be odd and >= 1"));
            }
            if stem.stride == 0 {
                return Err(Error::config("stem.stride", "must be >= 1"));
            }
            let pad = stem.kernel / 2;
            let h = conv_extent(cur.height, stem.kernel, stem.stride, pad);
            let w = conv_extent(cur.width, stem.kernel, stem.stride, pad);
            let (Some(h), Some(w)) = (h, w) else {
                return Err(Error::config("stem.kernel", "kernel larger than padded input"));
            };
            cur = StageShape {
                channels: stem.out_channels,
                height: h,
                width: w,
            };
        }
        let mut stages = Vec::with_capacity(self.blocks.len() + 1);
        for (i, b) in self.blocks.iter().enumerate() {
            let path = |f: &str| format!("blocks[{i}].{f}");
            if b.in_channels != cur.channels {
                return Err(Error::config(
                    path("in_channels"),
                    format!("expected {} to chain with the previous stage", cur.channels),
                ));
            }
            if b.out_channels != b.in_channels && b.out_channels != 2 * b.in_channels {
                return Err(Error::config(
                    path("out_channels"),
                    "must equal in_channels or double it (duplication/concatenation)",
                ));
            }
            match b.stride {
                1 => {}
                2 => {
                    if cur.height % 2 != 0 || cur.width % 2 != 0 {
                        return Err(Error::config(
                            path("stride"),
                            format!(
                                "stride 2 needs even spatial extents, got {}x{}",
                                cur.height, cur.width
                            ),
                        ));
                    }
                }
                _ => return Err(Error::config(path("stride"), "must be 1 or 2")),
            }
            if b.activation.or(self.activation).is_none() {
                return Err(Error::config(
                    path("activation"),
                    "no activation mode given for the block or the model",
                ));
            }
            stages.push(cur);
            cur = StageShape {
                channels: b.out_channels,
                height: cur.height / b.stride,
                width: cur.width / b.stride,
            };
        }
        if let Some(cls) = &self.classifier {
            if cls.classes == 0 {
                return Err(Error::config("classifier.classes", "must be >= 1"));
            }
        }
        stages.push(cur);
        Ok(stages)
    }
}

fn toml_path(e: &toml::de::Error) -> String {
    // toml reports spans, not key paths; the message names the key.
    match e.span() {
        Some(span) => format!("byte {}", span.start),
        None => "<document>".to_string(),
    }
}
