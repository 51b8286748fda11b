//! Declarative model description (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{BackwardKind, GradMode, MlNeuronConfig};

/// Aggregation scheme at residual summation points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// conv-BN-neuron-conv-BN on the direct path, neuron (surrogate) after the sum.
    SpikingResnet,
    /// Spike-element-wise ADD; no neuron after the sum.
    #[default]
    Sew,
    /// SEW paths followed by a barrier neuron with straight-through backward.
    Sparse,
    /// Ablation: barrier neuron with the surrogate backward instead of STE.
    SparseNoSte,
}

impl BlockVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockVariant::SpikingResnet => "spiking_resnet",
            BlockVariant::Sew => "sew",
            BlockVariant::Sparse => "sparse",
            BlockVariant::SparseNoSte => "sparse_no_ste",
        }
    }

    /// Backward rule of the post-sum neuron, if the variant has one.
    pub fn post_sum_rule(&self, alpha: f32) -> Option<BackwardKind> {
        match self {
            BlockVariant::Sew => None,
            BlockVariant::Sparse => Some(BackwardKind::Ste),
            BlockVariant::SparseNoSte | BlockVariant::SpikingResnet => {
                Some(BackwardKind::Surrogate { alpha })
            }
        }
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiking_resnet" => Ok(BlockVariant::SpikingResnet),
            "sew" => Ok(BlockVariant::Sew),
            "sparse" => Ok(BlockVariant::Sparse),
            "sparse_no_ste" => Ok(BlockVariant::SparseNoSte),
            other => Err(Error::config(format!("unknown block variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    VggSmall,
    ResnetSmall,
    Vgg16,
    Resnet18,
    /// Use `layers` verbatim.
    Explicit,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Flattens a 4-D input automatically.
    Linear {
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Avgpool {
        #[serde(default)]
        kernel: usize,
        #[serde(default)]
        stride: Option<usize>,
        /// Pool over the whole spatial extent.
        #[serde(default)]
        global: bool,
    },
    Neuron,
    Batchnorm,
    ResidualBlock {
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Overrides the model-wide variant.
        #[serde(default)]
        variant: Option<BlockVariant>,
        #[serde(default = "yes")]
        batchnorm: bool,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Avgpool { .. } => "avgpool",
            LayerSpec::Neuron => "neuron",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::ResidualBlock { .. } => "residual_block",
        }
    }
}

fn default_alpha() -> f32 {
    5.0
}

fn default_v_th() -> f32 {
    1.0
}

fn default_width() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub topology: Topology,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    /// `[C, H, W]` of one input frame.
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "N")]
    pub levels: u32,
    #[serde(default)]
    pub variant: BlockVariant,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_v_th")]
    pub v_th: f32,
    #[serde(default)]
    pub grad_mode: GradMode,
    /// Base channel count for the generated topologies.
    #[serde(default = "default_width")]
    pub width: usize,
}

impl ModelConfig {
    pub fn new(topology: Topology, input_shape: [usize; 3], classes: usize) -> Self {
        ModelConfig {
            topology,
            layers: Vec::new(),
            input_shape,
            classes,
            timesteps: 1,
            levels: 1,
            variant: BlockVariant::Sew,
            alpha: default_alpha(),
            v_th: default_v_th(),
            grad_mode: GradMode::PerMicroStep,
            width: default_width(),
        }
    }

    pub fn explicit(layers: Vec<LayerSpec>, input_shape: [usize; 3], classes: usize) -> Self {
        ModelConfig {
            layers,
            ..ModelConfig::new(Topology::Explicit, input_shape, classes)
        }
    }

    pub fn with_tn(mut self, timesteps: usize, levels: u32) -> Self {
        self.timesteps = timesteps;
        self.levels = levels;
        self
    }

    pub fn with_variant(mut self, variant: BlockVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    /// Neuron used on direct paths and after plain layers.
    pub fn neuron(&self) -> MlNeuronConfig {
        MlNeuronConfig {
            levels: self.levels,
            v_th: self.v_th,
            backward: BackwardKind::Surrogate { alpha: self.alpha },
            grad_mode: self.grad_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::config("T must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.width == 0 {
            return Err(Error::config("width must be positive"));
        }
        self.neuron().validate()
    }

    /// Layer list after expanding named topologies.
    pub fn resolved_layers(&self) -> Vec<LayerSpec> {
        let w = self.width;
        let conv = |c: usize| LayerSpec::Conv {
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        };
        let pool = LayerSpec::Avgpool {
            kernel: 2,
            stride: Some(2),
            global: false,
        };
        let block = |c: usize, stride: usize| LayerSpec::ResidualBlock {
            out_channels: c,
            stride,
            variant: None,
            batchnorm: true,
        };
        let cbn = |c: usize| [conv(c), LayerSpec::Batchnorm, LayerSpec::Neuron];
        let fc = |f: usize| {
            [
                LayerSpec::Linear {
                    out_features: f,
                    bias: false,
                },
                LayerSpec::Batchnorm,
                LayerSpec::Neuron,
            ]
        };
        let head = LayerSpec::Linear {
            out_features: self.classes,
            bias: true,
        };
        let global = LayerSpec::Avgpool {
            kernel: 0,
            stride: None,
            global: true,
        };
        let mut l = Vec::new();
        match self.topology {
            Topology::Explicit => return self.layers.clone(),
            Topology::VggSmall => {
                l.extend(cbn(w));
                l.extend(cbn(w));
                l.push(pool.clone());
                l.extend(cbn(2 * w));
                l.extend(cbn(2 * w));
                l.push(pool);
                l.extend(fc(4 * w));
                l.push(head);
            }
            Topology::ResnetSmall => {
                l.extend(cbn(w));
                l.push(block(w, 1));
                l.push(block(2 * w, 2));
                l.push(block(2 * w, 1));
                l.push(global);
                l.push(head);
            }
            Topology::Vgg16 => {
                // 0 marks a pooling stage
                for c in [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0] {
                    if c == 0 {
                        l.push(pool.clone());
                    } else {
                        l.extend(cbn(c));
                    }
                }
                l.extend(fc(512));
                l.extend(fc(512));
                l.push(head);
            }
            Topology::Resnet18 => {
                l.extend(cbn(64));
                for (c, s) in [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)] {
                    l.push(block(c, s));
                }
                l.push(global);
                l.push(head);
            }
        }
        l
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_names() {
        let cfg = ModelConfig::new(Topology::ResnetSmall, [1, 8, 8], 4)
            .with_tn(1, 4)
            .with_variant(BlockVariant::Sparse);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"T\":1"));
        assert!(text.contains("\"resnet-small\""));
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn explicit_layer_json() {
        let text = r#"{
            "topology": "explicit", "input_shape": [1, 4, 4], "classes": 2, "T": 2, "N": 3,
            "layers": [
                {"kind": "conv", "out_channels": 2, "kernel": 3, "padding": 1},
                {"kind": "neuron"},
                {"kind": "residual_block", "out_channels": 2, "variant": "sparse_no_ste"},
                {"kind": "linear", "out_features": 2}
            ]
        }"#;
        let cfg: ModelConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.resolved_layers().len(), 4);
        assert!(serde_json::from_str::<ModelConfig>(&text.replace("\"conv\"", "\"lstm\"")).is_err());
    }

    #[test]
    fn variant_parsing() {
        for v in [
            BlockVariant::SpikingResnet,
            BlockVariant::Sew,
            BlockVariant::Sparse,
            BlockVariant::SparseNoSte,
        ] {
            assert_eq!(v.as_str().parse::<BlockVariant>().unwrap(), v);
        }
        assert!("ms_resnet".parse::<BlockVariant>().is_err());
    }
}
