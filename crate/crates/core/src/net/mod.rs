//! The layered window detector.
//!
//! A network of depth `n` is a first layer (one of five [`VariantKind`]s),
//! `n - 2` supervised middle layers and a single-logit head whose kernel
//! covers exactly one window's worth of feature cells, so the head's output
//! is the window grid itself.

mod params;
mod train;

pub use params::{build_network, load_model, save_model, Layer, NetworkParams};
pub use train::{
    backward, cross_entropy, encode_first_layer, forward, forward_encoded, predict, predict_all, train_detector,
    train_step, Adam, DetectionGrid, ForwardCache, Gradients, Sample, TrainConfig, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::conv::{self, Geometry, Pads};
use crate::data::{CHANNELS, FRAMES, FRAME_H, FRAME_W, GRID_COLS, GRID_ROWS};
use crate::error::{Error, Result};
use crate::lca::{Competition, LcaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Random init, trained with the rest of the network.
    ConvSup,
    /// LCA activations over a learned dictionary; weights fixed.
    SparseUnsup,
    /// Random init, never updated.
    ConvRand,
    /// Dictionary weights used as a plain convolution, never updated.
    ConvUnsup,
    /// Dictionary weights used as a convolution and trained further.
    ConvFinetune,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::ConvSup,
        VariantKind::SparseUnsup,
        VariantKind::ConvRand,
        VariantKind::ConvUnsup,
        VariantKind::ConvFinetune,
    ];

    pub fn needs_dictionary(self) -> bool {
        matches!(self, VariantKind::SparseUnsup | VariantKind::ConvUnsup | VariantKind::ConvFinetune)
    }

    pub fn first_layer_trainable(self) -> bool {
        matches!(self, VariantKind::ConvSup | VariantKind::ConvFinetune)
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::ConvSup => "conv_sup",
            VariantKind::SparseUnsup => "sparse_unsup",
            VariantKind::ConvRand => "conv_rand",
            VariantKind::ConvUnsup => "conv_unsup",
            VariantKind::ConvFinetune => "conv_finetune",
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirstLayerSpec {
    pub features: usize,
    /// `(kt, kh, kw)`; `kt` must equal the clip length.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for FirstLayerSpec {
    fn default() -> Self {
        FirstLayerSpec {
            features: 64,
            kernel: [FRAMES, 8, 8],
            stride: [1, 2, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub variant: VariantKind,
    pub depth: usize,
    pub first: FirstLayerSpec,
    pub mid_features: usize,
    /// Inference settings for the sparse-coding first layer.
    pub lca: LcaConfig,
    /// Input `(frames, height, width, channels)`.
    pub input: [usize; 4],
    /// Output window grid `(rows, cols)`.
    pub grid: [usize; 2],
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            variant: VariantKind::ConvSup,
            depth: 3,
            first: FirstLayerSpec::default(),
            mid_features: 64,
            lca: LcaConfig {
                competition: Competition::Gram,
                ..LcaConfig::default()
            },
            input: [FRAMES, FRAME_H, FRAME_W, CHANNELS],
            grid: [GRID_ROWS, GRID_COLS],
        }
    }
}

/// One layer's geometry and the zero padding applied to its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerPlan {
    pub geometry: Geometry,
    pub pads: Pads,
    pub relu: bool,
}

fn plan_err(msg: String) -> Error {
    Error::Config(format!("network geometry: {msg}"))
}

impl NetworkSpec {
    pub fn input_dims(&self) -> [usize; 5] {
        let [t, h, w, c] = self.input;
        [1, t, h, w, c]
    }

    /// Layer geometry from input to head. Fails unless the composed strides
    /// land exactly on the window grid.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        if !(2..=4).contains(&self.depth) {
            return Err(plan_err(format!("depth must be 2, 3 or 4, got {}", self.depth)));
        }
        let [frames, h, w, c] = self.input;
        let f = &self.first;
        if f.features == 0 || self.mid_features == 0 {
            return Err(plan_err("feature counts must be positive".into()));
        }
        if f.kernel[0] != frames || f.stride[0] != 1 {
            return Err(plan_err(format!(
                "first-layer kernel must span all {frames} frames with time stride 1"
            )));
        }
        if f.stride[1] == 0 || f.stride[2] == 0 || h % f.stride[1] != 0 || w % f.stride[2] != 0 {
            return Err(plan_err(format!("first-layer stride {:?} must divide the {h}x{w} frame", f.stride)));
        }
        let mut cells = [h / f.stride[1], w / f.stride[2]];
        let first_pads = [
            [0, 0],
            conv::pad_for_output(h, f.kernel[1], f.stride[1], cells[0])?,
            conv::pad_for_output(w, f.kernel[2], f.stride[2], cells[1])?,
        ];
        let mut layers = vec![LayerPlan {
            geometry: Geometry {
                features: f.features,
                extent: f.kernel,
                in_channels: c,
                stride: f.stride,
            },
            pads: first_pads,
            relu: self.variant != VariantKind::SparseUnsup,
        }];
        let mut channels = f.features;
        for m in 0..self.depth - 2 {
            let stride = if m == 0 { 2 } else { 1 };
            if cells[0] % stride != 0 || cells[1] % stride != 0 {
                return Err(plan_err(format!("{}x{} cells do not halve", cells[0], cells[1])));
            }
            let out = [cells[0] / stride, cells[1] / stride];
            layers.push(LayerPlan {
                geometry: Geometry {
                    features: self.mid_features,
                    extent: [1, 3, 3],
                    in_channels: channels,
                    stride: [1, stride, stride],
                },
                pads: [
                    [0, 0],
                    conv::pad_for_output(cells[0], 3, stride, out[0])?,
                    conv::pad_for_output(cells[1], 3, stride, out[1])?,
                ],
                relu: true,
            });
            cells = out;
            channels = self.mid_features;
        }
        let [gr, gc] = self.grid;
        if gr == 0 || gc == 0 || cells[0] % gr != 0 || cells[1] % gc != 0 {
            return Err(plan_err(format!(
                "{}x{} feature cells do not tile a {gr}x{gc} window grid",
                cells[0], cells[1]
            )));
        }
        let win = [cells[0] / gr, cells[1] / gc];
        layers.push(LayerPlan {
            geometry: Geometry {
                features: 1,
                extent: [1, win[0], win[1]],
                in_channels: channels,
                stride: [1, win[0], win[1]],
            },
            pads: [[0, 0]; 3],
            relu: false,
        });
        Ok(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_lands_on_grid() {
        for depth in 2..=4 {
            let spec = NetworkSpec { depth, ..Default::default() };
            let plan = spec.plan().unwrap();
            assert_eq!(plan.len(), depth);
            let mut dims = spec.input_dims();
            for l in &plan {
                let k = crate::conv::KernelStack::zeros(l.geometry).unwrap();
                for a in 0..3 {
                    dims[a + 1] += l.pads[a][0] + l.pads[a][1];
                }
                dims = crate::conv::output_dims(&dims, &k).unwrap();
            }
            assert_eq!(dims, [1, 1, 4, 8, 1], "depth {depth}");
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in VariantKind::ALL {
            assert_eq!(v.name().parse::<VariantKind>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("convsup".parse::<VariantKind>().is_err());
    }

    #[test]
    fn bad_depth_and_strides_rejected() {
        assert!(NetworkSpec { depth: 5, ..Default::default() }.plan().is_err());
        let mut spec = NetworkSpec::default();
        spec.first.stride = [1, 3, 3];
        assert!(spec.plan().is_err());
        spec.first.stride = [1, 2, 2];
        spec.first.kernel = [2, 8, 8];
        assert!(spec.plan().is_err());
    }
}
