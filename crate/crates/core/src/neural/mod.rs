//! Minimal dense-tensor training engine: the three convolutional decoder
//! architectures, exact gradients, Adam with a per-filter max-norm
//! constraint, early-stopped mini-batch training, and the linear baseline.
//!
//! Everything trains in 64-bit floats so finite-difference gradient checks
//! are meaningful.

mod adam;
mod layers;
mod mlr;
mod params;
mod tensor;
mod train;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use layers::{backward, forward, loss_grad_mse, mse, output_to_array, Cache, Mode};
pub use mlr::{load_mlr, mlr_fit, mlr_predict, save_mlr, MlrModel};
pub use params::{init_params, load_checkpoint, save_checkpoint, LayerVars, ModelParams, ParamTensor};
pub use tensor::Tensor4;
pub use train::{batch_tensor, predict, train_model, EarlyStopping, StopDecision, TrainConfig, TrainHistory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "rEEGNet")]
    EegNet,
    #[serde(rename = "rDCNet")]
    DeepConvNet,
    #[serde(rename = "rSCNet")]
    ShallowConvNet,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::EegNet => write!(f, "rEEGNet"),
            Arch::DeepConvNet => write!(f, "rDCNet"),
            Arch::ShallowConvNet => write!(f, "rSCNet"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Linear,
    Elu,
    Square,
    Log,
}

/// One layer of a decoder. Convolutions are stride (1, 1); pooling layers
/// carry their own strides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        kernel: (usize, usize),
        filters: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        kernel: (usize, usize),
        depth_multiplier: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_norm: Option<f64>,
    },
    SeparableConv2d {
        kernel: (usize, usize),
        filters: usize,
        padding: Padding,
    },
    BatchNorm,
    Activation {
        act: Act,
    },
    AvgPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerSpec::SeparableConv2d { .. } => "separable_conv2d",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }
}

/// Output shape of one layer (`maps x h x w`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub maps: usize,
    pub h: usize,
    pub w: usize,
}

/// A full architecture description: input geometry plus the layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Input channels C (EEG sensors or ROIs); the input tensor is
    /// `[batch, 1, C, W]`.
    pub input_channels: usize,
    /// Input window length W in samples.
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Propagate shapes through the stack, erroring with the layer index and
    /// kind when a valid convolution or pooling window no longer fits.
    pub fn output_shapes(&self) -> Result<Vec<Shape3>> {
        let mut cur = Shape3 {
            maps: 1,
            h: self.input_channels,
            w: self.input_width,
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |detail: String| Error::Layer {
                index,
                kind: layer.kind_name().to_string(),
                detail,
            };
            cur = match layer {
                LayerSpec::Conv2d { kernel, filters, padding } => {
                    let (h, w) = conv_out(cur.h, cur.w, *kernel, *padding).map_err(fail)?;
                    Shape3 { maps: *filters, h, w }
                }
                LayerSpec::DepthwiseConv2d { kernel, depth_multiplier, .. } => {
                    let (h, w) = conv_out(cur.h, cur.w, *kernel, Padding::Valid).map_err(fail)?;
                    Shape3 {
                        maps: cur.maps * depth_multiplier,
                        h,
                        w,
                    }
                }
                LayerSpec::SeparableConv2d { kernel, filters, padding } => {
                    let (h, w) = conv_out(cur.h, cur.w, *kernel, *padding).map_err(fail)?;
                    Shape3 { maps: *filters, h, w }
                }
                LayerSpec::BatchNorm | LayerSpec::Activation { .. } | LayerSpec::Dropout { .. } => cur,
                LayerSpec::AvgPool { kernel, stride } | LayerSpec::MaxPool { kernel, stride } => {
                    if cur.h < kernel.0 || cur.w < kernel.1 {
                        return Err(fail(format!(
                            "pool {}x{} does not fit input {}x{}",
                            kernel.0, kernel.1, cur.h, cur.w
                        )));
                    }
                    Shape3 {
                        maps: cur.maps,
                        h: (cur.h - kernel.0) / stride.0 + 1,
                        w: (cur.w - kernel.1) / stride.1 + 1,
                    }
                }
                LayerSpec::Flatten => Shape3 {
                    maps: cur.maps * cur.h * cur.w,
                    h: 1,
                    w: 1,
                },
                LayerSpec::Dense { units } => {
                    if cur.h != 1 || cur.w != 1 {
                        return Err(fail("dense layer needs flattened input".into()));
                    }
                    Shape3 { maps: *units, h: 1, w: 1 }
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Number of trainable parameter scalars (batchnorm running statistics
    /// are state, not parameters).
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.output_shapes()?;
        let mut count = 0;
        let mut in_maps = 1;
        for (i, layer) in self.layers.iter().enumerate() {
            count += match layer {
                LayerSpec::Conv2d { kernel, filters, .. } => {
                    filters * (in_maps * kernel.0 * kernel.1) + filters
                }
                LayerSpec::DepthwiseConv2d { kernel, depth_multiplier, .. } => {
                    in_maps * depth_multiplier * kernel.0 * kernel.1 + in_maps * depth_multiplier
                }
                LayerSpec::SeparableConv2d { kernel, filters, .. } => {
                    in_maps * kernel.0 * kernel.1 + filters * in_maps + filters
                }
                LayerSpec::BatchNorm => 2 * in_maps,
                LayerSpec::Dense { units } => units * in_maps + units,
                _ => 0,
            };
            in_maps = shapes[i].maps;
        }
        Ok(count)
    }
}

fn conv_out(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    padding: Padding,
) -> std::result::Result<(usize, usize), String> {
    match padding {
        Padding::Same => Ok((h, w)),
        Padding::Valid => {
            if h < kernel.0 || w < kernel.1 {
                Err(format!(
                    "valid kernel {}x{} wider than input {h}x{w}",
                    kernel.0, kernel.1
                ))
            } else {
                Ok((h - kernel.0 + 1, w - kernel.1 + 1))
            }
        }
    }
}

/// Build one of the three decoder architectures for a C x W input.
///
/// Padding choices: the EEGNet-style temporal convolutions use same (zero)
/// padding -- the (1, 32) kernel must accept W = 25 inputs -- while its
/// spatial depthwise convolution and every convolution in the other two
/// architectures are valid. All convolutions carry biases; batchnorm uses
/// eps = 1e-3 with momentum 0.9 on the running statistics.
pub fn build_model(arch: Arch, channels: usize, window: usize) -> Result<ModelSpec> {
    if channels == 0 || window == 0 {
        return Err(Error::InvalidArgument("channels and window must be positive".into()));
    }
    let layers = match arch {
        Arch::EegNet => vec![
            LayerSpec::Conv2d {
                kernel: (1, 32),
                filters: 32,
                padding: Padding::Same,
            },
            LayerSpec::BatchNorm,
            LayerSpec::DepthwiseConv2d {
                kernel: (channels, 1),
                depth_multiplier: 3,
                max_norm: Some(1.0),
            },
            LayerSpec::BatchNorm,
            LayerSpec::Activation { act: Act::Elu },
            LayerSpec::AvgPool {
                kernel: (1, 2),
                stride: (1, 2),
            },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::SeparableConv2d {
                kernel: (1, 16),
                filters: 96,
                padding: Padding::Same,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Activation { act: Act::Elu },
            LayerSpec::AvgPool {
                kernel: (1, 4),
                stride: (1, 4),
            },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 3 },
        ],
        Arch::DeepConvNet => {
            let mut layers = vec![
                LayerSpec::Conv2d {
                    kernel: (1, 5),
                    filters: 25,
                    padding: Padding::Valid,
                },
                LayerSpec::Conv2d {
                    kernel: (channels, 1),
                    filters: 25,
                    padding: Padding::Valid,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Activation { act: Act::Elu },
                LayerSpec::Dropout { rate: 0.5 },
            ];
            for filters in [50, 100, 200] {
                layers.push(LayerSpec::Conv2d {
                    kernel: (1, 5),
                    filters,
                    padding: Padding::Valid,
                });
                layers.push(LayerSpec::BatchNorm);
                layers.push(LayerSpec::Activation { act: Act::Elu });
                if filters == 200 {
                    layers.push(LayerSpec::MaxPool {
                        kernel: (1, 2),
                        stride: (1, 2),
                    });
                }
                layers.push(LayerSpec::Dropout { rate: 0.5 });
            }
            layers.push(LayerSpec::Flatten);
            layers.push(LayerSpec::Dense { units: 3 });
            layers
        }
        Arch::ShallowConvNet => vec![
            LayerSpec::Conv2d {
                kernel: (1, 13),
                filters: 40,
                padding: Padding::Valid,
            },
            LayerSpec::Conv2d {
                kernel: (channels, 1),
                filters: 40,
                padding: Padding::Valid,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Activation { act: Act::Square },
            LayerSpec::AvgPool {
                kernel: (1, 5),
                stride: (1, 2),
            },
            LayerSpec::Activation { act: Act::Log },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 3 },
        ],
    };
    let spec = ModelSpec {
        arch,
        input_channels: channels,
        input_width: window,
        layers,
    };
    spec.output_shapes()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn width_after(spec: &ModelSpec, layer_index: usize) -> usize {
        spec.output_shapes().unwrap()[layer_index].w
    }

    #[test]
    fn eegnet_shape_walk() {
        let spec = build_model(Arch::EegNet, 18, 45).unwrap();
        // conv1 (same) -> 45, depthwise -> 45, pool/2 -> 22, sep (same) -> 22,
        // pool/4 -> 5, flatten 96*5 = 480, dense 3.
        assert_eq!(width_after(&spec, 0), 45);
        assert_eq!(width_after(&spec, 2), 45);
        assert_eq!(width_after(&spec, 5), 22);
        assert_eq!(width_after(&spec, 7), 22);
        assert_eq!(width_after(&spec, 10), 5);
        let shapes = spec.output_shapes().unwrap();
        assert_eq!(shapes[12].maps, 480);
        assert_eq!(shapes[13].maps, 3);
    }

    #[test]
    fn eegnet_accepts_narrowest_window() {
        // Same padding on the (1, 32) temporal kernel is what lets W = 25 in.
        let spec = build_model(Arch::EegNet, 18, 25).unwrap();
        let shapes = spec.output_shapes().unwrap();
        assert_eq!(shapes[12].maps, 96 * 3);
    }

    #[test]
    fn deepconvnet_shape_walk() {
        let spec = build_model(Arch::DeepConvNet, 18, 25).unwrap();
        let shapes = spec.output_shapes().unwrap();
        // widths 25 -> 21 -> 17 -> 13 -> 9 -> 4; flatten 200*4 = 800.
        assert_eq!(shapes[0].w, 21);
        assert_eq!(shapes[1].w, 21);
        assert_eq!(shapes[1].h, 1);
        assert_eq!(shapes[5].w, 17);
        assert_eq!(shapes[9].w, 13);
        assert_eq!(shapes[13].w, 9);
        assert_eq!(shapes[16].w, 4);
        let flat = shapes.iter().find(|s| s.h == 1 && s.w == 1 && s.maps == 800);
        assert!(flat.is_some());
    }

    #[test]
    fn shallowconvnet_shape_walk() {
        let spec = build_model(Arch::ShallowConvNet, 18, 45).unwrap();
        let shapes = spec.output_shapes().unwrap();
        // conv(1,13) -> 33; avgpool size 5 stride 2 -> 15; flatten 40*15 = 600.
        assert_eq!(shapes[0].w, 33);
        assert_eq!(shapes[4].w, 15);
        assert_eq!(shapes[7].maps, 600);
    }

    #[test]
    fn underflow_names_the_layer() {
        let spec = build_model(Arch::ShallowConvNet, 18, 45).unwrap();
        let narrow = ModelSpec {
            input_width: 10,
            ..spec
        };
        match narrow.output_shapes() {
            Err(Error::Layer { index, kind, .. }) => {
                assert_eq!(index, 0);
                assert_eq!(kind, "conv2d");
            }
            other => panic!("expected layer error, got {other:?}"),
        }
    }
}
