//! Trainable parameters and batchnorm state, plus checkpoint persistence
//! (ordered parameter tensors in the raw-float container next to a JSON
//! architecture descriptor).

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arch, LayerSpec, ModelSpec};
use crate::container::{self, MatrixMeta, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamTensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        ParamTensor {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }
}

/// Per-layer variables: `weights` are trainable, `state` is not (batchnorm
/// running mean/variance).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerVars {
    pub weights: Vec<ParamTensor>,
    pub state: Vec<ParamTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerVars>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    weights: l.weights.iter().map(|t| ParamTensor::zeros(&t.shape)).collect(),
                    state: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|t| t.data.len()).sum::<usize>())
            .sum()
    }

    pub fn has_non_finite(&self) -> bool {
        self.layers.iter().any(|l| {
            l.weights
                .iter()
                .chain(l.state.iter())
                .any(|t| t.data.iter().any(|v| !v.is_finite()))
        })
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamTensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = ParamTensor::zeros(shape);
    for v in &mut t.data {
        *v = rng.gen_range(-limit..limit);
    }
    t
}

/// Seeded fan-based uniform initialization. Biases start at zero, batchnorm
/// gamma at one; running statistics start at (0, 1).
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let shapes = spec.output_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut in_maps = 1usize;
    for (i, layer) in spec.layers.iter().enumerate() {
        let vars = match layer {
            LayerSpec::Conv2d { kernel, filters, .. } => {
                let (kh, kw) = *kernel;
                LayerVars {
                    weights: vec![
                        glorot(
                            &mut rng,
                            &[*filters, in_maps, kh, kw],
                            in_maps * kh * kw,
                            filters * kh * kw,
                        ),
                        ParamTensor::zeros(&[*filters]),
                    ],
                    state: Vec::new(),
                }
            }
            LayerSpec::DepthwiseConv2d { kernel, depth_multiplier, .. } => {
                let (kh, kw) = *kernel;
                LayerVars {
                    weights: vec![
                        glorot(
                            &mut rng,
                            &[in_maps, *depth_multiplier, kh, kw],
                            kh * kw,
                            depth_multiplier * kh * kw,
                        ),
                        ParamTensor::zeros(&[in_maps * depth_multiplier]),
                    ],
                    state: Vec::new(),
                }
            }
            LayerSpec::SeparableConv2d { kernel, filters, .. } => {
                let (kh, kw) = *kernel;
                LayerVars {
                    weights: vec![
                        glorot(&mut rng, &[in_maps, 1, kh, kw], kh * kw, kh * kw),
                        glorot(&mut rng, &[*filters, in_maps, 1, 1], in_maps, *filters),
                        ParamTensor::zeros(&[*filters]),
                    ],
                    state: Vec::new(),
                }
            }
            LayerSpec::BatchNorm => LayerVars {
                weights: vec![
                    ParamTensor::filled(&[in_maps], 1.0),
                    ParamTensor::zeros(&[in_maps]),
                ],
                state: vec![
                    ParamTensor::zeros(&[in_maps]),
                    ParamTensor::filled(&[in_maps], 1.0),
                ],
            },
            LayerSpec::Dense { units } => LayerVars {
                weights: vec![
                    glorot(&mut rng, &[*units, in_maps], in_maps, *units),
                    ParamTensor::zeros(&[*units]),
                ],
                state: Vec::new(),
            },
            _ => LayerVars::default(),
        };
        layers.push(vars);
        in_maps = shapes[i].maps;
    }
    Ok(ModelParams { layers })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Arch,
    input_channels: usize,
    input_width: usize,
    layers: Vec<LayerSpec>,
    /// (layer index, role, tensor shape); role 0 = weight, 1 = state.
    tensors: Vec<(usize, u8, Vec<usize>)>,
}

fn append_name(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}

/// Save spec + parameters. The tensor payload is one row per tensor in a
/// ragged f64 matrix (padded with zeros); the JSON descriptor records the
/// true shapes, so reloads are bit-exact.
pub fn save_checkpoint(stem: impl AsRef<Path>, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    let stem = stem.as_ref();
    let mut tensors = Vec::new();
    let mut max_len = 1;
    for (li, layer) in params.layers.iter().enumerate() {
        for t in &layer.weights {
            tensors.push((li, 0u8, t.shape.clone()));
            max_len = max_len.max(t.data.len());
        }
        for t in &layer.state {
            tensors.push((li, 1u8, t.shape.clone()));
            max_len = max_len.max(t.data.len());
        }
    }
    let mut payload = Array2::<f64>::zeros((tensors.len(), max_len));
    let mut row = 0;
    for layer in &params.layers {
        for t in layer.weights.iter().chain(layer.state.iter()) {
            for (j, v) in t.data.iter().enumerate() {
                payload[[row, j]] = *v;
            }
            row += 1;
        }
    }
    container::save_matrix_f64(
        append_name(stem, ".params"),
        &payload,
        &MatrixMeta::new(0, 0, Role::Model),
    )?;
    let header = CheckpointHeader {
        arch: spec.arch,
        input_channels: spec.input_channels,
        input_width: spec.input_width,
        layers: spec.layers.clone(),
        tensors,
    };
    let hpath = append_name(stem, ".model.json");
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Meta {
        path: hpath.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<(ModelSpec, ModelParams)> {
    let stem = stem.as_ref();
    let hpath = append_name(stem, ".model.json");
    let text = std::fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::Meta {
        path: hpath.display().to_string(),
        detail: e.to_string(),
    })?;
    let (payload, _) = container::load_matrix_f64(append_name(stem, ".params"))?;
    let spec = ModelSpec {
        arch: header.arch,
        input_channels: header.input_channels,
        input_width: header.input_width,
        layers: header.layers,
    };
    let n_layers = spec.layers.len();
    let mut layers = vec![LayerVars::default(); n_layers];
    for (row, (li, role, shape)) in header.tensors.iter().enumerate() {
        if *li >= n_layers {
            return Err(Error::Meta {
                path: hpath.display().to_string(),
                detail: format!("tensor row {row} references layer {li}"),
            });
        }
        let len: usize = shape.iter().product();
        if len > payload.ncols() || row >= payload.nrows() {
            return Err(Error::Meta {
                path: hpath.display().to_string(),
                detail: "tensor table does not match payload".into(),
            });
        }
        let data: Vec<f64> = (0..len).map(|j| payload[[row, j]]).collect();
        let tensor = ParamTensor {
            data,
            shape: shape.clone(),
        };
        if *role == 0 {
            layers[*li].weights.push(tensor);
        } else {
            layers[*li].state.push(tensor);
        }
    }
    Ok((spec, ModelParams { layers }))
}
