//! Bias-corrected Adam with the per-filter max-norm projection applied to
//! constrained depthwise layers after every update.

use super::params::ModelParams;
use super::{LayerSpec, ModelSpec};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, shaped like the trainable weights.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<Vec<f64>>> = params
            .layers
            .iter()
            .map(|l| l.weights.iter().map(|t| vec![0.0; t.data.len()]).collect())
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update followed by the max-norm projection on layers that
/// declare one.
pub fn adam_step(
    spec: &ModelSpec,
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    hp: &AdamHyper,
) {
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (li, layer) in params.layers.iter_mut().enumerate() {
        for (ti, tensor) in layer.weights.iter_mut().enumerate() {
            let g = &grads.layers[li].weights[ti].data;
            let m = &mut state.m[li][ti];
            let v = &mut state.v[li][ti];
            for ((p, gi), (mi, vi)) in tensor
                .data
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
                *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
    }
    apply_max_norm(spec, params);
}

/// Project each constrained depthwise filter onto the L2 ball of the
/// declared radius. Kernel layout is `[Cin, M, KH, KW]`; a filter is one
/// `(ci, m)` block of `KH * KW` weights.
pub fn apply_max_norm(spec: &ModelSpec, params: &mut ModelParams) {
    for (li, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::DepthwiseConv2d {
            kernel,
            max_norm: Some(limit),
            ..
        } = layer
        {
            let flen = kernel.0 * kernel.1;
            let kernel_tensor = &mut params.layers[li].weights[0];
            let n_filters = kernel_tensor.data.len() / flen;
            for f in 0..n_filters {
                let block = &mut kernel_tensor.data[f * flen..(f + 1) * flen];
                let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > *limit {
                    let scale = limit / norm;
                    for v in block {
                        *v *= scale;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::{init_params, ParamTensor};
    use crate::neural::{build_model, Arch};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            arch: Arch::EegNet,
            input_channels: 1,
            input_width: 1,
            layers: vec![LayerSpec::Dense { units: 1 }],
        }
    }

    #[test]
    fn first_step_closed_form() {
        let spec = tiny_spec();
        let mut params = init_params(&spec, 0).unwrap();
        params.layers[0].weights[0].data = vec![0.0];
        params.layers[0].weights[1].data = vec![0.0];
        let mut grads = params.zeros_like();
        grads.layers[0].weights[0].data = vec![1.0];
        let mut state = AdamState::new(&params);
        adam_step(&spec, &mut params, &grads, &mut state, &AdamHyper::default());
        // m-hat = g, v-hat = g^2 on the first step.
        assert!((params.layers[0].weights[0].data[0] + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let spec = tiny_spec();
        let mut params = init_params(&spec, 1).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        for _ in 0..3 {
            adam_step(&spec, &mut params, &grads, &mut state, &AdamHyper::default());
        }
        assert_eq!(params, before);
    }

    #[test]
    fn max_norm_rescales_overlong_filters() {
        let spec = build_model(Arch::EegNet, 4, 25).unwrap();
        let mut params = init_params(&spec, 2).unwrap();
        // Depthwise layer is index 2; blow up one filter to norm 2.
        let flen = 4; // kernel (C, 1) with C = 4
        let val = 2.0 / (flen as f64).sqrt();
        params.layers[2].weights[0] = ParamTensor {
            data: vec![val; params.layers[2].weights[0].data.len()],
            shape: params.layers[2].weights[0].shape.clone(),
        };
        apply_max_norm(&spec, &mut params);
        let data = &params.layers[2].weights[0].data;
        for f in 0..data.len() / flen {
            let norm: f64 = data[f * flen..(f + 1) * flen].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "filter {f} norm {norm}");
        }
    }
}
