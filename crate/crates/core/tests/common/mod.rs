//! Shared helpers for the integration suites: a finite-difference gradient
//! oracle that is independent of the backward pass it checks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use esigal::neural::{
    backward, forward, loss_grad_mse, mse, Cache, Mode, ModelParams, ModelSpec, Tensor4,
};

const DROPOUT_SEED: u64 = 4242;

/// Train-mode loss with a fixed dropout stream, so every evaluation sees
/// identical masks and finite differences are exact.
pub fn loss_with_fixed_masks(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor4,
    targets: &Array2<f64>,
) -> f64 {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let (out, _) = forward(spec, &mut p, x, Mode::Train, &mut rng).expect("forward");
    let pred = Array2::from_shape_vec((out.n, out.c), out.data.clone()).unwrap();
    mse(&pred, targets)
}

fn analytic_grads(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor4,
    targets: &Array2<f64>,
) -> ModelParams {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let (out, caches): (Tensor4, Vec<Cache>) =
        forward(spec, &mut p, x, Mode::Train, &mut rng).expect("forward");
    let pred = Array2::from_shape_vec((out.n, out.c), out.data.clone()).unwrap();
    let g = loss_grad_mse(&pred, targets);
    let gt = Tensor4::from_vec(g.iter().cloned().collect(), out.n, out.c, 1, 1).unwrap();
    backward(spec, &p, &caches, &gt).expect("backward")
}

pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central-difference check (step `h`) of `backward` against the loss.
/// `stride` selects every `stride`-th element of each tensor (1 = every
/// parameter). `atol` absorbs the finite-difference truncation floor on
/// near-zero gradients (conv biases ahead of batchnorm are exactly zero,
/// and ln/elu curvature injects O(h^2) error); the relative part is the
/// real contract.
pub fn grad_check_with(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor4,
    targets: &Array2<f64>,
    h: f64,
    stride: usize,
    atol: f64,
) -> GradCheckReport {
    let grads = analytic_grads(spec, params, x, targets);
    // Enumerate the (layer, tensor, element) coordinates to probe.
    let mut coords: Vec<(usize, usize, usize)> = Vec::new();
    for (li, layer) in params.layers.iter().enumerate() {
        for (ti, t) in layer.weights.iter().enumerate() {
            let mut ei = 0;
            while ei < t.data.len() {
                coords.push((li, ti, ei));
                ei += stride;
            }
        }
    }
    let results: Vec<(f64, String)> = coords
        .par_chunks(256)
        .map(|chunk| {
            let mut scratch = params.clone();
            let mut worst = (0.0f64, String::new());
            for &(li, ti, ei) in chunk {
                let base = scratch.layers[li].weights[ti].data[ei];
                scratch.layers[li].weights[ti].data[ei] = base + h;
                let plus = loss_with_fixed_masks(spec, &scratch, x, targets);
                scratch.layers[li].weights[ti].data[ei] = base - h;
                let minus = loss_with_fixed_masks(spec, &scratch, x, targets);
                scratch.layers[li].weights[ti].data[ei] = base;
                let fd = (plus - minus) / (2.0 * h);
                let an = grads.layers[li].weights[ti].data[ei];
                let abs_err = (fd - an).abs();
                let rel = if abs_err < atol {
                    0.0
                } else {
                    abs_err / fd.abs().max(an.abs())
                };
                if rel > worst.0 {
                    worst = (rel, format!("layer {li} tensor {ti} elem {ei}: fd {fd:.3e} an {an:.3e}"));
                }
            }
            worst
        })
        .collect();
    let mut max_rel_err = 0.0;
    let mut worst = String::new();
    for (rel, desc) in results {
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = desc;
        }
    }
    GradCheckReport {
        checked: coords.len(),
        max_rel_err,
        worst,
    }
}

/// [`grad_check_with`] at the default near-zero floor.
pub fn grad_check(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor4,
    targets: &Array2<f64>,
    h: f64,
    stride: usize,
) -> GradCheckReport {
    grad_check_with(spec, params, x, targets, h, stride, 1e-8)
}

/// Deterministic quasi-random input/target pair for gradient checks.
pub fn check_inputs(batch: usize, channels: usize, width: usize, seed: u64) -> (Tensor4, Array2<f64>) {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let data: Vec<f64> = (0..batch * channels * width).map(|_| next()).collect();
    let x = Tensor4::from_vec(data, batch, 1, channels, width).unwrap();
    let targets = Array2::from_shape_fn((batch, 3), |_| next() * 0.5);
    (x, targets)
}
