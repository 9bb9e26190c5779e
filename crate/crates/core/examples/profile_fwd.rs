use esigal::neural::*;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    for (name, arch) in [
        ("rEEGNet", Arch::EegNet),
        ("rDCNet", Arch::DeepConvNet),
        ("rSCNet", Arch::ShallowConvNet),
    ] {
        let spec = build_model(arch, 18, 45).unwrap();
        let mut params = init_params(&spec, 1).unwrap();
        let n = 64;
        let data: Vec<f64> = (0..n * 18 * 45).map(|i| ((i as f64) * 0.37).sin()).collect();
        let x = Tensor4::from_vec(data, n, 1, 18, 45).unwrap();
        let targets = Array2::from_shape_fn((n, 3), |(i, j)| ((i + j) as f64 * 0.1).cos());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reps = 10;
        let t0 = Instant::now();
        for _ in 0..reps {
            let (out, caches) = forward(&spec, &mut params, &x, Mode::Train, &mut rng).unwrap();
            let pred = output_to_array(&out);
            let g = loss_grad_mse(&pred, &targets);
            let gt = Tensor4::from_vec(g.iter().cloned().collect(), n, 3, 1, 1).unwrap();
            let _ = backward(&spec, &params, &caches, &gt).unwrap();
        }
        println!("{name} 18x45 fwd+bwd: {:.1} ms/batch", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
    }
}
