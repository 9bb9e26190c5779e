//! Decoding metrics: Pearson correlation per axis over concatenated test
//! predictions, and the one-tailed paired t-test used to compare decoders.
//!
//! The Student-t tail probability is computed by adaptive quadrature on
//! `cos^(df-1)` after the substitution `x = sqrt(df) * tan(theta)`, which
//! maps the infinite tail onto a finite interval; no statistics library
//! semantics are assumed.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::neural::{mlr_predict, predict, MlrModel, ModelParams, ModelSpec};
use crate::windowing::WindowedDataset;

/// Pearson correlation with sample (n-1) standard deviations:
/// `(1/(T-1)) * sum(((x_i - mean_x)/sd_x) * ((y_i - mean_y)/sd_y))`.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    let t = x.len();
    if t < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 samples".into()));
    }
    let n = t as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..t {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::ZeroVariance { index: 0 });
    }
    if syy <= 0.0 {
        return Err(Error::ZeroVariance { index: 1 });
    }
    let sx = (sxx / (n - 1.0)).sqrt();
    let sy = (syy / (n - 1.0)).sqrt();
    Ok(sxy / ((n - 1.0) * sx * sy))
}

/// Anything that maps a batch of C x W inputs to 3-vector predictions.
pub trait Predictor {
    fn predict_batch(&self, inputs: &Array3<f64>) -> Result<Array2<f64>>;
}

/// Trained convolutional decoder.
pub struct NeuralPredictor<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ModelParams,
}

impl Predictor for NeuralPredictor<'_> {
    fn predict_batch(&self, inputs: &Array3<f64>) -> Result<Array2<f64>> {
        predict(self.spec, self.params, inputs)
    }
}

/// Linear baseline over flattened windows plus an intercept column.
pub struct MlrPredictor<'a> {
    pub model: &'a MlrModel,
}

impl Predictor for MlrPredictor<'_> {
    fn predict_batch(&self, inputs: &Array3<f64>) -> Result<Array2<f64>> {
        let (n, c, w) = inputs.dim();
        let mut x = Array2::ones((n, c * w + 1));
        for i in 0..n {
            let mut col = 0;
            for ci in 0..c {
                for wi in 0..w {
                    x[[i, col]] = inputs[[i, ci, wi]];
                    col += 1;
                }
            }
        }
        mlr_predict(self.model, &x)
    }
}

const AXES: [&str; 3] = ["x", "y", "z"];

/// One PCC per axis over all test samples concatenated.
pub fn evaluate_model(predictor: &dyn Predictor, test: &WindowedDataset) -> Result<[f64; 3]> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let pred = predictor.predict_batch(&test.inputs)?;
    let mut out = [0.0; 3];
    for a in 0..3 {
        let p: Vec<f64> = pred.column(a).to_vec();
        let t: Vec<f64> = test.targets.column(a).to_vec();
        out[a] = pcc(&t, &p).map_err(|e| {
            Error::InvalidArgument(format!("axis {}: {e}", AXES[a]))
        })?;
    }
    Ok(out)
}

/// Alternative aggregation: mean of per-trial PCCs per axis (sensitivity
/// check; the default concatenates).
pub fn evaluate_model_per_trial_mean(
    predictor: &dyn Predictor,
    test: &WindowedDataset,
) -> Result<[f64; 3]> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let pred = predictor.predict_batch(&test.inputs)?;
    let mut trials: Vec<usize> = test.trial_index.clone();
    trials.dedup();
    let mut out = [0.0; 3];
    for a in 0..3 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &trial in &trials {
            let rows: Vec<usize> = test
                .trial_index
                .iter()
                .enumerate()
                .filter(|(_, t)| **t == trial)
                .map(|(i, _)| i)
                .collect();
            let p: Vec<f64> = rows.iter().map(|&i| pred[[i, a]]).collect();
            let t: Vec<f64> = rows.iter().map(|&i| test.targets[[i, a]]).collect();
            sum += pcc(&t, &p).map_err(|e| {
                Error::InvalidArgument(format!("axis {} trial {trial}: {e}", AXES[a]))
            })?;
            count += 1;
        }
        out[a] = sum / count as f64;
    }
    Ok(out)
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, m: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, 0.5 * (a + m), m);
        let right = simpson(f, m, 0.5 * (m + b), b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1) + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    recurse(f, a, b, simpson(f, a, m, b), tol, 40)
}

/// Upper-tail probability `P(T >= t)` for Student's t with `df` degrees of
/// freedom, to about 1e-10 absolute error.
pub fn student_t_sf(t: f64, df: usize) -> f64 {
    assert!(df >= 1, "degrees of freedom must be at least 1");
    let nu = df as f64;
    let power = nu - 1.0;
    let g = move |theta: f64| theta.cos().powf(power);
    let half = std::f64::consts::FRAC_PI_2;
    let theta_t = (t / nu.sqrt()).atan();
    let z = adaptive_simpson(&g, -half, half, 1e-12);
    let tail = adaptive_simpson(&g, theta_t, half, 1e-12);
    (tail / z).clamp(0.0, 1.0)
}

/// One-tailed paired t-test with alternative `mean(a) > mean(b)`.
///
/// Returns `(t, p)` where `t = mean(d) / (sd(d) / sqrt(n))`, `d = a - b`,
/// `df = n - 1`, and `p = P(T >= t)`.
pub fn paired_t_test_one_tailed(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    if sd <= 0.0 {
        return Err(Error::ZeroVariance { index: 0 });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok((t, student_t_sf(t, n - 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy_series(seed: u64, n: usize) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn pcc_identity_and_negation() {
        let x = noisy_series(1, 500);
        assert!((pcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pcc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcc_matches_direct_formula_oracle() {
        let x = noisy_series(2, 1000);
        let y: Vec<f64> = x
            .iter()
            .zip(noisy_series(3, 1000))
            .map(|(a, b)| 0.7 * a + 0.3 * b)
            .collect();
        let ours = pcc(&x, &y).unwrap();
        // Direct covariance / (sigma_x * sigma_y) with its own summations.
        let n = 1000f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
        let vx = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / (n - 1.0);
        let vy = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / (n - 1.0);
        let oracle = cov / (vx.sqrt() * vy.sqrt());
        assert!((ours - oracle).abs() < 1e-12);
    }

    #[test]
    fn pcc_affine_invariance() {
        let x = noisy_series(4, 800);
        let y = noisy_series(5, 800);
        let base = pcc(&x, &y).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| 3.0 * v + 11.0).collect();
        assert!((pcc(&shifted, &y).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = x.iter().map(|v| -2.0 * v + 1.0).collect();
        assert!((pcc(&flipped, &y).unwrap() + base).abs() < 1e-12);
    }

    #[test]
    fn pcc_constant_series_is_an_error() {
        let x = vec![1.0; 10];
        let y = noisy_series(6, 10);
        assert!(pcc(&x, &y).is_err());
        assert!(pcc(&y, &x).is_err());
    }

    #[test]
    fn t_tail_reference_value() {
        // Classic critical value: P(T >= 1.796) with 11 dof is 0.050.
        let p = student_t_sf(1.796, 11);
        assert!((p - 0.050).abs() <= 0.001, "p = {p}");
        // And a cross-check against the symmetric point.
        assert!((student_t_sf(0.0, 11) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn t_test_null_case_and_antisymmetry() {
        let a = noisy_series(7, 12);
        let b: Vec<f64> = noisy_series(8, 12);
        let (t_ab, p_ab) = paired_t_test_one_tailed(&a, &b).unwrap();
        let (t_ba, p_ba) = paired_t_test_one_tailed(&b, &a).unwrap();
        assert_eq!(t_ab, -t_ba);
        assert!((p_ab + p_ba - 1.0).abs() < 1e-9);
    }

    #[test]
    fn t_test_extreme_shift() {
        // A constant shift alone makes sd(d) = 0 (an error); add a little
        // spread so the test statistic is finite and enormous.
        let base = noisy_series(9, 12);
        let spread = noisy_series(10, 12);
        let shifted: Vec<f64> = base
            .iter()
            .zip(&spread)
            .map(|(v, s)| v + 10.0 + 0.01 * s)
            .collect();
        let (_, p) = paired_t_test_one_tailed(&shifted, &base).unwrap();
        assert!(p < 1e-6, "p = {p}");
    }

    #[test]
    fn t_test_zero_variance_rejected() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![0.0, 1.0, 2.0]; // d identically 1
        assert!(paired_t_test_one_tailed(&a, &b).is_err());
    }
}
