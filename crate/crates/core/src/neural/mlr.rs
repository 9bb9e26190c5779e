//! Multiple linear regression baseline: minimum-norm least squares through
//! the pseudoinverse of the Gram matrix (valid for any rank, since
//! `pinv(X) = pinv(X^T X) X^T`), solved with a symmetric eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Fitted linear decoder: `Y ~ X * coef` where `X` already carries the
/// intercept column.
#[derive(Debug, Clone)]
pub struct MlrModel {
    /// features x outputs.
    pub coef: Array2<f64>,
}

/// Fit the minimum-norm least-squares solution of `X B = Y`.
///
/// `x` is `N x D` (windows flattened, intercept column included) and `y`
/// is `N x 3`. Rank deficiency is handled by zeroing eigenvalues below
/// `max_eig * D * 1e-12` in the Gram pseudoinverse.
pub fn mlr_fit(x: &Array2<f64>, y: &Array2<f64>) -> Result<MlrModel> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "{} design rows but {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.is_empty() || y.is_empty() {
        return Err(Error::Shape("empty design or target matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mLR inputs".into()));
    }
    let (n, d) = (x.nrows(), x.ncols());
    let k = y.ncols();

    // Gram = X^T X and moment = X^T Y, accumulated row by row.
    let mut gram = vec![0.0; d * d];
    let mut moment = vec![0.0; d * k];
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).to_vec();
        let yi: Vec<f64> = y.row(i).to_vec();
        for a in 0..d {
            let va = xi[a];
            if va == 0.0 {
                continue;
            }
            let row = &mut gram[a * d..a * d + d];
            for (g, xb) in row.iter_mut().zip(&xi) {
                *g += va * xb;
            }
            for (m, yb) in moment[a * k..a * k + k].iter_mut().zip(&yi) {
                *m += va * yb;
            }
        }
    }
    let gram = DMatrix::from_row_slice(d, d, &gram);
    let moment = DMatrix::from_row_slice(d, k, &moment);

    let eig = SymmetricEigen::new(gram);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !(max_eig > 0.0) {
        return Err(Error::Singular {
            context: "mLR Gram matrix has no positive eigenvalues".into(),
        });
    }
    let tol = max_eig * d as f64 * 1e-12;
    // B = V diag(1/eig) V^T (X^T Y), dropping the null space.
    let vt_m = eig.eigenvectors.transpose() * &moment;
    let mut scaled = vt_m;
    for (r, ev) in eig.eigenvalues.iter().enumerate() {
        let inv = if *ev > tol { 1.0 / ev } else { 0.0 };
        for c in 0..k {
            scaled[(r, c)] *= inv;
        }
    }
    let b = eig.eigenvectors * scaled;
    let coef = Array2::from_shape_fn((d, k), |(i, j)| b[(i, j)]);
    Ok(MlrModel { coef })
}

/// Persist the coefficients (64-bit, reloads bit-exactly).
pub fn save_mlr(stem: impl AsRef<std::path::Path>, model: &MlrModel) -> Result<()> {
    use crate::container::{save_matrix_f64, MatrixMeta, Role};
    save_matrix_f64(stem, &model.coef, &MatrixMeta::new(0, 0, Role::Model))
}

pub fn load_mlr(stem: impl AsRef<std::path::Path>) -> Result<MlrModel> {
    use crate::container::load_matrix_f64;
    let (coef, _) = load_matrix_f64(stem)?;
    Ok(MlrModel { coef })
}

/// Predict targets for a design matrix shaped like the one used in
/// [`mlr_fit`] (intercept column included).
pub fn mlr_predict(model: &MlrModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.coef.nrows() {
        return Err(Error::Shape(format!(
            "design has {} columns but the model expects {}",
            x.ncols(),
            model.coef.nrows()
        )));
    }
    Ok(x.dot(&model.coef))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn with_intercept(f: &Array2<f64>) -> Array2<f64> {
        let (n, d) = f.dim();
        let mut x = Array2::ones((n, d + 1));
        x.slice_mut(ndarray::s![.., ..d]).assign(f);
        x
    }

    #[test]
    fn recovers_noiseless_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = Array2::from_shape_fn((200, 12), |_| rng.gen_range(-1.0..1.0));
        let b_true = Array2::from_shape_fn((12, 3), |_| rng.gen_range(-2.0..2.0));
        let c_true = [0.5, -1.0, 2.0];
        let mut y = feats.dot(&b_true);
        for mut row in y.rows_mut() {
            for (a, c) in row.iter_mut().zip(&c_true) {
                *a += c;
            }
        }
        let x = with_intercept(&feats);
        let model = mlr_fit(&x, &y).unwrap();
        for i in 0..12 {
            for j in 0..3 {
                assert!((model.coef[[i, j]] - b_true[[i, j]]).abs() < 1e-6);
            }
        }
        for j in 0..3 {
            assert!((model.coef[[12, j]] - c_true[j]).abs() < 1e-6);
        }
        let resid = &mlr_predict(&model, &x).unwrap() - &y;
        assert!(resid.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn constant_targets_go_to_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Array2::from_shape_fn((80, 6), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((80, 3), |(_, j)| [1.5, -2.0, 0.25][j]);
        let x = with_intercept(&feats);
        let model = mlr_fit(&x, &y).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                assert!(model.coef[[i, j]].abs() < 1e-9, "weight [{i},{j}] = {}", model.coef[[i, j]]);
            }
        }
        for j in 0..3 {
            assert!((model.coef[[6, j]] - y[[0, j]]).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_explicit_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((200, 50), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((200, 3), |_| rng.gen_range(-1.0..1.0));
        let model = mlr_fit(&x, &y).unwrap();
        // Oracle: SVD pseudoinverse of X itself, an independent route.
        let xna = DMatrix::from_row_iterator(200, 50, x.iter().cloned());
        let yna = DMatrix::from_row_iterator(200, 3, y.iter().cloned());
        let pinv = xna.svd(true, true).pseudo_inverse(1e-12).unwrap();
        let b = pinv * yna;
        for i in 0..50 {
            for j in 0..3 {
                assert!(
                    (model.coef[[i, j]] - b[(i, j)]).abs() < 1e-8,
                    "[{i},{j}]: {} vs {}",
                    model.coef[[i, j]],
                    b[(i, j)]
                );
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut x = Array2::ones((4, 2));
        x[[1, 1]] = f64::NAN;
        let y = Array2::zeros((4, 3));
        assert!(mlr_fit(&x, &y).is_err());
    }
}
