//! Inverse solution: regularized minimum-norm operator, sLORETA
//! standardization by the resolution-matrix diagonal, projection of sensor
//! data into source space, and reduction of sources to ROI means.
//!
//! Sources are scalar (fixed orientation); free-orientation dipoles are out
//! of scope. The regularized Gram matrix is factorized once per lead field
//! (Cholesky), never inverted explicitly.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::LeadField;

/// Noise covariance model for the regularizer.
#[derive(Debug, Clone)]
pub enum NoiseCov {
    Identity,
    Diagonal(Vec<f64>),
    Full(Array2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCovKind {
    Identity,
    Diagonal,
    Full,
}

/// Standardized inverse operator.
///
/// `w_std` rows are the minimum-norm rows divided by the square root of the
/// corresponding resolution-matrix diagonal entry.
#[derive(Debug, Clone)]
pub struct InverseOperator {
    /// sources x channels, standardized.
    pub w_std: Array2<f64>,
    /// sources x channels, plain minimum-norm (kept for diagnostics).
    pub w_mn: Array2<f64>,
    pub lambda2: f64,
    pub snr: f64,
    pub noise_cov_kind: NoiseCovKind,
    pub resolution_diag: Vec<f64>,
    pub channel_names: Vec<String>,
    /// Sources whose resolution diagonal fell below `1e-12 * max`; they are
    /// excluded from fused ROI operators to avoid amplifying dead rows.
    pub low_resolution: Vec<usize>,
}

/// Time series of ROI-averaged source activity.
#[derive(Debug, Clone)]
pub struct RoiSeries {
    /// rois x samples.
    pub data: Array2<f64>,
    pub roi_names: Vec<String>,
    pub fs: f64,
}

impl RoiSeries {
    pub fn validate(&self) -> Result<()> {
        if self.data.nrows() != self.roi_names.len() {
            return Err(Error::Shape("ROI series rows must match names".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ROI series".into()));
        }
        Ok(())
    }
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.nrows(), m.ncols(), m.iter().cloned())
}

/// Build the sLORETA-standardized inverse operator.
///
/// The regularization scale follows the usual source-imaging rule
/// `lambda2 = (trace(A A^T) / I) / snr^2`.
pub fn compute_inverse_operator(
    lf: &LeadField,
    noise_cov: &NoiseCov,
    snr: f64,
) -> Result<InverseOperator> {
    lf.validate()?;
    if !(snr > 0.0) {
        return Err(Error::InvalidArgument("snr must be positive".into()));
    }
    let (i, k) = (lf.n_channels(), lf.n_sources());
    let a = &lf.gain;
    let trace: f64 = a.iter().map(|v| v * v).sum();
    let lambda2 = (trace / i as f64) / (snr * snr);

    // M = A A^T + lambda2 * C
    let mut m = a.dot(&a.t());
    let kind = match noise_cov {
        NoiseCov::Identity => {
            for d in 0..i {
                m[[d, d]] += lambda2;
            }
            NoiseCovKind::Identity
        }
        NoiseCov::Diagonal(diag) => {
            if diag.len() != i {
                return Err(Error::Shape(format!("diagonal noise cov needs {i} entries")));
            }
            if diag.iter().any(|v| *v <= 0.0) {
                return Err(Error::InvalidArgument("diagonal noise cov must be positive".into()));
            }
            for d in 0..i {
                m[[d, d]] += lambda2 * diag[d];
            }
            NoiseCovKind::Diagonal
        }
        NoiseCov::Full(c) => {
            if c.nrows() != i || c.ncols() != i {
                return Err(Error::Shape(format!("full noise cov must be {i}x{i}")));
            }
            let asym = c
                .iter()
                .zip(c.t().iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if asym > 1e-9 {
                return Err(Error::InvalidArgument("noise covariance must be symmetric".into()));
            }
            m = m + &(c * lambda2);
            NoiseCovKind::Full
        }
    };

    let m_na = to_na(&m);
    let chol = m_na.cholesky().ok_or(Error::Singular {
        context: "regularized sensor Gram matrix".into(),
    })?;
    let a_na = to_na(a);
    // X = M^{-1} A, so W_mn = X^T.
    let x = chol.solve(&a_na);

    let mut w_mn = Array2::<f64>::zeros((k, i));
    for j in 0..k {
        for c in 0..i {
            w_mn[[j, c]] = x[(c, j)];
        }
    }

    // Resolution diagonal: (W_mn A)_jj.
    let mut resolution_diag = vec![0.0; k];
    for j in 0..k {
        let mut r = 0.0;
        for c in 0..i {
            r += x[(c, j)] * a[[c, j]];
        }
        if r <= 0.0 {
            return Err(Error::BadResolution { index: j });
        }
        resolution_diag[j] = r;
    }
    let max_r = resolution_diag.iter().cloned().fold(0.0f64, f64::max);
    let mut low_resolution = Vec::new();
    for (j, &r) in resolution_diag.iter().enumerate() {
        if r < 1e-12 * max_r {
            low_resolution.push(j);
        }
    }
    if !low_resolution.is_empty() {
        log::warn!(
            "{} sources have a near-zero resolution diagonal and will be \
             excluded from fused ROI operators",
            low_resolution.len()
        );
    }

    let mut w_std = w_mn.clone();
    for (j, mut row) in w_std.rows_mut().into_iter().enumerate() {
        let scale = 1.0 / resolution_diag[j].sqrt();
        row.mapv_inplace(|v| v * scale);
    }

    Ok(InverseOperator {
        w_std,
        w_mn,
        lambda2,
        snr,
        noise_cov_kind: kind,
        resolution_diag,
        channel_names: lf.channel_names.clone(),
        low_resolution,
    })
}

/// Project sensor data into source space: `s = W_std * e`.
///
/// Channel identity is checked by name and order, not just by count.
pub fn apply_inverse(
    op: &InverseOperator,
    eeg: &Array2<f64>,
    channel_names: &[String],
) -> Result<Array2<f64>> {
    if channel_names.len() != op.channel_names.len() {
        return Err(Error::ChannelMismatch(format!(
            "operator expects {} channels, got {}",
            op.channel_names.len(),
            channel_names.len()
        )));
    }
    for (i, (a, b)) in op.channel_names.iter().zip(channel_names).enumerate() {
        if a != b {
            return Err(Error::ChannelMismatch(format!(
                "channel {i} is '{b}' but the operator was built for '{a}'"
            )));
        }
    }
    if eeg.nrows() != op.channel_names.len() {
        return Err(Error::Shape(format!(
            "EEG has {} rows but operator expects {}",
            eeg.nrows(),
            op.channel_names.len()
        )));
    }
    Ok(op.w_std.dot(eeg))
}

/// Mean source activity per selected ROI, rows ordered as `selected`.
pub fn roi_reduce(
    s: &Array2<f64>,
    lf: &LeadField,
    selected: &[String],
    fs: f64,
) -> Result<RoiSeries> {
    if s.nrows() != lf.n_sources() {
        return Err(Error::Shape(format!(
            "source matrix has {} rows but lead field has {} sources",
            s.nrows(),
            lf.n_sources()
        )));
    }
    let mut data = Array2::<f64>::zeros((selected.len(), s.ncols()));
    for (r, name) in selected.iter().enumerate() {
        let members = lf.roi_members(name)?;
        let scale = 1.0 / members.len() as f64;
        for &j in &members {
            for t in 0..s.ncols() {
                data[[r, t]] += s[[j, t]];
            }
        }
        data.row_mut(r).mapv_inplace(|v| v * scale);
    }
    let series = RoiSeries {
        data,
        roi_names: selected.to_vec(),
        fs,
    };
    series.validate()?;
    Ok(series)
}

/// Precomposed ROI inverse: one rois x channels matrix that maps sensor data
/// straight to ROI means. Mathematically identical to `apply_inverse`
/// followed by [`roi_reduce`]; this is the fast path for long recordings.
#[derive(Debug, Clone)]
pub struct RoiInverse {
    /// rois x channels.
    pub matrix: Array2<f64>,
    pub roi_names: Vec<String>,
    pub channel_names: Vec<String>,
}

/// Fuse the standardized operator with ROI averaging.
///
/// Sources flagged `low_resolution` at operator construction are excluded
/// from ROI membership; an ROI left empty by the exclusion is an error.
pub fn fuse_roi_inverse(
    op: &InverseOperator,
    lf: &LeadField,
    selected: &[String],
) -> Result<RoiInverse> {
    if op.w_std.nrows() != lf.n_sources() {
        return Err(Error::Shape("operator and lead field disagree on source count".into()));
    }
    let i = op.w_std.ncols();
    let mut matrix = Array2::<f64>::zeros((selected.len(), i));
    for (r, name) in selected.iter().enumerate() {
        let members: Vec<usize> = lf
            .roi_members(name)?
            .into_iter()
            .filter(|j| !op.low_resolution.contains(j))
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyRoi(name.clone()));
        }
        let scale = 1.0 / members.len() as f64;
        for &j in &members {
            for c in 0..i {
                matrix[[r, c]] += op.w_std[[j, c]];
            }
        }
        matrix.row_mut(r).mapv_inplace(|v| v * scale);
    }
    Ok(RoiInverse {
        matrix,
        roi_names: selected.to_vec(),
        channel_names: op.channel_names.clone(),
    })
}

impl RoiInverse {
    pub fn apply(&self, eeg: &Array2<f64>, channel_names: &[String], fs: f64) -> Result<RoiSeries> {
        for (i, (a, b)) in self.channel_names.iter().zip(channel_names).enumerate() {
            if a != b {
                return Err(Error::ChannelMismatch(format!(
                    "channel {i} is '{b}' but the ROI operator was built for '{a}'"
                )));
            }
        }
        if eeg.nrows() != self.channel_names.len() {
            return Err(Error::Shape(format!(
                "EEG has {} rows but the ROI operator expects {}",
                eeg.nrows(),
                self.channel_names.len()
            )));
        }
        let series = RoiSeries {
            data: self.matrix.dot(eeg),
            roi_names: self.roi_names.clone(),
            fs,
        };
        series.validate()?;
        Ok(series)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_leadfield, SynthConfig};
    use ndarray::array;
    use std::collections::BTreeMap;

    fn identity_leadfield(n: usize) -> LeadField {
        let mut atlas_names = BTreeMap::new();
        atlas_names.insert(0, "all".to_string());
        LeadField {
            gain: Array2::eye(n),
            channel_names: (0..n).map(|i| format!("CH{i}")).collect(),
            source_positions: Array2::zeros((n, 3)),
            atlas_label: vec![0; n],
            atlas_names,
        }
    }

    #[test]
    fn identity_leadfield_gives_identity_operator() {
        let lf = identity_leadfield(4);
        // snr = 1e6 makes lambda2 = trace/(I*snr^2) = 1e-12 here.
        let op = compute_inverse_operator(&lf, &NoiseCov::Identity, 1e6).unwrap();
        assert!((op.lambda2 - 1e-12).abs() < 1e-18);
        for j in 0..4 {
            for c in 0..4 {
                let expected = if j == c { 1.0 } else { 0.0 };
                assert!(
                    (op.w_std[[j, c]] - expected).abs() < 1e-5,
                    "w_std[{j},{c}] = {}",
                    op.w_std[[j, c]]
                );
            }
        }
    }

    #[test]
    fn lambda2_follows_snr_rule() {
        let cfg = SynthConfig {
            n_channels: 8,
            n_sources: 40,
            ..Default::default()
        };
        let lf = generate_leadfield(2, &cfg).unwrap();
        let op = compute_inverse_operator(&lf, &NoiseCov::Identity, 3.0).unwrap();
        let trace: f64 = lf.gain.iter().map(|v| v * v).sum();
        assert_eq!(op.lambda2, (trace / 8.0) / 9.0);
    }

    #[test]
    fn noiseless_point_sources_localize_exactly() {
        let cfg = SynthConfig {
            n_channels: 32,
            n_sources: 200,
            ..Default::default()
        };
        for seed in 0..5u64 {
            let lf = generate_leadfield(seed, &cfg).unwrap();
            let op = compute_inverse_operator(&lf, &NoiseCov::Identity, 1e6).unwrap();
            for probe in 0..4usize {
                let k = (probe * 53 + seed as usize * 17) % 200;
                let e = lf.gain.column(k).to_owned().insert_axis(ndarray::Axis(1));
                let s = apply_inverse(&op, &e, &lf.channel_names).unwrap();
                let mut best = 0;
                for j in 0..200 {
                    if s[[j, 0]].abs() > s[[best, 0]].abs() {
                        best = j;
                    }
                }
                assert_eq!(best, k, "seed {seed}: source {k} localized to {best}");
            }
        }
    }

    #[test]
    fn apply_inverse_linearity_and_shapes() {
        let cfg = SynthConfig {
            n_channels: 8,
            n_sources: 30,
            ..Default::default()
        };
        let lf = generate_leadfield(9, &cfg).unwrap();
        let op = compute_inverse_operator(&lf, &NoiseCov::Identity, 3.0).unwrap();

        let zero = Array2::zeros((8, 5));
        let s = apply_inverse(&op, &zero, &lf.channel_names).unwrap();
        assert_eq!(s.dim(), (30, 5));
        assert!(s.iter().all(|v| *v == 0.0));

        let e1 = Array2::from_shape_fn((8, 5), |(i, j)| (i * 5 + j) as f64 * 0.3 - 1.0);
        let e2 = Array2::from_shape_fn((8, 5), |(i, j)| ((i + 2) * (j + 1)) as f64 * 0.1);
        let lhs = apply_inverse(&op, &(&e1 + &e2), &lf.channel_names).unwrap();
        let rhs = apply_inverse(&op, &e1, &lf.channel_names).unwrap()
            + apply_inverse(&op, &e2, &lf.channel_names).unwrap();
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-9);
        }

        let wrong: Vec<String> = (0..8).map(|i| format!("X{i}")).collect();
        assert!(matches!(
            apply_inverse(&op, &zero, &wrong),
            Err(Error::ChannelMismatch(_))
        ));
    }

    #[test]
    fn roi_reduce_means_and_order() {
        let mut atlas_names = BTreeMap::new();
        atlas_names.insert(0, "a".to_string());
        atlas_names.insert(1, "b".to_string());
        let lf = LeadField {
            gain: Array2::eye(3),
            channel_names: vec!["c0".into(), "c1".into(), "c2".into()],
            source_positions: Array2::zeros((3, 3)),
            atlas_label: vec![0, 0, 1],
            atlas_names,
        };
        let s = array![[1.0, 1.0], [3.0, 3.0], [5.0, 5.0]];
        let out = roi_reduce(&s, &lf, &["a".into(), "b".into()], 100.0).unwrap();
        assert_eq!(out.data, array![[2.0, 2.0], [5.0, 5.0]]);
        // Reversed selection reverses the rows.
        let rev = roi_reduce(&s, &lf, &["b".into(), "a".into()], 100.0).unwrap();
        assert_eq!(rev.data, array![[5.0, 5.0], [2.0, 2.0]]);
        assert!(matches!(
            roi_reduce(&s, &lf, &["zz".into()], 100.0),
            Err(Error::UnknownRoi(_))
        ));
    }

    #[test]
    fn fused_operator_matches_two_step_path() {
        let cfg = SynthConfig {
            n_channels: 12,
            n_sources: 60,
            n_rois: 5,
            ..Default::default()
        };
        let lf = generate_leadfield(4, &cfg).unwrap();
        let op = compute_inverse_operator(&lf, &NoiseCov::Identity, 3.0).unwrap();
        let rois: Vec<String> = (1..=5).map(|r| format!("ROI_{r:02}")).collect();
        let fused = fuse_roi_inverse(&op, &lf, &rois).unwrap();
        let e = Array2::from_shape_fn((12, 40), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let direct = fused.apply(&e, &lf.channel_names, 100.0).unwrap();
        let s = apply_inverse(&op, &e, &lf.channel_names).unwrap();
        let two_step = roi_reduce(&s, &lf, &rois, 100.0).unwrap();
        for (a, b) in direct.data.iter().zip(two_step.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stronger_regularization_shrinks_the_operator() {
        let cfg = SynthConfig {
            n_channels: 10,
            n_sources: 50,
            ..Default::default()
        };
        let lf = generate_leadfield(6, &cfg).unwrap();
        let mut previous = f64::INFINITY;
        // Decreasing snr means increasing lambda2.
        for snr in [10.0, 5.0, 2.0, 1.0, 0.5] {
            let op = compute_inverse_operator(&lf, &NoiseCov::Identity, snr).unwrap();
            let frob: f64 = op.w_mn.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(frob < previous, "snr {snr}: {frob} !< {previous}");
            previous = frob;
        }
    }

    #[test]
    fn scaling_input_scales_output() {
        let cfg = SynthConfig {
            n_channels: 8,
            n_sources: 30,
            ..Default::default()
        };
        let lf = generate_leadfield(13, &cfg).unwrap();
        let op = compute_inverse_operator(&lf, &NoiseCov::Identity, 3.0).unwrap();
        let e = Array2::from_shape_fn((8, 6), |(i, j)| (i as f64 - j as f64) * 0.7);
        let s1 = apply_inverse(&op, &e, &lf.channel_names).unwrap();
        let s2 = apply_inverse(&op, &e.mapv(|v| v * -2.5), &lf.channel_names).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!((a * -2.5 - b).abs() < 1e-9);
        }
    }
}
