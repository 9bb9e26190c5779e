//! Signal conditioning: windowed-sinc FIR design, forward-backward
//! zero-phase filtering, common average referencing, component rejection
//! given precomputed unmixing/mixing matrices, decimation, and the two
//! normalizations (per-axis min-max for kinematics, per-channel z-score
//! for EEG and source series).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::session::NormStats;

/// Default cap on designed filter length.
pub const MAX_TAPS: usize = 20001;

/// Linear-phase FIR filter produced by the windowed-sinc designers.
#[derive(Debug, Clone)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub fs: f64,
    /// (f_lo, f_hi); f_lo = 0 for a low-pass design.
    pub band: (f64, f64),
    pub transition_bw: f64,
}

impl FirFilter {
    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    /// Single-pass magnitude response at frequency `f` (Hz).
    pub fn magnitude_at(&self, f: f64) -> f64 {
        let mut re = 0.0;
        let mut im = 0.0;
        let w = 2.0 * std::f64::consts::PI * f / self.fs;
        for (n, &t) in self.taps.iter().enumerate() {
            let phase = w * n as f64;
            re += t * phase.cos();
            im -= t * phase.sin();
        }
        (re * re + im * im).sqrt()
    }
}

/// Tap count from the Hamming design rule: `ceil(3.3 * fs / transition_bw)`,
/// rounded up to odd.
fn hamming_tap_count(fs: f64, transition_bw: f64) -> Result<usize> {
    if transition_bw <= 0.0 {
        return Err(Error::FilterDesign("transition bandwidth must be positive".into()));
    }
    let mut n = (3.3 * fs / transition_bw).ceil() as usize;
    if n % 2 == 0 {
        n += 1;
    }
    if n > MAX_TAPS {
        return Err(Error::FilterDesign(format!(
            "design needs {n} taps, above the {MAX_TAPS} cap; widen the transition band"
        )));
    }
    Ok(n)
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
}

/// Windowed sinc low-pass kernel, mirror-built so `k[n] == k[N-1-n]`
/// exactly, with the DC gain normalized to 1.
fn windowed_sinc_lowpass(cutoff: f64, fs: f64, n: usize) -> Vec<f64> {
    let center = (n - 1) / 2;
    let w_c = 2.0 * std::f64::consts::PI * cutoff / fs;
    let mut k = vec![0.0; n];
    for i in 0..=center {
        let x = i as f64 - center as f64;
        let ideal = if x == 0.0 {
            w_c / std::f64::consts::PI
        } else {
            (w_c * x).sin() / (std::f64::consts::PI * x)
        };
        let v = ideal * hamming(i, n);
        k[i] = v;
        k[n - 1 - i] = v;
    }
    let dc: f64 = k.iter().sum();
    for v in &mut k {
        *v /= dc;
    }
    k
}

/// Windowed-sinc band-pass with unit gain at the band center.
///
/// Built as the difference of two DC-normalized low-pass kernels. The
/// normalization matters: when the transition band is wider than the low
/// edge (0.1 Hz edge, 2 Hz transition), a raw sinc difference leaves most
/// of the DC response in place, so the subtracted kernel must pass DC with
/// exactly unit gain for constants to be rejected.
pub fn design_fir_bandpass(f_lo: f64, f_hi: f64, fs: f64, transition_bw: f64) -> Result<FirFilter> {
    if !(0.0 < f_lo && f_lo < f_hi && f_hi < fs / 2.0) {
        return Err(Error::FilterDesign(format!(
            "band edges must satisfy 0 < {f_lo} < {f_hi} < {}",
            fs / 2.0
        )));
    }
    let n = hamming_tap_count(fs, transition_bw)?;
    let hi = windowed_sinc_lowpass(f_hi, fs, n);
    let lo = windowed_sinc_lowpass(f_lo, fs, n);
    let taps: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
    let mut filter = FirFilter {
        taps,
        fs,
        band: (f_lo, f_hi),
        transition_bw,
    };
    let center_gain = filter.magnitude_at((f_lo + f_hi) / 2.0);
    if center_gain <= 0.0 {
        return Err(Error::FilterDesign("degenerate design: zero gain at band center".into()));
    }
    for t in &mut filter.taps {
        *t /= center_gain;
    }
    Ok(filter)
}

/// Windowed-sinc low-pass with unit DC gain.
pub fn design_fir_lowpass(cutoff: f64, fs: f64, transition_bw: f64) -> Result<FirFilter> {
    if !(0.0 < cutoff && cutoff < fs / 2.0) {
        return Err(Error::FilterDesign(format!(
            "cutoff must satisfy 0 < {cutoff} < {}",
            fs / 2.0
        )));
    }
    let n = hamming_tap_count(fs, transition_bw)?;
    Ok(FirFilter {
        taps: windowed_sinc_lowpass(cutoff, fs, n),
        fs,
        band: (0.0, cutoff),
        transition_bw,
    })
}

/// Causal FIR pass: `out[n] = sum_k h[k] * x[n-k]`.
fn fir_pass(h: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (k, &c) in h.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let limit = x.len() - k;
        for j in 0..limit {
            out[j + k] += c * x[j];
        }
    }
    out
}

/// Zero-phase filtering: reflection-pad by `N-1` on both ends, run the
/// filter forward, reverse, run it forward again, reverse, then drop the
/// padding. The effective magnitude response is the squared single-pass
/// response and the output has the input's length.
pub fn filtfilt(filter: &FirFilter, x: &[f64]) -> Result<Vec<f64>> {
    let n = filter.num_taps();
    let pad = n - 1;
    if x.len() <= n {
        return Err(Error::SignalTooShort { len: x.len(), min: n });
    }
    let len = x.len();
    let mut padded = Vec::with_capacity(len + 2 * pad);
    // Reflect interior samples around the endpoints (no edge duplication).
    for i in (1..=pad).rev() {
        padded.push(x[i]);
    }
    padded.extend_from_slice(x);
    for i in (len - pad - 1..len - 1).rev() {
        padded.push(x[i]);
    }

    let mut y = fir_pass(&filter.taps, &padded);
    y.reverse();
    let mut y = fir_pass(&filter.taps, &y);
    y.reverse();

    Ok(y[pad..pad + len].to_vec())
}

/// Apply [`filtfilt`] to every row of a matrix.
pub fn filtfilt_rows(filter: &FirFilter, x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let v: Vec<f64> = row.to_vec();
        let filtered = filtfilt(filter, &v)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&filtered));
    }
    Ok(out)
}

/// Subtract the instantaneous mean across channels from every sample.
pub fn common_average_reference(eeg: &Array2<f64>) -> Result<Array2<f64>> {
    let c = eeg.nrows();
    if c < 2 {
        return Err(Error::Shape("CAR needs at least 2 channels".into()));
    }
    let mut out = eeg.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / c as f64;
        col.mapv_inplace(|v| v - mean);
    }
    Ok(out)
}

/// Zero the listed components in `unmixing * eeg` and reconstruct with
/// `mixing`. The matrices must be inverses of each other to 1e-6.
pub fn reject_components(
    eeg: &Array2<f64>,
    unmixing: &Array2<f64>,
    mixing: &Array2<f64>,
    reject: &[usize],
) -> Result<Array2<f64>> {
    let c = eeg.nrows();
    if unmixing.nrows() != c || unmixing.ncols() != c || mixing.nrows() != c || mixing.ncols() != c {
        return Err(Error::Shape(format!("unmixing/mixing must be {c}x{c}")));
    }
    let product = mixing.dot(unmixing);
    for i in 0..c {
        for j in 0..c {
            let expected = if i == j { 1.0 } else { 0.0 };
            if (product[[i, j]] - expected).abs() > 1e-6 {
                return Err(Error::Singular {
                    context: format!(
                        "mixing*unmixing deviates from identity at ({i},{j}) by {:.2e}",
                        (product[[i, j]] - expected).abs()
                    ),
                });
            }
        }
    }
    for &idx in reject {
        if idx >= c {
            return Err(Error::InvalidArgument(format!(
                "component index {idx} out of range for {c} channels"
            )));
        }
    }
    let mut sources = unmixing.dot(eeg);
    for &idx in reject {
        sources.row_mut(idx).fill(0.0);
    }
    Ok(mixing.dot(&sources))
}

/// Keep every `factor`-th sample: `out[k] = x[k*factor]`.
pub fn decimate(x: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("decimation factor must be positive".into()));
    }
    Ok(x.iter().step_by(factor).copied().collect())
}

/// Decimate every row of a matrix.
pub fn decimate_rows(x: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("decimation factor must be positive".into()));
    }
    let cols = if x.ncols() == 0 { 0 } else { (x.ncols() - 1) / factor + 1 };
    let mut out = Array2::zeros((x.nrows(), cols));
    for (i, row) in x.rows().into_iter().enumerate() {
        for (k, j) in (0..x.ncols()).step_by(factor).enumerate() {
            out[[i, k]] = row[j];
        }
    }
    Ok(out)
}

/// Zero-phase 2 Hz low-pass applied to each kinematic axis.
pub fn lowpass_kinematics(kin: &Array2<f64>, fs: f64) -> Result<Array2<f64>> {
    lowpass_kinematics_with(kin, fs, 2.0, 1.0)
}

pub fn lowpass_kinematics_with(
    kin: &Array2<f64>,
    fs: f64,
    cutoff: f64,
    transition_bw: f64,
) -> Result<Array2<f64>> {
    if fs <= 2.0 * cutoff {
        return Err(Error::InvalidArgument(format!(
            "sampling rate {fs} too low for a {cutoff} Hz low-pass"
        )));
    }
    let filter = design_fir_lowpass(cutoff, fs, transition_bw)?;
    filtfilt_rows(&filter, kin)
}

/// Per-axis min-max scaling onto [0, 1]. Returns the statistics needed to
/// invert the transform.
pub fn minmax_normalize(kin: &Array2<f64>) -> Result<(Array2<f64>, NormStats)> {
    let mut mins = Vec::with_capacity(kin.nrows());
    let mut maxs = Vec::with_capacity(kin.nrows());
    for (i, row) in kin.rows().into_iter().enumerate() {
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::ConstantAxis { index: i });
        }
        mins.push(lo);
        maxs.push(hi);
    }
    let mut out = kin.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (lo, hi) = (mins[i], maxs[i]);
        row.mapv_inplace(|v| (v - lo) / (hi - lo));
    }
    Ok((
        out,
        NormStats {
            min: mins,
            max: maxs,
            ..Default::default()
        },
    ))
}

/// Apply precomputed min-max statistics row by row.
pub fn apply_minmax(x: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    if stats.min.len() != x.nrows() || stats.max.len() != x.nrows() {
        return Err(Error::Shape("min-max stats do not match row count".into()));
    }
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (lo, hi) = (stats.min[i], stats.max[i]);
        row.mapv_inplace(|v| (v - lo) / (hi - lo));
    }
    Ok(out)
}

/// Min-max statistics over a column subset (inclusive ranges).
pub fn minmax_stats_over(x: &Array2<f64>, ranges: &[(usize, usize)]) -> Result<NormStats> {
    let mut mins = vec![f64::INFINITY; x.nrows()];
    let mut maxs = vec![f64::NEG_INFINITY; x.nrows()];
    for &(lo, hi) in ranges {
        if hi >= x.ncols() || lo > hi {
            return Err(Error::Shape(format!("range ({lo}, {hi}) outside 0..{}", x.ncols())));
        }
        for (i, row) in x.rows().into_iter().enumerate() {
            for t in lo..=hi {
                mins[i] = mins[i].min(row[t]);
                maxs[i] = maxs[i].max(row[t]);
            }
        }
    }
    for i in 0..x.nrows() {
        if !(maxs[i] > mins[i]) {
            return Err(Error::ConstantAxis { index: i });
        }
    }
    Ok(NormStats {
        min: mins,
        max: maxs,
        ..Default::default()
    })
}

/// Z-score statistics over a column subset (inclusive ranges).
pub fn zscore_stats_over(x: &Array2<f64>, ranges: &[(usize, usize)]) -> Result<NormStats> {
    let mut count = 0usize;
    for &(lo, hi) in ranges {
        if hi >= x.ncols() || lo > hi {
            return Err(Error::Shape(format!("range ({lo}, {hi}) outside 0..{}", x.ncols())));
        }
        count += hi - lo + 1;
    }
    if count < 2 {
        return Err(Error::Shape("z-score needs at least 2 samples".into()));
    }
    let mut means = Vec::with_capacity(x.nrows());
    let mut stds = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &(lo, hi) in ranges {
            for t in lo..=hi {
                sum += row[t];
            }
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for &(lo, hi) in ranges {
            for t in lo..=hi {
                ss += (row[t] - mean) * (row[t] - mean);
            }
        }
        let std = (ss / (count - 1) as f64).sqrt();
        if std <= 0.0 {
            return Err(Error::ZeroVariance { index: i });
        }
        means.push(mean);
        stds.push(std);
    }
    Ok(NormStats {
        mean: means,
        std: stds,
        ..Default::default()
    })
}

/// Per-channel z-score with sample (N-1) standard deviation.
pub fn zscore_channels(x: &Array2<f64>) -> Result<(Array2<f64>, NormStats)> {
    let stats = zscore_stats(x)?;
    let out = apply_zscore(x, &stats)?;
    Ok((out, stats))
}

/// Compute z-score statistics without applying them.
pub fn zscore_stats(x: &Array2<f64>) -> Result<NormStats> {
    let t = x.ncols();
    if t < 2 {
        return Err(Error::Shape("z-score needs at least 2 samples".into()));
    }
    let mut means = Vec::with_capacity(x.nrows());
    let mut stds = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / t as f64;
        let ss: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum();
        let std = (ss / (t - 1) as f64).sqrt();
        if std <= 0.0 {
            return Err(Error::ZeroVariance { index: i });
        }
        means.push(mean);
        stds.push(std);
    }
    Ok(NormStats {
        mean: means,
        std: stds,
        ..Default::default()
    })
}

/// Apply precomputed z-score statistics row by row.
pub fn apply_zscore(x: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    if stats.mean.len() != x.nrows() || stats.std.len() != x.nrows() {
        return Err(Error::Shape("z-score stats do not match row count".into()));
    }
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (m, s) = (stats.mean[i], stats.std[i]);
        row.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sine(freq: f64, fs: f64, secs: f64) -> Vec<f64> {
        let n = (fs * secs) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect()
    }

    #[test]
    fn bandpass_design_tap_count_and_symmetry() {
        let f = design_fir_bandpass(0.1, 40.0, 500.0, 2.0).unwrap();
        assert_eq!(f.num_taps(), 825);
        for n in 0..f.num_taps() {
            assert_eq!(f.taps[n], f.taps[f.num_taps() - 1 - n]);
        }
    }

    #[test]
    fn bandpass_magnitude_targets() {
        // Independent DFT of the taps, not FirFilter::magnitude_at.
        let f = design_fir_bandpass(0.1, 40.0, 500.0, 2.0).unwrap();
        let mag = |freq: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &t) in f.taps.iter().enumerate() {
                let p = 2.0 * std::f64::consts::PI * freq * n as f64 / 500.0;
                re += t * p.cos();
                im -= t * p.sin();
            }
            f64::hypot(re, im)
        };
        let h20 = mag(20.0);
        assert!((0.99..=1.01).contains(&h20), "|H(20)| = {h20}");
        assert!(mag(45.0) <= 0.01, "|H(45)| = {}", mag(45.0));
        // No significant passband overshoot anywhere.
        let mut fq = 0.0;
        while fq < 250.0 {
            assert!(mag(fq) <= 1.02, "|H({fq})| = {}", mag(fq));
            fq += 0.25;
        }
    }

    #[test]
    fn invalid_band_edges_rejected() {
        assert!(design_fir_bandpass(40.0, 0.1, 500.0, 2.0).is_err());
        assert!(design_fir_bandpass(0.1, 260.0, 500.0, 2.0).is_err());
        assert!(design_fir_bandpass(0.1, 40.0, 500.0, 0.05).is_err()); // cap exceeded
    }

    #[test]
    fn filtfilt_zero_is_zero() {
        let f = design_fir_bandpass(0.1, 40.0, 500.0, 4.0).unwrap();
        let y = filtfilt(&f, &vec![0.0; 3000]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn filtfilt_passband_sine_amplitude_and_phase() {
        let f = design_fir_bandpass(0.1, 40.0, 500.0, 2.0).unwrap();
        let x = sine(20.0, 500.0, 10.0);
        let y = filtfilt(&f, &x).unwrap();
        assert_eq!(y.len(), x.len());
        // Amplitude within 2% in the central region.
        let core = &y[1000..4000];
        let amp = core.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((amp - 1.0).abs() <= 0.02, "amplitude {amp}");
        // Cross-correlation peaks at zero lag.
        let xcorr = |lag: i64| -> f64 {
            let mut s = 0.0;
            for i in 1000..4000i64 {
                s += y[i as usize] * x[(i + lag) as usize];
            }
            s
        };
        let at0 = xcorr(0);
        for lag in -25..=25i64 {
            assert!(xcorr(lag) <= at0 + 1e-9, "lag {lag} beats lag 0");
        }
    }

    #[test]
    fn filtfilt_rejects_dc() {
        let f = design_fir_bandpass(0.1, 40.0, 500.0, 2.0).unwrap();
        let x = vec![1.0; 5000];
        let y = filtfilt(&f, &x).unwrap();
        let core = &y[1250..3750];
        let peak = core.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(peak < 0.05, "DC leak {peak}");
    }

    #[test]
    fn filtfilt_short_signal_rejected() {
        let f = design_fir_bandpass(0.1, 40.0, 500.0, 2.0).unwrap();
        assert!(matches!(
            filtfilt(&f, &vec![0.0; 100]),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn car_small_example() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let y = common_average_reference(&x).unwrap();
        assert_eq!(y, array![[-1.0, -1.0], [1.0, 1.0]]);
    }

    #[test]
    fn car_zero_mean_and_idempotent() {
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = Array2::from_shape_fn((18, 500), |_| next() * 50.0);
        let y = common_average_reference(&x).unwrap();
        for col in y.columns() {
            assert!((col.sum() / 18.0).abs() < 1e-9);
        }
        let z = common_average_reference(&y).unwrap();
        for (a, b) in y.iter().zip(z.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn reject_none_is_identity() {
        let eeg = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let unmix = array![[2.0, 1.0], [1.0, 1.0]];
        let mix = array![[1.0, -1.0], [-1.0, 2.0]];
        let out = reject_components(&eeg, &unmix, &mix, &[]).unwrap();
        for (a, b) in eeg.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reject_all_is_zero() {
        let eeg = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let unmix = array![[2.0, 1.0], [1.0, 1.0]];
        let mix = array![[1.0, -1.0], [-1.0, 2.0]];
        let out = reject_components(&eeg, &unmix, &mix, &[0, 1]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn reject_recovers_clean_mixture() {
        // Two sources, one is the artifact; rejecting it should recover the
        // clean per-channel signal almost perfectly.
        let t = 2000;
        let clean: Vec<f64> = (0..t).map(|i| (0.013 * i as f64).sin()).collect();
        let artifact: Vec<f64> = (0..t).map(|i| ((0.051 * i as f64).cos() * 2.0).tanh()).collect();
        let mix = array![[1.0, 0.8], [0.5, -1.2]];
        let unmix = array![[-1.2 / -1.6, -0.8 / -1.6], [-0.5 / -1.6, 1.0 / -1.6]];
        let mut eeg = Array2::zeros((2, t));
        let mut expected = Array2::zeros((2, t));
        for i in 0..t {
            eeg[[0, i]] = mix[[0, 0]] * clean[i] + mix[[0, 1]] * artifact[i];
            eeg[[1, i]] = mix[[1, 0]] * clean[i] + mix[[1, 1]] * artifact[i];
            expected[[0, i]] = mix[[0, 0]] * clean[i];
            expected[[1, i]] = mix[[1, 0]] * clean[i];
        }
        let out = reject_components(&eeg, &unmix, &mix, &[1]).unwrap();
        for ch in 0..2 {
            let a: Vec<f64> = out.row(ch).to_vec();
            let b: Vec<f64> = expected.row(ch).to_vec();
            let corr = simple_corr(&a, &b);
            assert!(corr > 0.99, "channel {ch} corr {corr}");
        }
    }

    fn simple_corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..a.len() {
            num += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma).powi(2);
            vb += (b[i] - mb).powi(2);
        }
        num / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn decimate_length_and_values() {
        let x: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let y = decimate(&x, 5).unwrap();
        assert_eq!(y.len(), 200);
        for (k, v) in y.iter().enumerate() {
            assert_eq!(*v, (5 * k) as f64);
        }
        assert!(decimate(&x, 0).is_err());
    }

    #[test]
    fn kinematics_lowpass_behavior() {
        let fs = 500.0;
        let t = 6000;
        // Constant passes through.
        let constant = Array2::from_elem((3, t), 7.5);
        let y = lowpass_kinematics(&constant, fs).unwrap();
        assert_eq!(y.ncols(), t);
        for v in y.iter() {
            assert!((v - 7.5).abs() < 1e-6);
        }
        // A 10 Hz component is crushed below 1%.
        let filter = design_fir_lowpass(2.0, fs, 1.0).unwrap();
        let mag = filter.magnitude_at(10.0);
        assert!(mag * mag < 0.01, "10 Hz leak {}", mag * mag);
    }

    #[test]
    fn minmax_examples() {
        let kin = array![[2.0, 4.0, 6.0], [0.0, 1.0, 2.0], [5.0, 6.0, 7.0]];
        let (out, stats) = minmax_normalize(&kin).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.0, 0.5, 1.0]);
        let back = stats.invert_minmax(&out).unwrap();
        for (a, b) in kin.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let constant = array![[3.0, 3.0, 3.0], [0.0, 1.0, 2.0], [5.0, 6.0, 7.0]];
        assert!(matches!(minmax_normalize(&constant), Err(Error::ConstantAxis { index: 0 })));
    }

    #[test]
    fn zscore_examples() {
        let x = array![[1.0, 2.0, 3.0]];
        let (z, _) = zscore_channels(&x).unwrap();
        let mean = z.row(0).sum() / 3.0;
        let std = (z.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);

        // Affine invariance (positive scale).
        let y = x.mapv(|v| 3.5 * v - 11.0);
        let (zy, _) = zscore_channels(&y).unwrap();
        for (a, b) in z.iter().zip(zy.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let flat = array![[2.0, 2.0, 2.0]];
        assert!(matches!(zscore_channels(&flat), Err(Error::ZeroVariance { index: 0 })));
    }

    #[test]
    fn zscore_random_matrix_stats() {
        let mut rng = 98765u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = Array2::from_shape_fn((18, 1000), |_| next() * 30.0 + 4.0);
        let (z, _) = zscore_channels(&x).unwrap();
        for row in z.rows() {
            let mean = row.sum() / 1000.0;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-9);
        }
    }
}
