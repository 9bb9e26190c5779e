//! C ABI for the core toolkit: opaque handles, integer status codes, and
//! flat row-major buffers. The header `include/esigal.h` is generated by
//! cbindgen at build time.
//!
//! Conventions: matrices are row-major `f64`; functions never take
//! ownership of caller buffers; every handle has a matching `_free`; all
//! entry points are panic-safe and report failures through
//! [`EsigalStatus`].

use std::collections::BTreeMap;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::Array2;

use esigal::error::Error;
use esigal::eval::{paired_t_test_one_tailed, pcc};
use esigal::preprocess::{
    common_average_reference, design_fir_bandpass, design_fir_lowpass, filtfilt, minmax_normalize,
    zscore_channels, FirFilter,
};
use esigal::session::LeadField;
use esigal::source_imaging::{apply_inverse, compute_inverse_operator, InverseOperator, NoiseCov};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsigalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    FilterDesign = 4,
    SignalTooShort = 5,
    SingularMatrix = 6,
    ChannelMismatch = 7,
    NumericError = 8,
    InternalError = 9,
}

fn status_of(e: &Error) -> EsigalStatus {
    match e {
        Error::FilterDesign(_) => EsigalStatus::FilterDesign,
        Error::SignalTooShort { .. } => EsigalStatus::SignalTooShort,
        Error::Singular { .. } | Error::BadResolution { .. } => EsigalStatus::SingularMatrix,
        Error::ChannelMismatch(_) | Error::UnknownChannel(_) => EsigalStatus::ChannelMismatch,
        Error::Shape(_) => EsigalStatus::ShapeMismatch,
        Error::ZeroVariance { .. } | Error::ConstantAxis { .. } | Error::NonFinite(_) => {
            EsigalStatus::NumericError
        }
        _ => EsigalStatus::InvalidArgument,
    }
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn esigal_status_message(status: EsigalStatus) -> *const c_char {
    let msg: &'static [u8] = match status {
        EsigalStatus::Ok => b"ok\0",
        EsigalStatus::NullPointer => b"null pointer argument\0",
        EsigalStatus::InvalidArgument => b"invalid argument\0",
        EsigalStatus::ShapeMismatch => b"shape mismatch\0",
        EsigalStatus::FilterDesign => b"filter design error\0",
        EsigalStatus::SignalTooShort => b"signal too short for zero-phase filtering\0",
        EsigalStatus::SingularMatrix => b"singular matrix\0",
        EsigalStatus::ChannelMismatch => b"channel mismatch\0",
        EsigalStatus::NumericError => b"numeric error (non-finite or zero-variance data)\0",
        EsigalStatus::InternalError => b"internal error\0",
    };
    msg.as_ptr() as *const c_char
}

/// Library version string.
#[no_mangle]
pub extern "C" fn esigal_version() -> *const c_char {
    b"0.1.0\0".as_ptr() as *const c_char
}

fn guarded<F: FnOnce() -> EsigalStatus>(f: F) -> EsigalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => EsigalStatus::InternalError,
    }
}

/// Opaque zero-phase FIR filter handle.
pub struct EsigalFir {
    filter: FirFilter,
}

/// Design a Hamming windowed-sinc band-pass (see the library docs for the
/// tap-count rule). The handle must be released with `esigal_fir_free`.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn esigal_fir_bandpass(
    f_lo: f64,
    f_hi: f64,
    fs: f64,
    transition_bw: f64,
    out: *mut *mut EsigalFir,
) -> EsigalStatus {
    if out.is_null() {
        return EsigalStatus::NullPointer;
    }
    guarded(|| match design_fir_bandpass(f_lo, f_hi, fs, transition_bw) {
        Ok(filter) => {
            unsafe { *out = Box::into_raw(Box::new(EsigalFir { filter })) };
            EsigalStatus::Ok
        }
        Err(e) => status_of(&e),
    })
}

/// Design a Hamming windowed-sinc low-pass.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn esigal_fir_lowpass(
    cutoff: f64,
    fs: f64,
    transition_bw: f64,
    out: *mut *mut EsigalFir,
) -> EsigalStatus {
    if out.is_null() {
        return EsigalStatus::NullPointer;
    }
    guarded(|| match design_fir_lowpass(cutoff, fs, transition_bw) {
        Ok(filter) => {
            unsafe { *out = Box::into_raw(Box::new(EsigalFir { filter })) };
            EsigalStatus::Ok
        }
        Err(e) => status_of(&e),
    })
}

/// Number of taps, or 0 for a null handle.
///
/// # Safety
/// `fir` must be null or a live handle from a designer.
#[no_mangle]
pub unsafe extern "C" fn esigal_fir_num_taps(fir: *const EsigalFir) -> usize {
    if fir.is_null() {
        return 0;
    }
    unsafe { &*fir }.filter.num_taps()
}

/// Copy the taps into `buf` (`len` must be at least the tap count).
///
/// # Safety
/// `buf` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn esigal_fir_taps(
    fir: *const EsigalFir,
    buf: *mut f64,
    len: usize,
) -> EsigalStatus {
    if fir.is_null() || buf.is_null() {
        return EsigalStatus::NullPointer;
    }
    let filter = &unsafe { &*fir }.filter;
    if len < filter.num_taps() {
        return EsigalStatus::ShapeMismatch;
    }
    let dst = unsafe { std::slice::from_raw_parts_mut(buf, filter.num_taps()) };
    dst.copy_from_slice(&filter.taps);
    EsigalStatus::Ok
}

/// Zero-phase (forward-backward) filtering of one signal, in place.
///
/// # Safety
/// `data` must point to `len` readable and writable doubles.
#[no_mangle]
pub unsafe extern "C" fn esigal_fir_filtfilt(
    fir: *const EsigalFir,
    data: *mut f64,
    len: usize,
) -> EsigalStatus {
    if fir.is_null() || data.is_null() {
        return EsigalStatus::NullPointer;
    }
    guarded(|| {
        let filter = &unsafe { &*fir }.filter;
        let signal = unsafe { std::slice::from_raw_parts_mut(data, len) };
        match filtfilt(filter, signal) {
            Ok(filtered) => {
                signal.copy_from_slice(&filtered);
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Release a filter handle (null is a no-op).
///
/// # Safety
/// `fir` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn esigal_fir_free(fir: *mut EsigalFir) {
    if !fir.is_null() {
        drop(unsafe { Box::from_raw(fir) });
    }
}

fn slice_to_matrix(data: *const f64, rows: usize, cols: usize) -> Option<Array2<f64>> {
    if data.is_null() || rows == 0 || cols == 0 {
        return None;
    }
    let s = unsafe { std::slice::from_raw_parts(data, rows * cols) };
    Array2::from_shape_vec((rows, cols), s.to_vec()).ok()
}

fn write_matrix(m: &Array2<f64>, data: *mut f64) {
    let dst = unsafe { std::slice::from_raw_parts_mut(data, m.len()) };
    for (d, v) in dst.iter_mut().zip(m.iter()) {
        *d = *v;
    }
}

/// Common average reference, in place on a row-major channels x samples
/// matrix.
///
/// # Safety
/// `data` must point to `channels * samples` readable/writable doubles.
#[no_mangle]
pub unsafe extern "C" fn esigal_car(data: *mut f64, channels: usize, samples: usize) -> EsigalStatus {
    guarded(|| {
        let Some(m) = slice_to_matrix(data, channels, samples) else {
            return EsigalStatus::NullPointer;
        };
        match common_average_reference(&m) {
            Ok(out) => {
                write_matrix(&out, data);
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Per-row z-score (sample standard deviation), in place.
///
/// # Safety
/// `data` must point to `rows * cols` readable/writable doubles.
#[no_mangle]
pub unsafe extern "C" fn esigal_zscore_rows(data: *mut f64, rows: usize, cols: usize) -> EsigalStatus {
    guarded(|| {
        let Some(m) = slice_to_matrix(data, rows, cols) else {
            return EsigalStatus::NullPointer;
        };
        match zscore_channels(&m) {
            Ok((out, _)) => {
                write_matrix(&out, data);
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Per-row min-max scaling onto [0, 1], in place.
///
/// # Safety
/// `data` must point to `rows * cols` readable/writable doubles.
#[no_mangle]
pub unsafe extern "C" fn esigal_minmax_rows(data: *mut f64, rows: usize, cols: usize) -> EsigalStatus {
    guarded(|| {
        let Some(m) = slice_to_matrix(data, rows, cols) else {
            return EsigalStatus::NullPointer;
        };
        match minmax_normalize(&m) {
            Ok((out, _)) => {
                write_matrix(&out, data);
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Pearson correlation of two equal-length series.
///
/// # Safety
/// `x` and `y` must point to `len` doubles, `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn esigal_pcc(
    x: *const f64,
    y: *const f64,
    len: usize,
    out: *mut f64,
) -> EsigalStatus {
    if x.is_null() || y.is_null() || out.is_null() {
        return EsigalStatus::NullPointer;
    }
    guarded(|| {
        let xs = unsafe { std::slice::from_raw_parts(x, len) };
        let ys = unsafe { std::slice::from_raw_parts(y, len) };
        match pcc(xs, ys) {
            Ok(r) => {
                unsafe { *out = r };
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// One-tailed paired t-test (alternative: mean(a) > mean(b)).
///
/// # Safety
/// `a` and `b` must point to `len` doubles; `out_t`/`out_p` to one double each.
#[no_mangle]
pub unsafe extern "C" fn esigal_paired_t_test(
    a: *const f64,
    b: *const f64,
    len: usize,
    out_t: *mut f64,
    out_p: *mut f64,
) -> EsigalStatus {
    if a.is_null() || b.is_null() || out_t.is_null() || out_p.is_null() {
        return EsigalStatus::NullPointer;
    }
    guarded(|| {
        let xs = unsafe { std::slice::from_raw_parts(a, len) };
        let ys = unsafe { std::slice::from_raw_parts(b, len) };
        match paired_t_test_one_tailed(xs, ys) {
            Ok((t, p)) => {
                unsafe {
                    *out_t = t;
                    *out_p = p;
                }
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Opaque sLORETA inverse-operator handle.
pub struct EsigalInverse {
    op: InverseOperator,
    sources: usize,
}

/// Build a standardized inverse operator from a row-major channels x
/// sources gain matrix with an identity noise covariance.
///
/// # Safety
/// `gain` must point to `channels * sources` doubles; `out` to one pointer.
#[no_mangle]
pub unsafe extern "C" fn esigal_inverse_build(
    gain: *const f64,
    channels: usize,
    sources: usize,
    snr: f64,
    out: *mut *mut EsigalInverse,
) -> EsigalStatus {
    if out.is_null() {
        return EsigalStatus::NullPointer;
    }
    guarded(|| {
        let Some(g) = slice_to_matrix(gain, channels, sources) else {
            return EsigalStatus::NullPointer;
        };
        let mut atlas_names = BTreeMap::new();
        atlas_names.insert(0u32, "all".to_string());
        let lf = LeadField {
            gain: g,
            channel_names: (0..channels).map(|i| format!("CH{i:03}")).collect(),
            source_positions: Array2::zeros((sources, 3)),
            atlas_label: vec![0; sources],
            atlas_names,
        };
        match compute_inverse_operator(&lf, &NoiseCov::Identity, snr) {
            Ok(op) => {
                unsafe { *out = Box::into_raw(Box::new(EsigalInverse { op, sources })) };
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Project channels x samples sensor data to sources x samples estimates.
///
/// # Safety
/// `eeg` must point to `channels * samples` doubles and `out` to
/// `sources * samples` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn esigal_inverse_apply(
    inv: *const EsigalInverse,
    eeg: *const f64,
    samples: usize,
    out: *mut f64,
) -> EsigalStatus {
    if inv.is_null() || out.is_null() {
        return EsigalStatus::NullPointer;
    }
    guarded(|| {
        let handle = unsafe { &*inv };
        let channels = handle.op.channel_names.len();
        let Some(e) = slice_to_matrix(eeg, channels, samples) else {
            return EsigalStatus::NullPointer;
        };
        match apply_inverse(&handle.op, &e, &handle.op.channel_names.clone()) {
            Ok(s) => {
                write_matrix(&s, out);
                EsigalStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Number of sources the operator maps to, or 0 for a null handle.
///
/// # Safety
/// `inv` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn esigal_inverse_num_sources(inv: *const EsigalInverse) -> usize {
    if inv.is_null() {
        return 0;
    }
    unsafe { &*inv }.sources
}

/// Copy the resolution-matrix diagonal into `buf`.
///
/// # Safety
/// `buf` must point to at least `len >= sources` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn esigal_inverse_resolution(
    inv: *const EsigalInverse,
    buf: *mut f64,
    len: usize,
) -> EsigalStatus {
    if inv.is_null() || buf.is_null() {
        return EsigalStatus::NullPointer;
    }
    let handle = unsafe { &*inv };
    if len < handle.sources {
        return EsigalStatus::ShapeMismatch;
    }
    let dst = unsafe { std::slice::from_raw_parts_mut(buf, handle.sources) };
    dst.copy_from_slice(&handle.op.resolution_diag);
    EsigalStatus::Ok
}

/// Release an inverse-operator handle (null is a no-op).
///
/// # Safety
/// `inv` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn esigal_inverse_free(inv: *mut EsigalInverse) {
    if !inv.is_null() {
        drop(unsafe { Box::from_raw(inv) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fir_design_and_filtfilt_through_the_abi() {
        let mut handle: *mut EsigalFir = std::ptr::null_mut();
        let status = unsafe { esigal_fir_bandpass(0.1, 40.0, 500.0, 2.0, &mut handle) };
        assert_eq!(status, EsigalStatus::Ok);
        assert_eq!(unsafe { esigal_fir_num_taps(handle) }, 825);

        let mut taps = vec![0.0; 825];
        assert_eq!(
            unsafe { esigal_fir_taps(handle, taps.as_mut_ptr(), taps.len()) },
            EsigalStatus::Ok
        );
        assert_eq!(taps[0], taps[824]);

        let mut signal: Vec<f64> = (0..5000)
            .map(|i| (2.0 * std::f64::consts::PI * 20.0 * i as f64 / 500.0).sin())
            .collect();
        assert_eq!(
            unsafe { esigal_fir_filtfilt(handle, signal.as_mut_ptr(), signal.len()) },
            EsigalStatus::Ok
        );
        let amp = signal[1000..4000].iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((amp - 1.0).abs() < 0.02);

        // Too-short input is reported, not fatal.
        let mut short = vec![0.0; 10];
        assert_eq!(
            unsafe { esigal_fir_filtfilt(handle, short.as_mut_ptr(), short.len()) },
            EsigalStatus::SignalTooShort
        );
        unsafe { esigal_fir_free(handle) };
    }

    #[test]
    fn car_and_pcc_through_the_abi() {
        let mut data = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(unsafe { esigal_car(data.as_mut_ptr(), 2, 2) }, EsigalStatus::Ok);
        assert_eq!(data, vec![-1.0, -1.0, 1.0, 1.0]);

        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.31).sin()).collect();
        let mut r = 0.0;
        assert_eq!(
            unsafe { esigal_pcc(x.as_ptr(), x.as_ptr(), x.len(), &mut r) },
            EsigalStatus::Ok
        );
        assert!((r - 1.0).abs() < 1e-12);

        let constant = vec![2.0; 100];
        assert_eq!(
            unsafe { esigal_pcc(x.as_ptr(), constant.as_ptr(), 100, &mut r) },
            EsigalStatus::NumericError
        );
    }

    #[test]
    fn inverse_localizes_through_the_abi() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (i, k) = (16usize, 80usize);
        let gain: Vec<f64> = (0..i * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut handle: *mut EsigalInverse = std::ptr::null_mut();
        assert_eq!(
            unsafe { esigal_inverse_build(gain.as_ptr(), i, k, 1e6, &mut handle) },
            EsigalStatus::Ok
        );
        assert_eq!(unsafe { esigal_inverse_num_sources(handle) }, k);

        // A noiseless point source localizes back to its own column.
        let probe = 17usize;
        let eeg: Vec<f64> = (0..i).map(|r| gain[r * k + probe]).collect();
        let mut sources = vec![0.0; k];
        assert_eq!(
            unsafe { esigal_inverse_apply(handle, eeg.as_ptr(), 1, sources.as_mut_ptr()) },
            EsigalStatus::Ok
        );
        let best = sources
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, probe);
        unsafe { esigal_inverse_free(handle) };
    }

    #[test]
    fn null_pointers_are_reported() {
        assert_eq!(
            unsafe { esigal_fir_bandpass(0.1, 40.0, 500.0, 2.0, std::ptr::null_mut()) },
            EsigalStatus::NullPointer
        );
        assert_eq!(unsafe { esigal_fir_num_taps(std::ptr::null()) }, 0);
        let mut out = 0.0;
        assert_eq!(
            unsafe { esigal_pcc(std::ptr::null(), std::ptr::null(), 5, &mut out) },
            EsigalStatus::NullPointer
        );
    }
}
