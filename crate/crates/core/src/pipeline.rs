//! Session-level processing chains: raw recording -> denoised 100 Hz EEG +
//! normalized kinematics -> sensor- or source-domain feature series ->
//! segmented trials. The runner and the stage subcommands are thin shells
//! over these functions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    apply_zscore, common_average_reference, decimate_rows, design_fir_bandpass, filtfilt_rows,
    lowpass_kinematics_with, minmax_normalize, minmax_stats_over, apply_minmax, reject_components,
    zscore_stats, zscore_stats_over,
};
use crate::session::{LeadField, NormStats, RawSession, TrialMarker};
use crate::source_imaging::{compute_inverse_operator, fuse_roi_inverse, NoiseCov};
use crate::windowing::{segment_trials, Trial, FEATURE_FS};

/// Precomputed component-rejection matrices (estimated elsewhere; only the
/// rejection/reconstruction step runs here).
#[derive(Debug, Clone)]
pub struct IcaSpec {
    pub unmixing: Array2<f64>,
    pub mixing: Array2<f64>,
    pub reject: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    /// EEG band-pass edges in Hz.
    pub band: (f64, f64),
    pub eeg_transition_bw: f64,
    /// Kinematics low-pass cutoff in Hz.
    pub kin_cutoff: f64,
    pub kin_transition_bw: f64,
    pub ica: Option<IcaSpec>,
    /// Column spans (at the raw rate) over which min-max statistics are
    /// computed; `None` uses the whole recording.
    pub kin_norm_spans: Option<Vec<(usize, usize)>>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            band: (0.1, 40.0),
            eeg_transition_bw: 2.0,
            kin_cutoff: 2.0,
            kin_transition_bw: 1.0,
            ica: None,
            kin_norm_spans: None,
        }
    }
}

/// A recording after the conditioning chain, everything at 100 Hz:
/// band-passed/CAR'd/denoised EEG (not yet z-scored), min-max normalized
/// kinematics, and markers re-indexed to the feature rate.
#[derive(Debug, Clone)]
pub struct PreprocessedSession {
    pub subject_id: String,
    pub eeg: Array2<f64>,
    pub channel_names: Vec<String>,
    pub kin: Array2<f64>,
    pub kin_stats: NormStats,
    pub fs: f64,
    pub markers: Vec<TrialMarker>,
}

fn integer_factor(fs: f64) -> Result<usize> {
    let f = fs / FEATURE_FS;
    let rounded = f.round();
    if (f - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "sampling rate {fs} is not an integer multiple of {FEATURE_FS} Hz"
        )));
    }
    Ok(rounded as usize)
}

/// EEG chain: band-pass -> CAR -> component rejection -> decimate.
/// Kinematics chain: low-pass -> min-max -> decimate. The order is fixed.
pub fn preprocess_session(session: &RawSession, opts: &PreprocessOptions) -> Result<PreprocessedSession> {
    session.validate()?;
    let eeg_factor = integer_factor(session.eeg_fs)?;
    let kin_factor = integer_factor(session.kin_fs)?;

    let bandpass = design_fir_bandpass(
        opts.band.0,
        opts.band.1,
        session.eeg_fs,
        opts.eeg_transition_bw,
    )?;
    let mut eeg = filtfilt_rows(&bandpass, &session.eeg)?;
    eeg = common_average_reference(&eeg)?;
    if let Some(ica) = &opts.ica {
        eeg = reject_components(&eeg, &ica.unmixing, &ica.mixing, &ica.reject)?;
    }
    let eeg = decimate_rows(&eeg, eeg_factor)?;

    let kin = lowpass_kinematics_with(
        &session.kin,
        session.kin_fs,
        opts.kin_cutoff,
        opts.kin_transition_bw,
    )?;
    let (kin, kin_stats) = match &opts.kin_norm_spans {
        None => minmax_normalize(&kin)?,
        Some(spans) => {
            let stats = minmax_stats_over(&kin, spans)?;
            (apply_minmax(&kin, &stats)?, stats)
        }
    };
    let kin = decimate_rows(&kin, kin_factor)?;

    let markers: Vec<TrialMarker> = session
        .trials
        .iter()
        .map(|m| TrialMarker {
            onset_sample: m.onset_sample / eeg_factor,
            return_sample: m.return_sample / eeg_factor,
            ..*m
        })
        .collect();

    Ok(PreprocessedSession {
        subject_id: session.subject_id.clone(),
        eeg,
        channel_names: session.eeg_channel_names.clone(),
        kin,
        kin_stats,
        fs: FEATURE_FS,
        markers,
    })
}

/// Where z-score statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Whole denoised recording (the default).
    Recording,
    /// Training trials only (columns derived from the training markers).
    TrainTrials,
}

impl Default for NormScope {
    fn default() -> Self {
        NormScope::Recording
    }
}

fn zscore_with_scope(
    x: &Array2<f64>,
    spans: Option<&[(usize, usize)]>,
) -> Result<(Array2<f64>, NormStats)> {
    let stats = match spans {
        None => zscore_stats(x)?,
        Some(spans) => zscore_stats_over(x, spans)?,
    };
    Ok((apply_zscore(x, &stats)?, stats))
}

/// Sensor-domain features: select the named channels, then z-score each.
pub fn sensor_features(
    p: &PreprocessedSession,
    channels: &[String],
    norm_spans: Option<&[(usize, usize)]>,
) -> Result<(Array2<f64>, NormStats)> {
    let mut rows = Vec::with_capacity(channels.len());
    for name in channels {
        let idx = p
            .channel_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownChannel(name.clone()))?;
        rows.push(idx);
    }
    let mut selected = Array2::zeros((rows.len(), p.eeg.ncols()));
    for (r, &idx) in rows.iter().enumerate() {
        selected.row_mut(r).assign(&p.eeg.row(idx));
    }
    zscore_with_scope(&selected, norm_spans)
}

/// Source-domain features: reorder channels to the lead-field order, apply
/// the fused ROI inverse, then z-score each ROI series.
pub fn source_features(
    p: &PreprocessedSession,
    lf: &LeadField,
    rois: &[String],
    snr: f64,
    norm_spans: Option<&[(usize, usize)]>,
) -> Result<(Array2<f64>, Vec<String>, NormStats)> {
    let mut rows = Vec::with_capacity(lf.channel_names.len());
    for name in &lf.channel_names {
        let idx = p
            .channel_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::ChannelMismatch(format!("lead field channel '{name}' not in session")))?;
        rows.push(idx);
    }
    let mut ordered = Array2::zeros((rows.len(), p.eeg.ncols()));
    for (r, &idx) in rows.iter().enumerate() {
        ordered.row_mut(r).assign(&p.eeg.row(idx));
    }
    let op = compute_inverse_operator(lf, &NoiseCov::Identity, snr)?;
    let fused = fuse_roi_inverse(&op, lf, rois)?;
    let series = fused.apply(&ordered, &lf.channel_names, p.fs)?;
    let (z, stats) = zscore_with_scope(&series.data, norm_spans)?;
    Ok((z, series.roi_names.clone(), stats))
}

/// Column spans (at 100 Hz) covered by the given trials, including the
/// 650 ms pre-onset context; used for train-trials normalization scope.
pub fn trial_spans(markers: &[TrialMarker], keep: &[usize]) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = keep
        .iter()
        .filter_map(|&i| markers.get(i))
        .filter(|m| m.onset_sample >= crate::windowing::PRE_ONSET_SAMPLES)
        .map(|m| (m.onset_sample - crate::windowing::PRE_ONSET_SAMPLES, m.return_sample))
        .collect();
    spans.sort_unstable();
    spans
}

/// Default 18-channel motor-region selection for 32-channel caps laid out
/// in the 10-20 system. The recordings themselves do not fix this list;
/// override it in the experiment config when your montage differs.
pub fn default_motor_channels() -> Vec<String> {
    [
        "F3", "Fz", "F4", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4", "T8", "CP5",
        "CP1", "CP2", "CP6", "P3", "P4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Segment a feature series into trials.
pub fn make_trials(
    feat: &Array2<f64>,
    p: &PreprocessedSession,
) -> (Vec<Trial>, usize) {
    segment_trials(feat, &p.kin, &p.markers, &p.subject_id)
}
