//! Recording-level data types: raw sessions, trial markers, lead fields,
//! and normalization statistics, plus their on-disk representation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::{self, MatrixMeta, Role};
use crate::error::{Error, Result};

/// Object weight used in a grasp-and-lift trial, in grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectWeight {
    #[serde(rename = "165")]
    Grams165,
    #[serde(rename = "330")]
    Grams330,
    #[serde(rename = "660")]
    Grams660,
}

/// Contact surface of the lifted object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    Sandpaper,
    Suede,
    Silk,
}

/// One trial's event markers, indexed at the EEG sampling rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrialMarker {
    pub onset_sample: usize,
    pub return_sample: usize,
    pub weight_grams: ObjectWeight,
    pub surface: Surface,
}

impl TrialMarker {
    /// Validate ordering and the pre-movement history requirement
    /// (650 ms of context before onset at the given rate).
    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.onset_sample >= self.return_sample {
            return Err(Error::InvalidArgument(format!(
                "marker onset {} must precede return {}",
                self.onset_sample, self.return_sample
            )));
        }
        let min_onset = (0.650 * fs).ceil() as usize;
        if self.onset_sample < min_onset {
            return Err(Error::InvalidArgument(format!(
                "marker onset {} has less than 650 ms of history (needs >= {})",
                self.onset_sample, min_onset
            )));
        }
        Ok(())
    }
}

/// One subject recording: synchronized multichannel EEG and 3D hand position.
#[derive(Debug, Clone)]
pub struct RawSession {
    pub subject_id: String,
    /// channels x samples, microvolts.
    pub eeg: Array2<f64>,
    pub eeg_fs: f64,
    pub eeg_channel_names: Vec<String>,
    /// 3 x samples (x, y, z), millimeters.
    pub kin: Array2<f64>,
    pub kin_fs: f64,
    pub trials: Vec<TrialMarker>,
}

impl RawSession {
    /// Check the structural invariants. EEG and kinematics must cover the
    /// same wall-clock span to within one sample period.
    pub fn validate(&self) -> Result<()> {
        if self.eeg_fs <= 0.0 || self.kin_fs <= 0.0 {
            return Err(Error::InvalidArgument("sampling rates must be positive".into()));
        }
        if self.eeg.nrows() != self.eeg_channel_names.len() {
            return Err(Error::Shape(format!(
                "{} EEG rows but {} channel names",
                self.eeg.nrows(),
                self.eeg_channel_names.len()
            )));
        }
        if self.kin.nrows() != 3 {
            return Err(Error::Shape(format!("kinematics must have 3 rows, got {}", self.kin.nrows())));
        }
        let eeg_dur = self.eeg.ncols() as f64 / self.eeg_fs;
        let kin_dur = self.kin.ncols() as f64 / self.kin_fs;
        let tol = (1.0 / self.eeg_fs).max(1.0 / self.kin_fs);
        if (eeg_dur - kin_dur).abs() > tol {
            return Err(Error::Shape(format!(
                "EEG spans {eeg_dur:.4} s but kinematics span {kin_dur:.4} s"
            )));
        }
        for m in &self.trials {
            m.validate(self.eeg_fs)?;
            if m.return_sample >= self.eeg.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "marker return {} beyond recording end {}",
                    m.return_sample,
                    self.eeg.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Row indices of the named channels, in the order given.
    pub fn channel_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.eeg_channel_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::UnknownChannel(n.clone()))
            })
            .collect()
    }
}

/// Forward-model gain matrix with channel names and atlas information.
#[derive(Debug, Clone)]
pub struct LeadField {
    /// channels x sources.
    pub gain: Array2<f64>,
    pub channel_names: Vec<String>,
    /// sources x 3, millimeters.
    pub source_positions: Array2<f64>,
    pub atlas_label: Vec<u32>,
    pub atlas_names: BTreeMap<u32, String>,
}

impl LeadField {
    pub fn n_channels(&self) -> usize {
        self.gain.nrows()
    }

    pub fn n_sources(&self) -> usize {
        self.gain.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, k) = (self.gain.nrows(), self.gain.ncols());
        if i < 1 || k < i {
            return Err(Error::Shape(format!(
                "lead field must have at least as many sources as channels, got {i}x{k}"
            )));
        }
        if self.channel_names.len() != i {
            return Err(Error::Shape(format!(
                "{} gain rows but {} channel names",
                i,
                self.channel_names.len()
            )));
        }
        if self.source_positions.nrows() != k || self.source_positions.ncols() != 3 {
            return Err(Error::Shape("source_positions must be sources x 3".into()));
        }
        if self.atlas_label.len() != k {
            return Err(Error::Shape(format!("{} sources but {} atlas labels", k, self.atlas_label.len())));
        }
        for label in &self.atlas_label {
            if !self.atlas_names.contains_key(label) {
                return Err(Error::InvalidArgument(format!("atlas label {label} has no name entry")));
            }
        }
        if self.gain.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lead field gain".into()));
        }
        Ok(())
    }

    /// Source indices carrying the given ROI name.
    pub fn roi_members(&self, roi: &str) -> Result<Vec<usize>> {
        let label = self
            .atlas_names
            .iter()
            .find(|(_, name)| name.as_str() == roi)
            .map(|(l, _)| *l)
            .ok_or_else(|| Error::UnknownRoi(roi.to_string()))?;
        let members: Vec<usize> = self
            .atlas_label
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(j, _)| j)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyRoi(roi.to_string()));
        }
        Ok(members)
    }
}

/// Normalization statistics, kept so every transform can be inverted.
///
/// The z-score fields are per channel; the min-max fields are per axis.
/// Only the half that a given operation produced is populated.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NormStats {
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default)]
    pub std: Vec<f64>,
    #[serde(default)]
    pub min: Vec<f64>,
    #[serde(default)]
    pub max: Vec<f64>,
}

impl NormStats {
    /// Undo a min-max transform row by row.
    pub fn invert_minmax(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if self.min.len() != data.nrows() || self.max.len() != data.nrows() {
            return Err(Error::Shape("min-max stats do not match row count".into()));
        }
        let mut out = data.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let (lo, hi) = (self.min[r], self.max[r]);
            row.mapv_inplace(|v| v * (hi - lo) + lo);
        }
        Ok(out)
    }

    /// Undo a z-score transform row by row.
    pub fn invert_zscore(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if self.mean.len() != data.nrows() || self.std.len() != data.nrows() {
            return Err(Error::Shape("z-score stats do not match row count".into()));
        }
        let mut out = data.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[r], self.std[r]);
            row.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }
}

/// Session-level JSON sidecar (`<stem>.session.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionHeader {
    subject_id: String,
    eeg_fs: f64,
    kin_fs: f64,
    trials: Vec<TrialMarker>,
}

fn append_name(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Persist a session as `<stem>.eeg.*`, `<stem>.kin.*`, `<stem>.session.json`.
pub fn save_session(stem: impl AsRef<Path>, session: &RawSession) -> Result<()> {
    let stem = stem.as_ref();
    session.validate()?;
    let eeg32 = session.eeg.mapv(|v| v as f32);
    let kin32 = session.kin.mapv(|v| v as f32);
    container::save_matrix(
        append_name(stem, ".eeg"),
        &eeg32,
        &MatrixMeta::new(0, 0, Role::Eeg)
            .with_fs(session.eeg_fs)
            .with_units("uV")
            .with_channel_names(&session.eeg_channel_names),
    )?;
    container::save_matrix(
        append_name(stem, ".kin"),
        &kin32,
        &MatrixMeta::new(0, 0, Role::Kin).with_fs(session.kin_fs).with_units("mm"),
    )?;
    let header = SessionHeader {
        subject_id: session.subject_id.clone(),
        eeg_fs: session.eeg_fs,
        kin_fs: session.kin_fs,
        trials: session.trials.clone(),
    };
    let hpath = append_name(stem, ".session.json");
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Meta {
        path: hpath.display().to_string(),
        detail: e.to_string(),
    })?;
    fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))
}

/// Load a session saved by [`save_session`].
pub fn load_session(stem: impl AsRef<Path>) -> Result<RawSession> {
    let stem = stem.as_ref();
    let hpath = append_name(stem, ".session.json");
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: SessionHeader = serde_json::from_str(&text).map_err(|e| Error::Meta {
        path: hpath.display().to_string(),
        detail: e.to_string(),
    })?;
    let (eeg32, eeg_meta) = container::load_matrix(append_name(stem, ".eeg"))?;
    let (kin32, _) = container::load_matrix(append_name(stem, ".kin"))?;
    let session = RawSession {
        subject_id: header.subject_id,
        eeg: eeg32.mapv(f64::from),
        eeg_fs: header.eeg_fs,
        eeg_channel_names: eeg_meta.channel_names.unwrap_or_default(),
        kin: kin32.mapv(f64::from),
        kin_fs: header.kin_fs,
        trials: header.trials,
    };
    session.validate()?;
    Ok(session)
}

/// Persist a lead field with atlas tables in the sidecar.
pub fn save_leadfield(stem: impl AsRef<Path>, lf: &LeadField) -> Result<()> {
    lf.validate()?;
    let gain32 = lf.gain.mapv(|v| v as f32);
    let mut meta = MatrixMeta::new(0, 0, Role::Leadfield).with_channel_names(&lf.channel_names);
    meta.source_positions = Some(
        lf.source_positions
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect(),
    );
    meta.atlas_label = Some(lf.atlas_label.clone());
    meta.atlas_names = Some(lf.atlas_names.clone());
    container::save_matrix(stem, &gain32, &meta)
}

/// Load a lead field saved by [`save_leadfield`].
pub fn load_leadfield(stem: impl AsRef<Path>) -> Result<LeadField> {
    let stem = stem.as_ref();
    let (gain32, meta) = container::load_matrix(stem)?;
    let positions = meta.source_positions.ok_or_else(|| Error::Meta {
        path: stem.display().to_string(),
        detail: "lead field sidecar lacks source_positions".into(),
    })?;
    let mut pos = Array2::<f64>::zeros((positions.len(), 3));
    for (i, p) in positions.iter().enumerate() {
        pos[[i, 0]] = p[0];
        pos[[i, 1]] = p[1];
        pos[[i, 2]] = p[2];
    }
    let lf = LeadField {
        gain: gain32.mapv(f64::from),
        channel_names: meta.channel_names.unwrap_or_default(),
        source_positions: pos,
        atlas_label: meta.atlas_label.unwrap_or_default(),
        atlas_names: meta.atlas_names.unwrap_or_default(),
    };
    lf.validate()?;
    Ok(lf)
}
