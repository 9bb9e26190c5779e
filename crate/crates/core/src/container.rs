//! On-disk matrix container: raw little-endian floats plus a JSON sidecar.
//!
//! A matrix with stem `foo` is stored as `foo.f32` (row-major 32-bit
//! little-endian floats) next to `foo.meta.json`. Converters from other
//! environments only need to write these two files; no scientific container
//! library is involved. Model checkpoints additionally use a 64-bit variant
//! (`foo.f64`) so trained parameters reload bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a stored matrix represents. Determines which sidecar fields apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Eeg,
    Kin,
    Leadfield,
    Source,
    Roi,
    /// Model parameter tensors (checkpoints); stored as f64.
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Default for Dtype {
    fn default() -> Self {
        Dtype::F32
    }
}

/// JSON sidecar describing one stored matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    pub role: Role,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fs_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_names: Option<Vec<String>>,
    /// Flag recorded at save time; loading re-checks nothing.
    #[serde(default)]
    pub has_non_finite: bool,
    /// Source coordinates in millimeters, one `[x, y, z]` per source (lead fields).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_positions: Option<Vec<[f64; 3]>>,
    /// Atlas label per source (lead fields).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atlas_label: Option<Vec<u32>>,
    /// Label -> ROI name table (lead fields).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atlas_names: Option<BTreeMap<u32, String>>,
}

impl MatrixMeta {
    pub fn new(rows: usize, cols: usize, role: Role) -> Self {
        MatrixMeta {
            rows,
            cols,
            role,
            dtype: Dtype::F32,
            fs_hz: None,
            units: None,
            channel_names: None,
            has_non_finite: false,
            source_positions: None,
            atlas_label: None,
            atlas_names: None,
        }
    }

    pub fn with_fs(mut self, fs_hz: f64) -> Self {
        self.fs_hz = Some(fs_hz);
        self
    }

    pub fn with_units(mut self, units: &str) -> Self {
        self.units = Some(units.to_string());
        self
    }

    pub fn with_channel_names(mut self, names: &[String]) -> Self {
        self.channel_names = Some(names.to_vec());
        self
    }
}

fn append_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn data_path(stem: &Path, dtype: Dtype) -> PathBuf {
    match dtype {
        Dtype::F32 => append_ext(stem, "f32"),
        Dtype::F64 => append_ext(stem, "f64"),
    }
}

fn meta_path(stem: &Path, _dtype: Dtype) -> PathBuf {
    append_ext(stem, "meta.json")
}

/// Save a matrix as `<stem>.f32` + `<stem>.meta.json`.
///
/// `meta.rows`/`meta.cols` are overwritten from the matrix shape and the
/// non-finite flag is refreshed, so callers only fill the descriptive fields.
pub fn save_matrix(stem: impl AsRef<Path>, m: &Array2<f32>, meta: &MatrixMeta) -> Result<()> {
    let stem = stem.as_ref();
    let mut meta = meta.clone();
    meta.rows = m.nrows();
    meta.cols = m.ncols();
    meta.dtype = Dtype::F32;
    meta.has_non_finite = m.iter().any(|v| !v.is_finite());

    let dpath = data_path(stem, Dtype::F32);
    if let Some(parent) = dpath.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for row in m.rows() {
        for &v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(&dpath, &bytes)?;
    write_meta(&meta_path(stem, Dtype::F32), &meta)
}

/// Load a matrix saved by [`save_matrix`].
pub fn load_matrix(stem: impl AsRef<Path>) -> Result<(Array2<f32>, MatrixMeta)> {
    let stem = stem.as_ref();
    let mpath = meta_path(stem, Dtype::F32);
    let meta = read_meta(&mpath)?;
    let dpath = data_path(stem, Dtype::F32);
    let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    let expected = meta.rows * meta.cols * 4;
    if bytes.len() != expected {
        return Err(Error::Meta {
            path: dpath.display().to_string(),
            detail: format!(
                "sidecar says {}x{} ({} bytes) but file holds {} bytes",
                meta.rows,
                meta.cols,
                expected,
                bytes.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(meta.rows * meta.cols);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let m = Array2::from_shape_vec((meta.rows, meta.cols), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((m, meta))
}

/// 64-bit variant used for model checkpoints (`<stem>.f64`).
pub fn save_matrix_f64(stem: impl AsRef<Path>, m: &Array2<f64>, meta: &MatrixMeta) -> Result<()> {
    let stem = stem.as_ref();
    let mut meta = meta.clone();
    meta.rows = m.nrows();
    meta.cols = m.ncols();
    meta.dtype = Dtype::F64;
    meta.has_non_finite = m.iter().any(|v| !v.is_finite());

    let dpath = data_path(stem, Dtype::F64);
    if let Some(parent) = dpath.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for row in m.rows() {
        for &v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(&dpath, &bytes)?;
    write_meta(&meta_path(stem, Dtype::F64), &meta)
}

pub fn load_matrix_f64(stem: impl AsRef<Path>) -> Result<(Array2<f64>, MatrixMeta)> {
    let stem = stem.as_ref();
    let meta = read_meta(&meta_path(stem, Dtype::F64))?;
    let dpath = data_path(stem, Dtype::F64);
    let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    let expected = meta.rows * meta.cols * 8;
    if bytes.len() != expected {
        return Err(Error::Meta {
            path: dpath.display().to_string(),
            detail: format!(
                "sidecar says {}x{} ({} bytes) but file holds {} bytes",
                meta.rows,
                meta.cols,
                expected,
                bytes.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(meta.rows * meta.cols);
    for chunk in bytes.chunks_exact(8) {
        let mut b = [0u8; 8];
        b.copy_from_slice(chunk);
        data.push(f64::from_le_bytes(b));
    }
    let m = Array2::from_shape_vec((meta.rows, meta.cols), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((m, meta))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_meta(path: &Path, meta: &MatrixMeta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Meta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    write_file(path, json.as_bytes())
}

fn read_meta(path: &Path) -> Result<MatrixMeta> {
    let mut s = String::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_string(&mut s)
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Meta {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let m = array![[1.0f32, 2.5, -3.0, 4.25], [5.0, 6.5, 7.0, -8.125], [
            9.0, 10.5, 11.0, 12.0
        ]];
        let meta = MatrixMeta::new(0, 0, Role::Eeg).with_fs(500.0).with_units("uV");
        save_matrix(&stem, &m, &meta).unwrap();
        let (back, meta2) = load_matrix(&stem).unwrap();
        assert_eq!(m, back);
        assert_eq!(meta2.rows, 3);
        assert_eq!(meta2.cols, 4);
        assert_eq!(meta2.fs_hz, Some(500.0));
    }

    #[test]
    fn byte_length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let m = Array2::<f32>::zeros((2, 3));
        save_matrix(&stem, &m, &MatrixMeta::new(0, 0, Role::Kin)).unwrap();
        // Truncate the payload behind the sidecar's back.
        let dpath = dir.path().join("m.f32");
        let bytes = fs::read(&dpath).unwrap();
        fs::write(&dpath, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_matrix(&stem), Err(Error::Meta { .. })));
    }

    #[test]
    fn window_checksum_round_trip() {
        // 18x45 block with distinct values, compared byte-for-byte.
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("w");
        let m = Array2::from_shape_fn((18, 45), |(i, j)| (i as f32 * 45.0 + j as f32) * 0.125 - 7.0);
        save_matrix(&stem, &m, &MatrixMeta::new(0, 0, Role::Eeg)).unwrap();
        let saved = fs::read(dir.path().join("w.f32")).unwrap();
        let (back, _) = load_matrix(&stem).unwrap();
        let mut again = Vec::new();
        for row in back.rows() {
            for &v in row {
                again.extend_from_slice(&v.to_le_bytes());
            }
        }
        assert_eq!(saved, again);
        assert_eq!(m, back);
    }

    #[test]
    fn non_finite_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let mut m = Array2::<f32>::zeros((2, 2));
        m[[0, 1]] = f32::NAN;
        save_matrix(&stem, &m, &MatrixMeta::new(0, 0, Role::Source)).unwrap();
        let (_, meta) = load_matrix(&stem).unwrap();
        assert!(meta.has_non_finite);
    }

    #[test]
    fn f64_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("p");
        let m = Array2::from_shape_fn((3, 7), |(i, j)| {
            (i as f64 + 1.0).sqrt() * (j as f64 - 3.0).exp()
        });
        save_matrix_f64(&stem, &m, &MatrixMeta::new(0, 0, Role::Model)).unwrap();
        let (back, meta) = load_matrix_f64(&stem).unwrap();
        assert_eq!(meta.dtype, Dtype::F64);
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
