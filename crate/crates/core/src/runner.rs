//! Config-driven experiment orchestration.
//!
//! A run loads or synthesizes sessions, conditions them, builds sensor
//! and/or source features, extracts lagged windows over the configured
//! grid, trains and evaluates every (subject/fold x domain x model x lag x
//! window) cell, and writes `results.csv`, `aggregate.csv`, `report.md`,
//! `ttests.csv`, and a manifest. Stage outputs are cached under the output
//! directory keyed by content hashes, so re-runs skip completed work and a
//! deleted intermediate is rebuilt bit-identically. Grid cells execute in
//! parallel; `ESIGAL_WORKERS` caps the worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, evaluate_model_per_trial_mean, MlrPredictor, NeuralPredictor};
use crate::neural::{build_model, mlr_fit, train_model, Arch, TrainConfig};
use crate::pipeline::{
    preprocess_session, sensor_features, source_features, trial_spans, PreprocessOptions,
    PreprocessedSession,
};
use crate::report::{
    aggregate, aggregate_csv_string, render_markdown, results_csv_string, ttests_csv_string, Model,
    ResultRecord,
};
use crate::session::{load_leadfield, load_session, save_leadfield, save_session, LeadField, RawSession};
use crate::synth::{generate_leadfield, generate_session_with_leadfield, SynthConfig};
use crate::windowing::{
    build_dataset, split_inter, split_intra, Domain, Trial, WindowedDataset, MAX_BUDGET_MS,
};
use crate::{container, pipeline};

/// Where the run's input recordings come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Generate pseudo-subjects that share one lead field.
    Synthetic {
        subjects: usize,
        trials: usize,
        channels: usize,
        sources: usize,
        snr: f64,
        trial_len_ms: f64,
    },
    /// Converted recordings on disk (session stems plus a lead-field stem).
    Files {
        sessions: Vec<PathBuf>,
        #[serde(default)]
        leadfield: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.eps {
            cfg.eps = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCell {
    pub lag_ms: usize,
    pub window_ms: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub domains: Vec<Domain>,
    pub models: Vec<Model>,
    pub lags_ms: Vec<usize>,
    pub windows_ms: Vec<usize>,
    pub split: SplitMode,
    pub seed: u64,
    /// Sensor-domain channel selection (18 names for the nominal setup).
    #[serde(default)]
    pub channels: Vec<String>,
    /// Source-domain ROI selection (15 names for the nominal setup).
    #[serde(default)]
    pub rois: Vec<String>,
    /// SNR used in the inverse-operator regularization rule.
    #[serde(default = "default_esi_snr")]
    pub esi_snr: f64,
    #[serde(default)]
    pub norm_scope: pipeline::NormScope,
    /// Evaluate the mean of per-trial PCCs instead of the concatenated PCC.
    #[serde(default)]
    pub pcc_per_trial_mean: bool,
    #[serde(default = "default_true")]
    pub allow_split_fallback: bool,
    #[serde(default)]
    pub train: TrainOverrides,
    pub out_dir: PathBuf,
    /// Grid cell whose per-subject values feed the t-test tables; defaults
    /// to the first (lag, window) pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_cell: Option<ReportCell>,
}

fn default_esi_snr() -> f64 {
    3.0
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative paths are resolved against the config file location.
        if let Some(dir) = path.parent() {
            if let DataSpec::Files { sessions, leadfield } = &mut cfg.data {
                for s in sessions.iter_mut() {
                    if s.is_relative() {
                        *s = dir.join(&s);
                    }
                }
                if let Some(lf) = leadfield {
                    if lf.is_relative() {
                        *lf = dir.join(&lf);
                    }
                }
            }
            if cfg.out_dir.is_relative() {
                cfg.out_dir = dir.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.models.is_empty() {
            return Err(Error::Config("domains and models must be non-empty".into()));
        }
        if self.lags_ms.is_empty() || self.windows_ms.is_empty() {
            return Err(Error::Config("lag and window grids must be non-empty".into()));
        }
        for &lag in &self.lags_ms {
            for &win in &self.windows_ms {
                if lag % 10 != 0 || win % 10 != 0 || lag == 0 || win == 0 {
                    return Err(Error::Config(format!(
                        "grid cell ({lag}, {win}) must use positive multiples of 10 ms"
                    )));
                }
                if lag + win > MAX_BUDGET_MS {
                    return Err(Error::Config(format!(
                        "grid cell ({lag}, {win}) exceeds the {MAX_BUDGET_MS} ms budget"
                    )));
                }
            }
        }
        if self.domains.contains(&Domain::Sensor) && self.channels.is_empty() {
            return Err(Error::Config("sensor domain requires a channel list".into()));
        }
        if self.domains.contains(&Domain::Source) {
            if self.rois.is_empty() {
                return Err(Error::Config("source domain requires an ROI list".into()));
            }
            if let DataSpec::Files { leadfield: None, .. } = &self.data {
                return Err(Error::Config("source domain requires a lead field".into()));
            }
        }
        if !(self.esi_snr > 0.0) {
            return Err(Error::Config("esi_snr must be positive".into()));
        }
        if let Some(cell) = &self.report_cell {
            if !self.lags_ms.contains(&cell.lag_ms) || !self.windows_ms.contains(&cell.window_ms) {
                return Err(Error::Config("report_cell must be on the configured grid".into()));
            }
        }
        match &self.data {
            DataSpec::Synthetic { subjects, trials, channels, sources, snr, trial_len_ms } => {
                if *subjects == 0 || *trials == 0 {
                    return Err(Error::Config("synthetic data needs subjects and trials".into()));
                }
                if sources < channels {
                    return Err(Error::Config("synthetic lead field needs sources >= channels".into()));
                }
                if !(*snr > 0.0) || !(*trial_len_ms > 0.0) {
                    return Err(Error::Config("synthetic snr and trial_len_ms must be positive".into()));
                }
            }
            DataSpec::Files { sessions, leadfield } => {
                if sessions.is_empty() {
                    return Err(Error::Config("no session stems listed".into()));
                }
                for stem in sessions {
                    let probe = append_name(stem, ".session.json");
                    if !probe.exists() {
                        return Err(Error::Config(format!("missing session file {}", probe.display())));
                    }
                }
                if let Some(lf) = leadfield {
                    let probe = append_name(lf, ".meta.json");
                    if !probe.exists() {
                        return Err(Error::Config(format!("missing lead field {}", probe.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

fn append_name(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// FNV-1a over a string; the stable per-cell seed derivation.
pub fn stable_hash64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn sha_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStatus {
    pub id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub cache: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
    pub sessions: Vec<String>,
    pub cells: Vec<CellStatus>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: usize,
    pub failed: Vec<(String, String)>,
    pub results_csv: PathBuf,
}

/// Cap the global worker pool from `ESIGAL_WORKERS` (first call wins).
pub fn init_workers() {
    if let Ok(v) = std::env::var("ESIGAL_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn config_hash(cfg: &ExperimentConfig) -> String {
    let canon = serde_json::to_string(cfg).unwrap_or_default();
    sha_hex(&[&canon])
}

/// Load a session from the stage cache or build it (and cache it). The
/// returned session always comes from the cached files, so warm and cold
/// runs see bit-identical (f32-quantized) data.
fn cached_session(
    cache_dir: &Path,
    key: &str,
    build: impl FnOnce() -> Result<RawSession>,
) -> Result<RawSession> {
    let stem = cache_dir.join("sessions").join(key);
    if !append_name(&stem, ".session.json").exists() {
        let session = build()?;
        save_session(&stem, &session)?;
    }
    load_session(&stem)
}

fn cached_leadfield(
    cache_dir: &Path,
    key: &str,
    build: impl FnOnce() -> Result<LeadField>,
) -> Result<LeadField> {
    let stem = cache_dir.join("leadfields").join(key);
    if !append_name(&stem, ".meta.json").exists() {
        let lf = build()?;
        save_leadfield(&stem, &lf)?;
    }
    load_leadfield(&stem)
}

/// Preprocessed sessions round-trip through the cache the same way.
fn cached_preprocessed(
    cache_dir: &Path,
    key: &str,
    build: impl FnOnce() -> Result<PreprocessedSession>,
) -> Result<PreprocessedSession> {
    let stem = cache_dir.join("prep").join(key);
    let header = append_name(&stem, ".prep.json");
    if !header.exists() {
        let p = build()?;
        save_preprocessed(&stem, &p)?;
    }
    load_preprocessed(&stem)
}

#[derive(Debug, Serialize, Deserialize)]
struct PrepHeader {
    subject_id: String,
    fs: f64,
    markers: Vec<crate::session::TrialMarker>,
    kin_stats: crate::session::NormStats,
}

pub fn save_preprocessed(stem: impl AsRef<Path>, p: &PreprocessedSession) -> Result<()> {
    let stem = stem.as_ref();
    container::save_matrix(
        append_name(stem, ".eeg"),
        &p.eeg.mapv(|v| v as f32),
        &container::MatrixMeta::new(0, 0, container::Role::Eeg)
            .with_fs(p.fs)
            .with_units("uV")
            .with_channel_names(&p.channel_names),
    )?;
    container::save_matrix(
        append_name(stem, ".kin"),
        &p.kin.mapv(|v| v as f32),
        &container::MatrixMeta::new(0, 0, container::Role::Kin)
            .with_fs(p.fs)
            .with_units("normalized"),
    )?;
    let header = PrepHeader {
        subject_id: p.subject_id.clone(),
        fs: p.fs,
        markers: p.markers.clone(),
        kin_stats: p.kin_stats.clone(),
    };
    let hpath = append_name(stem, ".prep.json");
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Meta {
        path: hpath.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))
}

pub fn load_preprocessed(stem: impl AsRef<Path>) -> Result<PreprocessedSession> {
    let stem = stem.as_ref();
    let hpath = append_name(stem, ".prep.json");
    let text = std::fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: PrepHeader = serde_json::from_str(&text).map_err(|e| Error::Meta {
        path: hpath.display().to_string(),
        detail: e.to_string(),
    })?;
    let (eeg, meta) = container::load_matrix(append_name(stem, ".eeg"))?;
    let (kin, _) = container::load_matrix(append_name(stem, ".kin"))?;
    Ok(PreprocessedSession {
        subject_id: header.subject_id,
        eeg: eeg.mapv(f64::from),
        channel_names: meta.channel_names.unwrap_or_default(),
        kin: kin.mapv(f64::from),
        kin_stats: header.kin_stats,
        fs: header.fs,
        markers: header.markers,
    })
}

struct SubjectFeatures {
    subject_id: String,
    domain: Domain,
    trials: Arc<Vec<Trial>>,
}

/// Everything the grid needs from one subject: trials per requested domain.
fn prepare_subject(
    cfg: &ExperimentConfig,
    cache_dir: &Path,
    session: &RawSession,
    lf: Option<&LeadField>,
    session_key: &str,
    split_seed: u64,
) -> Result<Vec<SubjectFeatures>> {
    // With train-trials normalization the statistics depend on the split,
    // so the split is derived before preprocessing.
    let n_markers = session.trials.len();
    let train_marker_ids: Option<Vec<usize>> = match cfg.norm_scope {
        pipeline::NormScope::Recording => None,
        pipeline::NormScope::TrainTrials => {
            if cfg.split == SplitMode::Inter {
                log::warn!("train-trials normalization applies to intra splits; using recording scope");
                None
            } else {
                let split = split_intra(n_markers, split_seed, cfg.allow_split_fallback)?;
                Some(split.train)
            }
        }
    };
    let kin_spans_raw = train_marker_ids.as_ref().map(|ids| {
        let pre = (0.65 * session.eeg_fs).round() as usize;
        let mut spans: Vec<(usize, usize)> = ids
            .iter()
            .filter_map(|&i| session.trials.get(i))
            .map(|m| (m.onset_sample.saturating_sub(pre), m.return_sample))
            .collect();
        spans.sort_unstable();
        spans
    });

    let opts = PreprocessOptions {
        kin_norm_spans: kin_spans_raw,
        ..Default::default()
    };
    let scope_tag = match cfg.norm_scope {
        pipeline::NormScope::Recording => "recording".to_string(),
        pipeline::NormScope::TrainTrials => format!("train{split_seed}"),
    };
    let prep_key = sha_hex(&[session_key, "prep", &scope_tag]);
    let p = cached_preprocessed(cache_dir, &prep_key, || preprocess_session(session, &opts))?;

    let feat_spans = train_marker_ids
        .as_ref()
        .map(|ids| trial_spans(&p.markers, ids));

    let mut out = Vec::new();
    for domain in &cfg.domains {
        let feat = match domain {
            Domain::Sensor => sensor_features(&p, &cfg.channels, feat_spans.as_deref())?.0,
            Domain::Source => {
                let lf = lf.ok_or_else(|| Error::Config("source domain requires a lead field".into()))?;
                source_features(&p, lf, &cfg.rois, cfg.esi_snr, feat_spans.as_deref())?.0
            }
        };
        let (trials, skipped) = pipeline::make_trials(&feat, &p);
        if skipped > 0 {
            log::warn!("subject {}: {skipped} trials skipped", p.subject_id);
        }
        out.push(SubjectFeatures {
            subject_id: p.subject_id.clone(),
            domain: *domain,
            trials: Arc::new(trials),
        });
    }
    Ok(out)
}

struct CellOutcome {
    id: String,
    cache_rel: String,
    result: std::result::Result<Vec<ResultRecord>, String>,
}

fn run_cell_cached(
    cache_dir: &Path,
    id: &str,
    run: impl FnOnce() -> Result<Vec<ResultRecord>>,
) -> CellOutcome {
    let key = sha_hex(&["cell", id]);
    let path = cache_dir.join("cells").join(format!("{key}.json"));
    let cache_rel = format!("cache/cells/{key}.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(records) = serde_json::from_str::<Vec<ResultRecord>>(&text) {
            return CellOutcome {
                id: id.to_string(),
                cache_rel,
                result: Ok(records),
            };
        }
    }
    match run() {
        Ok(records) => {
            if let Some(parent) = path.parent() {
                let _ = std::fs::create_dir_all(parent);
            }
            match serde_json::to_string_pretty(&records) {
                Ok(json) => {
                    if let Err(e) = std::fs::write(&path, json) {
                        return CellOutcome {
                            id: id.to_string(),
                            cache_rel,
                            result: Err(format!("cache write failed: {e}")),
                        };
                    }
                }
                Err(e) => {
                    return CellOutcome {
                        id: id.to_string(),
                        cache_rel,
                        result: Err(e.to_string()),
                    }
                }
            }
            CellOutcome {
                id: id.to_string(),
                cache_rel,
                result: Ok(records),
            }
        }
        Err(e) => CellOutcome {
            id: id.to_string(),
            cache_rel,
            result: Err(e.to_string()),
        },
    }
}

fn train_and_eval(
    cfg: &ExperimentConfig,
    model: Model,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    test_sets: &[(String, WindowedDataset)],
    split_label: &str,
    seed: u64,
    domain: Domain,
    lag_ms: usize,
    window_ms: usize,
) -> Result<Vec<ResultRecord>> {
    let mut records = Vec::new();
    match model {
        Model::Mlr => {
            let x = train_set.design_matrix();
            let fitted = mlr_fit(&x, &train_set.targets)?;
            let predictor = MlrPredictor { model: &fitted };
            for (subject, test) in test_sets {
                let pcc = if cfg.pcc_per_trial_mean {
                    evaluate_model_per_trial_mean(&predictor, test)?
                } else {
                    evaluate_model(&predictor, test)?
                };
                records.push(ResultRecord {
                    subject: subject.clone(),
                    domain,
                    model,
                    lag_ms,
                    window_ms,
                    split: split_label.to_string(),
                    pcc,
                });
            }
        }
        Model::EegNet | Model::DeepConvNet | Model::ShallowConvNet => {
            let arch = match model {
                Model::EegNet => Arch::EegNet,
                Model::DeepConvNet => Arch::DeepConvNet,
                Model::ShallowConvNet => Arch::ShallowConvNet,
                Model::Mlr => unreachable!(),
            };
            let spec = build_model(arch, train_set.n_channels(), train_set.window_len())?;
            let tc = cfg.train.apply(seed);
            let (params, _history) = train_model(
                &spec,
                &train_set.inputs,
                &train_set.targets,
                &val_set.inputs,
                &val_set.targets,
                &tc,
            )?;
            let predictor = NeuralPredictor {
                spec: &spec,
                params: &params,
            };
            for (subject, test) in test_sets {
                let pcc = if cfg.pcc_per_trial_mean {
                    evaluate_model_per_trial_mean(&predictor, test)?
                } else {
                    evaluate_model(&predictor, test)?
                };
                records.push(ResultRecord {
                    subject: subject.clone(),
                    domain,
                    model,
                    lag_ms,
                    window_ms,
                    split: split_label.to_string(),
                    pcc,
                });
            }
        }
    }
    Ok(records)
}

fn subset(trials: &[Trial], keep: &[usize]) -> Vec<Trial> {
    keep.iter().filter_map(|&i| trials.get(i).cloned()).collect()
}

/// Execute the full grid described by the config.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    init_workers();
    let out_dir = cfg.out_dir.clone();
    let cache_dir = out_dir.join("cache");
    std::fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;
    let cfg_hash = config_hash(cfg);

    // Stage 1: sessions and the lead field.
    let mut sessions: Vec<RawSession> = Vec::new();
    let mut session_keys: Vec<String> = Vec::new();
    let mut leadfield: Option<LeadField> = None;
    match &cfg.data {
        DataSpec::Synthetic {
            subjects,
            trials,
            channels,
            sources,
            snr,
            trial_len_ms,
        } => {
            let synth_cfg = SynthConfig {
                n_trials: *trials,
                n_channels: *channels,
                n_sources: *sources,
                snr: *snr,
                trial_len_ms: *trial_len_ms,
                ..Default::default()
            };
            let lf_key = sha_hex(&[
                "leadfield",
                &cfg.seed.to_string(),
                &format!("{channels}x{sources}"),
            ]);
            let lf = cached_leadfield(&cache_dir, &lf_key, || generate_leadfield(cfg.seed, &synth_cfg))?;
            for s in 0..*subjects {
                let subject_id = format!("S{:02}", s + 1);
                let sess_seed = stable_hash64(&format!("session|{}|{}", cfg.seed, subject_id));
                let key = sha_hex(&[
                    "synth",
                    &cfg.seed.to_string(),
                    &subject_id,
                    &format!("{trials}|{channels}|{sources}|{snr}|{trial_len_ms}"),
                ]);
                let synth_cfg = synth_cfg.clone();
                let lf_ref = &lf;
                let session = cached_session(&cache_dir, &key, move || {
                    let mut sess = generate_session_with_leadfield(sess_seed, &synth_cfg, lf_ref)?;
                    sess.subject_id = subject_id;
                    Ok(sess)
                })?;
                sessions.push(session);
                session_keys.push(key);
            }
            leadfield = Some(lf);
        }
        DataSpec::Files { sessions: stems, leadfield: lf_stem } => {
            for stem in stems {
                let session = load_session(stem)?;
                session_keys.push(sha_hex(&["file", &stem.display().to_string()]));
                sessions.push(session);
            }
            if let Some(stem) = lf_stem {
                leadfield = Some(load_leadfield(stem)?);
            }
        }
    }

    // Stage 2: preprocen sessions and per-domain trials, in parallel over
    // subjects.
    let subject_results: Vec<Result<Vec<SubjectFeatures>>> = sessions
        .par_iter()
        .zip(session_keys.par_iter())
        .map(|(session, key)| {
            let split_seed = stable_hash64(&format!("split|{}|{}", cfg.seed, session.subject_id));
            prepare_subject(cfg, &cache_dir, session, leadfield.as_ref(), key, split_seed)
        })
        .collect();
    let mut features: Vec<SubjectFeatures> = Vec::new();
    for r in subject_results {
        features.extend(r?);
    }

    let by_subject_domain: BTreeMap<(String, Domain), Arc<Vec<Trial>>> = features
        .into_iter()
        .map(|f| ((f.subject_id, f.domain), f.trials))
        .collect();
    let subject_ids: Vec<String> = {
        let mut ids: Vec<String> = by_subject_domain.keys().map(|(s, _)| s.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    };

    // Stage 3: enumerate grid cells.
    struct CellPlan {
        id: String,
        domain: Domain,
        model: Model,
        lag_ms: usize,
        window_ms: usize,
        split_label: String,
        train_subjects: Vec<String>,
        test_subjects: Vec<String>,
        /// Intra cells train and test within this subject.
        subject: Option<String>,
    }

    let mut plans: Vec<CellPlan> = Vec::new();
    match cfg.split {
        SplitMode::Intra => {
            for subject in &subject_ids {
                for domain in &cfg.domains {
                    for model in &cfg.models {
                        for &lag in &cfg.lags_ms {
                            for &win in &cfg.windows_ms {
                                plans.push(CellPlan {
                                    id: format!("intra|{subject}|{domain}|{model}|lag{lag}|win{win}"),
                                    domain: *domain,
                                    model: *model,
                                    lag_ms: lag,
                                    window_ms: win,
                                    split_label: "intra".to_string(),
                                    train_subjects: vec![subject.clone()],
                                    test_subjects: vec![subject.clone()],
                                    subject: Some(subject.clone()),
                                });
                            }
                        }
                    }
                }
            }
        }
        SplitMode::Inter => {
            let folds = split_inter(&subject_ids, cfg.allow_split_fallback)?;
            for (fi, fold) in folds.iter().enumerate() {
                for domain in &cfg.domains {
                    for model in &cfg.models {
                        for &lag in &cfg.lags_ms {
                            for &win in &cfg.windows_ms {
                                plans.push(CellPlan {
                                    id: format!(
                                        "inter|fold{}|{domain}|{model}|lag{lag}|win{win}",
                                        fi + 1
                                    ),
                                    domain: *domain,
                                    model: *model,
                                    lag_ms: lag,
                                    window_ms: win,
                                    split_label: format!("inter-fold-{}", fi + 1),
                                    train_subjects: fold.train_subjects.clone(),
                                    test_subjects: fold.test_subjects.clone(),
                                    subject: None,
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    // Stage 4: run the cells.
    let outcomes: Vec<CellOutcome> = plans
        .par_iter()
        .map(|plan| {
            run_cell_cached(&cache_dir, &plan.id, || {
                let seed = stable_hash64(&format!("cell|{}|{}", cfg.seed, plan.id));
                let domain = plan.domain;
                match cfg.split {
                    SplitMode::Intra => {
                        let subject = plan.subject.as_ref().expect("intra plan has a subject");
                        let trials = by_subject_domain
                            .get(&(subject.clone(), domain))
                            .ok_or_else(|| Error::Config(format!("no trials for {subject}/{domain}")))?;
                        let split_seed = stable_hash64(&format!("split|{}|{}", cfg.seed, subject));
                        let split = split_intra(trials.len(), split_seed, cfg.allow_split_fallback)?;
                        let train =
                            build_dataset(&subset(trials, &split.train), plan.lag_ms, plan.window_ms, domain)?;
                        let val =
                            build_dataset(&subset(trials, &split.val), plan.lag_ms, plan.window_ms, domain)?;
                        let test =
                            build_dataset(&subset(trials, &split.test), plan.lag_ms, plan.window_ms, domain)?;
                        train_and_eval(
                            cfg,
                            plan.model,
                            &train,
                            &val,
                            &[(subject.clone(), test)],
                            &plan.split_label,
                            seed,
                            domain,
                            plan.lag_ms,
                            plan.window_ms,
                        )
                    }
                    SplitMode::Inter => {
                        let mut pooled: Vec<Trial> = Vec::new();
                        for subject in &plan.train_subjects {
                            let trials = by_subject_domain
                                .get(&(subject.clone(), domain))
                                .ok_or_else(|| Error::Config(format!("no trials for {subject}/{domain}")))?;
                            pooled.extend(trials.iter().cloned());
                        }
                        // Hold out a tenth of the pooled trials for validation.
                        use rand::seq::SliceRandom;
                        use rand::SeedableRng;
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                        let mut order: Vec<usize> = (0..pooled.len()).collect();
                        order.shuffle(&mut rng);
                        let n_val = (pooled.len() / 10).max(1);
                        let val_ids: Vec<usize> = order[..n_val].to_vec();
                        let train_ids: Vec<usize> = order[n_val..].to_vec();
                        let train =
                            build_dataset(&subset(&pooled, &train_ids), plan.lag_ms, plan.window_ms, domain)?;
                        let val =
                            build_dataset(&subset(&pooled, &val_ids), plan.lag_ms, plan.window_ms, domain)?;
                        let mut tests = Vec::new();
                        for subject in &plan.test_subjects {
                            let trials = by_subject_domain
                                .get(&(subject.clone(), domain))
                                .ok_or_else(|| Error::Config(format!("no trials for {subject}/{domain}")))?;
                            tests.push((
                                subject.clone(),
                                build_dataset(trials, plan.lag_ms, plan.window_ms, domain)?,
                            ));
                        }
                        train_and_eval(
                            cfg,
                            plan.model,
                            &train,
                            &val,
                            &tests,
                            &plan.split_label,
                            seed,
                            domain,
                            plan.lag_ms,
                            plan.window_ms,
                        )
                    }
                }
            })
        })
        .collect();

    // Stage 5: reports.
    let mut records: Vec<ResultRecord> = Vec::new();
    let mut cells: Vec<CellStatus> = Vec::new();
    let mut failed: Vec<(String, String)> = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(rs) => {
                records.extend(rs.clone());
                cells.push(CellStatus {
                    id: o.id.clone(),
                    status: "ok".into(),
                    error: None,
                    cache: o.cache_rel.clone(),
                });
            }
            Err(e) => {
                failed.push((o.id.clone(), e.clone()));
                cells.push(CellStatus {
                    id: o.id.clone(),
                    status: "failed".into(),
                    error: Some(e.clone()),
                    cache: o.cache_rel.clone(),
                });
            }
        }
    }

    let results_csv = out_dir.join("results.csv");
    std::fs::write(&results_csv, results_csv_string(&records)).map_err(|e| Error::io(&results_csv, e))?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("results_csv".to_string(), "results.csv".to_string());

    if !records.is_empty() {
        match aggregate(&records) {
            Ok(report) => {
                let agg_path = out_dir.join("aggregate.csv");
                std::fs::write(&agg_path, aggregate_csv_string(&report)).map_err(|e| Error::io(&agg_path, e))?;
                let md_path = out_dir.join("report.md");
                std::fs::write(&md_path, render_markdown(&report, "Decoding report"))
                    .map_err(|e| Error::io(&md_path, e))?;
                artifacts.insert("aggregate_csv".to_string(), "aggregate.csv".to_string());
                artifacts.insert("report_md".to_string(), "report.md".to_string());
            }
            Err(e) => log::warn!("aggregate report skipped: {e}"),
        }
        let cell = cfg.report_cell.unwrap_or(ReportCell {
            lag_ms: cfg.lags_ms[0],
            window_ms: cfg.windows_ms[0],
        });
        match ttests_csv_string(&records, cell.lag_ms, cell.window_ms) {
            Ok(csv) => {
                let tt_path = out_dir.join("ttests.csv");
                std::fs::write(&tt_path, csv).map_err(|e| Error::io(&tt_path, e))?;
                artifacts.insert("ttests_csv".to_string(), "ttests.csv".to_string());
            }
            Err(e) => log::warn!("t-test table skipped: {e}"),
        }
    }

    let manifest = Manifest {
        config_hash: cfg_hash,
        seed: cfg.seed,
        artifacts,
        sessions: session_keys,
        cells,
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Meta {
        path: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(RunSummary {
        out_dir,
        records: records.len(),
        failed,
        results_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSpec::Synthetic {
                subjects: 2,
                trials: 12,
                channels: 8,
                sources: 32,
                snr: 5.0,
                trial_len_ms: 900.0,
            },
            domains: vec![Domain::Sensor],
            models: vec![Model::Mlr],
            lags_ms: vec![100],
            windows_ms: vec![250],
            split: SplitMode::Intra,
            seed: 3,
            channels: (1..=8).map(|c| format!("CH{c:02}")).collect(),
            rois: Vec::new(),
            esi_snr: 3.0,
            norm_scope: pipeline::NormScope::Recording,
            pcc_per_trial_mean: false,
            allow_split_fallback: true,
            train: TrainOverrides::default(),
            out_dir: dir.to_path_buf(),
            report_cell: None,
        }
    }

    #[test]
    fn config_validation_catches_grid_violations() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.lags_ms = vec![250];
        cfg.windows_ms = vec![450];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("650"));

        let mut cfg = tiny_config(dir.path());
        cfg.channels.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mlr_only_run_completes_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let mut cfg = tiny_config(&out_a);
        let summary = run_pipeline(&cfg).unwrap();
        assert!(summary.failed.is_empty());
        assert_eq!(summary.records, 2); // 2 subjects x 1 cell
        let a = std::fs::read(&summary.results_csv).unwrap();

        cfg.out_dir = out_b;
        let summary2 = run_pipeline(&cfg).unwrap();
        let b = std::fs::read(&summary2.results_csv).unwrap();
        assert_eq!(a, b, "fresh runs must produce byte-identical results.csv");

        // Warm re-run out of the cache is also identical.
        let summary3 = run_pipeline(&cfg).unwrap();
        let c = std::fs::read(&summary3.results_csv).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn deleting_intermediates_reproduces_them() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        run_pipeline(&cfg).unwrap();
        let results = std::fs::read(dir.path().join("results.csv")).unwrap();
        // Drop the preprocessed stage and the cell results, keep sessions.
        std::fs::remove_dir_all(dir.path().join("cache/prep")).unwrap();
        std::fs::remove_dir_all(dir.path().join("cache/cells")).unwrap();
        run_pipeline(&cfg).unwrap();
        let again = std::fs::read(dir.path().join("results.csv")).unwrap();
        assert_eq!(results, again);
    }
}
