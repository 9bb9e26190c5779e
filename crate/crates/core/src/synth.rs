//! Synthetic grasp-and-lift sessions.
//!
//! The generator exists so the whole pipeline can be exercised and tested
//! without the real recordings. Kinematics are smooth minimum-jerk
//! reach/hold/return profiles; a small set of cortical sources is linearly
//! driven by the (time-advanced) kinematics so that pre-movement windows
//! carry decodable information; EEG is the lead-field projection of those
//! sources plus white Gaussian noise at a requested SNR. Everything is
//! drawn from a counter-based RNG, so a seed fully determines the output.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::session::{LeadField, ObjectWeight, RawSession, Surface, TrialMarker};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_trials: usize,
    /// Number of EEG channels (I).
    pub n_channels: usize,
    /// Number of cortical sources (K).
    pub n_sources: usize,
    /// Ratio of clean-signal std to noise std. `f64::INFINITY` disables noise.
    pub snr: f64,
    /// Movement duration per trial.
    pub trial_len_ms: f64,
    pub fs: f64,
    /// Rest between the return of one trial and the onset of the next.
    pub gap_ms: f64,
    /// Quiet span before the first onset and after the last return.
    pub lead_in_ms: f64,
    pub n_rois: usize,
    /// How many sources are driven by the kinematics.
    pub n_active_sources: usize,
    /// How far source activity precedes the movement it encodes.
    pub neural_lead_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_trials: 40,
            n_channels: 32,
            n_sources: 200,
            snr: 5.0,
            trial_len_ms: 1200.0,
            fs: 500.0,
            gap_ms: 1000.0,
            lead_in_ms: 2500.0,
            n_rois: 15,
            n_active_sources: 12,
            neural_lead_ms: 300.0,
        }
    }
}

/// Minimum-jerk step: 0 at u=0, 1 at u=1, zero velocity/acceleration at both.
fn minjerk_step(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Smooth out-hold-back profile over phase p in [0, 1].
fn bump(p: f64, up_end: f64, down_start: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else if p < up_end {
        minjerk_step(p / up_end)
    } else if p < down_start {
        1.0
    } else {
        1.0 - minjerk_step((p - down_start) / (1.0 - down_start))
    }
}

/// Deterministic random lead field with balanced contiguous ROI blocks.
pub fn generate_leadfield(seed: u64, cfg: &SynthConfig) -> Result<LeadField> {
    let (i, k) = (cfg.n_channels, cfg.n_sources);
    if k < i {
        return Err(Error::InvalidArgument(format!(
            "need at least as many sources as channels, got I={i}, K={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_6164);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let gain = Array2::from_shape_fn((i, k), |_| normal.sample(&mut rng));
    let channel_names = (0..i).map(|c| format!("CH{:02}", c + 1)).collect();
    let source_positions =
        Array2::from_shape_fn((k, 3), |_| rng.gen_range(-70.0..70.0f64));
    let n_rois = cfg.n_rois.min(k).max(1);
    let atlas_label: Vec<u32> = (0..k).map(|j| ((j * n_rois) / k) as u32).collect();
    let mut atlas_names = BTreeMap::new();
    for r in 0..n_rois {
        atlas_names.insert(r as u32, format!("ROI_{:02}", r + 1));
    }
    let lf = LeadField {
        gain,
        channel_names,
        source_positions,
        atlas_label,
        atlas_names,
    };
    lf.validate()?;
    Ok(lf)
}

/// Generate a session driven through the given lead field. Useful when
/// several pseudo-subjects should share one head model.
pub fn generate_session_with_leadfield(
    seed: u64,
    cfg: &SynthConfig,
    lf: &LeadField,
) -> Result<RawSession> {
    if cfg.n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    if cfg.trial_len_ms <= 0.0 {
        return Err(Error::InvalidArgument("trial_len_ms must be positive".into()));
    }
    if !(cfg.snr > 0.0) {
        return Err(Error::InvalidArgument("snr must be positive".into()));
    }
    let fs = cfg.fs;
    let trial_len = (cfg.trial_len_ms / 1000.0 * fs).round() as usize;
    let gap = (cfg.gap_ms / 1000.0 * fs).round() as usize;
    let lead_in = (cfg.lead_in_ms / 1000.0 * fs).round() as usize;
    let total = lead_in + cfg.n_trials * (trial_len + gap) + lead_in;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    // Kinematics: baseline plus per-trial reach (x, y) and lift (z) bumps.
    let baseline = [
        250.0 + rng.gen_range(-20.0..20.0),
        180.0 + rng.gen_range(-20.0..20.0),
        40.0 + rng.gen_range(-5.0..5.0),
    ];
    let mut kin = Array2::from_shape_fn((3, total), |(a, _)| baseline[a]);
    let mut trials = Vec::with_capacity(cfg.n_trials);
    let weights = [ObjectWeight::Grams165, ObjectWeight::Grams330, ObjectWeight::Grams660];
    let surfaces = [Surface::Sandpaper, Surface::Suede, Surface::Silk];
    for t in 0..cfg.n_trials {
        let onset = lead_in + t * (trial_len + gap);
        let ret = onset + trial_len;
        let weight = weights[rng.gen_range(0..3)];
        let surface = surfaces[rng.gen_range(0..3)];
        let heft = match weight {
            ObjectWeight::Grams165 => 1.0,
            ObjectWeight::Grams330 => 0.95,
            ObjectWeight::Grams660 => 0.9,
        };
        let amp = [
            220.0 * (1.0 + 0.08 * normal.sample(&mut rng)),
            120.0 * (1.0 + 0.08 * normal.sample(&mut rng)),
            80.0 * heft * (1.0 + 0.08 * normal.sample(&mut rng)),
        ];
        for s in onset..=ret.min(total - 1) {
            let p = (s - onset) as f64 / trial_len as f64;
            kin[[0, s]] = baseline[0] + amp[0] * bump(p, 0.35, 0.65);
            kin[[1, s]] = baseline[1] + amp[1] * bump(p, 0.35, 0.65);
            kin[[2, s]] = baseline[2] + amp[2] * bump(p, 0.45, 0.55).powf(1.2);
        }
        trials.push(TrialMarker {
            onset_sample: onset,
            return_sample: ret,
            weight_grams: weight,
            surface,
        });
    }

    // Zero-mean kinematic drive signals (position deviation and velocity).
    let mut drive = Array2::<f64>::zeros((6, total));
    for a in 0..3 {
        let scale = kin
            .row(a)
            .iter()
            .map(|v| (v - baseline[a]).abs())
            .fold(0.0f64, f64::max)
            .max(1e-9);
        for s in 0..total {
            drive[[a, s]] = (kin[[a, s]] - baseline[a]) / scale;
        }
        for s in 0..total {
            let prev = if s == 0 { 0 } else { s - 1 };
            let next = (s + 1).min(total - 1);
            drive[[a + 3, s]] = (drive[[a, next]] - drive[[a, prev]]) * fs / (next - prev).max(1) as f64;
        }
        // Scale velocity rows to unit peak as well.
        let vscale = drive
            .row(a + 3)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-9);
        for s in 0..total {
            drive[[a + 3, s]] /= vscale;
        }
    }

    // Active sources read the drive `neural_lead_ms` ahead of real time.
    let k = lf.n_sources();
    let lead = (cfg.neural_lead_ms / 1000.0 * fs).round() as usize;
    let n_active = cfg.n_active_sources.min(k).max(1);
    let mut active: Vec<usize> = Vec::with_capacity(n_active);
    while active.len() < n_active {
        let j = rng.gen_range(0..k);
        if !active.contains(&j) {
            active.push(j);
        }
    }
    let mut mix = Array2::<f64>::zeros((n_active, 6));
    for r in 0..n_active {
        for c in 0..6 {
            mix[[r, c]] = normal.sample(&mut rng);
        }
    }
    let mut sources = Array2::<f64>::zeros((k, total));
    for (r, &j) in active.iter().enumerate() {
        for s in 0..total {
            let ahead = (s + lead).min(total - 1);
            let mut v = 0.0;
            for c in 0..6 {
                v += mix[[r, c]] * drive[[c, ahead]];
            }
            sources[[j, s]] = 5.0 * v;
        }
    }

    // Project to the scalp and add white noise scaled to the requested SNR.
    let clean = lf.gain.dot(&sources);
    let mean = clean.sum() / clean.len() as f64;
    let var = clean.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / clean.len() as f64;
    let noise_std = if cfg.snr.is_finite() { var.sqrt() / cfg.snr } else { 0.0 };
    let mut eeg = clean;
    if noise_std > 0.0 {
        for v in eeg.iter_mut() {
            *v += noise_std * normal.sample(&mut rng);
        }
    }

    let session = RawSession {
        subject_id: format!("S{:02}", (seed % 99) + 1),
        eeg,
        eeg_fs: fs,
        eeg_channel_names: lf.channel_names.clone(),
        kin,
        kin_fs: fs,
        trials,
    };
    session.validate()?;
    Ok(session)
}

/// Generate a session together with its own lead field.
pub fn generate_synthetic_session(seed: u64, cfg: &SynthConfig) -> Result<(RawSession, LeadField)> {
    let lf = generate_leadfield(seed, cfg)?;
    let session = generate_session_with_leadfield(seed, cfg, &lf)?;
    Ok((session, lf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            n_trials: 3,
            n_channels: 8,
            n_sources: 24,
            ..Default::default()
        };
        let (a, lfa) = generate_synthetic_session(11, &cfg).unwrap();
        let (b, lfb) = generate_synthetic_session(11, &cfg).unwrap();
        assert_eq!(a.eeg, b.eeg);
        assert_eq!(a.kin, b.kin);
        assert_eq!(lfa.gain, lfb.gain);
        assert_eq!(a.trials.len(), 3);
    }

    #[test]
    fn infinite_snr_means_no_noise() {
        let cfg = SynthConfig {
            n_trials: 2,
            n_channels: 6,
            n_sources: 12,
            snr: f64::INFINITY,
            ..Default::default()
        };
        let lf = generate_leadfield(5, &cfg).unwrap();
        let sess = generate_session_with_leadfield(5, &cfg, &lf).unwrap();
        // Reconstruct gain*sources by re-running with the same seed and
        // checking that adding zero noise reproduced the EEG exactly:
        // a second run must match bit for bit.
        let sess2 = generate_session_with_leadfield(5, &cfg, &lf).unwrap();
        assert_eq!(sess.eeg, sess2.eeg);
        // All bumps return to baseline between trials.
        let g = sess.trials[0].return_sample + 200;
        assert!((sess.kin[[0, g]] - sess.kin[[0, 0]]).abs() < 1e-9);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.n_sources = 4;
        cfg.n_channels = 8;
        assert!(generate_synthetic_session(1, &cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.trial_len_ms = 0.0;
        assert!(generate_synthetic_session(1, &cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.n_trials = 0;
        assert!(generate_synthetic_session(1, &cfg).is_err());
    }

    #[test]
    fn variance_decomposes_with_snr() {
        let cfg = SynthConfig {
            n_trials: 12,
            n_channels: 16,
            n_sources: 64,
            snr: 2.0,
            ..Default::default()
        };
        let lf = generate_leadfield(3, &cfg).unwrap();
        let sess = generate_session_with_leadfield(3, &cfg, &lf).unwrap();
        // Rebuild the clean projection by regenerating with infinite SNR:
        // the RNG stream for kinematics/sources is identical because noise
        // draws come last.
        let clean_cfg = SynthConfig { snr: f64::INFINITY, ..cfg.clone() };
        let clean = generate_session_with_leadfield(3, &clean_cfg, &lf).unwrap();
        let var = |m: &Array2<f64>| {
            let mean = m.sum() / m.len() as f64;
            m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.len() as f64
        };
        let v_eeg = var(&sess.eeg);
        let v_clean = var(&clean.eeg);
        let expected = v_clean * (1.0 + 1.0 / (cfg.snr * cfg.snr));
        let rel = (v_eeg - expected).abs() / expected;
        assert!(rel < 0.10, "variance decomposition off by {:.1}%", rel * 100.0);
    }

    #[test]
    fn markers_satisfy_invariants() {
        let cfg = SynthConfig {
            n_trials: 10,
            n_channels: 8,
            n_sources: 30,
            ..Default::default()
        };
        let (sess, _) = generate_synthetic_session(77, &cfg).unwrap();
        for m in &sess.trials {
            m.validate(sess.eeg_fs).unwrap();
        }
    }
}
