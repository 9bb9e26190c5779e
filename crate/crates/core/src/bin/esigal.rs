//! Command-line entry point: synthetic data generation, the individual
//! pipeline stages, full config-driven runs, and report utilities.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use esigal::error::{Error, Result};
use esigal::eval::{evaluate_model, MlrPredictor, NeuralPredictor};
use esigal::neural::{
    build_model, load_checkpoint, load_mlr, mlr_fit, save_checkpoint, save_mlr, train_model, Arch,
    TrainConfig,
};
use esigal::pipeline::{
    default_motor_channels, preprocess_session, sensor_features, source_features, IcaSpec,
    PreprocessOptions,
};
use esigal::report::{
    aggregate, aggregate_csv_string, read_results_csv, render_markdown, ttests_csv_string, Model,
    ResultRecord,
};
use esigal::runner::{init_workers, load_preprocessed, run_pipeline, save_preprocessed, ExperimentConfig};
use esigal::session::{load_leadfield, load_session, save_leadfield, save_session};
use esigal::source_imaging::{compute_inverse_operator, fuse_roi_inverse, NoiseCov};
use esigal::synth::{generate_leadfield, generate_session_with_leadfield, SynthConfig};
use esigal::windowing::{build_dataset, load_dataset, save_dataset, Domain};
use esigal::{container, pipeline, runner};

#[derive(Parser)]
#[command(name = "esigal", version, about = "EEG sensor/source-space hand-kinematics decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sessions and a shared lead field.
    Synth(SynthArgs),
    /// Condition one recording: band-pass, CAR, optional component
    /// rejection, decimation, kinematics low-pass and min-max.
    Preprocess(PreprocessArgs),
    /// Build the inverse operator and reduce a preprocessed recording to
    /// ROI time series.
    Esi(EsiArgs),
    /// Extract lagged windows into a dataset container.
    Windows(WindowsArgs),
    /// Train one decoder on saved datasets.
    Train(TrainArgs),
    /// Evaluate a saved decoder on a dataset (per-axis PCC).
    Evaluate(EvaluateArgs),
    /// Aggregate a results CSV into grid tables and t-test tables.
    Report(ReportArgs),
    /// Check an experiment config without running anything.
    ValidateConfig(ValidateArgs),
    /// Run the full experiment grid described by a config.
    Run(RunArgs),
    /// Compare aggregated results against reference mean PCC values.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output stem; sessions land at `<out>_S01` and so on.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    subjects: usize,
    #[arg(long, default_value_t = 40)]
    trials: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 200)]
    sources: usize,
    #[arg(long, default_value_t = 5.0)]
    snr: f64,
    #[arg(long, default_value_t = 1200.0)]
    trial_ms: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Session stem (expects `<stem>.session.json` and friends).
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stem of component-rejection matrices: `<stem>.unmixing`,
    /// `<stem>.mixing` containers plus `<stem>.reject.json`.
    #[arg(long)]
    ica: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    band_lo: f64,
    #[arg(long, default_value_t = 40.0)]
    band_hi: f64,
    #[arg(long, default_value_t = 2.0)]
    eeg_transition_bw: f64,
    #[arg(long, default_value_t = 2.0)]
    kin_cutoff: f64,
    #[arg(long, default_value_t = 1.0)]
    kin_transition_bw: f64,
}

#[derive(Args)]
struct EsiArgs {
    #[arg(long)]
    leadfield: PathBuf,
    /// Preprocessed stem from the preprocess stage.
    #[arg(long)]
    prep: PathBuf,
    /// Comma-separated ROI names.
    #[arg(long)]
    rois: String,
    #[arg(long, default_value_t = 3.0)]
    snr: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also persist the fused ROI operator for reuse.
    #[arg(long)]
    export_operator: Option<PathBuf>,
}

#[derive(Args)]
struct WindowsArgs {
    /// Preprocessed stem (provides kinematics and markers).
    #[arg(long)]
    prep: PathBuf,
    /// Sensor domain: comma-separated channel names ("default" for the
    /// built-in 18-channel motor list).
    #[arg(long)]
    channels: Option<String>,
    /// Source domain: ROI-series stem produced by `esi`.
    #[arg(long)]
    roifeat: Option<PathBuf>,
    #[arg(long)]
    lag: usize,
    #[arg(long)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset stem.
    #[arg(long)]
    dataset: PathBuf,
    /// Validation dataset stem (required for the neural decoders).
    #[arg(long)]
    val: Option<PathBuf>,
    /// mLR, rSCNet, rDCNet, or rEEGNet.
    #[arg(long)]
    model: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 400)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint stem written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// The model kind stored at the checkpoint.
    #[arg(long)]
    model: String,
    /// Append a CSV row to this results file (created with a header when
    /// missing).
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long, default_value = "subject")]
    subject: String,
    #[arg(long, default_value = "intra")]
    split: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Grid cell for the t-test tables, as "lag,window" in ms; defaults to
    /// the first cell found in the results.
    #[arg(long)]
    cell: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    results: PathBuf,
    /// Reference CSV: domain,model,lag_ms,window_ms,pcc_x,pcc_y,pcc_z.
    #[arg(long)]
    reference: PathBuf,
    /// Advisory deviation band.
    #[arg(long, default_value_t = 0.05)]
    band: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    init_workers();
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Esi(a) => cmd_esi(a),
        Command::Windows(a) => cmd_windows(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::ValidateConfig(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            cfg.validate()?;
            println!("OK: {}", a.config.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let summary = run_pipeline(&cfg)?;
            println!(
                "run complete: {} records, {} failed cells, results at {}",
                summary.records,
                summary.failed.len(),
                summary.results_csv.display()
            );
            for (id, err) in &summary.failed {
                eprintln!("failed cell {id}: {err}");
            }
            if summary.failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::Compare(a) => cmd_compare(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        n_trials: a.trials,
        n_channels: a.channels,
        n_sources: a.sources,
        snr: a.snr,
        trial_len_ms: a.trial_ms,
        ..Default::default()
    };
    let lf = generate_leadfield(a.seed, &cfg)?;
    let lf_stem = append(&a.out, "_leadfield");
    save_leadfield(&lf_stem, &lf)?;
    println!("lead field -> {}", lf_stem.display());
    for s in 0..a.subjects {
        let subject_id = format!("S{:02}", s + 1);
        let seed = runner::stable_hash64(&format!("session|{}|{}", a.seed, subject_id));
        let mut session = generate_session_with_leadfield(seed, &cfg, &lf)?;
        session.subject_id = subject_id.clone();
        let stem = append(&a.out, &format!("_{subject_id}"));
        save_session(&stem, &session)?;
        println!(
            "session {subject_id} ({} trials) -> {}",
            session.trials.len(),
            stem.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn append(stem: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<ExitCode> {
    let session = load_session(&a.session)?;
    let ica = match &a.ica {
        None => None,
        Some(stem) => {
            let (unmix, _) = container::load_matrix(append(stem, ".unmixing"))?;
            let (mix, _) = container::load_matrix(append(stem, ".mixing"))?;
            let rpath = append(stem, ".reject.json");
            let text = std::fs::read_to_string(&rpath).map_err(|e| Error::io(&rpath, e))?;
            let reject: Vec<usize> = serde_json::from_str(&text).map_err(|e| Error::Meta {
                path: rpath.display().to_string(),
                detail: e.to_string(),
            })?;
            Some(IcaSpec {
                unmixing: unmix.mapv(f64::from),
                mixing: mix.mapv(f64::from),
                reject,
            })
        }
    };
    let opts = PreprocessOptions {
        band: (a.band_lo, a.band_hi),
        eeg_transition_bw: a.eeg_transition_bw,
        kin_cutoff: a.kin_cutoff,
        kin_transition_bw: a.kin_transition_bw,
        ica,
        kin_norm_spans: None,
    };
    let p = preprocess_session(&session, &opts)?;
    save_preprocessed(&a.out, &p)?;
    println!(
        "preprocessed {}: {} channels x {} samples at {} Hz -> {}",
        p.subject_id,
        p.eeg.nrows(),
        p.eeg.ncols(),
        p.fs,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_esi(a: EsiArgs) -> Result<ExitCode> {
    let lf = load_leadfield(&a.leadfield)?;
    let p = load_preprocessed(&a.prep)?;
    let rois: Vec<String> = a.rois.split(',').map(|s| s.trim().to_string()).collect();
    let (feat, names, _) = source_features(&p, &lf, &rois, a.snr, None)?;
    container::save_matrix(
        &a.out,
        &feat.mapv(|v| v as f32),
        &container::MatrixMeta::new(0, 0, container::Role::Roi)
            .with_fs(p.fs)
            .with_channel_names(&names),
    )?;
    println!("ROI series {} x {} -> {}", feat.nrows(), feat.ncols(), a.out.display());
    if let Some(stem) = &a.export_operator {
        let op = compute_inverse_operator(&lf, &NoiseCov::Identity, a.snr)?;
        let fused = fuse_roi_inverse(&op, &lf, &rois)?;
        container::save_matrix(
            stem,
            &fused.matrix.mapv(|v| v as f32),
            &container::MatrixMeta::new(0, 0, container::Role::Source)
                .with_channel_names(&fused.channel_names),
        )?;
        println!("fused ROI operator -> {}", stem.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_windows(a: WindowsArgs) -> Result<ExitCode> {
    let p = load_preprocessed(&a.prep)?;
    let (feat, domain) = match (&a.channels, &a.roifeat) {
        (Some(channels), None) => {
            let names: Vec<String> = if channels == "default" {
                default_motor_channels()
            } else {
                channels.split(',').map(|s| s.trim().to_string()).collect()
            };
            (sensor_features(&p, &names, None)?.0, Domain::Sensor)
        }
        (None, Some(stem)) => {
            let (roi, _) = container::load_matrix(stem)?;
            let z = esigal::preprocess::zscore_channels(&roi.mapv(f64::from))?.0;
            (z, Domain::Source)
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --channels (sensor) or --roifeat (source)".into(),
            ))
        }
    };
    let (trials, skipped) = pipeline::make_trials(&feat, &p);
    if skipped > 0 {
        log::warn!("{skipped} trials skipped");
    }
    let ds = build_dataset(&trials, a.lag, a.window, domain)?;
    save_dataset(&a.out, &ds, None)?;
    println!(
        "{} windows of {} x {} ({}) -> {}",
        ds.len(),
        ds.n_channels(),
        ds.window_len(),
        domain,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let train_set = load_dataset(&a.dataset)?;
    let model: Model = a.model.parse()?;
    match model {
        Model::Mlr => {
            let x = train_set.design_matrix();
            let fitted = mlr_fit(&x, &train_set.targets)?;
            save_mlr(&a.out, &fitted)?;
            println!("mLR ({} coefficients) -> {}", fitted.coef.len(), a.out.display());
        }
        _ => {
            let val_stem = a
                .val
                .as_ref()
                .ok_or_else(|| Error::Config("neural decoders need --val".into()))?;
            let val_set = load_dataset(val_stem)?;
            let arch = match model {
                Model::EegNet => Arch::EegNet,
                Model::DeepConvNet => Arch::DeepConvNet,
                Model::ShallowConvNet => Arch::ShallowConvNet,
                Model::Mlr => unreachable!(),
            };
            let spec = build_model(arch, train_set.n_channels(), train_set.window_len())?;
            let cfg = TrainConfig {
                batch: a.batch,
                max_epochs: a.max_epochs,
                patience: a.patience,
                lr: a.lr,
                seed: a.seed,
                ..Default::default()
            };
            let (params, history) = train_model(
                &spec,
                &train_set.inputs,
                &train_set.targets,
                &val_set.inputs,
                &val_set.targets,
                &cfg,
            )?;
            save_checkpoint(&a.out, &spec, &params)?;
            let hpath = append(&a.out, ".history.json");
            let json = serde_json::to_string_pretty(&history).map_err(|e| Error::Meta {
                path: hpath.display().to_string(),
                detail: e.to_string(),
            })?;
            std::fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))?;
            println!(
                "{model} trained: best epoch {} of {}, val mse {:.6} -> {}",
                history.best_epoch,
                history.stopped_epoch,
                history.val_loss[history.best_epoch - 1],
                a.out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.dataset)?;
    let model: Model = a.model.parse()?;
    let pcc = match model {
        Model::Mlr => {
            let fitted = load_mlr(&a.checkpoint)?;
            evaluate_model(&MlrPredictor { model: &fitted }, &ds)?
        }
        _ => {
            let (spec, params) = load_checkpoint(&a.checkpoint)?;
            evaluate_model(
                &NeuralPredictor {
                    spec: &spec,
                    params: &params,
                },
                &ds,
            )?
        }
    };
    println!("pcc_x {:.6} pcc_y {:.6} pcc_z {:.6}", pcc[0], pcc[1], pcc[2]);
    if let Some(path) = &a.results {
        let record = ResultRecord {
            subject: a.subject.clone(),
            domain: ds.domain,
            model,
            lag_ms: ds.lag_ms,
            window_ms: ds.window_ms,
            split: a.split.clone(),
            pcc,
        };
        let mut records = if path.exists() {
            read_results_csv(path)?
        } else {
            Vec::new()
        };
        records.push(record);
        esigal::report::write_results_csv(path, &records)?;
        println!("appended to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let records = read_results_csv(&a.results)?;
    if records.is_empty() {
        return Err(Error::Config("no records in results file".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let report = aggregate(&records)?;
    std::fs::write(a.out.join("aggregate.csv"), aggregate_csv_string(&report))
        .map_err(|e| Error::io(a.out.join("aggregate.csv"), e))?;
    std::fs::write(
        a.out.join("report.md"),
        render_markdown(&report, "Decoding report"),
    )
    .map_err(|e| Error::io(a.out.join("report.md"), e))?;
    let (lag, window) = match &a.cell {
        Some(text) => {
            let parts: Vec<&str> = text.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::Config("--cell expects \"lag,window\"".into()));
            }
            (
                parts[0].trim().parse().map_err(|e| Error::Config(format!("{e}")))?,
                parts[1].trim().parse().map_err(|e| Error::Config(format!("{e}")))?,
            )
        }
        None => (records[0].lag_ms, records[0].window_ms),
    };
    std::fs::write(a.out.join("ttests.csv"), ttests_csv_string(&records, lag, window)?)
        .map_err(|e| Error::io(a.out.join("ttests.csv"), e))?;
    println!("report written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(a: CompareArgs) -> Result<ExitCode> {
    let records = read_results_csv(&a.results)?;
    let report = aggregate(&records)?;
    let text = std::fs::read_to_string(&a.reference).map_err(|e| Error::io(&a.reference, e))?;
    let mut lines = vec![format!(
        "domain,model,lag_ms,window_ms,axis,reference,measured,deviation,within_{:.2}",
        a.band
    )];
    let mut all_within = true;
    let mut compared = 0usize;
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && line.starts_with("domain") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Config(format!(
                "reference line {}: expected 7 fields",
                ln + 1
            )));
        }
        let domain: Domain = parts[0].parse()?;
        let model: Model = parts[1].parse()?;
        let lag_ms: usize = parts[2].parse().map_err(|e| Error::Config(format!("{e}")))?;
        let window_ms: usize = parts[3].parse().map_err(|e| Error::Config(format!("{e}")))?;
        let reference: [f64; 3] = [
            parts[4].parse().map_err(|e| Error::Config(format!("{e}")))?,
            parts[5].parse().map_err(|e| Error::Config(format!("{e}")))?,
            parts[6].parse().map_err(|e| Error::Config(format!("{e}")))?,
        ];
        let key = esigal::report::GridKey {
            domain,
            model,
            lag_ms,
            window_ms,
        };
        match report.cells.get(&key) {
            Some(cell) => {
                for (axis, name) in ["x", "y", "z"].iter().enumerate() {
                    let dev = cell.mean[axis] - reference[axis];
                    let within = dev.abs() <= a.band;
                    all_within &= within;
                    compared += 1;
                    lines.push(format!(
                        "{domain},{model},{lag_ms},{window_ms},{name},{:.3},{:.3},{:+.3},{}",
                        reference[axis], cell.mean[axis], dev, within
                    ));
                }
            }
            None => {
                lines.push(format!("{domain},{model},{lag_ms},{window_ms},-,-,-,-,missing"));
                all_within = false;
            }
        }
    }
    let out_text = lines.join("\n") + "\n";
    match &a.out {
        Some(path) => {
            std::fs::write(path, &out_text).map_err(|e| Error::io(path, e))?;
            println!("comparison written to {}", path.display());
        }
        None => print!("{out_text}"),
    }
    println!(
        "{compared} comparisons; {}",
        if all_within {
            format!("all within the +/-{:.2} advisory band", a.band)
        } else {
            format!("deviations beyond +/-{:.2} present (advisory only)", a.band)
        }
    );
    Ok(ExitCode::SUCCESS)
}
