//! Result records and report generation: `results.csv`, aggregated grid
//! tables (mean PCC across subjects with per-direction maxima flagged),
//! and pairwise one-tailed t-test tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::paired_t_test_one_tailed;
use crate::windowing::Domain;

/// Decoder identity as it appears in result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Model {
    #[serde(rename = "mLR", alias = "mlr")]
    Mlr,
    #[serde(rename = "rSCNet", alias = "rShallowConvNet")]
    ShallowConvNet,
    #[serde(rename = "rDCNet", alias = "rDeepConvNet")]
    DeepConvNet,
    #[serde(rename = "rEEGNet")]
    EegNet,
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Model::Mlr => write!(f, "mLR"),
            Model::ShallowConvNet => write!(f, "rSCNet"),
            Model::DeepConvNet => write!(f, "rDCNet"),
            Model::EegNet => write!(f, "rEEGNet"),
        }
    }
}

impl std::str::FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mLR" | "mlr" | "MLR" => Ok(Model::Mlr),
            "rSCNet" | "rShallowConvNet" => Ok(Model::ShallowConvNet),
            "rDCNet" | "rDeepConvNet" => Ok(Model::DeepConvNet),
            "rEEGNet" => Ok(Model::EegNet),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensor" => Ok(Domain::Sensor),
            "source" => Ok(Domain::Source),
            other => Err(Error::Config(format!("unknown domain '{other}'"))),
        }
    }
}

/// One evaluated (subject, domain, model, grid-cell) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub subject: String,
    pub domain: Domain,
    pub model: Model,
    pub lag_ms: usize,
    pub window_ms: usize,
    /// "intra" or "inter-fold-k".
    pub split: String,
    pub pcc: [f64; 3],
}

impl ResultRecord {
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.pcc.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "PCC[{i}] = {v} outside [-1, 1] for subject {}",
                    self.subject
                )));
            }
        }
        Ok(())
    }
}

pub const RESULTS_HEADER: &str = "subject,domain,model,lag_ms,window_ms,split,pcc_x,pcc_y,pcc_z";

/// Render records as the canonical CSV (sorted, fixed 6-decimal floats), so
/// identical result sets serialize byte-identically.
pub fn results_csv_string(records: &[ResultRecord]) -> String {
    let mut sorted: Vec<&ResultRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.subject, a.domain, a.model, a.lag_ms, a.window_ms, &a.split).cmp(&(
            &b.subject, b.domain, b.model, b.lag_ms, b.window_ms, &b.split,
        ))
    });
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.subject, r.domain, r.model, r.lag_ms, r.window_ms, r.split, r.pcc[0], r.pcc[1], r.pcc[2]
        );
    }
    out
}

pub fn write_results_csv(path: impl AsRef<Path>, records: &[ResultRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, results_csv_string(records)).map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != RESULTS_HEADER {
                return Err(Error::Config(format!("unexpected results header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Config(format!("line {}: expected 9 fields", ln + 1)));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))
        };
        records.push(ResultRecord {
            subject: parts[0].to_string(),
            domain: parts[1].parse()?,
            model: parts[2].parse()?,
            lag_ms: parts[3].parse().map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?,
            window_ms: parts[4].parse().map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?,
            split: parts[5].to_string(),
            pcc: [parse_f(parts[6])?, parse_f(parts[7])?, parse_f(parts[8])?],
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GridKey {
    pub domain: Domain,
    pub model: Model,
    pub lag_ms: usize,
    pub window_ms: usize,
}

#[derive(Debug, Clone)]
pub struct AggregateCell {
    pub mean: [f64; 3],
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub cells: BTreeMap<GridKey, AggregateCell>,
    pub domains: Vec<Domain>,
    pub models: Vec<Model>,
    pub lags: Vec<usize>,
    pub windows: Vec<usize>,
}

/// Mean PCC across subjects per (domain, model, lag, window).
///
/// The grid must be complete: every cell must cover the same subject set,
/// otherwise the raggedness is reported instead of silently averaged.
pub fn aggregate(records: &[ResultRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to aggregate".into()));
    }
    for r in records {
        r.validate()?;
    }
    let mut by_cell: BTreeMap<GridKey, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        by_cell
            .entry(GridKey {
                domain: r.domain,
                model: r.model,
                lag_ms: r.lag_ms,
                window_ms: r.window_ms,
            })
            .or_default()
            .push(r);
    }
    let mut subject_sets: BTreeSet<Vec<String>> = BTreeSet::new();
    for cell in by_cell.values() {
        let mut subjects: Vec<String> = cell.iter().map(|r| r.subject.clone()).collect();
        subjects.sort();
        let before = subjects.len();
        subjects.dedup();
        if subjects.len() != before {
            return Err(Error::InvalidArgument(
                "duplicate subject in one grid cell; refusing to average".into(),
            ));
        }
        subject_sets.insert(subjects);
    }
    if subject_sets.len() > 1 {
        return Err(Error::InvalidArgument(format!(
            "ragged grid: {} different subject sets across cells",
            subject_sets.len()
        )));
    }
    let mut cells = BTreeMap::new();
    for (key, recs) in &by_cell {
        let n = recs.len();
        let mut mean = [0.0; 3];
        for r in recs {
            for a in 0..3 {
                mean[a] += r.pcc[a];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        cells.insert(*key, AggregateCell { mean, n });
    }
    let domains: Vec<Domain> = dedup_sorted(by_cell.keys().map(|k| k.domain));
    let models: Vec<Model> = dedup_sorted(by_cell.keys().map(|k| k.model));
    let lags: Vec<usize> = dedup_sorted(by_cell.keys().map(|k| k.lag_ms));
    let windows: Vec<usize> = dedup_sorted(by_cell.keys().map(|k| k.window_ms));
    Ok(Report {
        cells,
        domains,
        models,
        lags,
        windows,
    })
}

fn dedup_sorted<T: Ord + Copy>(iter: impl Iterator<Item = T>) -> Vec<T> {
    let set: BTreeSet<T> = iter.collect();
    set.into_iter().collect()
}

/// Aggregate rows as CSV (one row per cell and direction set).
pub fn aggregate_csv_string(report: &Report) -> String {
    let mut out = String::from("domain,model,lag_ms,window_ms,n_subjects,mean_pcc_x,mean_pcc_y,mean_pcc_z\n");
    for (key, cell) in &report.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            key.domain, key.model, key.lag_ms, key.window_ms, cell.n, cell.mean[0], cell.mean[1], cell.mean[2]
        );
    }
    out
}

/// Markdown report: one grid per direction and domain, rows = model x lag,
/// columns = window sizes, best value per grid in bold.
pub fn render_markdown(report: &Report, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {title}\n");
    let axis_names = ["x", "y", "z"];
    for (a, axis) in axis_names.iter().enumerate() {
        for domain in &report.domains {
            let _ = writeln!(out, "## {axis}-direction, {domain} domain\n");
            // Locate the grid maximum for bolding.
            let mut best: Option<(GridKey, f64)> = None;
            for (key, cell) in &report.cells {
                if key.domain != *domain {
                    continue;
                }
                if best.map(|(_, b)| cell.mean[a] > b).unwrap_or(true) {
                    best = Some((*key, cell.mean[a]));
                }
            }
            let mut header = String::from("| model | lag (ms) |");
            let mut rule = String::from("|---|---|");
            for w in &report.windows {
                let _ = write!(header, " {w} |");
                rule.push_str("---|");
            }
            let _ = writeln!(out, "{header}");
            let _ = writeln!(out, "{rule}");
            for model in &report.models {
                for lag in &report.lags {
                    let mut row = format!("| {model} | {lag} |");
                    let mut any = false;
                    for w in &report.windows {
                        let key = GridKey {
                            domain: *domain,
                            model: *model,
                            lag_ms: *lag,
                            window_ms: *w,
                        };
                        match report.cells.get(&key) {
                            Some(cell) => {
                                any = true;
                                let is_best = best.map(|(bk, _)| bk == key).unwrap_or(false);
                                if is_best {
                                    let _ = write!(row, " **{:.3}** |", cell.mean[a]);
                                } else {
                                    let _ = write!(row, " {:.3} |", cell.mean[a]);
                                }
                            }
                            None => {
                                let _ = write!(row, " - |");
                            }
                        }
                    }
                    if any {
                        let _ = writeln!(out, "{row}");
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Pairwise one-tailed t-tests at one grid cell, pairing per-subject PCC
/// values: every model pair within each domain, and sensor vs source for
/// each model. Rows that cannot be computed (zero-variance differences)
/// are recorded with an empty p-value.
pub fn ttests_csv_string(
    records: &[ResultRecord],
    lag_ms: usize,
    window_ms: usize,
) -> Result<String> {
    let mut out = String::from("direction,domain_a,model_a,domain_b,model_b,lag_ms,window_ms,t,p\n");
    let axis_names = ["x", "y", "z"];

    let subject_values = |domain: Domain, model: Model, axis: usize| -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = records
            .iter()
            .filter(|r| {
                r.domain == domain && r.model == model && r.lag_ms == lag_ms && r.window_ms == window_ms
            })
            .map(|r| (r.subject.clone(), r.pcc[axis]))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    };

    let domains = dedup_sorted(records.iter().map(|r| r.domain));
    let models = dedup_sorted(records.iter().map(|r| r.model));

    let emit = |axis: usize,
                da: Domain,
                ma: Model,
                db: Domain,
                mb: Model,
                out: &mut String| {
        let va = subject_values(da, ma, axis);
        let vb = subject_values(db, mb, axis);
        if va.len() < 2 || va.len() != vb.len() {
            return;
        }
        // Pair by subject id.
        if va.iter().zip(&vb).any(|(a, b)| a.0 != b.0) {
            return;
        }
        let a: Vec<f64> = va.iter().map(|x| x.1).collect();
        let b: Vec<f64> = vb.iter().map(|x| x.1).collect();
        match paired_t_test_one_tailed(&a, &b) {
            Ok((t, p)) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.6},{:.3e}",
                    axis_names[axis], da, ma, db, mb, lag_ms, window_ms, t, p
                );
            }
            Err(e) => {
                log::warn!("t-test {da}/{ma} vs {db}/{mb} axis {axis}: {e}");
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},,",
                    axis_names[axis], da, ma, db, mb, lag_ms, window_ms
                );
            }
        }
    };

    for axis in 0..3 {
        for domain in &domains {
            for (i, ma) in models.iter().enumerate() {
                for mb in models.iter().skip(i + 1) {
                    emit(axis, *domain, *ma, *domain, *mb, &mut out);
                }
            }
        }
        if domains.len() == 2 {
            for model in &models {
                emit(axis, domains[0], *model, domains[1], *model, &mut out);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(subject: &str, domain: Domain, model: Model, pcc: [f64; 3]) -> ResultRecord {
        ResultRecord {
            subject: subject.to_string(),
            domain,
            model,
            lag_ms: 100,
            window_ms: 450,
            split: "intra".to_string(),
            pcc,
        }
    }

    #[test]
    fn single_record_aggregates_to_itself() {
        let r = record("s1", Domain::Sensor, Model::Mlr, [0.5, 0.6, 0.7]);
        let rep = aggregate(&[r.clone()]).unwrap();
        let cell = rep.cells.values().next().unwrap();
        assert_eq!(cell.mean, r.pcc);
        assert_eq!(cell.n, 1);
    }

    #[test]
    fn two_subjects_average() {
        let rs = vec![
            record("s1", Domain::Sensor, Model::EegNet, [0.6, 0.6, 0.6]),
            record("s2", Domain::Sensor, Model::EegNet, [0.8, 0.8, 0.8]),
        ];
        let rep = aggregate(&rs).unwrap();
        let cell = rep.cells.values().next().unwrap();
        assert!((cell.mean[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_order_invariant() {
        let rs = vec![
            record("s1", Domain::Sensor, Model::EegNet, [0.6, 0.5, 0.4]),
            record("s2", Domain::Sensor, Model::EegNet, [0.7, 0.6, 0.5]),
            record("s1", Domain::Source, Model::EegNet, [0.1, 0.2, 0.3]),
            record("s2", Domain::Source, Model::EegNet, [0.2, 0.3, 0.4]),
        ];
        let fwd = aggregate(&rs).unwrap();
        let mut rev = rs.clone();
        rev.reverse();
        let bwd = aggregate(&rev).unwrap();
        for (k, c) in &fwd.cells {
            assert_eq!(bwd.cells[k].mean, c.mean);
        }
    }

    #[test]
    fn ragged_grid_rejected() {
        let rs = vec![
            record("s1", Domain::Sensor, Model::EegNet, [0.6, 0.5, 0.4]),
            record("s2", Domain::Sensor, Model::EegNet, [0.7, 0.6, 0.5]),
            record("s1", Domain::Source, Model::EegNet, [0.1, 0.2, 0.3]),
        ];
        assert!(aggregate(&rs).is_err());
    }

    #[test]
    fn csv_round_trip_and_stability() {
        let rs = vec![
            record("s2", Domain::Source, Model::DeepConvNet, [0.21, -0.02, 0.33]),
            record("s1", Domain::Sensor, Model::Mlr, [0.5, 0.6, 0.7]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results_csv(&path, &rs).unwrap();
        let back = read_results_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        // Canonical ordering puts s1 first regardless of input order.
        assert_eq!(back[0].subject, "s1");
        assert_eq!(back[1].model, Model::DeepConvNet);
        // Byte-stable across rewrites.
        let s1 = results_csv_string(&rs);
        let mut reversed = rs.clone();
        reversed.reverse();
        assert_eq!(s1, results_csv_string(&reversed));
    }

    #[test]
    fn markdown_grid_structure() {
        let mut rs = Vec::new();
        for s in ["s1", "s2"] {
            for model in [Model::Mlr, Model::EegNet] {
                for lag in [50usize, 100] {
                    for win in [250usize, 300] {
                        rs.push(ResultRecord {
                            subject: s.to_string(),
                            domain: Domain::Sensor,
                            model,
                            lag_ms: lag,
                            window_ms: win,
                            split: "intra".into(),
                            pcc: [0.5, 0.5, 0.5],
                        });
                    }
                }
            }
        }
        let rep = aggregate(&rs).unwrap();
        let md = render_markdown(&rep, "demo");
        // One table per direction (x, y, z), each with a model x lag row set
        // and window columns.
        assert_eq!(md.matches("## x-direction").count(), 1);
        assert_eq!(md.matches("| mLR | 50 |").count(), 3);
        assert!(md.contains("| 250 | 300 |"));
        assert!(md.contains("**0.500**"));
    }

    #[test]
    fn ttest_table_contains_model_pairs() {
        let mut rs = Vec::new();
        for (i, s) in ["s1", "s2", "s3", "s4"].iter().enumerate() {
            let base = 0.4 + i as f64 * 0.05;
            rs.push(record(s, Domain::Sensor, Model::Mlr, [base, base, base]));
            rs.push(record(
                s,
                Domain::Sensor,
                Model::EegNet,
                [base + 0.3 + i as f64 * 0.01, base + 0.3, base + 0.25],
            ));
        }
        let csv = ttests_csv_string(&rs, 100, 450).unwrap();
        assert!(csv.contains("x,sensor,mLR,sensor,rEEGNet,100,450,"));
        // mLR is worse, so the one-tailed p should be near 1 on that row.
        let row: Vec<&str> = csv
            .lines()
            .find(|l| l.starts_with("x,sensor,mLR"))
            .unwrap()
            .split(',')
            .collect();
        let p: f64 = row[8].parse().unwrap();
        assert!(p > 0.99);
    }
}
