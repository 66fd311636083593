//! Report emission. Turns benchmark outcomes into the published table
//! shapes: per-experiment group tables, the cross-experiment aggregates,
//! the continuous-heterogeneity correlations, a long-format score dump for
//! plotting, and one JSON manifest holding every number with its CI.
//!
//! Output is deterministic byte for byte: map keys are sorted, row order
//! follows the canonical method order, floats print in shortest round-trip
//! form, and nothing environment-dependent (times, paths, thread counts)
//! is ever written.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evalkit::{
    self, percentile_bootstrap, BootstrapSummary, CrossExperimentSummary, MethodId,
    BOOTSTRAP_REPLICATES, BOOTSTRAP_SEED,
};
use crate::pipeline::{self, BenchmarkOutcome, ExperimentFailure, ExperimentReport, GridOutcome};
use crate::rules::SpecKind;
use crate::stats;

/// Size of the complete progressive set; smaller inputs aggregate with a
/// partial-set warning.
pub const PROGRESSIVE_EXPERIMENTS: usize = 90;

const GROUPS: usize = 5;

/// One row of a per-experiment group table: a method (or the ground truth)
/// with its per-group mean scores, its mean delta and its rank correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    /// `"ground_truth"` or a method id.
    pub label: String,
    /// Per-group mean score, CI over the physicians of the group. None when
    /// no physician in the group has an estimate.
    pub groups: Vec<Option<BootstrapSummary>>,
    /// Mean delta, CI over all physicians. None for the ground truth and for
    /// scores that are not on the discordance-rate scale.
    pub delta: Option<BootstrapSummary>,
    pub spearman: Option<f64>,
}

/// Group-structured summary of one experiment: the published five-group
/// table shape (reference and sensitivity conditions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub experiment_id: String,
    pub rows: Vec<GroupRow>,
}

/// Per-method rank correlation (and delta where defined) on the
/// continuous-heterogeneity condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousRow {
    pub method: String,
    pub spearman: Option<f64>,
    pub mean_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTable {
    pub experiment_id: String,
    pub rows: Vec<ContinuousRow>,
}

/// Everything a run produced, with every derived aggregate and CI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub reports: Vec<ExperimentReport>,
    pub failures: Vec<ExperimentFailure>,
    /// Group tables for the reference and sensitivity conditions.
    pub group_tables: Vec<GroupTable>,
    /// Reference-condition delta per method: the single-experiment column of
    /// the window-size table.
    pub reference_delta_by_method: BTreeMap<String, f64>,
    pub cross_experiment: Option<CrossExperimentSummary>,
    pub continuous: Option<ContinuousTable>,
    pub grid: Option<GridOutcome>,
}

fn bootstrap_mean(values: &[f64]) -> BootstrapSummary {
    percentile_bootstrap(values, stats::mean, BOOTSTRAP_REPLICATES, BOOTSTRAP_SEED)
}

/// Indices of each behaviour group, or None when the experiment has no
/// five-group structure.
fn group_members(labels: &[Option<u8>]) -> Option<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); GROUPS];
    for (j, label) in labels.iter().enumerate() {
        let g = (*label)? as usize;
        if g < 1 || g > GROUPS {
            return None;
        }
        members[g - 1].push(j);
    }
    Some(members)
}

/// Per-group mean with a CI that resamples the group's physicians.
fn group_cells(values: &[Option<f64>], members: &[Vec<usize>]) -> Vec<Option<BootstrapSummary>> {
    members
        .iter()
        .map(|group| {
            let available: Vec<f64> = group.iter().filter_map(|&j| values[j]).collect();
            if available.is_empty() {
                None
            } else {
                Some(bootstrap_mean(&available))
            }
        })
        .collect()
}

/// The five-group table for one experiment: ground truth first, then every
/// method that ran, in canonical order. None when the experiment does not
/// use the five-group physician model.
pub fn group_table(report: &ExperimentReport) -> Option<GroupTable> {
    let members = group_members(&report.group_labels)?;
    let truth: Vec<Option<f64>> = report.ground_truth.iter().map(|&v| Some(v)).collect();
    let mut rows = vec![GroupRow {
        label: "ground_truth".into(),
        groups: group_cells(&truth, &members),
        delta: None,
        spearman: Some(1.0),
    }];
    for ms in &report.scores {
        let delta = if ms.is_rate_scale {
            let diffs: Vec<f64> = ms
                .scores
                .iter()
                .zip(&report.ground_truth)
                .filter_map(|(s, t)| s.map(|v| v - t))
                .collect();
            if diffs.is_empty() {
                None
            } else {
                Some(bootstrap_mean(&diffs))
            }
        } else {
            None
        };
        rows.push(GroupRow {
            label: ms.method.as_str().into(),
            groups: group_cells(&ms.scores, &members),
            delta,
            spearman: report.spearman.get(ms.method.as_str()).copied(),
        });
    }
    Some(GroupTable { experiment_id: report.experiment_id.clone(), rows })
}

/// Rank-correlation table for the continuous-heterogeneity condition.
pub fn continuous_table(report: &ExperimentReport) -> ContinuousTable {
    let rows = report
        .scores
        .iter()
        .map(|ms| ContinuousRow {
            method: ms.method.as_str().into(),
            spearman: report.spearman.get(ms.method.as_str()).copied(),
            mean_delta: report.deltas.get(ms.method.as_str()).map(|d| d.value),
        })
        .collect();
    ContinuousTable { experiment_id: report.experiment_id.clone(), rows }
}

/// Assembles the complete manifest from whatever conditions were run.
pub fn build_manifest(outcome: &BenchmarkOutcome, grid: Option<&GridOutcome>) -> Manifest {
    let group_tables: Vec<GroupTable> = outcome
        .reports
        .iter()
        .filter(|r| {
            matches!(
                r.kind,
                SpecKind::Score2Reference | SpecKind::SensitivityCopula | SpecKind::SensitivityLognormal
            )
        })
        .filter_map(group_table)
        .collect();

    let reference_delta_by_method = outcome
        .reports
        .iter()
        .find(|r| r.kind == SpecKind::Score2Reference)
        .map(|r| r.deltas.iter().map(|(k, d)| (k.clone(), d.value)).collect())
        .unwrap_or_default();

    let per_method = pipeline::progressive_deltas(&outcome.reports);
    let cross_experiment = if per_method.is_empty() {
        None
    } else {
        Some(evalkit::cross_experiment_summary(&per_method, PROGRESSIVE_EXPERIMENTS))
    };

    let continuous = outcome
        .reports
        .iter()
        .find(|r| r.kind == SpecKind::ContinuousHeterogeneity)
        .map(continuous_table);

    Manifest {
        reports: outcome.reports.clone(),
        failures: outcome.failures.clone(),
        group_tables,
        reference_delta_by_method,
        cross_experiment,
        continuous,
        grid: grid.cloned(),
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

/// One group table as CSV: a row per method, three columns per group
/// (mean, CI bounds), then delta and rank-correlation columns.
pub fn write_group_csv(path: &Path, table: &GroupTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["method".to_string()];
    for g in 1..=GROUPS {
        header.push(format!("group{g}"));
        header.push(format!("group{g}_lo"));
        header.push(format!("group{g}_hi"));
    }
    header.extend(["delta", "delta_lo", "delta_hi", "spearman"].map(String::from));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut record = vec![row.label.clone()];
        for cell in &row.groups {
            match cell {
                Some(c) => record.extend([num(c.point), num(c.lo), num(c.hi)]),
                None => record.extend([String::new(), String::new(), String::new()]),
            }
        }
        match &row.delta {
            Some(d) => record.extend([num(d.point), num(d.lo), num(d.hi)]),
            None => record.extend([String::new(), String::new(), String::new()]),
        }
        record.push(opt_num(row.spearman));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Cross-experiment aggregates as CSV, one row per method.
pub fn write_cross_csv(path: &Path, cross: &CrossExperimentSummary) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "method",
        "n_experiments",
        "mean_delta",
        "mean_delta_lo",
        "mean_delta_hi",
        "mean_abs_delta",
        "mean_abs_delta_lo",
        "mean_abs_delta_hi",
        "median_delta",
        "median_delta_lo",
        "median_delta_hi",
        "pct_positive",
        "pct_positive_lo",
        "pct_positive_hi",
    ])?;
    for m in &cross.methods {
        w.write_record([
            m.method.as_str().to_string(),
            m.n_experiments.to_string(),
            num(m.mean_delta.point),
            num(m.mean_delta.lo),
            num(m.mean_delta.hi),
            num(m.mean_abs_delta.point),
            num(m.mean_abs_delta.lo),
            num(m.mean_abs_delta.hi),
            num(m.median_delta.point),
            num(m.median_delta.lo),
            num(m.median_delta.hi),
            num(m.percent_positive.point),
            num(m.percent_positive.lo),
            num(m.percent_positive.hi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean delta by window-size bin as CSV. The reference column is the single
/// reference experiment and carries no bin CI.
pub fn write_window_csv(
    path: &Path,
    cross: &CrossExperimentSummary,
    reference: &BTreeMap<String, f64>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["method".to_string(), "reference".to_string()];
    for bin in &cross.window_bins {
        let tag = format!("w{}", bin.label.replace('-', "_"));
        header.push(tag.clone());
        header.push(format!("{tag}_lo"));
        header.push(format!("{tag}_hi"));
    }
    w.write_record(&header)?;
    let methods: Vec<&str> = MethodId::ALL
        .iter()
        .map(|m| m.as_str())
        .filter(|m| {
            reference.contains_key(*m)
                || cross.window_bins.iter().any(|b| b.mean_delta_by_method.contains_key(*m))
        })
        .collect();
    for method in methods {
        let mut record = vec![method.to_string(), opt_num(reference.get(method).copied())];
        for bin in &cross.window_bins {
            match bin.mean_delta_by_method.get(method) {
                Some(c) => record.extend([num(c.point), num(c.lo), num(c.hi)]),
                None => record.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean delta by pass as CSV, one row per method.
pub fn write_pass_csv(path: &Path, cross: &CrossExperimentSummary) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["method".to_string()];
    for p in &cross.passes {
        header.push(format!("pass{}", p.pass));
        header.push(format!("pass{}_lo", p.pass));
        header.push(format!("pass{}_hi", p.pass));
    }
    w.write_record(&header)?;
    let methods: Vec<&str> = MethodId::ALL
        .iter()
        .map(|m| m.as_str())
        .filter(|m| cross.passes.iter().any(|p| p.mean_delta_by_method.contains_key(*m)))
        .collect();
    for method in methods {
        let mut record = vec![method.to_string()];
        for p in &cross.passes {
            match p.mean_delta_by_method.get(method) {
                Some(c) => record.extend([num(c.point), num(c.lo), num(c.hi)]),
                None => record.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_continuous_csv(path: &Path, table: &ContinuousTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["method", "spearman", "mean_delta"])?;
    for row in &table.rows {
        w.write_record([row.method.clone(), opt_num(row.spearman), opt_num(row.mean_delta)])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format score dump: one row per experiment, method and physician.
pub fn write_long_csv(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["experiment", "method", "physician", "score", "ground_truth"])?;
    for report in reports {
        for ms in &report.scores {
            for (j, score) in ms.scores.iter().enumerate() {
                w.write_record([
                    report.experiment_id.clone(),
                    ms.method.as_str().to_string(),
                    j.to_string(),
                    opt_num(*score),
                    num(report.ground_truth[j]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Panel-size grid as CSV, one row per cell and method.
pub fn write_grid_csv(path: &Path, grid: &GridOutcome) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "cell",
        "n",
        "j",
        "min_panel",
        "method",
        "mean_delta",
        "bootstrap_mean",
        "bootstrap_sd",
    ])?;
    for cell in &grid.cells {
        for (method, &delta) in &cell.mean_delta {
            w.write_record([
                cell.experiment_id.clone(),
                cell.n.to_string(),
                cell.j.to_string(),
                cell.min_panel.to_string(),
                method.clone(),
                num(delta),
                opt_num(cell.bootstrap_mean.get(method).copied()),
                opt_num(cell.bootstrap_sd.get(method).copied()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Writes every table the outcome supports into `dir` and returns the paths,
/// manifest first.
pub fn emit_all(
    dir: &Path,
    outcome: &BenchmarkOutcome,
    grid: Option<&GridOutcome>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let manifest = build_manifest(outcome, grid);
    let mut written = Vec::new();

    let path = dir.join("manifest.json");
    write_manifest(&path, &manifest)?;
    written.push(path);

    if !outcome.reports.is_empty() {
        let path = dir.join("scores_long.csv");
        write_long_csv(&path, &outcome.reports)?;
        written.push(path);
    }
    for table in &manifest.group_tables {
        let path = dir.join(format!("table_group_means_{}.csv", table.experiment_id));
        write_group_csv(&path, table)?;
        written.push(path);
    }
    if let Some(cross) = &manifest.cross_experiment {
        let path = dir.join("table_cross_experiment.csv");
        write_cross_csv(&path, cross)?;
        written.push(path);

        let path = dir.join("table_window_size.csv");
        write_window_csv(&path, cross, &manifest.reference_delta_by_method)?;
        written.push(path);

        let path = dir.join("table_passes.csv");
        write_pass_csv(&path, cross)?;
        written.push(path);
    }
    if let Some(table) = &manifest.continuous {
        let path = dir.join("table_continuous_correlations.csv");
        write_continuous_csv(&path, table)?;
        written.push(path);
    }
    if let Some(grid) = &manifest.grid {
        let path = dir.join("table_grid.csv");
        write_grid_csv(&path, grid)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{MeanDelta, MethodScores};
    use crate::pipeline::MarginalDiagnostics;

    fn blank_report(id: &str, kind: SpecKind, j: usize) -> ExperimentReport {
        ExperimentReport {
            experiment_id: id.into(),
            kind,
            seed: 1,
            n: 40 * j,
            j,
            p: 9,
            window_start: None,
            window_width: None,
            pass: None,
            p_star: None,
            eligible_count: 0,
            group_labels: vec![None; j],
            p_high: vec![0.5; j],
            theoretical_discordance: vec![0.5; j],
            ground_truth: vec![0.0; j],
            scores: Vec::new(),
            deltas: BTreeMap::new(),
            spearman: BTreeMap::new(),
            exclusions: BTreeMap::new(),
            warnings: Vec::new(),
            diagnostics: MarginalDiagnostics { nonhdl_ldl_spearman: None, hba1c_skewness: None },
            genetic: None,
            lpa: None,
            glmm: None,
        }
    }

    fn five_group_report(id: &str, kind: SpecKind) -> ExperimentReport {
        let j = 10;
        let mut report = blank_report(id, kind, j);
        report.group_labels = (0..j).map(|i| Some((i / 2 + 1) as u8)).collect();
        report.ground_truth = (0..j).map(|i| 0.05 * i as f64).collect();
        let estimates: Vec<Option<f64>> =
            report.ground_truth.iter().map(|t| Some(t + 0.02)).collect();
        report.scores.push(MethodScores {
            experiment_id: id.into(),
            method: MethodId::Euclidean,
            scores: estimates.clone(),
            is_rate_scale: true,
        });
        report.scores.push(MethodScores {
            experiment_id: id.into(),
            method: MethodId::Glmm,
            scores: (0..j).map(|i| Some(0.3 * i as f64)).collect(),
            is_rate_scale: false,
        });
        report
            .deltas
            .insert("euclidean".into(), MeanDelta { value: 0.02, used: j, excluded: 0 });
        report.spearman.insert("euclidean".into(), 1.0);
        report.spearman.insert("glmm".into(), 1.0);
        report
    }

    #[test]
    fn group_table_resamples_groups_and_physicians() {
        let report = five_group_report("ref", SpecKind::Score2Reference);
        let table = group_table(&report).unwrap();
        assert_eq!(table.rows.len(), 3);
        let truth = &table.rows[0];
        assert_eq!(truth.label, "ground_truth");
        assert_eq!(truth.spearman, Some(1.0));
        assert!(truth.delta.is_none());
        // group 1 holds physicians 0 and 1: truth mean 0.025
        let g1 = truth.groups[0].unwrap();
        assert!((g1.point - 0.025).abs() < 1e-12);
        assert!(g1.lo <= g1.point && g1.point <= g1.hi);

        let eucl = &table.rows[1];
        assert_eq!(eucl.label, "euclidean");
        // constant +0.02 shift: delta CI collapses onto the shift
        let delta = eucl.delta.unwrap();
        assert!((delta.point - 0.02).abs() < 1e-12);
        assert!((delta.lo - 0.02).abs() < 1e-12 && (delta.hi - 0.02).abs() < 1e-12);

        let glmm = &table.rows[2];
        assert!(glmm.delta.is_none(), "no delta off the rate scale");
        assert!(glmm.groups[4].is_some());
    }

    #[test]
    fn group_table_requires_the_five_group_model() {
        let report = blank_report("cont", SpecKind::ContinuousHeterogeneity, 6);
        assert!(group_table(&report).is_none());
    }

    fn progressive_outcome() -> BenchmarkOutcome {
        let mut reports = Vec::new();
        let mut reference = five_group_report("ref", SpecKind::Score2Reference);
        reference.deltas.insert(
            "rf_proximity".into(),
            MeanDelta { value: -0.03, used: 10, excluded: 0 },
        );
        reports.push(reference);
        let mut k = 0u32;
        for width in [1u32, 2, 4, 7] {
            for pass in [1u8, 2] {
                k += 1;
                let mut r = blank_report(&format!("w{width}_p{pass}"), SpecKind::Progressive, 10);
                r.window_width = Some(width);
                r.pass = Some(pass);
                r.deltas.insert(
                    "euclidean".into(),
                    MeanDelta { value: 0.05 + 0.001 * f64::from(k), used: 10, excluded: 0 },
                );
                r.deltas.insert(
                    "rf_proximity".into(),
                    MeanDelta { value: -0.03, used: 10, excluded: 0 },
                );
                reports.push(r);
            }
        }
        BenchmarkOutcome { reports, failures: Vec::new() }
    }

    #[test]
    fn manifest_assembles_all_sections() {
        let outcome = progressive_outcome();
        let manifest = build_manifest(&outcome, None);
        assert_eq!(manifest.group_tables.len(), 1);
        assert_eq!(manifest.reference_delta_by_method["euclidean"], 0.02);
        let cross = manifest.cross_experiment.as_ref().unwrap();
        assert_eq!(cross.methods.len(), 2);
        // 8 of the 90 progressive experiments present: partial warnings
        assert!(!cross.warnings.is_empty());
        assert!(manifest.continuous.is_none());
        assert!(manifest.grid.is_none());
    }

    #[test]
    fn emission_is_deterministic_and_complete() {
        let outcome = progressive_outcome();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let written = emit_all(dir_a.path(), &outcome, None).unwrap();
        emit_all(dir_b.path(), &outcome, None).unwrap();
        let names: Vec<&str> =
            written.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(
            names,
            [
                "manifest.json",
                "scores_long.csv",
                "table_group_means_ref.csv",
                "table_cross_experiment.csv",
                "table_window_size.csv",
                "table_passes.csv",
            ]
        );
        for name in &names {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert!(!a.is_empty());
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        // the manifest round-trips through serde
        let bytes = fs::read(dir_a.path().join("manifest.json")).unwrap();
        let parsed: Manifest = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(parsed.reports.len(), outcome.reports.len());

        // the long dump has one row per experiment, method and physician
        let long = fs::read_to_string(dir_a.path().join("scores_long.csv")).unwrap();
        let rows: Vec<&str> = long.lines().collect();
        assert_eq!(rows[0], "experiment,method,physician,score,ground_truth");
        assert_eq!(rows.len(), 1 + 2 * 10);
        assert!(rows[1].starts_with("ref,euclidean,0,"));
    }

    #[test]
    fn window_csv_places_reference_and_bins() {
        let outcome = progressive_outcome();
        let manifest = build_manifest(&outcome, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        write_window_csv(
            &path,
            manifest.cross_experiment.as_ref().unwrap(),
            &manifest.reference_delta_by_method,
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert!(rows[0].starts_with("method,reference,w1,w1_lo,w1_hi,w2_3,"));
        assert!(rows.iter().any(|r| r.starts_with("euclidean,0.02,")));
        // constant toy deltas collapse every bin CI onto the point value
        let rf = rows.iter().find(|r| r.starts_with("rf_proximity,-0.03,")).unwrap();
        assert!(rf.contains("-0.03,-0.03,-0.03"));
    }
}
