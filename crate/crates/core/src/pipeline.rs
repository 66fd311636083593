//! Experiment orchestration: realises a catalog spec into a cohort, runs the
//! selected estimation methods blind to the eligibility flags, and assembles
//! per-experiment reports, full catalog runs and the panel-size grid.
//!
//! Blindness is structural. The eligibility vector exists only inside
//! `run_experiment`, where it feeds outcome generation and the ground-truth
//! oracle; `EstimatorInput` carries covariates, outcomes, physician ids and
//! panels, nothing else. Every parallel reduction collects in input order,
//! so reports are byte-identical for a fixed seed at any thread count.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{self, ExperimentDelta, MeanDelta, MethodId, MethodScores};
use crate::genmatch::{self, DEConfig};
use crate::glmm::{self, CalibrationBin, GlmmOptions};
use crate::lpa::{self, BicCandidate};
use crate::matchcore::{self, DistanceMatrix, Metric, StandardizedCohort};
use crate::prescribe::{
    assign_profiles, draw_outcomes, ground_truth_by_physician, theoretical_discordance,
    PhysicianModel,
};
use crate::rng::{indexed_seed, seeded_rng, stream_seed, tagged_seed};
use crate::rules::{
    calibrate_thresholds, EligibilityRule, ExperimentSpec, RuleSpec, Score2Coefficients, SpecKind,
};
use crate::stats;
use crate::synthgen::{self, col, Cohort, CohortConfig};
use crate::weights::{self, ForestConfig};

/// Weight on the latent term of the profile-guided hybrid distance.
pub const HYBRID_ALPHA: f64 = 0.5;

/// Neighbour count of the mutual-information weight estimator.
pub const MI_NEIGHBOURS: usize = 3;

/// Reliability-diagram bin count for the mixed-model diagnostics.
pub const CALIBRATION_BINS: usize = 10;

/// The six pairing methods recomputed on the panel-size grid.
pub const GRID_METHODS: [MethodId; 6] = [
    MethodId::Euclidean,
    MethodId::Mahalanobis,
    MethodId::LearnedWeights,
    MethodId::RfProximity,
    MethodId::LpaGuided,
    MethodId::MutualInfo,
];

/// Weight-search record of the balance-optimized matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneticTrace {
    pub w_hat: Vec<f64>,
    pub achieved_loss: f64,
    pub evaluations: usize,
    /// Best loss after the initial population and after each generation.
    pub best_loss_by_generation: Vec<f64>,
}

/// Model-selection record of the profile-guided method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpaTrace {
    pub selected_k: usize,
    pub bic: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub fallback_used: bool,
    pub candidates: Vec<BicCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Mixed-model fit summary and diagnostics kept with the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmExport {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub sigma_u: f64,
    pub log_sigma_mean: f64,
    pub log_sigma_sd: f64,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub mean_residual: f64,
    pub clamped: usize,
    pub residual_histogram: Vec<HistogramBin>,
    pub calibration: Vec<CalibrationBin>,
}

/// Realised-cohort checks used by the sensitivity experiments: the achieved
/// non-HDL/LDL rank correlation and the HbA1c skewness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalDiagnostics {
    pub nonhdl_ldl_spearman: Option<f64>,
    pub hba1c_skewness: Option<f64>,
}

/// Everything one benchmark condition produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub kind: SpecKind,
    pub seed: u64,
    pub n: usize,
    pub j: usize,
    pub p: usize,
    pub window_start: Option<u32>,
    pub window_width: Option<u32>,
    pub pass: Option<u8>,
    pub p_star: Option<f64>,
    pub eligible_count: usize,
    /// Per-physician behaviour-group label (five-group model only).
    pub group_labels: Vec<Option<u8>>,
    pub p_high: Vec<f64>,
    pub theoretical_discordance: Vec<f64>,
    pub ground_truth: Vec<f64>,
    pub scores: Vec<MethodScores>,
    /// Mean estimate-minus-truth per rate-scale method.
    pub deltas: BTreeMap<String, MeanDelta>,
    /// Rank correlation per method. The target is the realised ground truth,
    /// except under continuous heterogeneity where discrimination is judged
    /// against the theoretical discordance of each physician's draw.
    pub spearman: BTreeMap<String, f64>,
    /// Physicians without an estimate, per method.
    pub exclusions: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
    pub diagnostics: MarginalDiagnostics,
    pub genetic: Option<GeneticTrace>,
    pub lpa: Option<LpaTrace>,
    pub glmm: Option<GlmmExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentFailure {
    pub experiment_id: String,
    pub message: String,
}

/// Completed reports in catalog order plus the conditions that failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub reports: Vec<ExperimentReport>,
    pub failures: Vec<ExperimentFailure>,
}

/// Methods actually run for a condition: the requested subset in canonical
/// order, minus the balance-optimized matcher on the continuous experiment.
pub fn methods_for(kind: SpecKind, requested: &[MethodId]) -> Vec<MethodId> {
    MethodId::ALL
        .into_iter()
        .filter(|m| requested.contains(m))
        .filter(|&m| {
            !(kind == SpecKind::ContinuousHeterogeneity && m == MethodId::GeneticMahalanobis)
        })
        .collect()
}

/// Desk-scale profile: two physicians, two hundred patients, every module on
/// its real code path in a few seconds.
pub fn smoke_spec(master_seed: u64) -> ExperimentSpec {
    let id = "smoke".to_string();
    ExperimentSpec {
        seed: stream_seed(master_seed, &[&id]),
        id,
        kind: SpecKind::Score2Reference,
        cohort: CohortConfig::new(200, 2, 90),
        physician_model: PhysicianModel::ContinuousUniform {
            p_high_lo: 0.5,
            p_high_hi: 1.0,
            p_low: 0.05,
        },
        rule: RuleSpec::Score2,
        pass_index: None,
        p_star: None,
    }
}

/// What the estimators are allowed to see. No eligibility information.
struct EstimatorInput<'a> {
    x: &'a [f64],
    std: &'a StandardizedCohort,
    y: &'a [bool],
    physician_of: &'a [usize],
    panels: &'a [Vec<usize>],
    n: usize,
    p: usize,
    j: usize,
    /// Experiment stream root; per-method seeds are tagged off it.
    seed: u64,
}

struct MethodOutput {
    scores: Vec<Option<f64>>,
    genetic: Option<GeneticTrace>,
    lpa: Option<LpaTrace>,
    glmm: Option<GlmmExport>,
}

impl MethodOutput {
    fn scores_only(scores: Vec<Option<f64>>) -> Self {
        MethodOutput { scores, genetic: None, lpa: None, glmm: None }
    }
}

/// Per-panel pipeline shared by all pairing methods: distance matrix, then
/// one-to-one matching under the panel caliper, then pair discordance.
fn paired_discordance<F>(input: &EstimatorInput, dist_for: F) -> Vec<Option<f64>>
where
    F: Fn(usize, &[usize]) -> DistanceMatrix + Sync,
{
    input
        .panels
        .par_iter()
        .enumerate()
        .map(|(ph, members)| {
            if members.len() < 2 {
                return None;
            }
            let d = dist_for(ph, members);
            let pairs = matchcore::pair_one_to_one(&d);
            let y_panel: Vec<bool> = members.iter().map(|&i| input.y[i]).collect();
            matchcore::discordance_from_pairs(&pairs, &y_panel)
        })
        .collect()
}

fn residual_histogram(residuals: &[f64], bins: usize) -> Vec<HistogramBin> {
    assert!(bins >= 1 && !residuals.is_empty());
    let lo = residuals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![HistogramBin { lo, hi, count: residuals.len() }];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &r in residuals {
        let b = (((r - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            count,
        })
        .collect()
}

fn estimate_method(method: MethodId, input: &EstimatorInput) -> Result<MethodOutput> {
    let seed = tagged_seed(input.seed, method.as_str());
    let p = input.p;
    match method {
        MethodId::Euclidean => Ok(MethodOutput::scores_only(paired_discordance(
            input,
            |ph, members| matchcore::distance_matrix(Metric::Euclidean, &input.std.z, p, members, ph),
        ))),
        MethodId::Mahalanobis => {
            let transform = matchcore::mahalanobis_transform(&input.std.z, input.n, p);
            Ok(MethodOutput::scores_only(paired_discordance(input, |ph, members| {
                matchcore::distance_matrix(Metric::Mahalanobis(&transform), &input.std.z, p, members, ph)
            })))
        }
        MethodId::LearnedWeights => {
            let config = ForestConfig::standard(input.n, seed);
            let model = weights::train_forest(&input.std.z, input.y, p, &config)?;
            let w = weights::gini_importances(&model);
            Ok(MethodOutput::scores_only(paired_discordance(input, |ph, members| {
                matchcore::distance_matrix(Metric::Weighted(&w), &input.std.z, p, members, ph)
            })))
        }
        MethodId::GeneticMahalanobis => {
            let config = DEConfig::standard(p, seed);
            let found = genmatch::optimize_weights(&input.std.z, p, input.y, &config);
            let scores =
                genmatch::genetic_mahalanobis_estimate(&input.std.z, p, input.y, input.panels, &found.w_hat);
            Ok(MethodOutput {
                scores,
                genetic: Some(GeneticTrace {
                    w_hat: found.w_hat,
                    achieved_loss: found.achieved_loss,
                    evaluations: found.evaluations,
                    best_loss_by_generation: found.trace,
                }),
                lpa: None,
                glmm: None,
            })
        }
        MethodId::RfProximity => {
            let config = ForestConfig::standard(input.n, seed);
            let model = weights::train_forest(input.x, input.y, p, &config)?;
            Ok(MethodOutput::scores_only(paired_discordance(input, |ph, members| {
                let mut rows = Vec::with_capacity(members.len() * p);
                for &i in members {
                    rows.extend_from_slice(&input.x[i * p..(i + 1) * p]);
                }
                weights::rf_dissimilarity(&model, &rows, ph)
            })))
        }
        MethodId::LpaGuided => {
            let selection = lpa::fit_gmm_bic(&input.std.z_robust, input.n, p, seed);
            let scores = paired_discordance(input, |ph, members| {
                lpa::hybrid_distance(&selection.memberships, &input.std.z_robust, p, members, HYBRID_ALPHA, ph)
            });
            Ok(MethodOutput {
                scores,
                genetic: None,
                lpa: Some(LpaTrace {
                    selected_k: selection.model.k,
                    bic: selection.model.bic,
                    log_likelihood: selection.model.log_likelihood,
                    converged: selection.model.converged,
                    fallback_used: selection.fallback_used,
                    candidates: selection.candidates,
                }),
                glmm: None,
            })
        }
        MethodId::MutualInfo => {
            let w = weights::mi_weights(&input.std.z, input.y, p, MI_NEIGHBOURS, seed);
            Ok(MethodOutput::scores_only(paired_discordance(input, |ph, members| {
                matchcore::distance_matrix(Metric::Weighted(&w), &input.std.z, p, members, ph)
            })))
        }
        MethodId::Glmm => {
            let fit = glmm::fit_vb(
                &input.std.z,
                p,
                input.y,
                input.physician_of,
                input.j,
                seed,
                &GlmmOptions::default(),
            )?;
            let od = glmm::overdispersion_scores(&fit, &input.std.z, p, input.y, input.physician_of, input.j);
            let calibration =
                glmm::calibration_curve(&fit, &input.std.z, p, input.y, input.physician_of, CALIBRATION_BINS);
            let scores = od.od.iter().map(|&v| Some(v)).collect();
            let export = GlmmExport {
                beta0: fit.beta0,
                beta: fit.beta.clone(),
                u: fit.u.clone(),
                sigma_u: fit.sigma_u,
                log_sigma_mean: fit.log_sigma_mean,
                log_sigma_sd: fit.log_sigma_sd,
                elbo_trace: fit.elbo_trace.clone(),
                iterations: fit.iterations,
                converged: fit.converged,
                mean_residual: stats::mean(&od.residuals),
                clamped: od.clamped,
                residual_histogram: residual_histogram(&od.residuals, 20),
                calibration,
            };
            Ok(MethodOutput { scores, genetic: None, lpa: None, glmm: Some(export) })
        }
    }
}

fn marginal_diagnostics(cohort: &Cohort) -> MarginalDiagnostics {
    let nonhdl: Vec<Option<f64>> = cohort.column(col::NON_HDL).into_iter().map(Some).collect();
    let ldl = cohort.column(col::LDL);
    let rho = evalkit::spearman_rank(&nonhdl, &ldl).ok();
    let skew = stats::skewness(&cohort.column(col::HBA1C));
    MarginalDiagnostics {
        nonhdl_ldl_spearman: rho,
        hba1c_skewness: skew.is_finite().then_some(skew),
    }
}

/// Runs one benchmark condition end to end. The eligibility vector never
/// leaves this function; estimators see covariates, outcomes and panels.
pub fn run_experiment(
    spec: &ExperimentSpec,
    methods: &[MethodId],
    coeffs: &Score2Coefficients,
) -> Result<ExperimentReport> {
    let selected = methods_for(spec.kind, methods);
    if selected.is_empty() {
        return Err(Error::Config(format!("no methods selected for experiment '{}'", spec.id)));
    }

    let cohort = synthgen::generate(&spec.cohort, tagged_seed(spec.seed, "cohort"))?;
    let rule = match spec.rule {
        RuleSpec::Score2 => EligibilityRule::Score2(coeffs.clone()),
        RuleSpec::Window { start, width } => {
            let p_star = spec
                .p_star
                .ok_or_else(|| Error::Config(format!("window rule in '{}' needs p_star", spec.id)))?;
            let rule =
                calibrate_thresholds(&cohort, start, width, p_star, tagged_seed(spec.seed, "tie"))?;
            EligibilityRule::Conjunctive(rule)
        }
    };
    let m = rule.eligibility_vector(&cohort);
    let j = spec.cohort.j;
    let profiles = assign_profiles(&spec.physician_model, j, tagged_seed(spec.seed, "profiles"))?;
    let y = draw_outcomes(&m, &cohort.physician_of, &profiles, tagged_seed(spec.seed, "outcomes"));
    let ground_truth = ground_truth_by_physician(&y, &m, &cohort.physician_of, j)?;
    let eligible_count = m.iter().filter(|&&v| v).count();
    drop(m);

    let std = matchcore::standardize(&cohort);
    let panels = cohort.panels();
    let input = EstimatorInput {
        x: &cohort.x,
        std: &std,
        y: &y,
        physician_of: &cohort.physician_of,
        panels: &panels,
        n: cohort.n(),
        p: cohort.p(),
        j,
        seed: spec.seed,
    };

    let theoretical: Vec<f64> =
        profiles.iter().map(|pr| theoretical_discordance(pr.p_high)).collect();
    // Continuous heterogeneity is a discrimination benchmark: ranks are
    // judged against each physician's theoretical discordance, not against
    // the realised outcomes the estimates themselves were computed from.
    let rank_target: &[f64] = match spec.kind {
        SpecKind::ContinuousHeterogeneity => &theoretical,
        _ => &ground_truth,
    };

    let mut scores = Vec::with_capacity(selected.len());
    let mut deltas = BTreeMap::new();
    let mut spearman = BTreeMap::new();
    let mut exclusions = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut genetic = None;
    let mut lpa_trace = None;
    let mut glmm_export = None;

    for method in selected {
        let out = estimate_method(method, &input)?;
        let name = method.as_str().to_string();
        exclusions.insert(name.clone(), out.scores.iter().filter(|s| s.is_none()).count());
        if method.is_rate_scale() {
            match evalkit::mean_delta(&out.scores, &ground_truth) {
                Ok(md) => {
                    deltas.insert(name.clone(), md);
                }
                Err(e) => warnings.push(format!("{name}: {e}")),
            }
        }
        match evalkit::spearman_rank(&out.scores, rank_target) {
            Ok(rho) => {
                spearman.insert(name.clone(), rho);
            }
            Err(e) => warnings.push(format!("{name}: {e}")),
        }
        scores.push(MethodScores {
            experiment_id: spec.id.clone(),
            method,
            scores: out.scores,
            is_rate_scale: method.is_rate_scale(),
        });
        genetic = genetic.or(out.genetic);
        lpa_trace = lpa_trace.or(out.lpa);
        glmm_export = glmm_export.or(out.glmm);
    }

    let (window_start, window_width) = match spec.rule {
        RuleSpec::Window { start, width } => (Some(start as u32), Some(width as u32)),
        RuleSpec::Score2 => (None, None),
    };

    Ok(ExperimentReport {
        experiment_id: spec.id.clone(),
        kind: spec.kind,
        seed: spec.seed,
        n: cohort.n(),
        j,
        p: cohort.p(),
        window_start,
        window_width,
        pass: spec.pass_index,
        p_star: spec.p_star,
        eligible_count,
        group_labels: profiles.iter().map(|pr| pr.group_label).collect(),
        p_high: profiles.iter().map(|pr| pr.p_high).collect(),
        theoretical_discordance: theoretical,
        ground_truth,
        scores,
        deltas,
        spearman,
        exclusions,
        warnings,
        diagnostics: marginal_diagnostics(&cohort),
        genetic,
        lpa: lpa_trace,
        glmm: glmm_export,
    })
}

/// Runs every spec, in parallel, collecting reports in catalog order and
/// failures with their experiment ids. One failed condition never stops the
/// rest.
pub fn run_catalog(
    specs: &[ExperimentSpec],
    methods: &[MethodId],
    coeffs: &Score2Coefficients,
) -> BenchmarkOutcome {
    let results: Vec<(String, Result<ExperimentReport>)> = specs
        .par_iter()
        .map(|spec| (spec.id.clone(), run_experiment(spec, methods, coeffs)))
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (experiment_id, result) in results {
        match result {
            Ok(report) => reports.push(report),
            Err(e) => failures.push(ExperimentFailure { experiment_id, message: e.to_string() }),
        }
    }
    BenchmarkOutcome { reports, failures }
}

/// Per-experiment deltas of the progressive subset, keyed by method, in
/// report order. Feeds the cross-experiment aggregation.
pub fn progressive_deltas(reports: &[ExperimentReport]) -> BTreeMap<MethodId, Vec<ExperimentDelta>> {
    let mut out: BTreeMap<MethodId, Vec<ExperimentDelta>> = BTreeMap::new();
    for report in reports.iter().filter(|r| r.kind == SpecKind::Progressive) {
        for (name, delta) in &report.deltas {
            let method: MethodId = name.parse().expect("delta keys come from MethodId::as_str");
            out.entry(method).or_default().push(ExperimentDelta {
                experiment_id: report.experiment_id.clone(),
                window_width: report.window_width,
                pass: report.pass,
                delta: delta.value,
            });
        }
    }
    out
}

/// Panel-size sensitivity grid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub master_seed: u64,
    pub n_values: Vec<usize>,
    pub j_values: Vec<usize>,
    /// Physician-level bootstrap replicates per cell.
    pub bootstrap_replicates: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            master_seed: 42,
            n_values: vec![5_000, 10_000, 20_000, 30_000],
            j_values: vec![5, 10, 20, 50, 100],
            bootstrap_replicates: 10,
        }
    }
}

/// Panel floor for a grid cell: the reference floor where it fits, otherwise
/// the equal-split size.
pub fn grid_min_panel(n: usize, j: usize) -> usize {
    90.min(n / j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCellReport {
    pub experiment_id: String,
    pub n: usize,
    pub j: usize,
    pub min_panel: usize,
    pub seed: u64,
    pub eligible_count: usize,
    pub ground_truth: Vec<f64>,
    /// Plain mean delta on the realised cohort, per method.
    pub mean_delta: BTreeMap<String, f64>,
    /// Physician-bootstrap deltas, one value per replicate.
    pub bootstrap_deltas: BTreeMap<String, Vec<f64>>,
    pub bootstrap_mean: BTreeMap<String, f64>,
    pub bootstrap_sd: BTreeMap<String, f64>,
    pub exclusions: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub cells: Vec<GridCellReport>,
    pub failures: Vec<ExperimentFailure>,
}

fn run_grid_cell(
    spec: &ExperimentSpec,
    methods: &[MethodId],
    coeffs: &Score2Coefficients,
    replicates: usize,
) -> Result<GridCellReport> {
    let report = run_experiment(spec, methods, coeffs)?;
    let j = report.j;
    let boot_base = tagged_seed(spec.seed, "boot");
    let mut bootstrap_deltas: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rep in 0..replicates {
        let mut rng = seeded_rng(indexed_seed(boot_base, rep as u64));
        // one physician resample shared by all methods in this replicate
        let idx: Vec<usize> =
            (0..j).map(|_| ((rng.gen::<f64>() * j as f64) as usize).min(j - 1)).collect();
        for ms in &report.scores {
            let est: Vec<Option<f64>> = idx.iter().map(|&i| ms.scores[i]).collect();
            let gt: Vec<f64> = idx.iter().map(|&i| report.ground_truth[i]).collect();
            if let Ok(md) = evalkit::mean_delta(&est, &gt) {
                bootstrap_deltas.entry(ms.method.as_str().to_string()).or_default().push(md.value);
            }
        }
    }
    let bootstrap_mean: BTreeMap<String, f64> =
        bootstrap_deltas.iter().map(|(k, v)| (k.clone(), stats::mean(v))).collect();
    let bootstrap_sd: BTreeMap<String, f64> = bootstrap_deltas
        .iter()
        .map(|(k, v)| (k.clone(), if v.len() > 1 { stats::sd(v, 1) } else { 0.0 }))
        .collect();
    Ok(GridCellReport {
        experiment_id: report.experiment_id,
        n: report.n,
        j,
        min_panel: spec.cohort.min_panel,
        seed: spec.seed,
        eligible_count: report.eligible_count,
        ground_truth: report.ground_truth,
        mean_delta: report.deltas.iter().map(|(k, v)| (k.clone(), v.value)).collect(),
        bootstrap_deltas,
        bootstrap_mean,
        bootstrap_sd,
        exclusions: report.exclusions,
    })
}

/// Cell specs of the grid in row-major (n, then J) order.
pub fn grid_specs(config: &GridConfig) -> Vec<ExperimentSpec> {
    let mut specs = Vec::with_capacity(config.n_values.len() * config.j_values.len());
    for &n in &config.n_values {
        for &j in &config.j_values {
            let id = format!("grid_n{n}_J{j}");
            let seed = stream_seed(config.master_seed, &["grid", &id]);
            specs.push(ExperimentSpec {
                id,
                kind: SpecKind::Score2Reference,
                cohort: CohortConfig::new(n, j, grid_min_panel(n, j)),
                physician_model: PhysicianModel::FiveGroup,
                rule: RuleSpec::Score2,
                pass_index: None,
                p_star: None,
                seed,
            });
        }
    }
    specs
}

/// Reference-rule replication over the (n, J) grid with a physician-level
/// bootstrap per cell. Only the six pairing methods run here.
pub fn run_grid(config: &GridConfig, methods: &[MethodId], coeffs: &Score2Coefficients) -> GridOutcome {
    let specs = grid_specs(config);
    let grid_methods: Vec<MethodId> =
        GRID_METHODS.into_iter().filter(|m| methods.contains(m)).collect();
    let results: Vec<(String, Result<GridCellReport>)> = specs
        .par_iter()
        .map(|spec| {
            (spec.id.clone(), run_grid_cell(spec, &grid_methods, coeffs, config.bootstrap_replicates))
        })
        .collect();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (experiment_id, result) in results {
        match result {
            Ok(cell) => cells.push(cell),
            Err(e) => failures.push(ExperimentFailure { experiment_id, message: e.to_string() }),
        }
    }
    GridOutcome { cells, failures }
}
