//! Evaluation metrics and aggregation: per-experiment mean delta and
//! Spearman rank preservation, percentile bootstrap intervals, and the
//! cross-experiment summaries behind the benchmark tables.
//!
//! Scores live on two scales. Matching methods produce discordance rates in
//! [0,1]; the GLMM produces a non-negative overdispersion score. Deltas are
//! defined only on the rate scale, so the GLMM enters rank comparisons and
//! nothing else.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Euclidean,
    Mahalanobis,
    LearnedWeights,
    GeneticMahalanobis,
    RfProximity,
    LpaGuided,
    MutualInfo,
    Glmm,
}

impl MethodId {
    pub const ALL: [MethodId; 8] = [
        MethodId::Euclidean,
        MethodId::Mahalanobis,
        MethodId::LearnedWeights,
        MethodId::GeneticMahalanobis,
        MethodId::RfProximity,
        MethodId::LpaGuided,
        MethodId::MutualInfo,
        MethodId::Glmm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Euclidean => "euclidean",
            MethodId::Mahalanobis => "mahalanobis",
            MethodId::LearnedWeights => "learned_weights",
            MethodId::GeneticMahalanobis => "genetic_mahalanobis",
            MethodId::RfProximity => "rf_proximity",
            MethodId::LpaGuided => "lpa_guided",
            MethodId::MutualInfo => "mutual_info",
            MethodId::Glmm => "glmm",
        }
    }

    /// False only for the GLMM score, which is not a discordance rate.
    pub fn is_rate_scale(self) -> bool {
        self != MethodId::Glmm
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Per-physician scores of one method on one experiment. A `None` marks a
/// physician for whom the method produced no estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub experiment_id: String,
    pub method: MethodId,
    pub scores: Vec<Option<f64>>,
    pub is_rate_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanDelta {
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Mean estimate-minus-truth over physicians, excluding no-estimate entries
/// pairwise.
pub fn mean_delta(estimates: &[Option<f64>], ground_truth: &[f64]) -> Result<MeanDelta> {
    assert_eq!(estimates.len(), ground_truth.len());
    let mut sum = 0.0;
    let mut used = 0usize;
    for (est, truth) in estimates.iter().zip(ground_truth) {
        if let Some(e) = est {
            sum += e - truth;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedStatistic(
            "mean delta undefined: every physician lacks an estimate".into(),
        ));
    }
    Ok(MeanDelta { value: sum / used as f64, used, excluded: estimates.len() - used })
}

/// Spearman correlation with average-rank ties, over physicians where the
/// method produced an estimate.
pub fn spearman_rank(scores: &[Option<f64>], ground_truth: &[f64]) -> Result<f64> {
    assert_eq!(scores.len(), ground_truth.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (s, t) in scores.iter().zip(ground_truth) {
        if let Some(v) = s {
            xs.push(*v);
            ys.push(*t);
        }
    }
    if xs.len() < 3 {
        return Err(Error::UndefinedStatistic(format!(
            "Spearman needs at least 3 paired scores, got {}",
            xs.len()
        )));
    }
    let rx = stats::average_ranks(&xs);
    let ry = stats::average_ranks(&ys);
    let mx = stats::mean(&rx);
    let my = stats::mean(&ry);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedStatistic(
            "Spearman undefined: a score vector has zero rank variance".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

pub const BOOTSTRAP_REPLICATES: usize = 2000;
pub const BOOTSTRAP_SEED: u64 = 42;

/// 95% percentile bootstrap of `statistic` over resamples of `values`.
pub fn percentile_bootstrap<F>(values: &[f64], statistic: F, b: usize, seed: u64) -> BootstrapSummary
where
    F: Fn(&[f64]) -> f64,
{
    assert!(!values.is_empty(), "bootstrap needs a non-empty sample");
    let n = values.len();
    let point = statistic(values);
    let mut rng = seeded_rng(seed);
    let mut resample = vec![0.0; n];
    let mut stats_out = Vec::with_capacity(b);
    for _ in 0..b {
        for slot in resample.iter_mut() {
            let idx = (rng.gen::<f64>() * n as f64) as usize;
            *slot = values[idx.min(n - 1)];
        }
        stats_out.push(statistic(&resample));
    }
    let lo = stats::quantile_select(&mut stats_out, 0.025);
    let hi = stats::quantile_select(&mut stats_out, 0.975);
    BootstrapSummary { point, lo, hi }
}

/// One experiment's mean delta with the metadata aggregation keys on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDelta {
    pub experiment_id: String,
    /// Number of risk-band windows spanned by the rule; None for the
    /// non-progressive experiments.
    pub window_width: Option<u32>,
    /// Threshold-direction pass (1 or 2) for progressive experiments.
    pub pass: Option<u8>,
    pub delta: f64,
}

/// Aggregate row of the cross-experiment table for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodId,
    pub n_experiments: usize,
    pub mean_delta: BootstrapSummary,
    pub mean_abs_delta: BootstrapSummary,
    pub median_delta: BootstrapSummary,
    /// Fraction of experiments with strictly positive delta, in percent.
    pub percent_positive: BootstrapSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowBinSummary {
    pub label: String,
    pub count: usize,
    /// Mean delta per method, CI over the experiments in the bin.
    pub mean_delta_by_method: BTreeMap<String, BootstrapSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub pass: u8,
    pub count: usize,
    /// Mean delta per method, CI over the experiments in the pass.
    pub mean_delta_by_method: BTreeMap<String, BootstrapSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossExperimentSummary {
    pub methods: Vec<MethodSummary>,
    pub window_bins: Vec<WindowBinSummary>,
    pub passes: Vec<PassSummary>,
    pub warnings: Vec<String>,
}

pub const WINDOW_BIN_LABELS: [&str; 4] = ["1", "2-3", "4-6", "7-9"];

/// Bin label for a progressive-rule window width.
pub fn window_bin(width: u32) -> &'static str {
    match width {
        1 => "1",
        2..=3 => "2-3",
        4..=6 => "4-6",
        _ => "7-9",
    }
}

/// Summarize per-experiment deltas across the progressive set: per-method
/// aggregates with experiment-unit bootstrap CIs, window-width bins, and
/// per-pass means.
pub fn cross_experiment_summary(
    per_method: &BTreeMap<MethodId, Vec<ExperimentDelta>>,
    expected_experiments: usize,
) -> CrossExperimentSummary {
    assert!(
        !per_method.contains_key(&MethodId::Glmm),
        "GLMM scores are not on the rate scale and have no delta"
    );
    let mut warnings = Vec::new();
    let mut methods = Vec::new();
    for (&method, deltas) in per_method {
        if deltas.len() != expected_experiments {
            warnings.push(format!(
                "partial aggregate for {method}: {} of {expected_experiments} experiments",
                deltas.len()
            ));
        }
        let values: Vec<f64> = deltas.iter().map(|d| d.delta).collect();
        let boot = |f: fn(&[f64]) -> f64| {
            percentile_bootstrap(&values, f, BOOTSTRAP_REPLICATES, BOOTSTRAP_SEED)
        };
        methods.push(MethodSummary {
            method,
            n_experiments: values.len(),
            mean_delta: boot(stats::mean),
            mean_abs_delta: boot(|xs| {
                xs.iter().map(|v| v.abs()).sum::<f64>() / xs.len() as f64
            }),
            median_delta: boot(stats::median),
            percent_positive: boot(|xs| {
                100.0 * xs.iter().filter(|&&v| v > 0.0).count() as f64 / xs.len() as f64
            }),
        });
    }

    let mut window_bins = Vec::new();
    for label in WINDOW_BIN_LABELS {
        let mut mean_delta_by_method = BTreeMap::new();
        let mut count = 0usize;
        for (&method, deltas) in per_method {
            let in_bin: Vec<f64> = deltas
                .iter()
                .filter(|d| d.window_width.is_some_and(|w| window_bin(w) == label))
                .map(|d| d.delta)
                .collect();
            if !in_bin.is_empty() {
                count = count.max(in_bin.len());
                mean_delta_by_method.insert(
                    method.as_str().to_string(),
                    percentile_bootstrap(&in_bin, stats::mean, BOOTSTRAP_REPLICATES, BOOTSTRAP_SEED),
                );
            }
        }
        window_bins.push(WindowBinSummary { label: label.to_string(), count, mean_delta_by_method });
    }

    let mut passes = Vec::new();
    for pass in [1u8, 2u8] {
        let mut mean_delta_by_method = BTreeMap::new();
        let mut count = 0usize;
        for (&method, deltas) in per_method {
            let in_pass: Vec<f64> = deltas
                .iter()
                .filter(|d| d.pass == Some(pass))
                .map(|d| d.delta)
                .collect();
            if !in_pass.is_empty() {
                count = count.max(in_pass.len());
                mean_delta_by_method.insert(
                    method.as_str().to_string(),
                    percentile_bootstrap(&in_pass, stats::mean, BOOTSTRAP_REPLICATES, BOOTSTRAP_SEED),
                );
            }
        }
        passes.push(PassSummary { pass, count, mean_delta_by_method });
    }

    CrossExperimentSummary { methods, window_bins, passes, warnings }
}
