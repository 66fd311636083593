//! Eligibility rules and the experiment catalog.
//!
//! Two rule families decide which patients an idealised guideline would
//! treat: the SCORE2/SCORE2-OP cardiovascular ten-year risk model with
//! age-banded risk cutoffs, and quantile-calibrated conjunctive window
//! rules over consecutive covariates. [`build_catalog`] enumerates the
//! full benchmark: one SCORE2 reference condition, 90 progressive window
//! conditions (45 windows, two independent passes), two distributional
//! sensitivity conditions and one continuous-heterogeneity condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prescribe::PhysicianModel;
use crate::rng::{stream_seed, tagged_seed};
use crate::stats::quantile_sorted;
use crate::synthgen::{col, Cohort, CohortConfig, CohortVariant};

// ---------------------------------------------------------------------------
// SCORE2 / SCORE2-OP
// ---------------------------------------------------------------------------

/// Log-hazard coefficients and recalibration scales for one sex within one
/// age-range model. Transformed predictors follow the published centering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SexCoefficients {
    pub age: f64,
    pub smoking: f64,
    pub sbp: f64,
    pub tchol: f64,
    pub hdl: f64,
    pub smoking_age: f64,
    pub sbp_age: f64,
    pub tchol_age: f64,
    pub hdl_age: f64,
    pub baseline_survival: f64,
    pub scale1: f64,
    pub scale2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Centering {
    pub age_center: f64,
    pub age_scale: f64,
    pub sbp_center: f64,
    pub sbp_scale: f64,
    pub tchol_center: f64,
    pub tchol_scale: f64,
    pub hdl_center: f64,
    pub hdl_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeRangeModel {
    pub centering: Centering,
    pub male: SexCoefficients,
    pub female: SexCoefficients,
}

/// Published ten-year risk model coefficients, shipped as a versioned JSON
/// asset. SCORE2 covers ages 40-69, SCORE2-OP ages 70 and above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Score2Coefficients {
    pub version: String,
    pub risk_region: String,
    pub score2: AgeRangeModel,
    pub score2_op: AgeRangeModel,
}

const DEFAULT_COEFFICIENTS: &str = include_str!("../assets/score2_coefficients_v1.json");

impl Score2Coefficients {
    /// The coefficient set bundled with the crate (low risk region).
    pub fn bundled() -> Self {
        serde_json::from_str(DEFAULT_COEFFICIENTS).expect("bundled SCORE2 coefficients parse")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

/// Inputs of the ten-year risk model.
#[derive(Debug, Clone, Copy)]
pub struct RiskInputs {
    pub age: f64,
    pub male: bool,
    pub smoker: bool,
    pub sbp: f64,
    /// Total cholesterol, mmol/L.
    pub tchol: f64,
    pub hdl: f64,
}

impl RiskInputs {
    /// Reads the risk inputs off a default-panel covariate row.
    /// Total cholesterol is non-HDL plus HDL.
    pub fn from_row(row: &[f64]) -> Self {
        RiskInputs {
            age: row[col::AGE],
            male: row[col::MALE] > 0.5,
            smoker: row[col::SMOKER] > 0.5,
            sbp: row[col::SBP],
            tchol: row[col::NON_HDL] + row[col::HDL],
            hdl: row[col::HDL],
        }
    }
}

/// Ten-year cardiovascular risk in percent. SCORE2 for ages up to 69,
/// SCORE2-OP above, both recalibrated with the configured region scales.
pub fn score2_risk(inputs: &RiskInputs, coeffs: &Score2Coefficients) -> f64 {
    let model = if inputs.age <= 69.0 { &coeffs.score2 } else { &coeffs.score2_op };
    let c = &model.centering;
    let b = if inputs.male { &model.male } else { &model.female };

    let cage = (inputs.age - c.age_center) / c.age_scale;
    let csbp = (inputs.sbp - c.sbp_center) / c.sbp_scale;
    let ctchol = (inputs.tchol - c.tchol_center) / c.tchol_scale;
    let chdl = (inputs.hdl - c.hdl_center) / c.hdl_scale;
    let smoking = if inputs.smoker { 1.0 } else { 0.0 };

    let lp = b.age * cage
        + b.smoking * smoking
        + b.sbp * csbp
        + b.tchol * ctchol
        + b.hdl * chdl
        + cage * (b.smoking_age * smoking + b.sbp_age * csbp + b.tchol_age * ctchol + b.hdl_age * chdl);

    let uncalibrated = (1.0 - b.baseline_survival.powf(lp.exp())).clamp(1e-15, 1.0 - 1e-15);
    let recalibrated = 1.0 - (-(b.scale1 + b.scale2 * (-(1.0 - uncalibrated).ln()).ln()).exp()).exp();
    100.0 * recalibrated
}

/// Age-banded treatment eligibility on the ten-year risk percentage.
pub fn score2_eligible(age: f64, risk_percent: f64) -> bool {
    if age < 50.0 {
        risk_percent >= 2.5
    } else if age <= 69.0 {
        risk_percent >= 5.0
    } else {
        risk_percent >= 7.5
    }
}

// ---------------------------------------------------------------------------
// Quantile-calibrated conjunctive window rules
// ---------------------------------------------------------------------------

/// A calibrated conjunctive rule: patient eligible iff every active covariate
/// sits at or below its threshold.
///
/// Thresholds target quantile level `p_star^(1/w)` per covariate, so that a
/// w-covariate conjunction has eligibility probability close to `p_star`
/// under covariate independence. Tied values (binary covariates, integer
/// rounding, clip-boundary atoms) would break that calibration, so every
/// comparison adds a sub-resolution tie-break offset derived by hashing the
/// patient row: deterministic, order-free, and far below any real value gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjunctiveRule {
    /// Active covariate columns, consecutive in panel order.
    pub active: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Salt of the tie-break hash, fixed per experiment.
    pub tie_salt: u64,
    /// Per-active-column tie-break scale (1e-9 of the column range).
    pub tie_scales: Vec<f64>,
}

/// Deterministic tie-break offset in [0, 1) for one (row, column) pair.
fn tie_break_unit(salt: u64, column: usize, row: &[f64]) -> f64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    eat(&salt.to_le_bytes());
    eat(&(column as u64).to_le_bytes());
    for v in row {
        eat(&v.to_bits().to_le_bytes());
    }
    // splitmix finalizer, then take 53 mantissa bits
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn jittered(row: &[f64], column: usize, scale: f64, salt: u64) -> f64 {
    row[column] + scale * tie_break_unit(salt, column, row)
}

/// Calibrates per-covariate thresholds for the window starting at
/// `start` with width `width`, targeting eligibility fraction `p_star`.
pub fn calibrate_thresholds(cohort: &Cohort, start: usize, width: usize, p_star: f64, tie_salt: u64) -> Result<ConjunctiveRule> {
    if width == 0 || start + width > cohort.p() {
        return Err(Error::Config(format!("window start={start} width={width} out of range for p={}", cohort.p())));
    }
    if !(p_star > 0.0 && p_star < 1.0) {
        return Err(Error::Config(format!("p_star {p_star} out of (0, 1)")));
    }
    let level = p_star.powf(1.0 / width as f64);
    let active: Vec<usize> = (start..start + width).collect();
    let mut thresholds = Vec::with_capacity(width);
    let mut tie_scales = Vec::with_capacity(width);
    for &c in &active {
        let column = cohort.column(c);
        let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = 1e-9 * (hi - lo).max(1.0);
        let mut tilted: Vec<f64> =
            (0..cohort.n()).map(|i| jittered(cohort.row(i), c, scale, tie_salt)).collect();
        tilted.sort_by(|a, b| a.partial_cmp(b).expect("finite covariate"));
        thresholds.push(quantile_sorted(&tilted, level));
        tie_scales.push(scale);
    }
    Ok(ConjunctiveRule { active, thresholds, tie_salt, tie_scales })
}

/// Conjunctive membership: every active covariate at or below its threshold.
pub fn conjunctive_eligible(row: &[f64], rule: &ConjunctiveRule) -> bool {
    rule.active
        .iter()
        .zip(&rule.thresholds)
        .zip(&rule.tie_scales)
        .all(|((&c, &tau), &scale)| jittered(row, c, scale, rule.tie_salt) <= tau)
}

/// A fully materialised eligibility rule.
#[derive(Debug, Clone)]
pub enum EligibilityRule {
    Score2(Score2Coefficients),
    Conjunctive(ConjunctiveRule),
}

impl EligibilityRule {
    pub fn eligible(&self, row: &[f64]) -> bool {
        match self {
            EligibilityRule::Score2(coeffs) => {
                let inputs = RiskInputs::from_row(row);
                score2_eligible(inputs.age, score2_risk(&inputs, coeffs))
            }
            EligibilityRule::Conjunctive(rule) => conjunctive_eligible(row, rule),
        }
    }

    /// Eligibility of every patient in the cohort.
    pub fn eligibility_vector(&self, cohort: &Cohort) -> Vec<bool> {
        (0..cohort.n()).map(|i| self.eligible(cohort.row(i))).collect()
    }
}

// ---------------------------------------------------------------------------
// Experiment catalog
// ---------------------------------------------------------------------------

/// Rule selector held by a catalog entry; conjunctive thresholds are
/// calibrated at run time on the realised cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleSpec {
    Score2,
    Window { start: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Score2Reference,
    Progressive,
    SensitivityCopula,
    SensitivityLognormal,
    ContinuousHeterogeneity,
}

/// One benchmark condition: everything needed to run it, including the
/// derived RNG stream seed and the pre-drawn eligibility target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub kind: SpecKind,
    pub cohort: CohortConfig,
    pub physician_model: PhysicianModel,
    pub rule: RuleSpec,
    pub pass_index: Option<u8>,
    pub p_star: Option<f64>,
    /// Root of all RNG streams of this experiment.
    pub seed: u64,
}

/// Catalog-level knobs. Defaults reproduce the published benchmark sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub master_seed: u64,
    pub n: usize,
    pub j: usize,
    pub min_panel: usize,
    pub continuous_n: usize,
    pub continuous_j: usize,
    pub copula_spearman: f64,
    pub lognormal_mu: f64,
    pub lognormal_sigma: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            master_seed: 42,
            n: 10_000,
            j: 20,
            min_panel: 90,
            continuous_n: 20_000,
            continuous_j: 50,
            copula_spearman: 0.8,
            lognormal_mu: 1.846,
            lognormal_sigma: 0.228,
        }
    }
}

/// Enumerates the full 94-condition benchmark.
pub fn build_catalog(config: &CatalogConfig) -> Vec<ExperimentSpec> {
    let base = CohortConfig::new(config.n, config.j, config.min_panel);
    let mut specs = Vec::with_capacity(94);

    let make = |id: String, kind, cohort, physician_model, rule, pass_index, p_star| {
        let seed = stream_seed(config.master_seed, &[&id]);
        ExperimentSpec { id, kind, cohort, physician_model, rule, pass_index, p_star, seed }
    };

    specs.push(make(
        "score2".into(),
        SpecKind::Score2Reference,
        base.clone(),
        PhysicianModel::FiveGroup,
        RuleSpec::Score2,
        None,
        None,
    ));

    let p = crate::synthgen::default_covariates().len();
    for pass in 1u8..=2 {
        for width in 1..=p {
            for start in 0..=(p - width) {
                let id = format!("w{width}_s{start}_pass{pass}");
                let seed = stream_seed(config.master_seed, &[&id]);
                let mut rng = crate::rng::seeded_rng(tagged_seed(seed, "pstar"));
                let p_star = 0.2 + 0.6 * rand::Rng::gen::<f64>(&mut rng);
                specs.push(ExperimentSpec {
                    id,
                    kind: SpecKind::Progressive,
                    cohort: base.clone(),
                    physician_model: PhysicianModel::FiveGroup,
                    rule: RuleSpec::Window { start, width },
                    pass_index: Some(pass),
                    p_star: Some(p_star),
                    seed,
                });
            }
        }
    }

    let mut copula = base.clone();
    copula.variant = CohortVariant::CopulaNonHdlLdl { spearman: config.copula_spearman };
    specs.push(make(
        "copula".into(),
        SpecKind::SensitivityCopula,
        copula,
        PhysicianModel::FiveGroup,
        RuleSpec::Score2,
        None,
        None,
    ));

    let mut lognormal = base.clone();
    lognormal.variant = CohortVariant::LognormalHba1c { mu: config.lognormal_mu, sigma: config.lognormal_sigma };
    specs.push(make(
        "lognormal".into(),
        SpecKind::SensitivityLognormal,
        lognormal,
        PhysicianModel::FiveGroup,
        RuleSpec::Score2,
        None,
        None,
    ));

    specs.push(make(
        "continuous".into(),
        SpecKind::ContinuousHeterogeneity,
        CohortConfig::new(config.continuous_n, config.continuous_j, config.min_panel),
        PhysicianModel::ContinuousUniform { p_high_lo: 0.5, p_high_hi: 1.0, p_low: 0.05 },
        RuleSpec::Score2,
        None,
        None,
    ));

    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{default_covariates, generate};

    fn reference_inputs() -> RiskInputs {
        RiskInputs { age: 50.0, male: true, smoker: false, sbp: 120.0, tchol: 5.0, hdl: 1.3 }
    }

    /// Independent longhand computation of the published SCORE2 formula for
    /// the reference patient, coded from the coefficient tables rather than
    /// the JSON asset.
    fn reference_risk_oracle() -> f64 {
        let cage = (50.0 - 60.0) / 5.0;
        let ctchol: f64 = (5.0 - 6.0) / 1.0;
        // male, non-smoker, csbp = 0, chdl = 0
        let lp = 0.3742 * cage + 0.1458 * ctchol + (-0.0281) * ctchol * cage;
        let uncal: f64 = 1.0 - 0.9605f64.powf(lp.exp());
        let recal = 1.0 - (-((-0.5699) + 0.7476 * (-(1.0 - uncal).ln()).ln()).exp()).exp();
        100.0 * recal
    }

    #[test]
    fn risk_matches_independent_oracle_on_reference_patient() {
        let coeffs = Score2Coefficients::bundled();
        let got = score2_risk(&reference_inputs(), &coeffs);
        let want = reference_risk_oracle();
        assert!((got - want).abs() < 0.1, "got {got}, oracle {want}");
    }

    #[test]
    fn risk_increases_with_age_and_smoking() {
        let coeffs = Score2Coefficients::bundled();
        let mut rng = crate::rng::seeded_rng(99);
        for _ in 0..100 {
            let base = RiskInputs {
                age: 40.0 + rand::Rng::gen_range(&mut rng, 0..30) as f64,
                male: rand::Rng::gen_bool(&mut rng, 0.5),
                smoker: false,
                sbp: 100.0 + 80.0 * rand::Rng::gen::<f64>(&mut rng),
                tchol: 3.5 + 4.0 * rand::Rng::gen::<f64>(&mut rng),
                hdl: 0.6 + 1.6 * rand::Rng::gen::<f64>(&mut rng),
            };
            let older = RiskInputs { age: base.age + 20.0, ..base };
            assert!(
                score2_risk(&older, &coeffs) >= score2_risk(&base, &coeffs),
                "age monotonicity failed at {base:?}"
            );
            let smoker = RiskInputs { smoker: true, ..base };
            assert!(
                score2_risk(&smoker, &coeffs) > score2_risk(&base, &coeffs),
                "smoking effect failed at {base:?}"
            );
        }
    }

    #[test]
    fn eligibility_bands() {
        assert!(score2_eligible(45.0, 2.5));
        assert!(!score2_eligible(45.0, 2.4));
        assert!(!score2_eligible(60.0, 4.9));
        assert!(score2_eligible(60.0, 5.0));
        assert!(score2_eligible(75.0, 7.5));
        assert!(!score2_eligible(75.0, 7.4));
    }

    #[test]
    fn bundled_coefficients_roundtrip_and_validate() {
        let coeffs = Score2Coefficients::bundled();
        assert_eq!(coeffs.version, "1");
        assert_eq!(coeffs.risk_region, "low");
        let text = serde_json::to_string(&coeffs).unwrap();
        assert_eq!(Score2Coefficients::from_json_str(&text).unwrap(), coeffs);
        // unknown keys are transcription bugs, not extensions
        assert!(Score2Coefficients::from_json_str(&text.replace("\"age\":", "\"agee\":")).is_err());
    }

    #[test]
    fn single_covariate_threshold_is_the_median() {
        let cohort = generate(&CohortConfig::new(10_000, 2, 90), 3).unwrap();
        let rule = calibrate_thresholds(&cohort, col::HBA1C, 1, 0.5, 17).unwrap();
        let med = crate::stats::median(&cohort.column(col::HBA1C));
        assert!((rule.thresholds[0] - med).abs() < 1e-3, "threshold {} vs median {med}", rule.thresholds[0]);
        let fraction = eligible_fraction(&cohort, &rule);
        assert!((fraction - 0.5).abs() < 0.02, "fraction {fraction}");
    }

    #[test]
    fn pairwise_window_puts_each_threshold_at_the_median() {
        let cohort = generate(&CohortConfig::new(10_000, 2, 90), 4).unwrap();
        let rule = calibrate_thresholds(&cohort, col::NON_HDL, 2, 0.25, 17).unwrap();
        for (i, &c) in rule.active.iter().enumerate() {
            let med = crate::stats::median(&cohort.column(c));
            assert!((rule.thresholds[i] - med).abs() < 1e-2);
        }
    }

    fn eligible_fraction(cohort: &Cohort, rule: &ConjunctiveRule) -> f64 {
        let hits = (0..cohort.n()).filter(|&i| conjunctive_eligible(cohort.row(i), rule)).count();
        hits as f64 / cohort.n() as f64
    }

    #[test]
    fn realized_fraction_tracks_target_across_all_progressive_specs() {
        // the calibration guarantee that keeps every eligible stratum populated
        let specs = build_catalog(&CatalogConfig::default());
        let mut worst: f64 = 0.0;
        for spec in specs.iter().filter(|s| s.kind == SpecKind::Progressive) {
            let RuleSpec::Window { start, width } = spec.rule else { unreachable!() };
            let cohort = generate(&spec.cohort, tagged_seed(spec.seed, "cohort")).unwrap();
            let p_star = spec.p_star.unwrap();
            let rule =
                calibrate_thresholds(&cohort, start, width, p_star, tagged_seed(spec.seed, "thresholds")).unwrap();
            let fraction = eligible_fraction(&cohort, &rule);
            worst = worst.max((fraction - p_star).abs());
            assert!(
                (fraction - p_star).abs() <= 0.05,
                "{}: fraction {fraction} vs p_star {p_star}",
                spec.id
            );
        }
        assert!(worst > 0.0, "no progressive spec exercised");
    }

    #[test]
    fn binary_only_window_still_calibrates() {
        // smoker and male are the hardest case for quantile thresholds
        let cohort = generate(&CohortConfig::new(10_000, 2, 90), 8).unwrap();
        for p_star in [0.25, 0.5, 0.75] {
            let rule = calibrate_thresholds(&cohort, col::SMOKER, 2, p_star, 23).unwrap();
            let fraction = eligible_fraction(&cohort, &rule);
            assert!((fraction - p_star).abs() <= 0.05, "fraction {fraction} vs {p_star}");
        }
    }

    #[test]
    fn catalog_has_the_published_shape() {
        let specs = build_catalog(&CatalogConfig::default());
        assert_eq!(specs.len(), 94);
        let progressive: Vec<_> = specs.iter().filter(|s| s.kind == SpecKind::Progressive).collect();
        assert_eq!(progressive.len(), 90);
        let p = default_covariates().len();
        for width in 1..=p {
            let per_pass = progressive
                .iter()
                .filter(|s| matches!(s.rule, RuleSpec::Window { width: w, .. } if w == width))
                .count();
            assert_eq!(per_pass, 2 * (p - width + 1), "width {width}");
        }
        for spec in &progressive {
            let ps = spec.p_star.unwrap();
            assert!((0.2..=0.8).contains(&ps));
            assert!(spec.pass_index.is_some());
        }
        let continuous = specs.iter().find(|s| s.kind == SpecKind::ContinuousHeterogeneity).unwrap();
        assert_eq!(continuous.cohort.n, 20_000);
        assert_eq!(continuous.cohort.j, 50);
    }

    #[test]
    fn passes_share_window_but_not_randomness() {
        let specs = build_catalog(&CatalogConfig::default());
        let p1: Vec<_> = specs.iter().filter(|s| s.pass_index == Some(1)).collect();
        let p2: Vec<_> = specs.iter().filter(|s| s.pass_index == Some(2)).collect();
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.rule, b.rule);
            assert_ne!(a.seed, b.seed);
            assert_ne!(a.p_star, b.p_star);
        }
    }

    #[test]
    fn catalog_is_deterministic() {
        let a = build_catalog(&CatalogConfig::default());
        let b = build_catalog(&CatalogConfig::default());
        assert_eq!(a, b);
        let other = build_catalog(&CatalogConfig { master_seed: 43, ..Default::default() });
        assert_ne!(a[1].p_star, other[1].p_star);
    }
}
