//! Synthetic cohort generation.
//!
//! A cohort is an n-by-p matrix of patient covariates plus a physician
//! assignment. The default covariate panel is nine primary-care measurements
//! (age, HbA1c, non-HDL, HDL, LDL, systolic blood pressure, eGFR, smoking
//! status, sex), each drawn from a clipped marginal. Two perturbation
//! variants exist for sensitivity runs: a rank-correlation copula tying
//! non-HDL to LDL, and a right-skewed lognormal HbA1c.
//!
//! Each covariate column draws from its own derived RNG substream, so
//! swapping one column's sampler leaves every other column bit-identical.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_seed, seeded_rng, tagged_seed};

/// Value domain of a covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Continuous,
    /// Clipped, then rounded half-away-from-zero to a whole number.
    Integer,
    Binary,
}

/// Marginal sampling distribution of a covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MarginalDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    /// Parameters on the log scale.
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: ValueKind,
    pub dist: MarginalDist,
    /// Inclusive clip bounds applied before integer rounding.
    pub clip: Option<(f64, f64)>,
}

impl CovariateSpec {
    fn sample_column(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        let mut out = Vec::with_capacity(n);
        match self.dist {
            MarginalDist::Normal { mean, sd } => {
                let d = Normal::new(mean, sd).expect("normal params");
                for _ in 0..n {
                    out.push(self.finish(d.sample(&mut rng)));
                }
            }
            MarginalDist::Bernoulli { p } => {
                for _ in 0..n {
                    out.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
                }
            }
            MarginalDist::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).expect("lognormal params");
                for _ in 0..n {
                    out.push(self.finish(d.sample(&mut rng)));
                }
            }
        }
        out
    }

    /// Clip, then round when the column is integer-valued.
    fn finish(&self, raw: f64) -> f64 {
        let mut v = raw;
        if let Some((lo, hi)) = self.clip {
            v = v.clamp(lo, hi);
        }
        if self.kind == ValueKind::Integer {
            v = v.round();
        }
        v
    }
}

/// Column index of each default covariate (fixed panel order).
pub mod col {
    pub const AGE: usize = 0;
    pub const HBA1C: usize = 1;
    pub const NON_HDL: usize = 2;
    pub const HDL: usize = 3;
    pub const LDL: usize = 4;
    pub const SBP: usize = 5;
    pub const EGFR: usize = 6;
    pub const SMOKER: usize = 7;
    pub const MALE: usize = 8;
}

/// The default nine-covariate panel in its fixed order.
pub fn default_covariates() -> Vec<CovariateSpec> {
    fn normal(name: &str, kind: ValueKind, mean: f64, sd: f64, lo: f64, hi: f64) -> CovariateSpec {
        CovariateSpec { name: name.into(), kind, dist: MarginalDist::Normal { mean, sd }, clip: Some((lo, hi)) }
    }
    fn bern(name: &str, p: f64) -> CovariateSpec {
        CovariateSpec { name: name.into(), kind: ValueKind::Binary, dist: MarginalDist::Bernoulli { p }, clip: None }
    }
    vec![
        normal("age", ValueKind::Integer, 60.0, 12.0, 40.0, 90.0),
        normal("hba1c", ValueKind::Continuous, 6.5, 1.5, 4.0, 12.0),
        normal("non_hdl", ValueKind::Continuous, 3.6, 0.95, 1.0, 8.0),
        normal("hdl", ValueKind::Continuous, 1.35, 0.38, 0.4, 2.8),
        normal("ldl", ValueKind::Continuous, 1.3, 0.35, 0.4, 2.2),
        normal("sbp", ValueKind::Integer, 130.0, 20.0, 90.0, 200.0),
        normal("egfr", ValueKind::Continuous, 90.0, 25.0, 15.0, 140.0),
        bern("smoker", 0.20),
        bern("male", 0.60),
    ]
}

/// Distributional perturbation applied on top of the default panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CohortVariant {
    Independent,
    /// Gaussian copula between non-HDL and LDL at the given Spearman target.
    CopulaNonHdlLdl { spearman: f64 },
    /// Replaces the HbA1c marginal with a clipped lognormal.
    LognormalHba1c { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n: usize,
    pub j: usize,
    /// Guaranteed panel floor; the remainder is spread uniformly.
    pub min_panel: usize,
    pub variant: CohortVariant,
}

impl CohortConfig {
    pub fn new(n: usize, j: usize, min_panel: usize) -> Self {
        CohortConfig { n, j, min_panel, variant: CohortVariant::Independent }
    }
}

/// A generated cohort: row-major covariate matrix plus physician assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    pub config: CohortConfig,
    pub seed: u64,
    pub covariates: Vec<CovariateSpec>,
    /// Row-major n-by-p values.
    pub x: Vec<f64>,
    pub physician_of: Vec<usize>,
}

impl Cohort {
    pub fn n(&self) -> usize {
        self.physician_of.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn value(&self, i: usize, c: usize) -> f64 {
        self.x[i * self.p() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.value(i, c)).collect()
    }

    /// Patient indices of each physician's panel, in patient order.
    pub fn panels(&self) -> Vec<Vec<usize>> {
        let mut panels = vec![Vec::new(); self.config.j];
        for (i, &ph) in self.physician_of.iter().enumerate() {
            panels[ph].push(i);
        }
        panels
    }
}

/// Assigns `min_panel` patients to each physician in index order, then spreads
/// the remainder i.i.d.-uniformly across physicians.
pub fn allocate_physicians(n: usize, j: usize, min_panel: usize, seed: u64) -> Result<Vec<usize>> {
    if j == 0 || n < j * min_panel {
        return Err(Error::InfeasibleAllocation { n, j, min_panel });
    }
    let mut assignment = Vec::with_capacity(n);
    for ph in 0..j {
        assignment.extend(std::iter::repeat(ph).take(min_panel));
    }
    let mut rng = seeded_rng(seed);
    for _ in assignment.len()..n {
        assignment.push(rng.gen_range(0..j));
    }
    Ok(assignment)
}

/// Generates a cohort from the default covariate panel.
pub fn generate(config: &CohortConfig, seed: u64) -> Result<Cohort> {
    let mut covariates = default_covariates();
    let n = config.n;
    let p = covariates.len();

    // Per-column substreams keyed by column index.
    let mut columns: Vec<Vec<f64>> = covariates
        .iter()
        .enumerate()
        .map(|(c, spec)| spec.sample_column(n, indexed_seed(seed, c as u64)))
        .collect();

    match config.variant {
        CohortVariant::Independent => {}
        CohortVariant::CopulaNonHdlLdl { spearman } => {
            if !(-1.0..=1.0).contains(&spearman) {
                return Err(Error::Config(format!("copula spearman target {spearman} out of [-1, 1]")));
            }
            let (a, b) = copula_pair(
                &covariates[col::NON_HDL],
                &covariates[col::LDL],
                spearman,
                n,
                indexed_seed(seed, col::NON_HDL as u64),
            );
            columns[col::NON_HDL] = a;
            columns[col::LDL] = b;
        }
        CohortVariant::LognormalHba1c { mu, sigma } => {
            let spec = &mut covariates[col::HBA1C];
            spec.dist = MarginalDist::LogNormal { mu, sigma };
            columns[col::HBA1C] = spec.sample_column(n, indexed_seed(seed, col::HBA1C as u64));
        }
    }

    let mut x = vec![0.0; n * p];
    for (c, column) in columns.iter().enumerate() {
        for (i, &v) in column.iter().enumerate() {
            x[i * p + c] = v;
        }
    }

    let physician_of = allocate_physicians(n, config.j, config.min_panel, tagged_seed(seed, "alloc"))?;
    Ok(Cohort { config: config.clone(), seed, covariates, x, physician_of })
}

/// Draws two clipped-Gaussian columns tied by a Gaussian copula at the given
/// Spearman target. The latent Pearson correlation is `2 sin(pi * rho / 6)`;
/// each latent normal is pushed through its own clipped marginal, so the
/// marginals match the independent variant in distribution.
fn copula_pair(
    spec_a: &CovariateSpec,
    spec_b: &CovariateSpec,
    spearman: f64,
    n: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let r = 2.0 * (std::f64::consts::PI * spearman / 6.0).sin();
    let (MarginalDist::Normal { mean: ma, sd: sa }, MarginalDist::Normal { mean: mb, sd: sb }) =
        (spec_a.dist, spec_b.dist)
    else {
        panic!("copula variant expects Gaussian marginals");
    };
    let mut rng = seeded_rng(seed);
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut xa = Vec::with_capacity(n);
    let mut xb = Vec::with_capacity(n);
    let ortho = (1.0 - r * r).sqrt();
    for _ in 0..n {
        let g1: f64 = std.sample(&mut rng);
        let g2: f64 = std.sample(&mut rng);
        let h = r * g1 + ortho * g2;
        xa.push(spec_a.finish(ma + sa * g1));
        xb.push(spec_b.finish(mb + sb * h));
    }
    (xa, xb)
}

// ---------------------------------------------------------------------------
// Artifact export / import
// ---------------------------------------------------------------------------

/// Writes the cohort as a patient CSV plus a JSON sidecar describing how it
/// was generated. `path` is the CSV path; the sidecar lives at `path.json`.
pub fn export_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = cohort.covariates.iter().map(|c| c.name.clone()).collect();
    header.push("physician".into());
    w.write_record(&header)?;
    for i in 0..cohort.n() {
        let mut record: Vec<String> = cohort.row(i).iter().map(|v| format!("{v}")).collect();
        record.push(cohort.physician_of[i].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;

    let sidecar = Sidecar {
        config: cohort.config.clone(),
        seed: cohort.seed,
        covariates: cohort.covariates.clone(),
    };
    let mut f = BufWriter::new(std::fs::File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Reads a cohort back from [`export_csv`] artifacts.
pub fn import_csv(path: &Path) -> Result<Cohort> {
    let sidecar: Sidecar = serde_json::from_reader(std::fs::File::open(sidecar_path(path))?)?;
    let p = sidecar.covariates.len();
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    for (c, spec) in sidecar.covariates.iter().enumerate() {
        if header.get(c) != Some(spec.name.as_str()) {
            return Err(Error::Config(format!(
                "cohort csv column {c} is {:?}, sidecar says {:?}",
                header.get(c),
                spec.name
            )));
        }
    }
    let mut x = Vec::new();
    let mut physician_of = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != p + 1 {
            return Err(Error::Config(format!("cohort csv row has {} fields, expected {}", record.len(), p + 1)));
        }
        for c in 0..p {
            x.push(
                record[c]
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad covariate value {:?}: {e}", &record[c])))?,
            );
        }
        physician_of.push(
            record[p]
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad physician id {:?}: {e}", &record[p])))?,
        );
    }
    Ok(Cohort { config: sidecar.config, seed: sidecar.seed, covariates: sidecar.covariates, x, physician_of })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: CohortConfig,
    seed: u64,
    covariates: Vec<CovariateSpec>,
}
