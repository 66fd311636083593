//! Synthetic prescribing cohorts with per-physician discordance ground truth,
//! plus the blind estimators evaluated against that ground truth.
//!
//! The crate is organised around one experiment pipeline: generate a cohort
//! ([`synthgen`]), derive guideline eligibility ([`rules`]), simulate physician
//! prescribing behaviour ([`prescribe`]), estimate per-physician variability
//! blind to eligibility ([`matchcore`], [`weights`], [`genmatch`], [`lpa`],
//! [`glmm`]), and score the estimates ([`evalkit`]). [`pipeline`] wires the
//! stages together for single runs, full benchmark sweeps and the n-by-J grid.

pub mod error;
pub mod evalkit;
pub mod genmatch;
pub mod glmm;
pub mod hungarian;
pub mod lpa;
pub mod matchcore;
pub mod pipeline;
pub mod prescribe;
pub mod rng;
pub mod rules;
pub mod stats;
pub mod synthgen;
pub mod tables;
pub mod weights;

pub use error::{Error, Result};
pub use evalkit::{mean_delta, percentile_bootstrap, spearman_rank, BootstrapSummary, MethodId};
pub use matchcore::{PairSet, StandardizedCohort};
pub use pipeline::{BenchmarkOutcome, ExperimentReport, GridConfig};
pub use prescribe::{PhysicianModel, PhysicianProfile};
pub use rules::{EligibilityRule, ExperimentSpec, Score2Coefficients};
pub use synthgen::{Cohort, CohortConfig};
