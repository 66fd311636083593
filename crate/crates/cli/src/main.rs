//! Benchmark front-end: catalog construction, experiment execution, the
//! n-by-J sensitivity grid, and report emission.
//!
//! Everything is driven by a RunConfig that can come from a JSON file
//! (--config) with individual flags overriding single fields. Outputs are
//! byte-deterministic for a fixed master seed regardless of --jobs.
//!
//! Exit codes: 0 on success, 1 when some conditions failed (the partial
//! outputs are still written, plus a failures.json whose path is printed
//! to stderr), 2 on configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rxvar_core::evalkit::MethodId;
use rxvar_core::pipeline::{self, BenchmarkOutcome, GridConfig};
use rxvar_core::rules::{build_catalog, CatalogConfig, ExperimentSpec, Score2Coefficients, SpecKind};
use rxvar_core::tables::{self, Manifest};

#[derive(Parser)]
#[command(name = "rxvar", about = "Intra-physician variability benchmark harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the experiment catalog as JSON.
    Catalog {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a single experiment by catalog id.
    Run {
        /// Catalog id, e.g. "score2", "w3_s2_pass1", "continuous".
        id: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the selected catalog and emit all artifacts.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the n-by-J sensitivity grid and emit its artifacts.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-aggregate all derived tables from a stored manifest.
    Report {
        /// A manifest.json or a directory containing one.
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which part of the catalog to run.
    #[arg(long, value_enum)]
    catalog: Option<Selection>,
    /// Comma-separated method subset (default: all eight).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Master seed for every derived stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = number of cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace the catalog with one desk-scale condition (n=200, J=2).
    #[arg(long)]
    smoke: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
enum Selection {
    Score2,
    Continuous,
    Progressive,
    SensitivityCopula,
    SensitivityLognormal,
    Grid,
    All,
}

/// Grid shape; the accepted values are pinned, so a config can only restate
/// them (the invariant is checked in validate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridParams {
    n_values: Vec<usize>,
    j_values: Vec<usize>,
    bootstrap_replicates: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        let g = GridConfig::default();
        GridParams {
            n_values: g.n_values,
            j_values: g.j_values,
            bootstrap_replicates: g.bootstrap_replicates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    master_seed: u64,
    catalog: Selection,
    methods: Vec<String>,
    out: PathBuf,
    jobs: usize,
    grid: GridParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 42,
            catalog: Selection::All,
            methods: MethodId::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            out: PathBuf::from("out"),
            jobs: 0,
            grid: GridParams::default(),
        }
    }
}

impl RunConfig {
    fn load(common: &CommonArgs) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.master_seed = seed;
        }
        if let Some(catalog) = common.catalog {
            config.catalog = catalog;
        }
        if let Some(methods) = &common.methods {
            config.methods = methods.clone();
        }
        if let Some(out) = &common.out {
            config.out = out.clone();
        }
        if let Some(jobs) = common.jobs {
            config.jobs = jobs;
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("method selection is empty");
        }
        for m in &self.methods {
            if let Err(e) = m.parse::<MethodId>() {
                bail!("{e}");
            }
        }
        if self.catalog == Selection::Grid && self.grid != GridParams::default() {
            bail!(
                "the grid shape is pinned to n {:?}, J {:?}, {} bootstrap replicates per cell",
                GridParams::default().n_values,
                GridParams::default().j_values,
                GridParams::default().bootstrap_replicates
            );
        }
        Ok(())
    }

    fn methods(&self) -> Vec<MethodId> {
        self.methods.iter().map(|m| m.parse().expect("validated")).collect()
    }

    fn catalog_config(&self) -> CatalogConfig {
        CatalogConfig { master_seed: self.master_seed, ..CatalogConfig::default() }
    }

    fn grid_config(&self) -> GridConfig {
        GridConfig {
            master_seed: self.master_seed,
            n_values: self.grid.n_values.clone(),
            j_values: self.grid.j_values.clone(),
            bootstrap_replicates: self.grid.bootstrap_replicates,
        }
    }

    fn selected_specs(&self, smoke: bool) -> Vec<ExperimentSpec> {
        if smoke {
            return vec![pipeline::smoke_spec(self.master_seed)];
        }
        let keep = |kind: SpecKind| match self.catalog {
            Selection::All => true,
            Selection::Score2 => kind == SpecKind::Score2Reference,
            Selection::Continuous => kind == SpecKind::ContinuousHeterogeneity,
            Selection::Progressive => kind == SpecKind::Progressive,
            Selection::SensitivityCopula => kind == SpecKind::SensitivityCopula,
            Selection::SensitivityLognormal => kind == SpecKind::SensitivityLognormal,
            Selection::Grid => false,
        };
        build_catalog(&self.catalog_config()).into_iter().filter(|s| keep(s.kind)).collect()
    }
}

fn init_threads(jobs: usize) -> Result<()> {
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("initializing the worker pool")?;
    }
    Ok(())
}

/// Writes the partial outputs' failure list and reports where it went.
fn finish(out: &Path, outcome: &BenchmarkOutcome) -> Result<ExitCode> {
    if outcome.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    let path = out.join("failures.json");
    let mut bytes = serde_json::to_vec_pretty(&outcome.failures)?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    eprintln!(
        "{} of {} conditions failed; see {}",
        outcome.failures.len(),
        outcome.failures.len() + outcome.reports.len(),
        path.display()
    );
    Ok(ExitCode::FAILURE)
}

fn cmd_catalog(common: &CommonArgs) -> Result<ExitCode> {
    let config = RunConfig::load(common)?;
    let specs = config.selected_specs(common.smoke);
    let mut text = serde_json::to_string_pretty(&specs)?;
    text.push('\n');
    print!("{text}");
    if common.out.is_some() {
        fs::create_dir_all(&config.out)?;
        fs::write(config.out.join("catalog.json"), text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(id: Option<&str>, common: &CommonArgs) -> Result<ExitCode> {
    let config = RunConfig::load(common)?;
    init_threads(config.jobs)?;
    let spec = if common.smoke {
        pipeline::smoke_spec(config.master_seed)
    } else {
        let id = id.context("an experiment id is required unless --smoke is given")?;
        let specs = build_catalog(&config.catalog_config());
        specs
            .into_iter()
            .find(|s| s.id == id)
            .with_context(|| format!("no catalog entry named '{id}'"))?
    };
    let coeffs = Score2Coefficients::bundled();
    let outcome = pipeline::run_catalog(&[spec], &config.methods(), &coeffs);
    tables::emit_all(&config.out, &outcome, None)?;
    finish(&config.out, &outcome)
}

fn cmd_bench(common: &CommonArgs) -> Result<ExitCode> {
    let config = RunConfig::load(common)?;
    init_threads(config.jobs)?;
    let coeffs = Score2Coefficients::bundled();
    if config.catalog == Selection::Grid && !common.smoke {
        return cmd_grid_inner(&config, &coeffs);
    }
    let specs = config.selected_specs(common.smoke);
    let outcome = pipeline::run_catalog(&specs, &config.methods(), &coeffs);
    tables::emit_all(&config.out, &outcome, None)?;
    finish(&config.out, &outcome)
}

fn cmd_grid(common: &CommonArgs) -> Result<ExitCode> {
    let config = RunConfig::load(common)?;
    init_threads(config.jobs)?;
    cmd_grid_inner(&config, &Score2Coefficients::bundled())
}

fn cmd_grid_inner(config: &RunConfig, coeffs: &Score2Coefficients) -> Result<ExitCode> {
    let grid = pipeline::run_grid(&config.grid_config(), &pipeline::GRID_METHODS, coeffs);
    let empty = BenchmarkOutcome { reports: Vec::new(), failures: Vec::new() };
    tables::emit_all(&config.out, &empty, Some(&grid))?;
    if grid.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    let path = config.out.join("failures.json");
    let mut bytes = serde_json::to_vec_pretty(&grid.failures)?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    eprintln!("{} grid cells failed; see {}", grid.failures.len(), path.display());
    Ok(ExitCode::FAILURE)
}

fn cmd_report(from: &Path, common: &CommonArgs) -> Result<ExitCode> {
    let config = RunConfig::load(common)?;
    let path = if from.is_dir() { from.join("manifest.json") } else { from.to_path_buf() };
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let outcome =
        BenchmarkOutcome { reports: manifest.reports.clone(), failures: manifest.failures.clone() };
    tables::emit_all(&config.out, &outcome, manifest.grid.as_ref())?;
    finish(&config.out, &outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Catalog { common } => cmd_catalog(common),
        Command::Run { id, common } => cmd_run(id.as_deref(), common),
        Command::Bench { common } => cmd_bench(common),
        Command::Grid { common } => cmd_grid(common),
        Command::Report { from, common } => cmd_report(from, common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
