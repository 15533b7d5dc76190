//! `flowforge`: build triangular maps, integrate flows, train velocity
//! networks and check stability bounds from the command line.
//!
//! Exit codes: 0 success, 1 a verification check did not come out as
//! expected, 2 invalid arguments or inputs, 3 numerical failure.

mod io;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flowforge::density::DensityFile;
use flowforge::flow::{trajectory, IntegratorConfig};
use flowforge::metrics::{
    chi2_divergence, kl_divergence, l2_distance, pushforward_on_midpoints, wasserstein,
    WassersteinOrder,
};
use flowforge::objective::{train, TrainConfig};
use flowforge::transport::kr_construct;
use flowforge::velocity::{Architecture, ResNetField};
use flowforge::FlowError;
use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use crate::io::{
    coordinate_headers, csv_writer, emit_json, read_density, read_field, read_json, read_points,
    write_json, DensityPair,
};
use crate::verify::{Suite, VerifyOptions};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Flow(FlowError::Numeric(_)) => 3,
            CliError::Verification(_) => 1,
            _ => 2,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowforge", version, about = "Triangular transport maps and ODE flows on the unit cube")]
struct Cli {
    /// Seed for every random choice (default 0); overrides the seed in a
    /// training config when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the triangular map pushing the source density to the target.
    KrBuild {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate trajectories (with log-determinant and regularizer) of a
    /// network field or of the straight-line field of a map file.
    FlowSample {
        #[arg(long)]
        field: PathBuf,
        /// CSV of starting points, one per row.
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        steps: usize,
    },
    /// Train a residual-network velocity field.
    Train {
        /// JSON training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Trained weights (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Per-report training statistics (CSV).
        #[arg(long)]
        report: PathBuf,
        /// Record elapsed milliseconds in the report instead of 0 (makes the
        /// report non-reproducible).
        #[arg(long)]
        record_wallclock: bool,
    },
    /// Distance or divergence between two densities or two sample sets.
    Metrics {
        #[arg(long, value_enum)]
        kind: MetricKind,
        /// First density (JSON) or sample set (CSV, for wasserstein).
        #[arg(long)]
        p: PathBuf,
        /// Second density or sample set.
        #[arg(long)]
        q: PathBuf,
        /// Order of the Wasserstein distance: 1, 2 or inf.
        #[arg(long, default_value = "1")]
        order: WassersteinOrder,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite and emit its check records as JSON.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, value_enum, default_value = "sine-uniform")]
        density_pair: DensityPair,
        /// Size of the perturbation for the stability suites.
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a density on its grid nodes, or its pushforward under a field
    /// on cell midpoints, as CSV for plotting.
    ExportDensity {
        #[arg(long)]
        density: PathBuf,
        /// Push the density forward under this field (weights or map file).
        #[arg(long)]
        field: Option<PathBuf>,
        /// Midpoints per axis for the pushforward grid.
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricKind {
    L2,
    Chi2,
    Kl,
    Wasserstein,
}

/// `train --config` file: the training hyperparameters plus the densities,
/// the network shape and an optional starting point.
#[derive(Debug, Deserialize)]
struct TrainFile {
    schema: u32,
    source: DensityFile,
    target: DensityFile,
    architecture: Architecture,
    /// Weights file to start from; a small random network otherwise.
    #[serde(default)]
    init: Option<PathBuf>,
    #[serde(flatten)]
    config: TrainConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            error!("cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowforge: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::KrBuild { source, target, out } => {
            let map = kr_construct(read_density(&source)?, read_density(&target)?)?;
            write_json(&out, &map.to_file())
        }
        Command::FlowSample {
            field,
            points,
            out,
            steps,
        } => flow_sample(&field, &points, &out, steps),
        Command::Train {
            config,
            out,
            report,
            record_wallclock,
        } => run_train(&config, &out, &report, record_wallclock, seed),
        Command::Metrics {
            kind,
            p,
            q,
            order,
            out,
        } => {
            let value = match kind {
                MetricKind::Wasserstein => wasserstein(&read_points(&p)?, &read_points(&q)?, order)?,
                _ => {
                    let (p, q) = (read_density(&p)?, read_density(&q)?);
                    match kind {
                        MetricKind::L2 => l2_distance(&p, &q)?,
                        MetricKind::Chi2 => chi2_divergence(&p, &q)?,
                        _ => kl_divergence(&p, &q)?,
                    }
                }
            };
            let kind = format!("{kind:?}").to_lowercase();
            emit_json(out.as_deref(), &json!({ "kind": kind, "value": value }))
        }
        Command::Verify {
            suite,
            density_pair,
            epsilon,
            steps,
            out,
        } => {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(CliError::Input(format!("epsilon must be nonnegative, got {epsilon}")));
            }
            let opts = VerifyOptions {
                pair: density_pair,
                epsilon,
                steps,
                seed: seed.unwrap_or(0),
            };
            let records = verify::run(suite, &opts)?;
            emit_json(out.as_deref(), &records)?;
            let failed: Vec<&str> = records
                .iter()
                .filter(|r| !r.as_expected())
                .map(|r| r.case.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Verification(format!(
                    "checks not as expected: {}",
                    failed.join(", ")
                )))
            }
        }
        Command::ExportDensity {
            density,
            field,
            grid,
            steps,
            out,
        } => export_density(&density, field.as_deref(), grid, steps, &out),
    }
}

fn flow_sample(field: &Path, points: &Path, out: &Path, steps: usize) -> Result<(), CliError> {
    let loaded = read_field(field)?;
    let field = loaded.as_field();
    let cfg = IntegratorConfig::new(steps)?;
    let points = read_points(points)?;
    let d = field.dim();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(CliError::Input(format!(
            "point {p:?} has {} coordinates, field is {d}-d",
            p.len()
        )));
    }
    let mut writer = csv_writer(out)?;
    let mut header = vec!["t".to_string()];
    header.extend(coordinate_headers("x", d));
    header.extend(["l".to_string(), "r".to_string()]);
    writer.write_record(&header)?;
    for p in &points {
        for (t, state) in trajectory(field, p, &cfg)? {
            let mut row = vec![t.to_string()];
            row.extend(state.x.iter().map(f64::to_string));
            row.extend([state.l.to_string(), state.r.to_string()]);
            writer.write_record(&row)?;
        }
    }
    writer.flush().map_err(|e| CliError::io(out, e))
}

fn run_train(
    config: &Path,
    out: &Path,
    report: &Path,
    record_wallclock: bool,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let file: TrainFile = read_json(config)?;
    if file.schema != flowforge::density::SCHEMA_VERSION {
        return Err(CliError::Input(format!("unsupported config schema {}", file.schema)));
    }
    let mut cfg = file.config;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let source = file.source.build()?;
    let target = file.target.build()?;
    let init = match &file.init {
        Some(path) => {
            let path = config.parent().unwrap_or(Path::new(".")).join(path);
            read_json::<flowforge::velocity::ResNetFile>(&path)?.build()?
        }
        None => {
            // Separate stream from the one driving the training loop.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a17);
            ResNetField::init(file.architecture, &mut rng)?
        }
    };
    if init.architecture() != file.architecture {
        return Err(CliError::Input(
            "initial weights do not match the configured architecture".into(),
        ));
    }
    let result = train(&source, &target, init, &cfg)?;
    if let Some(reason) = &result.aborted {
        error!("training stopped early: {reason}");
    }
    write_json(out, &result.field.to_file())?;
    let mut writer = csv_writer(report)?;
    writer.write_record(["iter", "erm_loss", "kl_est", "reg_est", "wallclock_ms"])?;
    for row in &result.history {
        let wallclock = if record_wallclock { row.wallclock_ms } else { 0 };
        writer.write_record([
            row.iter.to_string(),
            row.erm_loss.to_string(),
            row.kl_est.to_string(),
            row.reg_est.to_string(),
            wallclock.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| CliError::io(report, e))?;
    if let Some(last) = result.history.last() {
        info!("final kl {:.5}, regularizer {:.3e}", last.kl_est, last.reg_est);
    }
    match result.aborted {
        Some(reason) => Err(FlowError::numeric(reason).into()),
        None => Ok(()),
    }
}

fn export_density(
    density: &Path,
    field: Option<&Path>,
    grid: usize,
    steps: usize,
    out: &Path,
) -> Result<(), CliError> {
    let density = read_density(density)?;
    let d = density.dim();
    let mut writer = csv_writer(out)?;
    let mut header = coordinate_headers("x", d);
    header.push("density".into());
    writer.write_record(&header)?;
    let mut write_row = |x: &[f64], v: f64| -> Result<(), CliError> {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(v.to_string());
        Ok(writer.write_record(&row)?)
    };
    match field {
        None => {
            for (x, _) in density.quadrature() {
                write_row(&x, density.eval(&x)?)?;
            }
        }
        Some(path) => {
            if grid == 0 {
                return Err(CliError::Input("grid must be positive".into()));
            }
            let loaded = read_field(path)?;
            let cfg = IntegratorConfig::new(steps)?;
            let values = pushforward_on_midpoints(loaded.as_field(), &density, grid, &cfg)?;
            for (flat, v) in values.iter().enumerate() {
                let mut x = vec![0.0; d];
                let mut rest = flat;
                for k in (0..d).rev() {
                    x[k] = ((rest % grid) as f64 + 0.5) / grid as f64;
                    rest /= grid;
                }
                write_row(&x, *v)?;
            }
        }
    }
    writer.flush().map_err(|e| CliError::io(out, e))
}
