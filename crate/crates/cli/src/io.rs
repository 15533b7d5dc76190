//! Reading and writing the JSON and CSV artifacts used by the subcommands.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use flowforge::density::{AnalyticDensity, DensityFile, GridDensity};
use flowforge::transport::{kr_construct, MapFile, TriangularMap};
use flowforge::velocity::{ResNetFile, StraightLineField, VelocityField};
use flowforge::FlowError;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(FlowError::from)?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
}

/// Prints JSON to standard output, or writes it to `out` when given.
pub fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).map_err(FlowError::from)?);
            Ok(())
        }
    }
}

pub fn read_density(path: &Path) -> Result<GridDensity, CliError> {
    Ok(read_json::<DensityFile>(path)?.build()?)
}

/// A velocity field loaded from disk: network weights, or a map file whose
/// straight-line field is used.
pub enum LoadedField {
    Network(flowforge::velocity::ResNetField),
    Straight(StraightLineField),
}

impl LoadedField {
    pub fn as_field(&self) -> &dyn VelocityField {
        match self {
            LoadedField::Network(f) => f,
            LoadedField::Straight(f) => f,
        }
    }
}

pub fn read_field(path: &Path) -> Result<LoadedField, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let parsed = if value.get("tables").is_some() {
        serde_json::from_value::<MapFile>(value)
            .map(|m| m.build().map(|map| LoadedField::Straight(StraightLineField::new(map))))
    } else {
        serde_json::from_value::<ResNetFile>(value).map(|w| w.build().map(LoadedField::Network))
    };
    let built = parsed.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(built?)
}

/// Reads points from CSV, one per row. A leading header row is skipped.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(p) => points.push(p),
            Err(_) if row == 0 => continue,
            Err(e) => {
                return Err(CliError::Input(format!(
                    "{} row {}: {e}",
                    path.display(),
                    row + 1
                )))
            }
        }
    }
    if points.is_empty() {
        return Err(CliError::Input(format!("{}: no points", path.display())));
    }
    Ok(points)
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// `x_1, .., x_d` column names.
pub fn coordinate_headers(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("{prefix}_{k}")).collect()
}

/// Named source/target pairs used by the verification suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DensityPair {
    /// `1 + 0.5 sin(2πx)` to uniform on `[0, 1]`, 256 nodes.
    SineUniform,
    /// Product of two sine densities to uniform on `[0, 1]²`, 64² nodes.
    ProductUniform,
}

impl DensityPair {
    pub fn densities(self) -> Result<(GridDensity, GridDensity), FlowError> {
        let sine = AnalyticDensity::sine(0.5);
        match self {
            DensityPair::SineUniform => Ok((
                GridDensity::from_analytic(&sine, 256)?,
                GridDensity::uniform(1, 256)?,
            )),
            DensityPair::ProductUniform => {
                let product = AnalyticDensity::Product {
                    factors: vec![sine.clone(), sine],
                };
                Ok((
                    GridDensity::from_analytic(&product, 64)?,
                    GridDensity::uniform(2, 64)?,
                ))
            }
        }
    }

    pub fn map(self) -> Result<TriangularMap, FlowError> {
        let (source, target) = self.densities()?;
        kr_construct(source, target)
    }

    /// Acceptance tolerance for the pointwise pushforward residual.
    pub fn residual_tolerance(self) -> f64 {
        match self {
            DensityPair::SineUniform => 1e-3,
            DensityPair::ProductUniform => 5e-3,
        }
    }
}
