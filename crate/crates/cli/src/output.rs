//! Manifests, summaries and plot-ready density grids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use epsmcmc::io::{write_density_csv, DensityRow};
use epsmcmc::merge::{block_marginal_on_grid, density_on_grid, grid_around, MergedPosterior};
use epsmcmc::Theta;

use crate::commands::Failure;

pub const PARAMS: [&str; 3] = ["lambda", "kappa", "nu"];
const GRID_POINTS: usize = 512;
const GRID_HALF_WIDTH_SD: f64 = 4.0;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

/// Provenance of one command's outputs. Contains no timestamps, so a
/// repeated run with the same seed writes the same bytes.
#[derive(Debug, Serialize)]
pub struct Manifest {
    command: String,
    config_hash: String,
    config: serde_json::Value,
    seed: u64,
    epsmcmc_version: String,
    cli_version: String,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self, Failure> {
        let value = serde_json::to_value(config).map_err(|e| Failure::Runtime(e.to_string()))?;
        let canonical = serde_json::to_vec(&value).map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(Manifest {
            command: command.to_owned(),
            config_hash: sha256_hex(&canonical),
            config: value,
            seed,
            epsmcmc_version: epsmcmc::VERSION.to_owned(),
            cli_version: env!("CARGO_PKG_VERSION").to_owned(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let bytes =
            fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        fs::write(path, text + "\n")
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
    }
}

/// `<file>.manifest.json`.
pub fn manifest_path_for(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

pub fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    pub draws: usize,
}

pub fn summarize(draws: &[Theta]) -> Vec<SummaryRow> {
    PARAMS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut v: Vec<f64> = draws.iter().map(|t| t.to_array()[k]).collect();
            v.sort_by(f64::total_cmp);
            SummaryRow {
                parameter: (*name).to_owned(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                q025: quantile(&v, 0.025),
                q975: quantile(&v, 0.975),
                draws: v.len(),
            }
        })
        .collect()
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<10} {:>12} {:>12} {:>12}\n",
        "parameter", "mean", "q025", "q975"
    );
    for r in rows {
        s += &format!(
            "{:<10} {:>12.5} {:>12.5} {:>12.5}\n",
            r.parameter, r.mean, r.q025, r.q975
        );
    }
    s
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Runtime(e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))
}

/// Silverman bandwidth of a 1-D sample.
fn silverman_1d(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let h = 1.06 * sd * n.powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1e-3
    }
}

/// Density grids of `draws` (source `merged` or a caller label) over
/// `mean ± 4 sd`, plus per-block KDE marginals when `merged` is given.
pub fn density_rows(
    draws: &[Theta],
    source: &str,
    merged: Option<&MergedPosterior>,
) -> Vec<DensityRow> {
    let mut rows = Vec::new();
    for (k, name) in PARAMS.iter().enumerate() {
        let v: Vec<f64> = draws.iter().map(|t| t.to_array()[k]).collect();
        let grid = grid_around(&v, GRID_HALF_WIDTH_SD, GRID_POINTS);
        let dens = density_on_grid(&v, silverman_1d(&v), &grid);
        rows.extend(grid.iter().zip(&dens).map(|(x, d)| DensityRow {
            parameter: (*name).to_owned(),
            source: source.to_owned(),
            x: *x,
            density: *d,
        }));
        if let Some(mp) = merged {
            for (b, kde) in mp.kdes.iter().enumerate() {
                let dens = block_marginal_on_grid(kde, &mp.standardizer, k, &grid);
                rows.extend(grid.iter().zip(&dens).map(|(x, d)| DensityRow {
                    parameter: (*name).to_owned(),
                    source: format!("block{b}"),
                    x: *x,
                    density: *d,
                }));
            }
        }
    }
    rows
}

pub fn write_densities(path: &Path, rows: &[DensityRow]) -> Result<(), Failure> {
    write_density_csv(path, rows).map_err(Failure::from)
}
