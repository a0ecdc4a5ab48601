//! File formats.
//!
//! - Panel CSV: a header row of series ids, then one row per time step.
//! - Panel sidecar (`<panel>.meta.toml`): how a simulated panel was made.
//! - Latent CSV: column `t` then one column per series, starting at `t = 0`.
//! - Draw CSV: `update,t,block,replica,draw,lambda,kappa,nu`.
//! - Density grid CSV: `parameter,source,x,density`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Panel, Theta};

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v:?}")
}

pub fn write_panel_csv(path: &Path, panel: &Panel) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(panel.ids())?;
    for t in 0..panel.num_times() {
        w.write_record((0..panel.num_series()).map(|j| fmt_f64(panel.value(t, j))))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_panel_csv(path: &Path) -> Result<Panel> {
    let mut r = csv_reader(path)?;
    let ids: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if ids.is_empty() {
        return Err(format_err(path, "missing header row"));
    }
    let mut series = vec![Vec::new(); ids.len()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != ids.len() {
            return Err(format_err(
                path,
                format!(
                    "row {} has {} fields, expected {}",
                    row + 2,
                    rec.len(),
                    ids.len()
                ),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_err(path, format!("row {}: `{field}` is not a number", row + 2))
            })?;
            series[j].push(v);
        }
    }
    Panel::new(ids, series).map_err(|e| format_err(path, e.to_string()))
}

/// Sidecar describing a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub num_series: usize,
    pub num_times: usize,
    pub theta: Theta,
    pub x0: f64,
    pub burnin: usize,
    pub seed: u64,
}

/// `panel.csv` -> `panel.meta.toml`.
pub fn sidecar_path(panel_path: &Path) -> PathBuf {
    panel_path.with_extension("meta.toml")
}

pub fn write_meta(path: &Path, meta: &PanelMeta) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<PanelMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

/// Writes latent paths with the initial state as row `t = 0`.
pub fn write_latent_csv(
    path: &Path,
    ids: &[String],
    initial: &[f64],
    latent: &[Vec<f64>],
) -> Result<()> {
    if initial.len() != ids.len() || latent.len() != ids.len() {
        return Err(Error::input("latent columns do not match the series ids"));
    }
    let mut w = csv_writer(path)?;
    w.write_record(std::iter::once("t").chain(ids.iter().map(String::as_str)))?;
    w.write_record(std::iter::once("0".to_owned()).chain(initial.iter().map(|v| fmt_f64(*v))))?;
    let t_len = latent.first().map_or(0, Vec::len);
    for t in 0..t_len {
        w.write_record(
            std::iter::once((t + 1).to_string()).chain(latent.iter().map(|s| fmt_f64(s[t]))),
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One retained parameter draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawRow {
    pub update: usize,
    pub t: usize,
    pub block: usize,
    pub replica: usize,
    pub draw: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub nu: f64,
}

impl DrawRow {
    pub fn theta(&self) -> Theta {
        Theta {
            lambda: self.lambda,
            kappa: self.kappa,
            nu: self.nu,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        vec![self.lambda, self.kappa, self.nu]
    }
}

pub fn write_draws_csv(path: &Path, rows: &[DrawRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record([
            "update", "t", "block", "replica", "draw", "lambda", "kappa", "nu",
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads draws by column name; missing bookkeeping columns default to 0.
pub fn read_draws_csv(path: &Path) -> Result<Vec<DrawRow>> {
    let mut r = csv_reader(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(il), Some(ik), Some(inu)) = (col("lambda"), col("kappa"), col("nu")) else {
        return Err(format_err(
            path,
            "draw files need lambda, kappa and nu columns",
        ));
    };
    let opt = |name: &str| col(name);
    let (iu, it, ib, ir, id) = (
        opt("update"),
        opt("t"),
        opt("block"),
        opt("replica"),
        opt("draw"),
    );
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let f = rec.get(i).unwrap_or("");
            f.trim()
                .parse()
                .map_err(|_| format_err(path, format!("row {}: `{f}` is not a number", row + 2)))
        };
        let idx = |i: Option<usize>| -> Result<usize> {
            match i {
                None => Ok(0),
                Some(i) => {
                    let f = rec.get(i).unwrap_or("");
                    f.trim().parse().map_err(|_| {
                        format_err(path, format!("row {}: `{f}` is not an index", row + 2))
                    })
                }
            }
        };
        out.push(DrawRow {
            update: idx(iu)?,
            t: idx(it)?,
            block: idx(ib)?,
            replica: idx(ir)?,
            draw: if id.is_some() { idx(id)? } else { row },
            lambda: num(il)?,
            kappa: num(ik)?,
            nu: num(inu)?,
        });
    }
    Ok(out)
}

/// One point of a 1-D density curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub parameter: String,
    /// `merged` or `block<i>`.
    pub source: String,
    pub x: f64,
    pub density: f64,
}

pub fn write_density_csv(path: &Path, rows: &[DensityRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
