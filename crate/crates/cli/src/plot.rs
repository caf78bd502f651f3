//! Tidy plot data derived from a finished result bundle.
//!
//! Output goes to `<bundle>/plot/`, one observation per row.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::HarnessError;

/// Copies the named columns of `input` into `output`.
fn select(input: &Path, output: &Path, columns: &[&str]) -> Result<(), HarnessError> {
    let mut r = csv::Reader::from_path(input)?;
    let header = r.headers()?.clone();
    let idx = columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("{}: missing column {c}", input.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_path(output)?;
    w.write_record(columns)?;
    for rec in r.records() {
        let rec = rec?;
        w.write_record(idx.iter().map(|&i| &rec[i]))?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: the `ids` columns, then `variable, value` for each remaining
/// nonempty cell.
fn melt(input: &Path, output: &Path, ids: &[&str]) -> Result<(), HarnessError> {
    let mut r = csv::Reader::from_path(input)?;
    let header = r.headers()?.clone();
    let id_idx: Vec<usize> = header.iter().enumerate().filter(|(_, h)| ids.contains(h)).map(|(i, _)| i).collect();
    let mut w = csv::Writer::from_path(output)?;
    let mut out_header: Vec<&str> = id_idx.iter().map(|&i| &header[i]).collect();
    out_header.extend(["variable", "value"]);
    w.write_record(&out_header)?;
    for rec in r.records() {
        let rec = rec?;
        for (i, name) in header.iter().enumerate() {
            if id_idx.contains(&i) || rec[i].is_empty() {
                continue;
            }
            let mut row: Vec<&str> = id_idx.iter().map(|&j| &rec[j]).collect();
            row.extend([name, &rec[i]]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes tidy CSVs for the bundle in `bundle` and returns their paths.
pub fn emit_plot_data(bundle: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let summary_path = bundle.join("summary.json");
    if !summary_path.is_file() {
        return Err(io::Error::new(io::ErrorKind::NotFound, format!("no result bundle at {}", bundle.display())).into());
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary_path)?)?;
    let task = summary["task"].as_str().unwrap_or_default().to_owned();
    let out = bundle.join("plot");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, job: &dyn Fn(&Path) -> Result<(), HarnessError>| -> Result<(), HarnessError> {
        let path = out.join(name);
        job(&path)?;
        written.push(path);
        Ok(())
    };
    match task.as_str() {
        "forward" => {
            emit("paths.csv", &|o| melt(&bundle.join("paths.csv"), o, &["path_id", "step", "t"]))?;
            emit("means.csv", &|o| melt(&bundle.join("means.csv"), o, &["step", "t"]))?;
        }
        "bsde" => emit("solution.csv", &|o| melt(&bundle.join("solution.csv"), o, &["path_id", "step", "t"]))?,
        "variational" => emit("gradient.csv", &|o| select(&bundle.join("gradient.csv"), o, &["method", "component", "dir_derivative", "std_error"]))?,
        "kolmogorov-scan" => emit("scan.csv", &|o| select(&bundle.join("scan.csv"), o, &["t", "x", "u", "grad_u"]))?,
        "mild-residual" => emit("mild_nodes.csv", &|o| select(&bundle.join("mild_nodes.csv"), o, &["tau", "weight", "value"]))?,
        "hjb-audit" => emit("audit_steps.csv", &|o| melt(&bundle.join("audit_steps.csv"), o, &["strategy", "step", "t"]))?,
        "convergence-table" => emit("convergence.csv", &|o| select(&bundle.join("convergence.csv"), o, &["n_steps", "abs_error"]))?,
        other => {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("summary names unknown task '{other}'")).into());
        }
    }
    Ok(written)
}
