//! Dataset and input-grid readers, and the CSV writers behind every export.
//!
//! Numbers are written with Rust's `Display` for `f64`, which is the shortest decimal
//! string that parses back to the same value.

use std::fs;
use std::path::Path;

use monoflow::flow::{FlowModel, FlowSample, Prediction};
use monoflow::Dataset;

use crate::error::{CliError, CliResult};
use crate::provenance::Provenance;

/// Reads a two-column `x,y` CSV.
pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| CliError::format(path, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(CliError::format(path, format!("expected header `x,y`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CliError::format(path, format!("line {line}: {e}")))?;
        let parse = |k: usize| -> CliResult<f64> {
            let field = &record[k];
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::format(path, format!("line {line}: `{field}` is not a finite number")))
        };
        x.push(parse(0)?);
        y.push(parse(1)?);
    }
    if x.is_empty() {
        return Err(CliError::format(path, "no data rows"));
    }
    Ok(Dataset::new(x, y)?)
}

/// Reads the `x` column of a CSV; other columns are ignored.
pub fn read_inputs(path: &Path) -> CliResult<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| CliError::format(path, e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h == "x")
        .ok_or_else(|| CliError::format(path, "no `x` column"))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::format(path, format!("line {}: {e}", i + 2)))?;
        let v: f64 = record[col]
            .parse()
            .map_err(|_| CliError::format(path, format!("line {}: `{}` is not a number", i + 2, &record[col])))?;
        out.push(v);
    }
    Ok(out)
}

/// Parses `lo:hi:n` into `n` evenly spaced points.
pub fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::Usage(format!("grid `{spec}` is not of the form lo:hi:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if n == 0 || !(lo.is_finite() && hi.is_finite()) || hi < lo {
        return Err(bad());
    }
    Ok(linspace(lo, hi, n))
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    monoflow::bench::write_atomic(path, contents.as_bytes()).map_err(|e| match e {
        monoflow::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

pub fn dataset_csv(data: &Dataset) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in data.x.iter().zip(&data.y) {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

pub fn predict_csv(p: &Prediction, prov: &Provenance) -> String {
    let mut out = String::from("x,mean,q2.5,q97.5,sd,seed,config_digest\n");
    for j in 0..p.x.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.x[j], p.mean[j], p.lower[j], p.upper[j], p.sd[j], prov.seed, prov.config_digest
        ));
    }
    out
}

/// Long format: one row per draw and input.
pub fn samples_csv(x: &[f64], draws: &[FlowSample], prov: &Provenance) -> String {
    let mut out = String::from("draw,x,value,seed,config_digest\n");
    for (d, s) in draws.iter().enumerate() {
        for (xj, v) in x.iter().zip(&s.terminal) {
            out.push_str(&format!("{d},{xj},{v},{},{}\n", prov.seed, prov.config_digest));
        }
    }
    out
}

pub fn streamlines_csv(draws: &[FlowSample], model: &FlowModel, prov: &Provenance) -> String {
    let mut out = String::from("draw,step,particle,position,time,seed,config_digest\n");
    for (d, s) in draws.iter().enumerate() {
        for (k, row) in s.trajectory.iter().enumerate() {
            let t = s.time_of(k, model);
            for (p, pos) in row.iter().enumerate() {
                out.push_str(&format!("{d},{k},{p},{pos},{t},{},{}\n", prov.seed, prov.config_digest));
            }
        }
    }
    out
}

/// Inducing inputs with the variational variance of each inducing output, for
/// streamline markers.
pub fn inducing_csv(model: &FlowModel, prov: &Provenance) -> String {
    let s = &model.q_factor * model.q_factor.transpose();
    let mut out = String::from("space,time,mean,variance,seed,config_digest\n");
    for (i, z) in model.inducing.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            z[0], z[1], model.q_mean[i], s[(i, i)], prov.seed, prov.config_digest
        ));
    }
    out
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spec_parses() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("2:2:1").unwrap(), vec![2.0]);
        assert!(parse_grid("1:0:3").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("a:1:2").is_err());
    }

    #[test]
    fn dataset_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "x,y\n1,2\n2,oops\n").unwrap();
        let msg = read_dataset(&p).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(read_dataset(&p).unwrap_err().to_string().contains("x,y"));
    }

    #[test]
    fn dataset_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = Dataset::new(vec![0.1, 1.0 / 3.0, 7e-300], vec![-2.5e10, 0.30000000000000004, 1.0]).unwrap();
        fs::write(&p, dataset_csv(&d)).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.x, d.x);
        assert_eq!(back.y, d.y);
    }
}
