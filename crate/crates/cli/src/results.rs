//! `results.csv`: one row per (model, solver, SNR) cell.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const HEADER: &str = "model,solver,m,ratio,snr_db,mse,residual,mssim,mean_wall_ms_per_image,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub solver: String,
    pub m: usize,
    pub ratio: f64,
    /// `inf` for noiseless measurements.
    pub snr_db: f64,
    pub mse: f64,
    pub residual: f64,
    pub mssim: f64,
    /// Empty when timing output is off.
    pub mean_wall_ms_per_image: Option<f64>,
    pub seed: u64,
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then_with(|| a.solver.cmp(&b.solver))
            .then_with(|| a.snr_db.total_cmp(&b.snr_db))
    });
}

/// Sorted CSV text; the header is always present.
pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(HEADER.split(','))?;
    for r in &sorted {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<Vec<u8>> {
    let bytes = results_csv(rows)?;
    std::fs::write(path, &bytes).map_err(CliError::io(path))?;
    Ok(bytes)
}

pub fn parse_results_csv(bytes: &[u8]) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != HEADER {
        return Err(CliError::Invalid(format!("unexpected results header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, solver: &str, snr: f64) -> ResultRow {
        ResultRow {
            model: model.into(),
            solver: solver.into(),
            m: 39,
            ratio: 39.0 / 784.0,
            snr_db: snr,
            mse: 1.25,
            residual: 0.1,
            mssim: 0.5,
            mean_wall_ms_per_image: Some(3.5),
            seed: 7,
        }
    }

    #[test]
    fn empty_file_is_header_only() {
        assert_eq!(results_csv(&[]).unwrap(), format!("{HEADER}\n").into_bytes());
    }

    #[test]
    fn rows_are_sorted_and_round_trip() {
        let rows = vec![
            row("gan", "pgd", f64::INFINITY),
            row("cgan", "pgd", 0.0),
            row("gan", "npgd", 10.0),
            row("gan", "pgd", -20.0),
            ResultRow {
                mean_wall_ms_per_image: None,
                model: "with,comma".into(),
                ..row("x", "pgd", 2.0)
            },
        ];
        let bytes = results_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"with,comma\""));
        let back = parse_results_csv(&bytes).unwrap();
        let keys: Vec<(String, String, f64)> = back.iter().map(|r| (r.model.clone(), r.solver.clone(), r.snr_db)).collect();
        assert_eq!(keys[0].0, "cgan");
        assert_eq!(keys[2], ("gan".into(), "pgd".into(), -20.0));
        assert_eq!(keys[3], ("gan".into(), "pgd".into(), f64::INFINITY));
        let mut sorted = rows.clone();
        sort_rows(&mut sorted);
        assert_eq!(back, sorted);
        assert_eq!(results_csv(&back).unwrap(), bytes);
    }

    #[test]
    fn missing_timing_is_an_empty_field() {
        let r = ResultRow {
            mean_wall_ms_per_image: None,
            ..row("gan", "pgd", 0.0)
        };
        let text = String::from_utf8(results_csv(&[r]).unwrap()).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",,7"));
    }
}
