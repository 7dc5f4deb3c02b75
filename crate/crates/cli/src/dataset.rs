//! CSV ingestion and export of time series.

use std::io::{Read, Write};
use std::path::Path;

use msgam::TimeSeriesData;

use crate::error::CliError;

pub const MIN_ROWS: usize = 10;
const TIME_COLUMN: &str = "t";

/// Parsed CSV: optional integer time index plus named numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub time: Option<Vec<i64>>,
    pub names: Vec<String>,
    /// `columns[c][row]`, NaN where the field was empty.
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::Input(format!("cannot open data {}: {e}", path.display())))?;
        Self::parse(file)
    }

    pub fn parse<R: Read>(input: R) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header.is_empty() || header.iter().any(String::is_empty) {
            return Err(CliError::Input("data header has an empty column name".into()));
        }
        let time_col = header.iter().position(|h| h == TIME_COLUMN);
        let names: Vec<String> = header.iter().filter(|h| *h != TIME_COLUMN).cloned().collect();
        if names.is_empty() {
            return Err(CliError::Input("data has no response column".into()));
        }
        let mut time = time_col.map(|_| Vec::new());
        let mut columns = vec![Vec::new(); names.len()];
        for (r, record) in reader.records().enumerate() {
            let row = r + 1;
            let record = record.map_err(|e| CliError::Input(format!("row {row}: {e}")))?;
            if record.len() != header.len() {
                return Err(CliError::Input(format!(
                    "row {row}: expected {} fields, found {}",
                    header.len(),
                    record.len()
                )));
            }
            let mut c = 0;
            for (k, field) in record.iter().enumerate() {
                if Some(k) == time_col {
                    let v: i64 = field
                        .parse()
                        .map_err(|_| CliError::Input(format!("row {row}: time index `{field}` is not an integer")))?;
                    time.as_mut().expect("time column").push(v);
                    continue;
                }
                let v = if field.is_empty() {
                    f64::NAN
                } else {
                    match field.parse::<f64>() {
                        Ok(v) if v.is_finite() => v,
                        _ => {
                            return Err(CliError::Input(format!(
                                "row {row}: column `{}` value `{field}` is not a number",
                                header[k]
                            )))
                        }
                    }
                };
                columns[c].push(v);
                c += 1;
            }
        }
        let n_rows = columns[0].len();
        if n_rows < MIN_ROWS {
            return Err(CliError::Input(format!("data has {n_rows} rows, need at least {MIN_ROWS}")));
        }
        Ok(Self { time, names, columns })
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    fn column(&self, name: &str) -> Result<usize, CliError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::Input(format!("data has no column `{name}`")))
    }

    /// Response is the named column (default: the first one); every other
    /// column is a covariate.
    pub fn series(&self, response: Option<&str>) -> Result<TimeSeriesData, CliError> {
        let y = match response {
            Some(name) => self.column(name)?,
            None => 0,
        };
        let cov: Vec<usize> = (0..self.names.len()).filter(|&c| c != y).collect();
        self.build(y, &cov)
    }

    /// Series with the covariates named by a fitted model.
    pub fn series_for(&self, response: Option<&str>, covariates: &[String]) -> Result<TimeSeriesData, CliError> {
        let cov = covariates
            .iter()
            .map(|n| self.column(n))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Input(format!("covariate mismatch with model: {e}")))?;
        let y = match response {
            Some(name) => self.column(name)?,
            None => (0..self.names.len())
                .find(|c| !cov.contains(c))
                .ok_or_else(|| CliError::Input("data has no response column besides the covariates".into()))?,
        };
        let extra = self.names.len() - 1 - cov.len();
        if extra != 0 {
            return Err(CliError::Input(format!(
                "covariate mismatch: model uses {} covariates, data has {}",
                cov.len(),
                cov.len() + extra
            )));
        }
        self.build(y, &cov)
    }

    fn build(&self, y: usize, cov: &[usize]) -> Result<TimeSeriesData, CliError> {
        for &c in cov {
            if let Some(row) = self.columns[c].iter().position(|v| v.is_nan()) {
                return Err(CliError::Input(format!(
                    "row {}: covariate `{}` is missing (only responses may be empty)",
                    row + 1,
                    self.names[c]
                )));
            }
        }
        Ok(TimeSeriesData::new(
            self.columns[y].clone(),
            cov.iter().map(|&c| self.columns[c].clone()).collect(),
            cov.iter().map(|&c| self.names[c].clone()).collect(),
        )?)
    }

    /// Time labels: the `t` column when present, else 1-based positions.
    pub fn time_labels(&self) -> Vec<i64> {
        self.time.clone().unwrap_or_else(|| (1..=self.len() as i64).collect())
    }
}

/// Write `t, <response>, <covariates...>`; missing responses become empty.
pub fn write_series<W: Write>(data: &TimeSeriesData, response_name: &str, out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![TIME_COLUMN.to_string(), response_name.to_string()];
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for t in 0..data.len() {
        let y = data.response[t];
        let mut row = vec![(t + 1).to_string(), if y.is_nan() { String::new() } else { y.to_string() }];
        row.extend(data.covariates.iter().map(|c| c[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `t, state` with 1-based states.
pub fn write_states<W: Write>(time: &[i64], states: &[usize], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "state"])?;
    for (t, s) in time.iter().zip(states) {
        w.write_record([t.to_string(), (s + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}
