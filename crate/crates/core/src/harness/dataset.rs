//! CSV datasets: a header row, response columns prefixed `y`, covariate
//! columns prefixed `x`, one observation per row.

use std::io::Read;
use std::path::Path;

use crate::error::{McmlError, Result};
use crate::model::{Dataset, Observation};

#[derive(Clone, Copy)]
enum Column {
    Response,
    Covariate,
}

fn parse_err(line: usize, message: impl Into<String>) -> McmlError {
    McmlError::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(parse_err(1, "missing header"));
    }
    let columns = headers
        .iter()
        .map(|h| match h.chars().next() {
            Some('y') => Ok(Column::Response),
            Some('x') => Ok(Column::Covariate),
            _ => Err(parse_err(
                1,
                format!("column `{h}` must start with `y` or `x`"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    if !columns.iter().any(|c| matches!(c, Column::Response)) {
        return Err(parse_err(1, "no response column"));
    }

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut obs = Observation {
            y: Vec::new(),
            x: Vec::new(),
        };
        for (cell, (col, name)) in record.iter().zip(columns.iter().zip(headers.iter())) {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line, format!("column `{name}`: `{cell}` is not a number"))
            })?;
            match col {
                Column::Response => obs.y.push(v),
                Column::Covariate => obs.x.push(v),
            }
        }
        rows.push(obs);
    }
    if rows.is_empty() {
        return Err(parse_err(2, "dataset has no rows"));
    }
    Dataset::new(rows)
}

pub fn load_dataset(path: &Path) -> Result<Dataset<f64>> {
    let file = std::fs::File::open(path)?;
    read_dataset(file)
}

/// Writes `y1..yd,x1..xl` columns.
pub fn write_dataset(path: &Path, data: &Dataset<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| McmlError::Io(e.into()))?;
    let first = &data.rows()[0];
    let header: Vec<String> = (1..=first.y.len())
        .map(|i| format!("y{i}"))
        .chain((1..=first.x.len()).map(|i| format!("x{i}")))
        .collect();
    w.write_record(&header)
        .map_err(|e| McmlError::Io(e.into()))?;
    for row in data.rows() {
        let cells: Vec<String> = row.y.iter().chain(&row.x).map(|v| v.to_string()).collect();
        w.write_record(&cells)
            .map_err(|e| McmlError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
