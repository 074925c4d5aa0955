//! CSV ingestion and export of datasets.

use std::path::Path;

use log::{info, warn};

use crate::cli::config::ResolvedColumns;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Outcome of [`load_csv_with_summary`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSummary {
    pub rows_read: usize,
    /// Rows dropped because a mapped column was empty or `NA`.
    pub rows_dropped: usize,
    pub rows_retained: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(
        field.trim(),
        "" | "NA" | "NaN" | "nan" | "." | "null" | "NULL"
    )
}

/// Reads the mapped columns of a headed CSV file. Rows with a missing value
/// in any mapped column are dropped with a warning. When `columns.y` is
/// `None` the outcome is filled with zeros.
pub fn load_csv(path: &Path, columns: &ResolvedColumns) -> Result<Dataset> {
    load_csv_with_summary(path, columns).map(|(d, _)| d)
}

pub fn load_csv_with_summary(
    path: &Path,
    columns: &ResolvedColumns,
) -> Result<(Dataset, LoadSummary)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let mut wanted: Vec<&str> = Vec::new();
    if let Some(y) = &columns.y {
        wanted.push(y);
    }
    wanted.push(&columns.x);
    wanted.push(&columns.z);
    wanted.extend(columns.covariates.iter().map(String::as_str));
    let indices = wanted
        .iter()
        .map(|n| index_of(n))
        .collect::<Result<Vec<_>>>()?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    let mut rows_read = 0;
    let mut rows_dropped = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        rows_read += 1;
        // data rows are numbered from 1, after the header
        let row_number = i + 1;
        let fields: Vec<&str> = indices
            .iter()
            .map(|&j| record.get(j).unwrap_or(""))
            .collect();
        if fields.iter().any(|f| is_missing(f)) {
            rows_dropped += 1;
            continue;
        }
        for (k, field) in fields.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::ParseError {
                row: row_number,
                column: wanted[k].to_string(),
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::ParseError {
                    row: row_number,
                    column: wanted[k].to_string(),
                    message: format!("`{field}` is not finite"),
                });
            }
            values[k].push(v);
        }
    }
    if rows_dropped > 0 {
        warn!(
            "{}: dropped {rows_dropped} of {rows_read} rows with missing values",
            path.display()
        );
    }
    let retained = rows_read - rows_dropped;
    if retained == 0 {
        return Err(Error::EmptyData(path.to_path_buf()));
    }
    info!("{}: {retained} rows retained", path.display());

    let mut iter = values.into_iter();
    let y = if columns.y.is_some() {
        iter.next().unwrap_or_default()
    } else {
        vec![0.0; retained]
    };
    let x = iter.next().unwrap_or_default();
    let z = iter.next().unwrap_or_default();
    let covariates: Vec<Vec<f64>> = iter.collect();
    let dataset = Dataset::with_covariates(y, x, z, covariates, columns.covariates.clone())?;
    Ok((
        dataset,
        LoadSummary {
            rows_read,
            rows_dropped,
            rows_retained: retained,
        },
    ))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::ParseError {
            row: 0,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes `y, x, z` and covariates with full round-trip precision.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["y".to_string(), "x".to_string(), "z".to_string()];
    header.extend(dataset.covariate_names().iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| csv_error(path, e))?;
    for row in dataset.rows() {
        // `{}` on f64 prints the shortest string that parses back exactly
        let mut record = vec![row.y.to_string(), row.x.to_string(), row.z.to_string()];
        record.extend(row.l.iter().map(f64::to_string));
        writer
            .write_record(&record)
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
