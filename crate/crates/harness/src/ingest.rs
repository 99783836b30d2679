//! Wide-CSV panels: one header row of variable names, one row per period.

use std::io::{Read, Write};
use std::path::Path;

use fedvar::{Mat, Panel64};

use crate::config::{Codes, PanelSpec};
use crate::HarnessError;

/// Raw contents of a wide CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct WideTable {
    pub names: Vec<String>,
    pub values: Mat<f64>,
}

fn data_err(source: &str, msg: String) -> HarnessError {
    HarnessError::Data(format!("{source}: {msg}"))
}

pub fn read_wide<R: Read>(reader: R, source: &str) -> Result<WideTable, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| data_err(source, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() {
        return Err(data_err(source, "no columns".into()));
    }
    let mut cells = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        // line 1 is the header
        let line = i + 2;
        let rec = rec.map_err(|e| data_err(source, format!("line {line}: {e}")))?;
        if rec.len() != names.len() {
            return Err(data_err(source, format!("line {line}: {} cells, expected {}", rec.len(), names.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                data_err(source, format!("line {line}, column {} ('{}'): non-numeric cell '{cell}'", j + 1, names[j]))
            })?;
            if !v.is_finite() {
                return Err(data_err(source, format!("line {line}, column {} ('{}'): missing or non-finite value", j + 1, names[j])));
            }
            cells.push(v);
        }
        rows += 1;
    }
    Ok(WideTable {
        names,
        values: Mat::from_row_slice(rows, cells.len() / rows.max(1), &cells),
    })
}

/// Writes values with shortest round-trip formatting.
pub fn write_wide<W: Write>(writer: W, names: &[String], values: &Mat<f64>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| HarnessError::Data(e.to_string());
    w.write_record(names).map_err(csv_err)?;
    for row in values.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::Data(e.to_string()))
}

/// Applies the transformation codes, drops the first row and optionally
/// standardizes each column with full-sample moments (sd with `n - 1`).
pub fn preprocess(table: &WideTable, codes: &Codes, standardize: bool, source: &str) -> Result<Mat<f64>, HarnessError> {
    let (n, d) = table.values.shape();
    if n < 2 {
        return Err(data_err(source, format!("{n} rows cannot be differenced")));
    }
    if let Codes::PerColumn(v) = codes {
        if v.len() != d {
            return Err(data_err(source, format!("{} codes for {d} columns", v.len())));
        }
    }
    let mut out = Mat::zeros(n - 1, d);
    for j in 0..d {
        let name = &table.names[j];
        let col = table.values.column(j);
        match codes.for_column(j) {
            Some(1) => {
                for t in 1..n {
                    out[(t - 1, j)] = col[t] - col[t - 1];
                }
            }
            Some(2) => {
                if let Some(t) = col.iter().position(|&v| v <= 0.0) {
                    return Err(data_err(
                        source,
                        format!("column '{name}' row {}: nonpositive value {} under log difference", t + 1, col[t]),
                    ));
                }
                for t in 1..n {
                    out[(t - 1, j)] = col[t].ln() - col[t - 1].ln();
                }
            }
            other => {
                return Err(data_err(source, format!("column '{name}': transformation code {other:?} is not 1 or 2")));
            }
        }
        if standardize {
            let mut c = out.column_mut(j);
            let m = c.mean();
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 2.0).max(1.0);
            let sd = var.sqrt();
            if !(sd > 1e-12 * m.abs().max(1.0)) {
                return Err(data_err(source, format!("column '{name}' is constant after transformation")));
            }
            c.apply(|v| *v = (*v - m) / sd);
        }
    }
    Ok(out)
}

/// Loads one client's panel; the first `p` transformed rows become the
/// presample.
pub fn load_panel_from<R: Read>(reader: R, spec: &PanelSpec, p: usize, source: &str) -> Result<(Vec<String>, Panel64), HarnessError> {
    let table = read_wide(reader, source)?;
    if table.values.nrows() < p + 2 {
        return Err(data_err(source, format!("{} rows, need at least {}", table.values.nrows(), p + 2)));
    }
    let series = preprocess(&table, &spec.codes, spec.standardize, source)?;
    let id = Path::new(source)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| source.to_owned());
    let panel = Panel64::from_series(id, &series, p).map_err(|e| data_err(source, e.to_string()))?;
    Ok((table.names, panel))
}

pub fn load_panel(spec: &PanelSpec, p: usize) -> Result<(Vec<String>, Panel64), HarnessError> {
    let file = std::fs::File::open(&spec.path).map_err(|e| HarnessError::Io(spec.path.clone(), e))?;
    load_panel_from(std::io::BufReader::new(file), spec, p, &spec.path.display().to_string())
}

pub fn write_panel(path: &Path, names: &[String], values: &Mat<f64>) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
    write_wide(std::io::BufWriter::new(file), names, values)
}
