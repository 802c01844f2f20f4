//! CSV ingestion and emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use hbb::model::Observation;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Parsed input table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// Observations with 0-based state, stratum and PSU indices.
    pub obs: Vec<Observation>,
    /// Labels and column mapping.
    pub schema: Schema,
}

/// How the input columns map onto the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Covariate names, intercept first.
    pub covariates: Vec<String>,
    /// State labels in index order.
    pub states: Vec<String>,
    /// Stratum labels in index order.
    #[serde(default)]
    pub strata: Vec<String>,
    /// Design columns were read.
    pub design: bool,
}

/// Sorts labels numerically when they all parse as integers, else lexically.
fn ordered_labels(values: &[String]) -> Vec<String> {
    let set: BTreeSet<&String> = values.iter().collect();
    let mut out: Vec<String> = set.into_iter().cloned().collect();
    if out.iter().all(|v| v.parse::<i64>().is_ok()) {
        out.sort_by_key(|v| v.parse::<i64>().expect("checked"));
    }
    out
}

fn index_of(labels: &[String]) -> BTreeMap<&str, usize> {
    labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
}

/// Reads the provider table.
///
/// Required columns: y, n, state and x-prefixed covariates (x1, x2, ...); with
/// `design`, also stratum, psu and weight. An intercept is injected unless x1
/// is identically 1.
pub fn read_table(path: &Path, design: bool) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut seen = BTreeSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Failure::schema(format!("duplicate column '{h}'")).into());
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut required = vec!["y", "n", "state"];
    if design {
        required.extend(["stratum", "psu", "weight"]);
    }
    let missing: Vec<&str> = required.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Failure::schema(format!("missing column(s): {}", missing.join(", "))).into());
    }
    let mut xcols: Vec<(u32, usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix('x').and_then(|d| d.parse::<u32>().ok()).map(|k| (k, i, h.clone())))
        .collect();
    xcols.sort();
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let mut errors = Vec::new();
    let mut zero_n = 0usize;
    let num = |rec: &csv::StringRecord, c: usize| rec.get(c).unwrap_or("").to_string();
    let mut rows = Vec::with_capacity(records.len());
    let (mut states, mut strata, mut psus) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in records.iter().enumerate() {
        let row = r + 1;
        let y = num(rec, col("y").expect("checked")).parse::<u32>();
        let n = num(rec, col("n").expect("checked")).parse::<u32>();
        let (y, n) = match (y, n) {
            (Ok(y), Ok(n)) => (y, n),
            _ => {
                errors.push(format!("row {row}: y and n must be non-negative integers"));
                continue;
            }
        };
        if n == 0 {
            zero_n += 1;
            continue;
        }
        if y > n {
            errors.push(format!("row {row}: y = {y} exceeds n = {n}"));
            continue;
        }
        let mut x = Vec::with_capacity(xcols.len());
        for (_, c, name) in &xcols {
            match num(rec, *c).parse::<f64>() {
                Ok(v) if v.is_finite() => x.push(v),
                _ => errors.push(format!("row {row}: column {name} is not a finite number")),
            }
        }
        let w = if design {
            match num(rec, col("weight").expect("checked")).parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => v,
                _ => {
                    errors.push(format!("row {row}: weight must be positive"));
                    1.0
                }
            }
        } else {
            1.0
        };
        states.push(num(rec, col("state").expect("checked")));
        if design {
            strata.push(num(rec, col("stratum").expect("checked")));
            psus.push(num(rec, col("psu").expect("checked")));
        }
        rows.push((y, n, x, w));
    }
    if zero_n > 0 {
        errors.push(format!("{zero_n} row(s) have n = 0"));
    }
    if !errors.is_empty() {
        return Err(Failure::schema(errors.join("\n")).into());
    }
    if rows.is_empty() {
        return Err(Failure::schema("no data rows").into());
    }
    let intercept_given = xcols.first().is_some_and(|(k, _, _)| *k == 1) && rows.iter().all(|r| r.2[0] == 1.0);
    let mut covariates: Vec<String> = xcols.iter().map(|c| c.2.clone()).collect();
    if !intercept_given {
        covariates.insert(0, "intercept".into());
        for r in rows.iter_mut() {
            r.2.insert(0, 1.0);
        }
    }
    let state_labels = ordered_labels(&states);
    let stratum_labels = ordered_labels(&strata);
    let psu_labels = ordered_labels(&psus);
    let (si, hi, ci) = (index_of(&state_labels), index_of(&stratum_labels), index_of(&psu_labels));
    let obs: Vec<Observation> = rows
        .into_iter()
        .enumerate()
        .map(|(i, (y, n, x, w))| Observation {
            y,
            n,
            x,
            state: si[states[i].as_str()],
            stratum: if design { hi[strata[i].as_str()] } else { 0 },
            psu: if design { ci[psus[i].as_str()] } else { i },
            w_raw: w,
        })
        .collect();
    Ok(Table { obs, schema: Schema { covariates, states: state_labels, strata: stratum_labels, design } })
}

/// Writes a CSV of numbers with a header.
pub fn write_matrix_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| hbb::scores::fmt17(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric CSV written by [`write_matrix_csv`], checking the column count.
pub fn read_matrix_csv(path: &Path, expected_cols: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() != expected_cols {
        return Err(Failure::schema(format!("{}: expected {expected_cols} columns, found {}", path.display(), header.len())).into());
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != expected_cols {
            return Err(Failure::schema(format!("{}: row {} has {} columns, expected {expected_cols}", path.display(), i + 1, rec.len())).into());
        }
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|_| Failure::schema(format!("{}: row {} is not numeric", path.display(), i + 1)))?);
    }
    Ok((header, rows))
}

/// Writes a CSV of string cells.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Matrix with row and column names, serialized row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    /// Names of rows and columns.
    pub names: Vec<String>,
    /// Rows.
    pub rows: Vec<Vec<f64>>,
}

impl NamedMatrix {
    /// Copies a square matrix.
    pub fn new(names: &[String], m: &DMatrix<f64>) -> Self {
        Self { names: names.to_vec(), rows: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() }
    }
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reads JSON.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Failure::schema(format!("{}: {e}", path.display())).into())
}
