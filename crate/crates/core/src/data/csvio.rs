use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, Journey};
use crate::error::{Error, Result};

/// One record: time stamp and feature cells.
type Row = (f64, Vec<Option<f64>>);

/// Reads a values file (`patient_id, t, <feature…>`, empty cell = missing)
/// and a labels file (`patient_id, label`).
///
/// Journeys appear in order of first appearance in the values file, with
/// records sorted by `t`.
pub fn load_csv(values_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let values_file = File::open(values_path).map_err(|e| Error::io(values_path, e))?;
    let labels_file = File::open(labels_path).map_err(|e| Error::io(labels_path, e))?;
    load_from_readers(values_file, labels_file)
}

pub(crate) fn load_from_readers(values: impl std::io::Read, labels: impl std::io::Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(values);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "patient_id" || &headers[1] != "t" {
        return Err(Error::Ingestion(
            "values header must start with `patient_id,t` followed by at least one feature".into(),
        ));
    }
    let feature_names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let n = feature_names.len();

    let mut order: Vec<String> = Vec::new();
    let mut records: HashMap<String, Vec<Row>> = HashMap::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row_idx + 2; // 1-based, after the header
        if rec.len() != n + 2 {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", n + 2, rec.len()),
            });
        }
        let pid = rec[0].to_string();
        let t: f64 = rec[1].parse().map_err(|_| Error::Parse {
            row,
            column: "t".into(),
            message: format!("`{}` is not a number", &rec[1]),
        })?;
        let mut cells = Vec::with_capacity(n);
        for (c, name) in feature_names.iter().enumerate() {
            let raw = &rec[c + 2];
            if raw.is_empty() {
                cells.push(None);
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: name.clone(),
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: name.clone(),
                    message: format!("`{raw}` is not finite"),
                });
            }
            cells.push(Some(v));
        }
        let entry = records.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            Vec::new()
        });
        if entry.iter().any(|(seen, _)| *seen == t) {
            return Err(Error::Ingestion(format!("duplicate record for patient {pid} at t={t}")));
        }
        entry.push((t, cells));
    }

    let mut labels_by_id: HashMap<String, u8> = HashMap::new();
    let mut lrdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(labels);
    for (row_idx, rec) in lrdr.records().enumerate() {
        let rec = rec?;
        let row = row_idx + 2;
        let pid = rec.get(0).unwrap_or_default().to_string();
        let label: u8 = match rec.get(1) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Parse {
                    row,
                    column: "label".into(),
                    message: format!("expected 0 or 1, found {:?}", other.unwrap_or("")),
                })
            }
        };
        if !records.contains_key(&pid) {
            return Err(Error::Ingestion(format!("label for unknown patient {pid}")));
        }
        labels_by_id.insert(pid, label);
    }

    let known: HashSet<&String> = labels_by_id.keys().collect();
    let mut journeys = Vec::with_capacity(order.len());
    for pid in &order {
        if !known.contains(pid) {
            return Err(Error::Ingestion(format!("no label for patient {pid}")));
        }
        let mut rows = records.remove(pid).expect("recorded");
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let steps = rows.len();
        let mut cells = vec![None; n * steps];
        for (t, (_, row)) in rows.into_iter().enumerate() {
            for (i, v) in row.into_iter().enumerate() {
                cells[i * steps + t] = v;
            }
        }
        journeys.push(Journey::new(pid.clone(), n, steps, cells, labels_by_id[pid])?);
    }
    Dataset::new(journeys, feature_names)
}

/// Writes a dataset in the format [`load_csv`] reads. Steps are numbered from 0.
pub fn write_csv(ds: &Dataset, values_path: &Path, labels_path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(values_path).map_err(|e| Error::io(values_path, e))?);
    let io = |e| Error::io(values_path, e);
    write!(out, "patient_id,t").map_err(io)?;
    for name in &ds.feature_names {
        write!(out, ",{name}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for j in &ds.journeys {
        for t in 0..j.steps() {
            write!(out, "{},{t}", j.patient_id).map_err(io)?;
            for i in 0..j.n_features() {
                match j.value(i, t) {
                    Some(v) => write!(out, ",{v}").map_err(io)?,
                    None => write!(out, ",").map_err(io)?,
                }
            }
            writeln!(out).map_err(io)?;
        }
    }
    out.flush().map_err(io)?;

    let mut out = BufWriter::new(File::create(labels_path).map_err(|e| Error::io(labels_path, e))?);
    let io = |e| Error::io(labels_path, e);
    writeln!(out, "patient_id,label").map_err(io)?;
    for j in &ds.journeys {
        writeln!(out, "{},{}", j.patient_id, j.label).map_err(io)?;
    }
    out.flush().map_err(io)
}
