use std::fmt::{self, Display};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessRow {
    pub feature: String,
    pub kind: String,
    /// `100 · (1 − mean(mask))` over all cells.
    pub missing_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessTable {
    pub rows: Vec<MissingnessRow>,
}

pub fn missingness_stats(ds: &Dataset) -> Result<MissingnessTable> {
    if ds.is_empty() {
        return Err(Error::Contract(
            "missingness statistics need a non-empty dataset".into(),
        ));
    }
    let n = ds.n_features();
    let mut observed = vec![0usize; n];
    let mut total = 0usize;
    for j in &ds.journeys {
        total += j.steps();
        for (i, obs) in observed.iter_mut().enumerate() {
            *obs += (0..j.steps()).filter(|&t| j.is_observed(i, t)).count();
        }
    }
    let rows = (0..n)
        .map(|i| MissingnessRow {
            feature: ds.feature_names[i].clone(),
            kind: ds.feature_kinds[i].as_str().to_string(),
            missing_pct: 100.0 * (1.0 - observed[i] as f64 / total as f64),
        })
        .collect();
    Ok(MissingnessTable { rows })
}

impl MissingnessTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,type,missing_pct\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.2}\n", r.feature, r.kind, r.missing_pct));
        }
        s
    }
}

/// Aligned text, one `feature | type | pct` row per feature.
impl Display for MissingnessTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.feature.len()).max().unwrap_or(0);
        let k = self.rows.iter().map(|r| r.kind.len()).max().unwrap_or(0);
        for r in &self.rows {
            writeln!(f, "{:<w$} | {:<k$} | {:.2}", r.feature, r.kind, r.missing_pct)?;
        }
        Ok(())
    }
}

impl MissingnessRow {
    pub fn line(&self) -> String {
        format!("{} | {} | {:.2}", self.feature, self.kind, self.missing_pct)
    }
}
