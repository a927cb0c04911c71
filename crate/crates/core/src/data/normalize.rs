use super::Dataset;
use crate::error::{Error, Result};

/// Smallest standard deviation used when dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-score statistics over observed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population std of every feature's observed cells.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let n = ds.n_features();
        let mut count = vec![0usize; n];
        let mut sum = vec![0.0; n];
        for j in &ds.journeys {
            for i in 0..n {
                for t in 0..j.steps() {
                    if let Some(v) = j.value(i, t) {
                        count[i] += 1;
                        sum[i] += v;
                    }
                }
            }
        }
        if let Some(i) = count.iter().position(|&c| c == 0) {
            return Err(Error::Normalization(format!(
                "feature `{}` has no observed training entries",
                ds.feature_names[i]
            )));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut sq = vec![0.0; n];
        for j in &ds.journeys {
            for (i, sq_i) in sq.iter_mut().enumerate() {
                for t in 0..j.steps() {
                    if let Some(v) = j.value(i, t) {
                        *sq_i += (v - mean[i]).powi(2);
                    }
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &c)| (s / c as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }
}

/// Z-scores observed cells. With `stats = None` the statistics are fitted on
/// `ds` itself, which must then be the training split. Masks are untouched.
pub fn normalize(ds: &Dataset, stats: Option<&NormStats>) -> Result<Dataset> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != ds.n_features() || s.std.len() != ds.n_features() {
                return Err(Error::dim("normalize", &[s.mean.len()], &[ds.n_features()]));
            }
            s.clone()
        }
        None => NormStats::fit(ds)?,
    };
    let journeys = ds
        .journeys
        .iter()
        .map(|j| j.map_observed(|i, v| (v - stats.mean[i]) / stats.std[i]))
        .collect();
    let mut out = ds.with_journeys(journeys);
    out.normalization = Some(stats);
    Ok(out)
}

/// Inverse of [`normalize`] using the statistics stored on `ds`.
pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let stats = ds
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Normalization("dataset is not normalized".into()))?;
    let journeys = ds
        .journeys
        .iter()
        .map(|j| j.map_observed(|i, v| v * stats.std[i] + stats.mean[i]))
        .collect();
    let mut out = ds.with_journeys(journeys);
    out.normalization = None;
    Ok(out)
}
