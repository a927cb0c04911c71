//! Patient journeys, ingestion, preprocessing and synthetic data.

mod csvio;
mod normalize;
mod split;
mod stats;
mod synth;

pub use csvio::{load_csv, write_csv};
pub use normalize::{denormalize, normalize, NormStats, STD_FLOOR};
pub use split::{split, Split, DEFAULT_RATIOS};
pub use stats::{missingness_stats, MissingnessRow, MissingnessTable};
pub use synth::{synth_generate, SynthConfig, SynthTruth};

use crate::error::{Error, Result};

/// One patient's record matrix (`N` features × `T` steps), mask and outcome.
///
/// Missing cells hold NaN and must only be read through the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Journey {
    pub patient_id: String,
    n_features: usize,
    steps: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    pub label: u8,
}

impl Journey {
    /// `values` is row-major `n_features × steps`; `None` marks a missing cell.
    pub fn new(
        patient_id: impl Into<String>,
        n_features: usize,
        steps: usize,
        values: Vec<Option<f64>>,
        label: u8,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if steps == 0 {
            return Err(Error::Ingestion(format!("journey {patient_id} has no records")));
        }
        if values.len() != n_features * steps {
            return Err(Error::dim("journey", &[n_features, steps], &[values.len()]));
        }
        if label > 1 {
            return Err(Error::Ingestion(format!(
                "journey {patient_id} has label {label}, expected 0 or 1"
            )));
        }
        let mask = values.iter().map(Option::is_some).collect();
        let values = values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        Ok(Self {
            patient_id,
            n_features,
            steps,
            values,
            mask,
            label,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Raw row-major values; missing cells are NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_observed(&self, feature: usize, t: usize) -> bool {
        self.mask[feature * self.steps + t]
    }

    pub fn value(&self, feature: usize, t: usize) -> Option<f64> {
        let k = feature * self.steps + t;
        self.mask[k].then(|| self.values[k])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub(crate) fn map_observed(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for (k, v) in out.values.iter_mut().enumerate() {
            if self.mask[k] {
                *v = f(k / self.steps, *v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Continuous => "continuous",
            FeatureKind::Categorical => "categorical",
        }
    }
}

/// Journeys sharing one feature set. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub journeys: Vec<Journey>,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
    /// Statistics applied to observed cells, when the dataset is normalized.
    pub normalization: Option<NormStats>,
}

impl Dataset {
    pub fn new(journeys: Vec<Journey>, feature_names: Vec<String>) -> Result<Self> {
        let n = feature_names.len();
        if let Some(j) = journeys.iter().find(|j| j.n_features != n) {
            return Err(Error::Ingestion(format!(
                "journey {} has {} features, dataset has {n}",
                j.patient_id, j.n_features
            )));
        }
        Ok(Self {
            journeys,
            feature_kinds: vec![FeatureKind::Continuous; n],
            feature_names,
            normalization: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.journeys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.journeys.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.journeys.iter().map(|j| j.label).collect()
    }

    pub fn find(&self, patient_id: &str) -> Option<&Journey> {
        self.journeys.iter().find(|j| j.patient_id == patient_id)
    }

    /// Same features and normalization, different journeys.
    pub fn with_journeys(&self, journeys: Vec<Journey>) -> Self {
        Self {
            journeys,
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// First `n` journeys.
    pub fn head(&self, n: usize) -> Self {
        self.with_journeys(self.journeys.iter().take(n).cloned().collect())
    }
}
