//! Synthetic journeys with state-dependent (MNAR) missingness.
//!
//! Each journey follows a two-state Markov chain (healthy / sick). The state
//! shifts every feature's mean, changes how often each feature is recorded,
//! and the final state is the outcome label.

use rand::Rng as _;

use super::{Dataset, Journey};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_journeys: usize,
    pub n_features: usize,
    pub steps: usize,
    /// Per-feature probability that a cell is missing in the healthy state.
    pub missing_rate: Vec<f64>,
    /// Logit shift of the missingness probability while sick. Sick
    /// patients are recorded more often, so positive values lower it.
    pub mnar_strength: f64,
    /// Probability that the outcome label is flipped.
    pub label_noise: f64,
    pub seed: u64,
    /// Mean shift of each feature while sick, in noise standard deviations.
    pub effect_size: f64,
    /// Standard deviation of the per-journey, per-feature baseline offset.
    pub offset_std: f64,
    pub p_sick_initial: f64,
    pub p_onset: f64,
    pub p_recover: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_journeys: 2000,
            n_features: 8,
            steps: 24,
            missing_rate: vec![0.6; 8],
            mnar_strength: 1.0,
            label_noise: 0.0,
            seed: 0,
            effect_size: 0.5,
            offset_std: 0.7,
            p_sick_initial: 0.15,
            p_onset: 0.04,
            p_recover: 0.08,
        }
    }
}

impl SynthConfig {
    /// Same missing rate for every feature.
    pub fn uniform_rate(mut self, rate: f64) -> Self {
        self.missing_rate = vec![rate; self.n_features];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        if self.n_journeys == 0 || self.n_features == 0 || self.steps == 0 {
            return Err(Error::Config("journeys, features and steps must be positive".into()));
        }
        if self.missing_rate.len() != self.n_features {
            return Err(Error::Config(format!(
                "{} missing rates for {} features",
                self.missing_rate.len(),
                self.n_features
            )));
        }
        for &r in &self.missing_rate {
            unit("missing_rate", r)?;
        }
        unit("label_noise", self.label_noise)?;
        unit("p_sick_initial", self.p_sick_initial)?;
        unit("p_onset", self.p_onset)?;
        unit("p_recover", self.p_recover)?;
        if !self.mnar_strength.is_finite() || self.mnar_strength < 0.0 {
            return Err(Error::Config(format!(
                "mnar_strength = {} must be >= 0",
                self.mnar_strength
            )));
        }
        if !(self.effect_size.is_finite() && self.offset_std >= 0.0) {
            return Err(Error::Config("effect_size must be finite and offset_std >= 0".into()));
        }
        Ok(())
    }

    /// Canonical `key=value` pairs; `missing_rate` is a comma-separated list.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let rates = self
            .missing_rate
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("n_journeys", self.n_journeys.to_string()),
            ("n_features", self.n_features.to_string()),
            ("steps", self.steps.to_string()),
            ("missing_rate", rates),
            ("mnar_strength", self.mnar_strength.to_string()),
            ("label_noise", self.label_noise.to_string()),
            ("seed", self.seed.to_string()),
            ("effect_size", self.effect_size.to_string()),
            ("offset_std", self.offset_std.to_string()),
            ("p_sick_initial", self.p_sick_initial.to_string()),
            ("p_onset", self.p_onset.to_string()),
            ("p_recover", self.p_recover.to_string()),
        ]
    }

    /// Applies one `key=value` setting. A single `missing_rate` value is
    /// used for every feature; changing `n_features` re-spreads a uniform rate.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
        }
        match key {
            "n_journeys" => self.n_journeys = num(key, value)?,
            "n_features" => {
                self.n_features = num(key, value)?;
                if let Some(&r) = self.missing_rate.first() {
                    if self.missing_rate.iter().all(|&x| x == r) {
                        self.missing_rate = vec![r; self.n_features];
                    }
                }
            }
            "steps" => self.steps = num(key, value)?,
            "missing_rate" => {
                let rates = value.split(',').map(|v| num(key, v)).collect::<Result<Vec<f64>>>()?;
                self.missing_rate = if rates.len() == 1 {
                    vec![rates[0]; self.n_features]
                } else {
                    rates
                };
            }
            "mnar_strength" => self.mnar_strength = num(key, value)?,
            "label_noise" => self.label_noise = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "effect_size" => self.effect_size = num(key, value)?,
            "offset_std" => self.offset_std = num(key, value)?,
            "p_sick_initial" => self.p_sick_initial = num(key, value)?,
            "p_onset" => self.p_onset = num(key, value)?,
            "p_recover" => self.p_recover = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Probability that feature `i` is missing in the given state.
    pub fn missing_probability(&self, i: usize, sick: bool) -> f64 {
        let r = self.missing_rate[i];
        if r <= 0.0 || r >= 1.0 || !sick {
            return r;
        }
        let logit = (r / (1.0 - r)).ln() - self.mnar_strength;
        1.0 / (1.0 + (-logit).exp())
    }

    /// Raw-unit baseline and scale of feature `i`.
    pub fn feature_units(i: usize) -> (f64, f64) {
        (10.0 * (i as f64 + 1.0), 1.0 + (i % 3) as f64)
    }

    /// Direction of the sick-state shift for feature `i`.
    pub fn effect_sign(i: usize) -> f64 {
        if i.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

/// Latent quantities behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// `states[p][t]` is true when journey `p` is sick at step `t`.
    pub states: Vec<Vec<bool>>,
    /// Label before noise: the final latent state.
    pub clean_labels: Vec<u8>,
    pub config: SynthConfig,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Synth);
    let (n, steps) = (cfg.n_features, cfg.steps);
    let width = cfg.n_journeys.to_string().len();

    let mut journeys = Vec::with_capacity(cfg.n_journeys);
    let mut states = Vec::with_capacity(cfg.n_journeys);
    let mut clean_labels = Vec::with_capacity(cfg.n_journeys);
    for p in 0..cfg.n_journeys {
        let mut path = Vec::with_capacity(steps);
        let mut sick = rng.random::<f64>() < cfg.p_sick_initial;
        for t in 0..steps {
            if t > 0 {
                let u: f64 = rng.random();
                sick = if sick { u >= cfg.p_recover } else { u < cfg.p_onset };
            }
            path.push(sick);
        }

        let mut cells = vec![None; n * steps];
        for i in 0..n {
            let (base, scale) = SynthConfig::feature_units(i);
            let offset = cfg.offset_std * standard_normal(&mut rng);
            for t in 0..steps {
                let shift = if path[t] {
                    cfg.effect_size * SynthConfig::effect_sign(i)
                } else {
                    0.0
                };
                let value = base + scale * (offset + shift + standard_normal(&mut rng));
                let missing = rng.random::<f64>() < cfg.missing_probability(i, path[t]);
                if !missing {
                    cells[i * steps + t] = Some(value);
                }
            }
        }

        let clean = u8::from(path[steps - 1]);
        let flip = rng.random::<f64>() < cfg.label_noise;
        let label = if flip { 1 - clean } else { clean };
        journeys.push(Journey::new(format!("p{p:0width$}"), n, steps, cells, label)?);
        states.push(path);
        clean_labels.push(clean);
    }

    let names = (0..n).map(|i| format!("x{i}")).collect();
    let ds = Dataset::new(journeys, names)?;
    Ok((
        ds,
        SynthTruth {
            states,
            clean_labels,
            config: cfg.clone(),
        },
    ))
}
