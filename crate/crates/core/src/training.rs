//! Joint optimisation of the prediction and imputation objectives.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc};
use crate::model::{build_variant, CdnetModel, LossWeights, ModelConfig, Noise};
use crate::numerics::{ParamStore, Tensor};
use crate::predictor::{class_weights, weighted_cross_entropy, CLASSES};
use crate::rng::{stream, substream, Stream};
use crate::scalar::Scalar;

/// Optimisation settings and the architecture they train.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight `λ` of the imputation loss.
    pub lambda: f64,
    /// Weight of the squared error over observed cells; 0 disables it.
    pub masked_mse: f64,
    /// Epochs without a better validation score before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            lambda: 1.0,
            masked_mse: 0.0,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be finite and >= 0")))
            }
        };
        finite_nonneg("lambda", self.lambda)?;
        finite_nonneg("masked_mse", self.masked_mse)?;
        finite_nonneg("learning_rate", self.learning_rate)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum = {} must lie in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Canonical `key=value` pairs: model keys first, then optimisation keys.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = self.model.to_pairs();
        pairs.extend([
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lambda", self.lambda.to_string()),
            ("masked_mse", self.masked_mse.to_string()),
            ("patience", self.patience.to_string()),
        ]);
        pairs
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    /// Applies one `key=value` setting; unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.apply(key, value)? {
            return Ok(());
        }
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "masked_mse" => self.masked_mse = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.apply(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub train_loss: f64,
    /// Class-weighted cross-entropy on the validation split (mean path).
    pub val_loss: f64,
    /// Absent when the validation split holds a single class.
    pub val_auroc: Option<f64>,
    pub val_auprc: Option<f64>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    let mut s = String::from("epoch,train_loss,val_loss,val_auroc,val_auprc\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            opt(e.val_auroc),
            opt(e.val_auprc)
        );
    }
    s
}

/// Validation metrics of a model on the mean path.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

pub fn evaluate<T: Scalar>(model: &CdnetModel<T>, ds: &Dataset, weights: [f64; CLASSES]) -> Result<Evaluation> {
    let mut probs = Vec::with_capacity(ds.len());
    for j in &ds.journeys {
        let p = model.predict(j)?;
        probs.push([p.y_hat[0].as_f64(), p.y_hat[1].as_f64()]);
    }
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let labels = ds.labels();
    let both = labels.contains(&0) && labels.contains(&1);
    let weights = if weights.iter().all(|&w| w > 0.0) {
        weights
    } else {
        [1.0; CLASSES]
    };
    Ok(Evaluation {
        loss: weighted_cross_entropy(&probs, &labels, weights)?,
        auroc: if both { Some(auroc(&scores, &labels)?) } else { None },
        auprc: if both { Some(auprc(&scores, &labels)?) } else { None },
    })
}

/// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`, frozen tensors untouched.
#[derive(Debug, Clone)]
pub struct Momentum<T> {
    velocity: Vec<Tensor<T>>,
    lr: T,
    mu: T,
}

impl<T: Scalar> Momentum<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64, momentum: f64) -> Self {
        Self {
            velocity: params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect(),
            lr: T::of(learning_rate),
            mu: T::of(momentum),
        }
    }

    /// Zero gradients shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.velocity.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        let ids: Vec<_> = params.ids().collect();
        for ((id, v), g) in ids.into_iter().zip(&mut self.velocity).zip(grads) {
            if !params.is_trainable(id) {
                continue;
            }
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.mu * *vi + gi;
            }
            for (pi, &vi) in params.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *pi -= self.lr * vi;
            }
        }
    }
}

/// Best-validation model, its score and the full epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: CdnetModel<T>,
    pub best_epoch: usize,
    pub best: Evaluation,
    pub log: Vec<EpochLog>,
}

/// Higher is better: AUROC when both classes are present, else negative loss.
fn selection_score(e: &Evaluation) -> f64 {
    e.auroc.unwrap_or(-e.loss)
}

/// Mini-batch SGD with momentum on
/// `Σ_i (w_{y_i} / Σ_j w_{y_j}) · CE_i + (λ / B) · Σ_i L_i`,
/// keeping the parameters with the best validation score.
pub fn train<T: Scalar>(cfg: &TrainConfig, train_ds: &Dataset, val_ds: &Dataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_ds.n_features() != cfg.model.n_features || val_ds.n_features() != cfg.model.n_features {
        return Err(Error::Config(format!(
            "model expects {} features, data has {} (train) and {} (validation)",
            cfg.model.n_features,
            train_ds.n_features(),
            val_ds.n_features()
        )));
    }
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }

    let mut model: CdnetModel<T> = build_variant(&cfg.model, cfg.seed)?;
    model.fit_fill(train_ds)?;
    let weights = class_weights(&train_ds.labels())?;
    let mut optimizer = Momentum::new(model.params(), cfg.learning_rate, cfg.momentum);

    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut draw: u64 = 0;

    let initial = evaluate(&model, val_ds, weights)?;
    let mut best = (selection_score(&initial), 0, model.clone(), initial);
    let mut log = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let weight_sum: f64 = chunk
                .iter()
                .map(|&i| weights[usize::from(train_ds.journeys[i].label)])
                .sum();
            let scale = if weight_sum > 0.0 {
                weight_sum
            } else {
                chunk.len() as f64
            };
            let mut total = 0.0;
            let mut grads = optimizer.zero_grads();
            for &i in chunk {
                let j = &train_ds.journeys[i];
                let w_y = if weight_sum > 0.0 {
                    weights[usize::from(j.label)]
                } else {
                    1.0
                };
                let lw = LossWeights {
                    prediction: w_y / scale,
                    imputation: cfg.lambda / chunk.len() as f64,
                    masked_mse: cfg.masked_mse / chunk.len() as f64,
                };
                let mut xi = substream(cfg.seed, Stream::Xi, draw);
                let mut eta = substream(cfg.seed, Stream::Eta, draw);
                draw += 1;
                let mut noise = Noise {
                    xi: Some(&mut xi),
                    eta: Some(&mut eta),
                };
                let (loss, g) = model.journey_gradients(j, lw, &mut noise)?;
                total += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += x;
                    }
                }
            }
            if !total.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: total,
                });
            }
            optimizer.step(model.params_mut(), &grads);
            loss_sum += total;
            batches += 1;
        }

        let eval = evaluate(&model, val_ds, weights)?;
        let score = selection_score(&eval);
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss: eval.loss,
            val_auroc: eval.auroc,
            val_auprc: eval.auprc,
        });
        if score > best.0 {
            best = (score, epoch, model.clone(), eval);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, model, best) = best;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_unknown_keys() {
        let mut cfg = TrainConfig {
            learning_rate: 0.0125,
            ..TrainConfig::default()
        };
        cfg.model.components = 3;
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(back.apply("bogus", "1"), Err(Error::Config(_))));
        assert!(back.apply("epochs", "many").is_err());
        assert!(back.apply_text("epochs 3").is_err());
    }

    #[test]
    fn validation_rejects_negative_lambda() {
        let cfg = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
