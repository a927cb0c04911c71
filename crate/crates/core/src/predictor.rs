//! Temporal attention pooling, the predictor mixture density network, class
//! sampling and the weighted cross-entropy objective.

use crate::error::{Error, Result};
use crate::imputer::{affine_cols, bias, mdn_head, mix_rows, weight, MdnHeadParams, MixtureParams, MixtureVars};
use crate::numerics::{Axis, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{normal_tensor, Rng};
use crate::scalar::Scalar;

/// Probabilities are clipped to `[LOG_CLIP, 1 − LOG_CLIP]` before the log.
pub const LOG_CLIP: f64 = 1e-12;

/// Number of outcome classes.
pub const CLASSES: usize = 2;

/// How the pooled representation becomes class probabilities.
#[derive(Debug, Clone)]
pub enum PredictorHead {
    /// `K_p` Gaussian components over class logits.
    Mixture(MdnHeadParams),
    /// `softmax(W_out · ReLU(W_z x + b_z) + b_out)`.
    Linear {
        w_z: ParamId,
        b_z: ParamId,
        w_out: ParamId,
        b_out: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub w_tau: ParamId,
    pub b_tau: ParamId,
    pub head: PredictorHead,
}

impl PredictorParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        n: usize,
        d_z: usize,
        components: usize,
        mixture: bool,
    ) -> Self {
        let w_tau = weight(store, rng, "predictor.w_tau", n, n);
        let b_tau = bias(store, "predictor.b_tau", n);
        let head = if mixture {
            PredictorHead::Mixture(MdnHeadParams::register(
                store,
                rng,
                "predictor.mdn",
                n,
                d_z,
                components,
                CLASSES,
            ))
        } else {
            PredictorHead::Linear {
                w_z: weight(store, rng, "predictor.w_z", d_z, n),
                b_z: bias(store, "predictor.b_z", d_z),
                w_out: weight(store, rng, "predictor.w_out", CLASSES, d_z),
                b_out: bias(store, "predictor.b_out", CLASSES),
            }
        };
        Self { w_tau, b_tau, head }
    }

    pub fn components(&self) -> Option<usize> {
        match &self.head {
            PredictorHead::Mixture(h) => Some(h.components),
            PredictorHead::Linear { .. } => None,
        }
    }
}

/// `τ = softmax_time(W_τ X + b_τ)` and `X_overall = Σ_t τ_t ⊙ X_t`.
pub fn temporal_attention<T: Scalar>(tape: &Tape<T>, w_tau: Var, b_tau: Var, combined: Var) -> Result<(Var, Var)> {
    let logits = affine_cols(tape, w_tau, combined, b_tau)?;
    let tau = tape.softmax(logits, Axis::Cols)?;
    let weighted = tape.mul(tau, combined)?;
    let overall = tape.sum_axis(weighted, Axis::Cols)?;
    Ok((tau, overall))
}

/// Mixture over class logits: `z = ReLU(W_z x + b_z)` feeding the `β`, `μ`, `σ²` heads.
pub fn predictor_mdn<T: Scalar>(tape: &Tape<T>, b: &Bound, head: &MdnHeadParams, overall: Var) -> Result<MixtureVars> {
    mdn_head(tape, b, head, overall)
}

/// `ỹ_k = μ_k + σ_k ⊙ η_k`, `ŷ = softmax(Σ_k β_k ỹ_k)`; `eta` is `K_p × 2`.
pub fn class_sample<T: Scalar>(tape: &Tape<T>, mix: &MixtureVars, eta: Var) -> Result<Var> {
    let sd = tape.sqrt(mix.var);
    let noisy = tape.add(mix.mu, tape.mul(sd, eta)?)?;
    let pooled = mix_rows(tape, mix.beta, noisy)?;
    tape.softmax(pooled, Axis::Rows)
}

/// `−log ŷ_label`, with `ŷ` clipped away from 0 and 1.
pub fn cross_entropy<T: Scalar>(tape: &Tape<T>, y_hat: Var, label: u8) -> Result<Var> {
    check_label(label)?;
    let mut onehot = Tensor::zeros(&[CLASSES, 1]);
    onehot.data_mut()[usize::from(label)] = T::one();
    let logp = tape.log_clamp(y_hat, T::of(LOG_CLIP), T::of(1.0 - LOG_CLIP));
    let picked = tape.mul(logp, tape.constant(onehot))?;
    Ok(tape.affine(tape.sum(picked), -T::one(), T::zero()))
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::Contract(format!("label {label} is outside {{0, 1}}")));
    }
    Ok(())
}

/// `w_c = n_total / (2 · n_c)`; a class absent from `labels` gets weight 0.
pub fn class_weights(labels: &[u8]) -> Result<[f64; CLASSES]> {
    let mut counts = [0usize; CLASSES];
    for &y in labels {
        check_label(y)?;
        counts[usize::from(y)] += 1;
    }
    let total = labels.len() as f64;
    Ok(counts.map(|c| {
        if c == 0 {
            0.0
        } else {
            total / (CLASSES as f64 * c as f64)
        }
    }))
}

/// Weighted mean cross-entropy of class-probability pairs.
pub fn weighted_cross_entropy(probs: &[[f64; CLASSES]], labels: &[u8], weights: [f64; CLASSES]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &y) in probs.iter().zip(labels) {
        check_label(y)?;
        let w = weights[usize::from(y)];
        num += -w * p[usize::from(y)].clamp(LOG_CLIP, 1.0 - LOG_CLIP).ln();
        den += w;
    }
    if den <= 0.0 {
        return Err(Error::Contract("class weights sum to zero over the batch".into()));
    }
    Ok(num / den)
}

/// Predictor mixture and the resulting class probabilities for one journey.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution<T> {
    /// Absent for heads without a mixture.
    pub mixture: Option<MixtureParams<T>>,
    pub y_hat: [T; CLASSES],
}

impl<T: Scalar> PredictionDistribution<T> {
    pub fn positive(&self) -> T {
        self.y_hat[1]
    }
}

/// Draws a `K_p × 2` block of standard normals, or zeros without a generator.
pub fn draw_eta<T: Scalar>(rng: Option<&mut Rng>, components: usize) -> Tensor<T> {
    match rng {
        Some(r) => normal_tensor(r, components, CLASSES, 1.0),
        None => Tensor::zeros(&[components, CLASSES]),
    }
}
