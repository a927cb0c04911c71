//! Regularized attention: unreliability scores, per-step attention over
//! features, regularization of imputed values and the merge with observed data.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::imputer::{affine_cols, bias};
use crate::numerics::{Axis, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{normal_tensor, Rng};
use crate::scalar::Scalar;

/// Output activation of the regularization layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RanActivation {
    #[default]
    Relu,
    Identity,
}

impl RanActivation {
    pub fn as_str(self) -> &'static str {
        match self {
            RanActivation::Relu => "relu",
            RanActivation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(RanActivation::Relu),
            "identity" => Ok(RanActivation::Identity),
            other => Err(Error::Config(format!("unknown RAN activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RanParams {
    pub w_gamma: ParamId,
    pub b_gamma: ParamId,
    pub w_ran: ParamId,
    pub b_ran: ParamId,
    pub activation: RanActivation,
}

impl RanParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, n: usize, activation: RanActivation) -> Self {
        Self {
            w_gamma: store.add("ran.w_gamma", normal_tensor(rng, n, n, crate::imputer::INIT_STD)),
            b_gamma: bias(store, "ran.b_gamma", n),
            w_ran: store.add("ran.w_ran", normal_tensor(rng, n, n, crate::imputer::INIT_STD)),
            b_ran: bias(store, "ran.b_ran", n),
            activation,
        }
    }
}

/// `φ = 0` on observed cells and the mixed variance elsewhere.
pub fn unreliability<T: Scalar>(tape: &Tape<T>, mask: Rc<[bool]>, mixed_var: Var) -> Result<Var> {
    let zeros = tape.constant(Tensor::zeros(&tape.shape(mixed_var)));
    tape.select(mask, zeros, mixed_var)
}

/// `γ_t = softmax_features(W_γ (1 − φ_t) + b_γ)` for every step.
pub fn attention_weights<T: Scalar>(tape: &Tape<T>, w_gamma: Var, b_gamma: Var, phi: Var) -> Result<Var> {
    let logits = affine_cols(tape, w_gamma, tape.one_minus(phi), b_gamma)?;
    tape.softmax(logits, Axis::Rows)
}

/// `X̂_RAN = act(W_RAN (γ ⊙ X̂) + b_RAN)`, column by column.
pub fn regularize<T: Scalar>(
    tape: &Tape<T>,
    w_ran: Var,
    b_ran: Var,
    x_hat: Var,
    gamma: Var,
    activation: RanActivation,
) -> Result<Var> {
    let weighted = tape.mul(gamma, x_hat)?;
    let pre = affine_cols(tape, w_ran, weighted, b_ran)?;
    Ok(match activation {
        RanActivation::Relu => tape.relu(pre),
        RanActivation::Identity => pre,
    })
}

/// Observed cells from `x`, every other cell from `filled`.
pub fn combine<T: Scalar>(tape: &Tape<T>, filled: Var, x: Var, mask: Rc<[bool]>) -> Result<Var> {
    if tape.shape(filled) != tape.shape(x) {
        return Err(Error::dim("combine", &tape.shape(filled), &tape.shape(x)));
    }
    tape.select(mask, x, filled)
}

/// Tape handles for one pass through the attention block.
#[derive(Debug, Clone, Copy)]
pub struct RanTrace {
    pub phi: Var,
    pub gamma: Var,
    pub x_ran: Var,
}

pub fn run_ran<T: Scalar>(
    tape: &Tape<T>,
    b: &Bound,
    p: &RanParams,
    x_hat: Var,
    mixed_var: Var,
    mask: Rc<[bool]>,
) -> Result<RanTrace> {
    let phi = unreliability(tape, mask, mixed_var)?;
    let gamma = attention_weights(tape, b[p.w_gamma], b[p.b_gamma], phi)?;
    let x_ran = regularize(tape, b[p.w_ran], b[p.b_ran], x_hat, gamma, p.activation)?;
    Ok(RanTrace { phi, gamma, x_ran })
}

/// Value-level record of the attention block for one journey.
#[derive(Debug, Clone, PartialEq)]
pub struct RanOutput<T> {
    pub phi: Tensor<T>,
    pub gamma: Tensor<T>,
    pub x_ran: Tensor<T>,
    pub combined: Tensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    type T64 = Tensor<f64>;

    fn c(tape: &Tape<f64>, rows: &[&[f64]]) -> Var {
        tape.constant(T64::from_rows(rows).unwrap())
    }

    fn m(bits: &[bool]) -> Rc<[bool]> {
        bits.to_vec().into()
    }

    #[test]
    fn unreliability_examples() {
        let tape = Tape::<f64>::new();
        let var = c(&tape, &[&[1.7, 0.4], &[2.0, 3.0]]);
        let all = unreliability(&tape, m(&[true; 4]), var).unwrap();
        assert!(tape.value(all).data().iter().all(|&v| v == 0.0));
        let none = unreliability(&tape, m(&[false; 4]), var).unwrap();
        assert_eq!(*tape.value(none), *tape.value(var));
        let mixed = unreliability(&tape, m(&[false, true, true, false]), var).unwrap();
        assert_eq!(tape.value(mixed).data(), &[1.7, 0.0, 0.0, 3.0]);
        assert!(unreliability(&tape, m(&[true; 3]), var).is_err());
    }

    #[test]
    fn attention_examples() {
        let tape = Tape::<f64>::new();
        let id = tape.constant(T64::identity(2));
        let zero = tape.constant(T64::zeros(&[2, 1]));
        let phi = c(&tape, &[&[0.0, 0.3], &[0.9, 0.3]]);
        let g = attention_weights(&tape, id, zero, phi).unwrap();
        let g = tape.value(g);
        assert_abs_diff_eq!(g.get(0, 0), 0.7109495026250039, epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(1, 0), 0.289050497374996, epsilon = 1e-12);
        assert_eq!(g.get(0, 1), 0.5);
        assert_eq!(g.get(1, 1), 0.5);
    }

    #[test]
    fn regularize_examples() {
        let tape = Tape::<f64>::new();
        let id = tape.constant(T64::identity(2));
        let zero = tape.constant(T64::zeros(&[2, 1]));
        let x = c(&tape, &[&[2.0], &[-4.0]]);
        let g = c(&tape, &[&[0.5], &[0.5]]);
        let out = regularize(&tape, id, zero, x, g, RanActivation::Relu).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0]);
        let lin = regularize(&tape, id, zero, x, g, RanActivation::Identity).unwrap();
        assert_eq!(tape.value(lin).data(), &[1.0, -2.0]);
        let xz = tape.constant(T64::zeros(&[2, 1]));
        let none = regularize(&tape, id, zero, xz, g, RanActivation::Relu).unwrap();
        assert_eq!(tape.value(none).data(), &[0.0, 0.0]);
    }

    #[test]
    fn combine_examples() {
        let tape = Tape::<f64>::new();
        let filled = c(&tape, &[&[9.0, 8.0], &[7.0, 6.0]]);
        let x = c(&tape, &[&[1.0, f64::NAN], &[f64::NAN, 4.0]]);
        let xo = c(&tape, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let all = combine(&tape, filled, xo, m(&[true; 4])).unwrap();
        assert_eq!(*tape.value(all), *tape.value(xo));
        let none = combine(&tape, filled, x, m(&[false; 4])).unwrap();
        assert_eq!(*tape.value(none), *tape.value(filled));
        let mixed = combine(&tape, filled, x, m(&[true, false, false, true])).unwrap();
        assert_eq!(tape.value(mixed).data(), &[1.0, 8.0, 7.0, 4.0]);
        let twice = combine(&tape, mixed, x, m(&[true, false, false, true])).unwrap();
        assert_eq!(*tape.value(twice), *tape.value(mixed));
    }

    proptest! {
        #[test]
        fn gamma_columns_sum_to_one(vals in prop::collection::vec(0.0f64..10.0, 12), w in prop::collection::vec(-2.0f64..2.0, 9)) {
            let tape = Tape::<f64>::new();
            let phi = tape.constant(T64::new(vec![3, 4], vals).unwrap());
            let wg = tape.constant(T64::new(vec![3, 3], w).unwrap());
            let bg = tape.constant(T64::zeros(&[3, 1]));
            let g = attention_weights(&tape, wg, bg, phi).unwrap();
            let g = tape.value(g);
            for t in 0..4 {
                let s: f64 = g.column_values(t).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn phi_zero_exactly_on_observed(bits in prop::collection::vec(any::<bool>(), 6), vals in prop::collection::vec(0.01f64..5.0, 6)) {
            let tape = Tape::<f64>::new();
            let var = tape.constant(T64::new(vec![2, 3], vals).unwrap());
            let phi = unreliability(&tape, m(&bits), var).unwrap();
            for (k, &v) in tape.value(phi).data().iter().enumerate() {
                prop_assert_eq!(v == 0.0, bits[k]);
            }
        }

        #[test]
        fn regularized_values_nonnegative(vals in prop::collection::vec(-5.0f64..5.0, 8), w in prop::collection::vec(-2.0f64..2.0, 4)) {
            let tape = Tape::<f64>::new();
            let x = tape.constant(T64::new(vec![2, 4], vals).unwrap());
            let g = tape.constant(T64::full(&[2, 4], 0.5));
            let wr = tape.constant(T64::new(vec![2, 2], w).unwrap());
            let br = tape.constant(T64::zeros(&[2, 1]));
            let out = regularize(&tape, wr, br, x, g, RanActivation::Relu).unwrap();
            prop_assert!(tape.value(out).data().iter().all(|&v| v >= 0.0));
        }
    }
}
