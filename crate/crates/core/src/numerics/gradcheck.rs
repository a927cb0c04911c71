//! Central finite-difference verification of tape gradients.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over all trainable scalars of `|analytic − numeric| / max(|numeric|, 1e−8)`.
    pub max_rel_error: f64,
    /// Worst error per parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// How the numeric derivative is estimated from function values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    Central,
    /// Central differences at `h` and `h/2` combined as `(4·D(h/2) − D(h)) / 3`,
    /// cancelling the `h²` error term so a larger `h` can be used.
    Richardson,
}

/// Compares the tape gradient of `f` with central differences of step `h`
/// for every trainable scalar in `params`.
///
/// `f` must be a deterministic function of the parameters; it is evaluated
/// twice at the base point and a mismatch is a contract error.
pub fn finite_diff_check<T, F>(params: &ParamStore<T>, h: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Bound) -> Result<Var>,
{
    finite_diff_check_with(params, h, Stencil::Central, f)
}

/// [`finite_diff_check`] with a choice of difference stencil.
pub fn finite_diff_check_with<T, F>(params: &ParamStore<T>, h: f64, stencil: Stencil, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Bound) -> Result<Var>,
{
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = f(&tape, &bound)?;
        Ok(tape.item(loss)?.as_f64())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = params.collect_grads(&bound, &grads);

    let mut work = params.clone();
    let mut per_param = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for id in params.ids() {
        if !params.is_trainable(id) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            let mut central = |step: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[k] = T::of(orig.as_f64() + step);
                let plus = eval(&work)?;
                work.get_mut(id).data_mut()[k] = T::of(orig.as_f64() - step);
                let minus = eval(&work)?;
                work.get_mut(id).data_mut()[k] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = match stencil {
                Stencil::Central => central(h)?,
                Stencil::Richardson => {
                    let coarse = central(h)?;
                    (4.0 * central(h / 2.0)? - coarse) / 3.0
                }
            };
            let exact = analytic[id.0].data()[k].as_f64();
            let rel = (exact - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((params.name(id).to_string(), worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        checked,
    })
}
