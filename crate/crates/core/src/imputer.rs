//! Learnable prefill, feature embedding, GRU latent model and the imputation
//! mixture density network.
//!
//! Component `k` of a mixture occupies row `k` of the `K × N` mean and
//! variance matrices, so the stacked head weights `w_mu`, `w_sigma` hold
//! component `k` in rows `k·N .. (k+1)·N`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Axis, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{normal_tensor, Rng};
use crate::scalar::Scalar;

/// Standard deviation of freshly initialised weight matrices.
pub const INIT_STD: f64 = 0.1;

pub(crate) fn weight<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> ParamId {
    store.add(name, normal_tensor(rng, rows, cols, INIT_STD))
}

pub(crate) fn bias<T: Scalar>(store: &mut ParamStore<T>, name: &str, rows: usize) -> ParamId {
    store.add(name, Tensor::zeros(&[rows, 1]))
}

/// `W · x + b`, with `b` broadcast across the columns of `x`.
pub(crate) fn affine_cols<T: Scalar>(tape: &Tape<T>, w: Var, x: Var, b: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    let cols = tape.shape(wx)[1];
    let bb = if cols == 1 { b } else { tape.broadcast_cols(b, cols)? };
    tape.add(wx, bb)
}

/// Gated recurrent unit weights; gates read `[h_prev, x_t]`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let cols = hidden + input;
        Self {
            w_r: weight(store, rng, &format!("{prefix}.w_r"), hidden, cols),
            b_r: bias(store, &format!("{prefix}.b_r"), hidden),
            w_u: weight(store, rng, &format!("{prefix}.w_u"), hidden, cols),
            b_u: bias(store, &format!("{prefix}.b_u"), hidden),
            w_h: weight(store, rng, &format!("{prefix}.w_h"), hidden, cols),
            b_h: bias(store, &format!("{prefix}.b_h"), hidden),
            input,
            hidden,
        }
    }
}

/// One GRU update:
///
/// ```text
/// R = σ(W_R [h, x] + b_R)        U = σ(W_U [h, x] + b_U)
/// H̃ = tanh(W_H [R ⊙ h, x] + b_H)
/// h' = U ⊙ h + (1 − U) ⊙ H̃
/// ```
pub fn gru_step<T: Scalar>(tape: &Tape<T>, b: &Bound, p: &GruParams, x_t: Var, h_prev: Var) -> Result<Var> {
    let hx = tape.concat_rows(&[h_prev, x_t])?;
    let r = tape.sigmoid(affine_cols(tape, b[p.w_r], hx, b[p.b_r])?);
    let u = tape.sigmoid(affine_cols(tape, b[p.w_u], hx, b[p.b_u])?);
    let rh = tape.mul(r, h_prev)?;
    let rhx = tape.concat_rows(&[rh, x_t])?;
    let cand = tape.tanh(affine_cols(tape, b[p.w_h], rhx, b[p.b_h])?);
    let keep = tape.mul(u, h_prev)?;
    let fresh = tape.mul(tape.one_minus(u), cand)?;
    tape.add(keep, fresh)
}

/// Runs the GRU over the columns of `x` (`input × T`) from `h_0 = 0`,
/// returning every hidden state.
pub fn gru_sequence<T: Scalar>(tape: &Tape<T>, b: &Bound, p: &GruParams, x: Var) -> Result<Vec<Var>> {
    let steps = tape.shape(x)[1];
    let mut h = tape.constant(Tensor::zeros(&[p.hidden, 1]));
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.column(x, t)?;
        h = gru_step(tape, b, p, x_t, h)?;
        out.push(h);
    }
    Ok(out)
}

/// Mixture density head mapping a hidden state to `K` diagonal Gaussians over `N` outputs.
#[derive(Debug, Clone)]
pub struct MdnHeadParams {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_sigma: ParamId,
    pub b_sigma: ParamId,
    pub components: usize,
    pub outputs: usize,
}

impl MdnHeadParams {
    /// With `hidden = None` the input feeds the heads directly (after a ReLU
    /// applied by the caller).
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
        components: usize,
        outputs: usize,
    ) -> Self {
        let ko = components * outputs;
        Self {
            w_hidden: weight(store, rng, &format!("{prefix}.w_hidden"), hidden, input),
            b_hidden: bias(store, &format!("{prefix}.b_hidden"), hidden),
            w_beta: weight(store, rng, &format!("{prefix}.w_beta"), components, hidden),
            b_beta: bias(store, &format!("{prefix}.b_beta"), components),
            w_mu: weight(store, rng, &format!("{prefix}.w_mu"), ko, hidden),
            b_mu: bias(store, &format!("{prefix}.b_mu"), ko),
            w_sigma: weight(store, rng, &format!("{prefix}.w_sigma"), ko, hidden),
            b_sigma: bias(store, &format!("{prefix}.b_sigma"), ko),
            components,
            outputs,
        }
    }
}

/// Mixture parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MixtureVars {
    /// `K × 1` mixing weights.
    pub beta: Var,
    /// `K × N` component means.
    pub mu: Var,
    /// `K × N` component variances.
    pub var: Var,
}

/// Mixture parameters as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams<T> {
    pub beta: Vec<T>,
    pub mu: Tensor<T>,
    pub var: Tensor<T>,
}

impl MixtureVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> MixtureParams<T> {
        MixtureParams {
            beta: tape.value(self.beta).data().to_vec(),
            mu: tape.value(self.mu).clone(),
            var: tape.value(self.var).clone(),
        }
    }
}

/// Mixture parameters from a hidden state `h_t`:
///
/// ```text
/// h = ReLU(W_h h_t + b_h)
/// β = softmax(W_β h + b_β)
/// μ_k = W_μk h + b_μk
/// σ²_k = ELU(W_σk h + b_σk) + 1 + ε
/// ```
pub fn mdn_head<T: Scalar>(tape: &Tape<T>, b: &Bound, p: &MdnHeadParams, h_t: Var) -> Result<MixtureVars> {
    let h = tape.relu(affine_cols(tape, b[p.w_hidden], h_t, b[p.b_hidden])?);
    mixture_from_features(tape, b, p, h)
}

/// The three heads applied to an already activated feature vector.
pub(crate) fn mixture_from_features<T: Scalar>(
    tape: &Tape<T>,
    b: &Bound,
    p: &MdnHeadParams,
    h: Var,
) -> Result<MixtureVars> {
    let (k, n) = (p.components, p.outputs);
    let beta = tape.softmax(affine_cols(tape, b[p.w_beta], h, b[p.b_beta])?, Axis::Rows)?;
    let mu = tape.reshape(affine_cols(tape, b[p.w_mu], h, b[p.b_mu])?, &[k, n])?;
    let pre = tape.reshape(affine_cols(tape, b[p.w_sigma], h, b[p.b_sigma])?, &[k, n])?;
    let var = tape.elu_offset(pre);
    Ok(MixtureVars { beta, mu, var })
}

/// `Σ_k β_k · rows_k(m)` as an `N × 1` column.
pub(crate) fn mix_rows<T: Scalar>(tape: &Tape<T>, beta: Var, m: Var) -> Result<Var> {
    let [k, n] = tape.shape(m)[..] else {
        return Err(Error::dim("mix_rows", &tape.shape(m), &[0, 0]));
    };
    let row = tape.reshape(beta, &[1, k])?;
    let mixed = tape.matmul(row, m)?;
    tape.reshape(mixed, &[n, 1])
}

/// Draws `X̃_k = μ_k + σ_k ⊙ ξ_k` and returns `X̂ = Σ_k β_k X̃_k`.
/// `xi` is `K × N`; zeros give the mixture mean.
pub fn mixture_sample<T: Scalar>(tape: &Tape<T>, mix: &MixtureVars, xi: Var) -> Result<Var> {
    let sd = tape.sqrt(mix.var);
    let noise = tape.mul(sd, xi)?;
    let draws = tape.add(mix.mu, noise)?;
    mix_rows(tape, mix.beta, draws)
}

/// `Σ_k β_k σ²_k` per output, `N × 1`.
pub fn mixed_variance<T: Scalar>(tape: &Tape<T>, mix: &MixtureVars) -> Result<Var> {
    mix_rows(tape, mix.beta, mix.var)
}

/// `X′[i,t] = X[i,t]` where observed, `Z[i]` otherwise.
pub fn prefill<T: Scalar>(tape: &Tape<T>, x: Var, mask: Rc<[bool]>, z: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let z_shape = tape.shape(z);
    if z_shape[0] != shape[0] {
        return Err(Error::dim("prefill", &shape, &z_shape));
    }
    let fill = tape.broadcast_cols(z, shape[1])?;
    tape.select(mask, x, fill)
}

/// `W_emb · X′ + b_emb`, bias broadcast over time.
pub fn embed<T: Scalar>(tape: &Tape<T>, x_prime: Var, w_emb: Var, b_emb: Var) -> Result<Var> {
    affine_cols(tape, w_emb, x_prime, b_emb)
}

/// Mean squared error between `W_proj · X̂` and `X_emb` over all entries.
pub fn imputation_loss<T: Scalar>(tape: &Tape<T>, x_hat: Var, x_emb: Var, w_proj: Var) -> Result<Var> {
    let projected = tape.matmul(w_proj, x_hat)?;
    if tape.shape(projected) != tape.shape(x_emb) {
        return Err(Error::dim(
            "imputation_loss",
            &tape.shape(projected),
            &tape.shape(x_emb),
        ));
    }
    let diff = tape.sub(projected, x_emb)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// How missing cells are reconstructed from the hidden state.
#[derive(Debug, Clone)]
pub enum ImputerHead {
    Mixture(MdnHeadParams),
    /// Deterministic `W · h_t + b`.
    Linear {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct ImputerParams {
    pub z: ParamId,
    pub w_emb: ParamId,
    pub b_emb: ParamId,
    pub gru: GruParams,
    pub head: ImputerHead,
    pub w_proj: ParamId,
}

/// Sizes of the imputation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImputerDims {
    pub n_features: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub d_head: usize,
    pub components: usize,
}

impl ImputerParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, d: ImputerDims, mixture: bool) -> Self {
        let n = d.n_features;
        let z = store.add("imputer.z", normal_tensor(rng, n, 1, 1.0));
        let w_emb = weight(store, rng, "imputer.w_emb", d.d_emb, n);
        let b_emb = bias(store, "imputer.b_emb", d.d_emb);
        let gru = GruParams::register(store, rng, "imputer.gru", d.d_emb, d.hidden);
        let head = if mixture {
            ImputerHead::Mixture(MdnHeadParams::register(
                store,
                rng,
                "imputer.mdn",
                d.hidden,
                d.d_head,
                d.components,
                n,
            ))
        } else {
            ImputerHead::Linear {
                w: weight(store, rng, "imputer.readout.w", n, d.hidden),
                b: bias(store, "imputer.readout.b", n),
            }
        };
        let w_proj = weight(store, rng, "imputer.w_proj", d.d_emb, n);
        Self {
            z,
            w_emb,
            b_emb,
            gru,
            head,
            w_proj,
        }
    }

    pub fn components(&self) -> usize {
        match &self.head {
            ImputerHead::Mixture(h) => h.components,
            ImputerHead::Linear { .. } => 0,
        }
    }
}

/// Source of the `ξ` draws used by [`mixture_sample`].
pub enum XiSource<'a> {
    /// `ξ = 0`: every sample is the mixture mean.
    Zero,
    /// Independent draws per component and feature.
    Independent(&'a mut Rng),
    /// One draw per feature, shared by all components.
    Shared(&'a mut Rng),
}

impl XiSource<'_> {
    pub fn draw<T: Scalar>(&mut self, k: usize, n: usize) -> Tensor<T> {
        match self {
            XiSource::Zero => Tensor::zeros(&[k, n]),
            XiSource::Independent(rng) => normal_tensor(rng, k, n, 1.0),
            XiSource::Shared(rng) => {
                let row: Tensor<T> = normal_tensor(rng, 1, n, 1.0);
                let data = (0..k).flat_map(|_| row.data().iter().copied()).collect();
                Tensor::new(vec![k, n], data).expect("k × n")
            }
        }
    }
}

/// Everything the imputer records for one journey.
#[derive(Debug, Clone)]
pub struct ImputerTrace {
    pub x_prime: Var,
    pub x_emb: Var,
    /// `N × T` predicted journey.
    pub x_hat: Var,
    /// `N × T` mixed variance; absent for the linear readout.
    pub mixed_var: Option<Var>,
    /// `g × T` hidden states.
    pub hidden: Var,
    pub mixtures: Vec<MixtureVars>,
}

/// Prefill → embed → GRU → per-step head, for a journey given as an `N × T`
/// constant `x` (missing cells may hold NaN) and its mask.
pub fn run_imputer<T: Scalar>(
    tape: &Tape<T>,
    b: &Bound,
    p: &ImputerParams,
    x: Var,
    mask: Rc<[bool]>,
    xi: &mut XiSource<'_>,
) -> Result<ImputerTrace> {
    let x_prime = prefill(tape, x, mask, b[p.z])?;
    let x_emb = embed(tape, x_prime, b[p.w_emb], b[p.b_emb])?;
    let hs = gru_sequence(tape, b, &p.gru, x_emb)?;
    let n = tape.shape(x)[0];

    let mut cols = Vec::with_capacity(hs.len());
    let mut vars = Vec::new();
    let mut mixtures = Vec::new();
    for &h in &hs {
        match &p.head {
            ImputerHead::Mixture(head) => {
                let mix = mdn_head(tape, b, head, h)?;
                let noise = tape.constant(xi.draw(head.components, n));
                cols.push(mixture_sample(tape, &mix, noise)?);
                vars.push(mixed_variance(tape, &mix)?);
                mixtures.push(mix);
            }
            ImputerHead::Linear { w, b: bb } => cols.push(affine_cols(tape, b[*w], h, b[*bb])?),
        }
    }
    let x_hat = tape.stack_cols(&cols)?;
    let mixed_var = if vars.is_empty() {
        None
    } else {
        Some(tape.stack_cols(&vars)?)
    };
    let hidden = tape.stack_cols(&hs)?;
    Ok(ImputerTrace {
        x_prime,
        x_emb,
        x_hat,
        mixed_var,
        hidden,
        mixtures,
    })
}
