//! Model variants assembled from the imputer, attention and predictor blocks.

use std::fmt::{self, Display};
use std::rc::Rc;
use std::str::FromStr;

use crate::data::{Dataset, Journey};
use crate::error::{Error, Result};
use crate::imputer::{
    affine_cols, bias, gru_sequence, imputation_loss, run_imputer, weight, GruParams, ImputerDims, ImputerParams,
    ImputerTrace, MixtureParams, MixtureVars, XiSource,
};
use crate::numerics::{Axis, Bound, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::predictor::{
    class_sample, cross_entropy, draw_eta, predictor_mdn, temporal_attention, PredictionDistribution, PredictorHead,
    PredictorParams, CLASSES,
};
use crate::ran::{combine, run_ran, RanActivation, RanOutput, RanParams, RanTrace};
use crate::rng::{stream, Rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Imputation mixture, attention regularization and predictor mixture.
    Cdnet,
    /// Linear readout imputation and a deterministic classifier.
    CdnetAlpha,
    /// Imputation and predictor mixtures without the attention block.
    CdnetBeta,
    /// Training-mean imputation, GRU and a linear classifier.
    MeanBaseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Cdnet,
        Variant::CdnetAlpha,
        Variant::CdnetBeta,
        Variant::MeanBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cdnet => "cdnet",
            Variant::CdnetAlpha => "cdnet_alpha",
            Variant::CdnetBeta => "cdnet_beta",
            Variant::MeanBaseline => "mean_baseline",
        }
    }

    pub fn has_imputation_mixture(self) -> bool {
        matches!(self, Variant::Cdnet | Variant::CdnetBeta)
    }

    pub fn has_ran(self) -> bool {
        self == Variant::Cdnet
    }

    pub fn has_predictor_mixture(self) -> bool {
        matches!(self, Variant::Cdnet | Variant::CdnetBeta)
    }
}

impl Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Architecture of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_features: usize,
    pub d_emb: usize,
    /// GRU hidden width `g`.
    pub hidden: usize,
    /// Hidden width `d_h` of the imputation mixture head.
    pub d_head: usize,
    /// Imputation mixture components `K`.
    pub components: usize,
    pub d_z: usize,
    /// Predictor mixture components `K_p`.
    pub pred_components: usize,
    /// Share one `ξ` draw per feature across imputation components.
    pub shared_xi: bool,
    pub ran_activation: RanActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Cdnet,
            n_features: 8,
            d_emb: 32,
            hidden: 64,
            d_head: 64,
            components: 5,
            d_z: 64,
            pred_components: 100,
            shared_xi: false,
            ran_activation: RanActivation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_features", self.n_features),
            ("d_emb", self.d_emb),
            ("hidden", self.hidden),
            ("d_head", self.d_head),
            ("components", self.components),
            ("d_z", self.d_z),
            ("pred_components", self.pred_components),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Canonical `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("n_features", self.n_features.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("hidden", self.hidden.to_string()),
            ("d_head", self.d_head.to_string()),
            ("components", self.components.to_string()),
            ("d_z", self.d_z.to_string()),
            ("pred_components", self.pred_components.to_string()),
            ("shared_xi", self.shared_xi.to_string()),
            ("ran_activation", self.ran_activation.as_str().to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns `false` if the key is not a model key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
        }
        match key {
            "variant" => self.variant = value.parse()?,
            "n_features" => self.n_features = num(key, value)?,
            "d_emb" => self.d_emb = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "d_head" => self.d_head = num(key, value)?,
            "components" => self.components = num(key, value)?,
            "d_z" => self.d_z = num(key, value)?,
            "pred_components" => self.pred_components = num(key, value)?,
            "shared_xi" => self.shared_xi = num(key, value)?,
            "ran_activation" => self.ran_activation = RanActivation::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn imputer_dims(&self) -> ImputerDims {
        ImputerDims {
            n_features: self.n_features,
            d_emb: self.d_emb,
            hidden: self.hidden,
            d_head: self.d_head,
            components: self.components,
        }
    }
}

#[derive(Debug, Clone)]
struct BaselineParams {
    fill: ParamId,
    gru: GruParams,
    w_cls: ParamId,
    b_cls: ParamId,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Layout {
    Joint {
        imputer: ImputerParams,
        ran: Option<RanParams>,
        predictor: PredictorParams,
    },
    Baseline(BaselineParams),
}

/// A model of any variant together with its parameters.
#[derive(Debug, Clone)]
pub struct CdnetModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Name of the frozen per-feature fill used by the mean baseline.
pub const BASELINE_FILL: &str = "baseline.fill";

/// Builds a freshly initialised model; weights come from the `Init` stream of `seed`.
pub fn build_variant<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<CdnetModel<T>> {
    config.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let mut store = ParamStore::new();
    let n = config.n_features;
    let layout = match config.variant {
        Variant::MeanBaseline => {
            let fill = store.add_frozen(BASELINE_FILL, Tensor::zeros(&[n, 1]));
            let gru = GruParams::register(&mut store, &mut rng, "baseline.gru", n, config.hidden);
            let w_cls = weight(&mut store, &mut rng, "baseline.w_cls", CLASSES, config.hidden);
            let b_cls = bias(&mut store, "baseline.b_cls", CLASSES);
            Layout::Baseline(BaselineParams {
                fill,
                gru,
                w_cls,
                b_cls,
            })
        }
        v => {
            let imputer =
                ImputerParams::register(&mut store, &mut rng, config.imputer_dims(), v.has_imputation_mixture());
            let ran = v
                .has_ran()
                .then(|| RanParams::register(&mut store, &mut rng, n, config.ran_activation));
            let predictor = PredictorParams::register(
                &mut store,
                &mut rng,
                n,
                config.d_z,
                config.pred_components,
                v.has_predictor_mixture(),
            );
            Layout::Joint {
                imputer,
                ran,
                predictor,
            }
        }
    };
    Ok(CdnetModel {
        config: config.clone(),
        params: store,
        layout,
    })
}

/// Randomness for one forward pass. `None` means the zero draw (mean path).
#[derive(Default)]
pub struct Noise<'a> {
    pub xi: Option<&'a mut Rng>,
    pub eta: Option<&'a mut Rng>,
}

impl Noise<'_> {
    pub fn mean() -> Self {
        Self::default()
    }
}

/// Tape handles recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `N × T` journey with missing cells as NaN.
    pub x: Var,
    pub mask: Rc<[bool]>,
    pub imputer: Option<ImputerTrace>,
    pub ran: Option<RanTrace>,
    /// Complete `N × T` matrix fed to the predictor.
    pub combined: Var,
    pub tau: Option<Var>,
    pub overall: Option<Var>,
    pub class_mixture: Option<MixtureVars>,
    /// `2 × 1` class probabilities.
    pub y_hat: Var,
}

/// Value-level imputation output for one journey.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult<T> {
    pub x_hat: Tensor<T>,
    /// Absent for the linear readout.
    pub mixed_var: Option<Tensor<T>>,
    /// Absent for variants without attention.
    pub ran: Option<RanOutput<T>>,
    pub combined: Tensor<T>,
    pub mixtures: Vec<MixtureParams<T>>,
}

/// Weights of one journey's contribution to a batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub prediction: f64,
    pub imputation: f64,
    /// Extra weight on a squared error over observed cells in feature space.
    pub masked_mse: f64,
}

impl<T: Scalar> CdnetModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same model with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> CdnetModel<U> {
        CdnetModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Sets the mean baseline's fill to the per-feature observed mean of `ds`.
    /// Features never observed keep a fill of zero. No-op for other variants.
    pub fn fit_fill(&mut self, ds: &Dataset) -> Result<()> {
        let Layout::Baseline(p) = &self.layout else {
            return Ok(());
        };
        let n = self.config.n_features;
        let (mut sum, mut count) = (vec![0.0; n], vec![0usize; n]);
        for j in &ds.journeys {
            check_journey(j, n)?;
            for i in 0..n {
                for t in 0..j.steps() {
                    if let Some(v) = j.value(i, t) {
                        sum[i] += v;
                        count[i] += 1;
                    }
                }
            }
        }
        let fill = (0..n)
            .map(|i| T::of(if count[i] == 0 { 0.0 } else { sum[i] / count[i] as f64 }))
            .collect();
        self.params.set(p.fill, Tensor::column(fill))
    }

    fn capability(&self, component: &'static str) -> Error {
        Error::Capability {
            variant: self.variant().to_string(),
            component,
        }
    }

    /// Records the full forward pass for `journey` on `tape`.
    pub fn forward(&self, tape: &Tape<T>, b: &Bound, journey: &Journey, noise: &mut Noise<'_>) -> Result<ForwardTrace> {
        check_journey(journey, self.config.n_features)?;
        let (n, steps) = (journey.n_features(), journey.steps());
        let values = journey.values().iter().map(|&v| T::of(v)).collect();
        let x = tape.constant(Tensor::new(vec![n, steps], values)?);
        let mask: Rc<[bool]> = journey.mask().into();

        match &self.layout {
            Layout::Baseline(p) => {
                let fill = tape.broadcast_cols(b[p.fill], steps)?;
                let combined = tape.select(mask.clone(), x, fill)?;
                let hs = gru_sequence(tape, b, &p.gru, combined)?;
                let logits = affine_cols(tape, b[p.w_cls], hs[steps - 1], b[p.b_cls])?;
                let y_hat = tape.softmax(logits, Axis::Rows)?;
                Ok(ForwardTrace {
                    x,
                    mask,
                    imputer: None,
                    ran: None,
                    combined,
                    tau: None,
                    overall: None,
                    class_mixture: None,
                    y_hat,
                })
            }
            Layout::Joint {
                imputer,
                ran,
                predictor,
            } => {
                let mut xi = match noise.xi.as_deref_mut() {
                    None => XiSource::Zero,
                    Some(r) if self.config.shared_xi => XiSource::Shared(r),
                    Some(r) => XiSource::Independent(r),
                };
                let imp = run_imputer(tape, b, imputer, x, mask.clone(), &mut xi)?;
                let (filled, ran_trace) = match (ran, imp.mixed_var) {
                    (Some(rp), Some(mv)) => {
                        let trace = run_ran(tape, b, rp, imp.x_hat, mv, mask.clone())?;
                        (trace.x_ran, Some(trace))
                    }
                    _ => (imp.x_hat, None),
                };
                let combined = combine(tape, filled, x, mask.clone())?;
                let (tau, overall) = temporal_attention(tape, b[predictor.w_tau], b[predictor.b_tau], combined)?;
                let (y_hat, class_mixture) = match &predictor.head {
                    PredictorHead::Mixture(head) => {
                        let mix = predictor_mdn(tape, b, head, overall)?;
                        let eta = tape.constant(draw_eta(noise.eta.as_deref_mut(), head.components));
                        (class_sample(tape, &mix, eta)?, Some(mix))
                    }
                    PredictorHead::Linear { w_z, b_z, w_out, b_out } => {
                        let z = tape.relu(affine_cols(tape, b[*w_z], overall, b[*b_z])?);
                        let logits = affine_cols(tape, b[*w_out], z, b[*b_out])?;
                        (tape.softmax(logits, Axis::Rows)?, None)
                    }
                };
                Ok(ForwardTrace {
                    x,
                    mask,
                    imputer: Some(imp),
                    ran: ran_trace,
                    combined,
                    tau: Some(tau),
                    overall: Some(overall),
                    class_mixture,
                    y_hat,
                })
            }
        }
    }

    /// `w_pred · CE + w_imp · L_imp + w_mse · masked MSE` for one journey.
    pub fn objective(&self, tape: &Tape<T>, b: &Bound, trace: &ForwardTrace, label: u8, w: LossWeights) -> Result<Var> {
        let ce = cross_entropy(tape, trace.y_hat, label)?;
        let mut total = tape.affine(ce, T::of(w.prediction), T::zero());
        if let (Layout::Joint { imputer, .. }, Some(imp)) = (&self.layout, &trace.imputer) {
            if w.imputation != 0.0 {
                let l = imputation_loss(tape, imp.x_hat, imp.x_emb, b[imputer.w_proj])?;
                total = tape.add(total, tape.affine(l, T::of(w.imputation), T::zero()))?;
            }
            if w.masked_mse != 0.0 {
                let l = masked_mse(tape, imp.x_hat, imp.x_prime, trace.mask.clone())?;
                total = tape.add(total, tape.affine(l, T::of(w.masked_mse), T::zero()))?;
            }
        }
        Ok(total)
    }

    /// Objective value and parameter gradients for one journey.
    pub fn journey_gradients(
        &self,
        journey: &Journey,
        weights: LossWeights,
        noise: &mut Noise<'_>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let trace = self.forward(&tape, &b, journey, noise)?;
        let loss = self.objective(&tape, &b, &trace, journey.label, weights)?;
        let value = tape.item(loss)?.as_f64();
        let grads: Gradients<T> = tape.backward(loss)?;
        Ok((value, self.params.collect_grads(&b, &grads)))
    }

    /// Class probabilities and predictor mixture on the mean path.
    pub fn predict(&self, journey: &Journey) -> Result<PredictionDistribution<T>> {
        self.predict_with(journey, &mut Noise::mean())
    }

    pub fn predict_with(&self, journey: &Journey, noise: &mut Noise<'_>) -> Result<PredictionDistribution<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let trace = self.forward(&tape, &b, journey, noise)?;
        let y = tape.value(trace.y_hat);
        Ok(PredictionDistribution {
            mixture: trace.class_mixture.map(|m| m.values(&tape)),
            y_hat: [y.data()[0], y.data()[1]],
        })
    }

    /// Positive-class probability on the mean path for every journey.
    pub fn scores(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ds.journeys
            .iter()
            .map(|j| self.predict(j).map(|p| p.positive().as_f64()))
            .collect()
    }

    /// Predictor mixture on the mean path; requires a predictor mixture.
    pub fn class_mixture(&self, journey: &Journey) -> Result<MixtureParams<T>> {
        if !self.variant().has_predictor_mixture() {
            return Err(self.capability("predictor mixture"));
        }
        self.predict(journey)?
            .mixture
            .ok_or_else(|| self.capability("predictor mixture"))
    }

    /// Pooled representation `X_overall` (`N × 1`) on the mean path.
    pub fn overall(&self, journey: &Journey) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let trace = self.forward(&tape, &b, journey, &mut Noise::mean())?;
        let overall = trace.overall.ok_or_else(|| self.capability("temporal attention"))?;
        let value = tape.value(overall).clone();
        Ok(value)
    }

    /// Imputation, attention and merged matrix; `xi = None` gives the mixture mean.
    pub fn impute(&self, journey: &Journey, xi: Option<&mut Rng>) -> Result<ImputationResult<T>> {
        if matches!(self.layout, Layout::Baseline(_)) {
            return Err(self.capability("imputer"));
        }
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let mut noise = Noise { xi, eta: None };
        let trace = self.forward(&tape, &b, journey, &mut noise)?;
        let imp = trace.imputer.as_ref().expect("joint layout has an imputer");
        let value = |v: Var| tape.value(v).clone();
        let combined = value(trace.combined);
        Ok(ImputationResult {
            x_hat: value(imp.x_hat),
            mixed_var: imp.mixed_var.map(value),
            ran: trace.ran.map(|r| RanOutput {
                phi: value(r.phi),
                gamma: value(r.gamma),
                x_ran: value(r.x_ran),
                combined: combined.clone(),
            }),
            combined,
            mixtures: imp.mixtures.iter().map(|m| m.values(&tape)).collect(),
        })
    }

    /// Attention output for one journey; requires the attention block.
    pub fn ran_output(&self, journey: &Journey) -> Result<RanOutput<T>> {
        if !self.variant().has_ran() {
            return Err(self.capability("regularized attention"));
        }
        self.impute(journey, None)?
            .ran
            .ok_or_else(|| self.capability("regularized attention"))
    }
}

/// Mean of `(X̂ − X)²` over observed cells; zero when nothing is observed.
fn masked_mse<T: Scalar>(tape: &Tape<T>, x_hat: Var, x_prime: Var, mask: Rc<[bool]>) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(tape.scalar(T::zero()));
    }
    let diff = tape.sub(x_hat, x_prime)?;
    let sq = tape.mul(diff, diff)?;
    let zeros = tape.constant(Tensor::zeros(&tape.shape(sq)));
    let kept = tape.select(mask, sq, zeros)?;
    Ok(tape.affine(tape.sum(kept), T::of(1.0 / count as f64), T::zero()))
}

fn check_journey(j: &Journey, n: usize) -> Result<()> {
    if j.n_features() != n {
        return Err(Error::dim("journey features", &[j.n_features()], &[n]));
    }
    Ok(())
}
