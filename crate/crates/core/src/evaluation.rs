//! Uncertainty analyses, the feed-forward ensemble comparator and attention
//! reports over a trained model.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::{Dataset, Journey};
use crate::error::{Error, Result};
use crate::imputer::{affine_cols, bias, weight};
use crate::model::{CdnetModel, Noise};
use crate::numerics::{Axis, ParamStore, Tape, Tensor};
use crate::predictor::{class_weights, CLASSES, LOG_CLIP};
use crate::rng::{stream, substream, Stream};
use crate::scalar::Scalar;
use crate::training::Momentum;

/// Number of uniform bins on `[0, 1]` used by every uncertainty histogram.
pub const BINS: usize = 20;

/// Counts of probabilities in [`BINS`] uniform bins on `[0, 1]`; the last
/// bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: [usize; BINS],
}

impl Histogram {
    pub fn of(values: &[f64]) -> Result<Self> {
        let mut counts = [0; BINS];
        for &v in values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Metric(format!("probability {v} is outside [0, 1]")));
            }
            counts[((v * BINS as f64) as usize).min(BINS - 1)] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn edges(bin: usize) -> (f64, f64) {
        (bin as f64 / BINS as f64, (bin + 1) as f64 / BINS as f64)
    }

    /// Overlap coefficient `Σ_b min(p_b, q_b)` of the normalized counts;
    /// 0 when either histogram is empty.
    pub fn overlap(&self, other: &Histogram) -> f64 {
        let (n, m) = (self.total(), other.total());
        if n == 0 || m == 0 {
            return 0.0;
        }
        self.counts
            .iter()
            .zip(&other.counts)
            .map(|(&a, &b)| (a as f64 / n as f64).min(b as f64 / m as f64))
            .sum::<f64>()
            .min(1.0)
    }
}

/// `bin_left,bin_right,<series...>` with one row per bin.
pub fn histogram_csv(series: &[(&str, &Histogram)]) -> String {
    let mut s = String::from("bin_left,bin_right");
    for (name, _) in series {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for bin in 0..BINS {
        let (l, r) = Histogram::edges(bin);
        let _ = write!(s, "{l},{r}");
        for (_, h) in series {
            let _ = write!(s, ",{}", h.counts[bin]);
        }
        s.push('\n');
    }
    s
}

fn softmax2(logits: [f64; CLASSES]) -> [f64; CLASSES] {
    let m = logits[0].max(logits[1]);
    let e = logits.map(|l| (l - m).exp());
    let z = e[0] + e[1];
    e.map(|v| v / z)
}

/// Class probabilities of each predictor mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct EpistemicReport {
    pub patient_id: String,
    pub beta: Vec<f64>,
    /// `softmax(μ_k)` for every component `k`.
    pub probabilities: Vec<[f64; CLASSES]>,
    /// β-weighted mean of the class-1 probabilities.
    pub mean: f64,
    /// β-weighted standard deviation of the class-1 probabilities.
    pub spread: f64,
    /// Unweighted histogram of the class-1 probabilities.
    pub histogram: Histogram,
}

impl EpistemicReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,beta,p0,p1\n");
        for (k, (b, p)) in self.beta.iter().zip(&self.probabilities).enumerate() {
            let _ = writeln!(s, "{k},{b},{},{}", p[0], p[1]);
        }
        s
    }
}

/// Reads the prediction of every mixture component with the noise set to zero.
pub fn epistemic_analysis<T: Scalar>(model: &CdnetModel<T>, journey: &Journey) -> Result<EpistemicReport> {
    let mix = model.class_mixture(journey)?;
    let beta: Vec<f64> = mix.beta.iter().map(|b| b.as_f64()).collect();
    let probabilities: Vec<[f64; CLASSES]> = (0..beta.len())
        .map(|k| softmax2([mix.mu.get(k, 0).as_f64(), mix.mu.get(k, 1).as_f64()]))
        .collect();
    let positive: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
    let mean: f64 = beta.iter().zip(&positive).map(|(b, p)| b * p).sum();
    let var: f64 = beta.iter().zip(&positive).map(|(b, p)| b * (p - mean).powi(2)).sum();
    Ok(EpistemicReport {
        patient_id: journey.patient_id.clone(),
        histogram: Histogram::of(&positive)?,
        beta,
        probabilities,
        mean,
        spread: var.max(0.0).sqrt(),
    })
}

/// Class probabilities under repeated draws of the predictor noise.
#[derive(Debug, Clone, PartialEq)]
pub struct AleatoricReport {
    pub patient_id: String,
    pub draws: Vec<[f64; CLASSES]>,
    /// Histograms of the class-0 and class-1 probabilities.
    pub histograms: [Histogram; CLASSES],
    /// Overlap coefficient of the two class histograms.
    pub overlap: f64,
    pub mean: f64,
    pub std: f64,
}

impl AleatoricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("draw,p0,p1\n");
        for (d, p) in self.draws.iter().enumerate() {
            let _ = writeln!(s, "{d},{},{}", p[0], p[1]);
        }
        s
    }
}

/// Passes `draws` independent predictor-noise samples through the class
/// sampling step, with the imputation at its mean.
pub fn aleatoric_analysis<T: Scalar>(
    model: &CdnetModel<T>,
    journey: &Journey,
    draws: usize,
    seed: u64,
) -> Result<AleatoricReport> {
    if !model.variant().has_predictor_mixture() {
        return Err(Error::Capability {
            variant: model.variant().to_string(),
            component: "predictor mixture",
        });
    }
    let mut rng = stream(seed, Stream::Uncertainty);
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut noise = Noise {
            xi: None,
            eta: Some(&mut rng),
        };
        let p = model.predict_with(journey, &mut noise)?;
        out.push([p.y_hat[0].as_f64(), p.y_hat[1].as_f64()]);
    }
    let class = |c: usize| out.iter().map(|p| p[c]).collect::<Vec<_>>();
    let histograms = [Histogram::of(&class(0))?, Histogram::of(&class(1))?];
    let positive = class(1);
    let n = positive.len().max(1) as f64;
    let mean = positive.iter().sum::<f64>() / n;
    let std = (positive.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(AleatoricReport {
        patient_id: journey.patient_id.clone(),
        overlap: histograms[0].overlap(&histograms[1]),
        histograms,
        draws: out,
        mean,
        std,
    })
}

/// Training settings of the feed-forward ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 100,
            hidden: 16,
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Independently seeded two-layer classifiers over a fixed representation.
#[derive(Debug, Clone)]
pub struct FfnEnsemble {
    members: Vec<ParamStore<f64>>,
    inputs: usize,
}

const FFN_TENSORS: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// Class probabilities (`2 × B`) of one member for the columns of `x`.
fn ffn_forward(
    tape: &Tape<f64>,
    vars: &[crate::numerics::Var],
    x: crate::numerics::Var,
) -> Result<crate::numerics::Var> {
    let h = tape.relu(affine_cols(tape, vars[0], x, vars[1])?);
    let logits = affine_cols(tape, vars[2], h, vars[3])?;
    tape.softmax(logits, Axis::Rows)
}

fn columns(reps: &[&[f64]], inputs: usize) -> Result<Tensor<f64>> {
    let mut t = Tensor::zeros(&[inputs, reps.len()]);
    for (b, r) in reps.iter().enumerate() {
        if r.len() != inputs {
            return Err(Error::dim("ffn_ensemble", &[r.len()], &[inputs]));
        }
        for (i, &v) in r.iter().enumerate() {
            t.set(i, b, v);
        }
    }
    Ok(t)
}

impl FfnEnsemble {
    /// Trains every member on the same data with its own initialisation and
    /// batch order, minimising the class-weighted cross-entropy.
    pub fn fit(reps: &[Vec<f64>], labels: &[u8], cfg: &EnsembleConfig) -> Result<Self> {
        if reps.is_empty() || reps.len() != labels.len() {
            return Err(Error::Config(format!(
                "ensemble needs matching non-empty inputs, got {} representations and {} labels",
                reps.len(),
                labels.len()
            )));
        }
        if cfg.members == 0 || cfg.hidden == 0 || cfg.batch_size == 0 {
            return Err(Error::Config(
                "ensemble members, hidden and batch_size must be positive".into(),
            ));
        }
        let inputs = reps[0].len();
        let weights = class_weights(labels)?;
        let mut members = Vec::with_capacity(cfg.members);
        for m in 0..cfg.members {
            let mut rng = substream(cfg.seed, Stream::Ensemble, m as u64);
            let mut store = ParamStore::new();
            weight(&mut store, &mut rng, "w1", cfg.hidden, inputs);
            bias(&mut store, "b1", cfg.hidden);
            weight(&mut store, &mut rng, "w2", CLASSES, cfg.hidden);
            bias(&mut store, "b2", CLASSES);
            let mut opt = Momentum::new(&store, cfg.learning_rate, cfg.momentum);
            let mut order: Vec<usize> = (0..reps.len()).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&[f64]> = chunk.iter().map(|&i| reps[i].as_slice()).collect();
                    let mut target = Tensor::zeros(&[CLASSES, chunk.len()]);
                    let total: f64 = chunk.iter().map(|&i| weights[usize::from(labels[i])]).sum();
                    for (b, &i) in chunk.iter().enumerate() {
                        let c = usize::from(labels[i]);
                        target.set(c, b, weights[c] / total);
                    }
                    let tape = Tape::new();
                    let bound = store.bind(&tape);
                    let vars: Vec<_> = store.ids().map(|id| bound[id]).collect();
                    let x = tape.constant(columns(&batch, inputs)?);
                    let p = ffn_forward(&tape, &vars, x)?;
                    let logp = tape.log_clamp(p, LOG_CLIP, 1.0 - LOG_CLIP);
                    let picked = tape.mul(logp, tape.constant(target))?;
                    let loss = tape.affine(tape.sum(picked), -1.0, 0.0);
                    let grads = tape.backward(loss)?;
                    let grads = store.collect_grads(&bound, &grads);
                    opt.step(&mut store, &grads);
                }
            }
            members.push(store);
        }
        debug_assert!(members.iter().all(|s| s.iter().map(|(n, _)| n).eq(FFN_TENSORS)));
        Ok(Self { members, inputs })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Class-1 probability from every member.
    pub fn predict(&self, rep: &[f64]) -> Result<Vec<f64>> {
        let x = columns(&[rep], self.inputs)?;
        self.members
            .iter()
            .map(|store| {
                let tape = Tape::new();
                let bound = store.bind(&tape);
                let vars: Vec<_> = store.ids().map(|id| bound[id]).collect();
                let p = ffn_forward(&tape, &vars, tape.constant(x.clone()))?;
                let p1 = tape.value(p).data()[1];
                Ok(p1)
            })
            .collect()
    }
}

/// Attention-pooled representation of every journey, as `f64`.
pub fn representations<T: Scalar>(model: &CdnetModel<T>, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.journeys
        .iter()
        .map(|j| Ok(model.overall(j)?.data().iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Ensemble predictions for one journey, binned like the epistemic histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub patient_id: String,
    pub probabilities: Vec<f64>,
    pub histogram: Histogram,
}

impl EnsembleReport {
    pub fn new(ensemble: &FfnEnsemble, rep: &[f64], patient_id: &str) -> Result<Self> {
        let probabilities = ensemble.predict(rep)?;
        Ok(Self {
            patient_id: patient_id.to_string(),
            histogram: Histogram::of(&probabilities)?,
            probabilities,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("member,p1\n");
        for (m, p) in self.probabilities.iter().enumerate() {
            let _ = writeln!(s, "{m},{p}");
        }
        s
    }
}

/// Fits an ensemble on the model's representations of `train_ds` and reports
/// its predictions for `journey`.
pub fn ffn_ensemble<T: Scalar>(
    model: &CdnetModel<T>,
    train_ds: &Dataset,
    journey: &Journey,
    cfg: &EnsembleConfig,
) -> Result<EnsembleReport> {
    let reps = representations(model, train_ds)?;
    let ensemble = FfnEnsemble::fit(&reps, &train_ds.labels(), cfg)?;
    let rep: Vec<f64> = model.overall(journey)?.data().iter().map(|v| v.as_f64()).collect();
    EnsembleReport::new(&ensemble, &rep, &journey.patient_id)
}

/// Attention scores of the imputed cells of one journey.
#[derive(Debug, Clone, PartialEq)]
pub struct RanReport {
    pub patient_id: String,
    pub feature_names: Vec<String>,
    pub steps: usize,
    /// Row-major `N × T`; `None` marks an observed cell.
    pub scores: Vec<Option<f64>>,
}

impl RanReport {
    /// Scores of imputed cells as `(feature, t, γ)`.
    pub fn imputed(&self) -> Vec<(usize, usize, f64)> {
        self.scores
            .iter()
            .enumerate()
            .filter_map(|(k, s)| s.map(|g| (k / self.steps, k % self.steps, g)))
            .collect()
    }

    /// `feature,t,gamma`, one row per imputed cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,t,gamma\n");
        for (i, t, g) in self.imputed() {
            let _ = writeln!(s, "{},{t},{g}", self.feature_names[i]);
        }
        s
    }

    /// One row per feature, one column per step; observed cells read `observed`.
    pub fn to_grid_csv(&self) -> String {
        let mut s = String::from("feature");
        for t in 0..self.steps {
            let _ = write!(s, ",t{t}");
        }
        s.push('\n');
        for (i, name) in self.feature_names.iter().enumerate() {
            s.push_str(name);
            for t in 0..self.steps {
                match self.scores[i * self.steps + t] {
                    Some(g) => {
                        let _ = write!(s, ",{g}");
                    }
                    None => s.push_str(",observed"),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn ran_report<T: Scalar>(model: &CdnetModel<T>, journey: &Journey, feature_names: &[String]) -> Result<RanReport> {
    let ran = model.ran_output(journey)?;
    if feature_names.len() != journey.n_features() {
        return Err(Error::dim(
            "ran_report",
            &[feature_names.len()],
            &[journey.n_features()],
        ));
    }
    let steps = journey.steps();
    let scores = (0..journey.n_features() * steps)
        .map(|k| {
            let (i, t) = (k / steps, k % steps);
            (!journey.is_observed(i, t)).then(|| ran.gamma.get(i, t).as_f64())
        })
        .collect();
    Ok(RanReport {
        patient_id: journey.patient_id.clone(),
        feature_names: feature_names.to_vec(),
        steps,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_variant, ModelConfig, Variant};
    use approx::assert_relative_eq;

    fn tiny(variant: Variant) -> CdnetModel<f64> {
        let cfg = ModelConfig {
            variant,
            n_features: 2,
            d_emb: 4,
            hidden: 4,
            d_head: 4,
            components: 2,
            d_z: 4,
            pred_components: 6,
            ..ModelConfig::default()
        };
        build_variant(&cfg, 1).unwrap()
    }

    fn journey() -> Journey {
        Journey::new("p7", 2, 3, vec![Some(0.5), None, Some(-0.2), None, None, Some(1.0)], 1).unwrap()
    }

    #[test]
    fn histogram_edges_and_overlap() {
        let h = Histogram::of(&[0.0, 0.049, 0.05, 1.0, 0.999]).unwrap();
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[BINS - 1], 2);
        assert_eq!(h.total(), 5);
        assert_eq!(h.overlap(&h), 1.0);
        let a = Histogram::of(&[0.1, 0.12]).unwrap();
        let b = Histogram::of(&[0.9]).unwrap();
        assert_eq!(a.overlap(&b), 0.0);
        assert!(Histogram::of(&[1.5]).is_err());
        let csv = histogram_csv(&[("mdn", &a), ("ffn", &b)]);
        assert_eq!(csv.lines().count(), BINS + 1);
        assert!(csv.starts_with("bin_left,bin_right,mdn,ffn\n0,0.05,0,0\n"));
    }

    #[test]
    fn component_softmax_by_hand() {
        let p = softmax2([3f64.ln(), 0.0]);
        assert_relative_eq!(p[0], 0.75, epsilon = 1e-15);
        assert_eq!(softmax2([0.0, 0.0]), [0.5, 0.5]);
    }

    #[test]
    fn epistemic_report_is_consistent() {
        let model = tiny(Variant::Cdnet);
        let r = epistemic_analysis(&model, &journey()).unwrap();
        assert_eq!(r.histogram.total(), 6);
        assert!(r.probabilities.iter().all(|p| (p[0] + p[1] - 1.0).abs() < 1e-12));
        assert_relative_eq!(r.beta.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(r.spread >= 0.0);
        assert_eq!(r.to_csv().lines().count(), 7);
        assert!(matches!(
            epistemic_analysis(&tiny(Variant::CdnetAlpha), &journey()),
            Err(Error::Capability { .. })
        ));
    }

    #[test]
    fn identical_components_have_zero_spread() {
        let mut model = tiny(Variant::CdnetBeta);
        for name in ["predictor.mdn.w_mu", "predictor.mdn.b_mu"] {
            let id = model.params().id(name).unwrap();
            let shape = model.params().get(id).shape().to_vec();
            // Every component row gets the same class logits.
            let mut t = Tensor::zeros(&shape);
            for r in 0..shape[0] {
                for c in 0..shape[1] {
                    t.set(r, c, if r % 2 == 0 { 0.3 } else { -0.1 } * (c as f64 + 1.0));
                }
            }
            model.params_mut().set(id, t).unwrap();
        }
        let r = epistemic_analysis(&model, &journey()).unwrap();
        assert!(r.spread < 1e-12, "{}", r.spread);
    }

    #[test]
    fn aleatoric_draws_and_noiseless_limit() {
        let model = tiny(Variant::Cdnet);
        let r = aleatoric_analysis(&model, &journey(), 40, 3).unwrap();
        assert_eq!(r.draws.len(), 40);
        assert_eq!(r.histograms[0].total(), 40);
        assert!((0.0..=1.0).contains(&r.overlap));
        assert_eq!(r, aleatoric_analysis(&model, &journey(), 40, 3).unwrap());
        assert_eq!(
            aleatoric_analysis(&model, &journey(), 1, 3)
                .unwrap()
                .to_csv()
                .lines()
                .count(),
            2
        );

        // A very negative variance pre-activation drives σ² to its floor.
        let mut quiet = model.clone();
        let id = quiet.params().id("predictor.mdn.b_sigma").unwrap();
        let shape = quiet.params().get(id).shape().to_vec();
        quiet.params_mut().set(id, Tensor::full(&shape, -60.0)).unwrap();
        let id = quiet.params().id("predictor.mdn.w_sigma").unwrap();
        let shape = quiet.params().get(id).shape().to_vec();
        quiet.params_mut().set(id, Tensor::zeros(&shape)).unwrap();
        let r = aleatoric_analysis(&quiet, &journey(), 20, 3).unwrap();
        assert!(r.std < 1e-6, "{}", r.std);
    }

    #[test]
    fn ensemble_is_seeded_and_binned() {
        let reps: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 20.0 - 1.0, (i % 3) as f64]).collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from(i >= 20)).collect();
        let cfg = EnsembleConfig {
            members: 5,
            epochs: 5,
            ..EnsembleConfig::default()
        };
        let a = FfnEnsemble::fit(&reps, &labels, &cfg).unwrap();
        let b = FfnEnsemble::fit(&reps, &labels, &cfg).unwrap();
        let ra = EnsembleReport::new(&a, &reps[0], "x").unwrap();
        assert_eq!(ra, EnsembleReport::new(&b, &reps[0], "x").unwrap());
        assert_eq!(ra.histogram.total(), 5);
        assert!(ra.probabilities.windows(2).any(|w| w[0] != w[1]));

        let single = FfnEnsemble::fit(&reps, &labels, &EnsembleConfig { members: 1, ..cfg }).unwrap();
        let r = EnsembleReport::new(&single, &reps[0], "x").unwrap();
        assert_eq!(r.histogram.counts.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn ran_report_marks_observed_cells() {
        let model = tiny(Variant::Cdnet);
        let names = vec!["a".to_string(), "b".to_string()];
        let r = ran_report(&model, &journey(), &names).unwrap();
        assert_eq!(r.imputed().len(), 3);
        assert!(r.imputed().iter().all(|&(_, _, g)| (0.0..=1.0).contains(&g)));
        assert_eq!(
            r.to_grid_csv().lines().nth(1).unwrap().split(',').nth(1),
            Some("observed")
        );

        let full = Journey::new("f", 2, 1, vec![Some(0.1), Some(0.2)], 0).unwrap();
        let r = ran_report(&model, &full, &names).unwrap();
        assert_eq!(r.to_csv(), "feature,t,gamma\n");
        assert!(matches!(
            ran_report(&tiny(Variant::CdnetBeta), &full, &names),
            Err(Error::Capability { .. })
        ));
    }
}
