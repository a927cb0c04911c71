use cdnet::data::{synth_generate, Journey, SynthConfig};
use cdnet::model::{build_variant, CdnetModel, LossWeights, ModelConfig, Noise, Variant};
use cdnet::numerics::{finite_diff_check_with, Stencil, Tape};
use cdnet::rng::{normal_tensor, stream, Stream};
use cdnet::Error;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        n_features: 2,
        d_emb: 4,
        hidden: 4,
        d_head: 4,
        components: 2,
        d_z: 4,
        pred_components: 3,
        ..ModelConfig::default()
    }
}

fn tiny_journey(seed: u64) -> Journey {
    let cfg = SynthConfig {
        n_journeys: 1,
        n_features: 2,
        steps: 3,
        seed,
        ..SynthConfig::default()
    }
    .uniform_rate(0.4);
    let (ds, _) = synth_generate(&cfg).unwrap();
    let j = &ds.journeys[0];
    // Center raw synthetic units so activations stay in a moderate range.
    let cells = (0..2)
        .flat_map(|i| (0..3).map(move |t| (i, t)))
        .map(|(i, t)| j.value(i, t).map(|v| (v - 10.0 * (i as f64 + 1.0)) / 2.0))
        .collect();
    Journey::new("p", 2, 3, cells, j.label).unwrap()
}

const WEIGHTS: LossWeights = LossWeights {
    prediction: 1.0,
    imputation: 1.0,
    masked_mse: 0.0,
};

/// Redraws every parameter from `N(0, std²)` so that gradients sit well above
/// the finite-difference noise floor and no ReLU input is near its kink.
fn random_point(model: &mut CdnetModel<f64>, seed: u64, std: f64) {
    let mut rng = stream(seed, Stream::Init);
    for id in model.params().ids().collect::<Vec<_>>() {
        let shape = model.params().get(id).shape().to_vec();
        model
            .params_mut()
            .set(id, normal_tensor(&mut rng, shape[0], shape[1], std))
            .unwrap();
    }
}

fn check(model: &CdnetModel<f64>, j: &Journey, weights: LossWeights, noise_seed: Option<u64>) -> f64 {
    let report = finite_diff_check_with(model.params(), 1e-3, Stencil::Richardson, |tape, b| {
        let seed = noise_seed.unwrap_or(0);
        let (mut xi, mut eta) = (stream(seed, Stream::Xi), stream(seed, Stream::Eta));
        let mut noise = match noise_seed {
            Some(_) => Noise {
                xi: Some(&mut xi),
                eta: Some(&mut eta),
            },
            None => Noise::mean(),
        };
        let trace = model.forward(tape, b, j, &mut noise)?;
        model.objective(tape, b, &trace, j.label, weights)
    })
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut model = build_variant::<f64>(&tiny(Variant::Cdnet), seed).unwrap();
        random_point(&mut model, seed, 0.5);
        let err = check(&model, &tiny_journey(seed), WEIGHTS, None);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn imputation_loss_gradient_reaches_prefill_and_gru() {
    let only_imputation = LossWeights {
        prediction: 0.0,
        imputation: 1.0,
        masked_mse: 0.0,
    };
    let mut model = build_variant::<f64>(&tiny(Variant::CdnetBeta), 11).unwrap();
    random_point(&mut model, 11, 0.5);
    let err = check(&model, &tiny_journey(11), only_imputation, None);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_variant_passes_gradcheck_with_sampled_noise() {
    for variant in Variant::ALL {
        let mut model = build_variant::<f64>(&tiny(variant), 3).unwrap();
        random_point(&mut model, 3, 0.3);
        let weights = LossWeights {
            masked_mse: 0.5,
            ..WEIGHTS
        };
        let err = check(&model, &tiny_journey(9), weights, Some(17));
        assert!(err < 1e-4, "{variant}: {err}");
    }
}

#[test]
fn gradients_finite_at_initialisation() {
    let cfg = ModelConfig {
        n_features: 3,
        d_emb: 6,
        hidden: 8,
        d_head: 8,
        components: 3,
        d_z: 8,
        pred_components: 10,
        ..ModelConfig::default()
    };
    let data = SynthConfig {
        n_journeys: 100,
        n_features: 3,
        steps: 6,
        seed: 1,
        ..SynthConfig::default()
    }
    .uniform_rate(0.5);
    let (ds, _) = synth_generate(&data).unwrap();
    for seed in 0..100u64 {
        let model = build_variant::<f64>(&cfg, seed).unwrap();
        let mut xi = stream(seed, Stream::Xi);
        let mut eta = stream(seed, Stream::Eta);
        let mut noise = Noise {
            xi: Some(&mut xi),
            eta: Some(&mut eta),
        };
        let (loss, grads) = model
            .journey_gradients(&ds.journeys[seed as usize], WEIGHTS, &mut noise)
            .unwrap();
        assert!(loss.is_finite(), "seed {seed}");
        assert!(grads.iter().all(|g| g.is_finite()), "seed {seed}");
    }
}

#[test]
fn zero_lambda_leaves_projection_untouched() {
    let model = build_variant::<f64>(&tiny(Variant::Cdnet), 2).unwrap();
    let j = Journey::new("p", 2, 3, vec![Some(0.4), None, Some(-1.0), None, Some(0.2), None], 1).unwrap();
    let proj = model.params().id("imputer.w_proj").unwrap();
    let head = model.params().id("imputer.mdn.w_mu").unwrap();
    let grads = |imputation| {
        let w = LossWeights { imputation, ..WEIGHTS };
        model.journey_gradients(&j, w, &mut Noise::mean()).unwrap().1
    };
    let (with, without) = (grads(1.0), grads(0.0));
    let idx = |id| model.params().ids().position(|x| x == id).unwrap();
    assert!(without[idx(proj)].data().iter().all(|&g| g == 0.0));
    assert!(with[idx(proj)].data().iter().any(|&g| g != 0.0));
    assert!(without[idx(head)].data().iter().any(|&g| g != 0.0));
    assert_ne!(with[idx(head)], without[idx(head)]);
}

#[test]
fn combined_equals_observed_when_fully_observed() {
    let cells: Vec<Option<f64>> = (0..6).map(|k| Some(k as f64 * 0.3 - 0.5)).collect();
    let j = Journey::new("p", 2, 3, cells, 1).unwrap();
    for variant in Variant::ALL {
        let model = build_variant::<f64>(&tiny(variant), 4).unwrap();
        let tape = Tape::new();
        let b = model.params().bind(&tape);
        let trace = model.forward(&tape, &b, &j, &mut Noise::mean()).unwrap();
        assert_eq!(tape.value(trace.combined).data(), j.values(), "{variant}");
    }
}

#[test]
fn variant_structure() {
    let alpha = build_variant::<f64>(&tiny(Variant::CdnetAlpha), 0).unwrap();
    assert!(alpha.params().iter().all(|(name, _)| !name.contains("sigma")));
    assert!(alpha.params().iter().all(|(name, _)| !name.starts_with("ran.")));

    let j = tiny_journey(1);
    let beta = build_variant::<f64>(&tiny(Variant::CdnetBeta), 0).unwrap();
    assert!(beta.params().iter().all(|(name, _)| !name.starts_with("ran.")));
    let imp = beta.impute(&j, None).unwrap();
    assert!(imp.ran.is_none());
    assert!(imp.mixed_var.is_some());
    assert!(matches!(beta.ran_output(&j), Err(Error::Capability { .. })));
    assert!(matches!(alpha.class_mixture(&j), Err(Error::Capability { .. })));

    let cdnet = build_variant::<f64>(&tiny(Variant::Cdnet), 0).unwrap();
    let ran = cdnet.ran_output(&j).unwrap();
    for t in 0..3 {
        let s: f64 = ran.gamma.column_values(t).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert!(ran.x_ran.data().iter().all(|&v| v >= 0.0));

    assert!("cdnet_gamma".parse::<Variant>().is_err());
}

#[test]
fn mean_baseline_fill_is_training_mean() {
    let a = Journey::new("a", 1, 2, vec![Some(1.0), None], 0).unwrap();
    let b = Journey::new("b", 1, 2, vec![Some(3.0), Some(5.0)], 1).unwrap();
    let ds = cdnet::data::Dataset::new(vec![a.clone(), b], vec!["x".into()]).unwrap();
    let cfg = ModelConfig {
        variant: Variant::MeanBaseline,
        n_features: 1,
        ..tiny(Variant::MeanBaseline)
    };
    let mut model = build_variant::<f64>(&cfg, 0).unwrap();
    model.fit_fill(&ds).unwrap();
    let tape = Tape::new();
    let bound = model.params().bind(&tape);
    let trace = model.forward(&tape, &bound, &a, &mut Noise::mean()).unwrap();
    assert_eq!(tape.value(trace.combined).data(), &[1.0, 3.0]);
}

#[test]
fn mean_path_is_bitwise_repeatable() {
    let model = build_variant::<f64>(&tiny(Variant::Cdnet), 6).unwrap();
    let j = tiny_journey(6);
    let a = model.predict(&j).unwrap();
    let b = model.predict(&j).unwrap();
    assert_eq!(a.y_hat[0].to_bits(), b.y_hat[0].to_bits());
    assert_eq!(a.y_hat[1].to_bits(), b.y_hat[1].to_bits());
}

#[test]
fn single_precision_model_runs() {
    let model = build_variant::<f32>(&tiny(Variant::Cdnet), 0).unwrap();
    let p = model.predict(&tiny_journey(0)).unwrap();
    assert!((p.y_hat[0] + p.y_hat[1] - 1.0).abs() < 1e-6);
}
