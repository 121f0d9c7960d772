use nielab::attention::AttentionConfig;
use nielab::datagen::{gen_ie_spirals_with, gen_lotka_volterra, SpiralConfig};
use nielab::nie::NieConfig;
use nielab::solver::{McConfig, SolverConfig};
use nielab::training::{
    evaluate_shifted_init, report, train_model, InitProtocol, Model, ModelConfig, Normalizer,
    Placement, TrainConfig,
};

fn small_nie() -> ModelConfig {
    ModelConfig::Nie(NieConfig {
        kernel_hidden: vec![8],
        nonlinearity_hidden: vec![8],
        time_scale: 1.0 / 15.0,
        ..NieConfig::default()
    })
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-2,
        solver: SolverConfig {
            mc: McConfig { n_samples: 10, seed: 0 },
            ..SolverConfig::training()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn l2_penalty_shrinks_the_weights() {
    let ds = gen_lotka_volterra(5, 3).unwrap();
    let model = Model::new(&small_nie()).unwrap();
    let start = model.store().l2_norm();
    let plain = train_model(model.clone(), &ds, &quick(5)).unwrap();
    let decayed = train_model(
        model,
        &ds,
        &TrainConfig {
            l2_weight: 5.0,
            ..quick(5)
        },
    )
    .unwrap();
    let (p, d) = (plain.model.store().l2_norm(), decayed.model.store().l2_norm());
    assert!(d < start && d < p, "start {start} plain {p} decayed {d}");
}

#[test]
fn training_reduces_the_loss_on_a_tiny_problem() {
    let ds = gen_lotka_volterra(5, 1).unwrap();
    let out = train_model(Model::new(&small_nie()).unwrap(), &ds, &quick(15)).unwrap();
    assert_eq!(out.loss_history.len(), 15);
    assert!(out.final_train_mse < out.initial_train_mse);
    assert!(out.holdout.is_some());
    assert!(out.loss_history.iter().all(|l| l.is_finite()));
}

#[test]
fn anie_trains_with_a_prefix_protocol() {
    let ds = gen_ie_spirals_with(
        4,
        0,
        &SpiralConfig {
            n_points: 30,
            n_samples: 200,
            ..SpiralConfig::default()
        },
    )
    .unwrap();
    let cfg = ModelConfig::Anie(AttentionConfig {
        d_model: 8,
        n_heads: 2,
        ..AttentionConfig::default()
    });
    let tc = TrainConfig {
        init_protocol: InitProtocol::FirstK { k: 10 },
        holdout_fraction: 0.0,
        ..quick(3)
    };
    let out = train_model(Model::new(&cfg).unwrap(), &ds, &tc).unwrap();
    assert!(out.holdout.is_none());
    for placement in [Placement::Rebased, Placement::Absolute] {
        let r = evaluate_shifted_init(&out.model, &ds, 10, &out.normalizer, &tc.solver, placement).unwrap();
        assert_eq!(r.per_point_abs_error.len(), 10);
        assert!(r.r_squared.is_finite());
    }
}

#[test]
fn replaying_ground_truth_scores_one_and_the_mean_scores_zero() {
    let ds = gen_lotka_volterra(3, 0).unwrap();
    let obs = &ds.trajectories;
    assert_eq!(report(obs, obs).unwrap().r_squared, 1.0);
    let norm = Normalizer::fit(obs);
    let n = obs.numel() / 2;
    let mean = nielab::DTensor::new(
        obs.shape().to_vec(),
        (0..n).flat_map(|_| norm.mean.clone()).collect(),
    )
    .unwrap();
    assert!(report(&mean, obs).unwrap().r_squared.abs() < 1e-12);
}
