use std::sync::Arc;

use nielab::attention::{AttentionConfig, AttentionModel, MaskSpec, TokenLayout};
use nielab::nie::{NieConfig, NieModel};
use nielab::quadrature::TimeGrid;
use nielab::solver::{Family, McConfig, SolverConfig, StepPlan};
use nielab::tensor::{grad_check, ParamId, ParamStore, Record, Tensor, Var};
use nielab::training::mse_loss_recorded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-6;
const SOLVE_TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Stores parameters of the given shapes and checks `sum(w * op(params))`
/// for a fixed random weighting `w`.
fn check_op(shapes: &[&[usize]], op: impl Fn(&mut Record<'_, f64>, &[Var]) -> nielab::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random(s, &mut rng, 0.2, 1.3)))
        .collect();
    let out_shape = {
        let mut rec = Record::with_params(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| rec.param(id)).collect();
        let out = op(&mut rec, &vars).unwrap();
        rec.shape(out).to_vec()
    };
    let w = random(&out_shape, &mut rng, -1.0, 1.0);
    let err = grad_check(
        &store,
        |rec| {
            let vars: Vec<Var> = ids.iter().map(|&id| rec.param(id)).collect();
            let out = op(rec, &vars)?;
            let wv = rec.constant(w.clone());
            let prod = rec.mul(out, wv)?;
            rec.sum_all(prod)
        },
        1e-6,
    )
    .unwrap();
    assert!(err < PRIMITIVE_TOL, "relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    check_op(&[&[2, 3], &[2, 3]], |r, v| r.add(v[0], v[1]));
    check_op(&[&[2, 3], &[2, 3]], |r, v| r.sub(v[0], v[1]));
    check_op(&[&[2, 3], &[2, 3]], |r, v| r.mul(v[0], v[1]));
    check_op(&[&[4]], |r, v| r.scale(v[0], -2.5));
    check_op(&[&[4]], |r, v| r.neg(v[0]));
    check_op(&[&[4]], |r, v| r.square(v[0]));
    check_op(&[&[4]], |r, v| r.tanh(v[0]));
    check_op(&[&[4]], |r, v| r.exp(v[0]));
    // inputs are positive, away from the kink
    check_op(&[&[4]], |r, v| r.relu(v[0]));
}

#[test]
fn broadcasting_ops() {
    check_op(&[&[3, 4], &[1, 4]], |r, v| r.add(v[0], v[1]));
    check_op(&[&[2, 3, 1], &[1, 1, 5]], |r, v| r.mul(v[0], v[1]));
    check_op(&[&[3, 1], &[3, 4]], |r, v| r.sub(v[0], v[1]));
}

#[test]
fn matmul_and_transpose() {
    check_op(&[&[3, 4], &[4, 2]], |r, v| r.matmul(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[1, 4, 5]], |r, v| r.matmul(v[0], v[1]));
    check_op(&[&[2, 3, 4]], |r, v| r.transpose(v[0]));
}

#[test]
fn reductions_and_softmax() {
    check_op(&[&[3, 4]], |r, v| r.sum(v[0], 0));
    check_op(&[&[3, 4]], |r, v| r.mean(v[0], 1));
    check_op(&[&[3, 4]], |r, v| r.sum_all(v[0]));
    check_op(&[&[3, 4]], |r, v| r.mean_all(v[0]));
    check_op(&[&[2, 3, 4]], |r, v| r.softmax(v[0]));
    check_op(&[&[2, 3]], |r, v| {
        let mask = Tensor::new(vec![1, 3], vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        let m = r.constant(mask);
        let s = r.add(v[0], m)?;
        r.softmax(s)
    });
}

#[test]
fn shape_ops() {
    check_op(&[&[2, 3], &[2, 2]], |r, v| r.concat(&[v[0], v[1]], 1));
    check_op(&[&[2, 5]], |r, v| r.slice(v[0], 1, 1, 4));
    check_op(&[&[2, 6]], |r, v| r.reshape(v[0], &[3, 2, 2]));
    let grid = TimeGrid::linspace(0.0, 1.0, 5).unwrap();
    let idx = Arc::new(grid.interp_index(&[0.1, 0.5, 0.93, 1.0]).unwrap());
    check_op(&[&[2, 5, 3]], move |r, v| r.interp(v[0], 1, idx.clone()));
}

fn nie_setup(volterra: bool) -> (NieModel<f64>, StepPlan<f64>, Tensor<f64>, Tensor<f64>) {
    let model = NieModel::<f64>::new(NieConfig {
        kernel_hidden: vec![8],
        nonlinearity_hidden: vec![6],
        volterra,
        output_scale: 1.0,
        seed: 3,
        ..NieConfig::default()
    });
    let times = TimeGrid::linspace(0.0, 1.0, 10).unwrap();
    let plan = StepPlan::new(&times, &model.family(&times), McConfig { n_samples: 16, seed: 5 }).unwrap();
    let pts = times.points();
    let free = Tensor::new(
        vec![1, 10, 2],
        pts.iter().flat_map(|&t| [t.sin(), 1.0 - t]).collect(),
    )
    .unwrap();
    let target = free.map(|v| 0.5 * v + 0.2);
    (model, plan, free, target)
}

fn two_iterations() -> SolverConfig<f64> {
    SolverConfig {
        max_iter: 2,
        tolerance: 0.0,
        ..SolverConfig::training()
    }
}

#[test]
fn nie_solve_gradient_matches_finite_differences() {
    for volterra in [false, true] {
        let (model, plan, free, target) = nie_setup(volterra);
        let err = grad_check(
            &model.store,
            |rec| {
                let f = rec.constant(free.clone());
                let out = model.solve_recorded(rec, &plan, f, &two_iterations())?;
                mse_loss_recorded(rec, out.output, &target)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < SOLVE_TOL, "volterra={volterra}: {err:e}");
    }
}

#[test]
fn anie_solve_gradient_matches_finite_differences() {
    for mask in [MaskSpec::None, MaskSpec::CausalInTime] {
        let model = AttentionModel::<f64>::new(AttentionConfig {
            dim: 2,
            d_model: 8,
            n_heads: 2,
            output_scale: 1.0,
            seed: 1,
            ..AttentionConfig::default()
        })
        .unwrap();
        let layout = TokenLayout::new(TimeGrid::linspace(0.0, 1.0, 10).unwrap(), None);
        let (_, _, free, target) = nie_setup(false);
        let err = grad_check(
            &model.store,
            |rec| {
                let f = rec.constant(free.clone());
                let out = model.solve_recorded(rec, &layout, f, f, mask, &two_iterations())?;
                mse_loss_recorded(rec, out.output, &target)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < SOLVE_TOL, "{mask:?}: {err:e}");
    }
}

#[test]
fn family_follows_the_config() {
    let times = TimeGrid::linspace(2.0, 3.0, 4).unwrap();
    let (vol, _, _, _) = nie_setup(true);
    assert_eq!(vol.family(&times), Family::Volterra { t0: 2.0 });
}
