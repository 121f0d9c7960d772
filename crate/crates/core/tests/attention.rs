use nielab::attention::{embed_tokens, AttentionConfig, AttentionModel, MaskSpec, TokenLayout};
use nielab::nn::Activation;
use nielab::quadrature::{GridFunction, TimeGrid};
use nielab::solver::{identity, solve_ie, Family, FnKernel, FreeFunction, IEProblem, SolverConfig};
use nielab::tensor::{Record, Tensor};

/// One head, width 1, identity embedding of `y`, uniform weights, value 0.5:
/// the attention integral is `0.5 * mean_s y(s)`.
fn averaging_model() -> AttentionModel<f64> {
    let mut m = AttentionModel::<f64>::new(AttentionConfig {
        dim: 1,
        d_model: 1,
        n_heads: 1,
        embed_activation: Activation::Identity,
        ..AttentionConfig::default()
    })
    .unwrap();
    let set = |m: &mut AttentionModel<f64>, name: &str, v: Vec<f64>| {
        let id = m.store.find(name).unwrap();
        let shape = m.store.get(id).shape().to_vec();
        *m.store.get_mut(id) = Tensor::new(shape, v).unwrap();
    };
    set(&mut m, "block0.embed.weight", vec![1.0, 0.0]);
    set(&mut m, "block0.embed.bias", vec![0.0]);
    set(&mut m, "block0.query.weight", vec![0.0]);
    set(&mut m, "block0.key.weight", vec![0.0]);
    set(&mut m, "block0.value.weight", vec![0.5]);
    set(&mut m, "block0.output.weight", vec![1.0]);
    m
}

#[test]
fn anie_reduces_to_a_fredholm_solve() {
    let times = TimeGrid::linspace(0.0, 1.0, 3).unwrap();
    let free = GridFunction::from_fn(times.clone(), 1, |t| vec![t]).unwrap();
    let cfg = SolverConfig {
        max_iter: 60,
        tolerance: 0.0,
        ..SolverConfig::verification(4000, 2)
    };
    let anie = averaging_model().solve_anie(&free, MaskSpec::None, &cfg).unwrap();
    // discrete fixed point c = 0.5 * (mean(t) + c) = 0.5
    for (t, y) in times.points().iter().zip(anie.values.data()) {
        assert!((y - (t + 0.5)).abs() < 1e-12, "t={t} y={y}");
    }
    let k = FnKernel::scalar(1, |_: f64, _| 0.5);
    let p = IEProblem::new(
        FreeFunction::analytic(|t: f64| vec![t]),
        &k,
        &identity,
        Family::Fredholm { a: 0.0, b: 1.0 },
    );
    let ie = solve_ie(&p, &free, &cfg).unwrap();
    let sigma = 2.0 * 0.5 * (1.0f64 / 12.0).sqrt() / 4000f64.sqrt();
    for (a, b) in anie.values.data().iter().zip(ie.values.data()) {
        assert!((a - b).abs() < 3.0 * sigma, "{a} vs {b}");
    }
}

#[test]
fn unmasked_attention_is_permutation_equivariant() {
    let model = AttentionModel::<f64>::new(AttentionConfig {
        d_model: 12,
        n_heads: 3,
        seed: 4,
        ..AttentionConfig::default()
    })
    .unwrap();
    let n = 7;
    let y = GridFunction::from_fn(TimeGrid::linspace(0.0, 3.0, n).unwrap(), 2, |t: f64| {
        vec![t.sin(), (2.0 * t).cos()]
    })
    .unwrap();
    let tb = embed_tokens(&y).unwrap();
    let w = tb.tokens.shape()[2];
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let mut permuted = Vec::new();
    for &p in &perm {
        permuted.extend_from_slice(&tb.tokens.data()[p * w..(p + 1) * w]);
    }
    let run = |tokens: Tensor<f64>| {
        let mut rec = Record::with_params(&model.store);
        let t = rec.constant(tokens);
        let out = model.attention_integral_recorded(&mut rec, t, None, 0).unwrap();
        rec.value(out).clone()
    };
    let base = run(tb.tokens.clone());
    let moved = run(Tensor::new(vec![1, n, w], permuted).unwrap());
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..2 {
            let (a, b) = (moved.get(&[0, i, c]), base.get(&[0, p, c]));
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn causal_solve_ignores_the_future() {
    let model = AttentionModel::<f64>::new(AttentionConfig {
        d_model: 8,
        n_heads: 2,
        output_scale: 1.0,
        seed: 9,
        ..AttentionConfig::default()
    })
    .unwrap();
    let times = TimeGrid::linspace(0.0, 1.0, 12).unwrap();
    let free = GridFunction::from_fn(times.clone(), 2, |t| vec![t, 1.0 - t * t]).unwrap();
    let mut bumped = free.clone();
    for i in 6..12 {
        bumped.values.set(&[i, 0], 40.0);
        bumped.values.set(&[i, 1], -3.0);
    }
    let cfg = SolverConfig {
        max_iter: 4,
        tolerance: 0.0,
        ..SolverConfig::training()
    };
    let a = model.solve_anie(&free, MaskSpec::CausalInTime, &cfg).unwrap();
    let b = model.solve_anie(&bumped, MaskSpec::CausalInTime, &cfg).unwrap();
    assert_eq!(a.values.data()[..12], b.values.data()[..12]);
    assert_ne!(a.values.data()[12..], b.values.data()[12..]);
    let c = model.solve_anie(&bumped, MaskSpec::None, &cfg).unwrap();
    assert_ne!(a.values.data()[..12], c.values.data()[..12]);
}

#[test]
fn lattice_tokens_are_time_major() {
    use nielab::quadrature::{Lattice, LatticeAxis};
    let lat = Lattice::new(vec![LatticeAxis { lo: 0.0, hi: 1.0, count: 3 }]).unwrap();
    let layout = TokenLayout::new(TimeGrid::linspace(0.0, 1.0, 2).unwrap(), Some(lat));
    assert_eq!(layout.len(), 6);
    assert_eq!(layout.position(4), (1, 1));
    assert_eq!(layout.coords(4), vec![0.5, 1.0]);
    let mask = MaskSpec::CausalInTime.tensor(&layout);
    // token 1 (time 0) cannot see token 3 (time 1); token 3 sees token 2
    assert_eq!(mask.get(&[0, 1, 3]), f64::NEG_INFINITY);
    assert_eq!(mask.get(&[0, 3, 2]), 0.0);
}
