use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use nielab::attention::{embed_tokens, write_attention_dump, AttentionConfig, MaskSpec};
use nielab::datagen::{
    gen_ie_spirals_with, gen_lorenz, gen_lotka_volterra, read_dataset, write_dataset, Dataset,
    SpiralConfig,
};
use nielab::nie::NieConfig;
use nielab::nn::Activation;
use nielab::quadrature::TimeGrid;
use nielab::solver::{
    identity, solve_ie, Family, FnKernel, FreeFunction, IEProblem, McConfig, Metric, SolverConfig,
};
use nielab::training::{
    benchmark_walltime, evaluate_shifted_init, evaluate_window, hold_last, load_model, save_model,
    train_model, InitProtocol, Model, ModelConfig, Normalizer, Placement, PreparedData, TrainConfig,
};

use crate::args::*;
use crate::svg::{self, Series};

/// A command-line mistake; exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates the output directory and writes the resolved config snapshot.
fn start(run: &RunArgs, snapshot: &Map<String, Value>) -> Result<()> {
    if run.workers != 1 {
        return Err(usage(format!(
            "--workers {}: only single-worker execution is implemented",
            run.workers
        )));
    }
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    write_json(&run.out.join("config.json"), snapshot)
}

fn generate_dataset(
    system: System,
    n_curves: usize,
    seed: u64,
    spiral_points: usize,
    spiral_samples: usize,
) -> Result<Dataset> {
    let ds = match system {
        System::LotkaVolterra => gen_lotka_volterra(n_curves, seed)?,
        System::Lorenz => gen_lorenz(n_curves, seed)?,
        System::IeSpirals => gen_ie_spirals_with(
            n_curves,
            seed,
            &SpiralConfig {
                n_points: spiral_points,
                n_samples: spiral_samples,
                ..SpiralConfig::default()
            },
        )?,
    };
    Ok(ds)
}

fn load_data(data: &DataArgs, seed: u64) -> Result<Dataset> {
    if data.path.is_empty() {
        generate_dataset(data.system, data.n_curves, seed, data.spiral_points, data.spiral_samples)
    } else {
        read_dataset(&data.path).with_context(|| format!("reading dataset {}", data.path))
    }
}

fn widths(s: &str, key: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| usage(format!("{key}: `{p}` is not a layer width")))
        })
        .collect()
}

fn activation(a: Act) -> Activation {
    match a {
        Act::Identity => Activation::Identity,
        Act::Tanh => Activation::Tanh,
        Act::Relu => Activation::Relu,
    }
}

fn model_config(m: &ModelArgs, ds: &Dataset, seed: u64) -> Result<ModelConfig> {
    Ok(match m.kind {
        ModelKind::Nie => {
            let span = ds.times.last() - ds.times.first();
            ModelConfig::Nie(NieConfig {
                dim: ds.dim(),
                kernel_hidden: widths(&m.kernel_hidden, "nie.kernel_hidden")?,
                nonlinearity_hidden: widths(&m.nonlinearity_hidden, "nie.nonlinearity_hidden")?,
                latent_dim: (m.latent_dim > 0).then_some(m.latent_dim),
                activation: activation(m.activation),
                time_scale: if m.time_scale > 0.0 { m.time_scale } else { 1.0 / span },
                volterra: m.volterra,
                output_scale: m.output_scale,
                seed,
            })
        }
        ModelKind::Anie => ModelConfig::Anie(AttentionConfig {
            dim: ds.dim(),
            coord_dims: ds.lattice.as_ref().map_or(0, |l| l.ndim()),
            d_model: m.d_model,
            n_heads: m.heads,
            embed_activation: activation(m.activation),
            mask: mask(m.mask),
            blocks: m.blocks,
            output_scale: m.output_scale,
            seed,
        }),
    })
}

fn mask(m: Mask) -> MaskSpec {
    match m {
        Mask::None => MaskSpec::None,
        Mask::Causal => MaskSpec::CausalInTime,
    }
}

fn solver_config(s: &SolverArgs, seed: u64) -> SolverConfig<f64> {
    SolverConfig {
        max_iter: s.max_iter,
        tolerance: s.tolerance,
        mc: McConfig {
            n_samples: s.n_samples,
            seed,
        },
        metric: match s.metric {
            MetricArg::RelativeL2 => Metric::RelativeL2,
            MetricArg::MaxAbs => Metric::MaxAbs,
        },
    }
}

fn train_config(t: &TrainingArgs, solver: SolverConfig<f64>, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: t.lr,
        epochs: t.epochs,
        batch_size: t.batch_size,
        l2_weight: t.l2,
        seed,
        solver,
        init_protocol: match t.init {
            Protocol::FirstHalf => InitProtocol::FirstHalf,
            Protocol::FirstK => InitProtocol::FirstK { k: t.init_k },
            Protocol::SinglePoint => InitProtocol::SinglePoint,
        },
        clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
        holdout_fraction: t.holdout,
        normalize: t.normalize,
        resample_quadrature: t.resample,
    }
}

/// Catches bad numbers before they reach the numeric code, so they report as
/// usage errors.
fn check_train_config(cfg: &TrainConfig) -> Result<()> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    cfg.solver.validate().map_err(|e| usage(e.to_string()))
}

pub fn generate(a: &GenerateArgs, snapshot: &Map<String, Value>) -> Result<()> {
    start(&a.run, snapshot)?;
    let ds = generate_dataset(a.system, a.n_curves, a.run.seed, a.spiral_points, a.spiral_samples)?;
    write_dataset(&ds, &a.run.out)?;
    let metrics = json!({
        "generator": ds.manifest.generator,
        "n_curves": ds.n_curves(),
        "n_time": ds.n_time(),
        "dim": ds.dim(),
        "channels": ds.manifest.channels,
    });
    write_json(&a.run.out.join("metrics.json"), &metrics)?;
    if a.run.svg {
        let t = ds.times.points();
        let first = ds.curve(0);
        let d = ds.dim();
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|c| first.values.data().iter().skip(c).step_by(d * ds.n_space()).copied().collect())
            .collect();
        let series: Vec<Series> = cols
            .iter()
            .zip(&ds.manifest.channels)
            .map(|(y, name)| Series { name, x: t, y, dashed: false })
            .collect();
        svg::line_plot(&a.run.out.join("curve_0.svg"), "curve 0", &series)?;
    }
    println!(
        "wrote {} curves of {} to {}",
        ds.n_curves(),
        ds.manifest.generator,
        a.run.out.display()
    );
    Ok(())
}

pub fn solve(a: &SolveArgs, snapshot: &Map<String, Value>) -> Result<()> {
    start(&a.run, snapshot)?;
    let cfg = SolverConfig {
        max_iter: a.max_iter,
        tolerance: a.tolerance,
        mc: McConfig {
            n_samples: a.n_samples,
            seed: a.run.seed,
        },
        metric: Metric::RelativeL2,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let times = TimeGrid::linspace(0.0, 1.0, a.n_points).map_err(|e| usage(e.to_string()))?;
    let (kernel, free, family): (FnKernel<f64>, FreeFunction<f64>, _) = match a.demo {
        Demo::Exponential => (
            FnKernel::scalar(1, |_, _| 1.0),
            FreeFunction::analytic(|_| vec![1.0]),
            Family::Volterra { t0: 0.0 },
        ),
        Demo::Fredholm => (
            FnKernel::scalar(1, |_, _| 0.5),
            FreeFunction::analytic(|t| vec![t]),
            Family::Fredholm { a: 0.0, b: 1.0 },
        ),
    };
    let exact = |t: f64| match a.demo {
        Demo::Exponential => t.exp(),
        Demo::Fredholm => t + 0.5,
    };
    let problem = IEProblem::new(free, &kernel, &identity, family);
    let sol = solve_ie(&problem, &problem.default_init(&times)?, &cfg)?;
    let t = times.points();
    let y = sol.values.data();
    let ex: Vec<f64> = t.iter().map(|&t| exact(t)).collect();
    let max_abs = y.iter().zip(&ex).map(|(y, e)| (y - e).abs()).fold(0.0, f64::max);
    let max_rel = y.iter().zip(&ex).map(|(y, e)| (y - e).abs() / e.abs()).fold(0.0, f64::max);

    let curves = a.run.out.join("curves");
    fs::create_dir_all(&curves)?;
    let mut csv = String::from("t,y,exact\n");
    for ((t, y), e) in t.iter().zip(y).zip(&ex) {
        csv += &format!("{t:.16e},{y:.16e},{e:.16e}\n");
    }
    fs::write(curves.join("solution.csv"), csv)?;
    let metrics = json!({
        "demo": format!("{:?}", a.demo).to_lowercase(),
        "max_abs_error": max_abs,
        "max_rel_error": max_rel,
        "iterations_used": sol.iterations_used,
        "converged": sol.converged,
        "residuals": sol.residuals,
    });
    write_json(&a.run.out.join("metrics.json"), &metrics)?;
    if a.run.svg {
        svg::line_plot(
            &a.run.out.join("solution.svg"),
            "solution vs closed form",
            &[
                Series { name: "solver", x: t, y, dashed: false },
                Series { name: "exact", x: t, y: &ex, dashed: true },
            ],
        )?;
    }
    println!("max relative error vs closed form: {max_rel:.6e} (max abs {max_abs:.6e})");
    Ok(())
}

/// Predictions of the first curves under a training protocol, dataset units.
fn write_predictions(
    dir: &Path,
    model: &Model,
    ds: &Dataset,
    norm: &Normalizer,
    cfg: &TrainConfig,
    count: usize,
    svg_plots: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let idx: Vec<usize> = (0..count.min(ds.n_curves())).collect();
    let data = PreparedData::new(ds, &idx, norm)?;
    let observed = cfg.init_protocol.observed(ds.n_time())?;
    let free = hold_last(&data.values, observed, data.rows_per_time);
    let prep = model.prepare(&ds.times, ds.lattice.as_ref(), cfg.solver.mc)?;
    let pred = norm.invert(&model.predict(&prep, &free, &cfg.solver)?);
    let obs = norm.invert(&data.values);
    let d = ds.dim();
    let row = ds.n_space() * d;
    let names: Vec<String> = if ds.n_space() == 1 {
        ds.manifest.channels.clone()
    } else {
        (0..ds.n_space())
            .flat_map(|j| ds.manifest.channels.iter().map(move |c| format!("{c}@{j}")))
            .collect()
    };
    let t = ds.times.points();
    for &k in &idx {
        let (p, o) = (pred.index_axis0(k), obs.index_axis0(k));
        let mut csv = String::from("t,observed");
        for n in &names {
            csv += &format!(",obs_{n}");
        }
        for n in &names {
            csv += &format!(",pred_{n}");
        }
        csv.push('\n');
        for (i, ti) in t.iter().enumerate() {
            csv += &format!("{ti:.16e},{}", (i < observed) as u8);
            for v in &o.data()[i * row..(i + 1) * row] {
                csv += &format!(",{v:.16e}");
            }
            for v in &p.data()[i * row..(i + 1) * row] {
                csv += &format!(",{v:.16e}");
            }
            csv.push('\n');
        }
        fs::write(dir.join(format!("curve_{k}.csv")), csv)?;
        if svg_plots && ds.n_space() == 1 {
            let col = |x: &[f64], c: usize| -> Vec<f64> { x.iter().skip(c).step_by(d).copied().collect() };
            let cols: Vec<(String, Vec<f64>, bool)> = (0..d)
                .flat_map(|c| {
                    [
                        (format!("obs {}", names[c]), col(o.data(), c), false),
                        (format!("pred {}", names[c]), col(p.data(), c), true),
                    ]
                })
                .collect();
            let series: Vec<Series> = cols
                .iter()
                .map(|(n, y, dashed)| Series { name: n, x: t, y, dashed: *dashed })
                .collect();
            svg::line_plot(&dir.join(format!("curve_{k}.svg")), &format!("curve {k}"), &series)?;
        }
    }
    Ok(())
}

pub fn train(a: &TrainArgs, snapshot: &Map<String, Value>) -> Result<()> {
    start(&a.run, snapshot)?;
    let seed = a.run.seed;
    let ds = load_data(&a.data, seed)?;
    let model_cfg = model_config(&a.model, &ds, seed)?;
    let cfg = train_config(&a.train, solver_config(&a.solver, seed), seed);
    check_train_config(&cfg)?;
    let model = Model::new(&model_cfg).map_err(|e| usage(e.to_string()))?;
    let num_params = model.num_params();
    eprintln!("training {num_params} parameters on {} curves", ds.n_curves());
    let out = train_model(model, &ds, &cfg)?;
    save_model(a.run.out.join("model.ckpt"), &out.model, &out.normalizer)?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in out.loss_history.iter().enumerate() {
        loss += &format!("{e},{l:.16e}\n");
    }
    fs::write(a.run.out.join("loss.csv"), loss)?;
    write_predictions(
        &a.run.out.join("curves"),
        &out.model,
        &ds,
        &out.normalizer,
        &cfg,
        5,
        a.run.svg,
    )?;
    let metrics = json!({
        "num_params": num_params,
        "initial_train_mse": out.initial_train_mse,
        "final_train_mse": out.final_train_mse,
        "train": out.train,
        "holdout": out.holdout,
        "loss_history": out.loss_history,
    });
    write_json(&a.run.out.join("metrics.json"), &metrics)?;
    if a.run.svg {
        let x: Vec<f64> = (0..out.loss_history.len()).map(|e| e as f64).collect();
        svg::line_plot(
            &a.run.out.join("loss.svg"),
            "training loss",
            &[Series { name: "loss", x: &x, y: &out.loss_history, dashed: false }],
        )?;
    }
    println!(
        "final/initial train MSE {:.4e} / {:.4e}; train R² {:.4}",
        out.final_train_mse, out.initial_train_mse, out.train.r_squared
    );
    Ok(())
}

pub fn eval(a: &EvalArgs, snapshot: &Map<String, Value>) -> Result<()> {
    start(&a.run, snapshot)?;
    if !a.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let (model, norm) = load_model(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_data(&a.data, a.run.seed)?;
    let solver = solver_config(&a.solver, a.run.seed);
    solver.validate().map_err(|e| usage(e.to_string()))?;
    let placement = match a.placement {
        PlacementArg::Rebased => Placement::Rebased,
        PlacementArg::Absolute => Placement::Absolute,
    };
    let report = match a.protocol {
        EvalProtocol::Shifted => evaluate_shifted_init(&model, &ds, a.k, &norm, &solver, placement),
        EvalProtocol::FirstHalf => {
            evaluate_window(&model, &ds, &norm, &solver, 0, ds.n_time() / 2, placement)
        }
        EvalProtocol::SinglePoint => evaluate_window(&model, &ds, &norm, &solver, 0, 1, placement),
    }
    .map_err(|e| match e {
        nielab::Error::InvalidArgument(m) => usage(m),
        e => e.into(),
    })?;
    let curves = a.run.out.join("curves");
    fs::create_dir_all(&curves)?;
    let mut csv = String::from("point,abs_error\n");
    for (i, e) in report.per_point_abs_error.iter().enumerate() {
        csv += &format!("{i},{e:.16e}\n");
    }
    fs::write(curves.join("per_point_error.csv"), csv)?;
    write_json(&a.run.out.join("metrics.json"), &report)?;
    if a.run.svg {
        let x: Vec<f64> = (0..report.per_point_abs_error.len()).map(|i| i as f64).collect();
        svg::line_plot(
            &a.run.out.join("per_point_error.svg"),
            "absolute error per predicted point",
            &[Series { name: "error", x: &x, y: &report.per_point_abs_error, dashed: false }],
        )?;
    }
    println!(
        "R² {:.4} (per-curve mean {:.4} ± {:.4}), MSE {:.4e}",
        report.r_squared, report.r_squared_mean, report.r_squared_sd, report.mse
    );
    Ok(())
}

pub fn bench(a: &BenchArgs, snapshot: &Map<String, Value>) -> Result<()> {
    start(&a.run, snapshot)?;
    let seed = a.run.seed;
    let ds = load_data(&a.data, seed)?;
    let model_cfg = model_config(&a.model, &ds, seed)?;
    // a fixed iteration count: early stopping would hide the cost of max_iter
    let solver = SolverConfig {
        tolerance: 0.0,
        ..solver_config(&a.solver, seed)
    };
    let cfg = train_config(&a.train, solver, seed);
    check_train_config(&cfg)?;
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let base = benchmark_walltime(&model_cfg, &ds, &cfg, a.repeats)?;
    let mut metrics = json!({
        "model": format!("{:?}", a.model.kind).to_lowercase(),
        "unit": "seconds per training iteration",
        "batch_size": cfg.batch_size.min(ds.n_curves()),
        "base": base,
    });
    println!(
        "max_iter {}: {:.4e} ± {:.4e} s/iteration over {} repeats",
        base.max_iter, base.mean, base.sd, a.repeats
    );
    if a.doubling {
        let doubled_cfg = TrainConfig {
            solver: SolverConfig {
                max_iter: 2 * cfg.solver.max_iter,
                ..cfg.solver
            },
            ..cfg.clone()
        };
        let doubled = benchmark_walltime(&model_cfg, &ds, &doubled_cfg, a.repeats)?;
        let growth = doubled.mean / base.mean;
        println!(
            "max_iter {}: {:.4e} ± {:.4e} s/iteration; growth factor {growth:.3}",
            doubled.max_iter, doubled.mean, doubled.sd
        );
        metrics["doubled"] = serde_json::to_value(&doubled)?;
        metrics["growth_factor"] = json!(growth);
    }
    write_json(&a.run.out.join("metrics.json"), &metrics)?;
    Ok(())
}

pub fn attn_dump(a: &AttnDumpArgs, snapshot: &Map<String, Value>) -> Result<()> {
    start(&a.run, snapshot)?;
    let ds = load_data(&a.data, a.run.seed)?;
    let (model, norm) = if a.checkpoint.is_empty() {
        if a.model.kind != ModelKind::Anie {
            return Err(usage("attn-dump needs --model anie"));
        }
        let cfg = model_config(&a.model, &ds, a.run.seed)?;
        (Model::new(&cfg).map_err(|e| usage(e.to_string()))?, Normalizer::fit(&ds.trajectories))
    } else {
        load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint))?
    };
    let Model::Anie(anie) = &model else {
        return Err(usage("attention weights exist only for ANIE models"));
    };
    if a.curve >= ds.n_curves() {
        return Err(usage(format!("--curve {} but the dataset has {} curves", a.curve, ds.n_curves())));
    }
    let mut curve = ds.curve(a.curve);
    curve.values = norm.apply(&curve.values);
    let tb = embed_tokens(&curve)?;
    let mask = anie.config.mask;
    anie.attention_integral(&tb, mask)?;
    let weights = anie.export_attention(&tb, mask)?;
    let dir = a.run.out.join("attn");
    write_attention_dump(&dir, &weights, &tb.layout)?;
    let (h, l) = (weights.shape()[0], weights.shape()[1]);
    if a.run.svg {
        for i in 0..h {
            let w = weights.index_axis0(i);
            svg::heatmap(&dir.join(format!("head_{i}.svg")), &format!("head {i}"), w.data(), l)?;
        }
    }
    let metrics = json!({
        "curve": a.curve,
        "heads": h,
        "tokens": l,
        "mask": mask,
    });
    write_json(&a.run.out.join("metrics.json"), &metrics)?;
    println!("wrote {h} heads of {l} x {l} weights to {}", dir.display());
    Ok(())
}
