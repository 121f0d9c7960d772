//! Fitting NIE and ANIE models to trajectory datasets.

mod adam;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{
    mean_sd, mse_loss, mse_loss_recorded, mse_values, r_squared, report, MetricsReport, Walltime,
};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionModel, TokenLayout};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nie::{NieConfig, NieModel};
use crate::quadrature::{Lattice, TimeGrid};
use crate::solver::{Family, McConfig, RecordedSolve, SolverConfig, StepPlan};
use crate::tensor::{load_checkpoint, save_checkpoint, Gradients, ParamStore, Record, Tensor, Var};

/// Which points of each curve the model is shown; the rest of the free
/// function holds the last observed value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitProtocol {
    #[default]
    FirstHalf,
    FirstK { k: usize },
    SinglePoint,
}

impl InitProtocol {
    /// Number of observed points on an `n`-point grid.
    pub fn observed(self, n: usize) -> Result<usize> {
        let k = match self {
            InitProtocol::FirstHalf => n / 2,
            InitProtocol::FirstK { k } => k,
            InitProtocol::SinglePoint => 1,
        };
        if k == 0 || k >= n {
            return Err(Error::InvalidArgument(format!(
                "cannot observe {k} of {n} points and still predict"
            )));
        }
        Ok(k)
    }
}

/// `[B, L, d]` values with every row from `from` onward replaced by row `from - 1`
/// of the same time slice; `rows_per_time` rows make one time point.
pub fn hold_last(values: &Tensor<f64>, from_time: usize, rows_per_time: usize) -> Tensor<f64> {
    let s = values.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let mut out = values.clone();
    let start = from_time * rows_per_time;
    let data = out.data_mut();
    for k in 0..b {
        let base = k * l * d;
        for r in start..l {
            let src = base + ((from_time - 1) * rows_per_time + r % rows_per_time) * d;
            let dst = base + r * d;
            for c in 0..d {
                data[dst + c] = data[src + c];
            }
        }
    }
    out
}

/// Per-channel affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Channel statistics of `values` (last axis = channels).
    pub fn fit(values: &Tensor<f64>) -> Self {
        let d = *values.shape().last().unwrap();
        let rows = (values.numel() / d) as f64;
        let mut mean = vec![0.0; d];
        for r in values.data().chunks(d) {
            for c in 0..d {
                mean[c] += r[c] / rows;
            }
        }
        let mut var = vec![0.0; d];
        for r in values.data().chunks(d) {
            for c in 0..d {
                var[c] += (r[c] - mean[c]).powi(2) / rows;
            }
        }
        let std = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, values: &Tensor<f64>) -> Tensor<f64> {
        self.map(values, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, values: &Tensor<f64>) -> Tensor<f64> {
        self.map(values, |x, m, s| x * s + m)
    }

    fn map(&self, values: &Tensor<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<f64> {
        let d = self.mean.len();
        let mut out = values.clone();
        for r in out.data_mut().chunks_mut(d) {
            for c in 0..d {
                r[c] = f(r[c], self.mean[c], self.std[c]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelConfig {
    Nie(NieConfig),
    Anie(AttentionConfig),
}

impl ModelConfig {
    pub fn seed(&self) -> u64 {
        match self {
            ModelConfig::Nie(c) => c.seed,
            ModelConfig::Anie(c) => c.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            ModelConfig::Nie(c) => c.seed = seed,
            ModelConfig::Anie(c) => c.seed = seed,
        }
        out
    }
}

/// Grid-dependent quadrature or token layout, built once per grid.
pub enum Prepared {
    Nie(StepPlan<f64>),
    Anie(TokenLayout<f64>),
}

#[derive(Clone, Debug)]
pub enum Model {
    Nie(NieModel<f64>),
    Anie(AttentionModel<f64>),
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(match config {
            ModelConfig::Nie(c) => Model::Nie(NieModel::new(c.clone())),
            ModelConfig::Anie(c) => Model::Anie(AttentionModel::new(c.clone())?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Nie(m) => ModelConfig::Nie(m.config.clone()),
            Model::Anie(m) => ModelConfig::Anie(m.config.clone()),
        }
    }

    pub fn store(&self) -> &ParamStore<f64> {
        match self {
            Model::Nie(m) => &m.store,
            Model::Anie(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f64> {
        match self {
            Model::Nie(m) => &mut m.store,
            Model::Anie(m) => &mut m.store,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store().num_scalars()
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Nie(m) => m.config.dim,
            Model::Anie(m) => m.config.dim,
        }
    }

    pub fn prepare(
        &self,
        times: &TimeGrid<f64>,
        lattice: Option<&Lattice<f64>>,
        mc: McConfig,
    ) -> Result<Prepared> {
        match self {
            Model::Nie(m) => {
                if lattice.is_some() {
                    return Err(Error::GridMismatch(
                        "the NIE model takes time-only datasets".into(),
                    ));
                }
                Ok(Prepared::Nie(StepPlan::new(
                    times,
                    &Family::over(times, m.config.volterra),
                    mc,
                )?))
            }
            Model::Anie(m) => {
                let layout = TokenLayout::new(times.clone(), lattice.cloned());
                if layout.coord_dims() != m.config.coord_dims {
                    return Err(Error::GridMismatch(format!(
                        "dataset has {} spatial axes, model expects {}",
                        layout.coord_dims(),
                        m.config.coord_dims
                    )));
                }
                Ok(Prepared::Anie(layout))
            }
        }
    }

    /// Recorded solve from `free` (`[B, L, d]`, tokens time-major).
    pub fn solve(
        &self,
        rec: &mut Record<'_, f64>,
        prep: &Prepared,
        free: Var,
        solver: &SolverConfig<f64>,
    ) -> Result<RecordedSolve<f64>> {
        match (self, prep) {
            (Model::Nie(m), Prepared::Nie(plan)) => m.solve_recorded(rec, plan, free, solver),
            (Model::Anie(m), Prepared::Anie(layout)) => {
                m.solve_recorded(rec, layout, free, free, m.config.mask, solver)
            }
            _ => Err(Error::InvalidArgument(
                "prepared grid belongs to another model kind".into(),
            )),
        }
    }

    /// Prediction from `free`, `[B, L, d]`.
    pub fn predict(
        &self,
        prep: &Prepared,
        free: &Tensor<f64>,
        solver: &SolverConfig<f64>,
    ) -> Result<Tensor<f64>> {
        let mut rec = Record::with_params(self.store());
        let f = rec.constant(free.clone());
        Ok(self.solve(&mut rec, prep, f, solver)?.trajectory.values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub seed: u64,
    pub solver: SolverConfig<f64>,
    pub init_protocol: InitProtocol,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Fraction of curves (taken from the end) held out for evaluation.
    pub holdout_fraction: f64,
    /// Standardize channels with training-split statistics.
    pub normalize: bool,
    /// Draw fresh quadrature samples every epoch.
    pub resample_quadrature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 16,
            l2_weight: 0.0,
            seed: 0,
            solver: SolverConfig::training(),
            init_protocol: InitProtocol::FirstHalf,
            clip_norm: Some(10.0),
            holdout_fraction: 0.2,
            normalize: true,
            resample_quadrature: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.l2_weight >= 0.0) {
            return Err(Error::InvalidArgument("l2_weight must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument(
                "holdout_fraction must be in [0, 1)".into(),
            ));
        }
        self.solver.validate()
    }

    /// Training and held-out curve indices.
    pub fn split(&self, n_curves: usize) -> (Vec<usize>, Vec<usize>) {
        let held = ((n_curves as f64) * self.holdout_fraction).round() as usize;
        let held = held.min(n_curves.saturating_sub(1));
        let cut = n_curves - held;
        ((0..cut).collect(), (cut..n_curves).collect())
    }
}

/// Curves `[n, L, d]` in model units with the grid they live on.
pub struct PreparedData {
    pub values: Tensor<f64>,
    pub times: TimeGrid<f64>,
    pub lattice: Option<Lattice<f64>>,
    pub rows_per_time: usize,
}

impl PreparedData {
    pub fn new(ds: &Dataset, indices: &[usize], norm: &Normalizer) -> Result<Self> {
        let sub = ds.subset(indices)?;
        let l = ds.n_time() * ds.n_space();
        let values = norm.apply(&sub.trajectories).reshaped(vec![indices.len(), l, ds.dim()])?;
        Ok(Self {
            values,
            times: ds.times.clone(),
            lattice: ds.lattice.clone(),
            rows_per_time: ds.n_space(),
        })
    }

    pub fn n_curves(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f64>> {
        let items: Vec<Tensor<f64>> = idx.iter().map(|&k| self.values.index_axis0(k)).collect();
        Tensor::stack(&items)
    }
}

fn mc_for_epoch(cfg: &TrainConfig, epoch: usize) -> McConfig {
    let mut mc = cfg.solver.mc;
    if cfg.resample_quadrature {
        mc.seed = mc.seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    mc
}

/// Solve, loss on the predicted segment, backward; returns `(loss, gradients)`.
pub fn loss_and_gradients(
    model: &Model,
    prep: &Prepared,
    obs: &Tensor<f64>,
    observed: usize,
    rows_per_time: usize,
    solver: &SolverConfig<f64>,
) -> Result<(f64, Gradients<f64>)> {
    let free = hold_last(obs, observed, rows_per_time);
    let l = obs.shape()[1];
    let start = observed * rows_per_time;
    let target = {
        let s = obs.shape();
        let mut data = Vec::with_capacity(s[0] * (l - start) * s[2]);
        for k in 0..s[0] {
            let item = obs.index_axis0(k);
            data.extend_from_slice(&item.data()[start * s[2]..]);
        }
        Tensor::new(vec![s[0], l - start, s[2]], data)?
    };
    let mut rec = Record::with_params(model.store());
    let f = rec.constant(free);
    let out = model.solve(&mut rec, prep, f, solver)?;
    let seg = rec.slice(out.output, 1, start, l)?;
    let loss = mse_loss_recorded(&mut rec, seg, &target)?;
    let value = rec.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((value, rec.backward(loss)?))
}

/// One optimizer iteration on a batch; returns the batch loss.
pub fn train_iteration(
    model: &mut Model,
    state: &mut AdamState,
    prep: &Prepared,
    obs: &Tensor<f64>,
    observed: usize,
    rows_per_time: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_gradients(model, prep, obs, observed, rows_per_time, &cfg.solver)?;
    if let Some(max) = cfg.clip_norm {
        grads.clip_global_norm(max);
    }
    adam_step(model.store_mut(), &grads, state, cfg.learning_rate, cfg.l2_weight)?;
    Ok(loss)
}

/// Model-unit MSE on the predicted segment over all curves of `data`.
pub fn segment_mse(
    model: &Model,
    prep: &Prepared,
    data: &PreparedData,
    observed: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (pred, obs) = predict_segment(model, prep, data, observed, cfg)?;
    mse_values(&pred, &obs)
}

/// Predictions and targets on the predicted segment, `[n, L - start, d]`.
fn predict_segment(
    model: &Model,
    prep: &Prepared,
    data: &PreparedData,
    observed: usize,
    cfg: &TrainConfig,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let n = data.n_curves();
    let mut preds = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    let start = observed * data.rows_per_time;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let batch = data.batch(chunk)?;
        let free = hold_last(&batch, observed, data.rows_per_time);
        let out = model.predict(prep, &free, &cfg.solver)?;
        for k in 0..chunk.len() {
            let p = out.index_axis0(k);
            let o = batch.index_axis0(k);
            let d = p.shape()[1];
            preds.push(Tensor::new(vec![p.shape()[0] - start, d], p.data()[start * d..].to_vec())?);
            obs.push(Tensor::new(vec![o.shape()[0] - start, d], o.data()[start * d..].to_vec())?);
        }
    }
    Ok((Tensor::stack(&preds)?, Tensor::stack(&obs)?))
}

/// Metrics in dataset units on the predicted segment.
pub fn evaluate(
    model: &Model,
    data: &PreparedData,
    observed: usize,
    norm: &Normalizer,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let prep = model.prepare(&data.times, data.lattice.as_ref(), cfg.solver.mc)?;
    let (pred, obs) = predict_segment(model, &prep, data, observed, cfg)?;
    let (pred, obs) = (norm.invert(&pred), norm.invert(&obs));
    // per-point errors are reported per time point, so fold space rows back in
    let s = pred.shape().to_vec();
    let per_time = data.rows_per_time;
    let shape = vec![s[0], s[1] / per_time, per_time * s[2]];
    report(&pred.reshaped(shape.clone())?, &obs.reshaped(shape)?)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub normalizer: Normalizer,
    /// Mean batch loss per epoch (model units).
    pub loss_history: Vec<f64>,
    /// Predicted-segment MSE on the training split before and after training (model units).
    pub initial_train_mse: f64,
    pub final_train_mse: f64,
    pub train: MetricsReport,
    pub holdout: Option<MetricsReport>,
}

pub fn train_model(mut model: Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.dim() != ds.dim() {
        return Err(Error::GridMismatch(format!(
            "model has {} channels, dataset has {}",
            model.dim(),
            ds.dim()
        )));
    }
    let observed = cfg.init_protocol.observed(ds.n_time())?;
    let (train_idx, held_idx) = cfg.split(ds.n_curves());
    let normalizer = if cfg.normalize {
        Normalizer::fit(&ds.subset(&train_idx)?.trajectories)
    } else {
        Normalizer::identity(ds.dim())
    };
    let train = PreparedData::new(ds, &train_idx, &normalizer)?;
    let eval_prep = model.prepare(&ds.times, ds.lattice.as_ref(), cfg.solver.mc)?;
    let initial_train_mse = segment_mse(&model, &eval_prep, &train, observed, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.store());
    let mut order: Vec<usize> = (0..train.n_curves()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let prep = if cfg.resample_quadrature {
            model.prepare(&ds.times, ds.lattice.as_ref(), mc_for_epoch(cfg, epoch))?
        } else {
            model.prepare(&ds.times, ds.lattice.as_ref(), cfg.solver.mc)?
        };
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = |e: Error| Error::Training {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let obs = train.batch(chunk).map_err(wrap)?;
            let loss = train_iteration(
                &mut model,
                &mut state,
                &prep,
                &obs,
                observed,
                train.rows_per_time,
                cfg,
            )
            .map_err(wrap)?;
            total += loss * chunk.len() as f64;
        }
        loss_history.push(total / train.n_curves() as f64);
    }

    let final_train_mse = segment_mse(&model, &eval_prep, &train, observed, cfg)?;
    let train_report = evaluate(&model, &train, observed, &normalizer, cfg)?;
    let holdout = if held_idx.is_empty() {
        None
    } else {
        let held = PreparedData::new(ds, &held_idx, &normalizer)?;
        Some(evaluate(&model, &held, observed, &normalizer, cfg)?)
    };
    Ok(TrainOutcome {
        model,
        normalizer,
        loss_history,
        initial_train_mse,
        final_train_mse,
        train: train_report,
        holdout,
    })
}

/// Where a shifted initialization window sits on the time axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// The curve is cut at the window start and laid on the grid from `t_0`.
    #[default]
    Rebased,
    /// The window keeps its original times; earlier points hold the window's first value.
    Absolute,
}

/// Shows points `[start, start + len)` of each curve and scores the prediction
/// of every later point, in dataset units.
pub fn evaluate_window(
    model: &Model,
    ds: &Dataset,
    norm: &Normalizer,
    solver: &SolverConfig<f64>,
    start: usize,
    len: usize,
    placement: Placement,
) -> Result<MetricsReport> {
    let n = ds.n_time();
    if len == 0 || start + len >= n {
        return Err(Error::InvalidArgument(format!(
            "window [{start}, {}) leaves nothing to predict on {n} points",
            start + len
        )));
    }
    let s = ds.n_space();
    let d = ds.dim();
    let all: Vec<usize> = (0..ds.n_curves()).collect();
    let data = PreparedData::new(ds, &all, norm)?;
    let (times, free, first_pred) = match placement {
        Placement::Rebased => {
            let times = TimeGrid::new(ds.times.points()[..n - start].to_vec())?;
            let mut parts = Vec::with_capacity(ds.n_curves());
            for k in 0..ds.n_curves() {
                let c = data.values.index_axis0(k);
                parts.push(Tensor::new(vec![(n - start) * s, d], c.data()[start * s * d..].to_vec())?);
            }
            let cut = Tensor::stack(&parts)?;
            (times, hold_last(&cut, len, s), len)
        }
        Placement::Absolute => {
            let mut free = hold_last(&data.values, start + len, s);
            let w = s * d;
            for k in 0..ds.n_curves() {
                let base = k * n * w;
                let first: Vec<f64> = free.data()[base + start * w..base + (start + 1) * w].to_vec();
                for i in 0..start {
                    free.data_mut()[base + i * w..base + (i + 1) * w].copy_from_slice(&first);
                }
            }
            (ds.times.clone(), free, start + len)
        }
    };
    let prep = model.prepare(&times, ds.lattice.as_ref(), solver.mc)?;
    let out = model.predict(&prep, &free, solver)?;
    let l_out = out.shape()[1];
    let (mut preds, mut obs) = (Vec::new(), Vec::new());
    for k in 0..ds.n_curves() {
        let p = out.index_axis0(k);
        preds.push(Tensor::new(
            vec![l_out / s - first_pred, s * d],
            p.data()[first_pred * s * d..].to_vec(),
        )?);
        let o = data.values.index_axis0(k);
        let skip = match placement {
            Placement::Rebased => (start + first_pred) * s * d,
            Placement::Absolute => first_pred * s * d,
        };
        obs.push(Tensor::new(vec![l_out / s - first_pred, s * d], o.data()[skip..].to_vec())?);
    }
    let pred = norm_invert_grouped(norm, &Tensor::stack(&preds)?, d);
    let obs = norm_invert_grouped(norm, &Tensor::stack(&obs)?, d);
    report(&pred, &obs)
}

fn norm_invert_grouped(norm: &Normalizer, t: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    let flat = t.clone().reshaped(vec![t.numel() / d, d]).expect("channel grouping");
    norm.invert(&flat).reshaped(shape).expect("channel grouping")
}

/// Shows points `[k, 2k)` and predicts the rest.
pub fn evaluate_shifted_init(
    model: &Model,
    ds: &Dataset,
    k: usize,
    norm: &Normalizer,
    solver: &SolverConfig<f64>,
    placement: Placement,
) -> Result<MetricsReport> {
    if ds.n_time() < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "shifted initialization with k = {k} needs at least {} points, curves have {}",
            2 * k,
            ds.n_time()
        )));
    }
    evaluate_window(model, ds, norm, solver, k, k, placement)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Seconds per training iteration, one sample per repeat.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub max_iter: usize,
    pub num_params: usize,
}

/// Seconds per training iteration (solve, backward, optimizer step) on one
/// batch, one warm-up iteration excluded, re-initializing the model with
/// seed `seed + r` for repeat `r`.
pub fn benchmark_walltime(
    model_cfg: &ModelConfig,
    ds: &Dataset,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<BenchReport> {
    cfg.validate()?;
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let observed = cfg.init_protocol.observed(ds.n_time())?;
    let idx: Vec<usize> = (0..cfg.batch_size.min(ds.n_curves())).collect();
    let norm = Normalizer::fit(&ds.subset(&idx)?.trajectories);
    let data = PreparedData::new(ds, &idx, &norm)?;
    let obs = data.batch(&(0..idx.len()).collect::<Vec<_>>())?;
    let mut samples = Vec::with_capacity(repeats);
    let mut num_params = 0;
    for r in 0..repeats {
        let mut model = Model::new(&model_cfg.with_seed(model_cfg.seed().wrapping_add(r as u64)))?;
        num_params = model.num_params();
        let mut state = AdamState::new(model.store());
        let prep = model.prepare(&ds.times, ds.lattice.as_ref(), cfg.solver.mc)?;
        train_iteration(&mut model, &mut state, &prep, &obs, observed, data.rows_per_time, cfg)?;
        let t0 = Instant::now();
        let prep = model.prepare(&ds.times, ds.lattice.as_ref(), cfg.solver.mc)?;
        train_iteration(&mut model, &mut state, &prep, &obs, observed, data.rows_per_time, cfg)?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let (mean, sd) = mean_sd(&samples);
    Ok(BenchReport {
        samples,
        mean,
        sd,
        max_iter: cfg.solver.max_iter,
        num_params,
    })
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    normalizer: Normalizer,
}

pub fn save_model(path: impl AsRef<Path>, model: &Model, norm: &Normalizer) -> Result<()> {
    let meta = serde_json::to_value(ModelMeta {
        model: model.config(),
        normalizer: norm.clone(),
    })?;
    save_checkpoint(path, model.store(), meta)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, Normalizer)> {
    let ck = load_checkpoint::<f64>(path)?;
    let meta: ModelMeta = serde_json::from_value(ck.metadata)?;
    let mut model = Model::new(&meta.model)?;
    model.store_mut().load_from(&ck.params)?;
    Ok((model, meta.normalizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_lotka_volterra;

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
            solver: SolverConfig {
                mc: McConfig {
                    n_samples: 8,
                    seed: 0,
                },
                ..SolverConfig::training()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn hold_last_repeats_the_last_observed_row() {
        let v = Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(hold_last(&v, 2, 1).data(), &[1.0, 2.0, 2.0, 2.0]);
        let g = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        // three space rows per time point, one time point observed
        let g = Tensor::new(vec![1, 6, 1], [g.data(), &[7.0, 8.0, 9.0][..]].concat()).unwrap();
        assert_eq!(hold_last(&g, 1, 3).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn protocols_count_observed_points() {
        assert_eq!(InitProtocol::FirstHalf.observed(100).unwrap(), 50);
        assert_eq!(InitProtocol::FirstK { k: 20 }.observed(100).unwrap(), 20);
        assert_eq!(InitProtocol::SinglePoint.observed(100).unwrap(), 1);
        assert!(InitProtocol::FirstK { k: 100 }.observed(100).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let ds = gen_lotka_volterra(6, 1).unwrap();
        let model = Model::new(&small_nie()).unwrap();
        let before = model.store().clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(3)
        };
        let out = train_model(model, &ds, &cfg).unwrap();
        assert_eq!(out.model.store(), &before);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_lotka_volterra(6, 1).unwrap();
        let a = train_model(Model::new(&small_nie()).unwrap(), &ds, &quick(3)).unwrap();
        let b = train_model(Model::new(&small_nie()).unwrap(), &ds, &quick(3)).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model.store(), b.model.store());
    }

    #[test]
    fn checkpoint_restores_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = Model::new(&small_nie()).unwrap();
        let norm = Normalizer {
            mean: vec![1.0, 2.0],
            std: vec![3.0, 4.0],
        };
        save_model(&path, &model, &norm).unwrap();
        let (back, n2) = load_model(&path).unwrap();
        assert_eq!(back.store(), model.store());
        assert_eq!(back.config(), model.config());
        assert_eq!(n2, norm);
    }

    #[test]
    fn bench_reports_one_sample_per_repeat() {
        let ds = gen_lotka_volterra(4, 1).unwrap();
        let r = benchmark_walltime(&small_nie(), &ds, &quick(1), 5).unwrap();
        assert_eq!(r.samples.len(), 5);
        assert!(r.sd >= 0.0 && r.mean > 0.0);
    }

    #[test]
    fn short_curves_are_rejected_for_shifted_init() {
        let ds = gen_lotka_volterra(2, 1).unwrap();
        let model = Model::new(&small_nie()).unwrap();
        let norm = Normalizer::identity(2);
        let err = evaluate_shifted_init(&model, &ds, 60, &norm, &SolverConfig::training(), Placement::Rebased);
        assert!(err.is_err());
    }
}
