//! Successive-approximation solver for integral equations of the form
//!
//! ```text
//! y(t) = f(t) + ∫_{α(t)}^{β(t)} K(t, s) F(y(s)) ds
//! ```
//!
//! Each iteration evaluates the right-hand side on the whole time grid with
//! Monte Carlo quadrature, reading `y(s)` by linear interpolation of the
//! previous iterate. All iterations are recorded on a [`Record`], so a loss
//! on the final iterate differentiates through the unrolled loop into the
//! kernel and nonlinearity parameters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{interval_samples, GridFunction, Interval, TimeGrid, TRAINING_SAMPLES};
use crate::scalar::Scalar;
use crate::tensor::{InterpIndex, ParamStore, Record, Tensor, Var};

/// Matrix-valued kernel `K(t, s)`.
pub trait Kernel<T: Scalar> {
    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Width `h` of the nonlinearity's output; kernels are `d x h`.
    fn latent_dim(&self) -> usize {
        self.dim()
    }

    /// Evaluates the kernel on `pairs`, a `[M, 2]` tensor of `(t, s)` rows,
    /// returning a `[M, d, h]` node.
    fn eval(&self, rec: &mut Record<'_, T>, pairs: &Tensor<T>) -> Result<Var>;
}

/// Nonlinearity `F` applied along the last (channel) axis.
pub trait Nonlinearity<T: Scalar> {
    fn eval(&self, rec: &mut Record<'_, T>, y: Var) -> Result<Var>;
}

impl<T, F> Nonlinearity<T> for F
where
    T: Scalar,
    F: for<'r> Fn(&mut Record<'r, T>, Var) -> Result<Var>,
{
    fn eval(&self, rec: &mut Record<'_, T>, y: Var) -> Result<Var> {
        self(rec, y)
    }
}

/// Kernel given by a closure returning the row-major `d x d` matrix.
pub struct FnKernel<T> {
    dim: usize,
    f: Box<dyn Fn(T, T) -> Vec<T> + Send + Sync>,
}

impl<T: Scalar> FnKernel<T> {
    pub fn new(dim: usize, f: impl Fn(T, T) -> Vec<T> + Send + Sync + 'static) -> Self {
        Self {
            dim,
            f: Box::new(f),
        }
    }

    /// `g(t, s) * I_d`.
    pub fn scalar(dim: usize, g: impl Fn(T, T) -> T + Send + Sync + 'static) -> Self {
        Self::new(dim, move |t, s| {
            let v = g(t, s);
            let mut m = vec![T::zero(); dim * dim];
            for i in 0..dim {
                m[i * dim + i] = v;
            }
            m
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, move |_, _| vec![T::zero(); dim * dim])
    }
}

impl<T: Scalar> Kernel<T> for FnKernel<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, rec: &mut Record<'_, T>, pairs: &Tensor<T>) -> Result<Var> {
        let m = pairs.shape()[0];
        let dd = self.dim * self.dim;
        let mut data = Vec::with_capacity(m * dd);
        for row in pairs.data().chunks(2) {
            let k = (self.f)(row[0], row[1]);
            if k.len() != dd {
                return Err(Error::InvalidArgument(format!(
                    "kernel returned {} entries, expected {dd}",
                    k.len()
                )));
            }
            data.extend(k);
        }
        Ok(rec.constant(Tensor::new(vec![m, self.dim, self.dim], data)?))
    }
}

/// `F(y) = y`.
pub fn identity<T: Scalar>(_: &mut Record<'_, T>, y: Var) -> Result<Var> {
    Ok(y)
}

/// `F(y) = tanh(c y)`.
pub fn scaled_tanh<T: Scalar>(c: T) -> impl for<'r> Fn(&mut Record<'r, T>, Var) -> Result<Var> {
    move |rec, y| {
        let z = rec.scale(y, c)?;
        rec.tanh(z)
    }
}

/// Integration bounds of the equation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Family<T> {
    /// `[t0, t]`.
    Volterra { t0: T },
    /// `[a, b]`.
    Fredholm { a: T, b: T },
}

impl<T: Scalar> Family<T> {
    pub fn interval(&self) -> Result<Interval<T>> {
        match *self {
            Family::Volterra { t0 } => Ok(Interval::up_to_time(t0)),
            Family::Fredholm { a, b } => {
                if a > b {
                    return Err(Error::ReversedBounds {
                        lower: a.as_f64(),
                        upper: b.as_f64(),
                    });
                }
                Ok(Interval::fixed(a, b))
            }
        }
    }

    /// Volterra from the first grid point, or Fredholm over the whole grid.
    pub fn over(times: &TimeGrid<T>, volterra: bool) -> Self {
        if volterra {
            Family::Volterra { t0: times.first() }
        } else {
            Family::Fredholm {
                a: times.first(),
                b: times.last(),
            }
        }
    }
}

/// The `f` term: an analytic function of time or values stored on the grid.
pub enum FreeFunction<T> {
    Analytic(Box<dyn Fn(T) -> Vec<T> + Send + Sync>),
    Grid(GridFunction<T>),
}

impl<T: Scalar> FreeFunction<T> {
    pub fn analytic(f: impl Fn(T) -> Vec<T> + Send + Sync + 'static) -> Self {
        FreeFunction::Analytic(Box::new(f))
    }

    /// Values on `times` as a `[N, d]` tensor.
    pub fn sample(&self, times: &TimeGrid<T>, dim: usize) -> Result<Tensor<T>> {
        match self {
            FreeFunction::Analytic(f) => Ok(GridFunction::from_fn(times.clone(), dim, f)?.values),
            FreeFunction::Grid(g) => {
                if &g.times != times || g.dim() != dim || g.lattice.is_some() {
                    return Err(Error::GridMismatch(
                        "free function grid differs from the solver grid".into(),
                    ));
                }
                Ok(g.values.clone())
            }
        }
    }
}

/// `y = f + ∫ K F(y)` with the given bounds.
pub struct IEProblem<'a, T: Scalar> {
    pub free: FreeFunction<T>,
    pub kernel: &'a dyn Kernel<T>,
    pub nonlinearity: &'a dyn Nonlinearity<T>,
    pub family: Family<T>,
    /// Parameters the kernel or nonlinearity read, if any.
    pub params: Option<&'a ParamStore<T>>,
}

impl<'a, T: Scalar> IEProblem<'a, T> {
    pub fn new(
        free: FreeFunction<T>,
        kernel: &'a dyn Kernel<T>,
        nonlinearity: &'a dyn Nonlinearity<T>,
        family: Family<T>,
    ) -> Self {
        Self {
            free,
            kernel,
            nonlinearity,
            family,
            params: None,
        }
    }

    pub fn with_params(mut self, params: &'a ParamStore<T>) -> Self {
        self.params = Some(params);
        self
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    fn record(&self) -> Record<'a, T> {
        match self.params {
            Some(p) => Record::with_params(p),
            None => Record::new(),
        }
    }

    /// The default initial guess: `f` sampled on the grid.
    pub fn default_init(&self, times: &TimeGrid<T>) -> Result<GridFunction<T>> {
        GridFunction::new(times.clone(), self.free.sample(times, self.dim())?)
    }
}

/// Distance between consecutive iterates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `‖a − b‖₂ / (‖b‖₂ + 1e-12)`.
    #[default]
    RelativeL2,
    /// `max |a − b|`.
    MaxAbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_samples: TRAINING_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    pub max_iter: usize,
    pub tolerance: T,
    pub mc: McConfig,
    pub metric: Metric,
}

impl<T: Scalar> SolverConfig<T> {
    /// Three iterations, relative-L2 tolerance 1e-3, 100 samples.
    pub fn training() -> Self {
        Self {
            max_iter: 3,
            tolerance: T::lit(1e-3),
            mc: McConfig::default(),
            metric: Metric::RelativeL2,
        }
    }

    /// Fifteen iterations for solves checked against closed forms.
    pub fn verification(n_samples: usize, seed: u64) -> Self {
        Self {
            max_iter: 15,
            mc: McConfig { n_samples, seed },
            ..Self::training()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.tolerance >= T::zero()) {
            return Err(Error::InvalidArgument("tolerance must be non-negative".into()));
        }
        if self.mc.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self::training()
    }
}

/// Solver output.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionTrajectory<T> {
    pub times: TimeGrid<T>,
    /// `[N, d]` for a single solve, `[B, N, d]` for a batch.
    pub values: Tensor<T>,
    pub residuals: Vec<T>,
    pub iterations_used: usize,
    pub converged: bool,
}

impl<T: Scalar> SolutionTrajectory<T> {
    /// The solution as a grid function (unbatched solves only).
    pub fn grid_fn(&self) -> Result<GridFunction<T>> {
        GridFunction::new(self.times.clone(), self.values.clone())
    }
}

/// Distance between two equally shaped value tensors.
pub fn residual_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, metric: Metric) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::GridMismatch(format!(
            "cannot compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diffs = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y);
    Ok(match metric {
        Metric::RelativeL2 => {
            let num: T = diffs.map(|d| d * d).sum::<T>().sqrt();
            num / (b.sum_squares().sqrt() + T::lit(1e-12))
        }
        Metric::MaxAbs => diffs.map(T::abs).fold(T::zero(), T::max),
    })
}

pub fn residual_metric<T: Scalar>(
    a: &GridFunction<T>,
    b: &GridFunction<T>,
    metric: Metric,
) -> Result<T> {
    if a.times != b.times || a.lattice != b.lattice {
        return Err(Error::GridMismatch("iterates live on different grids".into()));
    }
    residual_values(&a.values, &b.values, metric)
}

/// Quadrature layout shared by every iteration of one solve: the sample
/// points for each grid time, the interpolation stencil reading `y` at those
/// points, and the interval lengths.
pub struct StepPlan<T> {
    times: TimeGrid<T>,
    n_samples: usize,
    pairs: Tensor<T>,
    interp: Arc<InterpIndex<T>>,
    lengths: Tensor<T>,
}

impl<T: Scalar> StepPlan<T> {
    pub fn new(times: &TimeGrid<T>, family: &Family<T>, mc: McConfig) -> Result<Self> {
        let interval = family.interval()?;
        let n = mc.n_samples;
        let mut pairs = Vec::with_capacity(times.len() * n * 2);
        let mut queries = Vec::with_capacity(times.len() * n);
        let mut lengths = Vec::with_capacity(times.len());
        for (j, &t) in times.points().iter().enumerate() {
            let (len, pts) = interval_samples(&interval, t, j as u64, n, mc.seed)?;
            lengths.push(len);
            for s in pts {
                pairs.extend([t, s]);
                queries.push(s);
            }
        }
        Ok(Self {
            times: times.clone(),
            n_samples: n,
            pairs: Tensor::new(vec![times.len() * n, 2], pairs)?,
            interp: Arc::new(times.interp_index(&queries)?),
            lengths: Tensor::new(vec![1, times.len(), 1], lengths)?,
        })
    }

    pub fn times(&self) -> &TimeGrid<T> {
        &self.times
    }

    /// `[N * n, 2]` rows of `(t_j, s_jk)`.
    pub fn pairs(&self) -> &Tensor<T> {
        &self.pairs
    }
}

/// Kernel values and quadrature layout bound to one record.
pub struct BoundPlan<'p, T> {
    plan: &'p StepPlan<T>,
    kernel: Var,
    lengths: Var,
    dim: usize,
    latent: usize,
}

impl<'p, T: Scalar> BoundPlan<'p, T> {
    /// Evaluates the kernel once on all sample pairs; every iteration reuses it.
    pub fn new(rec: &mut Record<'_, T>, plan: &'p StepPlan<T>, kernel: &dyn Kernel<T>) -> Result<Self> {
        let (d, h) = (kernel.dim(), kernel.latent_dim());
        let m = plan.pairs.shape()[0];
        let k = kernel.eval(rec, &plan.pairs)?;
        if rec.shape(k) != [m, d, h] {
            return Err(Error::shape("kernel", rec.shape(k), &[m, d, h]));
        }
        let kernel = rec.reshape(k, &[1, m, d, h])?;
        let lengths = rec.constant(plan.lengths.clone());
        Ok(Self {
            plan,
            kernel,
            lengths,
            dim: d,
            latent: h,
        })
    }
}

/// One recorded successive-approximation step on a `[B, N, d]` iterate.
pub fn picard_step_recorded<T: Scalar>(
    rec: &mut Record<'_, T>,
    bound: &BoundPlan<'_, T>,
    nonlinearity: &dyn Nonlinearity<T>,
    free: Var,
    y: Var,
) -> Result<Var> {
    let shape = rec.shape(y).to_vec();
    let (n_time, d) = (bound.plan.times.len(), bound.dim);
    if shape.len() != 3 || shape[1] != n_time || shape[2] != d {
        return Err(Error::shape("picard_step", &shape, &[0, n_time, d]));
    }
    let b = shape[0];
    let n = bound.plan.n_samples;
    let m = n_time * n;
    let ys = rec.interp(y, 1, bound.plan.interp.clone())?;
    let fy = nonlinearity.eval(rec, ys)?;
    let h = bound.latent;
    if rec.shape(fy) != [b, m, h] {
        return Err(Error::shape("nonlinearity", rec.shape(fy), &[b, m, h]));
    }
    let fy = rec.reshape(fy, &[b, m, 1, h])?;
    let kf = rec.mul(bound.kernel, fy)?;
    let kf = rec.sum(kf, 3)?;
    let kf = rec.reshape(kf, &[b, n_time, n, d])?;
    let mean = rec.mean(kf, 2)?;
    let integral = rec.mul(mean, bound.lengths)?;
    rec.add(free, integral)
}

/// Output of a recorded solve.
pub struct RecordedSolve<T> {
    /// Final iterate, `[B, N, d]`.
    pub output: Var,
    pub trajectory: SolutionTrajectory<T>,
}

/// Checks an iterate for non-finite values, reporting the first bad time.
pub(crate) fn check_iterate<T: Scalar>(
    values: &Tensor<T>,
    times: &TimeGrid<T>,
    iteration: usize,
) -> Result<()> {
    if let Some(pos) = values.data().iter().position(|x| !x.is_finite()) {
        let n = times.len();
        let per_time = values.numel() / values.shape()[0] / n;
        let index = (pos / per_time) % n;
        return Err(Error::NonFiniteIterate {
            iteration,
            index,
            time: times.points()[index].as_f64(),
        });
    }
    Ok(())
}

/// Generic iteration driver shared by the integral and attention solvers:
/// repeatedly applies `step` until the residual drops to the tolerance or
/// `max_iter` steps have run.
pub(crate) fn iterate<T: Scalar>(
    rec: &mut Record<'_, T>,
    times: &TimeGrid<T>,
    init: Var,
    cfg: &SolverConfig<T>,
    mut step: impl FnMut(&mut Record<'_, T>, Var, usize) -> Result<Var>,
) -> Result<RecordedSolve<T>> {
    cfg.validate()?;
    let mut y = init;
    let mut residuals = Vec::new();
    let mut converged = false;
    for it in 0..cfg.max_iter {
        let next = step(rec, y, it)?;
        check_iterate(rec.value(next), times, it + 1)?;
        let err = residual_values(rec.value(next), rec.value(y), cfg.metric)?;
        residuals.push(err);
        y = next;
        if err <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(RecordedSolve {
        output: y,
        trajectory: SolutionTrajectory {
            times: times.clone(),
            values: rec.value(y).clone(),
            iterations_used: residuals.len(),
            residuals,
            converged,
        },
    })
}

/// Recorded solve of a batch: `free` and `init` are `[B, N, d]` nodes.
pub fn solve_recorded<T: Scalar>(
    rec: &mut Record<'_, T>,
    kernel: &dyn Kernel<T>,
    nonlinearity: &dyn Nonlinearity<T>,
    plan: &StepPlan<T>,
    free: Var,
    init: Var,
    cfg: &SolverConfig<T>,
) -> Result<RecordedSolve<T>> {
    cfg.validate()?;
    let bound = BoundPlan::new(rec, plan, kernel)?;
    iterate(rec, &plan.times, init, cfg, |rec, y, _| {
        picard_step_recorded(rec, &bound, nonlinearity, free, y)
    })
}

fn unbatch<T: Scalar>(t: Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape()[1..].to_vec();
    t.reshaped(s)
}

fn add_batch_axis<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshaped(s)
}

/// One successive-approximation step from `y_i`.
pub fn picard_step<T: Scalar>(
    problem: &IEProblem<'_, T>,
    y_i: &GridFunction<T>,
    cfg: &SolverConfig<T>,
) -> Result<GridFunction<T>> {
    cfg.validate()?;
    if y_i.dim() != problem.dim() || y_i.lattice.is_some() {
        return Err(Error::GridMismatch(
            "iterate does not match the problem dimension".into(),
        ));
    }
    let plan = StepPlan::new(&y_i.times, &problem.family, cfg.mc)?;
    let mut rec = problem.record();
    let free = rec.constant(add_batch_axis(&problem.free.sample(&y_i.times, problem.dim())?)?);
    let y = rec.constant(add_batch_axis(&y_i.values)?);
    let bound = BoundPlan::new(&mut rec, &plan, problem.kernel)?;
    let next = picard_step_recorded(&mut rec, &bound, problem.nonlinearity, free, y)?;
    check_iterate(rec.value(next), &y_i.times, 1)?;
    GridFunction::new(y_i.times.clone(), unbatch(rec.value(next).clone())?)
}

/// Solves `problem` on the grid of `init`, starting from `init`.
///
/// Non-convergence within `max_iter` is reported through
/// [`SolutionTrajectory::converged`], not as an error.
pub fn solve_ie<T: Scalar>(
    problem: &IEProblem<'_, T>,
    init: &GridFunction<T>,
    cfg: &SolverConfig<T>,
) -> Result<SolutionTrajectory<T>> {
    if init.dim() != problem.dim() || init.lattice.is_some() {
        return Err(Error::GridMismatch(
            "initial guess does not match the problem dimension".into(),
        ));
    }
    let plan = StepPlan::new(&init.times, &problem.family, cfg.mc)?;
    let mut rec = problem.record();
    let free = rec.constant(add_batch_axis(&problem.free.sample(&init.times, problem.dim())?)?);
    let y0 = rec.constant(add_batch_axis(&init.values)?);
    let out = solve_recorded(
        &mut rec,
        problem.kernel,
        problem.nonlinearity,
        &plan,
        free,
        y0,
        cfg,
    )?;
    let mut traj = out.trajectory;
    traj.values = unbatch(traj.values)?;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{mc_integrate, IntegrationSpec};

    fn grid(n: usize) -> TimeGrid<f64> {
        TimeGrid::linspace(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn zero_kernel_returns_free_function() {
        let k = FnKernel::zero(2);
        let p = IEProblem::new(
            FreeFunction::analytic(|t: f64| vec![t.sin(), 1.0 + t]),
            &k,
            &identity,
            Family::Volterra { t0: 0.0 },
        );
        let times = grid(11);
        let y0 = GridFunction::new(times.clone(), Tensor::full(vec![11, 2], 3.0)).unwrap();
        let out = picard_step(&p, &y0, &SolverConfig::training()).unwrap();
        assert_eq!(out.values, p.free.sample(&times, 2).unwrap());
    }

    #[test]
    fn volterra_start_is_free_function() {
        let k = FnKernel::scalar(1, |t: f64, s| 1.0 + t * s);
        let p = IEProblem::new(
            FreeFunction::analytic(|t: f64| vec![0.3 + t]),
            &k,
            &identity,
            Family::Volterra { t0: 0.0 },
        );
        let y0 = GridFunction::from_fn(grid(5), 1, |t| vec![t * 7.0]).unwrap();
        let out = picard_step(&p, &y0, &SolverConfig::training()).unwrap();
        assert_eq!(out.values.data()[0], 0.3);
    }

    #[test]
    fn step_matches_pointwise_mc_integral() {
        let k = FnKernel::new(2, |t: f64, s: f64| vec![t - s, 0.5, -0.25 * s, (t * s).cos()]);
        let nl = scaled_tanh(1.5);
        let p = IEProblem::new(
            FreeFunction::analytic(|t: f64| vec![t, -t]),
            &k,
            &nl,
            Family::Volterra { t0: 0.0 },
        );
        let times = grid(6);
        let y0 = GridFunction::from_fn(times.clone(), 2, |t| vec![t.cos(), t * t]).unwrap();
        let cfg = SolverConfig::<f64>::verification(64, 9);
        let out = picard_step(&p, &y0, &cfg).unwrap();
        let spec = IntegrationSpec::interval(64, 9, Interval::up_to_time(0.0));
        for (j, &t) in times.points().iter().enumerate() {
            let integral = mc_integrate(
                |s| {
                    let y = crate::quadrature::interp_linear(&y0, s).unwrap();
                    let f: Vec<f64> = y.iter().map(|v| (1.5 * v).tanh()).collect();
                    let km = k.f.as_ref()(t, s);
                    vec![km[0] * f[0] + km[1] * f[1], km[2] * f[0] + km[3] * f[1]]
                },
                t,
                j as u64,
                &spec,
            )
            .unwrap();
            for c in 0..2 {
                let expect = [t, -t][c] + integral[c];
                assert!((out.values.get(&[j, c]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_examples() {
        let times = TimeGrid::new(vec![0.0]).unwrap();
        let a = GridFunction::new(times.clone(), Tensor::from_f64(vec![1, 1], &[2.0]).unwrap()).unwrap();
        let b = GridFunction::new(times.clone(), Tensor::from_f64(vec![1, 1], &[1.0]).unwrap()).unwrap();
        assert_eq!(residual_metric(&a, &a, Metric::RelativeL2).unwrap(), 0.0);
        let r: f64 = residual_metric(&a, &b, Metric::RelativeL2).unwrap();
        assert!((r - 1.0).abs() < 1e-11);

        let z = GridFunction::new(grid(3), Tensor::zeros(vec![3, 1])).unwrap();
        let o = GridFunction::new(grid(3), Tensor::ones(vec![3, 1])).unwrap();
        assert_eq!(residual_metric(&o, &z, Metric::MaxAbs).unwrap(), 1.0);
        assert!(residual_metric(&o, &a, Metric::MaxAbs).is_err());
    }

    #[test]
    fn non_finite_iterate_reports_time() {
        let k = FnKernel::scalar(1, |_, s: f64| if s > 0.5 { f64::INFINITY } else { 0.0 });
        let p = IEProblem::new(
            FreeFunction::analytic(|_| vec![1.0]),
            &k,
            &identity,
            Family::Volterra { t0: 0.0 },
        );
        let times = grid(5);
        let init = p.default_init(&times).unwrap();
        let err = solve_ie(&p, &init, &SolverConfig::training()).unwrap_err();
        match err {
            Error::NonFiniteIterate { index, .. } => assert!(index >= 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn fredholm_bounds_must_be_ordered() {
        assert!(Family::Fredholm { a: 1.0, b: 0.0 }.interval().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::<f64>::training();
        cfg.max_iter = 0;
        assert!(cfg.validate().is_err());
    }
}
