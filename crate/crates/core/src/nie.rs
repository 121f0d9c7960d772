//! Neural integral equations: the kernel `K(t, s)` and the nonlinearity `F`
//! of `y = f + ∫ K(t, s) F(y(s)) ds` are both small MLPs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Activation, Mlp};
use crate::quadrature::TimeGrid;
use crate::scalar::Scalar;
use crate::solver::{
    solve_recorded, Family, FreeFunction, IEProblem, Kernel, Nonlinearity, RecordedSolve,
    SolverConfig, StepPlan,
};
use crate::tensor::{ParamStore, Record, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NieConfig {
    /// State dimension `d`.
    pub dim: usize,
    pub kernel_hidden: Vec<usize>,
    pub nonlinearity_hidden: Vec<usize>,
    /// Output width `h` of `F`; the kernel is `d x h`. `None` means `h = d`.
    pub latent_dim: Option<usize>,
    pub activation: Activation,
    /// Kernel inputs are `(t * time_scale, s * time_scale)`.
    pub time_scale: f64,
    /// Volterra bounds `[t0, t]` when true, Fredholm `[t0, t_end]` otherwise.
    pub volterra: bool,
    /// Multiplier on the kernel's output layer at initialization.
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for NieConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            kernel_hidden: vec![32, 32],
            nonlinearity_hidden: vec![32],
            latent_dim: None,
            activation: Activation::Tanh,
            time_scale: 1.0,
            volterra: false,
            output_scale: 0.1,
            seed: 0,
        }
    }
}

/// MLP kernel `(t, s) -> d x h`.
#[derive(Clone, Debug)]
pub struct NeuralKernel<T> {
    pub mlp: Mlp,
    dim: usize,
    latent: usize,
    time_scale: T,
}

impl<T: Scalar> Kernel<T> for NeuralKernel<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn latent_dim(&self) -> usize {
        self.latent
    }

    fn eval(&self, rec: &mut Record<'_, T>, pairs: &Tensor<T>) -> Result<Var> {
        let m = pairs.shape()[0];
        let x = rec.constant(pairs.map(|v| v * self.time_scale));
        let k = self.mlp.forward(rec, x)?;
        rec.reshape(k, &[m, self.dim, self.latent])
    }
}

/// MLP nonlinearity `R^d -> R^d`.
#[derive(Clone, Debug)]
pub struct NeuralNonlinearity {
    pub mlp: Mlp,
}

impl<T: Scalar> Nonlinearity<T> for NeuralNonlinearity {
    fn eval(&self, rec: &mut Record<'_, T>, y: Var) -> Result<Var> {
        self.mlp.forward(rec, y)
    }
}

#[derive(Clone, Debug)]
pub struct NieModel<T> {
    pub config: NieConfig,
    pub store: ParamStore<T>,
    pub kernel: NeuralKernel<T>,
    pub nonlinearity: NeuralNonlinearity,
}

impl<T: Scalar> NieModel<T> {
    pub fn new(config: NieConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let h = config.latent_dim.unwrap_or(d);

        let mut widths = vec![2];
        widths.extend(&config.kernel_hidden);
        widths.push(d * h);
        let kmlp = Mlp::new(&mut store, "kernel", &widths, config.activation, &mut rng);
        kmlp.scale_output(&mut store, T::lit(config.output_scale));

        let mut widths = vec![d];
        widths.extend(&config.nonlinearity_hidden);
        widths.push(h);
        let fmlp = Mlp::new(&mut store, "nonlinearity", &widths, config.activation, &mut rng);

        Self {
            kernel: NeuralKernel {
                mlp: kmlp,
                dim: d,
                latent: h,
                time_scale: T::lit(config.time_scale),
            },
            nonlinearity: NeuralNonlinearity { mlp: fmlp },
            store,
            config,
        }
    }

    pub fn family(&self, times: &TimeGrid<T>) -> Family<T> {
        Family::over(times, self.config.volterra)
    }

    /// The equation this model defines for a given free function.
    pub fn problem(&self, free: FreeFunction<T>, times: &TimeGrid<T>) -> IEProblem<'_, T> {
        IEProblem::new(free, &self.kernel, &self.nonlinearity, self.family(times))
            .with_params(&self.store)
    }

    /// Recorded batched solve starting from `free` (`[B, N, d]`).
    pub fn solve_recorded(
        &self,
        rec: &mut Record<'_, T>,
        plan: &StepPlan<T>,
        free: Var,
        cfg: &SolverConfig<T>,
    ) -> Result<RecordedSolve<T>> {
        solve_recorded(rec, &self.kernel, &self.nonlinearity, plan, free, free, cfg)
    }
}
