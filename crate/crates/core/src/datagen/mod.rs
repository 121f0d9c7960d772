//! Synthetic trajectory generators and the dataset file format.

mod dataset;

pub use dataset::{read_dataset, write_dataset, AxisSpec, Dataset, Manifest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::quadrature::TimeGrid;
use crate::solver::{
    solve_recorded, Family, FnKernel, McConfig, SolverConfig, StepPlan,
};
use crate::tensor::{Record, Tensor};

/// Per-curve random stream split from the dataset seed.
pub fn curve_rng(seed: u64, curve: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(curve as u64);
    rng
}

fn rk4_step(field: &impl Fn(&[f64], f64) -> Vec<f64>, y: &[f64], t: f64, h: f64) -> Vec<f64> {
    let axpy = |a: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        a.iter().zip(k).map(|(a, k)| a + s * k).collect()
    };
    let k1 = field(y, t);
    let k2 = field(&axpy(y, &k1, h / 2.0), t + h / 2.0);
    let k3 = field(&axpy(y, &k2, h / 2.0), t + h / 2.0);
    let k4 = field(&axpy(y, &k3, h), t + h);
    (0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Classical RK4 with one step per grid interval. Returns `[N, d]`.
pub fn rk4_integrate(
    field: impl Fn(&[f64], f64) -> Vec<f64>,
    y0: &[f64],
    grid: &TimeGrid<f64>,
) -> Result<Tensor<f64>> {
    rk4_integrate_substeps(field, y0, grid, f64::INFINITY)
}

/// RK4 where each grid interval is split into equal substeps no longer than
/// `max_step`; output is sampled on the grid.
pub fn rk4_integrate_substeps(
    field: impl Fn(&[f64], f64) -> Vec<f64>,
    y0: &[f64],
    grid: &TimeGrid<f64>,
    max_step: f64,
) -> Result<Tensor<f64>> {
    if !(max_step > 0.0) {
        return Err(Error::InvalidArgument("max_step must be positive".into()));
    }
    let d = y0.len();
    let pts = grid.points();
    let mut out = Vec::with_capacity(pts.len() * d);
    let mut y = y0.to_vec();
    let bad = |k: usize| Error::NonFinite(format!("state at grid step {k} (t = {})", pts[k]));
    if y.iter().any(|v| !v.is_finite()) {
        return Err(bad(0));
    }
    out.extend_from_slice(&y);
    for k in 1..pts.len() {
        let span = pts[k] - pts[k - 1];
        let n = (span / max_step).ceil().max(1.0) as usize;
        let h = span / n as f64;
        for i in 0..n {
            y = rk4_step(&field, &y, pts[k - 1] + i as f64 * h, h);
        }
        if y.len() != d || y.iter().any(|v| !v.is_finite()) {
            return Err(bad(k));
        }
        out.extend_from_slice(&y);
    }
    Tensor::new(vec![pts.len(), d], out)
}

/// Substep length used by the ODE generators.
pub const ODE_MAX_STEP: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LotkaVolterra {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl LotkaVolterra {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            a: rng.gen_range(0.5..1.5),
            b: rng.gen_range(0.5..1.5),
            c: rng.gen_range(0.5..2.5),
            d: rng.gen_range(0.25..1.25),
        }
    }

    pub fn field(&self, s: &[f64]) -> Vec<f64> {
        let (x, y) = (s[0], s[1]);
        vec![
            self.a * x - self.b * x * y,
            -self.c * y + self.d * self.b * x * y,
        ]
    }

    /// Coexistence equilibrium `(c / (d b), a / b)`.
    pub fn equilibrium(&self) -> [f64; 2] {
        [self.c / (self.d * self.b), self.a / self.b]
    }
}

pub fn gen_lotka_volterra(n_curves: usize, seed: u64) -> Result<Dataset> {
    let times = TimeGrid::linspace(0.0, 15.0, 100)?;
    let x0 = [10.0, 5.0];
    let mut curves = Vec::with_capacity(n_curves);
    let mut draws = Vec::with_capacity(n_curves);
    for k in 0..n_curves {
        let p = LotkaVolterra::sample(&mut curve_rng(seed, k));
        curves.push(rk4_integrate_substeps(|s, _| p.field(s), &x0, &times, ODE_MAX_STEP)?);
        draws.push([p.a, p.b, p.c, p.d]);
    }
    Dataset::new(
        "lotka-volterra",
        json!({
            "a": [0.5, 1.5], "b": [0.5, 1.5], "c": [0.5, 2.5], "d": [0.25, 1.25],
            "x0": x0, "max_step": ODE_MAX_STEP, "draws_abcd": draws,
        }),
        seed,
        vec!["x".into(), "y".into()],
        times,
        None,
        Tensor::stack(&curves)?,
    )
}

pub fn lorenz_field(s: &[f64]) -> Vec<f64> {
    let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
    vec![
        sigma * (s[1] - s[0]),
        s[0] * (rho - s[2]) - s[1],
        s[0] * s[1] - beta * s[2],
    ]
}

pub fn gen_lorenz(n_curves: usize, seed: u64) -> Result<Dataset> {
    let times = TimeGrid::linspace(0.0, 100.0, 100)?;
    let mut curves = Vec::with_capacity(n_curves);
    for k in 0..n_curves {
        let mut rng = curve_rng(seed, k);
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..0.5)).collect();
        curves.push(rk4_integrate_substeps(|s, _| lorenz_field(s), &x0, &times, ODE_MAX_STEP)?);
    }
    Dataset::new(
        "lorenz",
        json!({
            "sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0,
            "init": [0.0, 0.5], "max_step": ODE_MAX_STEP,
        }),
        seed,
        vec!["x".into(), "y".into(), "z".into()],
        times,
        None,
        Tensor::stack(&curves)?,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpiralConfig {
    pub n_points: usize,
    pub n_samples: usize,
    pub max_iter: usize,
    /// Curve 0 uses `theta = 1`; the rest draw `theta` uniformly from this range.
    pub theta_range: (f64, f64),
    /// Replaces `tanh(2 pi y)` with zero.
    pub zero_nonlinearity: bool,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self {
            n_points: 100,
            n_samples: 10_000,
            max_iter: 3,
            theta_range: (0.5, 3.0),
            zero_nonlinearity: false,
        }
    }
}

pub fn spiral_theta(seed: u64, curve: usize, cfg: &SpiralConfig) -> f64 {
    if curve == 0 {
        1.0
    } else {
        curve_rng(seed, curve).gen_range(cfg.theta_range.0..cfg.theta_range.1)
    }
}

/// Volterra spirals `y = c_theta + ∫_0^t cos(2 pi t - 2 pi s) tanh(2 pi y(s)) ds`
/// with `c_theta(t) = [cos(theta t), cos(theta t + pi)]`.
pub fn gen_ie_spirals(n_curves: usize, seed: u64) -> Result<Dataset> {
    gen_ie_spirals_with(n_curves, seed, &SpiralConfig::default())
}

pub fn gen_ie_spirals_with(n_curves: usize, seed: u64, cfg: &SpiralConfig) -> Result<Dataset> {
    use std::f64::consts::PI;
    let times = TimeGrid::linspace(0.0, 1.0, cfg.n_points)?;
    let kernel = FnKernel::scalar(2, |t: f64, s: f64| (2.0 * PI * t - 2.0 * PI * s).cos());
    let solver = SolverConfig {
        max_iter: cfg.max_iter,
        tolerance: 0.0,
        ..SolverConfig::verification(cfg.n_samples, seed)
    };
    let plan = StepPlan::new(&times, &Family::Volterra { t0: 0.0 }, McConfig {
        n_samples: cfg.n_samples,
        seed,
    })?;
    let zero = cfg.zero_nonlinearity;
    let nonlin = move |rec: &mut Record<'_, f64>, y| {
        if zero {
            rec.scale(y, 0.0)
        } else {
            let s = rec.scale(y, 2.0 * PI)?;
            rec.tanh(s)
        }
    };
    let thetas: Vec<f64> = (0..n_curves).map(|k| spiral_theta(seed, k, cfg)).collect();
    let mut curves = Vec::with_capacity(n_curves);
    for &theta in &thetas {
        let mut free = Vec::with_capacity(times.len() * 2);
        for &t in times.points() {
            free.extend([(theta * t).cos(), (theta * t + PI).cos()]);
        }
        let mut rec = Record::new();
        let f = rec.constant(Tensor::new(vec![1, times.len(), 2], free)?);
        let out = solve_recorded(&mut rec, &kernel, &nonlin, &plan, f, f, &solver)?;
        curves.push(out.trajectory.values.reshaped(vec![times.len(), 2])?);
    }
    Dataset::new(
        "ie-spirals",
        json!({
            "kernel": "cos(2 pi t - 2 pi s) I2", "nonlinearity": if zero { "zero" } else { "tanh(2 pi y)" },
            "bounds": [0.0, "t"], "max_iter": cfg.max_iter, "mc_samples": cfg.n_samples,
            "theta_range": [cfg.theta_range.0, cfg.theta_range.1], "thetas": thetas,
        }),
        seed,
        vec!["y1".into(), "y2".into()],
        times,
        None,
        Tensor::stack(&curves)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_constant() {
        let g = TimeGrid::linspace(0.0, 1.0, 11).unwrap();
        let y = rk4_integrate(|s, _| vec![0.0; s.len()], &[1.5, -2.0], &g).unwrap();
        assert!(y.data().chunks(2).all(|r| r == [1.5, -2.0]));
    }

    #[test]
    fn exponential_growth_reaches_e() {
        let g = TimeGrid::linspace(0.0, 1.0, 101).unwrap();
        let y = rk4_integrate(|s, _| s.to_vec(), &[1.0], &g).unwrap();
        assert!((y.get(&[100, 0]) - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn decay_is_positive_and_monotone() {
        let g = TimeGrid::linspace(0.0, 5.0, 50).unwrap();
        let y = rk4_integrate(|s, _| vec![-s[0]], &[1.0], &g).unwrap();
        assert!(y.data().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }

    #[test]
    fn blow_up_reports_the_step() {
        let g = TimeGrid::linspace(0.0, 10.0, 11).unwrap();
        let err = rk4_integrate(|s, _| vec![s[0] * s[0] * 1e200], &[1e100], &g).unwrap_err();
        assert!(err.to_string().contains("grid step 1"), "{err}");
    }

    #[test]
    fn lotka_volterra_equilibrium_is_fixed() {
        let p = LotkaVolterra::sample(&mut curve_rng(3, 0));
        let g = TimeGrid::linspace(0.0, 15.0, 100).unwrap();
        let eq = p.equilibrium();
        let y = rk4_integrate_substeps(|s, _| p.field(s), &eq, &g, ODE_MAX_STEP).unwrap();
        for row in y.data().chunks(2) {
            assert!((row[0] - eq[0]).abs() < 1e-9 && (row[1] - eq[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn lorenz_origin_stays_at_origin() {
        let g = TimeGrid::linspace(0.0, 100.0, 100).unwrap();
        let y = rk4_integrate_substeps(|s, _| lorenz_field(s), &[0.0; 3], &g, ODE_MAX_STEP).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spirals_start_at_free_function_and_zero_nonlinearity_is_free() {
        let cfg = SpiralConfig {
            n_points: 20,
            n_samples: 50,
            ..SpiralConfig::default()
        };
        let ds = gen_ie_spirals_with(3, 1, &cfg).unwrap();
        for k in 0..3 {
            assert_eq!(ds.trajectories.get(&[k, 0, 0]), 1.0);
            assert_eq!(ds.trajectories.get(&[k, 0, 1]), std::f64::consts::PI.cos());
        }
        let zero = gen_ie_spirals_with(2, 1, &SpiralConfig { zero_nonlinearity: true, ..cfg }).unwrap();
        let theta = spiral_theta(1, 1, &SpiralConfig::default());
        for (i, &t) in zero.times.points().iter().enumerate() {
            assert_eq!(zero.trajectories.get(&[1, i, 0]), (theta * t).cos());
        }
    }
}
