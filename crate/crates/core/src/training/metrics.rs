use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GridFunction;
use crate::tensor::{Record, Tensor, Var};

fn same_grid(pred: &GridFunction<f64>, obs: &GridFunction<f64>) -> Result<()> {
    if pred.times != obs.times || pred.lattice != obs.lattice || pred.values.shape() != obs.values.shape()
    {
        return Err(Error::shape("mse_loss", pred.values.shape(), obs.values.shape()));
    }
    Ok(())
}

/// Mean of squared differences over all entries.
pub fn mse_loss(pred: &GridFunction<f64>, obs: &GridFunction<f64>) -> Result<f64> {
    same_grid(pred, obs)?;
    mse_values(&pred.values, &obs.values)
}

pub fn mse_values(pred: &Tensor<f64>, obs: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != obs.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), obs.shape()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyTensor { op: "mse_loss" });
    }
    let ss: f64 = pred.data().iter().zip(obs.data()).map(|(p, o)| (p - o) * (p - o)).sum();
    Ok(ss / pred.numel() as f64)
}

/// Recorded MSE between a node and a constant target of the same shape.
pub fn mse_loss_recorded(rec: &mut Record<'_, f64>, pred: Var, obs: &Tensor<f64>) -> Result<Var> {
    if rec.shape(pred) != obs.shape() {
        return Err(Error::shape("mse_loss", rec.shape(pred), obs.shape()));
    }
    let o = rec.constant(obs.clone());
    let d = rec.sub(pred, o)?;
    let sq = rec.square(d)?;
    rec.mean_all(sq)
}

/// `1 - SS_res / SS_tot`, pooled over channels; `SS_tot` is taken about each
/// channel's mean (the last axis indexes channels).
pub fn r_squared(pred: &Tensor<f64>, obs: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != obs.shape() {
        return Err(Error::shape("r_squared", pred.shape(), obs.shape()));
    }
    if obs.is_empty() {
        return Err(Error::EmptyTensor { op: "r_squared" });
    }
    let d = *obs.shape().last().unwrap();
    let rows = obs.numel() / d;
    let mut mean = vec![0.0; d];
    for row in obs.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (p, o) in pred.data().chunks(d).zip(obs.data().chunks(d)) {
        for c in 0..d {
            ss_res += (p[c] - o[c]).powi(2);
            ss_tot += (o[c] - mean[c]).powi(2);
        }
    }
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Walltime {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// Pooled over the evaluated curves.
    pub r_squared: f64,
    /// Mean and sample sd of per-curve R².
    pub r_squared_mean: f64,
    pub r_squared_sd: f64,
    /// Mean absolute error at each predicted time point.
    pub per_point_abs_error: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub walltime_per_iteration: Option<Walltime>,
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Metrics of `pred` against `obs`, both `[B, P, .., d]` with `P` predicted points.
pub fn report(pred: &Tensor<f64>, obs: &Tensor<f64>) -> Result<MetricsReport> {
    let mse = mse_values(pred, obs)?;
    let r2 = r_squared(pred, obs)?;
    let b = obs.shape()[0];
    let per_curve: Vec<f64> = (0..b)
        .map(|k| r_squared(&pred.index_axis0(k), &obs.index_axis0(k)))
        .collect::<Result<_>>()?;
    let (r_squared_mean, r_squared_sd) = mean_sd(&per_curve);
    let p = obs.shape()[1];
    let per_time = obs.numel() / b / p;
    let mut err = vec![0.0; p];
    for k in 0..b {
        for i in 0..p {
            let off = (k * p + i) * per_time;
            let s: f64 = (off..off + per_time)
                .map(|j| (pred.data()[j] - obs.data()[j]).abs())
                .sum();
            err[i] += s / (per_time * b) as f64;
        }
    }
    Ok(MetricsReport {
        mse,
        r_squared: r2,
        r_squared_mean,
        r_squared_sd,
        per_point_abs_error: err,
        walltime_per_iteration: None,
    })
}
