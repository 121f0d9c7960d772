//! Monte Carlo quadrature over time intervals and space-time boxes, and the
//! discretized functions the integrands read from.
//!
//! Every estimate draws its uniform samples from a [`SampleStream`] keyed by
//! `(seed, stream)`, where the stream is normally the index of the global time
//! point. The same key always yields the same sample positions, so estimates
//! are bitwise reproducible and the differentiable solver path can reuse the
//! exact points [`mc_integrate`] would use.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{InterpIndex, Tensor};

/// Default sample count for training-time solves.
pub const TRAINING_SAMPLES: usize = 100;
/// Default sample count for generating data from analytic equations.
pub const GENERATION_SAMPLES: usize = 10_000;

/// Strictly increasing time points.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T>(Vec<T>);

impl<T: Scalar> TimeGrid<T> {
    pub fn new(points: Vec<T>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("time grid is empty".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("time grid has non-finite points".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "time grid must be strictly increasing".into(),
            ));
        }
        Ok(Self(points))
    }

    /// `n` evenly spaced points from `start` to `end` inclusive.
    pub fn linspace(start: T, end: T, n: usize) -> Result<Self> {
        if n == 1 {
            return Self::new(vec![start]);
        }
        let step = (end - start) / T::from_usize(n - 1).unwrap();
        let mut pts: Vec<T> = (0..n).map(|i| start + step * T::from_usize(i).unwrap()).collect();
        if let Some(last) = pts.last_mut() {
            *last = end;
        }
        Self::new(pts)
    }

    pub fn points(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> T {
        self.0[0]
    }

    pub fn last(&self) -> T {
        self.0[self.0.len() - 1]
    }

    /// Interpolation stencil `(i0, i1, w0, w1)` for one query.
    pub fn locate(&self, query: T) -> Result<(usize, usize, T, T)> {
        let (lo, hi) = (self.first(), self.last());
        if !(query >= lo && query <= hi) {
            return Err(Error::OutOfRange {
                query: query.as_f64(),
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        let pts = &self.0;
        // first index whose point exceeds the query
        let upper = pts.partition_point(|&p| p <= query);
        if upper == 0 {
            return Ok((0, 0, T::one(), T::zero()));
        }
        let i0 = upper - 1;
        if i0 + 1 == pts.len() || pts[i0] == query {
            return Ok((i0, i0, T::one(), T::zero()));
        }
        let w1 = (query - pts[i0]) / (pts[i0 + 1] - pts[i0]);
        Ok((i0, i0 + 1, T::one() - w1, w1))
    }

    pub fn interp_index(&self, queries: &[T]) -> Result<InterpIndex<T>> {
        let stencil = queries
            .iter()
            .map(|&q| self.locate(q))
            .collect::<Result<Vec<_>>>()?;
        InterpIndex::new(self.len(), stencil)
    }
}

/// One axis of a regular spatial lattice: `count` points from `lo` to `hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeAxis<T> {
    pub lo: T,
    pub hi: T,
    pub count: usize,
}

impl<T: Scalar> LatticeAxis<T> {
    pub fn point(&self, i: usize) -> T {
        if self.count <= 1 {
            return self.lo;
        }
        self.lo + (self.hi - self.lo) * T::from_usize(i).unwrap() / T::from_usize(self.count - 1).unwrap()
    }
}

/// Regular lattice over a box in space.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice<T> {
    pub axes: Vec<LatticeAxis<T>>,
}

impl<T: Scalar> Lattice<T> {
    pub fn new(axes: Vec<LatticeAxis<T>>) -> Result<Self> {
        if axes.iter().any(|a| a.count == 0 || a.hi < a.lo) {
            return Err(Error::InvalidArgument("degenerate lattice axis".into()));
        }
        Ok(Self { axes })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.count).collect()
    }

    pub fn num_points(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    /// Coordinates of the lattice point with row-major flat index `flat`.
    pub fn coords(&self, mut flat: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.axes.len()];
        for (i, axis) in self.axes.iter().enumerate().rev() {
            out[i] = axis.point(flat % axis.count);
            flat /= axis.count;
        }
        out
    }
}

/// Values of a function on a time grid, optionally times a spatial lattice.
///
/// `values` has shape `[N, d]`, or `[N, X_1, .., X_n, d]` with a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction<T> {
    pub times: TimeGrid<T>,
    pub lattice: Option<Lattice<T>>,
    pub values: Tensor<T>,
}

impl<T: Scalar> GridFunction<T> {
    pub fn new(times: TimeGrid<T>, values: Tensor<T>) -> Result<Self> {
        Self::with_lattice(times, None, values)
    }

    pub fn with_lattice(
        times: TimeGrid<T>,
        lattice: Option<Lattice<T>>,
        values: Tensor<T>,
    ) -> Result<Self> {
        let mut expected = vec![times.len()];
        if let Some(l) = &lattice {
            expected.extend(l.shape());
        }
        let s = values.shape();
        let ok = s.len() == expected.len() + 1 && s[..expected.len()] == expected[..];
        if !ok {
            return Err(Error::GridMismatch(format!(
                "values of shape {:?} do not fit grid {:?} plus a channel axis",
                s, expected
            )));
        }
        Ok(Self {
            times,
            lattice,
            values,
        })
    }

    /// Samples `f` at every grid time.
    pub fn from_fn(times: TimeGrid<T>, dim: usize, f: impl Fn(T) -> Vec<T>) -> Result<Self> {
        let mut data = Vec::with_capacity(times.len() * dim);
        for &t in times.points() {
            let v = f(t);
            if v.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "function returned {} channels, expected {dim}",
                    v.len()
                )));
            }
            data.extend(v);
        }
        let values = Tensor::new(vec![times.len(), dim], data)?;
        Self::new(times, values)
    }

    /// Channel count `d`.
    pub fn dim(&self) -> usize {
        *self.values.shape().last().unwrap()
    }

    pub fn n_time(&self) -> usize {
        self.times.len()
    }

    pub fn n_space(&self) -> usize {
        self.lattice.as_ref().map_or(1, Lattice::num_points)
    }

    /// Values at time index `k`, flattened over space and channels.
    pub fn row(&self, k: usize) -> &[T] {
        let w = self.values.numel() / self.n_time();
        &self.values.data()[k * w..(k + 1) * w]
    }
}

/// Piecewise-linear interpolation in time; exact at grid nodes. With a lattice
/// the result holds every spatial point's channels in row-major order.
pub fn interp_linear<T: Scalar>(f: &GridFunction<T>, query: T) -> Result<Vec<T>> {
    let (i0, i1, w0, w1) = f.times.locate(query)?;
    if i0 == i1 {
        return Ok(f.row(i0).to_vec());
    }
    Ok(f.row(i0)
        .iter()
        .zip(f.row(i1))
        .map(|(&a, &b)| w0 * a + w1 * b)
        .collect())
}

/// Integration bound as a function of the global time `t`.
#[derive(Clone)]
pub enum Bound<T> {
    Constant(T),
    /// `t` itself.
    Time,
    /// `t + offset`.
    Offset(T),
    Custom(Arc<dyn Fn(T) -> T + Send + Sync>),
}

impl<T: Scalar> Bound<T> {
    pub fn at(&self, t: T) -> T {
        match self {
            Bound::Constant(c) => *c,
            Bound::Time => t,
            Bound::Offset(c) => t + *c,
            Bound::Custom(f) => f(t),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Bound<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Constant(c) => write!(f, "Constant({c:?})"),
            Bound::Time => write!(f, "Time"),
            Bound::Offset(c) => write!(f, "Offset({c:?})"),
            Bound::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// `[lower(t), upper(t)]`.
#[derive(Clone, Debug)]
pub struct Interval<T> {
    pub lower: Bound<T>,
    pub upper: Bound<T>,
}

impl<T: Scalar> Interval<T> {
    pub fn fixed(a: T, b: T) -> Self {
        Self {
            lower: Bound::Constant(a),
            upper: Bound::Constant(b),
        }
    }

    /// `[t0, t]`.
    pub fn up_to_time(t0: T) -> Self {
        Self {
            lower: Bound::Constant(t0),
            upper: Bound::Time,
        }
    }

    pub fn at(&self, t: T) -> Result<(T, T)> {
        let (a, b) = (self.lower.at(t), self.upper.at(t));
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite(format!("integration bounds at t = {t}")));
        }
        if a > b {
            return Err(Error::ReversedBounds {
                lower: a.as_f64(),
                upper: b.as_f64(),
            });
        }
        Ok((a, b))
    }
}

#[derive(Clone, Debug)]
pub enum Domain<T> {
    Interval(Interval<T>),
    /// Box `space` (per-axis `[lo, hi]`) times a time interval.
    SpaceTime {
        space: Vec<(T, T)>,
        time: Interval<T>,
    },
}

#[derive(Clone, Debug)]
pub struct IntegrationSpec<T> {
    pub n_samples: usize,
    pub seed: u64,
    pub domain: Domain<T>,
}

impl<T: Scalar> IntegrationSpec<T> {
    pub fn interval(n_samples: usize, seed: u64, interval: Interval<T>) -> Self {
        Self {
            n_samples,
            seed,
            domain: Domain::Interval(interval),
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Deterministic uniform stream keyed by `(seed, stream)`.
pub struct SampleStream {
    rng: ChaCha8Rng,
}

impl SampleStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform<T: Scalar>(&mut self) -> T {
        T::lit(self.rng.gen::<f64>())
    }
}

/// Sample positions in `[a, b]` for one global time, plus the interval length.
pub fn interval_samples<T: Scalar>(
    interval: &Interval<T>,
    t: T,
    stream: u64,
    n_samples: usize,
    seed: u64,
) -> Result<(T, Vec<T>)> {
    let (a, b) = interval.at(t)?;
    let mut rng = SampleStream::new(seed, stream);
    let len = b - a;
    let pts = (0..n_samples)
        .map(|_| {
            let u: T = rng.uniform();
            // keep the endpoint inside [a, b] under rounding
            (a + len * u).min(b)
        })
        .collect();
    Ok((len, pts))
}

fn accumulate_sample<T: Scalar>(acc: &mut Vec<T>, v: Vec<T>, at: T) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("integrand sample at s = {at}")));
    }
    if acc.is_empty() {
        *acc = v;
    } else if acc.len() != v.len() {
        return Err(Error::InvalidArgument("integrand changed output dimension".into()));
    } else {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    Ok(())
}

/// `(b - a) * mean(integrand(s_k))` over uniform samples `s_k` in
/// `[a(t), b(t)]` drawn from stream `(spec.seed, stream)`.
pub fn mc_integrate<T: Scalar>(
    mut integrand: impl FnMut(T) -> Vec<T>,
    t: T,
    stream: u64,
    spec: &IntegrationSpec<T>,
) -> Result<Vec<T>> {
    spec.check()?;
    let Domain::Interval(interval) = &spec.domain else {
        return Err(Error::InvalidArgument(
            "mc_integrate needs an interval domain".into(),
        ));
    };
    let (len, pts) = interval_samples(interval, t, stream, spec.n_samples, spec.seed)?;
    let mut acc = Vec::new();
    for s in pts {
        accumulate_sample(&mut acc, integrand(s), s)?;
    }
    let n = T::from_usize(spec.n_samples).unwrap();
    Ok(acc.into_iter().map(|x| len * (x / n)).collect())
}

/// `volume(space) * (b - a) * mean(integrand(x_k, s_k))` over joint uniform
/// samples of the box and the time interval.
pub fn mc_integrate_spacetime<T: Scalar>(
    mut integrand: impl FnMut(&[T], T) -> Vec<T>,
    t: T,
    stream: u64,
    spec: &IntegrationSpec<T>,
) -> Result<Vec<T>> {
    spec.check()?;
    let Domain::SpaceTime { space, time } = &spec.domain else {
        return Err(Error::InvalidArgument(
            "mc_integrate_spacetime needs a space-time domain".into(),
        ));
    };
    let (a, b) = time.at(t)?;
    let mut volume = T::one();
    for &(lo, hi) in space {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite("space box bounds".into()));
        }
        if lo > hi {
            return Err(Error::ReversedBounds {
                lower: lo.as_f64(),
                upper: hi.as_f64(),
            });
        }
        volume *= hi - lo;
    }
    let mut rng = SampleStream::new(spec.seed, stream);
    let mut x = vec![T::zero(); space.len()];
    let mut acc = Vec::new();
    for _ in 0..spec.n_samples {
        for (xi, &(lo, hi)) in x.iter_mut().zip(space) {
            let u: T = rng.uniform();
            *xi = lo + (hi - lo) * u;
        }
        let u: T = rng.uniform();
        let s = (a + (b - a) * u).min(b);
        accumulate_sample(&mut acc, integrand(&x, s), s)?;
    }
    let n = T::from_usize(spec.n_samples).unwrap();
    let scale = volume * (b - a);
    Ok(acc.into_iter().map(|v| scale * (v / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_interval(n: usize, seed: u64) -> IntegrationSpec<f64> {
        IntegrationSpec::interval(n, seed, Interval::fixed(0.0, 1.0))
    }

    #[test]
    fn interp_midpoint_and_nodes() {
        let g = GridFunction::new(
            TimeGrid::new(vec![0.0, 1.0]).unwrap(),
            Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(interp_linear(&g, 0.5).unwrap(), vec![1.0]);

        let g = GridFunction::new(
            TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap(),
            Tensor::new(vec![3, 1], vec![0.0, 1.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(interp_linear(&g, 1.5).unwrap(), vec![2.5]);
        assert_eq!(interp_linear(&g, 2.0).unwrap(), vec![4.0]);
    }

    #[test]
    fn interp_is_exact_at_every_node() {
        let times = TimeGrid::linspace(0.0, 3.0, 7).unwrap();
        let g = GridFunction::from_fn(times.clone(), 2, |t: f64| vec![t.sin(), t * t]).unwrap();
        for (k, &t) in times.points().iter().enumerate() {
            assert_eq!(interp_linear(&g, t).unwrap(), g.row(k).to_vec());
        }
    }

    #[test]
    fn interp_outside_range_fails() {
        let g = GridFunction::from_fn(TimeGrid::linspace(0.0, 1.0, 3).unwrap(), 1, |t| vec![t])
            .unwrap();
        assert!(matches!(interp_linear(&g, 1.5), Err(Error::OutOfRange { .. })));
        assert!(matches!(interp_linear(&g, -0.1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn grid_must_increase() {
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn constant_integrand_is_exact() {
        for n in [1, 7, 1000] {
            let v = mc_integrate(|_| vec![1.0], 0.0, 0, &unit_interval(n, 3)).unwrap();
            assert!((v[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_integrand_within_three_sigma() {
        let n = 100_000;
        let v = mc_integrate(|s| vec![s], 0.0, 0, &unit_interval(n, 11)).unwrap();
        let bound = 3.0 * (1.0f64 / 12.0).sqrt() / (n as f64).sqrt();
        assert!((v[0] - 0.5).abs() < bound, "{} vs bound {bound}", v[0]);
        assert!(bound <= 0.003);
    }

    #[test]
    fn empty_volterra_interval_gives_zero() {
        let spec = IntegrationSpec::interval(50, 1, Interval::up_to_time(0.0));
        let v = mc_integrate(|s| vec![s + 1.0], 0.0, 0, &spec).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn reversed_bounds_error() {
        let spec = IntegrationSpec::interval(10, 1, Interval::fixed(1.0, 0.0));
        assert!(matches!(
            mc_integrate(|_| vec![1.0], 0.0, 0, &spec),
            Err(Error::ReversedBounds { .. })
        ));
    }

    #[test]
    fn non_finite_sample_errors() {
        let res = mc_integrate(|_| vec![f64::NAN], 0.0, 0, &unit_interval(4, 1));
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(mc_integrate(|_| vec![1.0], 0.0, 0, &unit_interval(0, 1)).is_err());
    }

    #[test]
    fn spacetime_constant_and_degenerate() {
        let spec = IntegrationSpec {
            n_samples: 100,
            seed: 5,
            domain: Domain::SpaceTime {
                space: vec![(0.0, 1.0), (0.0, 1.0)],
                time: Interval::fixed(0.0, 1.0),
            },
        };
        let v: Vec<f64> = mc_integrate_spacetime(|_, _| vec![1.0], 0.0, 0, &spec).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);

        let flat = IntegrationSpec {
            domain: Domain::SpaceTime {
                space: vec![(0.0, 0.0), (0.0, 1.0)],
                time: Interval::fixed(0.0, 1.0),
            },
            ..spec
        };
        let v = mc_integrate_spacetime(|x, _| vec![x[1] + 3.0], 0.0, 0, &flat).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn spacetime_first_coordinate_within_three_sigma() {
        let n = 100_000;
        let spec = IntegrationSpec {
            n_samples: n,
            seed: 17,
            domain: Domain::SpaceTime {
                space: vec![(0.0, 1.0), (0.0, 1.0)],
                time: Interval::fixed(0.0, 1.0),
            },
        };
        let v: Vec<f64> = mc_integrate_spacetime(|x, _| vec![x[0]], 0.0, 0, &spec).unwrap();
        let bound = 3.0 * (1.0f64 / 12.0).sqrt() / (n as f64).sqrt();
        assert!((v[0] - 0.5).abs() < bound);
    }

    #[test]
    fn streams_differ_by_key() {
        let a: f64 = SampleStream::new(1, 0).uniform();
        let b: f64 = SampleStream::new(1, 1).uniform();
        let c: f64 = SampleStream::new(2, 0).uniform();
        let a2: f64 = SampleStream::new(1, 0).uniform();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
