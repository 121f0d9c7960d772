//! Attention integrator: the integral term is replaced by masked multi-head
//! self-attention over tokens `concat(y, x, t)`, iterated like the Picard loop.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};
use crate::quadrature::{GridFunction, Lattice, TimeGrid};
use crate::scalar::Scalar;
use crate::solver::{iterate, RecordedSolve, SolutionTrajectory, SolverConfig};
use crate::tensor::{ParamStore, Record, Tensor, Var};

/// Which keys a query may attend to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSpec {
    /// Every token sees every token (Fredholm-type).
    #[default]
    None,
    /// A token at time `t_k` sees only tokens at times `t_l <= t_k` (Volterra-type).
    CausalInTime,
}

impl MaskSpec {
    /// Additive mask `[1, L, L]` with entries `0` or `-inf`.
    pub fn tensor<T: Scalar>(self, layout: &TokenLayout<T>) -> Tensor<T> {
        let l = layout.len();
        let mut data = vec![T::zero(); l * l];
        if self == MaskSpec::CausalInTime {
            for q in 0..l {
                let tq = layout.position(q).1;
                for k in 0..l {
                    if layout.position(k).1 > tq {
                        data[q * l + k] = T::neg_infinity();
                    }
                }
            }
        }
        Tensor::new(vec![1, l, l], data).expect("mask shape")
    }

    pub fn allows(self, query_time: usize, key_time: usize) -> bool {
        match self {
            MaskSpec::None => true,
            MaskSpec::CausalInTime => key_time <= query_time,
        }
    }
}

/// Token index `k * n_space + j` holds grid point `(x_j, t_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout<T> {
    pub times: TimeGrid<T>,
    pub lattice: Option<Lattice<T>>,
}

impl<T: Scalar> TokenLayout<T> {
    pub fn new(times: TimeGrid<T>, lattice: Option<Lattice<T>>) -> Self {
        Self { times, lattice }
    }

    pub fn n_time(&self) -> usize {
        self.times.len()
    }

    pub fn n_space(&self) -> usize {
        self.lattice.as_ref().map_or(1, Lattice::num_points)
    }

    pub fn coord_dims(&self) -> usize {
        self.lattice.as_ref().map_or(0, Lattice::ndim)
    }

    pub fn len(&self) -> usize {
        self.n_time() * self.n_space()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(space index, time index)` of a token.
    pub fn position(&self, token: usize) -> (usize, usize) {
        (token % self.n_space(), token / self.n_space())
    }

    /// `(x_1, .., x_n, t)` of a token.
    pub fn coords(&self, token: usize) -> Vec<T> {
        let (j, k) = self.position(token);
        let mut c = self.lattice.as_ref().map_or_else(Vec::new, |l| l.coords(j));
        c.push(self.times.points()[k]);
        c
    }

    /// Coordinate channels for a batch, `[B, L, coord_dims + 1]`.
    pub fn coord_tensor(&self, batch: usize) -> Tensor<T> {
        let w = self.coord_dims() + 1;
        let mut one = Vec::with_capacity(self.len() * w);
        for i in 0..self.len() {
            one.extend(self.coords(i));
        }
        let mut data = Vec::with_capacity(batch * one.len());
        for _ in 0..batch {
            data.extend_from_slice(&one);
        }
        Tensor::new(vec![batch, self.len(), w], data).expect("coordinate shape")
    }
}

/// Tokens `[B, L, d + coord_dims + 1]` and their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<T> {
    pub tokens: Tensor<T>,
    pub layout: TokenLayout<T>,
    pub dim: usize,
}

impl<T: Scalar> TokenBatch<T> {
    /// The `y` channels, `[B, L, d]`.
    pub fn values(&self) -> Tensor<T> {
        let s = self.tokens.shape();
        let (b, l, w) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * l * self.dim);
        for row in self.tokens.data().chunks(w) {
            data.extend_from_slice(&row[..self.dim]);
        }
        Tensor::new(vec![b, l, self.dim], data).expect("value shape")
    }
}

/// Builds the single-item token batch for `y`.
pub fn embed_tokens<T: Scalar>(y: &GridFunction<T>) -> Result<TokenBatch<T>> {
    if !y.values.all_finite() {
        return Err(Error::NonFinite("token values".into()));
    }
    let layout = TokenLayout::new(y.times.clone(), y.lattice.clone());
    let d = y.dim();
    let values = y.values.clone().reshaped(vec![1, layout.len(), d])?;
    let coords = layout.coord_tensor(1);
    let w = d + layout.coord_dims() + 1;
    let mut data = Vec::with_capacity(layout.len() * w);
    for (v, c) in values.data().chunks(d).zip(coords.data().chunks(w - d)) {
        data.extend_from_slice(v);
        data.extend_from_slice(c);
    }
    Ok(TokenBatch {
        tokens: Tensor::new(vec![1, layout.len(), w], data)?,
        layout,
        dim: d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    /// State channels `d`.
    pub dim: usize,
    /// Spatial coordinate count (0 for pure time series).
    pub coord_dims: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub embed_activation: Activation,
    /// Mask applied when the model is trained or evaluated as a solver.
    pub mask: MaskSpec,
    /// 1 shares one block across iterations; `k > 1` gives iteration `i`
    /// block `min(i, k - 1)`.
    pub blocks: usize,
    /// Multiplier on the output projection at initialization.
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            coord_dims: 0,
            d_model: 64,
            n_heads: 4,
            embed_activation: Activation::Tanh,
            mask: MaskSpec::None,
            blocks: 1,
            output_scale: 0.1,
            seed: 0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.d_model == 0 || self.n_heads == 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument(
                "attention sizes must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn token_width(&self) -> usize {
        self.dim + self.coord_dims + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub embed: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Weights of the most recent forward pass, batch item 0, `[H, L, L]`.
#[derive(Clone, Debug)]
struct Snapshot<T> {
    weights: Tensor<T>,
    mask: MaskSpec,
}

#[derive(Debug)]
pub struct AttentionModel<T> {
    pub config: AttentionConfig,
    pub store: ParamStore<T>,
    pub blocks: Vec<AttentionBlock>,
    last: Mutex<Option<Snapshot<T>>>,
}

impl<T: Scalar> Clone for AttentionModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            blocks: self.blocks.clone(),
            last: Mutex::new(self.last.lock().unwrap().clone()),
        }
    }
}

impl<T: Scalar> AttentionModel<T> {
    pub fn new(config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (w, m) = (config.token_width(), config.d_model);
        let blocks = (0..config.blocks)
            .map(|b| {
                let p = format!("block{b}");
                AttentionBlock {
                    embed: Linear::new(&mut store, &format!("{p}.embed"), w, m, true, 1.0, &mut rng),
                    query: Linear::new(&mut store, &format!("{p}.query"), m, m, false, 1.0, &mut rng),
                    key: Linear::new(&mut store, &format!("{p}.key"), m, m, false, 1.0, &mut rng),
                    value: Linear::new(&mut store, &format!("{p}.value"), m, m, false, 1.0, &mut rng),
                    output: Linear::new(
                        &mut store,
                        &format!("{p}.output"),
                        m,
                        config.dim,
                        false,
                        config.output_scale,
                        &mut rng,
                    ),
                }
            })
            .collect();
        Ok(Self {
            config,
            store,
            blocks,
            last: Mutex::new(None),
        })
    }

    fn block(&self, iteration: usize) -> &AttentionBlock {
        &self.blocks[iteration.min(self.blocks.len() - 1)]
    }

    /// Attention integral on recorded tokens `[B, L, w]`; `mask` is `[1, L, L]`.
    /// Returns `[B, L, d]`.
    pub fn attention_integral_recorded(
        &self,
        rec: &mut Record<'_, T>,
        tokens: Var,
        mask: Option<(Var, MaskSpec)>,
        iteration: usize,
    ) -> Result<Var> {
        let shape = rec.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.config.token_width() {
            return Err(Error::shape(
                "attention_integral",
                &shape,
                &[0, 0, self.config.token_width()],
            ));
        }
        let block = self.block(iteration);
        let h = block.embed.forward(rec, tokens)?;
        let h = self.config.embed_activation.apply(rec, h)?;
        let q = block.query.forward(rec, h)?;
        let k = block.key.forward(rec, h)?;
        let v = block.value.forward(rec, h)?;
        let dk = self.config.d_model / self.config.n_heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for i in 0..self.config.n_heads {
            let (lo, hi) = (i * dk, (i + 1) * dk);
            let qh = rec.slice(q, 2, lo, hi)?;
            let kh = rec.slice(k, 2, lo, hi)?;
            let vh = rec.slice(v, 2, lo, hi)?;
            let kt = rec.transpose(kh)?;
            let scores = rec.matmul(qh, kt)?;
            let mut scores = rec.scale(scores, scale)?;
            if let Some((m, _)) = mask {
                scores = rec.add(scores, m)?;
            }
            let w = rec.softmax(scores)?;
            weights.push(rec.value(w).index_axis0(0));
            heads.push(rec.matmul(w, vh)?);
        }
        let cat = rec.concat(&heads, 2)?;
        let out = block.output.forward(rec, cat)?;
        *self.last.lock().unwrap() = Some(Snapshot {
            weights: Tensor::stack(&weights)?,
            mask: mask.map_or(MaskSpec::None, |(_, s)| s),
        });
        Ok(out)
    }

    /// Unrecorded attention integral of a token batch, `[B, L, d]`.
    pub fn attention_integral(&self, tb: &TokenBatch<T>, mask: MaskSpec) -> Result<Tensor<T>> {
        let mut rec = Record::with_params(&self.store);
        let tokens = rec.constant(tb.tokens.clone());
        let m = rec.constant(mask.tensor(&tb.layout));
        let out = self.attention_integral_recorded(&mut rec, tokens, Some((m, mask)), 0)?;
        Ok(rec.value(out).clone())
    }

    /// Recorded batched solve on `[B, L, d]` iterates (time-major tokens).
    pub fn solve_recorded(
        &self,
        rec: &mut Record<'_, T>,
        layout: &TokenLayout<T>,
        free: Var,
        init: Var,
        mask: MaskSpec,
        cfg: &SolverConfig<T>,
    ) -> Result<RecordedSolve<T>> {
        let b = rec.shape(init)[0];
        let coords = rec.constant(layout.coord_tensor(b));
        let m = rec.constant(mask.tensor(layout));
        iterate(rec, &layout.times, init, cfg, |rec, y, it| {
            let tokens = rec.concat(&[y, coords], 2)?;
            let a = self.attention_integral_recorded(rec, tokens, Some((m, mask)), it)?;
            rec.add(free, a)
        })
    }

    /// Solves `y = f + Att(y)` from `y^0 = f`; values keep the shape of `free`.
    pub fn solve_anie(
        &self,
        free: &GridFunction<T>,
        mask: MaskSpec,
        cfg: &SolverConfig<T>,
    ) -> Result<SolutionTrajectory<T>> {
        let layout = TokenLayout::new(free.times.clone(), free.lattice.clone());
        if free.dim() != self.config.dim || layout.coord_dims() != self.config.coord_dims {
            return Err(Error::GridMismatch(
                "free function does not match the model's channels or coordinates".into(),
            ));
        }
        let mut rec = Record::with_params(&self.store);
        let f = rec.constant(free.values.clone().reshaped(vec![1, layout.len(), free.dim()])?);
        let out = self.solve_recorded(&mut rec, &layout, f, f, mask, cfg)?;
        let mut traj = out.trajectory;
        traj.values = traj.values.reshaped(free.values.shape().to_vec())?;
        Ok(traj)
    }

    /// Weights of the last forward pass, `[H, L, L]`.
    pub fn last_attention(&self) -> Result<Tensor<T>> {
        self.last
            .lock()
            .unwrap()
            .as_ref()
            .map(|s| s.weights.clone())
            .ok_or(Error::NoForwardPass)
    }

    /// Per-head weights `[H, L, L]` from the last forward pass on `tb` under `mask`.
    pub fn export_attention(&self, tb: &TokenBatch<T>, mask: MaskSpec) -> Result<Tensor<T>> {
        let guard = self.last.lock().unwrap();
        let snap = guard.as_ref().ok_or(Error::NoForwardPass)?;
        let l = tb.layout.len();
        if snap.weights.shape()[1] != l || snap.mask != mask {
            return Err(Error::NoForwardPass);
        }
        Ok(snap.weights.clone())
    }
}

#[derive(Serialize)]
struct LayoutEntry {
    token: usize,
    space_index: usize,
    time_index: usize,
    x: Vec<f64>,
    t: f64,
}

/// Writes `head_<h>.csv` (row = query token) and `layout.json` into `dir`.
pub fn write_attention_dump<T: Scalar>(
    dir: impl AsRef<Path>,
    weights: &Tensor<T>,
    layout: &TokenLayout<T>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let s = weights.shape();
    if s.len() != 3 || s[1] != layout.len() || s[2] != layout.len() {
        return Err(Error::shape("attention dump", s, &[0, layout.len(), layout.len()]));
    }
    let l = layout.len();
    for h in 0..s[0] {
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join(format!("head_{h}.csv")))?);
        for row in weights.index_axis0(h).data().chunks(l) {
            let line: Vec<String> = row.iter().map(|w| format!("{:.16e}", w.as_f64())).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
    }
    let entries: Vec<LayoutEntry> = (0..l)
        .map(|i| {
            let (j, k) = layout.position(i);
            let c = layout.coords(i);
            LayoutEntry {
                token: i,
                space_index: j,
                time_index: k,
                x: c[..c.len() - 1].iter().map(|v| v.as_f64()).collect(),
                t: c[c.len() - 1].as_f64(),
            }
        })
        .collect();
    fs::write(dir.join("layout.json"), serde_json::to_vec_pretty(&entries)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::LatticeAxis;

    fn model(dim: usize, coord_dims: usize, heads: usize, d_model: usize) -> AttentionModel<f64> {
        AttentionModel::new(AttentionConfig {
            dim,
            coord_dims,
            d_model,
            n_heads: heads,
            seed: 7,
            ..AttentionConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn tokens_concat_value_and_time() {
        let y = GridFunction::new(
            TimeGrid::new(vec![0.0, 1.0]).unwrap(),
            Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap(),
        )
        .unwrap();
        let tb = embed_tokens(&y).unwrap();
        assert_eq!(tb.tokens.shape(), &[1, 2, 2]);
        assert_eq!(tb.tokens.data(), &[5.0, 0.0, 7.0, 1.0]);
        assert_eq!(tb.values().data(), y.values.data());
    }

    #[test]
    fn lattice_tokens_carry_space_and_time() {
        let lat = Lattice::new(vec![
            LatticeAxis { lo: 0.0, hi: 1.0, count: 2 },
            LatticeAxis { lo: 0.0, hi: 1.0, count: 2 },
        ])
        .unwrap();
        let y = GridFunction::with_lattice(
            TimeGrid::new(vec![0.5]).unwrap(),
            Some(lat),
            Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let tb = embed_tokens(&y).unwrap();
        assert_eq!(tb.tokens.shape(), &[1, 4, 4]);
        assert_eq!(&tb.tokens.data()[8..12], &[3.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn causal_mask_by_hand() {
        // N_time = 3, N_space = 2: token i sits at time i / 2
        let lat = Lattice::new(vec![LatticeAxis { lo: 0.0, hi: 1.0, count: 2 }]).unwrap();
        let layout = TokenLayout::new(TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap(), Some(lat));
        let m = MaskSpec::CausalInTime.tensor::<f64>(&layout);
        let open: Vec<Vec<usize>> = (0..6)
            .map(|q| (0..6).filter(|&k| m.get(&[0, q, k]) == 0.0).collect())
            .collect();
        assert_eq!(open[0], vec![0, 1]);
        assert_eq!(open[1], vec![0, 1]);
        assert_eq!(open[2], vec![0, 1, 2, 3]);
        assert_eq!(open[5], vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn attention_rows_are_stochastic_and_masked_entries_zero() {
        let m = model(2, 0, 4, 16);
        let times = TimeGrid::linspace(0.0, 1.0, 6).unwrap();
        let y = GridFunction::from_fn(times, 2, |t: f64| vec![t.sin(), t * t]).unwrap();
        let tb = embed_tokens(&y).unwrap();
        assert!(matches!(
            m.export_attention(&tb, MaskSpec::CausalInTime),
            Err(Error::NoForwardPass)
        ));
        m.attention_integral(&tb, MaskSpec::CausalInTime).unwrap();
        let w = m.export_attention(&tb, MaskSpec::CausalInTime).unwrap();
        assert_eq!(w.shape(), &[4, 6, 6]);
        for h in 0..4 {
            for q in 0..6 {
                let row: f64 = (0..6).map(|k| w.get(&[h, q, k])).sum();
                assert!((row - 1.0).abs() < 1e-12);
                for k in q + 1..6 {
                    assert_eq!(w.get(&[h, q, k]), 0.0);
                }
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = model(1, 0, 2, 4);
        let y = GridFunction::new(
            TimeGrid::new(vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
        )
        .unwrap();
        let tb = embed_tokens(&y).unwrap();
        m.attention_integral(&tb, MaskSpec::None).unwrap();
        let w = m.export_attention(&tb, MaskSpec::None).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_value_projection_gives_free_function() {
        let mut m = model(2, 0, 4, 16);
        let id = m.blocks[0].value.weight;
        m.store.get_mut(id).data_mut().fill(0.0);
        let times = TimeGrid::linspace(0.0, 1.0, 5).unwrap();
        let f = GridFunction::from_fn(times, 2, |t: f64| vec![t.cos(), t]).unwrap();
        let tb = embed_tokens(&f).unwrap();
        assert!(m.attention_integral(&tb, MaskSpec::None).unwrap().data().iter().all(|&x| x == 0.0));
        let cfg = SolverConfig {
            max_iter: 2,
            tolerance: 0.0,
            ..SolverConfig::verification(10, 0)
        };
        let out = m.solve_anie(&f, MaskSpec::None, &cfg).unwrap();
        assert_eq!(out.values, f.values);
        assert_eq!(out.iterations_used, 1);
    }

    #[test]
    fn causal_output_ignores_future_values() {
        let m = model(1, 0, 2, 8);
        let times = TimeGrid::linspace(0.0, 1.0, 6).unwrap();
        let a = GridFunction::from_fn(times.clone(), 1, |t: f64| vec![t.sin()]).unwrap();
        let mut b = a.clone();
        b.values.set(&[4, 0], 10.0);
        b.values.set(&[5, 0], -3.0);
        let oa = m.attention_integral(&embed_tokens(&a).unwrap(), MaskSpec::CausalInTime).unwrap();
        let ob = m.attention_integral(&embed_tokens(&b).unwrap(), MaskSpec::CausalInTime).unwrap();
        assert_eq!(&oa.data()[..4], &ob.data()[..4]);
        assert_ne!(oa.data()[4], ob.data()[4]);
    }

    #[test]
    fn dump_writes_one_csv_per_head() {
        let m = model(1, 0, 4, 8);
        let times = TimeGrid::linspace(0.0, 1.0, 3).unwrap();
        let y = GridFunction::from_fn(times, 1, |t: f64| vec![t]).unwrap();
        let tb = embed_tokens(&y).unwrap();
        m.attention_integral(&tb, MaskSpec::None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_attention_dump(dir.path(), &m.last_attention().unwrap(), &tb.layout).unwrap();
        for h in 0..4 {
            let text = fs::read_to_string(dir.path().join(format!("head_{h}.csv"))).unwrap();
            assert_eq!(text.lines().count(), 3);
        }
        let layout: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("layout.json")).unwrap()).unwrap();
        assert_eq!(layout[2]["t"], 1.0);
    }
}
