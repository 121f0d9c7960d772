//! Dense layers built on the computation record.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Record, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, rec: &mut Record<'_, T>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => rec.tanh(x),
            Activation::Relu => rec.relu(x),
        }
    }
}

/// Uniform draws in `[-bound, bound]`.
pub fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers the layer's parameters, drawn uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and multiplied by `gain`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform_tensor::<T>(rng, &[fan_in, fan_out], bound).map(|x| x * T::lit(gain));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = uniform_tensor::<T>(rng, &[1, fan_out], bound).map(|x| x * T::lit(gain));
            store.add(format!("{name}.bias"), b)
        });
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Applies the layer along the last axis of `x`, any rank >= 1.
    pub fn forward<T: Scalar>(&self, rec: &mut Record<'_, T>, x: Var) -> Result<Var> {
        let shape = rec.shape(x).to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::shape("linear", &shape, &[self.fan_in, self.fan_out]));
        }
        let rows = shape.iter().product::<usize>() / self.fan_in;
        let flat = if shape.len() == 2 {
            x
        } else {
            rec.reshape(x, &[rows, self.fan_in])?
        };
        let w = rec.param(self.weight);
        let mut y = rec.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = rec.param(b);
            y = rec.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = self.fan_out;
        rec.reshape(y, &out)
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, 1.0, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward<T: Scalar>(&self, rec: &mut Record<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(rec, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(rec, h)?;
            }
        }
        Ok(h)
    }

    /// Multiplies the final layer's parameters by `factor`.
    pub fn scale_output<T: Scalar>(&self, store: &mut ParamStore<T>, factor: T) {
        if let Some(last) = self.layers.last() {
            for id in std::iter::once(last.weight).chain(last.bias) {
                for x in store.get_mut(id).data_mut() {
                    *x *= factor;
                }
            }
        }
    }
}
