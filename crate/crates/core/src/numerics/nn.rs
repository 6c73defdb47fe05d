//! Small layer helpers over [`ParamStore`] + [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor2, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_normal(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let bias = Some(store.add(format!("{name}.b"), Tensor2::zeros(1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_normal(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        }
    }

    /// Zero-initialized weights, as for control projections that must start inert.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.w"), Tensor2::zeros(fan_in, fan_out));
        let bias = Some(store.add(format!("{name}.b"), Tensor2::zeros(1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.fan_in * self.fan_out) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor2::filled(1, width, 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor2::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.param(store, self.scale);
        let h = g.param(store, self.shift);
        g.layer_norm(x, s, h, LAYER_NORM_EPS)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.second.forward(g, store, h)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        self.first.flops(rows) + self.second.flops(rows)
    }
}
