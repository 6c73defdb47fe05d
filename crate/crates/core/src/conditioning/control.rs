//! Spot-wise control network: a single 3×3 convolution over the coarse
//! gene map, a time-conditioned two-layer perceptron producing control
//! tokens, and zero-initialized per-block projections added as gated
//! residuals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::genemap::Grid;
use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, Mlp};
use crate::numerics::{Graph, ParamStore, Tensor2, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Square map side (H = W).
    pub grid: usize,
    pub channels: usize,
    /// Control token width `d_u`.
    pub token_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub scale: f64,
    /// Warm-up length of the gate; 0.05 gives the sharp variant.
    pub t_warm: f64,
    /// Injection block indices; `None` selects every block.
    pub blocks: Option<Vec<usize>>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            channels: 32,
            token_dim: 64,
            hidden: 64,
            time_dim: 16,
            scale: 1.0,
            t_warm: 0.2,
            blocks: None,
        }
    }
}

impl ControlConfig {
    pub const SHARP_T_WARM: f64 = 0.05;

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.channels == 0 || self.token_dim == 0 || self.hidden == 0 {
            return Err(Error::Validation("control grid, channels, token_dim and hidden must be >= 1".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Validation(format!("control time_dim {} must be even and >= 2", self.time_dim)));
        }
        if !(self.scale >= 0.0) || !(self.t_warm > 0.0) {
            return Err(Error::Validation(format!(
                "control scale {} must be >= 0 and t_warm {} > 0",
                self.scale, self.t_warm
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::square(self.grid)
    }

    pub fn injects(&self, ell: usize) -> bool {
        self.blocks.as_ref().is_none_or(|b| b.contains(&ell))
    }
}

pub fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// `α(t) = scale·smoothstep(t/t_warm)`.
pub fn warmup_gate(t: f64, scale: f64, t_warm: f64) -> f64 {
    scale * smoothstep(t / t_warm)
}

/// Interleaved `(sin ω_k t, cos ω_k t)` with `ω_k = 2^k·π`, so `t = 0`
/// gives `(0, 1, 0, 1, …)`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = std::f64::consts::PI * (1u64 << k.min(62)) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

#[derive(Clone, Debug)]
pub struct ControlNet {
    pub cfg: ControlConfig,
    pub rank: usize,
    pub conv: Linear,
    pub h: Mlp,
    /// One zero-initialized `d_u → d` projection per backbone block.
    pub proj: Vec<Linear>,
}

impl ControlNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ControlConfig,
        rank: usize,
        d_model: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if rank == 0 {
            return Err(Error::Validation("control needs a projection rank >= 1".into()));
        }
        let conv = Linear::new(store, &format!("{name}.conv"), 9 * rank, cfg.channels, rng);
        let h = Mlp::new(
            store,
            &format!("{name}.h"),
            [rank + cfg.channels + cfg.time_dim, cfg.hidden, cfg.token_dim],
            rng,
        );
        let proj = (0..layers)
            .map(|l| Linear::zeros(store, &format!("{name}.proj{l}"), cfg.token_dim, d_model))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            rank,
            conv,
            h,
            proj,
        })
    }

    /// Control tokens `u = h_ω([adjacent token, sampled map, time])`.
    /// `gathered` is the `N×9r` stencil input from
    /// [`super::MapOperator::gather`].
    pub fn tokens(&self, g: &mut Graph, store: &ParamStore, adj: &Tensor2, gathered: &Tensor2, t: f64) -> Result<Var> {
        let n = adj.rows();
        if adj.cols() != self.rank || gathered.shape() != (n, 9 * self.rank) {
            return Err(Error::shape(
                "ControlNet::tokens",
                format!("adj {:?}, gathered {:?}, rank {}", adj.shape(), gathered.shape(), self.rank),
            ));
        }
        let gin = g.constant(gathered.clone())?;
        let sampled = self.conv.forward(g, store, gin)?;
        let a = g.constant(adj.clone())?;
        let tf = Tensor2::from_vec(1, self.cfg.time_dim, time_features(t, self.cfg.time_dim))?;
        let tv = g.constant(tf)?;
        let tv = g.repeat_rows(tv, n)?;
        let x = g.concat_cols(&[a, sampled, tv])?;
        self.h.forward(g, store, x)
    }

    pub fn gate(&self, t: f64) -> f64 {
        warmup_gate(t, self.cfg.scale, self.cfg.t_warm)
    }

    /// `x + α(t)·Proj_ℓ(u)`; blocks outside the injection set pass through.
    pub fn inject(&self, g: &mut Graph, store: &ParamStore, x: Var, u: Var, ell: usize, t: f64) -> Result<Var> {
        if !self.cfg.injects(ell) || ell >= self.proj.len() {
            log::debug!("control injection skipped for block {ell}");
            return Ok(x);
        }
        let p = self.proj[ell].forward(g, store, u)?;
        let p = g.scale(p, self.gate(t))?;
        g.add(x, p)
    }

    pub fn flops(&self, n: usize) -> u64 {
        let injected = (0..self.proj.len()).filter(|&l| self.cfg.injects(l)).count();
        self.conv.flops(n) + self.h.flops(n) + injected as u64 * self.proj[0].flops(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::genemap::MapOperator;
    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::spatial_model::Frame;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ControlConfig {
        ControlConfig {
            grid: 6,
            channels: 3,
            token_dim: 4,
            hidden: 5,
            time_dim: 4,
            ..ControlConfig::default()
        }
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).unwrap().data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn gate_schedule() {
        assert_eq!(warmup_gate(0.0, 1.0, 0.2), 0.0);
        assert_eq!(warmup_gate(0.2, 1.0, 0.2), 1.0);
        assert_eq!(warmup_gate(0.7, 2.0, 0.2), 2.0);
        assert!((warmup_gate(0.1, 1.0, 0.2) - 0.5).abs() < 1e-15);
        assert!(warmup_gate(0.04, 1.0, ControlConfig::SHARP_T_WARM) > warmup_gate(0.04, 1.0, 0.2));
        for i in 0..=100 {
            let a = warmup_gate(i as f64 / 100.0, 1.5, 0.2);
            assert!((0.0..=1.5).contains(&a));
        }
    }

    #[test]
    fn time_features_start_pattern() {
        assert_eq!(time_features(0.0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    fn setup() -> (ParamStore, ControlNet, Tensor2, Tensor2) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = ControlNet::new(&mut store, "control", &small_cfg(), 2, 3, 2, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let coords: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, (i * i) as f64 * 0.3]).collect();
        let frame = Frame::from_points(coords.iter().copied());
        let feats = Tensor2::from_fn(5, 2, |i, j| ((i + 2 * j) as f64).sin().abs());
        let op = MapOperator::new(small_cfg().grid(), &frame, &coords).unwrap();
        let adj = Tensor2::from_fn(5, 2, |i, j| if i == 0 { 0.0 } else { (i * j) as f64 * 0.1 });
        (store, net, adj, op.gather(&feats).unwrap())
    }

    #[test]
    fn token_shape_finite_and_time_live() {
        let (store, net, adj, gathered) = setup();
        let eval = |t: f64| {
            let mut g = Graph::new();
            let u = net.tokens(&mut g, &store, &adj, &gathered, t).unwrap();
            g.value(u).clone()
        };
        let a = eval(0.3);
        assert_eq!(a.shape(), (5, 4));
        assert!(a.is_finite());
        let zero = eval(0.3);
        assert_eq!(a, zero);
        assert_ne!(a, eval(0.6));
        let mut g = Graph::new();
        let z = net
            .tokens(&mut g, &store, &Tensor2::zeros(5, 2), &Tensor2::zeros(5, 18), 0.5)
            .unwrap();
        assert!(g.value(z).is_finite());
    }

    #[test]
    fn inject_rules() {
        let (store, net, adj, gathered) = setup();
        let x0 = Tensor2::from_fn(5, 3, |i, j| (i + j) as f64);
        let run = |ell: usize, t: f64, net: &ControlNet| {
            let mut g = Graph::new();
            let u = net.tokens(&mut g, &store, &adj, &gathered, t).unwrap();
            let x = g.constant(x0.clone()).unwrap();
            let y = net.inject(&mut g, &store, x, u, ell, t).unwrap();
            let p = net.proj[ell.min(1)].forward(&mut g, &store, u).unwrap();
            (g.value(y).clone(), g.value(p).clone())
        };
        assert_eq!(run(0, 0.0, &net).0, x0);
        let (y, p) = run(1, 0.5, &net);
        let mut expect = x0.clone();
        expect.add_assign(&p);
        assert_eq!(y, expect);
        let mut only0 = net.clone();
        only0.cfg.blocks = Some(vec![0]);
        assert_eq!(run(1, 0.5, &only0).0, x0);
        // out(α) − out(0) = α·(out(1) − out(0))
        for (t, alpha) in [(0.05, warmup_gate(0.05, 1.0, 0.2)), (0.12, warmup_gate(0.12, 1.0, 0.2))] {
            let (y, p) = run(0, t, &net);
            for i in 0..5 {
                for j in 0..3 {
                    assert!((y.get(i, j) - x0.get(i, j) - alpha * p.get(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conditioning_path_grad_check() {
        let (store, net, adj, gathered) = setup();
        let x0 = Tensor2::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).cos());
        let rep = grad_check(
            &store,
            |g, s| {
                let u = net.tokens(g, s, &adj, &gathered, 0.13)?;
                let x = g.constant(x0.clone())?;
                let y = net.inject(g, s, x, u, 1, 0.13)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
