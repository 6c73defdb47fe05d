//! The time-conditioned backbone that predicts the clean endpoint.
//!
//! Each of the `L` blocks runs local kNN attention with radial-basis edge
//! biases, the optional control injection, global set attention and a
//! feed-forward layer, all pre-normed with residuals.

pub mod gsa;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{time_features, ControlConfig, ControlNet, MapOperator};
use crate::error::{Error, Result};
use crate::numerics::nn::{LayerNorm, Linear, Mlp};
use crate::numerics::{AttentionSlots, Checkpoint, Graph, ParamStore, Tensor2, Var};
use crate::spatial_model::{build_knn_graph, positional_matrix, Frame, Section, SlideStack};

pub use gsa::{DenseReference, FeedForward, GsaBlock, Mha};

pub const DENOISER_PREFIX: &str = "denoiser/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub edge_dim: usize,
    pub k: usize,
    pub dropout: f64,
    /// Inducing tokens per block; 0 disables global set attention.
    pub inducing: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub pos_dim: usize,
    pub rbf_bins: usize,
    pub ff_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            edge_dim: 128,
            k: 8,
            dropout: 0.2,
            inducing: 16,
            time_dim: 16,
            time_hidden: 64,
            pos_dim: 16,
            rbf_bins: 16,
            ff_mult: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        gsa::check_heads(self.hidden, self.heads)?;
        if self.layers == 0 || self.edge_dim == 0 || self.rbf_bins == 0 || self.ff_mult == 0 || self.time_hidden == 0 {
            return Err(Error::Validation(
                "layers, edge_dim, rbf_bins, ff_mult and time_hidden must be >= 1".into(),
            ));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Validation(format!("time_dim {} must be even and >= 2", self.time_dim)));
        }
        if self.pos_dim % 4 != 0 {
            return Err(Error::Validation(format!("pos_dim {} must be a multiple of 4", self.pos_dim)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} must be in [0,1)", self.dropout)));
        }
        Ok(())
    }

    fn meta(&self) -> Vec<f64> {
        [
            self.layers,
            self.hidden,
            self.heads,
            self.edge_dim,
            self.k,
            self.inducing,
            self.time_dim,
            self.time_hidden,
            self.pos_dim,
            self.rbf_bins,
            self.ff_mult,
        ]
        .iter()
        .map(|&v| v as f64)
        .chain([self.dropout])
        .collect()
    }
}

/// Data-derived sizes and constants the backbone is built around.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserShape {
    pub genes: usize,
    pub emb_dim: usize,
    pub frame: Frame,
    /// Radial-basis centers for edge distances (frozen).
    pub rbf_centers: Vec<f64>,
    /// Width of the gene projection feeding the control network.
    pub control_rank: usize,
}

/// Quantiles of within-section kNN edge lengths over sections `zs`.
pub fn rbf_centers_from(stack: &SlideStack, zs: &[usize], k: usize, bins: usize) -> Result<Vec<f64>> {
    let mut d = Vec::new();
    for &z in zs {
        let sec = stack
            .section(z)
            .ok_or_else(|| Error::Validation(format!("no section z={z}")))?;
        if sec.is_empty() {
            continue;
        }
        let gr = build_knn_graph(sec, k)?;
        d.extend(gr.distances.iter().flatten().copied());
    }
    d.push(0.0);
    d.sort_by(f64::total_cmp);
    Ok((0..bins)
        .map(|b| {
            let q = if bins == 1 { 0.5 } else { b as f64 / (bins - 1) as f64 };
            d[((d.len() - 1) as f64 * q).round() as usize]
        })
        .collect())
}

fn rbf_width(centers: &[f64]) -> f64 {
    let span = centers.last().copied().unwrap_or(0.0) - centers.first().copied().unwrap_or(0.0);
    let w = span / centers.len().max(2).saturating_sub(1) as f64;
    if w > 0.0 {
        w
    } else {
        1.0
    }
}

/// Everything about a section the backbone needs besides `x_t` and `t`;
/// built once and reused across steps.
#[derive(Clone, Debug)]
pub struct SectionContext {
    pub n: usize,
    pub static_features: Tensor2,
    pub slots: Rc<AttentionSlots>,
    pub rbf: Tensor2,
    pub map: Option<MapOperator>,
    /// Spots outside the model frame, clamped for positional features.
    pub clamped: usize,
}

/// Per-call conditioning inputs for the control network.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// `N×r` adjacent tokens.
    pub adjacent: Tensor2,
    /// `N×9r` gene-map stencil input built from `P·x_t`.
    pub gathered: Tensor2,
}

#[derive(Clone, Debug)]
struct Block {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    edge: Linear,
    gsa: Option<GsaBlock>,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub store: ParamStore,
    pub cfg: DenoiserConfig,
    pub shape: DenoiserShape,
    time_mlp: Mlp,
    input: Linear,
    edge_enc: Linear,
    blocks: Vec<Block>,
    head_norm: LayerNorm,
    head: Linear,
    pub control: Option<ControlNet>,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, control: Option<&ControlConfig>, shape: DenoiserShape, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if shape.rbf_centers.len() != cfg.rbf_bins {
            return Err(Error::shape(
                "Denoiser::new",
                format!("{} rbf centers for {} bins", shape.rbf_centers.len(), cfg.rbf_bins),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.hidden;
        let t_out = cfg.time_hidden / 2;
        let time_mlp = Mlp::new(&mut store, "time", [cfg.time_dim, cfg.time_hidden, t_out.max(1)], &mut rng);
        let input = Linear::new(
            &mut store,
            "input",
            shape.genes + t_out.max(1) + cfg.pos_dim + shape.emb_dim,
            d,
            &mut rng,
        );
        let edge_enc = Linear::new(&mut store, "edge", cfg.rbf_bins, cfg.edge_dim, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("block{l}");
                Block {
                    norm: LayerNorm::new(&mut store, &format!("{p}.ln"), d),
                    q: Linear::new(&mut store, &format!("{p}.q"), d, d, &mut rng),
                    k: Linear::no_bias(&mut store, &format!("{p}.k"), d, d, &mut rng),
                    v: Linear::new(&mut store, &format!("{p}.v"), d, d, &mut rng),
                    o: Linear::new(&mut store, &format!("{p}.o"), d, d, &mut rng),
                    edge: Linear::no_bias(&mut store, &format!("{p}.edge_bias"), cfg.edge_dim, cfg.heads, &mut rng),
                    gsa: GsaBlock::new(
                        &mut store,
                        &format!("{p}.gsa"),
                        d,
                        cfg.heads,
                        cfg.inducing,
                        cfg.ff_mult,
                        &mut rng,
                    ),
                    ff: FeedForward::new(&mut store, &format!("{p}.ff"), d, cfg.ff_mult, &mut rng),
                }
            })
            .collect();
        let head_norm = LayerNorm::new(&mut store, "head.ln", d);
        let head = Linear::new(&mut store, "head", d, shape.genes, &mut rng);
        let control = control
            .map(|c| ControlNet::new(&mut store, "control", c, shape.control_rank, d, cfg.layers, &mut rng))
            .transpose()?;
        Ok(Self {
            store,
            cfg: cfg.clone(),
            shape,
            time_mlp,
            input,
            edge_enc,
            blocks,
            head_norm,
            head,
            control,
        })
    }

    pub fn genes(&self) -> usize {
        self.shape.genes
    }

    /// Precomputes the static inputs for `section`.
    pub fn context(&self, section: &Section) -> Result<SectionContext> {
        if section.embedding.cols() != self.shape.emb_dim {
            return Err(Error::shape(
                "Denoiser::context",
                format!("embedding {:?}, model expects {}", section.embedding.shape(), self.shape.emb_dim),
            ));
        }
        let n = section.len();
        let (pos, clamped) = positional_matrix(section, &self.shape.frame, self.cfg.pos_dim)?;
        let static_features = Tensor2::hstack(&[&pos, &section.embedding])?;
        let slots = self.cfg.k + 1;
        let mut index = vec![0; n * slots];
        let mut count = vec![0; n];
        let mut rbf = Tensor2::zeros(n * slots, self.cfg.rbf_bins);
        let gr = if n > 0 { Some(build_knn_graph(section, self.cfg.k)?) } else { None };
        let centers = &self.shape.rbf_centers;
        let w = rbf_width(centers);
        for i in 0..n {
            let gr = gr.as_ref().expect("nonempty");
            let mut put = |s: usize, j: usize, d: f64| {
                index[i * slots + s] = j;
                for (b, c) in centers.iter().enumerate() {
                    rbf.set(i * slots + s, b, (-(d - c) * (d - c) / (2.0 * w * w)).exp());
                }
            };
            put(0, i, 0.0);
            for (s, (&j, &d)) in gr.neighbors[i].iter().zip(&gr.distances[i]).enumerate() {
                put(s + 1, j, d);
            }
            count[i] = gr.neighbors[i].len() + 1;
        }
        let map = match &self.control {
            Some(c) => Some(MapOperator::new(c.cfg.grid(), &self.shape.frame, &section.coords)?),
            None => None,
        };
        Ok(SectionContext {
            n,
            static_features,
            slots: Rc::new(AttentionSlots { slots, index, count }),
            rbf,
            map,
            clamped,
        })
    }

    /// Endpoint prediction `ŷ` (`N×G`). Control injection needs `cond`
    /// whenever a control network is configured.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &SectionContext,
        x_t: &Tensor2,
        t: f64,
        cond: Option<&Conditioning>,
    ) -> Result<Var> {
        if x_t.shape() != (ctx.n, self.shape.genes) {
            return Err(Error::shape(
                "Denoiser::forward",
                format!("x_t {:?} for {} spots × {} genes", x_t.shape(), ctx.n, self.shape.genes),
            ));
        }
        let u = match (&self.control, cond) {
            (Some(c), Some(cond)) => Some(c.tokens(g, store, &cond.adjacent, &cond.gathered, t)?),
            (Some(_), None) => {
                return Err(Error::Contract("control injection configured but no conditioning supplied".into()));
            }
            (None, _) => None,
        };
        let x = self.tokens(g, store, ctx, x_t, t)?;
        let rbf = g.constant(ctx.rbf.clone())?;
        let e = self.edge_enc.forward(g, store, rbf)?;
        let e = g.gelu(e)?;
        let mut h = x;
        for (l, b) in self.blocks.iter().enumerate() {
            let hn = b.norm.forward(g, store, h)?;
            let q = b.q.forward(g, store, hn)?;
            let k = b.k.forward(g, store, hn)?;
            let v = b.v.forward(g, store, hn)?;
            let bias = b.edge.forward(g, store, e)?;
            let a = g.edge_attention(q, k, v, bias, ctx.slots.clone(), self.cfg.heads)?;
            let a = b.o.forward(g, store, a)?;
            let a = g.dropout(a, self.cfg.dropout)?;
            h = g.add(h, a)?;
            if let (Some(c), Some(u)) = (&self.control, u) {
                h = c.inject(g, store, h, u, l, t)?;
            }
            if let Some(gsa) = &b.gsa {
                h = gsa.forward(g, store, h, self.cfg.dropout)?;
            }
            h = b.ff.forward(g, store, h, self.cfg.dropout)?;
        }
        let h = self.head_norm.forward(g, store, h)?;
        self.head.forward(g, store, h)
    }

    /// `concat(x_t, MLP(sinusoid(t)), positional, embedding)·W_in`.
    pub fn tokens(&self, g: &mut Graph, store: &ParamStore, ctx: &SectionContext, x_t: &Tensor2, t: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Validation(format!("t = {t} outside [0,1]")));
        }
        let tf = Tensor2::from_vec(1, self.cfg.time_dim, time_features(t, self.cfg.time_dim))?;
        let tv = g.constant(tf)?;
        let te = self.time_mlp.forward(g, store, tv)?;
        let te = g.repeat_rows(te, ctx.n)?;
        let xv = g.constant(x_t.clone())?;
        let sv = g.constant(ctx.static_features.clone())?;
        let cat = g.concat_cols(&[xv, te, sv])?;
        self.input.forward(g, store, cat)
    }

    /// Eval-mode prediction with the model's own parameters.
    pub fn predict(&self, ctx: &SectionContext, x_t: &Tensor2, t: f64, cond: Option<&Conditioning>) -> Result<Tensor2> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, &self.store, ctx, x_t, t, cond)?;
        Ok(g.value(y).clone())
    }

    /// Analytic matmul FLOPs of one forward over `n` spots; linear in `n`.
    pub fn flops(&self, n: usize) -> u64 {
        let d = self.cfg.hidden;
        let slots = (self.cfg.k + 1) as u64;
        let mut f = self.time_mlp.flops(1) + self.input.flops(n) + self.edge_enc.flops(n * slots as usize);
        for b in &self.blocks {
            f += 4 * b.q.flops(n) + b.edge.flops(n * slots as usize) + 2 * 2 * n as u64 * slots * d as u64;
            f += b.gsa.as_ref().map_or(0, |s| s.flops(n)) + b.ff.flops(n);
        }
        f += self.head.flops(n);
        f + self.control.as_ref().map_or(0, |c| c.flops(n))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let p = DENOISER_PREFIX;
        ck.push(format!("{p}meta/config"), row(self.cfg.meta()));
        let f = &self.shape.frame;
        ck.push(
            format!("{p}meta/shape"),
            row(vec![
                self.shape.genes as f64,
                self.shape.emb_dim as f64,
                self.shape.control_rank as f64,
                f.min[0],
                f.min[1],
                f.max[0],
                f.max[1],
            ]),
        );
        ck.push(format!("{p}meta/rbf_centers"), row(self.shape.rbf_centers.clone()));
        if let Some(c) = &self.control {
            let mut v = vec![
                c.cfg.grid as f64,
                c.cfg.channels as f64,
                c.cfg.token_dim as f64,
                c.cfg.hidden as f64,
                c.cfg.time_dim as f64,
                c.cfg.scale,
                c.cfg.t_warm,
            ];
            v.extend((0..self.cfg.layers).map(|l| c.cfg.injects(l) as u8 as f64));
            ck.push(format!("{p}meta/control"), row(v));
        }
        ck.push_params(p, &self.store);
        ck
    }

    /// Rebuilds from `cfg`/`control` and checks them against the echoed
    /// metadata before loading parameters.
    pub fn from_checkpoint(cfg: &DenoiserConfig, control: Option<&ControlConfig>, ck: &Checkpoint) -> Result<Self> {
        let p = DENOISER_PREFIX;
        let get = |name: &str| {
            ck.get(&format!("{p}meta/{name}"))
                .ok_or_else(|| Error::format("checkpoint", format!("lacks {p}meta/{name}")))
        };
        if get("config")?.data() != cfg.meta().as_slice() {
            return Err(Error::Validation("denoiser config does not match checkpoint".into()));
        }
        let s = get("shape")?.data().to_vec();
        if s.len() != 7 {
            return Err(Error::format("checkpoint", "malformed denoiser shape record"));
        }
        let shape = DenoiserShape {
            genes: s[0] as usize,
            emb_dim: s[1] as usize,
            control_rank: s[2] as usize,
            frame: Frame {
                min: [s[3], s[4]],
                max: [s[5], s[6]],
            },
            rbf_centers: get("rbf_centers")?.data().to_vec(),
        };
        let has = ck.get(&format!("{p}meta/control")).is_some();
        if has != control.is_some() {
            return Err(Error::Validation("control configuration does not match checkpoint".into()));
        }
        let mut model = Self::new(cfg, control, shape, 0)?;
        if let Some(c) = &model.control {
            let mut v = vec![
                c.cfg.grid as f64,
                c.cfg.channels as f64,
                c.cfg.token_dim as f64,
                c.cfg.hidden as f64,
                c.cfg.time_dim as f64,
                c.cfg.scale,
                c.cfg.t_warm,
            ];
            v.extend((0..cfg.layers).map(|l| c.cfg.injects(l) as u8 as f64));
            if get("control")?.data() != v.as_slice() {
                return Err(Error::Validation("control config does not match checkpoint".into()));
            }
        }
        ck.load_params(p, &mut model.store)?;
        Ok(model)
    }
}

fn row(v: Vec<f64>) -> Tensor2 {
    let n = v.len();
    Tensor2::from_vec(1, n, v).expect("row length")
}

/// Adds uniform noise to every parameter; tests use it to move
/// zero-initialized projections off their inert start.
pub fn perturb_params(store: &mut ParamStore, scale: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id)?.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::spatial_model::test_util::toy_stack;

    pub(crate) fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            edge_dim: 6,
            k: 3,
            dropout: 0.2,
            inducing: 3,
            time_dim: 4,
            time_hidden: 6,
            pos_dim: 4,
            rbf_bins: 4,
            ff_mult: 2,
        }
    }

    fn tiny_control() -> ControlConfig {
        ControlConfig {
            grid: 5,
            channels: 3,
            token_dim: 4,
            hidden: 5,
            time_dim: 4,
            ..ControlConfig::default()
        }
    }

    fn twelve_spots() -> SlideStack {
        let pts: Vec<[f64; 2]> = (0..12).map(|i| [(i % 4) as f64 + 0.1 * (i / 4) as f64, (i / 4) as f64]).collect();
        toy_stack(&[pts])
    }

    fn model(stack: &SlideStack, control: bool) -> Denoiser {
        let cfg = tiny_cfg();
        let shape = DenoiserShape {
            genes: 2,
            emb_dim: 2,
            frame: stack.frame(),
            rbf_centers: rbf_centers_from(stack, &[1], cfg.k, cfg.rbf_bins).unwrap(),
            control_rank: 2,
        };
        Denoiser::new(&cfg, control.then(tiny_control).as_ref(), shape, 3).unwrap()
    }

    fn cond(ctx: &SectionContext, x: &Tensor2) -> Conditioning {
        Conditioning {
            adjacent: Tensor2::from_fn(ctx.n, 2, |i, j| ((i + j) as f64 * 0.37).sin()),
            gathered: ctx.map.as_ref().unwrap().gather(x).unwrap(),
        }
    }

    #[test]
    fn shapes_and_eval_determinism() {
        let st = twelve_spots();
        let m = model(&st, true);
        let ctx = m.context(st.section(1).unwrap()).unwrap();
        let x = Tensor2::from_fn(12, 2, |i, j| (i * j) as f64 * 0.1);
        let c = cond(&ctx, &x);
        let a = m.predict(&ctx, &x, 0.4, Some(&c)).unwrap();
        assert_eq!(a.shape(), (12, 2));
        let b = m.predict(&ctx, &x, 0.4, Some(&c)).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(m.predict(&ctx, &x, 0.4, None), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_spots_get_identical_tokens() {
        let st = toy_stack(&[vec![[0.0, 0.0], [1.0, 1.0]]]);
        let m = model(&st, false);
        let mut sec = st.section(1).unwrap().clone();
        sec.coords[1] = sec.coords[0];
        sec.embedding = Tensor2::filled(2, 2, 0.5);
        let ctx = m.context(&sec).unwrap();
        let mut g = Graph::new();
        let x = Tensor2::filled(2, 2, 1.5);
        let tok = m.tokens(&mut g, &m.store, &ctx, &x, 0.0).unwrap();
        let tv = g.value(tok);
        assert_eq!(tv.row(0), tv.row(1));
        assert!(m.tokens(&mut g, &m.store, &ctx, &x, 1.5).is_err());
    }

    #[test]
    fn context_includes_self_edge() {
        let st = twelve_spots();
        let m = model(&st, false);
        let ctx = m.context(st.section(1).unwrap()).unwrap();
        for i in 0..12 {
            assert_eq!(ctx.slots.neighbors(i)[0], i);
            assert_eq!(ctx.slots.count[i], 4);
        }
        let single = toy_stack(&[vec![[0.0, 0.0]]]);
        let ctx = m.context(single.section(1).unwrap()).unwrap();
        assert_eq!(ctx.slots.neighbors(0), &[0]);
        let y = m.predict(&ctx, &Tensor2::zeros(1, 2), 0.5, None).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn flops_linear_and_checkpoint_round_trip() {
        let st = twelve_spots();
        let m = model(&st, true);
        let r = m.flops(4000) as f64 / m.flops(2000) as f64;
        assert!((1.9..=2.1).contains(&r));
        let ck = m.to_checkpoint();
        let back = Denoiser::from_checkpoint(&tiny_cfg(), Some(&tiny_control()), &Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert!(back.store.values_identical(&m.store));
        assert_eq!(back.shape, m.shape);
        let mut other = tiny_cfg();
        other.layers = 3;
        assert!(Denoiser::from_checkpoint(&other, Some(&tiny_control()), &ck).is_err());
        assert!(Denoiser::from_checkpoint(&tiny_cfg(), None, &ck).is_err());
    }

    #[test]
    fn full_denoiser_grad_check() {
        let st = twelve_spots();
        let mut m = model(&st, true);
        perturb_params(&mut m.store, 0.3, 1).unwrap();
        let ctx = m.context(st.section(1).unwrap()).unwrap();
        let x = Tensor2::from_fn(12, 2, |i, j| ((i * 2 + j) as f64 * 0.7).cos());
        let c = cond(&ctx, &x);
        let y = Tensor2::from_fn(12, 2, |i, j| (i + j) as f64 * 0.05);
        let rep = grad_check(
            &m.store,
            |g, s| {
                let p = m.forward(g, s, &ctx, &x, 0.15, Some(&c))?;
                let yv = g.constant(y.clone())?;
                let d = g.sub(p, yv)?;
                let d2 = g.mul(d, d)?;
                g.mean(d2)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
