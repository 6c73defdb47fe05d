//! Global set attention: `m` learned inducing tokens read from all spots,
//! then every spot reads back from that summary. Cost is `O(N·m·d)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{LayerNorm, Linear, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor2, Var};

/// Dense multi-head attention projections.
#[derive(Clone, Debug)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::no_bias(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `Concat_h(softmax(Q_h K_hᵀ/√d_h) V_h)·W^O`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var) -> Result<Var> {
        let q = self.q.forward(g, store, q_in)?;
        let k = self.k.forward(g, store, kv_in)?;
        let v = self.v.forward(g, store, kv_in)?;
        let d = self.q.fan_out;
        let dh = d / self.heads;
        let sc = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, sc)?;
            let p = g.softmax_rows(s)?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.o.forward(g, store, cat)
    }

    /// Multiply-adds ×2 for `nq` queries over `nk` keys.
    pub fn flops(&self, nq: usize, nk: usize) -> u64 {
        let d = self.q.fan_out as u64;
        let (nq, nk) = (nq as u64, nk as u64);
        self.q.flops(nq as usize) + 2 * self.k.flops(nk as usize) + self.o.flops(nq as usize) + 2 * 2 * nq * nk * d
    }

    /// Value-only forward for references that must not hold a tape.
    pub fn eval(&self, store: &ParamStore, q_in: &Tensor2, kv_in: &Tensor2) -> Result<Tensor2> {
        let lin = |l: &Linear, x: &Tensor2| -> Result<Tensor2> {
            let mut y = x.matmul(store.value(l.weight))?;
            if let Some(b) = l.bias {
                let b = store.value(b).row(0).to_vec();
                for i in 0..y.rows() {
                    for (v, bb) in y.row_mut(i).iter_mut().zip(&b) {
                        *v += bb;
                    }
                }
            }
            Ok(y)
        };
        let q = lin(&self.q, q_in)?;
        let k = lin(&self.k, kv_in)?;
        let v = lin(&self.v, kv_in)?;
        let d = self.q.fan_out;
        let dh = d / self.heads;
        let sc = 1.0 / (dh as f64).sqrt();
        let mut cat = Tensor2::zeros(q.rows(), d);
        const BLOCK: usize = 256;
        for h in 0..self.heads {
            let kh = k.slice_cols(h * dh, (h + 1) * dh).transpose();
            let vh = v.slice_cols(h * dh, (h + 1) * dh);
            for start in (0..q.rows()).step_by(BLOCK) {
                let end = (start + BLOCK).min(q.rows());
                let idx: Vec<usize> = (start..end).collect();
                let qb = q.select_rows(&idx).slice_cols(h * dh, (h + 1) * dh);
                let mut s = qb.matmul(&kh)?;
                for i in 0..s.rows() {
                    let row = s.row_mut(i);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * sc));
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * sc - max).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                let ob = s.matmul(&vh)?;
                for (r, i) in idx.iter().enumerate() {
                    cat.row_mut(*i)[h * dh..(h + 1) * dh].copy_from_slice(ob.row(r));
                }
            }
        }
        lin(&self.o, &cat)
    }
}

/// `x + FF(LN(x))` with a 4× expansion.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), [d, mult * d, d], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        let h = g.dropout(h, dropout)?;
        g.add(x, h)
    }

    pub fn flops(&self, n: usize) -> u64 {
        self.mlp.flops(n)
    }
}

#[derive(Clone, Debug)]
pub struct GsaBlock {
    pub inducing: ParamId,
    pub m: usize,
    pub norm_s: LayerNorm,
    pub norm_x: LayerNorm,
    pub read: Mha,
    pub ff_read: FeedForward,
    pub norm_q: LayerNorm,
    pub norm_h: LayerNorm,
    pub write: Mha,
    pub ff_write: FeedForward,
}

impl GsaBlock {
    /// `None` when `m = 0` (the block is then the identity).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        m: usize,
        ff_mult: usize,
        rng: &mut impl Rng,
    ) -> Option<Self> {
        if m == 0 {
            return None;
        }
        Some(Self {
            inducing: store.add_normal(format!("{name}.inducing"), m, d, d, rng),
            m,
            norm_s: LayerNorm::new(store, &format!("{name}.ln_s"), d),
            norm_x: LayerNorm::new(store, &format!("{name}.ln_x"), d),
            read: Mha::new(store, &format!("{name}.read"), d, heads, rng),
            ff_read: FeedForward::new(store, &format!("{name}.ff_read"), d, ff_mult, rng),
            norm_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            norm_h: LayerNorm::new(store, &format!("{name}.ln_h"), d),
            write: Mha::new(store, &format!("{name}.write"), d, heads, rng),
            ff_write: FeedForward::new(store, &format!("{name}.ff_write"), d, ff_mult, rng),
        })
    }

    /// `H = S + MHA(S, X, X)`, then `Y = X + MHA(X, H, H)`, each stage
    /// pre-normed and followed by a residual feed-forward.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let s = g.param(store, self.inducing);
        let sn = self.norm_s.forward(g, store, s)?;
        let xn = self.norm_x.forward(g, store, x)?;
        let r = self.read.forward(g, store, sn, xn)?;
        let h = g.add(s, r)?;
        let h = self.ff_read.forward(g, store, h, dropout)?;
        let q = self.norm_q.forward(g, store, x)?;
        let hn = self.norm_h.forward(g, store, h)?;
        let w = self.write.forward(g, store, q, hn)?;
        let w = g.dropout(w, dropout)?;
        let y = g.add(x, w)?;
        self.ff_write.forward(g, store, y, dropout)
    }

    /// Analytic matmul FLOPs of one forward over `n` spots.
    pub fn flops(&self, n: usize) -> u64 {
        self.read.flops(self.m, n) + self.ff_read.flops(self.m) + self.write.flops(n, self.m) + self.ff_write.flops(n)
    }
}

/// Dense self-attention counterpart of [`GsaBlock`]: `Y = X + MHA(X,X,X)`
/// followed by the same residual feed-forward. Evaluated without a tape in
/// row blocks so that `N = 4000` fits in memory.
#[derive(Clone, Debug)]
pub struct DenseReference {
    pub norm: LayerNorm,
    pub attn: Mha,
    pub ff: FeedForward,
}

impl DenseReference {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, ff_mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, "dense.ln", d),
            attn: Mha::new(store, "dense.attn", d, heads, rng),
            ff: FeedForward::new(store, "dense.ff", d, ff_mult, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let xn = self.norm.forward(&mut g, store, xv)?;
        let xn = g.value(xn).clone();
        let a = self.attn.eval(store, &xn, &xn)?;
        let mut g = Graph::new();
        let mut y = x.clone();
        y.add_assign(&a);
        let yv = g.constant(y)?;
        let out = self.ff.forward(&mut g, store, yv, 0.0)?;
        Ok(g.value(out).clone())
    }

    pub fn flops(&self, n: usize) -> u64 {
        self.attn.flops(n, n) + self.ff.flops(n)
    }
}

pub fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Validation(format!("hidden {d} not divisible by {heads} heads")));
    }
    Ok(())
}
