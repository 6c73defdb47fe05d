//! Finite-difference gradient audits and the global-context scaling
//! measurement.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::gsa::{DenseReference, GsaBlock};
use crate::denoiser::{perturb_params, rbf_centers_from, Conditioning, Denoiser, DenoiserShape};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, AttentionSlots, GradCheckOptions, GradCheckReport, Graph, ParamStore, SparseMatrix, Tensor2, Var};
use crate::synth_data::{generate_stack, SynthConfig};

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor2 {
    Tensor2::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// `Σ out ⊙ W` with a fixed random `W`, so every output entry carries a
/// distinct weight.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, r, c, -1.0, 1.0);
    let p = g.mul_const(out, w)?;
    g.sum(p)
}

type PrimitiveFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

/// Gradient audit of every differentiable tape primitive on small random
/// inputs.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, 3, 4, -1.5, 1.5));
    let b = store.add("b", random(&mut rng, 3, 4, -1.5, 1.5));
    let m = store.add("m", random(&mut rng, 4, 5, -1.0, 1.0));
    let n = store.add("n", random(&mut rng, 5, 4, -1.0, 1.0));
    let row = store.add("row", random(&mut rng, 1, 4, -1.0, 1.0));
    let gamma = store.add("gamma", random(&mut rng, 1, 4, 0.5, 1.5));
    let beta = store.add("beta", random(&mut rng, 1, 4, -0.5, 0.5));
    let q = store.add("q", random(&mut rng, 5, 4, -1.0, 1.0));
    let k = store.add("k", random(&mut rng, 5, 4, -1.0, 1.0));
    let v = store.add("v", random(&mut rng, 5, 4, -1.0, 1.0));
    let bias = store.add("edge_bias", random(&mut rng, 15, 2, -0.5, 0.5));
    let mu = store.add("mu", random(&mut rng, 3, 4, 0.5, 4.0));
    let theta = store.add("theta", random(&mut rng, 3, 4, 0.5, 5.0));
    let pi = store.add("pi", random(&mut rng, 3, 4, 0.05, 0.6));
    let counts = Rc::new(Tensor2::from_fn(3, 4, |i, j| ((i * 5 + j * 3) % 7) as f64));
    let c_mask = random(&mut rng, 3, 4, -2.0, 2.0);
    let sparse = Rc::new(SparseMatrix::from_triplets(
        4,
        3,
        &[(0, 0, 0.5), (0, 2, -1.0), (1, 1, 2.0), (3, 0, 0.25), (3, 2, 1.5)],
    )?);
    let slots = Rc::new(AttentionSlots {
        slots: 3,
        index: vec![0, 1, 2, 1, 0, 0, 2, 3, 4, 3, 4, 0, 4, 0, 0],
        count: vec![3, 2, 3, 3, 2],
    });

    let cases: Vec<(&'static str, PrimitiveFn)> = vec![
        ("matmul", Box::new(move |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, m));
            g.matmul(x, y)
        })),
        ("matmul_nt", Box::new(move |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, n));
            g.matmul_nt(x, y)
        })),
        ("add", Box::new(move |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            g.add(x, y)
        })),
        ("sub", Box::new(move |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            g.sub(x, y)
        })),
        ("add_row", Box::new(move |g, s| {
            let (x, r) = (g.param(s, a), g.param(s, row));
            g.add_row(x, r)
        })),
        ("mul", Box::new(move |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            g.mul(x, y)
        })),
        ("mul_const", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.mul_const(x, c_mask.clone())
        })),
        ("scale", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.scale(x, -1.7)
        })),
        ("shift", Box::new(move |g, s| {
            let x = g.param(s, a);
            let y = g.shift(x, 0.3)?;
            g.mul(y, y)
        })),
        ("concat_cols", Box::new(move |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            g.concat_cols(&[x, y, x])
        })),
        ("slice_cols", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.slice_cols(x, 1, 3)
        })),
        ("repeat_rows", Box::new(move |g, s| {
            let r = g.param(s, row);
            g.repeat_rows(r, 3)
        })),
        ("transpose", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.transpose(x)
        })),
        ("softmax_rows", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.softmax_rows(x)
        })),
        ("layer_norm", Box::new(move |g, s| {
            let (x, ga, be) = (g.param(s, a), g.param(s, gamma), g.param(s, beta));
            g.layer_norm(x, ga, be, 1e-5)
        })),
        ("gelu", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.gelu(x)
        })),
        ("sigmoid", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.sigmoid(x)
        })),
        ("softplus", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.softplus(x)
        })),
        ("gather_rows", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.gather_rows(x, vec![2, 0, 2, 1])
        })),
        ("mean", Box::new(move |g, s| {
            let x = g.param(s, a);
            let y = g.mul(x, x)?;
            g.mean(y)
        })),
        ("sparse_matmul", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.sparse_matmul(sparse.clone(), x)
        })),
        ("dropout", Box::new(move |g, s| {
            let x = g.param(s, a);
            g.dropout(x, 0.3)
        })),
        ("edge_attention", Box::new(move |g, s| {
            let (qq, kk, vv, bb) = (g.param(s, q), g.param(s, k), g.param(s, v), g.param(s, bias));
            g.edge_attention(qq, kk, vv, bb, slots.clone(), 2)
        })),
        ("zinb_nll", Box::new(move |g, s| {
            let (mm, tt, pp) = (g.param(s, mu), g.param(s, theta), g.param(s, pi));
            g.zinb_nll(mm, tt, pp, counts.clone())
        })),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, f)) in cases.into_iter().enumerate() {
        let target = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let y = f(g, s)?;
            project(g, y, seed.wrapping_add(i as u64))
        };
        out.push((name, grad_check(&store, target, GradCheckOptions::default())?));
    }
    Ok(out)
}

/// Number of spots in the full-model audit stack.
pub const GRADCHECK_SPOTS: usize = 12;

/// Audits the whole backbone of `cfg` (regime included) on a 12-spot
/// synthetic section with random conditioning inputs. The scalar target
/// is a fixed random projection of the output. Parameters are
/// perturbed first so that zero-initialized projections carry signal.
/// At most `max_entries` coordinates are probed per tensor.
pub fn denoiser_gradcheck(cfg: &RunConfig, seed: u64, max_entries: Option<usize>) -> Result<GradCheckReport> {
    let model_cfg = cfg.model_config();
    let genes = cfg.synth.genes.min(8);
    let stack = generate_stack(&SynthConfig {
        sections: 1,
        spots_per_section: GRADCHECK_SPOTS,
        genes,
        emb_dim: cfg.synth.emb_dim.min(8),
        regions: 2,
        seed,
        ..SynthConfig::default()
    })?
    .stack;
    let rank = model_cfg.proj_rank.min(genes);
    let shape = DenoiserShape {
        genes,
        emb_dim: stack.emb_dim(),
        frame: stack.frame(),
        rbf_centers: rbf_centers_from(&stack, &[1], model_cfg.denoiser.k, model_cfg.denoiser.rbf_bins)?,
        control_rank: rank,
    };
    let mut model = Denoiser::new(&model_cfg.denoiser, model_cfg.control.as_ref(), shape, seed)?;
    perturb_params(&mut model.store, 0.1, seed ^ 0xa5a5)?;
    let sec = stack.section(1).ok_or(Error::EmptyInput("gradcheck stack"))?;
    let ctx = model.context(sec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, GRADCHECK_SPOTS, genes, 0.0, 3.0);
    let cond = match &ctx.map {
        Some(map) => Some(Conditioning {
            adjacent: random(&mut rng, GRADCHECK_SPOTS, rank, -1.0, 1.0),
            gathered: map.gather(&x.slice_cols(0, rank))?,
        }),
        None => None,
    };
    let t = 0.37;
    grad_check(
        &model.store,
        |g, s| {
            let p = model.forward(g, s, &ctx, &x, t, cond.as_ref())?;
            project(g, p, seed)
        },
        GradCheckOptions {
            max_entries_per_param: max_entries,
            ..GradCheckOptions::default()
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsaScaling {
    pub n_small: usize,
    pub n_large: usize,
    pub inducing: usize,
    pub flops_small: u64,
    pub flops_large: u64,
    pub flop_ratio: f64,
    /// Median forward wall time in seconds.
    pub secs_small: f64,
    pub secs_large: f64,
    pub time_ratio: f64,
    pub dense_flops_large: u64,
    pub dense_secs_large: f64,
    /// Dense over global-context wall time at `n_large`.
    pub dense_over_gsa: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Times one global-context block against dense self-attention with the
/// same width, heads and feed-forward. Inducing count comes from `cfg`
/// (at least 1).
pub fn gsa_scaling(cfg: &RunConfig, n_small: usize, n_large: usize, repeats: usize, seed: u64) -> Result<GsaScaling> {
    let d = cfg.denoiser.hidden;
    let heads = cfg.denoiser.heads;
    let m = cfg.denoiser.inducing.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = GsaBlock::new(&mut store, "gsa", d, heads, m, cfg.denoiser.ff_mult, &mut rng).expect("m >= 1");
    let dense = DenseReference::new(&mut store, d, heads, cfg.denoiser.ff_mult, &mut rng);
    let xs = random(&mut rng, n_large, d, -1.0, 1.0);
    let time_gsa = |n: usize| -> Result<f64> {
        let x = xs.select_rows(&(0..n).collect::<Vec<_>>());
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let mut g = Graph::new();
            let xv = g.constant(x.clone())?;
            let y = block.forward(&mut g, &store, xv, 0.0)?;
            std::hint::black_box(g.value(y));
            times.push(start.elapsed().as_secs_f64());
        }
        Ok(median(times))
    };
    // Warm caches and the allocator before timing.
    time_gsa(n_small)?;
    let secs_small = time_gsa(n_small)?;
    let secs_large = time_gsa(n_large)?;
    let start = Instant::now();
    std::hint::black_box(dense.forward(&store, &xs)?);
    let dense_secs_large = start.elapsed().as_secs_f64();
    let (flops_small, flops_large) = (block.flops(n_small), block.flops(n_large));
    Ok(GsaScaling {
        n_small,
        n_large,
        inducing: m,
        flops_small,
        flops_large,
        flop_ratio: flops_large as f64 / flops_small as f64,
        secs_small,
        secs_large,
        time_ratio: secs_large / secs_small,
        dense_flops_large: dense.flops(n_large),
        dense_secs_large,
        dense_over_gsa: dense_secs_large / secs_large,
    })
}
