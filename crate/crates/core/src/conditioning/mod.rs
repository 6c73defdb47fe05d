//! Cross-section conditioning: candidate weighting, adjacent tokens and
//! the control network that injects them into the denoiser.

pub mod control;
pub mod genemap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::hvg_select_stack;
use crate::numerics::{SparseMatrix, Tensor2};
use crate::spatial_model::{adjacent_candidates, AdjacentCandidates, CandidateSource, SlideStack};

pub use control::{smoothstep, time_features, warmup_gate, ControlConfig, ControlNet};
pub use genemap::{build_gene_map, conv3x3, grid_sample_bilinear, sample_matrix, GeneMap, Grid, MapOperator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendConfig {
    pub tau: f64,
    pub beta: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { tau: 1.0, beta: 0.5 }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Validation(format!(
                "blend needs tau > 0 and beta in [0,1], got tau={} beta={}",
                self.tau, self.beta
            )));
        }
        Ok(())
    }
}

/// Cosine similarity of `query` with each candidate; zero vectors score 0.
pub fn cosine_scores(query: &[f64], candidates: &[&[f64]]) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nq = norm(query);
    candidates
        .iter()
        .map(|c| {
            let nc = norm(c);
            if nq == 0.0 || nc == 0.0 {
                return 0.0;
            }
            let dot: f64 = query.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
            (dot / (nq * nc)).clamp(-1.0, 1.0)
        })
        .collect()
}

/// `exp(−d²/2σ²)` with σ the median candidate distance. A zero median
/// leaves only exact coincidences with affinity 1.
pub fn spatial_scores(distances: &[f64]) -> Vec<f64> {
    if distances.is_empty() {
        return Vec::new();
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let sigma = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    distances
        .iter()
        .map(|&d| {
            if sigma > 0.0 {
                (-d * d / (2.0 * sigma * sigma)).exp()
            } else if d == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// `softmax(((1−β)·s_cos + β·s_xy)/τ)`; empty in, empty out.
pub fn blend_weights(cos: &[f64], xy: &[f64], cfg: &BlendConfig) -> Result<Vec<f64>> {
    if cos.len() != xy.len() {
        return Err(Error::shape("blend_weights", format!("{} vs {} scores", cos.len(), xy.len())));
    }
    let s: Vec<f64> = cos
        .iter()
        .zip(xy)
        .map(|(c, x)| ((1.0 - cfg.beta) * c + cfg.beta * x) / cfg.tau)
        .collect();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Indicator projection onto the `r` highest-variance genes of the
/// training sections, fixed at data preparation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneProjection {
    pub genes: Vec<usize>,
    pub total_genes: usize,
    pub rule: String,
}

impl GeneProjection {
    pub fn top_variance(stack: &SlideStack, zs: &[usize], rank: usize) -> Result<Self> {
        let rank = rank.min(stack.genes());
        Ok(Self {
            genes: hvg_select_stack(stack, zs, rank)?,
            total_genes: stack.genes(),
            rule: "top-variance".into(),
        })
    }

    pub fn rank(&self) -> usize {
        self.genes.len()
    }

    /// Dense `r×G` form of P.
    pub fn matrix(&self) -> Tensor2 {
        let mut p = Tensor2::zeros(self.rank(), self.total_genes);
        for (r, &g) in self.genes.iter().enumerate() {
            p.set(r, g, 1.0);
        }
        p
    }

    /// Rows of `x` mapped through P: `N×G → N×r`.
    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.total_genes {
            return Err(Error::shape(
                "GeneProjection::apply",
                format!("{:?} vs {} genes", x.shape(), self.total_genes),
            ));
        }
        Ok(x.select_cols(&self.genes))
    }

    pub fn apply_row(&self, v: &[f64]) -> Vec<f64> {
        self.genes.iter().map(|&g| v[g]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    /// Sources are stored expressions `y_j`.
    Train,
    /// Sources are the current flow states `x_{t,j}` on `z±1`.
    Infer,
}

/// Blend weights for one query spot over its candidates.
pub fn candidate_weights(
    stack: &SlideStack,
    query_embedding: &[f64],
    cands: &AdjacentCandidates,
    cfg: &BlendConfig,
) -> Result<Vec<f64>> {
    let embs: Vec<&[f64]> = cands
        .candidates
        .iter()
        .map(|c| {
            stack
                .section(c.z)
                .map(|s| s.embedding.row(c.index))
                .ok_or_else(|| Error::Validation(format!("candidate on missing section {}", c.z)))
        })
        .collect::<Result<_>>()?;
    let d: Vec<f64> = cands.candidates.iter().map(|c| c.distance).collect();
    blend_weights(&cosine_scores(query_embedding, &embs), &spatial_scores(&d), cfg)
}

/// `Σ_j w_j·P·src_j` and the availability mask. In train mode every
/// candidate section must carry expression; in infer mode `states(z)`
/// supplies the current state of section `z`.
pub fn adjacent_token<'a>(
    cands: &AdjacentCandidates,
    weights: &[f64],
    proj: &GeneProjection,
    mode: TokenMode,
    stack: &'a SlideStack,
    states: &dyn Fn(usize) -> Option<&'a Tensor2>,
) -> Result<(Vec<f64>, bool)> {
    let mut tok = vec![0.0; proj.rank()];
    if !cands.available {
        return Ok((tok, false));
    }
    if weights.len() != cands.candidates.len() {
        return Err(Error::shape(
            "adjacent_token",
            format!("{} weights for {} candidates", weights.len(), cands.candidates.len()),
        ));
    }
    for (c, &w) in cands.candidates.iter().zip(weights) {
        let src = source(mode, stack, states, c.z)?;
        for (t, &g) in tok.iter_mut().zip(&proj.genes) {
            *t += w * src.get(c.index, g);
        }
    }
    Ok((tok, true))
}

fn source<'a>(
    mode: TokenMode,
    stack: &'a SlideStack,
    states: &dyn Fn(usize) -> Option<&'a Tensor2>,
    z: usize,
) -> Result<&'a Tensor2> {
    match mode {
        TokenMode::Train => stack.section(z).and_then(|s| s.expression.as_ref()).ok_or_else(|| {
            Error::Contract(format!("train-mode adjacent token reads unlabeled section z={z}"))
        }),
        TokenMode::Infer => {
            states(z).ok_or_else(|| Error::Contract(format!("no current state supplied for section z={z}")))
        }
    }
}

/// Candidate weights for a whole section, stored as one sparse `N×N_z′`
/// matrix per adjacent section so tokens are two sparse products.
#[derive(Clone, Debug)]
pub struct AdjacencyPlan {
    pub z: usize,
    pub mask: Vec<bool>,
    pub blocks: Vec<(usize, SparseMatrix)>,
}

impl AdjacencyPlan {
    pub fn new(stack: &SlideStack, z: usize, k: usize, source: CandidateSource, cfg: &BlendConfig) -> Result<Self> {
        cfg.validate()?;
        let sec = stack
            .section(z)
            .ok_or_else(|| Error::Validation(format!("no section z={z}")))?;
        let mut trip: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); 2];
        let nz = [z.wrapping_sub(1), z + 1];
        let mut mask = Vec::with_capacity(sec.len());
        for i in 0..sec.len() {
            let cands = adjacent_candidates(stack, z, sec.coords[i], k, source);
            mask.push(cands.available);
            if !cands.available {
                continue;
            }
            let w = candidate_weights(stack, sec.embedding.row(i), &cands, cfg)?;
            for (c, w) in cands.candidates.iter().zip(w) {
                let slot = if c.z == nz[0] { 0 } else { 1 };
                trip[slot].push((i, c.index, w));
            }
        }
        let mut blocks = Vec::new();
        for (slot, t) in trip.into_iter().enumerate() {
            if let Some(s) = stack.section(nz[slot]) {
                if !t.is_empty() {
                    blocks.push((nz[slot], SparseMatrix::from_triplets(sec.len(), s.len(), &t)?));
                }
            }
        }
        Ok(Self { z, mask, blocks })
    }

    /// Adjacent sections this plan reads from.
    pub fn sources(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.0).collect()
    }

    /// `N×r` tokens; rows with a false mask are zero.
    pub fn tokens<'a>(
        &self,
        proj: &GeneProjection,
        mode: TokenMode,
        stack: &'a SlideStack,
        states: &dyn Fn(usize) -> Option<&'a Tensor2>,
    ) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(self.mask.len(), proj.rank());
        for (z, w) in &self.blocks {
            let src = proj.apply(source(mode, stack, states, *z)?)?;
            out.add_assign(&w.mul_dense(&src)?);
        }
        Ok(out)
    }
}
