//! Flow start distributions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::learned::PriorNet;
use super::zinb::{zinb_sample, FixedZinbConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::spatial_model::{adjacent_candidates, CandidateSource, SlideStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    LearnedZinb,
    FixedZinb,
    SpatialEmpirical,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned-zinb" => Ok(PriorKind::LearnedZinb),
            "fixed-zinb" => Ok(PriorKind::FixedZinb),
            "spatial-empirical" => Ok(PriorKind::SpatialEmpirical),
            other => Err(Error::Validation(format!("unknown prior {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialEmpiricalConfig {
    pub k: usize,
    /// Gaussian jitter on the copied log1p vector; 0 disables it.
    pub sigma: f64,
}

impl Default for SpatialEmpiricalConfig {
    fn default() -> Self {
        Self { k: 128, sigma: 0.05 }
    }
}

/// A start distribution bound to its parameters.
#[derive(Clone, Copy, Debug)]
pub enum StartPrior<'a> {
    Learned(&'a PriorNet),
    Fixed(FixedZinbConfig),
    /// Falls back to the fixed ZINB for spots without labeled neighbors.
    SpatialEmpirical(SpatialEmpiricalConfig, FixedZinbConfig),
}

/// Copy of the log1p expression of one of the `k` planar-nearest labeled
/// spots on `z±1`, chosen uniformly, with clamped Gaussian jitter. `None`
/// when no labeled neighbor exists.
pub fn spatial_empirical_sample<R: Rng + ?Sized>(
    stack: &SlideStack,
    z: usize,
    coords: [f64; 2],
    cfg: &SpatialEmpiricalConfig,
    rng: &mut R,
) -> Option<Vec<f64>> {
    let cand = adjacent_candidates(stack, z, coords, cfg.k, CandidateSource::LabeledExpression);
    if !cand.available {
        return None;
    }
    let pick = cand.candidates[rng.random_range(0..cand.candidates.len())];
    let expr = stack.section(pick.z)?.expression.as_ref()?.row(pick.index);
    let mut out = expr.to_vec();
    if cfg.sigma > 0.0 {
        let n = Normal::new(0.0, cfg.sigma).expect("finite sigma");
        for v in &mut out {
            *v = (*v + n.sample(rng)).max(0.0);
        }
    }
    Some(out)
}

/// Start matrix (log1p domain) for every spot of section `z`.
pub fn sample_start<R: Rng + ?Sized>(prior: &StartPrior<'_>, stack: &SlideStack, z: usize, rng: &mut R) -> Result<Tensor2> {
    let sec = stack
        .section(z)
        .ok_or_else(|| Error::Validation(format!("no section z={z}")))?;
    let g = stack.genes();
    match prior {
        StartPrior::Learned(net) => {
            if !net.is_frozen() {
                return Err(Error::Contract("learned prior must be frozen before use as a flow start".into()));
            }
            if net.genes() != g {
                return Err(Error::shape("sample_start", format!("prior has {} genes, stack {g}", net.genes())));
            }
            Ok(zinb_sample(&net.params(sec)?, rng))
        }
        StartPrior::Fixed(c) => Ok(zinb_sample(&c.params(sec.len(), g), rng)),
        StartPrior::SpatialEmpirical(cfg, fallback) => {
            let mut out = Tensor2::zeros(sec.len(), g);
            for i in 0..sec.len() {
                let row = match spatial_empirical_sample(stack, z, sec.coords[i], cfg, rng) {
                    Some(v) => v,
                    None => zinb_sample(&fallback.params(1, g), rng).into_data(),
                };
                out.row_mut(i).copy_from_slice(&row);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial_model::test_util::toy_stack;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_labeled_neighbor_with_jitter() {
        let st = toy_stack(&[vec![[0.0, 0.0]], vec![[0.0, 0.0]]]);
        let cfg = SpatialEmpiricalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let v = spatial_empirical_sample(&st, 2, [0.0, 0.0], &cfg, &mut rng).unwrap();
            let e = st.section(1).unwrap().expression.as_ref().unwrap().row(0);
            for (a, b) in v.iter().zip(e) {
                assert!((a - b).abs() <= 4.0 * cfg.sigma);
                assert!(*a >= 0.0);
            }
        }
    }

    #[test]
    fn without_jitter_returns_a_neighbor_expression() {
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [i as f64, 0.0]).collect();
        let st = toy_stack(&[pts.clone(), vec![[3.0, 0.0]], pts]);
        let cfg = SpatialEmpiricalConfig { k: 5, sigma: 0.0 };
        let pool: Vec<Vec<f64>> = adjacent_candidates(&st, 2, [3.0, 0.0], 5, CandidateSource::LabeledExpression)
            .candidates
            .iter()
            .map(|c| st.section(c.z).unwrap().expression.as_ref().unwrap().row(c.index).to_vec())
            .collect();
        assert_eq!(pool.len(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let v = spatial_empirical_sample(&st, 2, [3.0, 0.0], &cfg, &mut rng).unwrap();
            assert!(pool.contains(&v));
        }
    }

    #[test]
    fn fewer_than_k_uses_all() {
        let st = toy_stack(&[vec![[0.0, 0.0], [5.0, 0.0]], vec![[0.0, 0.0]]]);
        let cfg = SpatialEmpiricalConfig { k: 128, sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let v = spatial_empirical_sample(&st, 2, [0.0, 0.0], &cfg, &mut rng).unwrap();
            seen.insert(v[0] as i64);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn falls_back_without_labeled_neighbors() {
        let st = toy_stack(&[vec![[0.0, 0.0]], vec![[0.0, 0.0]]]).masked(&[1]);
        let cfg = SpatialEmpiricalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(spatial_empirical_sample(&st, 2, [0.0, 0.0], &cfg, &mut rng).is_none());
        let prior = StartPrior::SpatialEmpirical(cfg, FixedZinbConfig::default());
        let x = sample_start(&prior, &st, 2, &mut rng).unwrap();
        assert_eq!(x.shape(), (1, 2));
    }

    #[test]
    fn unfrozen_learned_prior_rejected() {
        let st = toy_stack(&[vec![[0.0, 0.0]]]);
        let net = PriorNet::new(2, 2, &super::super::learned::PriorConfig::default(), st.frame(), 0).unwrap();
        let r = sample_start(&StartPrior::Learned(&net), &st, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
