//! Prediction metrics, section splits, variance-ranked gene panels and
//! neighbor consistency.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::spatial_model::{NeighborGraph, SlideStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub pcc_spot_mean: f64,
    pub pcc_spot_std: f64,
    pub pcc_gene_mean: f64,
    pub pcc_gene_std: f64,
    /// Rows (spots) skipped because pred or truth is constant across genes.
    pub excluded_spots: usize,
    /// Columns (genes) skipped because pred or truth is constant across spots.
    pub excluded_genes: usize,
    pub spots: usize,
    pub genes: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mse = {:.6}", self.mse)?;
        writeln!(f, "mae = {:.6}", self.mae)?;
        writeln!(f, "pcc_spot = {:.6} ± {:.6}", self.pcc_spot_mean, self.pcc_spot_std)?;
        writeln!(f, "pcc_gene = {:.6} ± {:.6}", self.pcc_gene_mean, self.pcc_gene_std)?;
        writeln!(f, "excluded_spots = {}", self.excluded_spots)?;
        writeln!(f, "excluded_genes = {}", self.excluded_genes)?;
        writeln!(f, "spots = {}", self.spots)?;
        write!(f, "genes = {}", self.genes)
    }
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn compute_metrics(pred: &Tensor2, truth: &Tensor2) -> Result<MetricsReport> {
    if !pred.same_shape(truth) {
        return Err(Error::shape(
            "compute_metrics",
            format!("pred {:?} vs truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    let (n, g) = pred.shape();
    if n < 2 || g < 2 {
        return Err(Error::Validation(format!("metrics need at least 2 spots and 2 genes, got {n}×{g}")));
    }
    let count = (n * g) as f64;
    let mse = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / count;
    let mae = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / count;

    let spot: Vec<f64> = (0..n).filter_map(|i| pearson(pred.row(i), truth.row(i))).collect();
    let gene: Vec<f64> = (0..g)
        .filter_map(|j| pearson(&pred.column(j), &truth.column(j)))
        .collect();
    if spot.is_empty() {
        return Err(Error::UndefinedCorrelation("every spot is constant in pred or truth".into()));
    }
    if gene.is_empty() {
        return Err(Error::UndefinedCorrelation("every gene is constant in pred or truth".into()));
    }
    let (ps, pss) = mean_std(&spot);
    let (pg, pgs) = mean_std(&gene);
    Ok(MetricsReport {
        mse,
        mae,
        pcc_spot_mean: ps,
        pcc_spot_std: pss,
        pcc_gene_mean: pg,
        pcc_gene_std: pgs,
        excluded_spots: n - spot.len(),
        excluded_genes: g - gene.len(),
        spots: n,
        genes: g,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    EvenSlice,
    SingleLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// Role of each section, indexed by `z − 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub kind: SplitKind,
    pub roles: Vec<Role>,
}

impl Split {
    pub fn zs(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(k, _)| k + 1)
            .collect()
    }

    pub fn role(&self, z: usize) -> Option<Role> {
        z.checked_sub(1).and_then(|k| self.roles.get(k).copied())
    }
}

/// Even-slice: even `z` are test targets, odd `z` train with the last odd
/// section held out for validation. Single-label: one seeded section trains,
/// every other section is a test target.
pub fn make_split(z_count: usize, kind: SplitKind, seed: u64) -> Result<Split> {
    let roles = match kind {
        SplitKind::EvenSlice => {
            if z_count < 3 {
                return Err(Error::Validation(format!("even-slice split needs Z >= 3, got {z_count}")));
            }
            let last_odd = if z_count % 2 == 1 { z_count } else { z_count - 1 };
            (1..=z_count)
                .map(|z| {
                    if z % 2 == 0 {
                        Role::Test
                    } else if z == last_odd {
                        Role::Validation
                    } else {
                        Role::Train
                    }
                })
                .collect()
        }
        SplitKind::SingleLabel => {
            if z_count < 2 {
                return Err(Error::Validation(format!("single-label split needs Z >= 2, got {z_count}")));
            }
            let pick = ChaCha8Rng::seed_from_u64(seed).random_range(1..=z_count);
            (1..=z_count)
                .map(|z| if z == pick { Role::Train } else { Role::Test })
                .collect()
        }
    };
    Ok(Split { kind, roles })
}

/// Indices of the `top_k` highest-variance columns, ties to the lower index.
pub fn hvg_select(expr: &Tensor2, top_k: usize) -> Result<Vec<usize>> {
    let (n, g) = expr.shape();
    if top_k > g {
        return Err(Error::Validation(format!("top_k {top_k} exceeds {g} genes")));
    }
    if n == 0 {
        return Err(Error::EmptyInput("hvg_select: no spots"));
    }
    let var: Vec<f64> = (0..g).map(|j| mean_std(&expr.column(j)).1.powi(2)).collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    Ok(order)
}

/// [`hvg_select`] over the labeled spots of sections `zs`.
pub fn hvg_select_stack(stack: &SlideStack, zs: &[usize], top_k: usize) -> Result<Vec<usize>> {
    let mats: Vec<&Tensor2> = zs
        .iter()
        .filter_map(|&z| stack.section(z).and_then(|s| s.expression.as_ref()))
        .collect();
    if mats.is_empty() {
        return Err(Error::Validation("no labeled sections for gene ranking".into()));
    }
    hvg_select(&Tensor2::vstack(&mats)?, top_k)
}

/// Fraction of undirected edges whose endpoints share a label. Edges are
/// deduplicated and self-loops ignored.
pub fn neighbor_consistency(edges: &[(usize, usize)], labels: &[usize]) -> Result<f64> {
    let mut e: Vec<(usize, usize)> = edges
        .iter()
        .filter(|(a, b)| a != b)
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect();
    e.sort_unstable();
    e.dedup();
    if e.is_empty() {
        return Err(Error::Validation("neighbor consistency needs at least one edge".into()));
    }
    if let Some(&(_, b)) = e.iter().find(|&&(_, b)| b >= labels.len()) {
        return Err(Error::Validation(format!("vertex {b} has no label")));
    }
    let same = e.iter().filter(|&&(a, b)| labels[a] == labels[b]).count();
    Ok(same as f64 / e.len() as f64)
}

pub fn graph_neighbor_consistency(graph: &NeighborGraph, labels: &[usize]) -> Result<f64> {
    neighbor_consistency(&graph.undirected_edges(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn perfect_prediction() {
        let t = rand_mat(&mut ChaCha8Rng::seed_from_u64(1), 6, 5);
        let m = compute_metrics(&t, &t).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.mae, 0.0);
        assert!((m.pcc_spot_mean - 1.0).abs() < 1e-12);
        assert!((m.pcc_gene_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negated_zero_mean_rows() {
        let t = Tensor2::from_rows(&[vec![1.0, -1.0, 0.0], vec![2.0, 0.0, -2.0]]).unwrap();
        let m = compute_metrics(&t.map(|x| -x), &t).unwrap();
        assert!((m.pcc_spot_mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_rows_are_excluded_and_counted() {
        let truth = Tensor2::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0], vec![3.0, 1.0, 0.0]]).unwrap();
        let m = compute_metrics(&truth, &truth).unwrap();
        assert_eq!(m.excluded_spots, 1);
        let flat = Tensor2::filled(3, 3, 2.0);
        assert!(matches!(compute_metrics(&flat, &truth), Err(Error::UndefinedCorrelation(_))));
        assert!(compute_metrics(&Tensor2::zeros(1, 3), &Tensor2::zeros(1, 3)).is_err());
    }

    #[test]
    fn even_split_of_six() {
        let s = make_split(6, SplitKind::EvenSlice, 0).unwrap();
        assert_eq!(s.zs(Role::Test), vec![2, 4, 6]);
        assert_eq!(s.zs(Role::Train), vec![1, 3]);
        assert_eq!(s.zs(Role::Validation), vec![5]);
        assert!(make_split(2, SplitKind::EvenSlice, 0).is_err());
    }

    #[test]
    fn single_label_split() {
        let s = make_split(2, SplitKind::SingleLabel, 17).unwrap();
        assert_eq!(s.zs(Role::Train).len(), 1);
        assert_eq!(s, make_split(2, SplitKind::SingleLabel, 17).unwrap());
        assert!(make_split(1, SplitKind::SingleLabel, 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_sections(z in 3usize..20, seed in any::<u64>()) {
            for kind in [SplitKind::EvenSlice, SplitKind::SingleLabel] {
                let s = make_split(z, kind, seed).unwrap();
                let mut all = [s.zs(Role::Train), s.zs(Role::Validation), s.zs(Role::Test)].concat();
                all.sort();
                prop_assert_eq!(all, (1..=z).collect::<Vec<_>>());
                prop_assert!(!s.zs(Role::Test).is_empty());
                prop_assert_eq!(&s, &make_split(z, kind, seed).unwrap());
            }
        }

        #[test]
        fn pcc_symmetric_and_translation_invariant(seed in any::<u64>(), shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mat(&mut rng, 7, 4);
            let b = rand_mat(&mut rng, 7, 4);
            let m1 = compute_metrics(&a, &b).unwrap();
            let m2 = compute_metrics(&b, &a).unwrap();
            prop_assert!((m1.pcc_spot_mean - m2.pcc_spot_mean).abs() < 1e-12);
            prop_assert!((m1.pcc_gene_mean - m2.pcc_gene_mean).abs() < 1e-12);
            let m3 = compute_metrics(&a.map(|x| x + shift), &b).unwrap();
            prop_assert!((m1.pcc_spot_mean - m3.pcc_spot_mean).abs() < 1e-9);
            prop_assert!((m1.pcc_gene_mean - m3.pcc_gene_mean).abs() < 1e-9);
        }

        #[test]
        fn consistency_invariant_under_relabeling(
            edges in proptest::collection::vec((0usize..10, 0usize..10), 1..30),
            labels in proptest::collection::vec(0usize..4, 10),
        ) {
            prop_assume!(edges.iter().any(|(a, b)| a != b));
            let relabeled: Vec<usize> = labels.iter().map(|l| (l + 1) % 4 + 10).collect();
            prop_assert_eq!(
                neighbor_consistency(&edges, &labels).unwrap(),
                neighbor_consistency(&edges, &relabeled).unwrap()
            );
        }
    }

    #[test]
    fn hvg_hand_built() {
        // Variances per column: 0, 1.25, 5, 0.421875, 1.25
        let m = Tensor2::from_rows(&[
            vec![1.0, 0.0, 0.0, 1.0, 3.0],
            vec![1.0, 1.0, 2.0, 1.0, 2.0],
            vec![1.0, 2.0, 4.0, 2.5, 1.0],
            vec![1.0, 3.0, 6.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(hvg_select(&m, 3).unwrap(), vec![2, 1, 4]);
        assert_eq!(hvg_select(&m, 4).unwrap(), vec![2, 1, 4, 3]);
        let mut all = hvg_select(&m, 5).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(hvg_select(&m, 6).is_err());
    }

    #[test]
    fn consistency_hand_cases() {
        assert_eq!(neighbor_consistency(&[(0, 1), (1, 2)], &[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(neighbor_consistency(&[(0, 1), (1, 2), (2, 3)], &[0, 1, 0, 1]).unwrap(), 0.0);
        let cycle = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 0)];
        assert_eq!(neighbor_consistency(&cycle, &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(neighbor_consistency(&[(2, 2)], &[0, 0, 0]).is_err());
    }
}
