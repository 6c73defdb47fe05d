use std::cmp::Ordering;

use super::Section;
use crate::error::{Error, Result};

/// Within-section k-nearest-neighbor graph. Neighbor entries are local spot
/// indices into the section, sorted by `(distance, spot id)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub(crate) fn by_distance_then_id(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact kNN by full pairwise distance; ties go to the lower spot id.
pub fn build_knn_graph(section: &Section, k: usize) -> Result<NeighborGraph> {
    let n = section.len();
    if n == 0 {
        return Err(Error::EmptyInput("build_knn_graph: empty section"));
    }
    if k == 0 {
        return Err(Error::Validation("kNN graph needs k >= 1".into()));
    }
    let keep = k.min(n - 1);
    let mut neighbors = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    // (distance, id, local index)
    let mut buf: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        buf.clear();
        let p = section.coords[i];
        for j in 0..n {
            if j != i {
                buf.push((dist(p, section.coords[j]), section.ids[j], j));
            }
        }
        let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| by_distance_then_id(&(a.0, a.1), &(b.0, b.1));
        if keep > 0 && keep < buf.len() {
            buf.select_nth_unstable_by(keep - 1, cmp);
            buf.truncate(keep);
        }
        buf.sort_by(cmp);
        neighbors.push(buf.iter().map(|e| e.2).collect());
        distances.push(buf.iter().map(|e| e.0).collect());
    }
    Ok(NeighborGraph { k, neighbors, distances })
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Deduplicated undirected edge set as `(min, max)` local index pairs.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().map(move |&j| (i.min(j), i.max(j))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial_model::test_util::toy_stack;
    use crate::spatial_model::SlideStack;
    use proptest::prelude::*;

    fn line(points: &[f64]) -> SlideStack {
        toy_stack(&[points.iter().map(|&a| [a, 0.0]).collect()])
    }

    #[test]
    fn collinear_middle_spot() {
        let st = line(&[0.0, 1.0, 3.0]);
        let g = build_knn_graph(&st.sections()[0], 1).unwrap();
        assert_eq!(g.neighbors[1], vec![0]);
        assert_eq!(g.distances[1], vec![1.0]);
    }

    #[test]
    fn large_k_gives_complete_graph() {
        let st = line(&[0.0, 1.0, 3.0, 7.0]);
        let g = build_knn_graph(&st.sections()[0], 10).unwrap();
        for (i, nb) in g.neighbors.iter().enumerate() {
            let mut s = nb.clone();
            s.sort();
            let expect: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(s, expect);
        }
    }

    #[test]
    fn equidistant_tie_goes_to_lower_id() {
        let st = line(&[-1.0, 0.0, 1.0]);
        let g = build_knn_graph(&st.sections()[0], 1).unwrap();
        assert_eq!(g.neighbors[1], vec![0]);
    }

    #[test]
    fn empty_section_is_rejected() {
        let st = line(&[]);
        assert!(matches!(build_knn_graph(&st.sections()[0], 3), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn single_spot_has_no_neighbors() {
        let st = line(&[2.0]);
        let g = build_knn_graph(&st.sections()[0], 3).unwrap();
        assert!(g.neighbors[0].is_empty());
    }

    proptest! {
        #[test]
        fn neighbor_sets_survive_storage_permutation(
            pts in proptest::collection::vec((0i32..6, 0i32..6), 2..14),
            k in 1usize..6,
            rot in 0usize..13,
        ) {
            let coords: Vec<[f64; 2]> = pts.iter().map(|&(a, b)| [a as f64, b as f64]).collect();
            let st = toy_stack(&[coords.clone()]);
            let sec = &st.sections()[0];
            let g = build_knn_graph(sec, k).unwrap();

            let n = coords.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let mut shuffled = sec.clone();
            shuffled.ids = perm.iter().map(|&p| sec.ids[p]).collect();
            shuffled.coords = perm.iter().map(|&p| sec.coords[p]).collect();
            let g2 = build_knn_graph(&shuffled, k).unwrap();

            for (i, &p) in perm.iter().enumerate() {
                let a: Vec<usize> = g.neighbors[p].iter().map(|&j| sec.ids[j]).collect();
                let b: Vec<usize> = g2.neighbors[i].iter().map(|&j| shuffled.ids[j]).collect();
                prop_assert_eq!(a, b);
            }
            // Brute-force oracle: sorted (distance, id) list truncated to k.
            for i in 0..n {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (dist(coords[i], coords[j]), sec.ids[j]))
                    .collect();
                all.sort_by(by_distance_then_id);
                all.truncate(k);
                let got: Vec<usize> = g.neighbors[i].iter().map(|&j| sec.ids[j]).collect();
                prop_assert_eq!(got, all.iter().map(|e| e.1).collect::<Vec<_>>());
                prop_assert!(!g.neighbors[i].contains(&i));
            }
        }
    }
}
