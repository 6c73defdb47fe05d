use super::knn::{by_distance_then_id, dist};
use super::SlideStack;

/// Which adjacent spots qualify as candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSource {
    /// Only spots on sections carrying expression.
    LabeledExpression,
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    /// 1-based section index of the candidate.
    pub z: usize,
    /// Local spot index within that section.
    pub index: usize,
    pub id: usize,
    /// Planar distance to the query.
    pub distance: f64,
}

/// Up to `k′` planar-nearest spots from sections `z±1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacentCandidates {
    pub candidates: Vec<Candidate>,
    pub available: bool,
}

/// Candidates for a query at `coords` on section `z`, nearest first with
/// ties broken by spot id.
pub fn adjacent_candidates(
    stack: &SlideStack,
    z: usize,
    coords: [f64; 2],
    k: usize,
    source: CandidateSource,
) -> AdjacentCandidates {
    let mut pool: Vec<(f64, usize, Candidate)> = Vec::new();
    for nz in [z.wrapping_sub(1), z + 1] {
        let Some(sec) = stack.section(nz) else { continue };
        if source == CandidateSource::LabeledExpression && !sec.is_labeled() {
            continue;
        }
        for (j, &c) in sec.coords.iter().enumerate() {
            let d = dist(coords, c);
            pool.push((
                d,
                sec.ids[j],
                Candidate {
                    z: nz,
                    index: j,
                    id: sec.ids[j],
                    distance: d,
                },
            ));
        }
    }
    let cmp = |a: &(f64, usize, Candidate), b: &(f64, usize, Candidate)| by_distance_then_id(&(a.0, a.1), &(b.0, b.1));
    if k > 0 && k < pool.len() {
        pool.select_nth_unstable_by(k - 1, cmp);
        pool.truncate(k);
    }
    if k == 0 {
        pool.clear();
    }
    pool.sort_by(cmp);
    let candidates: Vec<Candidate> = pool.into_iter().map(|e| e.2).collect();
    AdjacentCandidates {
        available: !candidates.is_empty(),
        candidates,
    }
}

/// [`adjacent_candidates`] for every spot of section `z`.
pub fn section_candidates(stack: &SlideStack, z: usize, k: usize, source: CandidateSource) -> Vec<AdjacentCandidates> {
    let Some(sec) = stack.section(z) else { return Vec::new() };
    sec.coords
        .iter()
        .map(|&c| adjacent_candidates(stack, z, c, k, source))
        .collect()
}
