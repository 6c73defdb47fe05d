//! Serial-section corpus: sections of spots in a shared planar frame,
//! within-section kNN graphs and retrieval of candidates on adjacent sections.

mod candidates;
mod io;
mod knn;
mod positional;

pub use candidates::{adjacent_candidates, section_candidates, AdjacentCandidates, Candidate, CandidateSource};
pub use io::{read_matrix, write_matrix};
pub use knn::{build_knn_graph, NeighborGraph};
pub use positional::{positional_features, positional_matrix, Frame};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Borrowed view of one spot.
#[derive(Clone, Copy, Debug)]
pub struct Spot<'a> {
    pub id: usize,
    pub coords: [f64; 2],
    pub z: usize,
    pub expression: Option<&'a [f64]>,
    pub embedding: &'a [f64],
}

/// One section, stored column-wise over its spots.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    /// 1-based section index.
    pub z: usize,
    pub ids: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    /// `N×D` image-derived embeddings.
    pub embedding: Tensor2,
    /// `N×G` log1p expression; `None` for an unlabeled section.
    pub expression: Option<Tensor2>,
    /// `N×G` raw integer counts, when known.
    pub counts: Option<Tensor2>,
    /// Ground-truth region per spot (synthetic stacks only).
    pub labels: Option<Vec<usize>>,
}

impl Section {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.expression.is_some()
    }

    pub fn spot(&self, i: usize) -> Spot<'_> {
        Spot {
            id: self.ids[i],
            coords: self.coords[i],
            z: self.z,
            expression: self.expression.as_ref().map(|e| e.row(i)),
            embedding: self.embedding.row(i),
        }
    }

    /// Counts for the likelihood: stored counts, else `expm1` of the log1p
    /// expression rounded to the nearest integer.
    pub fn count_matrix(&self) -> Option<Tensor2> {
        if let Some(c) = &self.counts {
            return Some(c.clone());
        }
        self.expression
            .as_ref()
            .map(|e| e.map(|v| v.exp_m1().round().max(0.0)))
    }

    /// Drops expression, counts and labels.
    pub fn unlabeled(&self) -> Section {
        Section {
            expression: None,
            counts: None,
            labels: None,
            ..self.clone()
        }
    }
}

/// Ordered serial sections sharing one gene panel and embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideStack {
    sections: Vec<Section>,
    genes: usize,
    emb_dim: usize,
    gene_names: Vec<String>,
    units: String,
}

impl SlideStack {
    /// Validates the stack invariants: contiguous `z = 1..Z`, constant `G`
    /// and `D`, unique spot ids and nonnegative finite expression.
    pub fn new(sections: Vec<Section>, gene_names: Vec<String>, emb_dim: usize, units: impl Into<String>) -> Result<Self> {
        let genes = gene_names.len();
        let mut seen = std::collections::HashSet::new();
        for (k, s) in sections.iter().enumerate() {
            if s.z != k + 1 {
                return Err(Error::Validation(format!(
                    "section {k} has z={}, expected contiguous indices starting at 1",
                    s.z
                )));
            }
            let n = s.len();
            if s.coords.len() != n || s.embedding.rows() != n {
                return Err(Error::Validation(format!("section z={} has inconsistent spot counts", s.z)));
            }
            if s.embedding.cols() != emb_dim {
                return Err(Error::Validation(format!(
                    "section z={} embeddings have {} dims, stack has {emb_dim}",
                    s.z,
                    s.embedding.cols()
                )));
            }
            if s.coords.iter().flatten().any(|c| !c.is_finite()) || !s.embedding.is_finite() {
                return Err(Error::Validation(format!("section z={} has non-finite coordinates or embeddings", s.z)));
            }
            for m in [&s.expression, &s.counts].into_iter().flatten() {
                if m.shape() != (n, genes) {
                    return Err(Error::Validation(format!(
                        "section z={} expression is {:?}, expected ({n}, {genes})",
                        s.z,
                        m.shape()
                    )));
                }
                if m.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Validation(format!("section z={} has negative or non-finite expression", s.z)));
                }
            }
            if let Some(l) = &s.labels {
                if l.len() != n {
                    return Err(Error::Validation(format!("section z={} label count mismatch", s.z)));
                }
            }
            for &id in &s.ids {
                if !seen.insert(id) {
                    return Err(Error::Validation(format!("duplicate spot id {id}")));
                }
            }
        }
        Ok(Self {
            sections,
            genes,
            emb_dim,
            gene_names,
            units: units.into(),
        })
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn z_count(&self) -> usize {
        self.sections.len()
    }

    pub fn genes(&self) -> usize {
        self.genes
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    /// Section with 1-based index `z`.
    pub fn section(&self, z: usize) -> Option<&Section> {
        z.checked_sub(1).and_then(|k| self.sections.get(k))
    }

    /// Bounding frame over every spot of the stack.
    pub fn frame(&self) -> Frame {
        Frame::from_points(self.sections.iter().flat_map(|s| s.coords.iter().copied()))
    }

    pub fn total_spots(&self) -> usize {
        self.sections.iter().map(Section::len).sum()
    }

    /// Stack of the listed sections (1-based, increasing), re-indexed to a
    /// contiguous `1..` range in the given order.
    pub fn sub_stack(&self, zs: &[usize]) -> Result<SlideStack> {
        let mut out = Vec::with_capacity(zs.len());
        for (k, &z) in zs.iter().enumerate() {
            let s = self
                .section(z)
                .ok_or_else(|| Error::Validation(format!("no section z={z}")))?;
            out.push(Section { z: k + 1, ..s.clone() });
        }
        SlideStack::new(out, self.gene_names.clone(), self.emb_dim, self.units.clone())
    }

    /// Copy with expression, counts and labels removed from sections `zs`.
    pub fn masked(&self, zs: &[usize]) -> SlideStack {
        let mut out = self.clone();
        for s in &mut out.sections {
            if zs.contains(&s.z) {
                *s = s.unlabeled();
            }
        }
        out
    }

    pub fn labeled_zs(&self) -> Vec<usize> {
        self.sections.iter().filter(|s| s.is_labeled()).map(|s| s.z).collect()
    }
}
