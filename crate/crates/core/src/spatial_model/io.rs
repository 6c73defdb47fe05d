//! Stack-on-disk layout.
//!
//! ```text
//! stack.json           Z, G, D, gene names, per-section spot counts, units
//! spots_z<k>.csv       id,a,b
//! emb_z<k>.bin         N×D
//! expr_z<k>.bin        N×G log1p expression (absent for unlabeled sections)
//! counts_z<k>.bin      N×G raw counts (optional)
//! labels_z<k>.csv      id,region (optional)
//! ```
//!
//! Matrix files hold a `u32 rows | u32 cols` little-endian header followed by
//! row-major little-endian `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Section, SlideStack};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Serialize, Deserialize)]
struct StackMeta {
    z: usize,
    genes: usize,
    emb_dim: usize,
    gene_names: Vec<String>,
    spots_per_section: Vec<usize>,
    units: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpotRow {
    id: usize,
    a: f64,
    b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: usize,
    region: usize,
}

pub fn write_matrix(path: &Path, m: &Tensor2) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Validation("matrix too tall".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Validation("matrix too wide".into()))?;
    let mut out = Vec::with_capacity(8 + 8 * m.len());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Tensor2> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "missing 8-byte header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(Error::format(
            path,
            format!("{rows}×{cols} header but {} payload bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor2::from_vec(rows, cols, data)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

impl SlideStack {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = StackMeta {
            z: self.z_count(),
            genes: self.genes(),
            emb_dim: self.emb_dim(),
            gene_names: self.gene_names().to_vec(),
            spots_per_section: self.sections().iter().map(Section::len).collect(),
            units: self.units().to_string(),
        };
        fs::write(dir.join("stack.json"), serde_json::to_string_pretty(&meta)?)?;
        for s in self.sections() {
            let z = s.z;
            let p = dir.join(format!("spots_z{z}.csv"));
            let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
            for (i, &id) in s.ids.iter().enumerate() {
                let [a, b] = s.coords[i];
                w.serialize(SpotRow { id, a, b }).map_err(|e| csv_err(&p, e))?;
            }
            w.flush()?;
            write_matrix(&dir.join(format!("emb_z{z}.bin")), &s.embedding)?;
            if let Some(e) = &s.expression {
                write_matrix(&dir.join(format!("expr_z{z}.bin")), e)?;
            }
            if let Some(c) = &s.counts {
                write_matrix(&dir.join(format!("counts_z{z}.bin")), c)?;
            }
            if let Some(l) = &s.labels {
                let p = dir.join(format!("labels_z{z}.csv"));
                let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
                for (&id, &region) in s.ids.iter().zip(l) {
                    w.serialize(LabelRow { id, region }).map_err(|e| csv_err(&p, e))?;
                }
                w.flush()?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SlideStack> {
        let meta_path = dir.join("stack.json");
        let meta: StackMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.gene_names.len() != meta.genes || meta.spots_per_section.len() != meta.z {
            return Err(Error::format(&meta_path, "inconsistent header counts"));
        }
        let mut sections = Vec::with_capacity(meta.z);
        for z in 1..=meta.z {
            let p = dir.join(format!("spots_z{z}.csv"));
            let mut r = csv::Reader::from_path(&p).map_err(|e| csv_err(&p, e))?;
            let mut ids = Vec::new();
            let mut coords = Vec::new();
            for row in r.deserialize::<SpotRow>() {
                let row = row.map_err(|e| csv_err(&p, e))?;
                ids.push(row.id);
                coords.push([row.a, row.b]);
            }
            if ids.len() != meta.spots_per_section[z - 1] {
                return Err(Error::format(&p, "spot count disagrees with stack.json"));
            }
            let embedding = read_matrix(&dir.join(format!("emb_z{z}.bin")))?;
            let opt = |name: String| -> Result<Option<Tensor2>> {
                let p = dir.join(name);
                if p.exists() {
                    read_matrix(&p).map(Some)
                } else {
                    Ok(None)
                }
            };
            let expression = opt(format!("expr_z{z}.bin"))?;
            let counts = opt(format!("counts_z{z}.bin"))?;
            let lp = dir.join(format!("labels_z{z}.csv"));
            let labels = if lp.exists() {
                let mut r = csv::Reader::from_path(&lp).map_err(|e| csv_err(&lp, e))?;
                let mut by_id = std::collections::HashMap::new();
                for row in r.deserialize::<LabelRow>() {
                    let row = row.map_err(|e| csv_err(&lp, e))?;
                    by_id.insert(row.id, row.region);
                }
                let l: Option<Vec<usize>> = ids.iter().map(|id| by_id.get(id).copied()).collect();
                Some(l.ok_or_else(|| Error::format(&lp, "missing label for a spot"))?)
            } else {
                None
            };
            sections.push(Section {
                z,
                ids,
                coords,
                embedding,
                expression,
                counts,
                labels,
            });
        }
        SlideStack::new(sections, meta.gene_names, meta.emb_dim, meta.units)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial_model::test_util::toy_stack;

    #[test]
    fn stack_round_trip_is_exact() {
        let mut st = toy_stack(&[vec![[0.1, 0.7], [1.0 / 3.0, 2.5]], vec![[0.0, 0.0]]]).masked(&[2]);
        let mut secs = st.sections().to_vec();
        secs[0].labels = Some(vec![3, 1]);
        secs[0].counts = Some(Tensor2::from_vec(2, 2, vec![0.0, 1.0, 4.0, 9.0]).unwrap());
        st = SlideStack::new(secs, st.gene_names().to_vec(), 2, "grid").unwrap();
        let dir = tempfile::tempdir().unwrap();
        st.save(dir.path()).unwrap();
        assert!(!dir.path().join("expr_z2.bin").exists());
        let back = SlideStack::load(dir.path()).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn matrix_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, &Tensor2::from_vec(1, 2, vec![1.5, -2.0]).unwrap()).unwrap();
        let b = fs::read(&p).unwrap();
        assert_eq!(b.len(), 8 + 16);
        assert_eq!(u32::from_le_bytes(b[0..4].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        fs::write(&p, &b[..b.len() - 3]).unwrap();
        assert!(matches!(read_matrix(&p), Err(Error::Format { .. })));
    }
}
