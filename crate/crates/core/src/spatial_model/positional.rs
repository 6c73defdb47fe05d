use std::f64::consts::PI;

use super::Section;
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Axis-aligned planar bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Frame {
    pub fn from_points(points: impl IntoIterator<Item = [f64; 2]>) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        if !min[0].is_finite() {
            return Self {
                min: [0.0; 2],
                max: [1.0; 2],
            };
        }
        Self { min, max }
    }

    /// Maps into `[0,1]²`; the flag reports whether clamping was needed.
    pub fn normalize(&self, p: [f64; 2]) -> ([f64; 2], bool) {
        let mut out = [0.0; 2];
        let mut clamped = false;
        for d in 0..2 {
            let span = self.max[d] - self.min[d];
            let u = if span > 0.0 { (p[d] - self.min[d]) / span } else { 0.0 };
            if !(0.0..=1.0).contains(&u) {
                clamped = true;
            }
            out[d] = u.clamp(0.0, 1.0);
        }
        (out, clamped)
    }

    pub fn translated(&self, by: [f64; 2]) -> Self {
        Self {
            min: [self.min[0] + by[0], self.min[1] + by[1]],
            max: [self.max[0] + by[0], self.max[1] + by[1]],
        }
    }
}

/// Sinusoidal features of the frame-normalized position: for each axis and
/// frequency `2^f·π`, the pair `(sin, cos)`. `dim` must be a multiple of 4.
pub fn positional_features(p: [f64; 2], frame: &Frame, dim: usize) -> Result<(Vec<f64>, bool)> {
    if dim % 4 != 0 {
        return Err(Error::Validation(format!("positional dim {dim} must be a multiple of 4")));
    }
    let (u, clamped) = frame.normalize(p);
    let freqs = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for ud in u {
        for f in 0..freqs {
            let w = PI * (1u64 << f) as f64;
            out.push((w * ud).sin());
            out.push((w * ud).cos());
        }
    }
    Ok((out, clamped))
}

/// Features for every spot of a section plus the number of clamped spots.
pub fn positional_matrix(section: &Section, frame: &Frame, dim: usize) -> Result<(Tensor2, usize)> {
    let mut data = Vec::with_capacity(section.len() * dim);
    let mut clamped = 0;
    for &c in &section.coords {
        let (f, cl) = positional_features(c, frame, dim)?;
        data.extend(f);
        clamped += cl as usize;
    }
    if clamped > 0 {
        log::debug!("{clamped} spots on z={} clamped to the frame", section.z);
    }
    Ok((Tensor2::from_vec(section.len(), dim, data)?, clamped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_minimum_gives_sin_cos_pattern() {
        let f = Frame {
            min: [2.0, -1.0],
            max: [5.0, 3.0],
        };
        let (v, cl) = positional_features([2.0, -1.0], &f, 8).unwrap();
        assert!(!cl);
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn translation_invariance() {
        let f = Frame {
            min: [0.0, 0.0],
            max: [7.0, 3.0],
        };
        let p = [1.3, 2.2];
        let shift = [100.25, -40.5];
        let (a, _) = positional_features(p, &f, 16).unwrap();
        let (b, _) = positional_features([p[0] + shift[0], p[1] + shift[1]], &f.translated(shift), 16).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_frame_is_clamped_and_flagged() {
        let f = Frame {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        };
        let (a, cl) = positional_features([-3.0, 0.5], &f, 4).unwrap();
        let (b, _) = positional_features([0.0, 0.5], &f, 4).unwrap();
        assert!(cl);
        assert_eq!(a, b);
    }

    #[test]
    fn identical_coordinates_identical_features() {
        let f = Frame::from_points([[0.0, 0.0], [4.0, 4.0]]);
        assert_eq!(
            positional_features([1.5, 2.5], &f, 12).unwrap(),
            positional_features([1.5, 2.5], &f, 12).unwrap()
        );
        assert!(positional_features([1.5, 2.5], &f, 6).is_err());
    }
}
