//! Coarse gene maps: bilinear splatting of per-spot vectors onto a grid,
//! bilinear sampling back at spot positions, and the 3×3 convolution that
//! sits between them.
//!
//! Grid cell `(row, col)` is stored at row `row·W + col` of an `HW×C`
//! matrix. Continuous grid coordinates put cell centers on integers, so a
//! frame-normalized position `u ∈ [0,1]²` maps to `(u_x·(W−1), u_y·(H−1))`.

use crate::error::{Error, Result};
use crate::numerics::{SparseMatrix, Tensor2};
use crate::spatial_model::Frame;

/// Grid geometry shared by splatting and sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn square(n: usize) -> Self {
        Self { h: n, w: n }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Continuous `(x, y)` grid coordinates of a planar point.
    pub fn locate(&self, frame: &Frame, p: [f64; 2]) -> ([f64; 2], bool) {
        let (u, clamped) = frame.normalize(p);
        ([u[0] * (self.w - 1) as f64, u[1] * (self.h - 1) as f64], clamped)
    }

    /// The (up to) four cells enclosing `at` with their bilinear weights.
    /// Out-of-range coordinates are clamped to the border; weights always
    /// sum to 1.
    pub fn bilinear(&self, at: [f64; 2]) -> [(usize, f64); 4] {
        let axis = |v: f64, n: usize| -> (usize, usize, f64) {
            let v = v.clamp(0.0, (n - 1) as f64);
            if n == 1 {
                return (0, 0, 0.0);
            }
            let lo = (v.floor() as usize).min(n - 2);
            (lo, lo + 1, v - lo as f64)
        };
        let (x0, x1, fx) = axis(at[0], self.w);
        let (y0, y1, fy) = axis(at[1], self.h);
        [
            (y0 * self.w + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.w + x1, fx * (1.0 - fy)),
            (y1 * self.w + x0, (1.0 - fx) * fy),
            (y1 * self.w + x1, fx * fy),
        ]
    }
}

/// Rasterized per-spot vectors plus the splat density behind each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneMap {
    pub grid: Grid,
    /// `HW×C`
    pub values: Tensor2,
    pub density: Vec<f64>,
    /// Spots outside the frame that were clamped to the border.
    pub clamped: usize,
}

/// Density-normalized splat operator: `HW×N`, row `c` holds `w_ic / Σ_i w_ic`.
pub fn splat_matrix(grid: Grid, frame: &Frame, coords: &[[f64; 2]]) -> Result<(SparseMatrix, Vec<f64>, usize)> {
    let mut density = vec![0.0; grid.cells()];
    let mut clamped = 0;
    let mut raw = Vec::with_capacity(coords.len() * 4);
    for (i, &p) in coords.iter().enumerate() {
        let (at, c) = grid.locate(frame, p);
        clamped += c as usize;
        for (cell, w) in grid.bilinear(at) {
            if w > 0.0 {
                density[cell] += w;
                raw.push((cell, i, w));
            }
        }
    }
    let trip: Vec<(usize, usize, f64)> = raw.into_iter().map(|(c, i, w)| (c, i, w / density[c])).collect();
    Ok((SparseMatrix::from_triplets(grid.cells(), coords.len(), &trip)?, density, clamped))
}

/// Splats each spot's row of `features` into its four enclosing cells and
/// divides by the accumulated weight; empty cells stay zero.
pub fn build_gene_map(grid: Grid, frame: &Frame, coords: &[[f64; 2]], features: &Tensor2) -> Result<GeneMap> {
    if features.rows() != coords.len() {
        return Err(Error::shape(
            "build_gene_map",
            format!("{} coords, features {:?}", coords.len(), features.shape()),
        ));
    }
    check_grid(grid)?;
    let (s, density, clamped) = splat_matrix(grid, frame, coords)?;
    Ok(GeneMap {
        grid,
        values: s.mul_dense(features)?,
        density,
        clamped,
    })
}

fn check_grid(grid: Grid) -> Result<()> {
    if grid.h == 0 || grid.w == 0 {
        return Err(Error::Validation(format!("empty grid {}x{}", grid.h, grid.w)));
    }
    Ok(())
}

/// Bilinear interpolation of `map` (`HW×C`) at continuous grid coordinates.
pub fn grid_sample_bilinear(grid: Grid, map: &Tensor2, at: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; map.cols()];
    for (cell, w) in grid.bilinear(at) {
        for (o, v) in out.iter_mut().zip(map.row(cell)) {
            *o += w * v;
        }
    }
    out
}

/// Sampling operator `N×HW`; feeding it to `Graph::sparse_matmul` gives the
/// differentiable form of [`grid_sample_bilinear`].
pub fn sample_matrix(grid: Grid, points: &[[f64; 2]]) -> Result<SparseMatrix> {
    let trip: Vec<(usize, usize, f64)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| grid.bilinear(p).into_iter().map(move |(c, w)| (i, c, w)))
        .filter(|e| e.2 != 0.0)
        .collect();
    SparseMatrix::from_triplets(points.len(), grid.cells(), &trip)
}

/// Stencil offsets `(dy, dx)` in weight-block order.
pub const STENCIL: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn shifted(grid: Grid, cell: usize, (dy, dx): (isize, isize)) -> Option<usize> {
    let r = (cell / grid.w) as isize + dy;
    let c = (cell % grid.w) as isize + dx;
    if r < 0 || c < 0 || r >= grid.h as isize || c >= grid.w as isize {
        None
    } else {
        Some(r as usize * grid.w + c as usize)
    }
}

/// Zero-padded 3×3 convolution. `weight` is `9C_in×C_out` with block `o`
/// (rows `o·C_in..`) applied to the neighbor at `STENCIL[o]`.
pub fn conv3x3(grid: Grid, map: &Tensor2, weight: &Tensor2, bias: &[f64]) -> Result<Tensor2> {
    let cin = map.cols();
    if map.rows() != grid.cells() || weight.rows() != 9 * cin || bias.len() != weight.cols() {
        return Err(Error::shape(
            "conv3x3",
            format!("map {:?}, weight {:?}, bias {}", map.shape(), weight.shape(), bias.len()),
        ));
    }
    let mut out = Tensor2::from_fn(grid.cells(), weight.cols(), |_, j| bias[j]);
    for cell in 0..grid.cells() {
        for (o, &off) in STENCIL.iter().enumerate() {
            let Some(src) = shifted(grid, cell, off) else { continue };
            let x = map.row(src);
            for (a, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = weight.row(o * cin + a);
                for (y, w) in out.row_mut(cell).iter_mut().zip(wrow) {
                    *y += xv * w;
                }
            }
        }
    }
    Ok(out)
}

/// Splat → stencil shift → sample, collapsed into one `N×N` operator per
/// stencil offset. With these, sampling the convolved map at the spots is
/// `concat_o(M_o·F)·W + b`, which costs `O(N)` instead of `O(HW)`. Exact
/// because splatting, shifting and bilinear sampling are all linear and the
/// sample weights sum to 1 (so the bias passes through unchanged).
#[derive(Clone, Debug)]
pub struct MapOperator {
    pub grid: Grid,
    pub parts: Vec<SparseMatrix>,
    pub clamped: usize,
}

impl MapOperator {
    pub fn new(grid: Grid, frame: &Frame, coords: &[[f64; 2]]) -> Result<Self> {
        check_grid(grid)?;
        let (splat, _, clamped) = splat_matrix(grid, frame, coords)?;
        let n = coords.len();
        let at: Vec<[f64; 2]> = coords.iter().map(|&p| grid.locate(frame, p).0).collect();
        let mut parts = Vec::with_capacity(9);
        for &off in &STENCIL {
            let mut trip = Vec::new();
            for (i, &p) in at.iter().enumerate() {
                for (cell, w) in grid.bilinear(p) {
                    if w == 0.0 {
                        continue;
                    }
                    let Some(src) = shifted(grid, cell, off) else { continue };
                    trip.extend(splat.row_entries(src).map(|(j, s)| (i, j, w * s)));
                }
            }
            parts.push(SparseMatrix::from_triplets(n, n, &trip)?);
        }
        Ok(Self { grid, parts, clamped })
    }

    /// `N×9C` convolution input gathered at the spots.
    pub fn gather(&self, features: &Tensor2) -> Result<Tensor2> {
        let cols: Vec<Tensor2> = self
            .parts
            .iter()
            .map(|m| m.mul_dense(features))
            .collect::<Result<_>>()?;
        Tensor2::hstack(&cols.iter().collect::<Vec<_>>())
    }
}
