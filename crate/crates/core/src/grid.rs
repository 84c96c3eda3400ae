//! Cell-centered grid geometry, field containers and the two discrete
//! operators everything else is built on: the zero-flux diffusion stencil and
//! the particle-in-cell deposit matrix.
//!
//! Cells are linearized with axis 0 fastest. Cell `i` along axis `k` has its
//! center at `(i + 0.5) * h_k`; the domain along that axis is `[0, n_k * h_k]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SparseOperator;

pub const MAX_DIM: usize = 3;
/// Relative tolerance when comparing grid spacings.
pub const SPACING_RTOL: f64 = 1e-6;

/// Geometry of a `d`-dimensional cell-centered grid, `1 <= d <= 3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct CellGrid {
    ndim: usize,
    dims: [usize; MAX_DIM],
    spacing: [f64; MAX_DIM],
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl TryFrom<GridRepr> for CellGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        CellGrid::new(&r.dims, &r.spacing)
    }
}

impl From<CellGrid> for GridRepr {
    fn from(g: CellGrid) -> Self {
        GridRepr {
            dims: g.dims().to_vec(),
            spacing: g.spacing().to_vec(),
        }
    }
}

impl CellGrid {
    pub fn new(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_DIM {
            return Err(Error::InvalidGrid(format!(
                "dimension count must be 1..=3, got {}",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "{} dims but {} spacings",
                dims.len(),
                spacing.len()
            )));
        }
        if let Some(k) = dims.iter().position(|&n| n == 0) {
            return Err(Error::InvalidGrid(format!("axis {k} has zero cells")));
        }
        if let Some(k) = spacing.iter().position(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "axis {k} spacing {} is not positive",
                spacing[k]
            )));
        }
        let mut g = CellGrid {
            ndim: dims.len(),
            dims: [1; MAX_DIM],
            spacing: [1.0; MAX_DIM],
        };
        g.dims[..dims.len()].copy_from_slice(dims);
        g.spacing[..dims.len()].copy_from_slice(spacing);
        Ok(g)
    }

    /// Grid covering the unit box `[0,1]^d` with `dims` cells.
    pub fn unit(dims: &[usize]) -> Result<Self> {
        let spacing: Vec<f64> = dims.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
        Self::new(dims, &spacing)
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.ndim]
    }

    pub fn cell_count(&self) -> usize {
        self.dims().iter().product()
    }

    /// `h^d`, the volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Physical length of the domain along `axis`.
    pub fn extent(&self, axis: usize) -> f64 {
        self.dims[axis] as f64 * self.spacing[axis]
    }

    /// Euclidean diameter of the domain.
    pub fn diameter(&self) -> f64 {
        (0..self.ndim)
            .map(|k| self.extent(k).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.dims[..axis].iter().product()
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        let mut stride = 1;
        for k in 0..self.ndim {
            lin += idx[k] * stride;
            stride *= self.dims[k];
        }
        lin
    }

    pub fn multi_index(&self, mut lin: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for k in 0..self.ndim {
            idx[k] = lin % self.dims[k];
            lin /= self.dims[k];
        }
        idx
    }

    pub fn center(&self, lin: usize) -> Vec<f64> {
        let idx = self.multi_index(lin);
        (0..self.ndim)
            .map(|k| (idx[k] as f64 + 0.5) * self.spacing[k])
            .collect()
    }

    /// True when `point` lies in the closed domain.
    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.ndim
            && (0..self.ndim).all(|k| point[k] >= 0.0 && point[k] <= self.extent(k))
    }

    /// Cell containing `point`; points on the upper wall belong to the last cell.
    pub fn cell_of(&self, point: &[f64]) -> Option<usize> {
        if !self.contains(point) {
            return None;
        }
        let mut idx = [0; MAX_DIM];
        for k in 0..self.ndim {
            let i = (point[k] / self.spacing[k]).floor() as usize;
            idx[k] = i.min(self.dims[k] - 1);
        }
        Some(self.linear_index(&idx))
    }

    /// Clamp `point` into the closed domain.
    pub fn clamp_point(&self, point: &mut [f64]) {
        for k in 0..self.ndim {
            point[k] = point[k].clamp(0.0, self.extent(k));
        }
    }

    /// Same dims, and spacings equal up to single-precision rounding (volume
    /// files store spacing as 32-bit floats).
    pub fn check_same(&self, other: &CellGrid) -> Result<()> {
        let close = self
            .spacing()
            .iter()
            .zip(other.spacing())
            .all(|(a, b)| (a - b).abs() <= SPACING_RTOL * a.abs().max(b.abs()));
        if self.dims() != other.dims() || !close {
            return Err(Error::ShapeMismatch(format!(
                "grid {:?}/{:?} vs {:?}/{:?}",
                self.dims(),
                self.spacing(),
                other.dims(),
                other.spacing()
            )));
        }
        Ok(())
    }
}

pub fn build_grid(dims: &[usize], spacing: &[f64]) -> Result<CellGrid> {
    CellGrid::new(dims, spacing)
}

/// One real value per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: CellGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: CellGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.cell_count()
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: CellGrid) -> Self {
        ScalarField {
            grid,
            values: vec![0.0; grid.cell_count()],
        }
    }

    pub fn constant(grid: CellGrid, c: f64) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.cell_count()],
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&x| x >= 0.0)
    }

    pub fn check_same_grid(&self, other: &ScalarField) -> Result<()> {
        self.grid.check_same(&other.grid)
    }

    /// Check that this field can serve as a density.
    pub fn check_density(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "density value {} at cell {i} is negative or not finite",
                self.values[i]
            )));
        }
        Ok(())
    }
}

/// `d` cell-centered components, each with one value per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: CellGrid,
    pub components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn new(grid: CellGrid, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.ndim() {
            return Err(Error::ShapeMismatch(format!(
                "{} components for a {}-d grid",
                components.len(),
                grid.ndim()
            )));
        }
        if let Some(c) = components.iter().find(|c| c.len() != grid.cell_count()) {
            return Err(Error::ShapeMismatch(format!(
                "component of length {} for {} cells",
                c.len(),
                grid.cell_count()
            )));
        }
        Ok(VectorField { grid, components })
    }

    pub fn zeros(grid: CellGrid) -> Self {
        VectorField {
            grid,
            components: vec![vec![0.0; grid.cell_count()]; grid.ndim()],
        }
    }

    /// Field with the same vector at every cell.
    pub fn uniform(grid: CellGrid, value: &[f64]) -> Result<Self> {
        if value.len() != grid.ndim() {
            return Err(Error::ShapeMismatch(format!(
                "vector of length {} for a {}-d grid",
                value.len(),
                grid.ndim()
            )));
        }
        Ok(VectorField {
            grid,
            components: value
                .iter()
                .map(|&c| vec![c; grid.cell_count()])
                .collect(),
        })
    }

    /// Evaluate `f` at every cell center.
    pub fn from_fn(grid: CellGrid, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut v = VectorField::zeros(grid);
        for cell in 0..grid.cell_count() {
            let value = f(&grid.center(cell));
            for (k, c) in v.components.iter_mut().enumerate() {
                c[cell] = value[k];
            }
        }
        v
    }

    pub fn at(&self, cell: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[cell]).collect()
    }

    pub fn speed(&self, cell: usize) -> f64 {
        self.components
            .iter()
            .map(|c| c[cell] * c[cell])
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_speed(&self) -> f64 {
        (0..self.grid.cell_count())
            .map(|c| self.speed(c))
            .fold(0.0, f64::max)
    }
}

/// Linear interpolation position along an axis of `n` cells, given the
/// coordinate in cell-index units (`t = x / h - 0.5`, so cell centers sit at
/// integers): lower cell, fractional offset toward the upper cell, and
/// whether the weights vary with `t` (false within half a cell of a wall,
/// where values are extrapolated as constants).
#[inline]
fn axis_position(t: f64, n: usize) -> (usize, f64, bool) {
    if n == 1 || t <= 0.0 {
        (0, 0.0, false)
    } else if t >= (n - 1) as f64 {
        (n - 1, 0.0, false)
    } else {
        let i0 = (t.floor() as usize).min(n - 2);
        (i0, t - i0 as f64, true)
    }
}

/// Deposit of one particle: up to `2^d` receiving cells, their weights, and
/// the derivative of each weight with respect to each velocity component of
/// the particle's home cell.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub len: usize,
    pub cells: [usize; 8],
    pub weights: [f64; 8],
    pub dweights: [[f64; MAX_DIM]; 8],
}

impl Stencil {
    /// `coords` are in cell-index units; `dpos_dv` is the derivative of the
    /// physical position with respect to velocity (the time step).
    fn at_position(grid: &CellGrid, coords: &[f64; MAX_DIM], dpos_dv: f64) -> Self {
        let d = grid.ndim();
        let mut axes = [(0usize, 0.0f64, false); MAX_DIM];
        for k in 0..d {
            axes[k] = axis_position(coords[k], grid.dims[k]);
        }
        let mut st = Stencil {
            len: 0,
            cells: [0; 8],
            weights: [0.0; 8],
            dweights: [[0.0; MAX_DIM]; 8],
        };
        'corner: for corner in 0..(1usize << d) {
            let mut idx = [0usize; MAX_DIM];
            let mut w = [1.0; MAX_DIM];
            let mut dw = [0.0; MAX_DIM];
            for k in 0..d {
                let (lo, frac, two) = axes[k];
                let upper = (corner >> k) & 1 == 1;
                if !two {
                    // single receiving cell along this axis
                    if upper {
                        continue 'corner;
                    }
                    idx[k] = lo;
                } else {
                    let rate = dpos_dv / grid.spacing[k];
                    if upper {
                        idx[k] = lo + 1;
                        w[k] = frac;
                        dw[k] = rate;
                    } else {
                        idx[k] = lo;
                        w[k] = 1.0 - frac;
                        dw[k] = -rate;
                    }
                }
            }
            let e = st.len;
            st.cells[e] = grid.linear_index(&idx);
            st.weights[e] = w[..d].iter().product();
            for k in 0..d {
                st.dweights[e][k] =
                    dw[k] * (0..d).filter(|&j| j != k).map(|j| w[j]).product::<f64>();
            }
            st.len += 1;
        }
        st
    }

    /// Stencil of the particle starting at the center of `cell` and displaced
    /// by `dt * v(cell)`, clamped to the closed domain.
    pub fn deposit(grid: &CellGrid, v: &VectorField, cell: usize, dt: f64) -> Self {
        let idx = grid.multi_index(cell);
        let mut coords = [0.0; MAX_DIM];
        for k in 0..grid.ndim() {
            // past the walls the weights are constant, which is the same
            // deposit as clamping the particle onto the wall
            coords[k] = idx[k] as f64 + dt * v.components[k][cell] / grid.spacing[k];
        }
        Self::at_position(grid, &coords, dt)
    }

    /// Interpolation stencil for sampling at `point` (no derivative info).
    pub fn sample(grid: &CellGrid, point: &[f64]) -> Self {
        let mut coords = [0.0; MAX_DIM];
        for k in 0..grid.ndim() {
            coords[k] = point[k] / grid.spacing[k] - 0.5;
        }
        Self::at_position(grid, &coords, 0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |e| (self.cells[e], self.weights[e]))
    }
}

/// Zero-flux discretization of `div(sigma^2 grad)` on a cell-centered grid.
///
/// Symmetric, negative semidefinite, zero row and column sums.
pub fn assemble_diffusion_operator(grid: &CellGrid, sigma: f64) -> Result<SparseOperator> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let s = grid.cell_count();
    if sigma == 0.0 {
        return Ok(SparseOperator::zeros(s, s));
    }
    let d2 = sigma * sigma;
    let mut triplets = Vec::with_capacity(s * (2 * grid.ndim() + 1));
    for cell in 0..s {
        let idx = grid.multi_index(cell);
        let mut diag = 0.0;
        for k in 0..grid.ndim() {
            let c = d2 / (grid.spacing[k] * grid.spacing[k]);
            let stride = grid.stride(k);
            if idx[k] > 0 {
                triplets.push((cell, cell - stride, c));
                diag -= c;
            }
            if idx[k] + 1 < grid.dims[k] {
                triplets.push((cell, cell + stride, c));
                diag -= c;
            }
        }
        triplets.push((cell, cell, diag));
    }
    Ok(SparseOperator::from_triplets(s, s, triplets))
}

/// Particle-in-cell push-and-deposit matrix `S(v)`: column `j` holds the
/// multilinear weights of the particle leaving the center of cell `j`.
pub fn advection_interp_matrix(grid: &CellGrid, v: &VectorField, dt: f64) -> Result<SparseOperator> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    grid.check_same(&v.grid)?;
    let s = grid.cell_count();
    let mut triplets = Vec::with_capacity(s << grid.ndim());
    for j in 0..s {
        let st = Stencil::deposit(grid, v, j, dt);
        triplets.extend(st.iter().filter(|&(_, w)| w != 0.0).map(|(i, w)| (i, j, w)));
    }
    Ok(SparseOperator::from_triplets(s, s, triplets))
}

/// Multilinear interpolation of `v` at `point`, with constant extrapolation
/// between the outermost cell centers and the walls.
pub fn sample_vector_field(v: &VectorField, point: &[f64]) -> Result<Vec<f64>> {
    if !v.grid.contains(point) {
        return Err(Error::OutsideDomain {
            point: point.to_vec(),
        });
    }
    let st = Stencil::sample(&v.grid, point);
    Ok(v
        .components
        .iter()
        .map(|c| st.iter().map(|(cell, w)| w * c[cell]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(n: usize) -> CellGrid {
        CellGrid::new(&[n], &[1.0]).unwrap()
    }

    #[test]
    fn grid_cell_counts() {
        assert_eq!(build_grid(&[4], &[1.0]).unwrap().cell_count(), 4);
        assert_eq!(build_grid(&[3, 5], &[1.0, 0.5]).unwrap().cell_count(), 15);
        assert_eq!(
            build_grid(&[8, 8, 8], &[0.234, 0.234, 0.234]).unwrap().cell_count(),
            512
        );
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(build_grid(&[0, 3], &[1.0, 1.0]).is_err());
        assert!(build_grid(&[3], &[0.0]).is_err());
        assert!(build_grid(&[3], &[-1.0]).is_err());
        assert!(build_grid(&[], &[]).is_err());
        assert!(build_grid(&[2, 2, 2, 2], &[1.0; 4]).is_err());
        assert!(build_grid(&[2, 2], &[1.0]).is_err());
    }

    #[test]
    fn linearization_is_axis0_fastest() {
        let g = CellGrid::new(&[3, 4, 2], &[1.0; 3]).unwrap();
        assert_eq!(g.linear_index(&[1, 0, 0]), 1);
        assert_eq!(g.linear_index(&[0, 1, 0]), 3);
        assert_eq!(g.linear_index(&[0, 0, 1]), 12);
        for lin in 0..g.cell_count() {
            assert_eq!(g.linear_index(&g.multi_index(lin)), lin);
        }
        assert_eq!(g.center(g.linear_index(&[2, 1, 0])), vec![2.5, 1.5, 0.5]);
    }

    #[test]
    fn diffusion_zero_sigma_is_zero() {
        let a = assemble_diffusion_operator(&CellGrid::unit(&[4, 3]).unwrap(), 0.0).unwrap();
        assert_eq!(a.nnz(), 0);
    }

    #[test]
    fn diffusion_three_cell_stencil() {
        let a = assemble_diffusion_operator(&g1(3), 1.0).unwrap();
        let expected = [[-1.0, 1.0, 0.0], [1.0, -2.0, 1.0], [0.0, 1.0, -1.0]];
        let dense = a.to_dense();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(dense[r][c], expected[r][c], "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn diffusion_rejects_negative_sigma() {
        assert!(assemble_diffusion_operator(&g1(3), -0.1).is_err());
    }

    #[test]
    fn zero_velocity_deposit_is_identity() {
        let g = CellGrid::new(&[3, 4], &[0.5, 1.0]).unwrap();
        let s = advection_interp_matrix(&g, &VectorField::zeros(g), 0.3).unwrap();
        let dense = s.to_dense();
        for r in 0..g.cell_count() {
            for c in 0..g.cell_count() {
                assert_eq!(dense[r][c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn half_cell_shift_splits_mass() {
        let g = g1(4);
        let v = VectorField::uniform(g, &[0.5]).unwrap();
        let s = advection_interp_matrix(&g, &v, 1.0).unwrap();
        let out = s.apply(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(out, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn out_of_domain_particles_are_clamped() {
        let g = g1(4);
        let v = VectorField::uniform(g, &[10.0]).unwrap();
        let s = advection_interp_matrix(&g, &v, 1.0).unwrap();
        let out = s.apply(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 10.0]);
        let v = VectorField::uniform(g, &[-10.0]).unwrap();
        let s = advection_interp_matrix(&g, &v, 1.0).unwrap();
        assert_eq!(s.apply(&[1.0, 2.0, 3.0, 4.0]), vec![10.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn deposit_weight_derivative_is_plus_minus_inverse_spacing() {
        // particle from cell 1 displaced by 0.3 cells: receivers 1 and 2
        let h = 0.5;
        let g = CellGrid::new(&[4], &[h]).unwrap();
        let v = VectorField::uniform(g, &[0.15]).unwrap();
        let st = Stencil::deposit(&g, &v, 1, 1.0);
        assert_eq!(st.len, 2);
        assert_eq!(st.cells[..2], [1, 2]);
        assert!((st.weights[0] - 0.7).abs() < 1e-15);
        assert!((st.dweights[0][0] + 1.0 / h).abs() < 1e-15);
        assert!((st.dweights[1][0] - 1.0 / h).abs() < 1e-15);
    }

    #[test]
    fn sample_at_centers_and_midpoints() {
        let g = CellGrid::new(&[2], &[1.0]).unwrap();
        let v = VectorField::new(g, vec![vec![1.0, 3.0]]).unwrap();
        assert_eq!(sample_vector_field(&v, &[0.5]).unwrap(), vec![1.0]);
        assert_eq!(sample_vector_field(&v, &[1.5]).unwrap(), vec![3.0]);
        assert_eq!(sample_vector_field(&v, &[1.0]).unwrap(), vec![2.0]);
        // constant extrapolation near the walls
        assert_eq!(sample_vector_field(&v, &[0.1]).unwrap(), vec![1.0]);
        assert_eq!(sample_vector_field(&v, &[2.0]).unwrap(), vec![3.0]);
        assert!(sample_vector_field(&v, &[2.01]).is_err());
        assert!(sample_vector_field(&v, &[-0.01]).is_err());
    }

    #[test]
    fn sample_constant_field() {
        let g = CellGrid::new(&[5, 4, 3], &[0.3, 0.2, 0.7]).unwrap();
        let v = VectorField::uniform(g, &[1.5, -2.0, 0.25]).unwrap();
        for p in [[0.0, 0.0, 0.0], [0.71, 0.33, 1.2], [1.5, 0.8, 2.09]] {
            let got = sample_vector_field(&v, &p).unwrap();
            for (a, b) in got.iter().zip([1.5, -2.0, 0.25]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
