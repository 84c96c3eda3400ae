//! The discrete forward map: an initial density pushed through `m`
//! operator-split steps, each a particle-in-cell advection followed by one
//! backward-Euler diffusion solve,
//!
//! ```text
//! (I - dt A) rho_{n+1} = S(v_n) rho_n,   n = 0..m-1
//! ```
//!
//! [`ForwardModel`] also exposes the tangent and adjoint pieces the optimizer
//! needs: products with `S(v)`, `S(v)^T`, the velocity Jacobian of `S(v) rho`
//! and its transpose, and solves with `(I - dt A)` (symmetric, so it is its
//! own adjoint).

use crate::error::{Error, Result};
use crate::grid::{assemble_diffusion_operator, CellGrid, ScalarField, Stencil, VectorField};
use crate::linalg::{pcg, SparseOperator};

/// Default relative residual for the implicit diffusion solve.
pub const DIFFUSION_TOLERANCE: f64 = 1e-10;

/// Uniform time stepping of `[0, T]` in `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    /// `steps` intervals over the normalized horizon `T = 1`.
    pub fn unit(steps: usize) -> Result<Self> {
        Self::new(steps, 1.0)
    }

    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(TimeGrid {
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }
}

/// Densities at the `m + 1` time nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySeries {
    pub grid: CellGrid,
    pub time: TimeGrid,
    pub frames: Vec<ScalarField>,
}

impl DensitySeries {
    pub fn last(&self) -> &ScalarField {
        self.frames.last().expect("series has at least the initial frame")
    }
}

/// Velocities on the `m` time intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocitySeries {
    pub grid: CellGrid,
    pub time: TimeGrid,
    pub frames: Vec<VectorField>,
}

impl VelocitySeries {
    pub fn new(grid: CellGrid, time: TimeGrid, frames: Vec<VectorField>) -> Result<Self> {
        if frames.len() != time.steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} velocity frames for {} time steps",
                frames.len(),
                time.steps()
            )));
        }
        for f in &frames {
            grid.check_same(&f.grid)?;
        }
        Ok(VelocitySeries { grid, time, frames })
    }

    pub fn zeros(grid: CellGrid, time: TimeGrid) -> Self {
        VelocitySeries {
            grid,
            time,
            frames: vec![VectorField::zeros(grid); time.steps()],
        }
    }

    /// The same field on every interval.
    pub fn steady(field: VectorField, time: TimeGrid) -> Self {
        VelocitySeries {
            grid: field.grid,
            time,
            frames: vec![field; time.steps()],
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.frames.iter().map(|f| f.max_speed()).fold(0.0, f64::max)
    }

    /// Flat view: frame-major, then component, then cell.
    pub fn flatten(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.components.iter().flatten().copied())
            .collect()
    }

    pub fn from_flat(grid: CellGrid, time: TimeGrid, flat: &[f64]) -> Result<Self> {
        let s = grid.cell_count();
        let per_frame = s * grid.ndim();
        if flat.len() != per_frame * time.steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} velocity frames",
                flat.len(),
                time.steps()
            )));
        }
        let frames = flat
            .chunks(per_frame)
            .map(|f| VectorField {
                grid,
                components: f.chunks(s).map(|c| c.to_vec()).collect(),
            })
            .collect();
        Ok(VelocitySeries { grid, time, frames })
    }
}

/// Deposit stencils of every particle for one velocity frame.
pub fn deposit_stencils(v: &VectorField, dt: f64) -> Vec<Stencil> {
    (0..v.grid.cell_count())
        .map(|j| Stencil::deposit(&v.grid, v, j, dt))
        .collect()
}

fn deposit(stencils: &[Stencil], rho: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rho.len()];
    for (st, &mass) in stencils.iter().zip(rho) {
        if mass == 0.0 {
            continue;
        }
        for (cell, w) in st.iter() {
            out[cell] += w * mass;
        }
    }
    out
}

fn gather(stencils: &[Stencil], mu: &[f64]) -> Vec<f64> {
    stencils
        .iter()
        .map(|st| st.iter().map(|(cell, w)| w * mu[cell]).sum())
        .collect()
}

fn jacobian_apply(stencils: &[Stencil], rho: &[f64], dv: &VectorField) -> Vec<f64> {
    let d = dv.grid.ndim();
    let mut out = vec![0.0; rho.len()];
    for (j, st) in stencils.iter().enumerate() {
        if rho[j] == 0.0 {
            continue;
        }
        for e in 0..st.len {
            let rate: f64 = (0..d).map(|k| st.dweights[e][k] * dv.components[k][j]).sum();
            out[st.cells[e]] += rho[j] * rate;
        }
    }
    out
}

fn jacobian_transpose(stencils: &[Stencil], rho: &[f64], mu: &[f64], grid: CellGrid) -> VectorField {
    let d = grid.ndim();
    let mut out = VectorField::zeros(grid);
    for (j, st) in stencils.iter().enumerate() {
        if rho[j] == 0.0 {
            continue;
        }
        for k in 0..d {
            let g: f64 = (0..st.len).map(|e| st.dweights[e][k] * mu[st.cells[e]]).sum();
            out.components[k][j] = rho[j] * g;
        }
    }
    out
}

/// One PIC advection step: `S(v) rho`.
pub fn advect_step(rho: &ScalarField, v: &VectorField, dt: f64) -> Result<ScalarField> {
    rho.grid.check_same(&v.grid)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let stencils = deposit_stencils(v, dt);
    Ok(ScalarField {
        grid: rho.grid,
        values: deposit(&stencils, &rho.values),
    })
}

/// Directional derivative of `S(v) rho` with respect to `v` along `dv`, with
/// each particle's receiving cells held fixed.
pub fn advect_velocity_jacobian_apply(rho: &ScalarField, v: &VectorField, dv: &VectorField, dt: f64) -> Result<ScalarField> {
    rho.grid.check_same(&v.grid)?;
    rho.grid.check_same(&dv.grid)?;
    let stencils = deposit_stencils(v, dt);
    Ok(ScalarField {
        grid: rho.grid,
        values: jacobian_apply(&stencils, &rho.values, dv),
    })
}

/// Transpose of [`advect_velocity_jacobian_apply`]: maps a cell-space
/// covector to a velocity-space covector.
pub fn advect_velocity_jacobian_transpose(rho: &ScalarField, v: &VectorField, mu: &ScalarField, dt: f64) -> Result<VectorField> {
    rho.grid.check_same(&v.grid)?;
    rho.grid.check_same(&mu.grid)?;
    let stencils = deposit_stencils(v, dt);
    Ok(jacobian_transpose(&stencils, &rho.values, &mu.values, rho.grid))
}

/// Backward-Euler diffusion: solves `(I - dt A) rho = rho_star`, then clamps
/// round-off negatives to zero.
pub fn diffuse_step(rho_star: &ScalarField, a: &SparseOperator, dt: f64) -> Result<ScalarField> {
    let implicit = ImplicitDiffusion::new(a, dt, DIFFUSION_TOLERANCE);
    let mut values = implicit.solve(&rho_star.values)?;
    clamp_nonnegative(&mut values);
    Ok(ScalarField {
        grid: rho_star.grid,
        values,
    })
}

fn clamp_nonnegative(values: &mut [f64]) {
    for x in values.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// `(I - dt A)` with its Jacobi preconditioner; `None` matrix when `A = 0`.
#[derive(Clone, Debug)]
struct ImplicitDiffusion {
    matrix: Option<SparseOperator>,
    inv_diag: Vec<f64>,
    tol: f64,
}

impl ImplicitDiffusion {
    fn new(a: &SparseOperator, dt: f64, tol: f64) -> Self {
        if a.nnz() == 0 || a.triplets().all(|(_, _, v)| v == 0.0) {
            return ImplicitDiffusion {
                matrix: None,
                inv_diag: Vec::new(),
                tol,
            };
        }
        let m = a.shifted(1.0, -dt);
        let inv_diag = m.diagonal().iter().map(|d| 1.0 / d).collect();
        ImplicitDiffusion {
            matrix: Some(m),
            inv_diag,
            tol,
        }
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let Some(m) = &self.matrix else {
            return Ok(rhs.to_vec());
        };
        let mut x = rhs.to_vec();
        let out = pcg(
            |p, y| m.apply_into(p, y),
            |r, z| {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
                    *zi = ri * di;
                }
            },
            rhs,
            &mut x,
            self.tol,
            10 * rhs.len(),
        );
        if !out.converged {
            return Err(Error::CgNotConverged {
                iterations: out.iterations,
                residual: out.relative_residual,
            });
        }
        Ok(x)
    }
}

/// Forward model for fixed grid, time grid and diffusivity.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    grid: CellGrid,
    time: TimeGrid,
    sigma: f64,
    diffusion: ImplicitDiffusion,
}

/// Everything the optimizer needs from one forward pass: the density
/// trajectory and the deposit stencils of every step.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub densities: DensitySeries,
    pub stencils: Vec<Vec<Stencil>>,
}

impl ForwardModel {
    pub fn new(grid: CellGrid, time: TimeGrid, sigma: f64) -> Result<Self> {
        Self::with_tolerance(grid, time, sigma, DIFFUSION_TOLERANCE)
    }

    pub fn with_tolerance(grid: CellGrid, time: TimeGrid, sigma: f64, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be > 0, got {tol}")));
        }
        let a = assemble_diffusion_operator(&grid, sigma)?;
        Ok(ForwardModel {
            grid,
            time,
            sigma,
            diffusion: ImplicitDiffusion::new(&a, time.dt(), tol),
        })
    }

    pub fn grid(&self) -> CellGrid {
        self.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn check_velocity(&self, v: &VelocitySeries) -> Result<()> {
        self.grid.check_same(&v.grid)?;
        if v.frames.len() != self.time.steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} velocity frames for {} steps",
                v.frames.len(),
                self.time.steps()
            )));
        }
        Ok(())
    }

    /// `(I - dt A)^{-1} rhs`, without clamping.
    pub fn solve_diffusion(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.diffusion.solve(rhs)
    }

    pub fn trajectory(&self, v: &VelocitySeries, rho0: &ScalarField) -> Result<Trajectory> {
        self.check_velocity(v)?;
        self.grid.check_same(&rho0.grid)?;
        rho0.check_density()?;
        let dt = self.time.dt();
        let mut frames = Vec::with_capacity(self.time.steps() + 1);
        let mut stencils = Vec::with_capacity(self.time.steps());
        frames.push(rho0.clone());
        for vn in &v.frames {
            let st = deposit_stencils(vn, dt);
            let star = deposit(&st, &frames.last().unwrap().values);
            let mut next = self.diffusion.solve(&star)?;
            clamp_nonnegative(&mut next);
            frames.push(ScalarField {
                grid: self.grid,
                values: next,
            });
            stencils.push(st);
        }
        Ok(Trajectory {
            densities: DensitySeries {
                grid: self.grid,
                time: self.time,
                frames,
            },
            stencils,
        })
    }

    pub fn run(&self, v: &VelocitySeries, rho0: &ScalarField) -> Result<DensitySeries> {
        Ok(self.trajectory(v, rho0)?.densities)
    }

    /// Tangent sweep: the change in every frame caused by perturbing the
    /// velocity series by `dv`. Entry 0 (the fixed initial frame) is zero.
    pub fn tangent(&self, traj: &Trajectory, dv: &VelocitySeries) -> Result<Vec<Vec<f64>>> {
        let s = self.grid.cell_count();
        let mut out = Vec::with_capacity(self.time.steps() + 1);
        out.push(vec![0.0; s]);
        for (n, st) in traj.stencils.iter().enumerate() {
            let mut star = deposit(st, &out[n]);
            let lin = jacobian_apply(st, &traj.densities.frames[n].values, &dv.frames[n]);
            for (a, b) in star.iter_mut().zip(&lin) {
                *a += b;
            }
            out.push(self.diffusion.solve(&star)?);
        }
        Ok(out)
    }

    /// Adjoint sweep. `frame_sources[n]` is the derivative of a scalar
    /// functional with respect to frame `n` taken directly (not through later
    /// frames); returns the derivative with respect to every velocity frame,
    /// plus the accumulated derivative with respect to the initial frame.
    pub fn adjoint(&self, traj: &Trajectory, frame_sources: &[Vec<f64>]) -> Result<(VelocitySeries, Vec<f64>)> {
        let m = self.time.steps();
        let mut lambda = frame_sources[m].clone();
        let mut grads = vec![VectorField::zeros(self.grid); m];
        for n in (0..m).rev() {
            let mu = self.diffusion.solve(&lambda)?;
            let st = &traj.stencils[n];
            grads[n] = jacobian_transpose(st, &traj.densities.frames[n].values, &mu, self.grid);
            lambda = gather(st, &mu);
            for (l, src) in lambda.iter_mut().zip(&frame_sources[n]) {
                *l += src;
            }
        }
        Ok((
            VelocitySeries {
                grid: self.grid,
                time: self.time,
                frames: grads,
            },
            lambda,
        ))
    }
}

/// Run the forward map `F(v)` from `rho0` with diffusivity `sigma`.
pub fn forward(v: &VelocitySeries, rho0: &ScalarField, sigma: f64) -> Result<DensitySeries> {
    ForwardModel::new(v.grid, v.time, sigma)?.run(v, rho0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> CellGrid {
        CellGrid::new(&[n], &[1.0]).unwrap()
    }

    #[test]
    fn zero_velocity_advection_is_identity() {
        let g = CellGrid::new(&[3, 3], &[1.0, 1.0]).unwrap();
        let rho = ScalarField::new(g, (0..9).map(|i| i as f64).collect()).unwrap();
        let out = advect_step(&rho, &VectorField::zeros(g), 0.5).unwrap();
        assert_eq!(out, rho);
    }

    #[test]
    fn half_cell_advection() {
        let g = line(4);
        let rho = ScalarField::new(g, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let v = VectorField::uniform(g, &[0.5]).unwrap();
        let out = advect_step(&rho, &v, 1.0).unwrap();
        assert_eq!(out.values, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn three_cell_diffusion_solve() {
        // (I - A) rho = [0,1,0] with A = [-1 1 0; 1 -2 1; 0 1 -1]:
        // 2a - b = 0 and -2a + 3b = 1 by symmetry, so rho = [0.25, 0.5, 0.25]
        let g = line(3);
        let a = assemble_diffusion_operator(&g, 1.0).unwrap();
        let star = ScalarField::new(g, vec![0.0, 1.0, 0.0]).unwrap();
        let out = diffuse_step(&star, &a, 1.0).unwrap();
        for (x, e) in out.values.iter().zip([0.25, 0.5, 0.25]) {
            assert!((x - e).abs() < 1e-10, "{:?}", out.values);
        }
    }

    #[test]
    fn zero_sigma_diffusion_is_identity() {
        let g = line(5);
        let a = assemble_diffusion_operator(&g, 0.0).unwrap();
        let star = ScalarField::new(g, vec![0.1, 0.2, 3.0, 0.0, 1.0]).unwrap();
        assert_eq!(diffuse_step(&star, &a, 0.25).unwrap(), star);
    }

    #[test]
    fn static_forward_keeps_every_frame() {
        let g = CellGrid::unit(&[4, 4]).unwrap();
        let t = TimeGrid::unit(3).unwrap();
        let rho = ScalarField::new(g, (0..16).map(|i| (i % 5) as f64).collect()).unwrap();
        let out = forward(&VelocitySeries::zeros(g, t), &rho, 0.0).unwrap();
        assert_eq!(out.frames.len(), 4);
        assert!(out.frames.iter().all(|f| *f == rho));
    }

    #[test]
    fn forward_rejects_negative_density() {
        let g = line(3);
        let t = TimeGrid::unit(1).unwrap();
        let rho = ScalarField::new(g, vec![0.0, -1.0, 0.0]).unwrap();
        assert!(forward(&VelocitySeries::zeros(g, t), &rho, 0.0).is_err());
    }

    #[test]
    fn jacobian_of_single_particle() {
        // particle from cell 1, displaced 0.25 cells: weights (0.75, 0.25)
        // on cells (1, 2); derivative w.r.t. displacement is (-1/h, +1/h)
        let g = line(4);
        let rho = ScalarField::new(g, vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let v = VectorField::uniform(g, &[0.25]).unwrap();
        let dv = VectorField::uniform(g, &[1.0]).unwrap();
        let out = advect_velocity_jacobian_apply(&rho, &v, &dv, 1.0).unwrap();
        assert_eq!(out.values, vec![0.0, -2.0, 2.0, 0.0]);
        let zero = advect_velocity_jacobian_apply(&rho, &v, &VectorField::zeros(g), 1.0).unwrap();
        assert!(zero.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn time_grid_horizon() {
        let t = TimeGrid::unit(7).unwrap();
        assert!((t.horizon() - 1.0).abs() < 1e-12);
        assert!(TimeGrid::unit(0).is_err());
    }
}
