//! Regularized transport objective and its Gauss-Newton minimizer.
//!
//! For a velocity series `v` the objective is
//!
//! ```text
//! phi(v) = 1/2 h^d dt sum_{n<m} sum_c rho_n[c] |v_n[c]|^2
//!        + alpha sum_{observed n>0} sum_c w_n[c] (rho_n[c] - obs_n[c])^2
//! ```
//!
//! where `rho = F(v)` is the forward-model trajectory started from the
//! initial observation. The kinetic term weights each interval by the
//! density at its starting node.
//!
//! Gradients come from one adjoint sweep. The Gauss-Newton model keeps the
//! misfit curvature `2 alpha J^T W J` and the diagonal curvature of the
//! kinetic term in `v`; the coupling of the kinetic term through `rho(v)` is
//! dropped. Steps are globalized by Armijo backtracking, so the recorded
//! objective never increases.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{DensitySeries, ForwardModel, TimeGrid, Trajectory, VelocitySeries};
use crate::grid::{CellGrid, ScalarField};
use crate::linalg::{dot, norm, pcg};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_TIME_STEPS: usize = 4;
/// Fidelity weight used by the fixed-endpoint baseline as a stand-in for a
/// hard endpoint constraint.
pub const DEFAULT_BASELINE_ALPHA: f64 = 1e6 * DEFAULT_ALPHA;

/// One observed density: the time node it belongs to and per-cell weights
/// realizing a diagonal `Sigma`-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub time_index: usize,
    pub observed: ScalarField,
    pub weight: Vec<f64>,
}

impl Observation {
    /// Observation with unit weights.
    pub fn new(time_index: usize, observed: ScalarField) -> Self {
        let s = observed.grid.cell_count();
        Observation {
            time_index,
            observed,
            weight: vec![1.0; s],
        }
    }

    pub fn with_weight(time_index: usize, observed: ScalarField, weight: Vec<f64>) -> Result<Self> {
        if weight.len() != observed.grid.cell_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} cells",
                weight.len(),
                observed.grid.cell_count()
            )));
        }
        Ok(Observation {
            time_index,
            observed,
            weight,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(entries: Vec<Observation>) -> Self {
        ObservationSet { entries }
    }

    /// Initial and final observations over `steps` intervals.
    pub fn endpoints(initial: ScalarField, last: ScalarField, steps: usize) -> Self {
        ObservationSet {
            entries: vec![Observation::new(0, initial), Observation::new(steps, last)],
        }
    }

    pub fn initial(&self) -> Option<&ScalarField> {
        self.entries
            .iter()
            .find(|o| o.time_index == 0)
            .map(|o| &o.observed)
    }

    /// Last observation in time.
    pub fn last(&self) -> Option<&Observation> {
        self.entries.iter().max_by_key(|o| o.time_index)
    }

    pub fn validate(&self, grid: &CellGrid, steps: usize) -> Result<()> {
        if !self.entries.iter().any(|o| o.time_index == 0) {
            return Err(Error::InvalidArgument("observation at time index 0 is required".into()));
        }
        if !self.entries.iter().any(|o| o.time_index > 0) {
            return Err(Error::InvalidArgument(
                "at least one observation after time index 0 is required".into(),
            ));
        }
        let mut seen = vec![false; steps + 1];
        for o in &self.entries {
            if o.time_index > steps {
                return Err(Error::InvalidArgument(format!(
                    "observation time index {} exceeds {steps} steps",
                    o.time_index
                )));
            }
            if std::mem::replace(&mut seen[o.time_index], true) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate observation at time index {}",
                    o.time_index
                )));
            }
            grid.check_same(&o.observed.grid)?;
            if o.weight.len() != grid.cell_count() {
                return Err(Error::ShapeMismatch(format!(
                    "{} weights for {} cells",
                    o.weight.len(),
                    grid.cell_count()
                )));
            }
            if let Some(w) = o.weight.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
                return Err(Error::InvalidArgument(format!("observation weight {w} is not positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub sigma: f64,
    pub alpha: f64,
    pub time_steps: usize,
    pub max_gn_iters: usize,
    /// Relative residual for the inner CG solve of the Gauss-Newton system.
    pub gn_cg_tolerance: f64,
    pub gn_cg_max_iters: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Stop once `|grad| <= stop_tolerance * |grad_0|`.
    pub stop_tolerance: f64,
    pub diffusion_tolerance: f64,
    pub baseline_alpha: f64,
    pub baseline_mode: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            sigma: 0.0,
            alpha: DEFAULT_ALPHA,
            time_steps: DEFAULT_TIME_STEPS,
            max_gn_iters: 50,
            gn_cg_tolerance: 1e-3,
            gn_cg_max_iters: 100,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            stop_tolerance: 1e-6,
            diffusion_tolerance: crate::forward::DIFFUSION_TOLERANCE,
            baseline_alpha: DEFAULT_BASELINE_ALPHA,
            baseline_mode: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, value: f64| {
            Err(Error::InvalidArgument(format!("{what} = {value} is out of range")))
        };
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", self.sigma);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha);
        }
        if !(self.baseline_alpha > 0.0 && self.baseline_alpha.is_finite()) {
            return bad("baseline_alpha", self.baseline_alpha);
        }
        if self.time_steps == 0 {
            return bad("time_steps", 0.0);
        }
        for (what, tol) in [
            ("gn_cg_tolerance", self.gn_cg_tolerance),
            ("stop_tolerance", self.stop_tolerance),
            ("diffusion_tolerance", self.diffusion_tolerance),
        ] {
            if !(tol > 0.0) {
                return bad(what, tol);
            }
        }
        if !(self.armijo > 0.0 && self.armijo <= 0.5) {
            return bad("armijo", self.armijo);
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack", self.backtrack);
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::unit(self.time_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub phi: f64,
    pub energy: f64,
    pub misfit: f64,
    pub grad_norm: f64,
    pub step_length: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Row 0 is the initial iterate (step length 0).
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    /// Set when Armijo backtracking gave up; the best iterate is returned.
    pub line_search_failed: bool,
}

impl Diagnostics {
    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[1].phi <= w[0].phi)
    }

    /// Gauss-Newton iterations taken (excludes the initial row).
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub velocity: VelocitySeries,
    pub densities: DensitySeries,
    pub diagnostics: Diagnostics,
    /// Factor mapping the returned densities back to input mass units
    /// (the initial mass for the normalized baseline, 1 otherwise).
    pub mass_scale: f64,
}

impl SolveResult {
    /// Final clean density in the units of the input observations.
    pub fn final_density(&self) -> ScalarField {
        let last = self.densities.last();
        ScalarField {
            grid: last.grid,
            values: last.values.iter().map(|x| x * self.mass_scale).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub total: f64,
    pub energy: f64,
    pub misfit: f64,
    pub densities: DensitySeries,
}

/// Objective, gradient and Gauss-Newton products for one problem instance.
pub struct Problem<'a> {
    model: ForwardModel,
    rho0: &'a ScalarField,
    obs: &'a ObservationSet,
    alpha: f64,
}

/// Objective value together with the forward trajectory it was computed on.
pub struct Evaluation {
    pub total: f64,
    pub energy: f64,
    pub misfit: f64,
    pub trajectory: Trajectory,
}

impl<'a> Problem<'a> {
    pub fn new(rho0: &'a ScalarField, obs: &'a ObservationSet, config: &SolverConfig) -> Result<Self> {
        config.validate()?;
        let time = config.time_grid()?;
        obs.validate(&rho0.grid, time.steps())?;
        rho0.check_density()?;
        let model = ForwardModel::with_tolerance(rho0.grid, time, config.sigma, config.diffusion_tolerance)?;
        Ok(Problem {
            model,
            rho0,
            obs,
            alpha: config.alpha,
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    fn kinetic_scale(&self) -> f64 {
        self.model.grid().cell_volume() * self.model.time().dt()
    }

    pub fn evaluate(&self, v: &VelocitySeries) -> Result<Evaluation> {
        let trajectory = self.model.trajectory(v, self.rho0)?;
        let frames = &trajectory.densities.frames;
        let mut energy = 0.0;
        for (rho, vn) in frames.iter().zip(&v.frames) {
            for (c, &r) in rho.values.iter().enumerate() {
                energy += r * vn.components.iter().map(|comp| comp[c] * comp[c]).sum::<f64>();
            }
        }
        energy *= 0.5 * self.kinetic_scale();
        let mut misfit = 0.0;
        for o in self.obs.entries.iter().filter(|o| o.time_index > 0) {
            let rho = &frames[o.time_index].values;
            misfit += rho
                .iter()
                .zip(&o.observed.values)
                .zip(&o.weight)
                .map(|((r, b), w)| w * (r - b) * (r - b))
                .sum::<f64>();
        }
        misfit *= self.alpha;
        Ok(Evaluation {
            total: energy + misfit,
            energy,
            misfit,
            trajectory,
        })
    }

    /// Misfit derivative with respect to each frame, taken directly.
    fn misfit_sources(&self, frames: &[ScalarField]) -> Vec<Vec<f64>> {
        let s = self.model.grid().cell_count();
        let mut sources = vec![vec![0.0; s]; frames.len()];
        for o in self.obs.entries.iter().filter(|o| o.time_index > 0) {
            let rho = &frames[o.time_index].values;
            for (c, src) in sources[o.time_index].iter_mut().enumerate() {
                *src += 2.0 * self.alpha * o.weight[c] * (rho[c] - o.observed.values[c]);
            }
        }
        sources
    }

    /// Adjoint gradient at the point `eval` was computed for.
    pub fn gradient(&self, v: &VelocitySeries, eval: &Evaluation) -> Result<VelocitySeries> {
        let frames = &eval.trajectory.densities.frames;
        let scale = self.kinetic_scale();
        let mut sources = self.misfit_sources(frames);
        for (n, vn) in v.frames.iter().enumerate() {
            for (c, src) in sources[n].iter_mut().enumerate() {
                *src += 0.5 * scale * vn.components.iter().map(|comp| comp[c] * comp[c]).sum::<f64>();
            }
        }
        let (mut grad, _) = self.model.adjoint(&eval.trajectory, &sources)?;
        for (n, (g, vn)) in grad.frames.iter_mut().zip(&v.frames).enumerate() {
            let rho = &frames[n].values;
            for (gk, vk) in g.components.iter_mut().zip(&vn.components) {
                for c in 0..rho.len() {
                    gk[c] += scale * rho[c] * vk[c];
                }
            }
        }
        Ok(grad)
    }

    /// Gauss-Newton Hessian applied to a flattened direction.
    fn gn_apply(&self, eval: &Evaluation, dv: &VelocitySeries) -> Result<VelocitySeries> {
        let traj = &eval.trajectory;
        let drho = self.model.tangent(traj, dv)?;
        let s = self.model.grid().cell_count();
        let mut sources = vec![vec![0.0; s]; drho.len()];
        for o in self.obs.entries.iter().filter(|o| o.time_index > 0) {
            for c in 0..s {
                sources[o.time_index][c] += 2.0 * self.alpha * o.weight[c] * drho[o.time_index][c];
            }
        }
        let (mut out, _) = self.model.adjoint(traj, &sources)?;
        let scale = self.kinetic_scale();
        for (n, (o, d)) in out.frames.iter_mut().zip(&dv.frames).enumerate() {
            let rho = &traj.densities.frames[n].values;
            for (ok, dk) in o.components.iter_mut().zip(&d.components) {
                for c in 0..s {
                    ok[c] += scale * rho[c] * dk[c];
                }
            }
        }
        Ok(out)
    }
}

/// Evaluate the objective and the clean trajectory for a velocity series.
pub fn objective(v: &VelocitySeries, rho0: &ScalarField, obs: &ObservationSet, config: &SolverConfig) -> Result<ObjectiveValue> {
    let problem = Problem::new(rho0, obs, config)?;
    check_series(&problem, v)?;
    let e = problem.evaluate(v)?;
    Ok(ObjectiveValue {
        total: e.total,
        energy: e.energy,
        misfit: e.misfit,
        densities: e.trajectory.densities,
    })
}

/// Adjoint gradient of [`objective`] with respect to the velocity series.
pub fn gradient(v: &VelocitySeries, rho0: &ScalarField, obs: &ObservationSet, config: &SolverConfig) -> Result<VelocitySeries> {
    let problem = Problem::new(rho0, obs, config)?;
    check_series(&problem, v)?;
    let e = problem.evaluate(v)?;
    problem.gradient(v, &e)
}

fn check_series(problem: &Problem, v: &VelocitySeries) -> Result<()> {
    problem.model().grid().check_same(&v.grid)?;
    if v.frames.len() != problem.model().time().steps() {
        return Err(Error::ShapeMismatch(format!(
            "{} velocity frames, config has {} steps",
            v.frames.len(),
            problem.model().time().steps()
        )));
    }
    Ok(())
}

/// Gauss-Newton minimization from `v = 0`.
pub fn solve(rho0: &ScalarField, obs: &ObservationSet, config: &SolverConfig) -> Result<SolveResult> {
    let problem = Problem::new(rho0, obs, config)?;
    let grid = rho0.grid;
    let time = config.time_grid()?;

    let mut v = VelocitySeries::zeros(grid, time);
    let mut eval = problem.evaluate(&v)?;
    let mut grad = problem.gradient(&v, &eval)?.flatten();
    let g0 = norm(&grad);
    let mut diag = Diagnostics {
        records: vec![IterationRecord {
            iter: 0,
            phi: eval.total,
            energy: eval.energy,
            misfit: eval.misfit,
            grad_norm: g0,
            step_length: 0.0,
        }],
        converged: false,
        line_search_failed: false,
    };

    for iter in 1..=config.max_gn_iters {
        let gnorm = norm(&grad);
        if gnorm <= config.stop_tolerance * g0 || gnorm == 0.0 {
            diag.converged = true;
            break;
        }

        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut step = vec![0.0; rhs.len()];
        let inner = pcg(
            |x, y| {
                let dv = VelocitySeries::from_flat(grid, time, x).expect("flat length is fixed");
                // the forward model already converged at this iterate; the
                // same linear solves cannot fail here
                let hv = problem.gn_apply(&eval, &dv).expect("Gauss-Newton product");
                y.copy_from_slice(&hv.flatten());
            },
            |r, z| z.copy_from_slice(r),
            &rhs,
            &mut step,
            config.gn_cg_tolerance,
            config.gn_cg_max_iters,
        );
        let mut slope = dot(&grad, &step);
        if !(slope < 0.0) {
            step = rhs;
            slope = -gnorm * gnorm;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let mut flat = v.flatten();
            for (x, p) in flat.iter_mut().zip(&step) {
                *x += t * p;
            }
            let trial = VelocitySeries::from_flat(grid, time, &flat)?;
            let e = problem.evaluate(&trial)?;
            if e.total <= eval.total + config.armijo * t * slope {
                accepted = Some((trial, e));
                break;
            }
            t *= config.backtrack;
        }
        let Some((trial, e)) = accepted else {
            warn!("line search failed at iteration {iter}; keeping best iterate");
            diag.line_search_failed = true;
            break;
        };
        v = trial;
        eval = e;
        grad = problem.gradient(&v, &eval)?.flatten();
        let gn = norm(&grad);
        debug!(
            "gn iter {iter}: phi {:.6e} energy {:.6e} misfit {:.6e} |g| {:.3e} t {t} cg {} it",
            eval.total, eval.energy, eval.misfit, gn, inner.iterations
        );
        diag.records.push(IterationRecord {
            iter,
            phi: eval.total,
            energy: eval.energy,
            misfit: eval.misfit,
            grad_norm: gn,
            step_length: t,
        });
    }
    if !diag.converged && !diag.line_search_failed {
        let gn = norm(&grad);
        diag.converged = gn <= config.stop_tolerance * g0 || gn == 0.0;
    }

    Ok(SolveResult {
        velocity: v,
        densities: eval.trajectory.densities,
        diagnostics: diag,
        mass_scale: 1.0,
    })
}

fn normalized(field: &ScalarField) -> Result<(ScalarField, f64)> {
    field.check_density()?;
    let total = field.total();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("cannot normalize a density with zero mass".into()));
    }
    Ok((
        ScalarField {
            grid: field.grid,
            values: field.values.iter().map(|x| x / total).collect(),
        },
        total,
    ))
}

/// Both endpoints normalized to unit mass, as the baseline requires.
pub fn baseline_inputs(rho0: &ScalarField, rho_t_obs: &ScalarField) -> Result<(ScalarField, ScalarField, f64)> {
    let (a, mass) = normalized(rho0)?;
    let (b, _) = normalized(rho_t_obs)?;
    Ok((a, b, mass))
}

/// Fixed-endpoint, mass-normalized, diffusion-free baseline: the endpoint is
/// enforced by the large penalty `config.baseline_alpha`. Returned densities
/// are in normalized units; [`SolveResult::final_density`] rescales them by
/// the initial mass.
pub fn solve_baseline(rho0: &ScalarField, rho_t_obs: &ScalarField, config: &SolverConfig) -> Result<SolveResult> {
    let (a, b, mass) = baseline_inputs(rho0, rho_t_obs)?;
    let cfg = SolverConfig {
        sigma: 0.0,
        alpha: config.baseline_alpha,
        baseline_mode: true,
        ..config.clone()
    };
    let obs = ObservationSet::endpoints(a.clone(), b, cfg.time_steps);
    let mut result = solve(&a, &obs, &cfg)?;
    result.mass_scale = mass;
    Ok(result)
}

/// Dispatch on `config.baseline_mode`.
pub fn solve_with_mode(rho0: &ScalarField, obs: &ObservationSet, config: &SolverConfig) -> Result<SolveResult> {
    if config.baseline_mode {
        let last = obs
            .last()
            .ok_or_else(|| Error::InvalidArgument("no final observation".into()))?;
        solve_baseline(rho0, &last.observed, config)
    } else {
        solve(rho0, obs, config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationErrors {
    pub mse: f64,
    pub inf_norm: f64,
}

/// Mean squared error and max-norm of `result - target`.
pub fn registration_errors(result: &ScalarField, target: &ScalarField) -> Result<RegistrationErrors> {
    result.check_same_grid(target)?;
    let s = result.values.len() as f64;
    let mut sq = 0.0;
    let mut inf: f64 = 0.0;
    for (a, b) in result.values.iter().zip(&target.values) {
        let d = a - b;
        sq += d * d;
        inf = inf.max(d.abs());
    }
    Ok(RegistrationErrors {
        mse: sq / s,
        inf_norm: inf,
    })
}

/// Root mean square difference at each time node `1..=m`.
pub fn rmse_between_series(a: &DensitySeries, b: &DensitySeries) -> Result<Vec<f64>> {
    a.grid.check_same(&b.grid)?;
    if a.frames.len() != b.frames.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} frames",
            a.frames.len(),
            b.frames.len()
        )));
    }
    a.frames
        .iter()
        .zip(&b.frames)
        .skip(1)
        .map(|(x, y)| registration_errors(x, y).map(|e| e.mse.sqrt()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VectorField;

    fn tiny() -> (ScalarField, SolverConfig) {
        let g = CellGrid::new(&[4], &[1.0]).unwrap();
        let rho0 = ScalarField::new(g, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let cfg = SolverConfig {
            time_steps: 1,
            ..Default::default()
        };
        (rho0, cfg)
    }

    #[test]
    fn static_perfect_fit_has_zero_objective() {
        let (rho0, cfg) = tiny();
        let obs = ObservationSet::endpoints(rho0.clone(), rho0.clone(), 1);
        let v = VelocitySeries::zeros(rho0.grid, cfg.time_grid().unwrap());
        let o = objective(&v, &rho0, &obs, &cfg).unwrap();
        assert_eq!((o.total, o.energy, o.misfit), (0.0, 0.0, 0.0));
        let g = gradient(&v, &rho0, &obs, &cfg).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_offset_misfit() {
        let (rho0, cfg) = tiny();
        let c = 0.3;
        let target = ScalarField::new(rho0.grid, rho0.values.iter().map(|x| x + c).collect()).unwrap();
        let obs = ObservationSet::endpoints(rho0.clone(), target, 1);
        let cfg = SolverConfig { alpha: 2.5, ..cfg };
        let v = VelocitySeries::zeros(rho0.grid, cfg.time_grid().unwrap());
        let o = objective(&v, &rho0, &obs, &cfg).unwrap();
        assert_eq!(o.energy, 0.0);
        assert!((o.misfit - 2.5 * 4.0 * c * c).abs() < 1e-14);
    }

    #[test]
    fn kinetic_energy_of_half_cell_shift() {
        // 1/2 * h^d * dt * rho * |v|^2 = 1/2 * 1 * 1 * (1 * 0.25)
        let (rho0, cfg) = tiny();
        let obs = ObservationSet::endpoints(rho0.clone(), rho0.clone(), 1);
        let v = VelocitySeries::steady(
            VectorField::uniform(rho0.grid, &[0.5]).unwrap(),
            cfg.time_grid().unwrap(),
        );
        let o = objective(&v, &rho0, &obs, &cfg).unwrap();
        assert_eq!(o.energy, 0.125);
        assert_eq!(o.densities.frames[1].values, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn misfit_gradient_scales_with_alpha() {
        let g = CellGrid::new(&[5], &[1.0]).unwrap();
        let rho0 = ScalarField::new(g, vec![0.1, 0.5, 1.0, 0.4, 0.2]).unwrap();
        let target = ScalarField::new(g, vec![0.2, 0.3, 0.8, 0.7, 0.2]).unwrap();
        let obs = ObservationSet::endpoints(rho0.clone(), target, 2);
        let base = SolverConfig {
            time_steps: 2,
            ..Default::default()
        };
        let v = VelocitySeries::steady(VectorField::uniform(g, &[0.3]).unwrap(), base.time_grid().unwrap());
        // kinetic-only gradient: drive alpha to a negligible value and subtract
        let grad = |alpha: f64| {
            gradient(&v, &rho0, &obs, &SolverConfig { alpha, ..base.clone() })
                .unwrap()
                .flatten()
        };
        let g1 = grad(1.0);
        let g10 = grad(10.0);
        let g0 = grad(1e-300);
        for ((a, b), k) in g1.iter().zip(&g10).zip(&g0) {
            let m1 = a - k;
            let m10 = b - k;
            assert!((m10 - 10.0 * m1).abs() <= 1e-12 * (1.0 + m10.abs()), "{m1} {m10}");
        }
    }

    #[test]
    fn observations_are_validated() {
        let (rho0, _) = tiny();
        let only_final = ObservationSet::new(vec![Observation::new(1, rho0.clone())]);
        assert!(only_final.validate(&rho0.grid, 1).is_err());
        let only_initial = ObservationSet::new(vec![Observation::new(0, rho0.clone())]);
        assert!(only_initial.validate(&rho0.grid, 1).is_err());
        let late = ObservationSet::endpoints(rho0.clone(), rho0.clone(), 5);
        assert!(late.validate(&rho0.grid, 4).is_err());
        let bad_weight = ObservationSet::new(vec![
            Observation::new(0, rho0.clone()),
            Observation::with_weight(1, rho0.clone(), vec![1.0, 0.0, 1.0, 1.0]).unwrap(),
        ]);
        assert!(bad_weight.validate(&rho0.grid, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for cfg in [
            SolverConfig { alpha: 0.0, ..Default::default() },
            SolverConfig { sigma: -1.0, ..Default::default() },
            SolverConfig { armijo: 0.6, ..Default::default() },
            SolverConfig { stop_tolerance: 0.0, ..Default::default() },
            SolverConfig { time_steps: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn registration_error_closed_form() {
        let g = CellGrid::new(&[10], &[1.0]).unwrap();
        let a = ScalarField::constant(g, 1.0);
        let b = ScalarField::constant(g, 1.1);
        let e = registration_errors(&a, &b).unwrap();
        assert!((e.mse - 0.01).abs() < 1e-14);
        assert!((e.inf_norm - 0.1).abs() < 1e-14);
        assert_eq!(
            registration_errors(&a, &a).unwrap(),
            RegistrationErrors { mse: 0.0, inf_norm: 0.0 }
        );
        let other = ScalarField::zeros(CellGrid::new(&[5], &[1.0]).unwrap());
        assert!(registration_errors(&a, &other).is_err());
    }

    #[test]
    fn rmse_of_offset_series() {
        let g = CellGrid::new(&[3, 2], &[1.0, 1.0]).unwrap();
        let t = TimeGrid::unit(3).unwrap();
        let frames: Vec<_> = (0..4).map(|n| ScalarField::constant(g, n as f64)).collect();
        let a = DensitySeries { grid: g, time: t, frames: frames.clone() };
        let b = DensitySeries {
            grid: g,
            time: t,
            frames: frames
                .iter()
                .map(|f| ScalarField::new(g, f.values.iter().map(|x| x + 0.25).collect()).unwrap())
                .collect(),
        };
        let r = rmse_between_series(&a, &b).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|&x| (x - 0.25).abs() < 1e-14));
        assert!(rmse_between_series(&a, &a).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn already_optimal_solve_stops_immediately() {
        let g = CellGrid::unit(&[6, 6]).unwrap();
        let rho0 = ScalarField::new(g, (0..36).map(|i| 1.0 + (i % 7) as f64).collect()).unwrap();
        let obs = ObservationSet::endpoints(rho0.clone(), rho0.clone(), 4);
        let r = solve(&rho0, &obs, &SolverConfig::default()).unwrap();
        assert!(r.diagnostics.converged, "{:?}", r.diagnostics);
        assert!(r.diagnostics.iterations() <= 1);
        assert_eq!(r.diagnostics.records.last().unwrap().phi, 0.0);
        assert!(r.velocity.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn baseline_identical_endpoints_do_not_move() {
        let g = CellGrid::unit(&[5, 5]).unwrap();
        let rho0 = ScalarField::new(g, (0..25).map(|i| 0.5 + (i % 4) as f64).collect()).unwrap();
        let scaled = ScalarField::new(g, rho0.values.iter().map(|x| 3.0 * x).collect()).unwrap();
        let (a, b, mass) = baseline_inputs(&rho0, &scaled).unwrap();
        assert!((a.total() - 1.0).abs() < 1e-12 && (b.total() - 1.0).abs() < 1e-12);
        assert!((mass - rho0.total()).abs() < 1e-12);
        let r = solve_baseline(&rho0, &scaled, &SolverConfig::default()).unwrap();
        assert!(r.velocity.flatten().iter().all(|&x| x.abs() < 1e-12));
        let fin = r.final_density();
        for (x, y) in fin.values.iter().zip(&rho0.values) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
