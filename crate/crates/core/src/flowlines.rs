//! Streamlines through the recovered time-varying flow and per-voxel
//! streamline counts ("pathways").
//!
//! Velocity is piecewise constant in time over the solver's intervals and
//! multilinear in space. Each interval is integrated with classical RK4 using
//! a whole number of equal sub-steps no longer than the requested step, so no
//! step straddles two velocity frames.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::VelocitySeries;
use crate::grid::{sample_vector_field, CellGrid, ScalarField, VectorField};

/// Speed below which tracing stops.
pub const STAGNATION_SPEED: f64 = 1e-12;
pub const DEFAULT_SEED_QUANTILE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    pub seed: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// Upper bound on the integration time step that produced `points`.
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathwayMap {
    pub grid: CellGrid,
    pub counts: Vec<u32>,
}

impl PathwayMap {
    pub fn to_field(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.counts.iter().map(|&c| c as f64).collect(),
        }
    }
}

/// Lower quantile (nearest rank, rounding down) of `values`, which must be
/// nonempty.
fn lower_quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = (q * (values.len() - 1) as f64).floor() as usize;
    values[idx]
}

/// Centers of the cells whose density reaches the `quantile` of the positive
/// density values, in canonical cell order.
pub fn seed_points(density: &ScalarField, quantile: f64) -> Result<Vec<Vec<f64>>> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidArgument(format!("seed quantile {quantile} not in (0, 1)")));
    }
    density.check_density()?;
    let mut positive: Vec<f64> = density.values.iter().copied().filter(|&x| x > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::EmptySeeds);
    }
    let threshold = lower_quantile(&mut positive, quantile);
    let seeds: Vec<Vec<f64>> = density
        .values
        .iter()
        .enumerate()
        .filter(|&(_, &x)| x > 0.0 && x >= threshold)
        .map(|(c, _)| density.grid.center(c))
        .collect();
    if seeds.is_empty() {
        return Err(Error::EmptySeeds);
    }
    Ok(seeds)
}

/// Half the smallest cell width divided by the fastest speed, capped at one
/// solver interval.
pub fn default_step_size(v: &VelocitySeries) -> f64 {
    let dt = v.time.dt();
    let vmax = v.max_speed();
    if vmax > 0.0 {
        (0.5 * v.grid.min_spacing() / vmax).min(dt)
    } else {
        dt
    }
}

fn sample_clamped(v: &VectorField, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    v.grid.clamp_point(&mut p);
    sample_vector_field(v, &p).expect("clamped point is inside the domain")
}

fn rk4_step(v: &VectorField, x: &[f64], h: f64) -> Vec<f64> {
    let shifted = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(a, b)| a + s * b).collect()
    };
    let k1 = sample_clamped(v, x);
    let k2 = sample_clamped(v, &shifted(x, &k1, 0.5 * h));
    let k3 = sample_clamped(v, &shifted(x, &k2, 0.5 * h));
    let k4 = sample_clamped(v, &shifted(x, &k3, h));
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrate `dx/dt = v(t, x)` from `seed` over `[0, T]`. Stops early at the
/// domain boundary (the exiting point is dropped), after `max_steps` steps,
/// or where the local speed falls below [`STAGNATION_SPEED`].
pub fn trace_streamline(v: &VelocitySeries, seed: &[f64], step_size: f64, max_steps: usize) -> Result<Streamline> {
    if !v.grid.contains(seed) {
        return Err(Error::OutsideDomain { point: seed.to_vec() });
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size {step_size} must be > 0")));
    }
    let dt = v.time.dt();
    let substeps = (dt / step_size - 1e-9).ceil().max(1.0) as usize;
    let h = dt / substeps as f64;
    let mut points = vec![seed.to_vec()];
    'outer: for frame in &v.frames {
        for _ in 0..substeps {
            if points.len() > max_steps {
                break 'outer;
            }
            let x = points.last().unwrap();
            let here = sample_vector_field(frame, x)?;
            if here.iter().map(|c| c * c).sum::<f64>().sqrt() < STAGNATION_SPEED {
                break 'outer;
            }
            let next = rk4_step(frame, x, h);
            if !v.grid.contains(&next) {
                break 'outer;
            }
            points.push(next);
        }
    }
    Ok(Streamline {
        seed: seed.to_vec(),
        points,
        step_size: h,
    })
}

/// Trace every seed; output order follows `seeds` regardless of threading.
pub fn trace_all(v: &VelocitySeries, seeds: &[Vec<f64>], step_size: f64, max_steps: usize) -> Result<Vec<Streamline>> {
    seeds
        .par_iter()
        .map(|s| trace_streamline(v, s, step_size, max_steps))
        .collect()
}

/// Number of distinct streamlines with at least one point in each cell.
pub fn pathway_density(streamlines: &[Streamline], grid: &CellGrid) -> Result<PathwayMap> {
    let mut counts = vec![0u32; grid.cell_count()];
    let mut visited: Vec<usize> = Vec::new();
    for s in streamlines {
        visited.clear();
        for p in &s.points {
            let cell = grid
                .cell_of(p)
                .ok_or_else(|| Error::OutsideDomain { point: p.clone() })?;
            visited.push(cell);
        }
        visited.sort_unstable();
        visited.dedup();
        for &c in &visited {
            counts[c] += 1;
        }
    }
    Ok(PathwayMap { grid: *grid, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::TimeGrid;

    fn unit2(n: usize) -> CellGrid {
        CellGrid::unit(&[n, n]).unwrap()
    }

    #[test]
    fn uniform_density_seeds_everywhere() {
        let g = unit2(4);
        let seeds = seed_points(&ScalarField::constant(g, 2.0), 0.5).unwrap();
        assert_eq!(seeds.len(), 16);
        assert_eq!(seeds[1], g.center(1));
    }

    #[test]
    fn seeds_recover_support() {
        let g = unit2(5);
        let mut d = ScalarField::zeros(g);
        for (c, x) in [(3, 0.5), (7, 2.0), (19, 1.0)] {
            d.values[c] = x;
        }
        let seeds = seed_points(&d, 0.2).unwrap();
        assert_eq!(seeds, vec![g.center(3), g.center(7), g.center(19)]);
        assert!(matches!(seed_points(&ScalarField::zeros(g), 0.5), Err(Error::EmptySeeds)));
        assert!(seed_points(&d, 1.0).is_err());
    }

    #[test]
    fn stagnant_flow_keeps_seed() {
        let g = unit2(6);
        let v = VelocitySeries::zeros(g, TimeGrid::unit(4).unwrap());
        let s = trace_streamline(&v, &[0.3, 0.4], 0.01, 1000).unwrap();
        assert_eq!(s.points, vec![vec![0.3, 0.4]]);
    }

    #[test]
    fn seed_outside_is_rejected() {
        let g = unit2(6);
        let v = VelocitySeries::zeros(g, TimeGrid::unit(1).unwrap());
        assert!(trace_streamline(&v, &[1.2, 0.4], 0.01, 10).is_err());
    }

    #[test]
    fn boundary_halts_tracing() {
        let g = unit2(8);
        let v = VelocitySeries::steady(VectorField::uniform(g, &[3.0, 0.0]).unwrap(), TimeGrid::unit(2).unwrap());
        let s = trace_streamline(&v, &[0.5, 0.5], 0.01, 10_000).unwrap();
        assert!(s.points.iter().all(|p| g.contains(p)));
        let last = s.points.last().unwrap();
        assert!(last[0] > 1.0 - 0.031 && last[0] <= 1.0);
    }

    #[test]
    fn max_steps_limits_points() {
        let g = unit2(8);
        let v = VelocitySeries::steady(VectorField::uniform(g, &[0.1, 0.0]).unwrap(), TimeGrid::unit(1).unwrap());
        let s = trace_streamline(&v, &[0.2, 0.5], 0.001, 7).unwrap();
        assert_eq!(s.points.len(), 8);
    }

    #[test]
    fn piecewise_constant_in_time() {
        // +x for the first half of the horizon, +y for the second
        let g = unit2(10);
        let t = TimeGrid::unit(2).unwrap();
        let frames = vec![
            VectorField::uniform(g, &[0.2, 0.0]).unwrap(),
            VectorField::uniform(g, &[0.0, 0.2]).unwrap(),
        ];
        let v = VelocitySeries::new(g, t, frames).unwrap();
        let s = trace_streamline(&v, &[0.3, 0.3], 0.05, 1000).unwrap();
        let end = s.points.last().unwrap();
        assert!((end[0] - 0.4).abs() < 1e-12 && (end[1] - 0.4).abs() < 1e-12, "{end:?}");
    }

    #[test]
    fn pathway_counts() {
        let g = unit2(4);
        let one_cell = Streamline {
            seed: vec![0.1, 0.1],
            points: vec![vec![0.1, 0.1], vec![0.12, 0.2], vec![0.2, 0.05]],
            step_size: 0.1,
        };
        let m = pathway_density(std::slice::from_ref(&one_cell), &g).unwrap();
        assert_eq!(m.counts.iter().sum::<u32>(), 1);
        assert_eq!(m.counts[0], 1);

        let crossing = Streamline {
            seed: vec![0.1, 0.1],
            points: vec![vec![0.1, 0.1], vec![0.4, 0.1], vec![0.6, 0.1], vec![0.4, 0.1]],
            step_size: 0.1,
        };
        let m = pathway_density(&[crossing.clone(), crossing], &g).unwrap();
        assert_eq!(&m.counts[..4], &[2, 2, 2, 0]);
        assert_eq!(m.counts.iter().sum::<u32>(), 6);
    }
}
