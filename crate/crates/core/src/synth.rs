//! Synthetic ground truth: Gaussian blobs moved by known velocity fields,
//! the closed-form advection-diffusion solution for constant velocity,
//! reproducible observation noise, and a central-difference oracle.
//!
//! Noise comes from ChaCha20 keyed by the 64-bit seed, with one stream per
//! field, turned into normals by `rand_distr::StandardNormal`. Both are
//! documented, platform-independent algorithms, so a seed reproduces the
//! same noise everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{forward, DensitySeries, TimeGrid, VelocitySeries};
use crate::grid::{CellGrid, ScalarField, VectorField};
use crate::solver::{Observation, ObservationSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: Vec<f64>,
    pub width: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrueVelocity {
    Constant { velocity: Vec<f64> },
    /// Rigid rotation in the plane of axes 0 and 1: `v = omega * perp(x - center)`.
    Rotation { center: Vec<f64>, omega: f64 },
    /// `v_0 = rate * (x_1 - c_1)`, other components zero; `c` is the domain center.
    Shear { rate: f64 },
}

fn default_steps() -> usize {
    crate::solver::DEFAULT_TIME_STEPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub blobs: Vec<Blob>,
    pub velocity: TrueVelocity,
    #[serde(default)]
    pub sigma_true: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_steps")]
    pub time_steps: usize,
    /// Observed time indices after 0; defaults to the final node only.
    #[serde(default)]
    pub observe_at: Vec<usize>,
    /// Also add noise to the initial observation.
    #[serde(default)]
    pub noisy_initial: bool,
    /// Output directory for the CLI generator.
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl SynthSpec {
    pub fn grid(&self) -> Result<CellGrid> {
        CellGrid::new(&self.dims, &self.spacing)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::unit(self.time_steps)
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        if self.observe_at.is_empty() {
            vec![self.time_steps]
        } else {
            self.observe_at.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.blobs.is_empty() {
            return Err(Error::InvalidArgument("synthetic spec needs at least one blob".into()));
        }
        for b in &self.blobs {
            if b.center.len() != grid.ndim() {
                return Err(Error::InvalidArgument(format!(
                    "blob center {:?} does not match a {}-d grid",
                    b.center,
                    grid.ndim()
                )));
            }
            if !(b.width > 0.0) || !(b.mass > 0.0) {
                return Err(Error::InvalidArgument("blob width and mass must be > 0".into()));
            }
        }
        if !(self.noise_std >= 0.0) || !(self.sigma_true >= 0.0) {
            return Err(Error::InvalidArgument("noise_std and sigma_true must be >= 0".into()));
        }
        match &self.velocity {
            TrueVelocity::Constant { velocity } if velocity.len() != grid.ndim() => {
                return Err(Error::InvalidArgument("constant velocity has wrong length".into()))
            }
            TrueVelocity::Rotation { center, .. } if grid.ndim() < 2 || center.len() != grid.ndim() => {
                return Err(Error::InvalidArgument("rotation needs a 2-d or 3-d grid and a matching center".into()))
            }
            TrueVelocity::Shear { .. } if grid.ndim() < 2 => {
                return Err(Error::InvalidArgument("shear needs a 2-d or 3-d grid".into()))
            }
            _ => {}
        }
        self.time_grid()?;
        if let Some(&n) = self.observed_indices().iter().find(|&&n| n == 0 || n > self.time_steps) {
            return Err(Error::InvalidArgument(format!("observation index {n} out of 1..={}", self.time_steps)));
        }
        Ok(())
    }
}

/// Isotropic Gaussian sampled at cell centers and rescaled to sum to `mass`.
pub fn gaussian_blob(grid: &CellGrid, center: &[f64], width: f64, mass: f64) -> Result<ScalarField> {
    if !(width > 0.0) || !(mass > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blob width {width} and mass {mass} must be > 0"
        )));
    }
    if center.len() != grid.ndim() {
        return Err(Error::ShapeMismatch(format!(
            "center of length {} on a {}-d grid",
            center.len(),
            grid.ndim()
        )));
    }
    let inv = 1.0 / (2.0 * width * width);
    let mut values: Vec<f64> = (0..grid.cell_count())
        .map(|c| {
            let x = grid.center(c);
            let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
            (-r2 * inv).exp()
        })
        .collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("blob has no support on the grid".into()));
    }
    let scale = mass / total;
    values.iter_mut().for_each(|x| *x *= scale);
    ScalarField::new(*grid, values)
}

/// Closed-form solution at time `t` for a constant velocity: each blob's mean
/// moves by `v t` and its variance grows by `2 sigma^2 t`.
pub fn analytic_evolution(spec: &SynthSpec, t: f64) -> Result<ScalarField> {
    let TrueVelocity::Constant { velocity } = &spec.velocity else {
        return Err(Error::InvalidArgument(
            "closed-form evolution needs a constant velocity".into(),
        ));
    };
    let grid = spec.grid()?;
    let mut out = ScalarField::zeros(grid);
    for b in &spec.blobs {
        let center: Vec<f64> = b.center.iter().zip(velocity).map(|(c, v)| c + v * t).collect();
        let width = (b.width * b.width + 2.0 * spec.sigma_true * spec.sigma_true * t).sqrt();
        let blob = gaussian_blob(&grid, &center, width, b.mass)?;
        out.values.iter_mut().zip(&blob.values).for_each(|(a, x)| *a += x);
    }
    Ok(out)
}

pub fn initial_density(spec: &SynthSpec) -> Result<ScalarField> {
    let grid = spec.grid()?;
    let mut out = ScalarField::zeros(grid);
    for b in &spec.blobs {
        let blob = gaussian_blob(&grid, &b.center, b.width, b.mass)?;
        out.values.iter_mut().zip(&blob.values).for_each(|(a, x)| *a += x);
    }
    Ok(out)
}

/// The generating velocity, steady over all intervals.
pub fn true_velocity(spec: &SynthSpec) -> Result<VelocitySeries> {
    let grid = spec.grid()?;
    let field = match &spec.velocity {
        TrueVelocity::Constant { velocity } => VectorField::uniform(grid, velocity)?,
        TrueVelocity::Rotation { center, omega } => {
            let (c, w) = (center.clone(), *omega);
            VectorField::from_fn(grid, move |x| {
                let mut v = vec![0.0; x.len()];
                v[0] = -w * (x[1] - c[1]);
                v[1] = w * (x[0] - c[0]);
                v
            })
        }
        TrueVelocity::Shear { rate } => {
            let (r, c1) = (*rate, 0.5 * grid.extent(1));
            VectorField::from_fn(grid, move |x| {
                let mut v = vec![0.0; x.len()];
                v[0] = r * (x[1] - c1);
                v
            })
        }
    };
    Ok(VelocitySeries::steady(field, spec.time_grid()?))
}

/// Noiseless densities at every time node: closed form for constant
/// velocity, the forward model under the true velocity otherwise.
pub fn truth_series(spec: &SynthSpec) -> Result<DensitySeries> {
    spec.validate()?;
    let time = spec.time_grid()?;
    if matches!(spec.velocity, TrueVelocity::Constant { .. }) {
        let frames = (0..=time.steps())
            .map(|n| analytic_evolution(spec, n as f64 * time.dt()))
            .collect::<Result<Vec<_>>>()?;
        return Ok(DensitySeries {
            grid: spec.grid()?,
            time,
            frames,
        });
    }
    forward(&true_velocity(spec)?, &initial_density(spec)?, spec.sigma_true)
}

/// `len` iid normal samples with standard deviation `std` from stream
/// `stream` of the generator keyed by `seed`.
pub fn gaussian_noise(len: usize, std: f64, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..len)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect()
}

/// Add iid Gaussian noise (stream 0 of `seed`) and clamp at zero.
pub fn add_noise(field: &ScalarField, std: f64, seed: u64) -> ScalarField {
    add_noise_stream(field, std, seed, 0)
}

pub fn add_noise_stream(field: &ScalarField, std: f64, seed: u64, stream: u64) -> ScalarField {
    if std == 0.0 {
        return field.clone();
    }
    let noise = gaussian_noise(field.values.len(), std, seed, stream);
    ScalarField {
        grid: field.grid,
        values: field
            .values
            .iter()
            .zip(&noise)
            .map(|(x, e)| (x + e).max(0.0))
            .collect(),
    }
}

/// Truth series and noisy observations (stream `n` for time index `n`).
pub fn observations(spec: &SynthSpec) -> Result<(DensitySeries, ObservationSet)> {
    let truth = truth_series(spec)?;
    let noisy = |n: usize| add_noise_stream(&truth.frames[n], spec.noise_std, spec.rng_seed, n as u64);
    let initial = if spec.noisy_initial {
        noisy(0)
    } else {
        truth.frames[0].clone()
    };
    let mut entries = vec![Observation::new(0, initial)];
    for n in spec.observed_indices() {
        entries.push(Observation::new(n, noisy(n)));
    }
    Ok((truth, ObservationSet::new(entries)))
}

/// Central difference `(f(x + eps dx) - f(x - eps dx)) / (2 eps)`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], dx: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let shifted = |sign: f64| -> Vec<f64> { x.iter().zip(dx).map(|(a, d)| a + sign * eps * d).collect() };
    (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * eps)
}

/// The translating-Gaussian pair on the unit square: a 32x32 grid, one blob
/// of width 3 cells and mass 50 at (0.4, 0.5), moved 3 cells along axis 0
/// over the horizon with `m = 4` steps. `noise_fraction` sets the noise
/// standard deviation relative to the noiseless final peak.
pub fn translating_pair_spec(noise_fraction: f64, seed: u64) -> Result<SynthSpec> {
    let n = 32;
    let h = 1.0 / n as f64;
    let mut spec = SynthSpec {
        dims: vec![n, n],
        spacing: vec![h; 2],
        blobs: vec![Blob {
            center: vec![0.4, 0.5],
            width: 3.0 * h,
            mass: 50.0,
        }],
        velocity: TrueVelocity::Constant {
            velocity: vec![3.0 * h, 0.0],
        },
        sigma_true: 0.0,
        noise_std: 0.0,
        rng_seed: seed,
        time_steps: crate::solver::DEFAULT_TIME_STEPS,
        observe_at: Vec::new(),
        noisy_initial: false,
        out_dir: None,
    };
    if noise_fraction > 0.0 {
        spec.noise_std = noise_fraction * truth_series(&spec)?.last().max();
    }
    Ok(spec)
}

/// The standard noisy fixture: the translating pair with 5% noise, seed 42.
pub fn standard_noisy_spec() -> Result<SynthSpec> {
    translating_pair_spec(0.05, 42)
}

/// Two planted 2-d bundles of `per_bundle` noisy polylines each, in shuffled
/// order with random orientation. Returns the tracks and the bundle (0 or 1)
/// each came from.
pub fn planted_bundles(per_bundle: usize, jitter: f64, seed: u64) -> (Vec<Vec<Vec<f64>>>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::Rng;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let paths: [[[f64; 2]; 3]; 2] = [
        [[0.1, 0.2], [0.5, 0.3], [0.9, 0.25]],
        [[0.15, 0.8], [0.5, 0.65], [0.85, 0.75]],
    ];
    let mut tracks = Vec::with_capacity(2 * per_bundle);
    for (label, path) in paths.iter().enumerate() {
        for _ in 0..per_bundle {
            let samples = rng.gen_range(15..40);
            let offset = [rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter)];
            let mut pts: Vec<Vec<f64>> = (0..samples)
                .map(|i| {
                    let u = 2.0 * i as f64 / (samples - 1) as f64;
                    let (seg, f) = if u < 1.0 { (0, u) } else { (1, u - 1.0) };
                    let (a, b) = (path[seg], path[seg + 1]);
                    (0..2)
                        .map(|k| {
                            let noise: f64 = 0.2 * jitter * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                            a[k] + f * (b[k] - a[k]) + offset[k] + noise
                        })
                        .collect()
                })
                .collect();
            if rng.gen_bool(0.5) {
                pts.reverse();
            }
            tracks.push((pts, label));
        }
    }
    tracks.shuffle(&mut rng);
    tracks.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_2d(velocity: Vec<f64>, sigma: f64) -> SynthSpec {
        SynthSpec {
            dims: vec![64, 64],
            spacing: vec![1.0 / 64.0; 2],
            blobs: vec![Blob {
                center: vec![0.5, 0.5],
                width: 0.08,
                mass: 3.0,
            }],
            velocity: TrueVelocity::Constant { velocity },
            sigma_true: sigma,
            noise_std: 0.0,
            rng_seed: 7,
            time_steps: 4,
            observe_at: vec![],
            noisy_initial: false,
            out_dir: None,
        }
    }

    #[test]
    fn blob_mass_and_peak() {
        let g = CellGrid::unit(&[20, 16]).unwrap();
        let center = [0.33, 0.61];
        let b = gaussian_blob(&g, &center, 0.1, 2.5).unwrap();
        assert!((b.total() - 2.5).abs() <= 1e-12 * 2.5);
        let argmax = (0..g.cell_count())
            .max_by(|&a, &c| b.values[a].partial_cmp(&b.values[c]).unwrap())
            .unwrap();
        assert_eq!(Some(argmax), g.cell_of(&center));
    }

    #[test]
    fn centered_blob_is_reflection_symmetric() {
        let g = CellGrid::unit(&[12, 9]).unwrap();
        let b = gaussian_blob(&g, &[0.5, 0.5], 0.2, 1.0).unwrap();
        for c in 0..g.cell_count() {
            let [i, j, _] = g.multi_index(c);
            let mirror_x = g.linear_index(&[11 - i, j]);
            let mirror_y = g.linear_index(&[i, 8 - j]);
            assert!((b.values[c] - b.values[mirror_x]).abs() < 1e-12);
            assert!((b.values[c] - b.values[mirror_y]).abs() < 1e-12);
        }
    }

    #[test]
    fn evolution_at_zero_and_static() {
        let spec = spec_2d(vec![0.1, -0.2], 0.05);
        let g = spec.grid().unwrap();
        let b = gaussian_blob(&g, &[0.5, 0.5], 0.08, 3.0).unwrap();
        assert_eq!(analytic_evolution(&spec, 0.0).unwrap(), b);
        let still = spec_2d(vec![0.0, 0.0], 0.0);
        assert_eq!(analytic_evolution(&still, 0.7).unwrap(), b);
    }

    #[test]
    fn evolution_variance_grows_by_two_sigma_squared_t() {
        let sigma = 0.1;
        let t = 0.5;
        let spec = spec_2d(vec![0.0, 0.0], sigma);
        let g = spec.grid().unwrap();
        // second central moment along axis 0, by direct summation over cells
        let moment = |f: &ScalarField| {
            let m = f.total();
            let mean: f64 = (0..g.cell_count()).map(|c| f.values[c] * g.center(c)[0]).sum::<f64>() / m;
            (0..g.cell_count())
                .map(|c| f.values[c] * (g.center(c)[0] - mean).powi(2))
                .sum::<f64>()
                / m
        };
        let grown = moment(&analytic_evolution(&spec, t).unwrap()) - moment(&analytic_evolution(&spec, 0.0).unwrap());
        let expected = 2.0 * sigma * sigma * t;
        assert!((grown - expected).abs() < 0.02 * expected, "{grown} vs {expected}");
    }

    #[test]
    fn non_constant_velocity_has_no_closed_form() {
        let mut spec = spec_2d(vec![0.0, 0.0], 0.0);
        spec.velocity = TrueVelocity::Shear { rate: 1.0 };
        assert!(analytic_evolution(&spec, 0.5).is_err());
        assert!(truth_series(&spec).is_ok());
    }

    #[test]
    fn noise_is_reproducible() {
        let g = CellGrid::unit(&[10, 10]).unwrap();
        let f = ScalarField::constant(g, 1.0);
        assert_eq!(add_noise(&f, 0.0, 3), f);
        assert_eq!(add_noise(&f, 0.2, 3), add_noise(&f, 0.2, 3));
        assert_ne!(add_noise(&f, 0.2, 3), add_noise(&f, 0.2, 4));
        assert_ne!(add_noise_stream(&f, 0.2, 3, 1), add_noise_stream(&f, 0.2, 3, 2));
        assert!(add_noise(&f, 5.0, 3).is_nonnegative());
    }

    #[test]
    fn noise_variance_matches() {
        let std = 0.3;
        let e = gaussian_noise(1_000_000, std, 11, 0);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (e.len() - 1) as f64;
        assert!((var - std * std).abs() < 0.01 * std * std, "{var}");
    }

    #[test]
    fn central_difference_oracle() {
        let f = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
        let x = [0.3, -1.2, 2.0];
        let dx = [1.0, 0.5, -0.25];
        let exact = 2.0 * x.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>();
        assert!((finite_difference_gradient(f, &x, &dx, 1e-3) - exact).abs() < 1e-12);
        assert_eq!(finite_difference_gradient(|_| 4.0, &x, &dx, 1e-3), 0.0);
    }

    #[test]
    fn spec_validation() {
        let mut spec = spec_2d(vec![0.1, 0.0], 0.0);
        assert!(spec.validate().is_ok());
        spec.blobs[0].width = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = spec_2d(vec![0.1], 0.0);
        assert!(spec.validate().is_err());
        spec.velocity = TrueVelocity::Constant { velocity: vec![0.0, 0.0] };
        spec.observe_at = vec![5];
        assert!(spec.validate().is_err());
    }
}
