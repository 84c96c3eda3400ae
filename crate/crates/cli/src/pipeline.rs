//! The stages behind each subcommand. Every stage reads its inputs from
//! disk and writes its outputs under the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use grot_core::bundles::{label_volume, quickbundles, resample_track, significant_clusters, Cluster};
use grot_core::flowlines::{default_step_size, pathway_density, seed_points, trace_all};
use grot_core::forward::DensitySeries;
use grot_core::io::{
    self, read_density_series, read_nifti, read_velocity_series, write_density_series, write_diagnostics, write_json,
    write_nifti, write_resolved_config, write_streamlines, ObservationSpec, RunConfig,
};
use grot_core::solver::{registration_errors, rmse_between_series, solve_baseline, solve_with_mode, Observation, ObservationSet};
use grot_core::synth::{self, SynthSpec};
use grot_core::{ScalarField, VelocitySeries};

pub const VELOCITY_PREFIX: &str = "velocity";
pub const DENSITY_PREFIX: &str = "density";

/// How a solve ended; the CLI maps this to its exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    NotConverged,
}

fn load_observations(cfg: &RunConfig) -> Result<(ScalarField, ObservationSet)> {
    let mut entries = Vec::with_capacity(cfg.observations.len());
    for ObservationSpec {
        time_index,
        path,
        weight_path,
    } in &cfg.observations
    {
        let observed = read_nifti(path)?;
        let obs = match weight_path {
            Some(wp) => {
                let w = read_nifti(wp)?;
                w.check_same_grid(&observed)
                    .with_context(|| format!("weights {} do not match {}", wp.display(), path.display()))?;
                Observation::with_weight(*time_index, observed, w.values)?
            }
            None => Observation::new(*time_index, observed),
        };
        entries.push(obs);
    }
    let set = ObservationSet::new(entries);
    let rho0 = set
        .initial()
        .context("config has no observation at time_index 0")?
        .clone();
    set.validate(&rho0.grid, cfg.time_steps)?;
    Ok((rho0, set))
}

#[derive(Serialize)]
struct SolvePlan<'a> {
    stage: &'static str,
    dims: &'a [usize],
    spacing: &'a [f64],
    observed_time_indices: Vec<usize>,
    outputs: PathBuf,
    config: &'a RunConfig,
}

pub fn solve(cfg: &RunConfig, dry_run: bool) -> Result<SolveStatus> {
    let (rho0, obs) = load_observations(cfg).context("loading observations")?;
    if dry_run {
        let plan = SolvePlan {
            stage: "solve",
            dims: rho0.grid.dims(),
            spacing: rho0.grid.spacing(),
            observed_time_indices: obs.entries.iter().map(|o| o.time_index).collect(),
            outputs: cfg.run_dir.clone(),
            config: cfg,
        };
        println!("{}", serde_json::to_string_pretty(&plan)?);
        return Ok(SolveStatus::Converged);
    }
    fs::create_dir_all(&cfg.run_dir).with_context(|| format!("creating {}", cfg.run_dir.display()))?;
    write_resolved_config(cfg)?;

    let solver_cfg = cfg.solver_config();
    info!(
        "solving on {:?} cells, {} steps, sigma {}, alpha {}{}",
        rho0.grid.dims(),
        solver_cfg.time_steps,
        solver_cfg.sigma,
        solver_cfg.alpha,
        if solver_cfg.baseline_mode { " (baseline)" } else { "" }
    );
    let result = solve_with_mode(&rho0, &obs, &solver_cfg).context("solve")?;
    let densities = DensitySeries {
        grid: result.densities.grid,
        time: result.densities.time,
        frames: result
            .densities
            .frames
            .iter()
            .map(|f| ScalarField {
                grid: f.grid,
                values: f.values.iter().map(|x| x * result.mass_scale).collect(),
            })
            .collect(),
    };
    write_density_series(&cfg.run_dir, DENSITY_PREFIX, &densities)?;
    io::write_velocity_series(&cfg.run_dir, VELOCITY_PREFIX, &result.velocity)?;
    write_diagnostics(&cfg.run_dir.join("diagnostics.csv"), &result.diagnostics)?;

    let d = &result.diagnostics;
    info!(
        "{} Gauss-Newton iterations, final phi {:.6e}",
        d.iterations(),
        d.records.last().map_or(f64::NAN, |r| r.phi)
    );
    Ok(if d.converged {
        SolveStatus::Converged
    } else {
        SolveStatus::NotConverged
    })
}

#[derive(Serialize)]
struct ClusterReport<'a> {
    threshold: f64,
    min_cluster_size: usize,
    total_clusters: usize,
    /// Significant clusters only; members index into streamlines.jsonl.
    clusters: &'a [Cluster],
}

#[derive(Serialize)]
struct FpaPlan<'a> {
    stage: &'static str,
    velocity: PathBuf,
    seed_density: PathBuf,
    seed_count: usize,
    step_size: f64,
    qb_threshold: f64,
    config: &'a RunConfig,
}

pub fn fpa(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let v: VelocitySeries =
        read_velocity_series(&cfg.run_dir, VELOCITY_PREFIX).context("stage load: reading the velocity series")?;
    let seed_path = cfg.run_dir.join(format!("{DENSITY_PREFIX}_t0.nii"));
    let rho0 = read_nifti(&seed_path).context("stage load: reading the clean initial density")?;
    rho0.grid.check_same(&v.grid).context("stage load")?;

    let seeds = seed_points(&rho0, cfg.seed_quantile).context("stage seeding")?;
    let step = cfg.streamline_step.unwrap_or_else(|| default_step_size(&v));
    let threshold = cfg.qb_threshold.unwrap_or(4.0 * v.grid.min_spacing());
    if dry_run {
        let plan = FpaPlan {
            stage: "fpa",
            velocity: io::manifest_path(&cfg.run_dir, VELOCITY_PREFIX),
            seed_density: seed_path,
            seed_count: seeds.len(),
            step_size: step,
            qb_threshold: threshold,
            config: cfg,
        };
        println!("{}", serde_json::to_string_pretty(&plan)?);
        return Ok(());
    }

    let lines = trace_all(&v, &seeds, step, cfg.max_streamline_steps).context("stage tracing")?;
    write_streamlines(&cfg.run_dir.join("streamlines.jsonl"), &lines)?;
    let map = pathway_density(&lines, &v.grid).context("stage pathways")?;
    write_nifti(cfg.run_dir.join("pathways.nii"), &map.to_field())?;

    let tracks = lines
        .iter()
        .map(|s| resample_track(&s.points, cfg.track_points))
        .collect::<grot_core::Result<Vec<_>>>()
        .context("stage clustering")?;
    let all = quickbundles(&tracks, threshold).context("stage clustering")?;
    let significant = significant_clusters(&all, cfg.min_cluster_size);
    write_json(
        &cfg.run_dir.join("clusters.json"),
        &ClusterReport {
            threshold,
            min_cluster_size: cfg.min_cluster_size,
            total_clusters: all.clusters.len(),
            clusters: &significant.clusters,
        },
    )?;
    let labels = label_volume(&significant, &v.grid);
    let label_field = ScalarField {
        grid: v.grid,
        values: labels.iter().map(|&l| l as f64).collect(),
    };
    write_nifti(cfg.run_dir.join("cluster_labels.nii"), &label_field)?;
    info!(
        "{} streamlines, {} clusters ({} significant)",
        lines.len(),
        all.clusters.len(),
        significant.clusters.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    spec: &'a SynthSpec,
    masses: Vec<f64>,
    truth_dir: &'static str,
    observations: &'a [ObservationSpec],
    config: &'static str,
}

/// Write truth series, noisy observations, a scoring manifest and a ready
/// run config into `out`.
pub fn synth(spec: &SynthSpec, out: &Path, dry_run: bool) -> Result<()> {
    spec.validate()?;
    let obs_specs: Vec<ObservationSpec> = std::iter::once(0)
        .chain(spec.observed_indices())
        .map(|n| ObservationSpec {
            time_index: n,
            path: PathBuf::from(format!("obs_t{n}.nii")),
            weight_path: None,
        })
        .collect();
    if dry_run {
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "stage": "synth",
                "out_dir": out,
                "observations": obs_specs,
                "spec": spec,
            }))?
        );
        return Ok(());
    }
    let (truth, obs) = synth::observations(spec)?;
    let truth_dir = out.join("truth");
    fs::create_dir_all(&truth_dir).with_context(|| format!("creating {}", truth_dir.display()))?;
    write_density_series(&truth_dir, DENSITY_PREFIX, &truth)?;
    io::write_velocity_series(&truth_dir, VELOCITY_PREFIX, &synth::true_velocity(spec)?)?;
    for (o, s) in obs.entries.iter().zip(&obs_specs) {
        write_nifti(out.join(&s.path), &o.observed)?;
    }
    write_json(
        &out.join("manifest.json"),
        &SynthManifest {
            spec,
            masses: truth.frames.iter().map(|f| f.total()).collect(),
            truth_dir: "truth",
            observations: &obs_specs,
            config: "config.json",
        },
    )?;
    let config = RunConfig {
        run_dir: PathBuf::from("run"),
        observations: obs_specs,
        time_steps: spec.time_steps,
        sigma: spec.sigma_true,
        ..RunConfig::default()
    };
    write_json(&out.join("config.json"), &config)?;
    Ok(())
}

enum Scored {
    Volume(ScalarField),
    Series(DensitySeries),
}

impl Scored {
    fn load(path: &Path) -> Result<Scored> {
        if path.is_dir() {
            Ok(Scored::Series(read_density_series(path, DENSITY_PREFIX)?))
        } else {
            Ok(Scored::Volume(read_nifti(path)?))
        }
    }

    fn final_frame(&self) -> &ScalarField {
        match self {
            Scored::Volume(f) => f,
            Scored::Series(s) => s.last(),
        }
    }
}

/// Rows of `model,step,mse,rmse,inf_norm`; `step` is empty for single volumes.
pub fn compare(result: &Path, target: &Path, baseline: Option<&RunConfig>, out: Option<&Path>, dry_run: bool) -> Result<()> {
    let (res, tgt) = (Scored::load(result)?, Scored::load(target)?);
    if dry_run {
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "stage": "compare",
                "result": result,
                "target": target,
                "baseline": baseline.is_some(),
                "out": out,
            }))?
        );
        return Ok(());
    }
    let mut csv = String::from("model,step,mse,rmse,inf_norm\n");
    let mut row = |model: &str, step: String, a: &ScalarField, b: &ScalarField| -> Result<()> {
        let e = registration_errors(a, b)?;
        csv.push_str(&format!("{model},{step},{:e},{:e},{:e}\n", e.mse, e.mse.sqrt(), e.inf_norm));
        Ok(())
    };
    match (&res, &tgt) {
        (Scored::Series(a), Scored::Series(b)) => {
            rmse_between_series(a, b)?;
            for (n, (fa, fb)) in a.frames.iter().zip(&b.frames).enumerate().skip(1) {
                row("grot", n.to_string(), fa, fb)?;
            }
        }
        _ => row("grot", String::new(), res.final_frame(), tgt.final_frame())?,
    }
    if let Some(cfg) = baseline {
        let (rho0, obs) = load_observations(cfg).context("loading observations for the baseline")?;
        let last = obs.last().context("baseline needs a final observation")?;
        let b = solve_baseline(&rho0, &last.observed, &cfg.solver_config()).context("baseline solve")?;
        let step = match &tgt {
            Scored::Series(s) => s.time.steps().to_string(),
            Scored::Volume(_) => String::new(),
        };
        row("baseline", step, &b.final_density(), tgt.final_frame())?;
    }
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn read_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    match serde_path_to_error::deserialize(de) {
        Ok(spec) => Ok(spec),
        Err(e) => bail!("{}: key `{}`: {}", path.display(), e.path(), e.inner()),
    }
}
