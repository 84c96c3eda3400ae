//! File formats: NIfTI-1 volumes, velocity and density series, streamline
//! JSON lines, cluster JSON, diagnostics CSV and the run configuration.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundles::DEFAULT_TRACK_POINTS;
use crate::error::{Error, NiftiError, Result};
use crate::flowlines::{Streamline, DEFAULT_SEED_QUANTILE};
use crate::forward::{DensitySeries, TimeGrid, VelocitySeries};
use crate::grid::{CellGrid, ScalarField, VectorField};
use crate::solver::{Diagnostics, SolverConfig};

pub const NIFTI_HEADER_SIZE: usize = 348;
pub const NIFTI_VOX_OFFSET: usize = 352;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

// ---------------------------------------------------------------------------
// NIfTI-1

fn put_i16(buf: &mut [u8], at: usize, v: i16) {
    LittleEndian::write_i16(&mut buf[at..at + 2], v);
}

fn put_f32(buf: &mut [u8], at: usize, v: f32) {
    LittleEndian::write_f32(&mut buf[at..at + 4], v);
}

/// Single-file (`n+1`) little-endian float32 encoding with an identity
/// orientation scaled by the voxel spacing.
pub fn encode_nifti(field: &ScalarField) -> Vec<u8> {
    let grid = &field.grid;
    let mut buf = vec![0u8; NIFTI_VOX_OFFSET + 4 * field.values.len()];
    LittleEndian::write_i32(&mut buf[0..4], NIFTI_HEADER_SIZE as i32);
    buf[38] = b'r';
    put_i16(&mut buf, 40, grid.ndim() as i16);
    for k in 0..7 {
        let n = grid.dims().get(k).copied().unwrap_or(1);
        put_i16(&mut buf, 42 + 2 * k, n as i16);
    }
    put_i16(&mut buf, 70, DT_FLOAT32);
    put_i16(&mut buf, 72, 32);
    put_f32(&mut buf, 76, 1.0); // qfac
    for k in 0..7 {
        let h = grid.spacing().get(k).copied().unwrap_or(1.0);
        put_f32(&mut buf, 80 + 4 * k, h as f32);
    }
    put_f32(&mut buf, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut buf, 112, 1.0); // scl_slope
    put_i16(&mut buf, 252, 1); // qform_code
    put_i16(&mut buf, 254, 1); // sform_code
    for row in 0..3 {
        let h = grid.spacing().get(row).copied().unwrap_or(1.0);
        put_f32(&mut buf, 280 + 16 * row + 4 * row, h as f32);
    }
    buf[344..348].copy_from_slice(b"n+1\0");
    for (i, v) in field.values.iter().enumerate() {
        put_f32(&mut buf, NIFTI_VOX_OFFSET + 4 * i, *v as f32);
    }
    buf
}

fn gunzip(bytes: &[u8]) -> std::result::Result<Vec<u8>, NiftiError> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out).map_err(NiftiError::Gzip)?;
    Ok(out)
}

fn decode_with<B: ByteOrder>(bytes: &[u8]) -> std::result::Result<ScalarField, NiftiError> {
    let i16_at = |at: usize| B::read_i16(&bytes[at..at + 2]);
    let f32_at = |at: usize| B::read_f32(&bytes[at..at + 4]);

    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    for (k, d) in dim.iter_mut().enumerate() {
        *d = i16_at(40 + 2 * k);
    }
    let nd = dim[0];
    if !(1..=7).contains(&nd) || dim[1..=nd as usize].iter().any(|&n| n < 1) {
        return Err(NiftiError::BadDimensions(dim));
    }
    let nd = nd as usize;
    if dim[4..=nd.max(3)].iter().any(|&n| n != 1) {
        return Err(NiftiError::BadDimensions(dim));
    }
    let ndim = nd.min(3);
    let dims: Vec<usize> = dim[1..=ndim].iter().map(|&n| n as usize).collect();
    let spacing: Vec<f64> = (1..=ndim)
        .map(|k| {
            let h = f32_at(76 + 4 * k) as f64;
            if h > 0.0 && h.is_finite() {
                h
            } else {
                1.0
            }
        })
        .collect();
    let grid = CellGrid::new(&dims, &spacing).map_err(|_| NiftiError::BadDimensions(dim))?;

    let datatype = i16_at(70);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let vox_offset = f32_at(108);
    if !(vox_offset >= NIFTI_VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::BadVoxOffset(vox_offset));
    }
    let start = vox_offset as usize;
    let n = grid.cell_count();
    let expected = n * width;
    let found = bytes.len().saturating_sub(start);
    if found < expected {
        return Err(NiftiError::TruncatedData { expected, found });
    }
    let data = &bytes[start..start + expected];
    let mut values: Vec<f64> = match datatype {
        DT_INT16 => data.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DT_FLOAT32 => data.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        _ => data.chunks_exact(8).map(B::read_f64).collect(),
    };
    let (slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        values.iter_mut().for_each(|x| *x = slope * *x + inter);
    }
    Ok(ScalarField { grid, values })
}

/// Decode a single-file NIfTI-1 volume, gzipped or not, in either byte
/// order. Integer data is converted to floating point, applying the
/// intensity scaling when present.
pub fn decode_nifti(bytes: &[u8]) -> std::result::Result<ScalarField, NiftiError> {
    let owned;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        owned = gunzip(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(NiftiError::ShortHeader(bytes.len()));
    }
    let le = LittleEndian::read_i32(&bytes[0..4]);
    if le == NIFTI_HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_SIZE as i32 {
        decode_with::<BigEndian>(bytes)
    } else {
        Err(NiftiError::BadHeaderSize(le))
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes).map_err(|source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `field` as float32; a `.gz` extension selects gzip compression.
pub fn write_nifti(path: impl AsRef<Path>, field: &ScalarField) -> Result<()> {
    let path = path.as_ref();
    let raw = encode_nifti(field);
    let bytes = if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).and_then(|_| enc.finish()).map_err(|e| Error::io(path, e))?
    } else {
        raw
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Series

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub steps: usize,
    pub ndim: usize,
    pub dt: f64,
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    /// Number of volumes per time node (1 for densities, `ndim` for velocity).
    pub components: usize,
    pub files: Vec<String>,
}

impl SeriesManifest {
    fn grid(&self) -> Result<CellGrid> {
        CellGrid::new(&self.dims, &self.spacing)
    }

    fn time(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.steps, self.dt * self.steps as f64)
    }
}

pub fn manifest_path(dir: &Path, prefix: &str) -> PathBuf {
    dir.join(format!("{prefix}_manifest.json"))
}

/// `{prefix}_t{n}_c{k}.nii` for each interval `n` and component `k`, plus
/// `{prefix}_manifest.json`.
pub fn write_velocity_series(dir: &Path, prefix: &str, v: &VelocitySeries) -> Result<()> {
    let mut files = Vec::new();
    for (n, frame) in v.frames.iter().enumerate() {
        for (k, comp) in frame.components.iter().enumerate() {
            let name = format!("{prefix}_t{n}_c{k}.nii");
            write_nifti(dir.join(&name), &ScalarField::new(v.grid, comp.clone())?)?;
            files.push(name);
        }
    }
    let manifest = SeriesManifest {
        steps: v.time.steps(),
        ndim: v.grid.ndim(),
        dt: v.time.dt(),
        dims: v.grid.dims().to_vec(),
        spacing: v.grid.spacing().to_vec(),
        components: v.grid.ndim(),
        files,
    };
    write_json(&manifest_path(dir, prefix), &manifest)
}

pub fn read_velocity_series(dir: &Path, prefix: &str) -> Result<VelocitySeries> {
    let manifest: SeriesManifest = read_json(&manifest_path(dir, prefix))?;
    let (grid, time) = (manifest.grid()?, manifest.time()?);
    if manifest.components != grid.ndim() || manifest.files.len() != time.steps() * grid.ndim() {
        return Err(Error::ShapeMismatch(format!("velocity manifest in {} is inconsistent", dir.display())));
    }
    let mut frames = Vec::with_capacity(time.steps());
    for chunk in manifest.files.chunks(grid.ndim()) {
        let mut comps = Vec::with_capacity(grid.ndim());
        for name in chunk {
            let f = read_nifti(dir.join(name))?;
            f.grid.check_same(&grid)?;
            comps.push(f.values);
        }
        frames.push(VectorField::new(grid, comps)?);
    }
    VelocitySeries::new(grid, time, frames)
}

/// `{prefix}_t{n}.nii` for every time node, plus `{prefix}_manifest.json`.
pub fn write_density_series(dir: &Path, prefix: &str, d: &DensitySeries) -> Result<()> {
    let mut files = Vec::new();
    for (n, frame) in d.frames.iter().enumerate() {
        let name = format!("{prefix}_t{n}.nii");
        write_nifti(dir.join(&name), frame)?;
        files.push(name);
    }
    let manifest = SeriesManifest {
        steps: d.time.steps(),
        ndim: d.grid.ndim(),
        dt: d.time.dt(),
        dims: d.grid.dims().to_vec(),
        spacing: d.grid.spacing().to_vec(),
        components: 1,
        files,
    };
    write_json(&manifest_path(dir, prefix), &manifest)
}

pub fn read_density_series(dir: &Path, prefix: &str) -> Result<DensitySeries> {
    let manifest: SeriesManifest = read_json(&manifest_path(dir, prefix))?;
    let (grid, time) = (manifest.grid()?, manifest.time()?);
    if manifest.components != 1 || manifest.files.len() != time.steps() + 1 {
        return Err(Error::ShapeMismatch(format!("density manifest in {} is inconsistent", dir.display())));
    }
    let frames = manifest
        .files
        .iter()
        .map(|name| {
            let f = read_nifti(dir.join(name))?;
            f.grid.check_same(&grid)?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensitySeries { grid, time, frames })
}

// ---------------------------------------------------------------------------
// JSON, JSON lines, CSV

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One JSON object per line.
pub fn write_streamlines(path: &Path, streamlines: &[Streamline]) -> Result<()> {
    let mut out = String::new();
    for s in streamlines {
        let line = serde_json::to_string(s).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_streamlines(path: &Path) -> Result<Vec<Streamline>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })
        })
        .collect()
}

pub const DIAGNOSTICS_HEADER: &str = "iter,phi,energy,misfit,grad_norm,step_length";

pub fn diagnostics_csv(diag: &Diagnostics) -> String {
    let mut out = String::from(DIAGNOSTICS_HEADER);
    out.push('\n');
    for r in &diag.records {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.iter, r.phi, r.energy, r.misfit, r.grad_norm, r.step_length
        ));
    }
    out
}

pub fn write_diagnostics(path: &Path, diag: &Diagnostics) -> Result<()> {
    fs::write(path, diagnostics_csv(diag)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    pub time_index: usize,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_path: Option<PathBuf>,
}

/// Flat JSON configuration for a solve + flow-analysis run. Relative paths
/// are resolved against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub observations: Vec<ObservationSpec>,

    pub sigma: f64,
    pub alpha: f64,
    pub time_steps: usize,
    pub max_gn_iters: usize,
    pub gn_cg_tolerance: f64,
    pub gn_cg_max_iters: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub stop_tolerance: f64,
    pub diffusion_tolerance: f64,
    pub baseline_alpha: f64,
    pub baseline_mode: bool,

    pub seed_quantile: f64,
    /// Streamline time step; `None` picks half a cell at the peak speed.
    pub streamline_step: Option<f64>,
    pub max_streamline_steps: usize,
    pub track_points: usize,
    /// QuickBundles distance threshold; `None` means four of the smallest
    /// cell widths.
    pub qb_threshold: Option<f64>,
    pub min_cluster_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SolverConfig::default();
        RunConfig {
            run_dir: PathBuf::new(),
            observations: Vec::new(),
            sigma: s.sigma,
            alpha: s.alpha,
            time_steps: s.time_steps,
            max_gn_iters: s.max_gn_iters,
            gn_cg_tolerance: s.gn_cg_tolerance,
            gn_cg_max_iters: s.gn_cg_max_iters,
            armijo: s.armijo,
            backtrack: s.backtrack,
            max_backtracks: s.max_backtracks,
            stop_tolerance: s.stop_tolerance,
            diffusion_tolerance: s.diffusion_tolerance,
            baseline_alpha: s.baseline_alpha,
            baseline_mode: s.baseline_mode,
            seed_quantile: DEFAULT_SEED_QUANTILE,
            streamline_step: None,
            max_streamline_steps: 10_000,
            track_points: DEFAULT_TRACK_POINTS,
            qb_threshold: None,
            min_cluster_size: 5,
        }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            sigma: self.sigma,
            alpha: self.alpha,
            time_steps: self.time_steps,
            max_gn_iters: self.max_gn_iters,
            gn_cg_tolerance: self.gn_cg_tolerance,
            gn_cg_max_iters: self.gn_cg_max_iters,
            armijo: self.armijo,
            backtrack: self.backtrack,
            max_backtracks: self.max_backtracks,
            stop_tolerance: self.stop_tolerance,
            diffusion_tolerance: self.diffusion_tolerance,
            baseline_alpha: self.baseline_alpha,
            baseline_mode: self.baseline_mode,
        }
    }

    /// Checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        if self.run_dir.as_os_str().is_empty() {
            return Err(config_error("run_dir", "required key is missing or empty"));
        }
        if self.observations.is_empty() {
            return Err(config_error("observations", "at least one observation is required"));
        }
        if !self.observations.iter().any(|o| o.time_index == 0) {
            return Err(config_error("observations", "an observation at time_index 0 is required"));
        }
        if let Some((i, o)) = self.observations.iter().enumerate().find(|(_, o)| o.time_index > self.time_steps) {
            return Err(config_error(
                &format!("observations[{i}].time_index"),
                format!("{} exceeds time_steps = {}", o.time_index, self.time_steps),
            ));
        }
        self.solver_config().validate().map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                let key = msg.split(' ').next().unwrap_or("").to_string();
                config_error(&key, msg)
            }
            other => other,
        })?;
        if !(self.seed_quantile > 0.0 && self.seed_quantile < 1.0) {
            return Err(config_error("seed_quantile", format!("{} not in (0, 1)", self.seed_quantile)));
        }
        if let Some(s) = self.streamline_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_error("streamline_step", format!("{s} must be > 0")));
            }
        }
        if let Some(t) = self.qb_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config_error("qb_threshold", format!("{t} must be > 0")));
            }
        }
        if self.track_points < 2 {
            return Err(config_error("track_points", "must be at least 2"));
        }
        if self.max_streamline_steps == 0 {
            return Err(config_error("max_streamline_steps", "must be at least 1"));
        }
        Ok(())
    }

    /// Make every path absolute, resolving relative ones against `base`.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let fix = |p: &mut PathBuf| -> Result<()> {
            if p.as_os_str().is_empty() {
                return Ok(());
            }
            let joined = base.join(&*p);
            *p = std::path::absolute(&joined).map_err(|e| Error::io(&joined, e))?;
            Ok(())
        };
        fix(&mut self.run_dir)?;
        for o in &mut self.observations {
            fix(&mut o.path)?;
            if let Some(w) = o.weight_path.as_mut() {
                fix(w)?;
            }
        }
        Ok(())
    }
}

/// Parse a config from JSON text without resolving paths. Errors name the
/// offending key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(&path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read, validate and path-resolve a run config.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    cfg.resolve_paths(base)?;
    Ok(cfg)
}

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

pub fn write_resolved_config(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.run_dir.join(RESOLVED_CONFIG);
    write_json(&path, cfg)?;
    Ok(path)
}
