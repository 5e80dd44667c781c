//! End-to-end orchestration: configuration, the simulate / track / evaluate /
//! calibrate commands, and their file outputs.
//!
//! Configuration is flat `section.key = value` text; every effective value
//! is echoed into the output directory so runs are self-describing. All
//! commands are deterministic for a fixed seed and config; wall-clock stage
//! runtimes go to their own file (`runtimes.txt`) so reports stay
//! byte-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::averaging::{
    augmented_rotation_averaging, chain_rotations, write_convergence_log, AveragingParams,
    MeasurementSet, RelativeEdge,
};
use crate::bundle::{
    bundle_adjust, trim_track_observations, write_bundle_log, write_star_directions, BaProblem,
    BundleParams,
};
use crate::calibration::{compose_solution, estimate_homography, factor_projection, solve_projection, CalibSolution};
use crate::catalog::{generate_catalog, load_catalog, write_catalog, StarCatalog, SyntheticCatalogConfig};
use crate::eval::{evaluate, write_per_frame_csv, EvaluationInputs, EvaluationReport};
use crate::frames::{
    build_event_images, extract_points_with_mode, mean_filter, select_frames, write_pgm,
    write_point_sets, FrameId, PointSet, PointsMode,
};
use crate::geometry::{
    read_attitude_file, write_attitude_file, AttitudeRecord, Intrinsics, Rotation, UnitVector3,
};
use crate::registration::{
    build_tracks, read_relative_rotations, relative_rotations, write_relative_rotations,
    write_tracks, IcpParams, RelativeRotation, StarTrack,
};
use crate::sim::{
    make_trajectory, read_event_file, simulate_events, write_event_file, Event, SimConfig,
};
use crate::star_id::{
    absolute_rotations, build_index, read_identification_report, write_identification_report,
    ExtractionParams, IdentifyParams,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("[{stage}] {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Catalog source: load a file or generate synthetically.
#[derive(Debug, Clone)]
pub struct CatalogSection {
    pub path: Option<PathBuf>,
    pub star_count: usize,
    pub mag_min: f64,
    pub mag_max: f64,
    pub density_exponent: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FramesSection {
    pub integration_ms: f64,
    pub epsilon1: f64,
    pub epsilon2: usize,
    pub points_mode: PointsMode,
    pub dump_pgm: bool,
}

#[derive(Debug, Clone)]
pub struct StarIdSection {
    /// Budget of selected frames submitted to identification (0 = all);
    /// evenly thinned. Absolute rotations are costly and a sparse set is
    /// enough to anchor the averaging gauge.
    pub max_selected: usize,
    pub quant_deg: f64,
    pub mag_limit: f64,
    pub cone_k: usize,
    pub verify_radius_px: f64,
    pub min_inliers: usize,
    pub max_triple_points: usize,
    pub side_match_tol_deg: f64,
    pub min_match_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct IcpSection {
    pub window: usize,
    pub trim_fraction: f64,
    pub max_iterations: usize,
    pub update_tol_rad: f64,
    /// Pixel radius for the post-ICP association that feeds track building.
    pub assoc_radius_px: f64,
    /// Reject pairs whose estimate jumps this far from the warm start.
    pub seed_gate_deg: f64,
}

#[derive(Debug, Clone)]
pub struct AveragingSection {
    pub alpha: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub update_tol_rad: f64,
}

#[derive(Debug, Clone)]
pub struct BundleSection {
    pub max_iterations: usize,
    pub cost_tol_rel: f64,
    pub gradient_tol: f64,
    /// Pre-adjustment observation trim: drop observations beyond this
    /// multiple of the median initialized residual (0 disables).
    pub obs_trim_factor: f64,
}

/// Full pipeline configuration. Defaults reproduce the reference-scale
/// experiment: 20° FOV, 45 s at 4°/s, 40 ms windows, ε₁ = 2, ε₂ = 50, W = 5.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    pub catalog: CatalogSection,
    pub frames: FramesSection,
    pub star_id: StarIdSection,
    pub icp: IcpSection,
    pub averaging: AveragingSection,
    pub bundle: BundleSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            catalog: CatalogSection {
                path: None,
                star_count: 3500,
                mag_min: 1.0,
                mag_max: 5.5,
                density_exponent: 0.0,
                seed: 1,
            },
            frames: FramesSection {
                integration_ms: 40.0,
                epsilon1: 2.0,
                epsilon2: 50,
                points_mode: PointsMode::Centroids,
                dump_pgm: false,
            },
            star_id: StarIdSection {
                max_selected: 8,
                quant_deg: 0.2,
                mag_limit: 3.6,
                cone_k: 12,
                verify_radius_px: 2.0,
                min_inliers: 4,
                max_triple_points: 8,
                side_match_tol_deg: 0.06,
                min_match_fraction: 0.5,
            },
            icp: IcpSection {
                window: 5,
                trim_fraction: 0.7,
                max_iterations: 50,
                update_tol_rad: 1e-6,
                assoc_radius_px: 1.5,
                seed_gate_deg: 2.0,
            },
            averaging: AveragingSection {
                alpha: 1.0,
                huber_delta: 0.1,
                max_iterations: 200,
                update_tol_rad: 1e-8,
            },
            bundle: BundleSection {
                max_iterations: 100,
                cost_tol_rel: 1e-10,
                gradient_tol: 1e-10,
                obs_trim_factor: 4.0,
            },
        }
    }
}

impl PipelineConfig {
    /// Number of event images the frame builder will produce.
    pub fn frame_count(&self) -> usize {
        ((self.sim.duration_s * 1e3) / self.frames.integration_ms).floor() as usize
    }

    /// Window-midpoint timestamps, seconds; the nominal frame times.
    pub fn frame_times_s(&self) -> Vec<f64> {
        let dt = self.frames.integration_ms * 1e-3;
        (1..=self.frame_count()).map(|i| (i as f64 - 0.5) * dt).collect()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.sim.intrinsics()
    }

    pub fn identify_params(&self) -> IdentifyParams {
        IdentifyParams {
            image_width: self.sim.width,
            image_height: self.sim.height,
            verify_radius_px: self.star_id.verify_radius_px,
            min_inliers: self.star_id.min_inliers,
            max_triple_points: self.star_id.max_triple_points,
            side_match_tol_deg: self.star_id.side_match_tol_deg,
            min_match_fraction: self.star_id.min_match_fraction,
        }
    }

    /// Parse `section.key = value` text; unknown keys and bad values are
    /// field-level errors.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected 'key = value'", idx + 1))
            })?;
            config.set(key.trim(), value.trim()).map_err(|msg| {
                PipelineError::Config(format!("line {}: {msg}", idx + 1))
            })?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| format!("{key}: invalid value {value:?} ({e})"))
        }
        match key {
            "sim.width" => self.sim.width = num(key, value)?,
            "sim.height" => self.sim.height = num(key, value)?,
            "sim.fov_deg" => self.sim.fov_deg = num(key, value)?,
            "sim.duration_s" => self.sim.duration_s = num(key, value)?,
            "sim.omega_deg_per_s" => self.sim.omega_deg_per_s = num(key, value)?,
            "sim.axis" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 3 {
                    return Err(format!("{key}: expected 'x,y,z'"));
                }
                let v: Result<Vec<f64>, String> =
                    parts.iter().map(|p| num::<f64>(key, p.trim())).collect();
                let v = v?;
                self.sim.axis = UnitVector3::from_components(v[0], v[1], v[2])
                    .map_err(|e| format!("{key}: {e}"))?;
            }
            "sim.initial_quaternion" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 4 {
                    return Err(format!("{key}: expected 'qw,qx,qy,qz'"));
                }
                let v: Result<Vec<f64>, String> =
                    parts.iter().map(|p| num::<f64>(key, p.trim())).collect();
                let v = v?;
                let q = nalgebra::UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
                    v[0], v[1], v[2], v[3],
                ));
                self.sim.initial_attitude = Rotation::from_quaternion(&q);
            }
            "sim.rho0" => self.sim.rate_model.rho0 = num(key, value)?,
            "sim.mag_ref" => self.sim.rate_model.mag_ref = num(key, value)?,
            "sim.speed_ref_px_per_s" => self.sim.rate_model.speed_ref_px_per_s = num(key, value)?,
            "sim.jitter_sigma_px" => self.sim.jitter_sigma_px = num(key, value)?,
            "sim.noise_rate_per_px_s" => self.sim.noise_rate_per_px_s = num(key, value)?,
            "sim.hot_pixel_count" => self.sim.hot_pixel_count = num(key, value)?,
            "sim.hot_pixel_rate_per_s" => self.sim.hot_pixel_rate_per_s = num(key, value)?,
            "sim.substep_s" => self.sim.substep_s = num(key, value)?,
            "sim.seed" => self.sim.seed = num(key, value)?,
            "catalog.path" => {
                self.catalog.path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "catalog.star_count" => self.catalog.star_count = num(key, value)?,
            "catalog.mag_min" => self.catalog.mag_min = num(key, value)?,
            "catalog.mag_max" => self.catalog.mag_max = num(key, value)?,
            "catalog.density_exponent" => self.catalog.density_exponent = num(key, value)?,
            "catalog.seed" => self.catalog.seed = num(key, value)?,
            "frames.integration_ms" => self.frames.integration_ms = num(key, value)?,
            "frames.epsilon1" => self.frames.epsilon1 = num(key, value)?,
            "frames.epsilon2" => self.frames.epsilon2 = num(key, value)?,
            "frames.points" => {
                self.frames.points_mode = match value {
                    "centroids" => PointsMode::Centroids,
                    "pixels" => PointsMode::Pixels,
                    other => return Err(format!("{key}: expected centroids|pixels, got {other:?}")),
                }
            }
            "frames.dump_pgm" => self.frames.dump_pgm = num(key, value)?,
            "star_id.max_selected" => self.star_id.max_selected = num(key, value)?,
            "star_id.quant_deg" => self.star_id.quant_deg = num(key, value)?,
            "star_id.mag_limit" => self.star_id.mag_limit = num(key, value)?,
            "star_id.cone_k" => self.star_id.cone_k = num(key, value)?,
            "star_id.verify_radius_px" => self.star_id.verify_radius_px = num(key, value)?,
            "star_id.min_inliers" => self.star_id.min_inliers = num(key, value)?,
            "star_id.max_triple_points" => self.star_id.max_triple_points = num(key, value)?,
            "star_id.side_match_tol_deg" => self.star_id.side_match_tol_deg = num(key, value)?,
            "star_id.min_match_fraction" => self.star_id.min_match_fraction = num(key, value)?,
            "icp.window" => self.icp.window = num(key, value)?,
            "icp.trim_fraction" => self.icp.trim_fraction = num(key, value)?,
            "icp.max_iterations" => self.icp.max_iterations = num(key, value)?,
            "icp.update_tol_rad" => self.icp.update_tol_rad = num(key, value)?,
            "icp.assoc_radius_px" => self.icp.assoc_radius_px = num(key, value)?,
            "icp.seed_gate_deg" => self.icp.seed_gate_deg = num(key, value)?,
            "averaging.alpha" => self.averaging.alpha = num(key, value)?,
            "averaging.huber_delta" => self.averaging.huber_delta = num(key, value)?,
            "averaging.max_iterations" => self.averaging.max_iterations = num(key, value)?,
            "averaging.update_tol_rad" => self.averaging.update_tol_rad = num(key, value)?,
            "bundle.max_iterations" => self.bundle.max_iterations = num(key, value)?,
            "bundle.cost_tol_rel" => self.bundle.cost_tol_rel = num(key, value)?,
            "bundle.gradient_tol" => self.bundle.gradient_tol = num(key, value)?,
            "bundle.obs_trim_factor" => self.bundle.obs_trim_factor = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Echo every effective value; parseable back into the same config.
    pub fn to_text(&self) -> String {
        let q = self.sim.initial_attitude.quaternion();
        let mut s = String::new();
        let _ = writeln!(s, "sim.width = {}", self.sim.width);
        let _ = writeln!(s, "sim.height = {}", self.sim.height);
        let _ = writeln!(s, "sim.fov_deg = {}", self.sim.fov_deg);
        let _ = writeln!(s, "sim.duration_s = {}", self.sim.duration_s);
        let _ = writeln!(s, "sim.omega_deg_per_s = {}", self.sim.omega_deg_per_s);
        let _ = writeln!(
            s,
            "sim.axis = {},{},{}",
            self.sim.axis.x(),
            self.sim.axis.y(),
            self.sim.axis.z()
        );
        let _ = writeln!(s, "sim.initial_quaternion = {},{},{},{}", q.w, q.i, q.j, q.k);
        let _ = writeln!(s, "sim.rho0 = {}", self.sim.rate_model.rho0);
        let _ = writeln!(s, "sim.mag_ref = {}", self.sim.rate_model.mag_ref);
        let _ = writeln!(
            s,
            "sim.speed_ref_px_per_s = {}",
            self.sim.rate_model.speed_ref_px_per_s
        );
        let _ = writeln!(s, "sim.jitter_sigma_px = {}", self.sim.jitter_sigma_px);
        let _ = writeln!(s, "sim.noise_rate_per_px_s = {}", self.sim.noise_rate_per_px_s);
        let _ = writeln!(s, "sim.hot_pixel_count = {}", self.sim.hot_pixel_count);
        let _ = writeln!(s, "sim.hot_pixel_rate_per_s = {}", self.sim.hot_pixel_rate_per_s);
        let _ = writeln!(s, "sim.substep_s = {}", self.sim.substep_s);
        let _ = writeln!(s, "sim.seed = {}", self.sim.seed);
        let _ = writeln!(
            s,
            "catalog.path = {}",
            self.catalog.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "catalog.star_count = {}", self.catalog.star_count);
        let _ = writeln!(s, "catalog.mag_min = {}", self.catalog.mag_min);
        let _ = writeln!(s, "catalog.mag_max = {}", self.catalog.mag_max);
        let _ = writeln!(s, "catalog.density_exponent = {}", self.catalog.density_exponent);
        let _ = writeln!(s, "catalog.seed = {}", self.catalog.seed);
        let _ = writeln!(s, "frames.integration_ms = {}", self.frames.integration_ms);
        let _ = writeln!(s, "frames.epsilon1 = {}", self.frames.epsilon1);
        let _ = writeln!(s, "frames.epsilon2 = {}", self.frames.epsilon2);
        let _ = writeln!(
            s,
            "frames.points = {}",
            match self.frames.points_mode {
                PointsMode::Centroids => "centroids",
                PointsMode::Pixels => "pixels",
            }
        );
        let _ = writeln!(s, "frames.dump_pgm = {}", self.frames.dump_pgm);
        let _ = writeln!(s, "star_id.max_selected = {}", self.star_id.max_selected);
        let _ = writeln!(s, "star_id.quant_deg = {}", self.star_id.quant_deg);
        let _ = writeln!(s, "star_id.mag_limit = {}", self.star_id.mag_limit);
        let _ = writeln!(s, "star_id.cone_k = {}", self.star_id.cone_k);
        let _ = writeln!(s, "star_id.verify_radius_px = {}", self.star_id.verify_radius_px);
        let _ = writeln!(s, "star_id.min_inliers = {}", self.star_id.min_inliers);
        let _ = writeln!(s, "star_id.max_triple_points = {}", self.star_id.max_triple_points);
        let _ = writeln!(s, "star_id.side_match_tol_deg = {}", self.star_id.side_match_tol_deg);
        let _ = writeln!(s, "star_id.min_match_fraction = {}", self.star_id.min_match_fraction);
        let _ = writeln!(s, "icp.window = {}", self.icp.window);
        let _ = writeln!(s, "icp.trim_fraction = {}", self.icp.trim_fraction);
        let _ = writeln!(s, "icp.max_iterations = {}", self.icp.max_iterations);
        let _ = writeln!(s, "icp.update_tol_rad = {}", self.icp.update_tol_rad);
        let _ = writeln!(s, "icp.assoc_radius_px = {}", self.icp.assoc_radius_px);
        let _ = writeln!(s, "icp.seed_gate_deg = {}", self.icp.seed_gate_deg);
        let _ = writeln!(s, "averaging.alpha = {}", self.averaging.alpha);
        let _ = writeln!(s, "averaging.huber_delta = {}", self.averaging.huber_delta);
        let _ = writeln!(s, "averaging.max_iterations = {}", self.averaging.max_iterations);
        let _ = writeln!(s, "averaging.update_tol_rad = {}", self.averaging.update_tol_rad);
        let _ = writeln!(s, "bundle.max_iterations = {}", self.bundle.max_iterations);
        let _ = writeln!(s, "bundle.cost_tol_rel = {}", self.bundle.cost_tol_rel);
        let _ = writeln!(s, "bundle.gradient_tol = {}", self.bundle.gradient_tol);
        let _ = writeln!(s, "bundle.obs_trim_factor = {}", self.bundle.obs_trim_factor);
        s
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub struct SimulateOutputs {
    pub events: Vec<Event>,
    pub catalog: StarCatalog,
    pub ground_truth: Vec<AttitudeRecord>,
}

/// Resolve the catalog from the config: load when a path is set, otherwise
/// generate synthetically.
pub fn resolve_catalog(config: &PipelineConfig) -> Result<StarCatalog, PipelineError> {
    let catalog = match &config.catalog.path {
        Some(path) => load_catalog(path).map_err(stage_err("catalog"))?,
        None => generate_catalog(&SyntheticCatalogConfig {
            star_count: config.catalog.star_count,
            mag_min: config.catalog.mag_min,
            mag_max: config.catalog.mag_max,
            density_exponent: config.catalog.density_exponent,
            seed: config.catalog.seed,
        }),
    };
    if catalog.is_empty() {
        return Err(PipelineError::Stage {
            stage: "catalog",
            message: "catalog is empty".into(),
        });
    }
    Ok(catalog)
}

/// Generate the event stream plus ground truth and write them to `out`.
pub fn cmd_simulate(config: &PipelineConfig, out: &Path) -> Result<SimulateOutputs, PipelineError> {
    std::fs::create_dir_all(out)?;
    let catalog = resolve_catalog(config)?;
    let sim = simulate_events(&catalog, &config.sim).map_err(stage_err("simulate"))?;

    let truth = make_trajectory(&config.sim, &config.frame_times_s());
    let ground_truth: Vec<AttitudeRecord> = truth
        .rotations
        .iter()
        .enumerate()
        .map(|(i, &rotation)| AttitudeRecord { frame: i + 1, rotation })
        .collect();

    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("events.csv"))?);
    write_event_file(&mut f, &sim.events).map_err(stage_err("simulate"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("catalog.csv"))?);
    write_catalog(&mut f, &catalog).map_err(stage_err("simulate"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("gt_attitude.txt"))?);
    write_attitude_file(&mut f, &ground_truth).map_err(stage_err("simulate"))?;

    let mut meta = String::new();
    let _ = writeln!(meta, "# simulation metadata");
    let _ = writeln!(meta, "events_total = {}", sim.events.len());
    let _ = writeln!(meta, "events_star = {}", sim.metadata.star_events);
    let _ = writeln!(meta, "events_noise = {}", sim.metadata.noise_events);
    let _ = writeln!(meta, "events_hot_pixel = {}", sim.metadata.hot_pixel_events);
    let _ = writeln!(meta, "warning_no_stars_in_fov = {}", sim.metadata.no_stars_in_fov);
    let _ = writeln!(meta, "frame_count = {}", config.frame_count());
    let _ = writeln!(meta, "\n# effective configuration\n{}", config.to_text());
    std::fs::write(out.join("metadata.txt"), meta)?;
    std::fs::write(out.join("config_used.txt"), config.to_text())?;

    Ok(SimulateOutputs {
        events: sim.events,
        catalog,
        ground_truth,
    })
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct StageRuntimes {
    pub image_generation_s: f64,
    pub measurement_extraction_s: f64,
    pub optimization_s: f64,
    pub total_s: f64,
}

pub struct TrackOutputs {
    pub chained: Vec<AttitudeRecord>,
    pub averaged: Vec<AttitudeRecord>,
    pub bundled: Vec<AttitudeRecord>,
    pub identification: Vec<crate::star_id::IdentificationRecord>,
    pub relatives: Vec<RelativeRotation>,
    pub tracks: Vec<StarTrack>,
    pub excluded_frames: Vec<FrameId>,
    pub gauge_free: bool,
    pub runtimes: StageRuntimes,
}

/// Best global rotation `C` (right-multiplied onto every attitude) aligning
/// the series to the measured absolute rotations, by orthogonal Procrustes
/// over `Σ R_kᵀ R̃_k` with one re-fit after trimming gross outliers.
///
/// The bundle objective is gauge-invariant, so its output gauge is whatever
/// the anchor frame carried; the absolute measurements are the only
/// information that pins it.
fn align_gauge_to_absolutes(
    records: &mut [AttitudeRecord],
    absolutes: &BTreeMap<FrameId, Rotation>,
) {
    let by_frame: BTreeMap<FrameId, Rotation> =
        records.iter().map(|r| (r.frame, r.rotation)).collect();
    let fit = |keep: &[FrameId]| -> Option<Rotation> {
        let mut pairs = Vec::new();
        for k in keep {
            let (r, meas) = (by_frame.get(k)?, absolutes.get(k)?);
            let prod = r.transpose().compose(meas);
            for j in 0..3 {
                let col = prod.matrix().column(j).into_owned();
                let e = nalgebra::Vector3::from_fn(|i, _| if i == j { 1.0 } else { 0.0 });
                pairs.push((
                    UnitVector3::new(col).ok()?,
                    UnitVector3::new(e).ok()?,
                ));
            }
        }
        crate::geometry::fit_rotation(&pairs).ok()
    };
    let frames: Vec<FrameId> = absolutes
        .keys()
        .filter(|k| by_frame.contains_key(k))
        .copied()
        .collect();
    if frames.is_empty() {
        return;
    }
    let Some(c) = fit(&frames) else { return };
    // One trim pass against gross absolute-rotation outliers.
    let mut residuals: Vec<(FrameId, f64)> = frames
        .iter()
        .map(|k| {
            let aligned = by_frame[k].compose(&c);
            (*k, crate::geometry::angular_error_deg(&aligned, &absolutes[k]))
        })
        .collect();
    residuals.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let median = residuals[residuals.len() / 2].1;
    let cutoff = (5.0 * median).max(1.0);
    let kept: Vec<FrameId> = residuals
        .iter()
        .filter(|(_, e)| *e <= cutoff)
        .map(|(k, _)| *k)
        .collect();
    let c = if kept.len() < frames.len() && !kept.is_empty() {
        fit(&kept).unwrap_or(c)
    } else {
        c
    };
    for rec in records.iter_mut() {
        rec.rotation = rec.rotation.compose(&c).renormalized();
    }
}

/// Evenly thin `selected` down to `cap` frames (0 keeps everything).
fn thin_selection(selected: &[FrameId], cap: usize) -> Vec<FrameId> {
    if cap == 0 || selected.len() <= cap {
        return selected.to_vec();
    }
    if cap == 1 {
        return vec![selected[0]];
    }
    let mut out: Vec<FrameId> = (0..cap)
        .map(|i| {
            let idx = (i as f64 * (selected.len() - 1) as f64 / (cap - 1) as f64).round() as usize;
            selected[idx]
        })
        .collect();
    out.dedup();
    out
}

/// Largest connected component over the relative-rotation graph; ties go to
/// the earlier segment.
fn largest_component(m: usize, relatives: &[RelativeRotation]) -> Vec<FrameId> {
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for r in relatives {
        let (a, b) = (find(&mut parent, r.from - 1), find(&mut parent, r.to - 1));
        if a != b {
            parent[a] = b;
        }
    }
    let mut components: BTreeMap<usize, Vec<FrameId>> = BTreeMap::new();
    for node in 0..m {
        let root = find(&mut parent, node);
        components.entry(root).or_default().push(node + 1);
    }
    components
        .into_values()
        .filter(|frames| frames.len() > 1)
        .max_by_key(|frames| (frames.len(), std::cmp::Reverse(frames[0])))
        .unwrap_or_default()
}

/// Run the full measurement and optimization pipeline over an event stream.
///
/// Stages run in order (frames → star identification → registration →
/// averaging → bundle adjustment); intermediate dumps are written as soon as
/// each stage finishes so failures retain partial outputs.
pub fn cmd_track(
    events: &[Event],
    catalog: &StarCatalog,
    config: &PipelineConfig,
    out: &Path,
) -> Result<TrackOutputs, PipelineError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config_used.txt"), config.to_text())?;
    let mut warnings: Vec<String> = Vec::new();
    let t_total = Instant::now();
    let k = config.intrinsics();

    // Stage 1: event images and point sets.
    let t_stage = Instant::now();
    let duration_us = (config.sim.duration_s * 1e6).round() as i64;
    let images = build_event_images(
        events,
        0,
        duration_us,
        config.frames.integration_ms,
        config.sim.width,
        config.sim.height,
    );
    let m = images.len();
    let selected = select_frames(&images, config.frames.epsilon1, config.frames.epsilon2);
    // Absolute rotations are used sparingly: thin the selection to the
    // identification budget, evenly across the sequence.
    let selected = thin_selection(&selected, config.star_id.max_selected);
    // Registration runs on the configured mode; identification and star
    // tracks always use centroid points (star-level geometry).
    let mut point_sets: Vec<PointSet> = Vec::with_capacity(images.len());
    let mut centroid_sets: Vec<PointSet> = Vec::with_capacity(images.len());
    for img in &images {
        let filtered = mean_filter(img);
        let centroids = extract_points_with_mode(
            &filtered,
            config.frames.epsilon1,
            &k,
            img.frame,
            PointsMode::Centroids,
        );
        let points = match config.frames.points_mode {
            PointsMode::Centroids => centroids.clone(),
            PointsMode::Pixels => extract_points_with_mode(
                &filtered,
                config.frames.epsilon1,
                &k,
                img.frame,
                PointsMode::Pixels,
            ),
        };
        point_sets.push(points);
        centroid_sets.push(centroids);
    }
    if config.frames.dump_pgm {
        let dir = out.join("frames_debug");
        std::fs::create_dir_all(&dir)?;
        for img in &images {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("frame_{:05}.pgm", img.frame)))?);
            write_pgm(&mut f, img)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("point_sets.csv"))?);
    write_point_sets(&mut f, &point_sets)?;
    let image_generation_s = t_stage.elapsed().as_secs_f64();

    // Stage 2: star identification on the selected frames.
    let t_stage = Instant::now();
    let index = build_index(
        catalog,
        config.sim.fov_deg,
        config.star_id.mag_limit,
        config.star_id.quant_deg,
        config.star_id.cone_k,
    );
    let extraction = ExtractionParams {
        epsilon1: config.frames.epsilon1,
        mode: PointsMode::Centroids,
    };
    let absolute = absolute_rotations(
        &images,
        &selected,
        &index,
        &k,
        &extraction,
        &config.identify_params(),
    );
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("identification_report.csv"))?);
    write_identification_report(&mut f, &absolute.records)?;

    // Stage 3: relative rotations and tracks.
    let relatives = relative_rotations(
        &point_sets,
        config.icp.window,
        config.icp.trim_fraction,
        &IcpParams {
            max_iterations: config.icp.max_iterations,
            update_tol_rad: config.icp.update_tol_rad,
            seed_gate_deg: config.icp.seed_gate_deg,
        },
    );
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("relative_rotations.csv"))?);
    write_relative_rotations(&mut f, &relatives)?;
    // Track building uses the full association under each consecutive
    // rotation (the trimmed inlier subset would fragment the tracks), over
    // the centroid sets so tracks are star-level regardless of the
    // registration points mode.
    let assoc_chordal = config.icp.assoc_radius_px / k.fx;
    let track_joins: Vec<RelativeRotation> = relatives
        .iter()
        .filter(|r| r.to == r.from + 1)
        .map(|r| {
            let src = &centroid_sets[r.from - 1];
            let tgt = &centroid_sets[r.to - 1];
            RelativeRotation {
                from: r.from,
                to: r.to,
                rotation: r.rotation,
                residual: r.residual,
                inliers: crate::registration::associate_points(src, tgt, &r.rotation, assoc_chordal),
            }
        })
        .collect();
    let tracks = build_tracks(&track_joins, &centroid_sets);
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("tracks.csv"))?);
    write_tracks(&mut f, &tracks)?;
    let measurement_extraction_s = t_stage.elapsed().as_secs_f64();

    if relatives.is_empty() && absolute.rotations.is_empty() {
        return Err(PipelineError::Stage {
            stage: "star_id",
            message: format!(
                "frame selection produced {} frames and no measurements survive; \
                 nothing to optimize",
                selected.len()
            ),
        });
    }
    if relatives.is_empty() {
        return Err(PipelineError::Stage {
            stage: "registration",
            message: "no relative rotations could be estimated".into(),
        });
    }

    // Stage 4: restrict to the largest connected component and average.
    let t_stage = Instant::now();
    let lc = largest_component(m, &relatives);
    let excluded_frames: Vec<FrameId> =
        (1..=m).filter(|f| !lc.contains(f)).collect();
    if !excluded_frames.is_empty() {
        warnings.push(format!(
            "{} frames outside the largest connected component were excluded: {:?}",
            excluded_frames.len(),
            excluded_frames
        ));
    }
    let in_lc = |f: FrameId| lc.binary_search(&f).is_ok();
    // Compressed frame indices keep the solver's band tight.
    let to_compressed: BTreeMap<FrameId, usize> =
        lc.iter().enumerate().map(|(i, &f)| (f, i + 1)).collect();
    let rel_edges: Vec<RelativeEdge> = relatives
        .iter()
        .filter(|r| in_lc(r.from) && in_lc(r.to))
        .map(|r| RelativeEdge {
            from: to_compressed[&r.from],
            to: to_compressed[&r.to],
            rotation: r.rotation,
        })
        .collect();
    let mut abs_edges: Vec<(usize, Rotation)> = absolute
        .rotations
        .iter()
        .filter(|(f, _)| in_lc(**f))
        .map(|(f, r)| (to_compressed[f], *r))
        .collect();
    let mut gauge_free = false;
    if abs_edges.is_empty() {
        // No anchors: chain from identity, flagged. The output is only
        // defined up to a global rotation.
        gauge_free = true;
        warnings.push("no absolute rotations: output is gauge-free (anchored at identity)".into());
        abs_edges.push((1, Rotation::identity()));
    }
    let ms = MeasurementSet::new(lc.len(), rel_edges, abs_edges, config.averaging.alpha)
        .map_err(stage_err("averaging"))?;

    let chained_c = chain_rotations(&ms).map_err(stage_err("averaging"))?;
    let avg = augmented_rotation_averaging(
        &ms,
        &AveragingParams {
            huber_delta: config.averaging.huber_delta,
            max_iterations: config.averaging.max_iterations,
            update_tol_rad: config.averaging.update_tol_rad,
        },
    )
    .map_err(stage_err("averaging"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("averaging_log.csv"))?);
    write_convergence_log(&mut f, &avg.log)?;

    let to_records = |rots: &[Rotation]| -> Vec<AttitudeRecord> {
        lc.iter()
            .zip(rots.iter())
            .map(|(&frame, &rotation)| AttitudeRecord { frame, rotation })
            .collect()
    };
    let chained = to_records(&chained_c);
    let averaged = to_records(&avg.attitudes);
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("attitude_chained.txt"))?);
    write_attitude_file(&mut f, &chained).map_err(stage_err("averaging"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("attitude_averaged.txt"))?);
    write_attitude_file(&mut f, &averaged).map_err(stage_err("averaging"))?;

    // Stage 5: rotation-only bundle adjustment over the tracks.
    let averaged_map: BTreeMap<FrameId, Rotation> = averaged
        .iter()
        .map(|r| (r.frame, r.rotation))
        .collect();
    let usable_tracks: Vec<StarTrack> = tracks
        .iter()
        .filter(|t| t.observations.iter().all(|o| in_lc(o.frame)))
        .cloned()
        .collect();
    let usable_tracks =
        trim_track_observations(&averaged_map, &usable_tracks, config.bundle.obs_trim_factor)
            .map_err(stage_err("bundle"))?;
    let mut bundled = averaged.clone();
    match BaProblem::from_tracks(&averaged_map, &usable_tracks) {
        Ok(problem) => {
            let anchor_frame = lc[0];
            let problem = problem
                .gauge_anchor(anchor_frame, averaged_map[&anchor_frame])
                .map_err(stage_err("bundle"))?;
            let result = bundle_adjust(
                &problem,
                &BundleParams {
                    max_iterations: config.bundle.max_iterations,
                    cost_tol_rel: config.bundle.cost_tol_rel,
                    gradient_tol: config.bundle.gradient_tol,
                    initial_lambda: 1e-6,
                },
            )
            .map_err(stage_err("bundle"))?;
            let refined: BTreeMap<FrameId, Rotation> = result
                .problem
                .frame_ids
                .iter()
                .zip(result.problem.attitudes.iter())
                .map(|(&f, &r)| (f, r))
                .collect();
            for rec in bundled.iter_mut() {
                if let Some(r) = refined.get(&rec.frame) {
                    rec.rotation = *r;
                }
            }
            let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("bundle_log.csv"))?);
            write_bundle_log(&mut f, &result.log)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("star_directions.csv"))?);
            write_star_directions(&mut f, &result)?;
            if !gauge_free {
                align_gauge_to_absolutes(&mut bundled, &absolute.rotations);
            }
        }
        Err(err) => {
            warnings.push(format!(
                "bundle adjustment skipped ({err}); bundled output equals averaged"
            ));
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("attitude_bundled.txt"))?);
    write_attitude_file(&mut f, &bundled).map_err(stage_err("bundle"))?;
    let optimization_s = t_stage.elapsed().as_secs_f64();

    let runtimes = StageRuntimes {
        image_generation_s,
        measurement_extraction_s,
        optimization_s,
        total_s: t_total.elapsed().as_secs_f64(),
    };
    let mut rt = String::new();
    let _ = writeln!(rt, "image_generation_s = {}", runtimes.image_generation_s);
    let _ = writeln!(rt, "measurement_extraction_s = {}", runtimes.measurement_extraction_s);
    let _ = writeln!(rt, "optimization_s = {}", runtimes.optimization_s);
    let _ = writeln!(rt, "total_s = {}", runtimes.total_s);
    std::fs::write(out.join("runtimes.txt"), rt)?;
    if !warnings.is_empty() {
        std::fs::write(out.join("warnings.txt"), warnings.join("\n") + "\n")?;
    }

    Ok(TrackOutputs {
        chained,
        averaged,
        bundled,
        identification: absolute.records,
        relatives,
        tracks,
        excluded_frames,
        gauge_free,
        runtimes,
    })
}

/// Convenience wrapper reading the event and catalog files first.
pub fn cmd_track_files(
    events_path: &Path,
    catalog_path: &Path,
    config: &PipelineConfig,
    out: &Path,
) -> Result<TrackOutputs, PipelineError> {
    let events = read_event_file(events_path).map_err(stage_err("frames"))?;
    let catalog = load_catalog(catalog_path).map_err(stage_err("catalog"))?;
    cmd_track(&events, &catalog, config, out)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Evaluate a track run directory against a ground-truth attitude file and
/// write `report.json` plus `per_frame_errors.csv`.
pub fn cmd_evaluate(
    run_dir: &Path,
    truth_path: &Path,
    out: &Path,
) -> Result<EvaluationReport, PipelineError> {
    std::fs::create_dir_all(out)?;
    let truth_records = read_attitude_file(truth_path).map_err(stage_err("evaluate"))?;
    let truth: BTreeMap<FrameId, Rotation> = truth_records
        .iter()
        .map(|r| (r.frame, r.rotation))
        .collect();

    let read_opt = |name: &str| -> Result<Option<Vec<AttitudeRecord>>, PipelineError> {
        let path = run_dir.join(name);
        if path.exists() {
            Ok(Some(read_attitude_file(&path).map_err(stage_err("evaluate"))?))
        } else {
            Ok(None)
        }
    };
    let chained = read_opt("attitude_chained.txt")?;
    let averaged = read_opt("attitude_averaged.txt")?;
    let bundled = read_opt("attitude_bundled.txt")?;
    let identification = {
        let path = run_dir.join("identification_report.csv");
        if path.exists() {
            Some(read_identification_report(&path)?)
        } else {
            None
        }
    };
    let relatives = {
        let path = run_dir.join("relative_rotations.csv");
        if path.exists() {
            Some(read_relative_rotations(&path)?)
        } else {
            None
        }
    };

    let report = evaluate(&EvaluationInputs {
        truth: &truth,
        chained: chained.as_deref(),
        averaged: averaged.as_deref(),
        bundled: bundled.as_deref(),
        identification: identification.as_deref(),
        relatives: relatives.as_deref(),
        // Wall-clock numbers stay out of the serialized report; see
        // runtimes.txt in the run directory.
        runtimes_s: None,
    })
    .map_err(stage_err("evaluate"))?;

    let json = serde_json::to_string_pretty(&report).map_err(stage_err("evaluate"))?;
    std::fs::write(out.join("report.json"), json + "\n")?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("per_frame_errors.csv"))?);
    write_per_frame_csv(&mut f, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn parse_csv_rows(path: &Path, fields: usize) -> Result<Vec<Vec<f64>>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| PipelineError::Stage {
            stage: "calibrate",
            message: format!("{} line {}: {e}", path.display(), idx + 1),
        })?;
        if row.len() != fields {
            return Err(PipelineError::Stage {
                stage: "calibrate",
                message: format!(
                    "{} line {}: expected {fields} fields, got {}",
                    path.display(),
                    idx + 1,
                    row.len()
                ),
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Run the virtual-telescope calibration from pair files and write the
/// solution as a text block.
///
/// `pairs_2d2d` rows are `u,v,u',v'` (screen to sensor), `pairs_2d3d` rows
/// are `u,v,X,Y,Z` (screen to inertial direction), and `k_ev` is one line
/// `fx,fy,cx,cy,skew`.
pub fn cmd_calibrate(
    pairs_2d2d: &Path,
    pairs_2d3d: &Path,
    k_ev_path: &Path,
    out: &Path,
) -> Result<CalibSolution, PipelineError> {
    std::fs::create_dir_all(out)?;
    let rows = parse_csv_rows(pairs_2d2d, 4)?;
    let h_pairs: Vec<([f64; 2], [f64; 2])> = rows
        .iter()
        .map(|r| ([r[0], r[1]], [r[2], r[3]]))
        .collect();
    let rows = parse_csv_rows(pairs_2d3d, 5)?;
    let p_pairs: Result<Vec<([f64; 2], UnitVector3)>, PipelineError> = rows
        .iter()
        .map(|r| {
            UnitVector3::from_components(r[2], r[3], r[4])
                .map(|d| ([r[0], r[1]], d))
                .map_err(|e| PipelineError::Stage {
                    stage: "calibrate",
                    message: format!("bad direction in {}: {e}", pairs_2d3d.display()),
                })
        })
        .collect();
    let p_pairs = p_pairs?;
    let kev_rows = parse_csv_rows(k_ev_path, 5)?;
    let kev = kev_rows.first().ok_or_else(|| PipelineError::Stage {
        stage: "calibrate",
        message: format!("{} is empty", k_ev_path.display()),
    })?;
    let k_ev = Intrinsics::new(kev[0], kev[1], kev[2], kev[3], kev[4])
        .map_err(stage_err("calibrate"))?;

    // The measured screen-to-sensor homography includes the event-camera
    // intrinsics (pairs are in event pixels); peel K_ev off to get H_sc.
    let h_measured = estimate_homography(&h_pairs).map_err(stage_err("calibrate"))?;
    let k_ev_inv = k_ev
        .matrix()
        .try_inverse()
        .expect("valid intrinsics are invertible");
    let mut h_sc = k_ev_inv * h_measured;
    let scale = h_sc[(2, 2)];
    if scale.abs() < 1e-12 * h_sc.norm() {
        return Err(PipelineError::Stage {
            stage: "calibrate",
            message: "screen homography has a vanishing (3,3) entry after removing K_ev".into(),
        });
    }
    h_sc /= scale;
    let p = solve_projection(&p_pairs).map_err(stage_err("calibrate"))?;
    let (k_te, rotation) = factor_projection(&p).map_err(stage_err("calibrate"))?;
    let solution = compose_solution(&k_ev.matrix(), h_sc, k_te, rotation);

    let q = solution.rotation.quaternion();
    let fmt_mat = |m: &nalgebra::Matrix3<f64>| {
        (0..3)
            .map(|r| format!("{},{},{}", m[(r, 0)], m[(r, 1)], m[(r, 2)]))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut text = String::new();
    let _ = writeln!(text, "# virtual telescope calibration");
    let _ = writeln!(text, "[h_sc]");
    let _ = writeln!(text, "{}", fmt_mat(&solution.h_sc));
    let _ = writeln!(
        text,
        "[k_te]\nfx,fy,cx,cy,skew\n{},{},{},{},{}",
        solution.k_te.fx, solution.k_te.fy, solution.k_te.cx, solution.k_te.cy, solution.k_te.skew
    );
    let _ = writeln!(text, "[rotation_quaternion]\n{},{},{},{}", q.w, q.i, q.j, q.k);
    let _ = writeln!(text, "[k_composite]");
    let _ = writeln!(text, "{}", fmt_mat(&solution.k_composite));
    std::fs::write(out.join("calibration.txt"), text)?;
    Ok(solution)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_experiment() {
        let config = PipelineConfig::default();
        assert_eq!(config.sim.fov_deg, 20.0);
        assert_eq!(config.sim.duration_s, 45.0);
        assert_eq!(config.sim.omega_deg_per_s, 4.0);
        assert_eq!(config.frames.integration_ms, 40.0);
        assert_eq!(config.frames.epsilon1, 2.0);
        assert_eq!(config.frames.epsilon2, 50);
        assert_eq!(config.icp.window, 5);
        assert_eq!(config.frame_count(), 1125);
    }

    #[test]
    fn config_text_roundtrip() {
        let mut config = PipelineConfig::default();
        config.sim.seed = 99;
        config.icp.trim_fraction = 0.8;
        config.frames.points_mode = PointsMode::Pixels;
        let text = config.to_text();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn config_rejects_unknown_and_invalid() {
        assert!(matches!(
            PipelineConfig::parse("bogus.key = 1"),
            Err(PipelineError::Config(msg)) if msg.contains("unknown key")
        ));
        assert!(matches!(
            PipelineConfig::parse("sim.width = banana"),
            Err(PipelineError::Config(msg)) if msg.contains("sim.width")
        ));
        // Comments and blank lines pass through.
        let config = PipelineConfig::parse("# comment\n\nsim.seed = 5 # trailing\n").unwrap();
        assert_eq!(config.sim.seed, 5);
    }

    #[test]
    fn frame_times_are_window_midpoints() {
        let config = PipelineConfig::default();
        let times = config.frame_times_s();
        assert_eq!(times.len(), 1125);
        assert!((times[0] - 0.020).abs() < 1e-12);
        assert!((times[1124] - 44.980).abs() < 1e-12);
    }

    #[test]
    fn one_second_duration_gives_25_windows() {
        let mut config = PipelineConfig::default();
        config.sim.duration_s = 1.0;
        assert_eq!(config.frame_count(), 25);
    }
}
