//! Synthetic event streams of a rotating star field with analytic ground
//! truth.
//!
//! The camera follows a constant-rate rotation `R*(t) = rot(axis, ω·t)·R*(0)`
//! (axis expressed in the camera frame at t = 0), so ground-truth attitudes
//! are exact at any time. Star events are a brightness- and motion-modulated
//! Poisson process evaluated on fixed substeps:
//!
//! ```text
//! rate = ρ₀ · 10^(−0.4·(mag − mag_ref)) · min(speed_px_per_s / s_ref, 1)
//! ```
//!
//! so a stationary projection emits nothing and brighter stars emit more.
//! Each event lands on the star's exact projected position at the event time
//! plus Gaussian position jitter clamped to half a pixel per axis, then
//! rounds to the pixel grid; polarity is + on the leading edge of the trail
//! and − on the trailing edge. Spurious events are uniform Poisson noise per
//! pixel; hot pixels fire at their own rate.
//!
//! Every random draw comes from its own counter-derived ChaCha stream keyed
//! by (seed, domain, star, substep), so simulating disjoint time spans in
//! any order reproduces the single-threaded stream byte for byte.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::catalog::StarCatalog;
use crate::geometry::{project, Intrinsics, Rotation, UnitVector3};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("event file parse error at line {line}: {msg}")]
    EventParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One asynchronous sensor event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds since stream start.
    pub t_us: i64,
    pub x: u16,
    pub y: u16,
    /// `true` = positive polarity.
    pub polarity: bool,
}

/// Ground-truth attitude trajectory: continuous-time parameterization plus
/// rotations sampled at `times_s`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: Rotation,
    pub axis: UnitVector3,
    pub omega_deg_per_s: f64,
    pub times_s: Vec<f64>,
    pub rotations: Vec<Rotation>,
}

impl Trajectory {
    /// Exact attitude at time `t` (seconds): `rot(axis, ω·t) ∘ R(0)`.
    pub fn attitude_at(&self, t_s: f64) -> Rotation {
        Rotation::from_axis_angle(&self.axis, (self.omega_deg_per_s * t_s).to_radians())
            .compose(&self.initial)
    }
}

/// Star event-rate model parameters.
#[derive(Debug, Clone, Copy)]
pub struct StarRateModel {
    /// Events per second for a star of magnitude `mag_ref` at full speed.
    pub rho0: f64,
    pub mag_ref: f64,
    /// Image-plane speed (px/s) at which the rate saturates.
    pub speed_ref_px_per_s: f64,
}

impl Default for StarRateModel {
    fn default() -> Self {
        Self {
            rho0: 1300.0,
            mag_ref: 2.5,
            speed_ref_px_per_s: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub duration_s: f64,
    pub omega_deg_per_s: f64,
    pub axis: UnitVector3,
    pub initial_attitude: Rotation,
    pub rate_model: StarRateModel,
    /// Std-dev of the per-event position jitter in pixels (clamped to ±0.5).
    pub jitter_sigma_px: f64,
    /// Spurious event rate per pixel per second.
    pub noise_rate_per_px_s: f64,
    pub hot_pixel_count: u32,
    pub hot_pixel_rate_per_s: f64,
    pub substep_s: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 240,
            height: 180,
            fov_deg: 20.0,
            duration_s: 45.0,
            omega_deg_per_s: 4.0,
            axis: UnitVector3::from_components(0.0, 1.0, 0.0).unwrap(),
            initial_attitude: Rotation::identity(),
            rate_model: StarRateModel::default(),
            jitter_sigma_px: 0.5,
            noise_rate_per_px_s: 0.05,
            hot_pixel_count: 2,
            hot_pixel_rate_per_s: 400.0,
            substep_s: 1e-3,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration_s > 0.0) {
            return Err(SimError::InvalidConfig("duration must be positive".into()));
        }
        if !(self.substep_s > 0.0) {
            return Err(SimError::InvalidConfig("substep must be positive".into()));
        }
        for (name, v) in [
            ("rho0", self.rate_model.rho0),
            ("noise_rate", self.noise_rate_per_px_s),
            ("hot_pixel_rate", self.hot_pixel_rate_per_s),
            ("jitter_sigma", self.jitter_sigma_px),
        ] {
            if !(v >= 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.width == 0 || self.height == 0 {
            return Err(SimError::InvalidConfig("sensor dimensions must be nonzero".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.fov_deg)
            .expect("positive fov yields valid intrinsics")
    }
}

#[derive(Debug, Clone)]
pub struct SimMetadata {
    /// Set when no catalog star entered the field of view for the whole run.
    pub no_stars_in_fov: bool,
    pub star_events: usize,
    pub noise_events: usize,
    pub hot_pixel_events: usize,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub events: Vec<Event>,
    pub trajectory: Trajectory,
    pub metadata: SimMetadata,
}

/// Exact ground-truth rotations at the requested times.
pub fn make_trajectory(config: &SimConfig, times_s: &[f64]) -> Trajectory {
    let base = Trajectory {
        initial: config.initial_attitude,
        axis: config.axis,
        omega_deg_per_s: config.omega_deg_per_s,
        times_s: Vec::new(),
        rotations: Vec::new(),
    };
    let rotations = times_s.iter().map(|&t| base.attitude_at(t)).collect();
    Trajectory {
        times_s: times_s.to_vec(),
        rotations,
        ..base
    }
}

// RNG stream domains for counter-based splitting.
const DOMAIN_STAR: u64 = 1;
const DOMAIN_NOISE: u64 = 2;
const DOMAIN_HOT: u64 = 3;
const DOMAIN_HOT_POS: u64 = 4;

fn stream_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}

/// Generate the event stream and ground-truth trajectory for `config`.
///
/// Deterministic given the seed; events are time-sorted with in-range
/// coordinates. With zero noise every event lies within one pixel
/// (Chebyshev) of some star's exact projection at the event timestamp.
pub fn simulate_events(catalog: &StarCatalog, config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let k = config.intrinsics();
    let trajectory = make_trajectory(config, &[]);
    let duration_us = (config.duration_s * 1e6).round() as i64;
    let dt = config.substep_s;
    let n_substeps = (config.duration_s / dt).round() as u64;

    let mut events: Vec<Event> = Vec::new();
    let mut star_events = 0usize;
    let mut any_star_seen = false;

    // Angle from boresight to the image corner, for coarse visibility culling.
    let half_diag_deg = {
        let corner = crate::geometry::backproject([0.0, 0.0], &k);
        let center = UnitVector3::from_components(0.0, 0.0, 1.0).unwrap();
        corner.angle_to(&center)
    };
    // Candidate refresh cadence: every `coarse` substeps, with a margin that
    // covers the motion across the block.
    let coarse = 100u64.min(n_substeps.max(1));
    let margin_deg = config.omega_deg_per_s.abs() * dt * coarse as f64 + 1.0;

    let normal = Normal::new(0.0, config.jitter_sigma_px.max(1e-12)).unwrap();
    let mut candidates: Vec<usize> = Vec::new();

    for k_step in 0..n_substeps {
        let t0 = k_step as f64 * dt;
        let t1 = t0 + dt;
        if k_step % coarse == 0 {
            let r_mid = trajectory.attitude_at(t0 + 0.5 * dt * coarse.min(n_substeps - k_step) as f64);
            let boresight = r_mid.transpose().apply(
                &UnitVector3::from_components(0.0, 0.0, 1.0).unwrap(),
            );
            candidates = catalog
                .stars()
                .iter()
                .enumerate()
                .filter(|(_, s)| s.direction.angle_to(&boresight) <= half_diag_deg + margin_deg)
                .map(|(i, _)| i)
                .collect();
        }
        if candidates.is_empty() {
            continue;
        }
        let r0 = trajectory.attitude_at(t0);
        let r1 = trajectory.attitude_at(t1);
        for &star_idx in &candidates {
            let star = &catalog.stars()[star_idx];
            let p0 = match project(&k, &r0, &star.direction) {
                Some(p) => p,
                None => continue,
            };
            let p1 = match project(&k, &r1, &star.direction) {
                Some(p) => p,
                None => continue,
            };
            let mid = [(p0[0] + p1[0]) / 2.0, (p0[1] + p1[1]) / 2.0];
            if !in_bounds(mid, config.width, config.height) {
                continue;
            }
            any_star_seen = true;
            let speed = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt() / dt;
            let brightness = 10f64.powf(-0.4 * (star.magnitude - config.rate_model.mag_ref));
            let speed_factor = (speed / config.rate_model.speed_ref_px_per_s).min(1.0);
            let rate = config.rate_model.rho0 * brightness * speed_factor;
            if rate <= 0.0 {
                continue;
            }
            let mut rng = stream_rng(config.seed, DOMAIN_STAR, star_idx as u64, k_step);
            let n = poisson_count(&mut rng, rate * dt);
            let vx = p1[0] - p0[0];
            let vy = p1[1] - p0[1];
            for _ in 0..n {
                let u: f64 = rng.random_range(0.0..1.0);
                let t = t0 + u * dt;
                let pos = match project(&k, &trajectory.attitude_at(t), &star.direction) {
                    Some(p) => p,
                    None => continue,
                };
                let jx = (normal.sample(&mut rng)).clamp(-0.5, 0.5);
                let jy = (normal.sample(&mut rng)).clamp(-0.5, 0.5);
                let px = (pos[0] + jx).round();
                let py = (pos[1] + jy).round();
                if px < 0.0 || py < 0.0 || px >= config.width as f64 || py >= config.height as f64
                {
                    continue;
                }
                let t_us = ((t * 1e6) as i64).min(duration_us - 1);
                // Leading edge of the trail fires +, trailing edge −.
                let polarity = jx * vx + jy * vy >= 0.0;
                events.push(Event {
                    t_us,
                    x: px as u16,
                    y: py as u16,
                    polarity,
                });
                star_events += 1;
            }
        }
    }

    // Spurious noise: homogeneous Poisson over pixels and time.
    let mut noise_events = 0usize;
    {
        let n_pix = config.width as f64 * config.height as f64;
        let mean = config.noise_rate_per_px_s * n_pix * config.duration_s;
        let mut rng = stream_rng(config.seed, DOMAIN_NOISE, 0, 0);
        let n = poisson_count(&mut rng, mean);
        for _ in 0..n {
            events.push(Event {
                t_us: rng.random_range(0..duration_us),
                x: rng.random_range(0..config.width) as u16,
                y: rng.random_range(0..config.height) as u16,
                polarity: rng.random_bool(0.5),
            });
            noise_events += 1;
        }
    }

    // Hot pixels: fixed positions firing at their own rate.
    let mut hot_pixel_events = 0usize;
    {
        let mut pos_rng = stream_rng(config.seed, DOMAIN_HOT_POS, 0, 0);
        for h in 0..config.hot_pixel_count {
            let x = pos_rng.random_range(0..config.width) as u16;
            let y = pos_rng.random_range(0..config.height) as u16;
            let mut rng = stream_rng(config.seed, DOMAIN_HOT, h as u64, 0);
            let n = poisson_count(&mut rng, config.hot_pixel_rate_per_s * config.duration_s);
            for _ in 0..n {
                events.push(Event {
                    t_us: rng.random_range(0..duration_us),
                    x,
                    y,
                    polarity: rng.random_bool(0.5),
                });
                hot_pixel_events += 1;
            }
        }
    }

    // Total order independent of generation order, so span-merged simulation
    // reproduces this exactly.
    events.sort_by_key(|e| (e.t_us, e.x, e.y, e.polarity));

    let no_stars_in_fov = !any_star_seen && !catalog.is_empty();
    if no_stars_in_fov {
        log::warn!("no catalog star entered the field of view during the simulation");
    }
    Ok(SimOutput {
        events,
        trajectory,
        metadata: SimMetadata {
            no_stars_in_fov,
            star_events,
            noise_events,
            hot_pixel_events,
        },
    })
}

fn in_bounds(p: [f64; 2], width: u32, height: u32) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] < width as f64 && p[1] < height as f64
}

// ---------------------------------------------------------------------------
// Event stream files
// ---------------------------------------------------------------------------

/// Write the `t_us,x,y,p` table, `p ∈ {1,0}` for `{+,−}`.
pub fn write_event_file<W: Write>(mut w: W, events: &[Event]) -> Result<(), SimError> {
    writeln!(w, "t_us,x,y,p")?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.t_us, e.x, e.y, u8::from(e.polarity))?;
    }
    Ok(())
}

pub fn read_event_file(path: &Path) -> Result<Vec<Event>, SimError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    let mut seen_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if !seen_header {
            if t != "t_us,x,y,p" {
                return Err(SimError::EventParse {
                    line: lineno,
                    msg: format!("expected header 't_us,x,y,p', got {t:?}"),
                });
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 4 {
            return Err(SimError::EventParse {
                line: lineno,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| SimError::EventParse { line: lineno, msg };
        out.push(Event {
            t_us: fields[0]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad t_us: {e}")))?,
            x: fields[1]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad x: {e}")))?,
            y: fields[2]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad y: {e}")))?,
            polarity: match fields[3].trim() {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(format!("bad polarity {other:?}"))),
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, CatalogStar, SyntheticCatalogConfig};
    use crate::geometry::angular_error_deg;

    fn empty_catalog() -> StarCatalog {
        StarCatalog::new(Vec::new()).unwrap()
    }

    #[test]
    fn trajectory_examples() {
        let config = SimConfig::default();
        // omega = 0: constant attitude.
        let mut c0 = config.clone();
        c0.omega_deg_per_s = 0.0;
        let tr = make_trajectory(&c0, &[0.0, 10.0, 45.0]);
        for r in &tr.rotations {
            assert!(angular_error_deg(r, &c0.initial_attitude) < 1e-12);
        }
        // 4 deg/s for 45 s = 180 deg, for 10 s = 40 deg.
        let tr = make_trajectory(&config, &[0.0, 10.0, 45.0]);
        assert!((angular_error_deg(&tr.rotations[2], &tr.rotations[0]) - 180.0).abs() < 1e-9);
        assert!((angular_error_deg(&tr.rotations[1], &tr.rotations[0]) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn empty_catalog_silent_sensor() {
        let mut config = SimConfig::default();
        config.duration_s = 2.0;
        config.noise_rate_per_px_s = 0.0;
        config.hot_pixel_count = 0;
        let out = simulate_events(&empty_catalog(), &config).unwrap();
        assert!(out.events.is_empty());
    }

    #[test]
    fn stationary_stars_emit_nothing() {
        let mut config = SimConfig::default();
        config.duration_s = 2.0;
        config.omega_deg_per_s = 0.0;
        config.noise_rate_per_px_s = 0.0;
        config.hot_pixel_count = 0;
        let catalog = generate_catalog(&SyntheticCatalogConfig {
            star_count: 500,
            seed: 4,
            ..Default::default()
        });
        let out = simulate_events(&catalog, &config).unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.metadata.star_events, 0);
    }

    #[test]
    fn spurious_count_within_three_sigma() {
        let mut config = SimConfig::default();
        config.noise_rate_per_px_s = 0.1;
        config.hot_pixel_count = 0;
        config.seed = 17;
        let out = simulate_events(&empty_catalog(), &config).unwrap();
        let mean: f64 = 240.0 * 180.0 * 0.1 * 45.0;
        assert!((mean - 194_400.0).abs() < 1e-9);
        let sigma = mean.sqrt();
        let n = out.events.len() as f64;
        assert!(
            (n - mean).abs() <= 3.0 * sigma,
            "count {n} outside 3 sigma of {mean}"
        );
    }

    #[test]
    fn doubling_noise_rate_doubles_count() {
        let mut totals = [0f64; 2];
        for (slot, rate) in [(0usize, 0.02f64), (1, 0.04)] {
            for seed in 0..5u64 {
                let mut config = SimConfig::default();
                config.duration_s = 5.0;
                config.noise_rate_per_px_s = rate;
                config.hot_pixel_count = 0;
                config.seed = 100 + seed;
                let out = simulate_events(&empty_catalog(), &config).unwrap();
                totals[slot] += out.events.len() as f64;
            }
        }
        let mean1: f64 = 240.0 * 180.0 * 0.02 * 5.0 * 5.0;
        let sigma = (2.0 * mean1).sqrt() * 2.0;
        assert!(
            (totals[1] - 2.0 * totals[0]).abs() < 3.0 * sigma,
            "doubling violated: {totals:?}"
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let catalog = generate_catalog(&SyntheticCatalogConfig {
            star_count: 800,
            seed: 5,
            ..Default::default()
        });
        let mut config = SimConfig::default();
        config.duration_s = 1.5;
        config.seed = 42;
        let a = simulate_events(&catalog, &config).unwrap();
        let b = simulate_events(&catalog, &config).unwrap();
        assert_eq!(a.events, b.events);
        let mut fa = Vec::new();
        write_event_file(&mut fa, &a.events).unwrap();
        let mut fb = Vec::new();
        write_event_file(&mut fb, &b.events).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn events_sorted_and_in_range() {
        let catalog = generate_catalog(&SyntheticCatalogConfig {
            star_count: 2000,
            seed: 6,
            ..Default::default()
        });
        let mut config = SimConfig::default();
        config.duration_s = 2.0;
        let out = simulate_events(&catalog, &config).unwrap();
        assert!(!out.events.is_empty());
        let duration_us = 2_000_000;
        for w in out.events.windows(2) {
            assert!(w[0].t_us <= w[1].t_us);
        }
        for e in &out.events {
            assert!(e.t_us >= 0 && e.t_us < duration_us);
            assert!((e.x as u32) < config.width && (e.y as u32) < config.height);
        }
    }

    #[test]
    fn noiseless_events_stay_on_star_trails() {
        let catalog = generate_catalog(&SyntheticCatalogConfig {
            star_count: 2000,
            seed: 7,
            ..Default::default()
        });
        let mut config = SimConfig::default();
        config.duration_s = 1.0;
        config.noise_rate_per_px_s = 0.0;
        config.hot_pixel_count = 0;
        let out = simulate_events(&catalog, &config).unwrap();
        assert!(out.events.len() > 100, "want a meaningful sample");
        let k = config.intrinsics();
        for e in &out.events {
            let t = e.t_us as f64 * 1e-6;
            let r = out.trajectory.attitude_at(t);
            let near = catalog.stars().iter().any(|s| {
                project(&k, &r, &s.direction).is_some_and(|p| {
                    (p[0] - e.x as f64).abs() <= 1.0 + 1e-9
                        && (p[1] - e.y as f64).abs() <= 1.0 + 1e-9
                })
            });
            assert!(near, "event {e:?} off every star trail");
        }
    }

    #[test]
    fn no_star_warning_flag() {
        // One star pointed away from the initial boresight, no rotation.
        let star = CatalogStar {
            id: 1,
            direction: UnitVector3::from_components(0.0, 0.0, -1.0).unwrap(),
            magnitude: 1.0,
        };
        let catalog = StarCatalog::new(vec![star]).unwrap();
        let mut config = SimConfig::default();
        config.duration_s = 1.0;
        config.omega_deg_per_s = 0.0;
        config.noise_rate_per_px_s = 0.0;
        config.hot_pixel_count = 0;
        let out = simulate_events(&catalog, &config).unwrap();
        assert!(out.metadata.no_stars_in_fov);
        assert!(out.events.is_empty());
    }

    #[test]
    fn event_file_roundtrip() {
        let events = vec![
            Event { t_us: 0, x: 1, y: 2, polarity: true },
            Event { t_us: 17, x: 239, y: 179, polarity: false },
        ];
        let mut buf = Vec::new();
        write_event_file(&mut buf, &events).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(read_event_file(&path).unwrap(), events);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut config = SimConfig::default();
        config.duration_s = 0.0;
        assert!(simulate_events(&empty_catalog(), &config).is_err());
        let mut config = SimConfig::default();
        config.noise_rate_per_px_s = -1.0;
        assert!(simulate_events(&empty_catalog(), &config).is_err());
    }
}
