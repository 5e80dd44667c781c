//! Inertial star catalog: loading, synthesis and cone queries.
//!
//! The on-disk format is a flat text table with header `id,ra_deg,dec_deg,mag`
//! and one star per row. Right ascension / declination convert to unit
//! vectors as `X = (cos δ cos α, cos δ sin α, sin δ)`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::UnitVector3;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate star id {id} at line {line}")]
    DuplicateId { id: u32, line: usize },
    #[error("star {id}: {field} = {value} out of range (ra in [0,360), dec in [-90,90])")]
    OutOfRange { id: u32, field: &'static str, value: f64 },
    #[error("catalog is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One catalog entry. Smaller magnitude is brighter.
#[derive(Debug, Clone, Copy)]
pub struct CatalogStar {
    pub id: u32,
    pub direction: UnitVector3,
    pub magnitude: f64,
}

/// Immutable star catalog, ordered by strictly increasing id.
#[derive(Debug, Clone)]
pub struct StarCatalog {
    stars: Vec<CatalogStar>,
}

impl StarCatalog {
    /// Build from a list of stars; sorts by id and rejects duplicates.
    ///
    /// An empty catalog is a valid value (the simulator accepts one); the
    /// pipeline rejects it before running.
    pub fn new(mut stars: Vec<CatalogStar>) -> Result<Self, CatalogError> {
        stars.sort_by_key(|s| s.id);
        for w in stars.windows(2) {
            if w[0].id == w[1].id {
                return Err(CatalogError::DuplicateId { id: w[0].id, line: 0 });
            }
        }
        Ok(Self { stars })
    }

    pub fn stars(&self) -> &[CatalogStar] {
        &self.stars
    }

    pub fn len(&self) -> usize {
        self.stars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stars.is_empty()
    }

    pub fn by_id(&self, id: u32) -> Option<&CatalogStar> {
        self.stars
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.stars[i])
    }

    /// All stars within `radius_deg` of `center` and at most `mag_limit`
    /// bright, sorted by magnitude ascending (ties by id).
    ///
    /// Linear scan; it is the reference any spatial index must match.
    pub fn cone_query(
        &self,
        center: &UnitVector3,
        radius_deg: f64,
        mag_limit: f64,
    ) -> Vec<CatalogStar> {
        let cos_r = radius_deg.to_radians().cos();
        let mut out: Vec<CatalogStar> = self
            .stars
            .iter()
            .filter(|s| {
                s.magnitude <= mag_limit
                    && s.direction.as_vector().dot(center.as_vector()) >= cos_r
            })
            .copied()
            .collect();
        out.sort_by(|a, b| {
            a.magnitude
                .partial_cmp(&b.magnitude)
                .unwrap()
                .then(a.id.cmp(&b.id))
        });
        out
    }
}

/// Parse the `id,ra_deg,dec_deg,mag` table.
pub fn load_catalog(path: &Path) -> Result<StarCatalog, CatalogError> {
    let file = std::fs::File::open(path)?;
    read_catalog(std::io::BufReader::new(file))
}

pub fn read_catalog<R: BufRead>(reader: R) -> Result<StarCatalog, CatalogError> {
    let mut stars = Vec::new();
    let mut seen_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !seen_header {
            if trimmed.replace(' ', "") != "id,ra_deg,dec_deg,mag" {
                return Err(CatalogError::Parse {
                    line: lineno,
                    msg: format!("expected header 'id,ra_deg,dec_deg,mag', got {trimmed:?}"),
                });
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(CatalogError::Parse {
                line: lineno,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let id: u32 = fields[0].trim().parse().map_err(|e| CatalogError::Parse {
            line: lineno,
            msg: format!("bad id {:?}: {e}", fields[0]),
        })?;
        let num = |i: usize, name: &'static str| -> Result<f64, CatalogError> {
            fields[i].trim().parse().map_err(|e| CatalogError::Parse {
                line: lineno,
                msg: format!("bad {name} {:?}: {e}", fields[i]),
            })
        };
        let ra = num(1, "ra_deg")?;
        let dec = num(2, "dec_deg")?;
        let mag = num(3, "mag")?;
        if !(0.0..360.0).contains(&ra) {
            return Err(CatalogError::OutOfRange { id, field: "ra_deg", value: ra });
        }
        if !(-90.0..=90.0).contains(&dec) {
            return Err(CatalogError::OutOfRange { id, field: "dec_deg", value: dec });
        }
        if stars.iter().any(|s: &CatalogStar| s.id == id) {
            return Err(CatalogError::DuplicateId { id, line: lineno });
        }
        stars.push(CatalogStar {
            id,
            direction: radec_to_direction(ra, dec),
            magnitude: mag,
        });
    }
    if stars.is_empty() {
        return Err(CatalogError::Empty);
    }
    StarCatalog::new(stars)
}

pub fn write_catalog<W: Write>(mut w: W, catalog: &StarCatalog) -> Result<(), CatalogError> {
    writeln!(w, "id,ra_deg,dec_deg,mag")?;
    for s in catalog.stars() {
        let (ra, dec) = direction_to_radec(&s.direction);
        writeln!(w, "{},{},{},{}", s.id, ra, dec, s.magnitude)?;
    }
    Ok(())
}

pub fn radec_to_direction(ra_deg: f64, dec_deg: f64) -> UnitVector3 {
    let (ra, dec) = (ra_deg.to_radians(), dec_deg.to_radians());
    UnitVector3::from_components(dec.cos() * ra.cos(), dec.cos() * ra.sin(), dec.sin())
        .expect("trig direction is unit")
}

pub fn direction_to_radec(dir: &UnitVector3) -> (f64, f64) {
    let mut ra = dir.y().atan2(dir.x()).to_degrees();
    if ra < 0.0 {
        ra += 360.0;
    }
    if ra >= 360.0 {
        ra = 0.0;
    }
    let dec = dir.z().clamp(-1.0, 1.0).asin().to_degrees();
    (ra, dec)
}

/// Parameters for the synthetic catalog generator.
#[derive(Debug, Clone)]
pub struct SyntheticCatalogConfig {
    pub star_count: usize,
    pub mag_min: f64,
    pub mag_max: f64,
    /// Magnitude density exponent: counts grow as `10^(exponent · m)`,
    /// so positive values skew faint like the real sky; 0 is uniform.
    pub density_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticCatalogConfig {
    fn default() -> Self {
        Self {
            star_count: 3500,
            mag_min: 1.0,
            mag_max: 5.5,
            density_exponent: 0.0,
            seed: 1,
        }
    }
}

/// Uniformly random directions on the sphere with magnitudes drawn from the
/// configured distribution; deterministic per seed.
pub fn generate_catalog(config: &SyntheticCatalogConfig) -> StarCatalog {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ca7a106);
    let (m0, m1, beta) = (config.mag_min, config.mag_max, config.density_exponent);
    let sample_magnitude = |u: f64| -> f64 {
        if beta.abs() < 1e-12 {
            m0 + u * (m1 - m0)
        } else {
            // Inverse CDF of a density proportional to 10^(beta m).
            let (a, b) = (10f64.powf(beta * m0), 10f64.powf(beta * m1));
            (a + u * (b - a)).log10() / beta
        }
    };
    let stars = (0..config.star_count)
        .map(|i| {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let u: f64 = rng.random_range(0.0..1.0);
            CatalogStar {
                id: i as u32 + 1,
                direction: UnitVector3::from_components(r * phi.cos(), r * phi.sin(), z)
                    .expect("unit by construction"),
                magnitude: sample_magnitude(u),
            }
        })
        .collect();
    StarCatalog::new(stars).expect("generator emits unique increasing ids")
}
