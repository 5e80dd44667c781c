//! Star identification and absolute rotation measurements.
//!
//! Identification is hypothesize-and-verify over a triangle hash:
//! the index stores quantized descriptors (the two smaller angular side
//! lengths of a star triple) for all brightest-K-per-cone catalog triples
//! with pairwise separation within the field of view. At query time the
//! brightest point triples are looked up, every side-consistent candidate
//! yields a rotation hypothesis through Wahba's problem on three pairs, and
//! the hypothesis matching the most catalog stars to extracted points (1-1,
//! within a pixel radius) is kept when it clears the inlier floor.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use thiserror::Error;

use crate::catalog::{CatalogStar, StarCatalog};
use crate::frames::{extract_points_with_mode, mean_filter, EventImage, FrameId, PointSet, PointsMode};
use crate::geometry::{
    backproject, fit_rotation, project, GeometryError, Intrinsics, Rotation, UnitVector3,
};

#[derive(Debug, Error)]
pub enum IdentifyError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("no hypothesis passed verification")]
    NoVerifiedHypothesis,
    #[error("need at least 2 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One verified 2D-3D match.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub point: [f64; 2],
    pub ray: UnitVector3,
    pub star_id: u32,
    pub catalog_direction: UnitVector3,
}

/// Hash index over catalog star triples.
///
/// Also carries the bright-star subset it was built from, so verification is
/// self-contained.
#[derive(Debug, Clone)]
pub struct TriangleHashIndex {
    stars: Vec<CatalogStar>,
    buckets: HashMap<(u32, u32), Vec<[u32; 3]>>,
    pub fov_deg: f64,
    pub mag_limit: f64,
    pub quant_deg: f64,
}

impl TriangleHashIndex {
    pub fn stars(&self) -> &[CatalogStar] {
        &self.stars
    }

    pub fn triple_count(&self) -> usize {
        self.buckets.values().map(|v| v.len()).sum()
    }

    pub fn key_count(&self) -> usize {
        self.buckets.len()
    }

    /// Quantized key for sorted side lengths (`a <= b` are the two smaller).
    pub fn key_for(&self, a_deg: f64, b_deg: f64) -> (u32, u32) {
        (
            (a_deg / self.quant_deg).floor() as u32,
            (b_deg / self.quant_deg).floor() as u32,
        )
    }

    pub fn bucket(&self, key: (u32, u32)) -> &[[u32; 3]] {
        self.buckets.get(&key).map_or(&[], |v| v.as_slice())
    }
}

/// Sorted pairwise angular side lengths of three directions, ascending,
/// with `perm[k]` = index (0..3) of the vertex opposite side `k`.
fn triangle_sides(dirs: [&UnitVector3; 3]) -> ([f64; 3], [usize; 3]) {
    // side opposite vertex 0 is (1,2), etc.
    let mut sides = [
        (dirs[1].angle_to(dirs[2]), 0usize),
        (dirs[0].angle_to(dirs[2]), 1),
        (dirs[0].angle_to(dirs[1]), 2),
    ];
    sides.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (
        [sides[0].0, sides[1].0, sides[2].0],
        [sides[0].1, sides[1].1, sides[2].1],
    )
}

/// Build the triangle index: for every bright star, take the brightest
/// `cone_k` stars within `fov_deg / 2` of it and enumerate their triples
/// (half the field of view, so cone populations stay close to `cone_k` and
/// compact observed triples are reliably covered). Every qualifying triple
/// is stored under exactly one key.
pub fn build_index(
    catalog: &StarCatalog,
    fov_deg: f64,
    mag_limit: f64,
    quant_deg: f64,
    cone_k: usize,
) -> TriangleHashIndex {
    let stars: Vec<CatalogStar> = catalog
        .stars()
        .iter()
        .filter(|s| s.magnitude <= mag_limit)
        .copied()
        .collect();

    let cone_radius = fov_deg / 2.0;
    let mut unique: HashSet<[u32; 3]> = HashSet::new();
    for center in &stars {
        // Brightest-K within the cone, brightness ties broken by id.
        let mut neighbors: Vec<(f64, u32, usize)> = stars
            .iter()
            .enumerate()
            .filter(|(_, s)| s.direction.angle_to(&center.direction) <= cone_radius)
            .map(|(i, s)| (s.magnitude, s.id, i))
            .collect();
        neighbors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        neighbors.truncate(cone_k);
        let idxs: Vec<usize> = neighbors.iter().map(|&(_, _, i)| i).collect();
        for a in 0..idxs.len() {
            for b in a + 1..idxs.len() {
                for c in b + 1..idxs.len() {
                    let (ia, ib, ic) = (idxs[a], idxs[b], idxs[c]);
                    let ok = stars[ia].direction.angle_to(&stars[ib].direction) <= fov_deg
                        && stars[ia].direction.angle_to(&stars[ic].direction) <= fov_deg
                        && stars[ib].direction.angle_to(&stars[ic].direction) <= fov_deg;
                    if ok {
                        let mut t = [ia as u32, ib as u32, ic as u32];
                        t.sort_unstable();
                        unique.insert(t);
                    }
                }
            }
        }
    }

    let mut triples: Vec<[u32; 3]> = unique.into_iter().collect();
    triples.sort_unstable();

    let mut index = TriangleHashIndex {
        stars,
        buckets: HashMap::new(),
        fov_deg,
        mag_limit,
        quant_deg,
    };
    for t in triples {
        let dirs = [
            &index.stars[t[0] as usize].direction,
            &index.stars[t[1] as usize].direction,
            &index.stars[t[2] as usize].direction,
        ];
        let (sides, _) = triangle_sides(dirs);
        let key = index.key_for(sides[0], sides[1]);
        index.buckets.entry(key).or_default().push(t);
    }
    index
}

/// Tuning knobs for [`identify`].
#[derive(Debug, Clone)]
pub struct IdentifyParams {
    pub image_width: u32,
    pub image_height: u32,
    /// Pixel radius for counting a projected catalog star as matched.
    pub verify_radius_px: f64,
    /// Minimum verified matches for a hypothesis to be accepted.
    pub min_inliers: usize,
    /// Hypothesis triples come from the brightest points only.
    pub max_triple_points: usize,
    /// Per-side agreement between observed and catalog triangles.
    pub side_match_tol_deg: f64,
    /// Minimum fraction of visible index stars that must match a point.
    /// Coincidental hypotheses rarely explain more than a third of the
    /// field; real ones explain most of it.
    pub min_match_fraction: f64,
}

impl Default for IdentifyParams {
    fn default() -> Self {
        Self {
            image_width: 240,
            image_height: 180,
            verify_radius_px: 2.0,
            min_inliers: 4,
            max_triple_points: 8,
            side_match_tol_deg: 0.06,
            min_match_fraction: 0.5,
        }
    }
}

/// Greedy unique 1-1 matching between projected catalog stars and points.
/// Returns `(point_idx, star_idx)` pairs, closest matches first.
fn match_projections(
    projections: &[(usize, [f64; 2])],
    points: &[[f64; 2]],
    radius_px: f64,
) -> Vec<(usize, usize)> {
    let r2 = radius_px * radius_px;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        for (slot, &(si, proj)) in projections.iter().enumerate() {
            let d2 = (p[0] - proj[0]).powi(2) + (p[1] - proj[1]).powi(2);
            if d2 <= r2 {
                candidates.push((d2, pi, slot));
                let _ = si;
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut used_point = vec![false; points.len()];
    let mut used_slot = vec![false; projections.len()];
    let mut out = Vec::new();
    for (_, pi, slot) in candidates {
        if !used_point[pi] && !used_slot[slot] {
            used_point[pi] = true;
            used_slot[slot] = true;
            out.push((pi, projections[slot].0));
        }
    }
    out
}

/// Project all index stars visible under `r` into the image.
fn visible_projections(
    index: &TriangleHashIndex,
    r: &Rotation,
    k: &Intrinsics,
    params: &IdentifyParams,
) -> Vec<(usize, [f64; 2])> {
    let boresight = r
        .transpose()
        .apply(&UnitVector3::from_components(0.0, 0.0, 1.0).unwrap());
    let half_diag = {
        let corner = backproject([0.0, 0.0], k);
        corner.angle_to(&UnitVector3::from_components(0.0, 0.0, 1.0).unwrap())
    } + 0.5;
    let mut out = Vec::new();
    for (i, s) in index.stars.iter().enumerate() {
        if s.direction.angle_to(&boresight) > half_diag {
            continue;
        }
        if let Some(p) = project(k, r, &s.direction) {
            if p[0] >= 0.0
                && p[1] >= 0.0
                && p[0] < params.image_width as f64
                && p[1] < params.image_height as f64
            {
                out.push((i, p));
            }
        }
    }
    out
}

/// Identify catalog stars among `points` and return the verified
/// correspondence set of the best hypothesis.
pub fn identify(
    points: &PointSet,
    index: &TriangleHashIndex,
    k: &Intrinsics,
    params: &IdentifyParams,
) -> Result<Vec<Correspondence>, IdentifyError> {
    if points.len() < 3 {
        return Err(IdentifyError::TooFewPoints(points.len()));
    }

    // Brightest points first (component weight descending, ties by index).
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points.weights[b]
            .partial_cmp(&points.weights[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(params.max_triple_points);

    let tol = params.side_match_tol_deg;
    // (match count, visible index stars, hypothesis, matches)
    let mut best: Option<(usize, usize, Rotation, Vec<(usize, usize)>)> = None;

    for a in 0..order.len() {
        for b in a + 1..order.len() {
            for c in b + 1..order.len() {
                let tri = [order[a], order[b], order[c]];
                let obs_dirs = [&points.rays[tri[0]], &points.rays[tri[1]], &points.rays[tri[2]]];
                let (obs_sides, obs_perm) = triangle_sides(obs_dirs);

                // The two smaller sides may straddle a quantization boundary.
                let mut keys = Vec::with_capacity(4);
                for da in [-tol, tol] {
                    for db in [-tol, tol] {
                        let key = index.key_for(
                            (obs_sides[0] + da).max(0.0),
                            (obs_sides[1] + db).max(0.0),
                        );
                        if !keys.contains(&key) {
                            keys.push(key);
                        }
                    }
                }

                for key in keys {
                    for cand in index.bucket(key) {
                        let cat_dirs = [
                            &index.stars[cand[0] as usize].direction,
                            &index.stars[cand[1] as usize].direction,
                            &index.stars[cand[2] as usize].direction,
                        ];
                        let (cat_sides, cat_perm) = triangle_sides(cat_dirs);
                        if (0..3).any(|i| (obs_sides[i] - cat_sides[i]).abs() > tol) {
                            continue;
                        }
                        // Pair vertices by opposite-side rank.
                        let mut pairs = Vec::with_capacity(3);
                        for s in 0..3 {
                            let p_idx = tri[obs_perm[s]];
                            let c_idx = cand[cat_perm[s]] as usize;
                            pairs.push((points.rays[p_idx], index.stars[c_idx].direction));
                        }
                        let hyp = match fit_rotation(&pairs) {
                            Ok(r) => r,
                            Err(_) => continue,
                        };
                        // Founding residual gate before paying for full
                        // verification.
                        let mut founding_ok = true;
                        for s in 0..3 {
                            let p_idx = tri[obs_perm[s]];
                            let c_idx = cand[cat_perm[s]] as usize;
                            match project(k, &hyp, &index.stars[c_idx].direction) {
                                Some(proj) => {
                                    let p = points.points[p_idx];
                                    let d2 = (p[0] - proj[0]).powi(2) + (p[1] - proj[1]).powi(2);
                                    if d2 > params.verify_radius_px.powi(2) {
                                        founding_ok = false;
                                        break;
                                    }
                                }
                                None => {
                                    founding_ok = false;
                                    break;
                                }
                            }
                        }
                        if !founding_ok {
                            continue;
                        }

                        let projections = visible_projections(index, &hyp, k, params);
                        let matches = match_projections(
                            &projections,
                            &points.points,
                            params.verify_radius_px,
                        );
                        let better = match &best {
                            Some((count, _, _, _)) => matches.len() > *count,
                            None => true,
                        };
                        if better {
                            best = Some((matches.len(), projections.len(), hyp, matches));
                        }
                    }
                }
            }
        }
    }

    let (count, visible, _hyp, matches) = best.ok_or(IdentifyError::NoVerifiedHypothesis)?;
    let accept = |count: usize, visible: usize| {
        count >= params.min_inliers
            && (count as f64) >= params.min_match_fraction * visible as f64
    };
    if !accept(count, visible) {
        return Err(IdentifyError::NoVerifiedHypothesis);
    }

    // Refit on all inliers and re-verify once; keep the refit result when it
    // holds up (it nearly always gains matches).
    let build = |matches: &[(usize, usize)]| -> Vec<Correspondence> {
        matches
            .iter()
            .map(|&(pi, si)| Correspondence {
                point: points.points[pi],
                ray: points.rays[pi],
                star_id: index.stars[si].id,
                catalog_direction: index.stars[si].direction,
            })
            .collect()
    };
    let refit_pairs: Vec<(UnitVector3, UnitVector3)> = matches
        .iter()
        .map(|&(pi, si)| (points.rays[pi], index.stars[si].direction))
        .collect();
    if let Ok(refit) = fit_rotation(&refit_pairs) {
        let projections = visible_projections(index, &refit, k, params);
        let rematches = match_projections(&projections, &points.points, params.verify_radius_px);
        if accept(rematches.len(), projections.len()) {
            return Ok(build(&rematches));
        }
    }
    Ok(build(&matches))
}

/// Wahba's problem: rotation minimizing `Σ ‖ray_p − R·dir_p‖²` over SO(3),
/// solved via SVD of the attitude profile matrix.
pub fn wahba_svd(correspondences: &[Correspondence]) -> Result<Rotation, IdentifyError> {
    if correspondences.len() < 2 {
        return Err(IdentifyError::TooFewCorrespondences(correspondences.len()));
    }
    let pairs: Vec<(UnitVector3, UnitVector3)> = correspondences
        .iter()
        .map(|c| (c.ray, c.catalog_direction))
        .collect();
    Ok(fit_rotation(&pairs)?)
}

/// Sum of squared residuals of Wahba's objective at `r`.
pub fn wahba_cost(correspondences: &[Correspondence], r: &Rotation) -> f64 {
    correspondences
        .iter()
        .map(|c| {
            (c.ray.as_vector() - r.apply_vector(c.catalog_direction.as_vector())).norm_squared()
        })
        .sum()
}

/// Per-frame outcome of identification, for the report file.
#[derive(Debug, Clone)]
pub struct IdentificationRecord {
    pub frame: FrameId,
    pub n_points: usize,
    pub n_matched: usize,
    pub rotation: Option<Rotation>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct AbsoluteRotations {
    pub rotations: BTreeMap<FrameId, Rotation>,
    pub records: Vec<IdentificationRecord>,
}

/// Extraction parameters threaded from the frame builder.
#[derive(Debug, Clone, Copy)]
pub struct ExtractionParams {
    pub epsilon1: f64,
    pub mode: PointsMode,
}

/// Run `extract_points → identify → wahba_svd` over the selected frames.
/// Frames that fail identification are dropped (recorded, not fatal).
pub fn absolute_rotations(
    images: &[EventImage],
    selected: &[FrameId],
    index: &TriangleHashIndex,
    k: &Intrinsics,
    extraction: &ExtractionParams,
    params: &IdentifyParams,
) -> AbsoluteRotations {
    let mut rotations = BTreeMap::new();
    let mut records = Vec::new();
    for &frame in selected {
        let image = match images.iter().find(|img| img.frame == frame) {
            Some(img) => img,
            None => continue,
        };
        let filtered = mean_filter(image);
        let points =
            extract_points_with_mode(&filtered, extraction.epsilon1, k, frame, extraction.mode);
        let n_points = points.len();
        match identify(&points, index, k, params).and_then(|corr| {
            let rot = wahba_svd(&corr)?;
            Ok((corr, rot))
        }) {
            Ok((corr, rot)) => {
                rotations.insert(frame, rot);
                records.push(IdentificationRecord {
                    frame,
                    n_points,
                    n_matched: corr.len(),
                    rotation: Some(rot),
                    status: "ok".into(),
                });
            }
            Err(err) => {
                log::debug!("frame {frame}: identification failed: {err}");
                records.push(IdentificationRecord {
                    frame,
                    n_points,
                    n_matched: 0,
                    rotation: None,
                    status: match err {
                        IdentifyError::TooFewPoints(_) => "too_few_points".into(),
                        IdentifyError::NoVerifiedHypothesis => "no_verified_hypothesis".into(),
                        other => format!("error: {other}"),
                    },
                });
            }
        }
    }
    if rotations.is_empty() {
        log::warn!("no frame produced an absolute rotation");
    }
    AbsoluteRotations { rotations, records }
}

/// Report rows: `frame,n_points,n_matched,qw,qx,qy,qz,status`.
pub fn write_identification_report<W: Write>(
    mut w: W,
    records: &[IdentificationRecord],
) -> std::io::Result<()> {
    writeln!(w, "frame,n_points,n_matched,qw,qx,qy,qz,status")?;
    for rec in records {
        match &rec.rotation {
            Some(rot) => {
                let q = rot.quaternion();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    rec.frame, rec.n_points, rec.n_matched, q.w, q.i, q.j, q.k, rec.status
                )?;
            }
            None => writeln!(
                w,
                "{},{},{},,,,,{}",
                rec.frame, rec.n_points, rec.n_matched, rec.status
            )?,
        }
    }
    Ok(())
}

/// Parse a report produced by [`write_identification_report`].
pub fn read_identification_report(path: &std::path::Path) -> std::io::Result<Vec<IdentificationRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let bad = |line: usize, msg: String| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("identification report line {line}: {msg}"),
        )
    };
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || idx == 0 {
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 8 {
            return Err(bad(idx + 1, format!("expected 8 fields, got {}", fields.len())));
        }
        let parse_usize = |s: &str, name: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| bad(idx + 1, format!("bad {name}: {e}")))
        };
        let rotation = if fields[3].trim().is_empty() {
            None
        } else {
            let q: Result<Vec<f64>, _> = fields[3..7]
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| bad(idx + 1, format!("bad quaternion: {e}")))
                })
                .collect();
            let q = q?;
            let uq = nalgebra::UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
            Some(Rotation::from_quaternion(&uq))
        };
        out.push(IdentificationRecord {
            frame: parse_usize(fields[0], "frame")?,
            n_points: parse_usize(fields[1], "n_points")?,
            n_matched: parse_usize(fields[2], "n_matched")?,
            rotation,
            status: fields[7].trim().to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, SyntheticCatalogConfig};
    use crate::geometry::angular_error_deg;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit(x: f64, y: f64, z: f64) -> UnitVector3 {
        UnitVector3::from_components(x, y, z).unwrap()
    }

    fn corr(ray: UnitVector3, dir: UnitVector3, id: u32) -> Correspondence {
        Correspondence {
            point: [0.0, 0.0],
            ray,
            star_id: id,
            catalog_direction: dir,
        }
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
        let axis = loop {
            let v = nalgebra::Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                break UnitVector3::new(v).unwrap();
            }
        };
        Rotation::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI))
    }

    fn random_direction(rng: &mut ChaCha8Rng) -> UnitVector3 {
        loop {
            let v = nalgebra::Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                return UnitVector3::new(v).unwrap();
            }
        }
    }

    #[test]
    fn wahba_identity_on_aligned_pairs() {
        let dirs = [unit(1.0, 0.1, 0.2), unit(-0.2, 1.0, 0.3), unit(0.1, -0.3, 1.0)];
        let corrs: Vec<_> = dirs.iter().enumerate().map(|(i, d)| corr(*d, *d, i as u32)).collect();
        let r = wahba_svd(&corrs).unwrap();
        assert!(angular_error_deg(&r, &Rotation::identity()) < 1e-9);
    }

    #[test]
    fn wahba_recovers_random_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r0 = random_rotation(&mut rng);
        let corrs: Vec<_> = (0..10)
            .map(|i| {
                let d = random_direction(&mut rng);
                corr(r0.apply(&d), d, i)
            })
            .collect();
        let r = wahba_svd(&corrs).unwrap();
        assert!(angular_error_deg(&r, &r0) < 1e-9);
    }

    #[test]
    fn wahba_degenerate_and_underdetermined() {
        let d = unit(0.0, 0.0, 1.0);
        assert!(matches!(
            wahba_svd(&[corr(d, d, 1)]),
            Err(IdentifyError::TooFewCorrespondences(1))
        ));
        // Parallel directions: rank(B) = 1.
        assert!(wahba_svd(&[corr(d, d, 1), corr(d, d, 2)]).is_err());
    }

    #[test]
    fn wahba_order_and_duplication_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r0 = random_rotation(&mut rng);
        let mut corrs: Vec<_> = (0..8)
            .map(|i| {
                let d = random_direction(&mut rng);
                corr(r0.apply(&d), d, i)
            })
            .collect();
        let r_a = wahba_svd(&corrs).unwrap();
        corrs.reverse();
        let r_b = wahba_svd(&corrs).unwrap();
        assert!(angular_error_deg(&r_a, &r_b) < 1e-10);
        // Exact duplication scales the cost but keeps the argmin.
        let mut dup = corrs.clone();
        dup.push(corrs[0].clone());
        let r_c = wahba_svd(&dup).unwrap();
        assert!(angular_error_deg(&r_a, &r_c) < 1e-9);
    }

    #[test]
    fn wahba_noisy_beats_random_sampling() {
        // Module-scale version of the optimality check; the acceptance suite
        // runs the full 10^6-rotation variant.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r0 = random_rotation(&mut rng);
        let corrs: Vec<_> = (0..20)
            .map(|i| {
                let d = random_direction(&mut rng);
                let noisy = UnitVector3::new(
                    r0.apply(&d).as_vector()
                        + nalgebra::Vector3::new(
                            rng.random_range(-1e-3..1e-3),
                            rng.random_range(-1e-3..1e-3),
                            rng.random_range(-1e-3..1e-3),
                        ),
                )
                .unwrap();
                corr(noisy, d, i)
            })
            .collect();
        let r = wahba_svd(&corrs).unwrap();
        let c_opt = wahba_cost(&corrs, &r);
        for _ in 0..10_000 {
            let rr = random_rotation(&mut rng);
            assert!(wahba_cost(&corrs, &rr) >= c_opt - 1e-15);
        }
    }

    #[test]
    fn index_too_few_stars() {
        let cat = generate_catalog(&SyntheticCatalogConfig {
            star_count: 2,
            seed: 5,
            ..Default::default()
        });
        let index = build_index(&cat, 20.0, 10.0, 0.2, 12);
        assert_eq!(index.triple_count(), 0);
    }

    #[test]
    fn index_three_close_stars_single_key() {
        use crate::catalog::{radec_to_direction, StarCatalog};
        let stars = vec![
            CatalogStar { id: 1, direction: radec_to_direction(10.0, 10.0), magnitude: 2.0 },
            CatalogStar { id: 2, direction: radec_to_direction(12.0, 10.0), magnitude: 2.5 },
            CatalogStar { id: 3, direction: radec_to_direction(11.0, 12.0), magnitude: 3.0 },
        ];
        let cat = StarCatalog::new(stars).unwrap();
        let index = build_index(&cat, 20.0, 10.0, 0.2, 12);
        assert_eq!(index.triple_count(), 1);
        assert_eq!(index.key_count(), 1);
    }

    #[test]
    fn index_self_consistency() {
        let cat = generate_catalog(&SyntheticCatalogConfig {
            star_count: 500,
            seed: 6,
            ..Default::default()
        });
        let index = build_index(&cat, 20.0, 4.5, 0.2, 10);
        assert!(index.triple_count() > 0);
        let mut seen = HashSet::new();
        for (&key, triples) in index.buckets.iter() {
            for t in triples {
                // Under exactly one key, and the recomputed descriptor
                // hashes back to it.
                assert!(seen.insert(*t), "triple {t:?} stored twice");
                let dirs = [
                    &index.stars[t[0] as usize].direction,
                    &index.stars[t[1] as usize].direction,
                    &index.stars[t[2] as usize].direction,
                ];
                let (sides, _) = triangle_sides(dirs);
                assert_eq!(index.key_for(sides[0], sides[1]), key);
                assert!(sides[2] <= 20.0);
            }
        }
    }

    /// Synthetic clean frame: project all bright in-FOV stars exactly.
    fn synthetic_points(
        cat: &StarCatalog,
        index: &TriangleHashIndex,
        r0: &Rotation,
        k: &Intrinsics,
        params: &IdentifyParams,
    ) -> (PointSet, Vec<u32>) {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut ids = Vec::new();
        for s in cat.stars() {
            if s.magnitude > index.mag_limit {
                continue;
            }
            if let Some(p) = project(k, r0, &s.direction) {
                if p[0] >= 0.0
                    && p[1] >= 0.0
                    && p[0] < params.image_width as f64
                    && p[1] < params.image_height as f64
                {
                    points.push(p);
                    weights.push(100.0 - s.magnitude);
                    ids.push(s.id);
                }
            }
        }
        let rays = points.iter().map(|&p| backproject(p, k)).collect();
        (
            PointSet { frame: 1, points, rays, weights },
            ids,
        )
    }

    fn default_test_setup() -> (StarCatalog, TriangleHashIndex, Intrinsics, IdentifyParams) {
        let cat = generate_catalog(&SyntheticCatalogConfig::default());
        let index = build_index(&cat, 20.0, 3.6, 0.2, 12);
        let k = Intrinsics::from_fov(240, 180, 20.0).unwrap();
        (cat, index, k, IdentifyParams::default())
    }

    #[test]
    fn identify_clean_frame() {
        let (cat, index, k, params) = default_test_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tried = 0;
        let mut solved = 0;
        while tried < 5 {
            let r0 = random_rotation(&mut rng);
            let (points, ids) = synthetic_points(&cat, &index, &r0, &k, &params);
            if points.len() < 4 {
                continue;
            }
            tried += 1;
            let corr = identify(&points, &index, &k, &params).expect("clean frame identifies");
            // Every visible bright star is matched, all ids correct.
            assert_eq!(corr.len(), ids.len());
            for c in &corr {
                assert!(ids.contains(&c.star_id));
            }
            let rot = wahba_svd(&corr).unwrap();
            assert!(angular_error_deg(&rot, &r0) < 0.1);
            solved += 1;
        }
        assert_eq!(solved, tried);
    }

    #[test]
    fn identify_too_few_points() {
        let (_, index, k, params) = default_test_setup();
        let ps = PointSet {
            frame: 1,
            points: vec![[1.0, 1.0], [2.0, 2.0]],
            rays: vec![backproject([1.0, 1.0], &k), backproject([2.0, 2.0], &k)],
            weights: vec![1.0, 1.0],
        };
        assert!(matches!(
            identify(&ps, &index, &k, &params),
            Err(IdentifyError::TooFewPoints(2))
        ));
    }

    #[test]
    fn identify_rejects_random_patterns() {
        let (_, index, k, params) = default_test_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut failures = 0;
        let trials = 100;
        for _ in 0..trials {
            let n = 10;
            let points: Vec<[f64; 2]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.0..240.0),
                        rng.random_range(0.0..180.0),
                    ]
                })
                .collect();
            let rays = points.iter().map(|&p| backproject(p, &k)).collect();
            let ps = PointSet {
                frame: 1,
                points,
                rays,
                weights: vec![1.0; n],
            };
            if identify(&ps, &index, &k, &params).is_err() {
                failures += 1;
            }
        }
        assert!(failures >= 99, "only {failures}/{trials} random patterns rejected");
    }

    #[test]
    fn empty_selection_empty_map() {
        let (_, index, k, params) = default_test_setup();
        let extraction = ExtractionParams {
            epsilon1: 2.0,
            mode: PointsMode::Centroids,
        };
        let out = absolute_rotations(&[], &[], &index, &k, &extraction, &params);
        assert!(out.rotations.is_empty());
        assert!(out.records.is_empty());
    }

    #[test]
    fn report_format() {
        let records = vec![
            IdentificationRecord {
                frame: 3,
                n_points: 9,
                n_matched: 7,
                rotation: Some(Rotation::identity()),
                status: "ok".into(),
            },
            IdentificationRecord {
                frame: 4,
                n_points: 2,
                n_matched: 0,
                rotation: None,
                status: "too_few_points".into(),
            },
        ];
        let mut buf = Vec::new();
        write_identification_report(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame,n_points,n_matched,qw,qx,qy,qz,status");
        assert!(lines[1].starts_with("3,9,7,1,"));
        assert_eq!(lines[2], "4,2,0,,,,,too_few_points");
    }
}
