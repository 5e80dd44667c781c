//! Relative rotations between temporally nearby frames via trimmed ICP on
//! unit rays, and star tracks assembled from the resulting associations.
//!
//! Residuals and nearest neighbors live on the backprojected rays (3D
//! chordal distance), not in pixel space. Each iteration alternates
//! nearest-ray assignment, keeping the `L = ceil(τ·P)` smallest residuals,
//! and a rotation refit on the kept pairs; a step is accepted only when the
//! trimmed objective (sum of the kept residual norms) does not increase, so
//! the objective is non-increasing by construction.
//!
//! Conventions: a pair is `(from, to)` with `from < to`; the estimated
//! rotation maps from-frame rays onto to-frame rays, so on exact data it
//! equals `R*_to · (R*_from)ᵀ` for attitudes `R` (camera ← inertial).

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::frames::{FrameId, PointSet};
use crate::geometry::{fit_rotation, GeometryError, Rotation, UnitVector3};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("point set too small: source {source_len}, target {target_len} (need 3 each)")]
    TooFewPoints { source_len: usize, target_len: usize },
    #[error("trim fraction {0} outside (0, 1]")]
    InvalidTrimFraction(f64),
    #[error("trimmed subset too small: L = {0} (need 3)")]
    TrimTooAggressive(usize),
    #[error("registration failed: kept pairs degenerate")]
    Degenerate(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Convergence threshold on the rotation update, radians.
    pub update_tol_rad: f64,
    /// Reject a pair whose estimate lands this far from its warm-start seed
    /// (degrees); 0 disables the gate.
    pub seed_gate_deg: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            update_tol_rad: 1e-6,
            seed_gate_deg: 2.0,
        }
    }
}

/// Result of one trimmed ICP run.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub rotation: Rotation,
    /// Trimmed objective at convergence: sum of the L smallest residual
    /// norms under the final rotation.
    pub residual: f64,
    /// Kept correspondences as (source point index, target point index).
    pub inliers: Vec<(usize, usize)>,
    /// Objective value after each accepted iterate, starting at the seed.
    pub objective_trace: Vec<f64>,
}

/// Relative rotation measurement on the window adjacency graph.
#[derive(Debug, Clone)]
pub struct RelativeRotation {
    /// Earlier frame (ICP source).
    pub from: FrameId,
    /// Later frame (ICP target).
    pub to: FrameId,
    pub rotation: Rotation,
    pub residual: f64,
    pub inliers: Vec<(usize, usize)>,
}

/// A star's associated observations across event images.
#[derive(Debug, Clone)]
pub struct StarTrack {
    pub id: usize,
    pub observations: Vec<TrackObservation>,
}

#[derive(Debug, Clone)]
pub struct TrackObservation {
    pub frame: FrameId,
    pub point: [f64; 2],
    pub ray: UnitVector3,
}

/// Assignment + trim under a fixed rotation: unique 1-1 nearest-ray
/// matching (greedy, closest pairs first), keep the smallest residuals up
/// to `keep`, return (objective, kept pairs).
///
/// Uniqueness matters: letting several source points share one target lets
/// the refit collapse the set onto a few targets, which scores well and is
/// badly wrong whenever the true overlap is below the trim fraction.
fn assign_and_trim(
    source: &PointSet,
    target: &PointSet,
    r: &Rotation,
    keep: usize,
) -> (f64, Vec<(usize, usize)>) {
    let mut candidates: Vec<(f64, usize, usize)> =
        Vec::with_capacity(source.len() * target.len());
    for (p, ray) in source.rays.iter().enumerate() {
        let rotated = r.apply_vector(ray.as_vector());
        for (q, t_ray) in target.rays.iter().enumerate() {
            candidates.push(((rotated - t_ray.as_vector()).norm(), p, q));
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; source.len()];
    let mut used_q = vec![false; target.len()];
    let mut kept: Vec<(f64, usize, usize)> = Vec::new();
    for (d, p, q) in candidates {
        if kept.len() == keep {
            break;
        }
        if !used_p[p] && !used_q[q] {
            used_p[p] = true;
            used_q[q] = true;
            kept.push((d, p, q));
        }
    }
    let objective = kept.iter().map(|r| r.0).sum();
    let mut pairs: Vec<(usize, usize)> = kept.iter().map(|&(_, p, q)| (p, q)).collect();
    pairs.sort_unstable();
    (objective, pairs)
}

/// Trimmed ICP aligning `source` rays onto `target` rays.
pub fn trimmed_icp(
    source: &PointSet,
    target: &PointSet,
    trim_fraction: f64,
    r_init: &Rotation,
    params: &IcpParams,
) -> Result<IcpResult, RegistrationError> {
    if source.len() < 3 || target.len() < 3 {
        return Err(RegistrationError::TooFewPoints {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(RegistrationError::InvalidTrimFraction(trim_fraction));
    }
    let keep = (trim_fraction * source.len() as f64).ceil() as usize;
    if keep < 3 {
        return Err(RegistrationError::TrimTooAggressive(keep));
    }
    // Never demand more unique pairs than the target can supply.
    let keep = keep.min(target.len());

    let mut rotation = *r_init;
    let (mut objective, mut pairs) = assign_and_trim(source, target, &rotation, keep);
    let mut trace = vec![objective];

    for _ in 0..params.max_iterations {
        let fit_pairs: Vec<(UnitVector3, UnitVector3)> = pairs
            .iter()
            .map(|&(p, q)| (target.rays[q], source.rays[p]))
            .collect();
        let candidate = fit_rotation(&fit_pairs)?;
        let (new_objective, new_pairs) = assign_and_trim(source, target, &candidate, keep);
        if new_objective > objective {
            break;
        }
        let update_rad = crate::geometry::angular_error_deg(&rotation, &candidate).to_radians();
        rotation = candidate;
        objective = new_objective;
        pairs = new_pairs;
        trace.push(objective);
        if update_rad < params.update_tol_rad {
            break;
        }
    }

    Ok(IcpResult {
        rotation,
        residual: objective,
        inliers: pairs,
        objective_trace: trace,
    })
}

/// Estimate relative rotations for every frame pair within the window `w`.
///
/// Consecutive pairs run first, each warm-started from the previous
/// consecutive estimate; wider pairs are seeded by composing the consecutive
/// estimates across their span. Pairs that fail (too few points, degenerate
/// trim set, or an estimate that jumps `seed_gate_deg` away from its seed —
/// the signature of a degenerate point set locking a flipped alignment) are
/// omitted from the graph.
pub fn relative_rotations(
    point_sets: &[PointSet],
    w: usize,
    trim_fraction: f64,
    params: &IcpParams,
) -> Vec<RelativeRotation> {
    assert!(w >= 1, "window must be at least 1");
    let m = point_sets.len();
    let by_frame: BTreeMap<FrameId, &PointSet> =
        point_sets.iter().map(|ps| (ps.frame, ps)).collect();
    let frame_of = |idx: usize| idx + 1;

    let mut results: Vec<RelativeRotation> = Vec::new();
    // Consecutive chain, warm-started along the way.
    let mut consecutive: Vec<Option<Rotation>> = vec![None; m];
    let mut seed = Rotation::identity();
    for i in 0..m.saturating_sub(1) {
        let (from, to) = (frame_of(i), frame_of(i + 1));
        let (src, tgt) = match (by_frame.get(&from), by_frame.get(&to)) {
            (Some(s), Some(t)) => (*s, *t),
            _ => continue,
        };
        match trimmed_icp(src, tgt, trim_fraction, &seed, params) {
            Ok(res) => {
                let jump = crate::geometry::angular_error_deg(&res.rotation, &seed);
                if params.seed_gate_deg > 0.0 && jump > params.seed_gate_deg {
                    log::debug!("pair ({from},{to}) rejected: {jump:.2} deg from seed");
                    continue;
                }
                seed = res.rotation;
                consecutive[i] = Some(res.rotation);
                results.push(RelativeRotation {
                    from,
                    to,
                    rotation: res.rotation,
                    residual: res.residual,
                    inliers: res.inliers,
                });
            }
            Err(err) => {
                log::debug!("pair ({from},{to}): {err}");
            }
        }
    }

    // Wider pairs, seeded by composing the consecutive chain over the span.
    for gap in 2..=w {
        for i in 0..m.saturating_sub(gap) {
            let (from, to) = (frame_of(i), frame_of(i + gap));
            let (src, tgt) = match (by_frame.get(&from), by_frame.get(&to)) {
                (Some(s), Some(t)) => (*s, *t),
                _ => continue,
            };
            let mut seed = Rotation::identity();
            for k in i..i + gap {
                if let Some(c) = &consecutive[k] {
                    seed = c.compose(&seed);
                }
            }
            match trimmed_icp(src, tgt, trim_fraction, &seed, params) {
                Ok(res) => {
                    let jump = crate::geometry::angular_error_deg(&res.rotation, &seed);
                    if params.seed_gate_deg > 0.0 && jump > params.seed_gate_deg {
                        log::debug!("pair ({from},{to}) rejected: {jump:.2} deg from seed");
                        continue;
                    }
                    results.push(RelativeRotation {
                        from,
                        to,
                        rotation: res.rotation,
                        residual: res.residual,
                        inliers: res.inliers,
                    })
                }
                Err(err) => {
                    log::debug!("pair ({from},{to}): {err}");
                }
            }
        }
    }

    results.sort_by_key(|r| (r.to, r.from));
    results
}

/// Greedy unique 1-1 association of source points to target points under a
/// fixed rotation: nearest rays first, within a chordal distance cap.
///
/// The trimmed inlier set of [`trimmed_icp`] intentionally discards a fixed
/// fraction of clean pairs, which fragments star tracks; this re-derives the
/// full association once the rotation is known.
pub fn associate_points(
    source: &PointSet,
    target: &PointSet,
    rotation: &Rotation,
    max_chordal: f64,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (p, ray) in source.rays.iter().enumerate() {
        let rotated = rotation.apply_vector(ray.as_vector());
        for (q, t_ray) in target.rays.iter().enumerate() {
            let d = (rotated - t_ray.as_vector()).norm();
            if d <= max_chordal {
                candidates.push((d, p, q));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; source.len()];
    let mut used_q = vec![false; target.len()];
    let mut out = Vec::new();
    for (_, p, q) in candidates {
        if !used_p[p] && !used_q[q] {
            used_p[p] = true;
            used_q[q] = true;
            out.push((p, q));
        }
    }
    out.sort_unstable();
    out
}

/// Union-find over (frame, point) nodes joined by consecutive-frame inlier
/// pairs. Components spanning at least two frames become tracks; a join
/// that would put two different points of one frame into a component is
/// dropped (first-come association).
pub fn build_tracks(relatives: &[RelativeRotation], point_sets: &[PointSet]) -> Vec<StarTrack> {
    let by_frame: BTreeMap<FrameId, &PointSet> =
        point_sets.iter().map(|ps| (ps.frame, ps)).collect();

    // Dense node ids per (frame, point index).
    let mut offsets: BTreeMap<FrameId, usize> = BTreeMap::new();
    let mut total = 0usize;
    for ps in point_sets {
        offsets.insert(ps.frame, total);
        total += ps.len();
    }
    let node_id = |frame: FrameId, point: usize| offsets[&frame] + point;

    let mut parent: Vec<usize> = (0..total).collect();
    // Per-root frame → point map, for conflict detection.
    let mut members: Vec<Option<BTreeMap<FrameId, usize>>> = (0..total).map(|_| None).collect();

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    let mut joins: Vec<(FrameId, usize, usize)> = relatives
        .iter()
        .filter(|r| r.to == r.from + 1)
        .flat_map(|r| r.inliers.iter().map(move |&(p, q)| (r.from, p, q)))
        .collect();
    joins.sort_unstable();

    for (from, p, q) in joins {
        let (a, b) = (node_id(from, p), node_id(from + 1, q));
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            continue;
        }
        let map_a = members[ra]
            .take()
            .unwrap_or_else(|| BTreeMap::from([(from, p)]));
        let map_b = members[rb]
            .take()
            .unwrap_or_else(|| BTreeMap::from([(from + 1, q)]));
        // Reject merges that would claim two points in one frame.
        let conflict = map_a
            .iter()
            .any(|(f, pt)| map_b.get(f).is_some_and(|other| other != pt));
        if conflict {
            members[ra] = Some(map_a);
            members[rb] = Some(map_b);
            continue;
        }
        let (big_root, small_root, mut big, small) = if map_a.len() >= map_b.len() {
            (ra, rb, map_a, map_b)
        } else {
            (rb, ra, map_b, map_a)
        };
        big.extend(small);
        parent[small_root] = big_root;
        members[big_root] = Some(big);
    }

    let mut tracks: Vec<StarTrack> = Vec::new();
    let mut component_maps: Vec<BTreeMap<FrameId, usize>> = members
        .into_iter()
        .flatten()
        .filter(|m| m.len() >= 2)
        .collect();
    // Deterministic track order by first observation.
    component_maps.sort_by_key(|m| {
        let (&f, &p) = m.iter().next().unwrap();
        (f, p)
    });
    for (id, map) in component_maps.into_iter().enumerate() {
        let observations = map
            .into_iter()
            .map(|(frame, point_idx)| {
                let ps = by_frame[&frame];
                TrackObservation {
                    frame,
                    point: ps.points[point_idx],
                    ray: ps.rays[point_idx],
                }
            })
            .collect();
        tracks.push(StarTrack { id, observations });
    }
    tracks
}

/// Dump rows `j,i,qw,qx,qy,qz,residual,n_inliers` with `j` the later frame.
pub fn write_relative_rotations<W: Write>(
    mut w: W,
    relatives: &[RelativeRotation],
) -> std::io::Result<()> {
    writeln!(w, "j,i,qw,qx,qy,qz,residual,n_inliers")?;
    for r in relatives {
        let q = r.rotation.quaternion();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.to,
            r.from,
            q.w,
            q.i,
            q.j,
            q.k,
            r.residual,
            r.inliers.len()
        )?;
    }
    Ok(())
}

/// Parse a dump produced by [`write_relative_rotations`]. Inlier pairs are
/// not serialized, so they come back empty.
pub fn read_relative_rotations(path: &std::path::Path) -> std::io::Result<Vec<RelativeRotation>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let bad = |line: usize, msg: String| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("relative rotation dump line {line}: {msg}"),
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
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(idx + 1, format!("bad float {s:?}: {e}")))
        };
        let to: FrameId = fields[0]
            .trim()
            .parse()
            .map_err(|e| bad(idx + 1, format!("bad j: {e}")))?;
        let from: FrameId = fields[1]
            .trim()
            .parse()
            .map_err(|e| bad(idx + 1, format!("bad i: {e}")))?;
        let q = nalgebra::UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            num(fields[2])?,
            num(fields[3])?,
            num(fields[4])?,
            num(fields[5])?,
        ));
        out.push(RelativeRotation {
            from,
            to,
            rotation: crate::geometry::Rotation::from_quaternion(&q),
            residual: num(fields[6])?,
            inliers: Vec::new(),
        });
    }
    Ok(out)
}

/// Dump rows `track_id,frame,x,y`.
pub fn write_tracks<W: Write>(mut w: W, tracks: &[StarTrack]) -> std::io::Result<()> {
    writeln!(w, "track_id,frame,x,y")?;
    for t in tracks {
        for obs in &t.observations {
            writeln!(w, "{},{},{},{}", t.id, obs.frame, obs.point[0], obs.point[1])?;
        }
    }
    Ok(())
}
