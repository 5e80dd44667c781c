//! Rotation-only bundle adjustment over star tracks.
//!
//! Minimizes `Σ η(i,s) ‖y⃗_{i,s} − R_i·X_s‖²` jointly over frame attitudes
//! and unit star directions. Stars sit at infinity, so there is no
//! translation or depth: attitudes take 3-vector tangent increments with
//! exponential retraction, star directions take 2-vector increments in a
//! local tangent basis with renormalizing retraction.
//!
//! The solver is Levenberg-Marquardt with additive damping: steps are
//! accepted only when the cost decreases, the damping adapts, and the star
//! blocks are eliminated through their Schur complement so the reduced
//! camera system stays banded in frame order (a star couples only the
//! frames of its track).
//!
//! The objective is invariant under a global rotation `(R_i, X_s) ↦
//! (R_i Qᵀ, Q X_s)`; by default the first frame is anchored at its input
//! value to pin that gauge.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DVector, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use thiserror::Error;

use crate::frames::FrameId;
use crate::geometry::{skew, Rotation, UnitVector3};
use crate::linalg::BandedSymmetric;
use crate::registration::StarTrack;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("track {track} observes frame {frame} which has no attitude")]
    MissingAttitude { track: usize, frame: FrameId },
    #[error("problem has no usable track")]
    NoTracks,
    #[error("anchor frame {0} has no attitude")]
    BadAnchor(FrameId),
    #[error(
        "non-finite cost at iteration {iteration} (lambda {lambda:.3e}, last cost {last_cost:.6e})"
    )]
    NumericalFailure {
        iteration: usize,
        lambda: f64,
        last_cost: f64,
    },
    #[error("linear solve failed: {0}")]
    Solve(#[from] crate::linalg::LinalgError),
}

/// One ray observation binding a frame to a track.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Position in `BaProblem::frame_ids`.
    pub frame_pos: usize,
    /// Position in `BaProblem::directions`.
    pub track_pos: usize,
    pub ray: UnitVector3,
}

/// Bundle adjustment state: attitudes, unit star directions and the sparse
/// observation structure.
#[derive(Debug, Clone)]
pub struct BaProblem {
    pub frame_ids: Vec<FrameId>,
    pub attitudes: Vec<Rotation>,
    /// Track ids parallel to `directions`.
    pub track_ids: Vec<usize>,
    pub directions: Vec<UnitVector3>,
    pub observations: Vec<Observation>,
    /// Frame (by position) held fixed during optimization.
    pub anchor: Option<usize>,
}

/// Mean back-rotated observation ray per track, renormalized to the sphere.
///
/// Tracks whose mean direction cancels to zero norm are dropped (`None`)
/// with a warning.
pub fn init_star_directions(
    attitudes: &BTreeMap<FrameId, Rotation>,
    tracks: &[StarTrack],
) -> Result<Vec<Option<UnitVector3>>, BundleError> {
    let mut out = Vec::with_capacity(tracks.len());
    for track in tracks {
        let mut sum = Vector3::zeros();
        for obs in &track.observations {
            let r = attitudes
                .get(&obs.frame)
                .ok_or(BundleError::MissingAttitude {
                    track: track.id,
                    frame: obs.frame,
                })?;
            sum += r.transpose().apply_vector(obs.ray.as_vector());
        }
        let mean = sum / track.observations.len() as f64;
        match UnitVector3::new(mean) {
            Ok(dir) => out.push(Some(dir)),
            Err(_) => {
                log::warn!("track {}: zero-norm mean direction, dropped", track.id);
                out.push(None);
            }
        }
    }
    Ok(out)
}

/// Drop track observations whose ray residual against the initialized star
/// direction exceeds `factor` times the global median residual.
///
/// Point extraction occasionally blends two nearby stars into one centroid
/// or lets a track switch identity when stars cross; those observations sit
/// far from the track consensus and would otherwise drag the least-squares
/// fit. Tracks left with fewer than two observations are removed.
pub fn trim_track_observations(
    attitudes: &BTreeMap<FrameId, Rotation>,
    tracks: &[StarTrack],
    factor: f64,
) -> Result<Vec<StarTrack>, BundleError> {
    if factor <= 0.0 {
        return Ok(tracks.to_vec());
    }
    let init = init_star_directions(attitudes, tracks)?;
    let mut residuals: Vec<f64> = Vec::new();
    for (track, dir) in tracks.iter().zip(init.iter()) {
        let Some(dir) = dir else { continue };
        for obs in &track.observations {
            let predicted = attitudes[&obs.frame].apply_vector(dir.as_vector());
            residuals.push((obs.ray.as_vector() - predicted).norm());
        }
    }
    if residuals.is_empty() {
        return Ok(Vec::new());
    }
    residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = residuals[residuals.len() / 2];
    let cutoff = (factor * median).max(1e-9);

    let mut out = Vec::new();
    for (track, dir) in tracks.iter().zip(init.iter()) {
        let Some(dir) = dir else { continue };
        let observations: Vec<crate::registration::TrackObservation> = track
            .observations
            .iter()
            .filter(|obs| {
                let predicted = attitudes[&obs.frame].apply_vector(dir.as_vector());
                (obs.ray.as_vector() - predicted).norm() <= cutoff
            })
            .cloned()
            .collect();
        if observations.len() >= 2 {
            out.push(StarTrack {
                id: track.id,
                observations,
            });
        }
    }
    Ok(out)
}

impl BaProblem {
    /// Assemble a problem from per-frame attitudes and star tracks; star
    /// directions are initialized from the attitudes. Tracks spanning fewer
    /// than two frames or with a degenerate mean direction are dropped.
    pub fn from_tracks(
        attitudes: &BTreeMap<FrameId, Rotation>,
        tracks: &[StarTrack],
    ) -> Result<Self, BundleError> {
        let frame_ids: Vec<FrameId> = attitudes.keys().copied().collect();
        let frame_pos: BTreeMap<FrameId, usize> = frame_ids
            .iter()
            .enumerate()
            .map(|(i, &f)| (f, i))
            .collect();
        let init = init_star_directions(attitudes, tracks)?;

        let mut track_ids = Vec::new();
        let mut directions = Vec::new();
        let mut observations = Vec::new();
        for (track, dir) in tracks.iter().zip(init) {
            let Some(dir) = dir else { continue };
            if track.observations.len() < 2 {
                continue;
            }
            let track_pos = directions.len();
            track_ids.push(track.id);
            directions.push(dir);
            for obs in &track.observations {
                observations.push(Observation {
                    frame_pos: frame_pos[&obs.frame],
                    track_pos,
                    ray: obs.ray,
                });
            }
        }
        if directions.is_empty() {
            return Err(BundleError::NoTracks);
        }
        let attitudes = frame_ids.iter().map(|f| attitudes[f]).collect();
        Ok(Self {
            frame_ids,
            attitudes,
            track_ids,
            directions,
            observations,
            anchor: None,
        })
    }

    /// Hold frame `k0` fixed at `r_fix` during optimization.
    pub fn gauge_anchor(mut self, k0: FrameId, r_fix: Rotation) -> Result<Self, BundleError> {
        let pos = self
            .frame_ids
            .iter()
            .position(|&f| f == k0)
            .ok_or(BundleError::BadAnchor(k0))?;
        self.attitudes[pos] = r_fix;
        self.anchor = Some(pos);
        Ok(self)
    }

    pub fn cost(&self) -> f64 {
        self.observations
            .iter()
            .map(|o| {
                (o.ray.as_vector()
                    - self.attitudes[o.frame_pos]
                        .apply_vector(self.directions[o.track_pos].as_vector()))
                .norm_squared()
            })
            .sum()
    }
}

/// Orthonormal tangent basis at a unit direction.
fn tangent_basis(x: &UnitVector3) -> Matrix3x2<f64> {
    let v = x.as_vector();
    // Pick the axis least aligned with x to seed the basis.
    let seed = if v.x.abs() <= v.y.abs() && v.x.abs() <= v.z.abs() {
        Vector3::x()
    } else if v.y.abs() <= v.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let b1 = (seed - v * seed.dot(v)).normalize();
    let b2 = v.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

/// Residual `y − R·X` with its Jacobians in the attitude tangent
/// (`R ← R·exp(δ)`) and the sphere tangent (`X ← normalize(X + B·ζ)`).
pub fn residual_and_jacobians(
    attitude: &Rotation,
    direction: &UnitVector3,
    basis: &Matrix3x2<f64>,
    ray: &UnitVector3,
) -> (Vector3<f64>, Matrix3<f64>, Matrix3x2<f64>) {
    let r = attitude.matrix();
    let residual = ray.as_vector() - r * direction.as_vector();
    let j_att = r * skew(direction.as_vector());
    let j_dir = -(r * basis);
    (residual, j_att, j_dir)
}

#[derive(Debug, Clone, Copy)]
pub struct BundleParams {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease falls below this.
    pub cost_tol_rel: f64,
    /// Stop when the gradient norm falls below this.
    pub gradient_tol: f64,
    pub initial_lambda: f64,
}

impl Default for BundleParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            cost_tol_rel: 1e-10,
            gradient_tol: 1e-10,
            initial_lambda: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BundleIteration {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct BundleResult {
    pub problem: BaProblem,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub log: Vec<BundleIteration>,
}

struct TrackBlocks {
    /// Frames (by camera slot) coupled to this track, ascending.
    slots: Vec<usize>,
    /// W blocks parallel to `slots`.
    w: Vec<Matrix3x2<f64>>,
    v: Matrix2<f64>,
    g: Vector2<f64>,
}

/// Levenberg-Marquardt with Schur elimination of the star blocks.
pub fn bundle_adjust(
    problem: &BaProblem,
    params: &BundleParams,
) -> Result<BundleResult, BundleError> {
    let mut state = problem.clone();
    if state.directions.is_empty() {
        return Err(BundleError::NoTracks);
    }

    // Camera parameter slots; the anchored frame has none.
    let mut cam_slot: Vec<Option<usize>> = Vec::with_capacity(state.frame_ids.len());
    let mut n_cam = 0usize;
    for pos in 0..state.frame_ids.len() {
        if state.anchor == Some(pos) {
            cam_slot.push(None);
        } else {
            cam_slot.push(Some(n_cam));
            n_cam += 1;
        }
    }

    // Half-bandwidth of the reduced camera system from track spans.
    let mut track_slot_range: Vec<(usize, usize)> = vec![(usize::MAX, 0); state.directions.len()];
    for o in &state.observations {
        if let Some(slot) = cam_slot[o.frame_pos] {
            let r = &mut track_slot_range[o.track_pos];
            r.0 = r.0.min(slot);
            r.1 = r.1.max(slot);
        }
    }
    let max_span = track_slot_range
        .iter()
        .filter(|r| r.0 != usize::MAX)
        .map(|r| r.1 - r.0)
        .max()
        .unwrap_or(0);
    let half_bw = 3 * max_span + 2;

    let mut lambda = params.initial_lambda;
    let mut cost = state.cost();
    let initial_cost = cost;
    if !cost.is_finite() {
        return Err(BundleError::NumericalFailure {
            iteration: 0,
            lambda,
            last_cost: cost,
        });
    }
    let mut log = Vec::new();

    'outer: for iteration in 0..params.max_iterations {
        // Assemble camera diagonal, gradient and per-track blocks at the
        // current iterate.
        let bases: Vec<Matrix3x2<f64>> = state.directions.iter().map(tangent_basis).collect();
        let mut u: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); n_cam];
        let mut g_c: Vec<Vector3<f64>> = vec![Vector3::zeros(); n_cam];
        let mut tracks: Vec<TrackBlocks> = (0..state.directions.len())
            .map(|_| TrackBlocks {
                slots: Vec::new(),
                w: Vec::new(),
                v: Matrix2::zeros(),
                g: Vector2::zeros(),
            })
            .collect();
        let mut gradient_sq = 0.0f64;

        for o in &state.observations {
            let (res, j_att, j_dir) = residual_and_jacobians(
                &state.attitudes[o.frame_pos],
                &state.directions[o.track_pos],
                &bases[o.track_pos],
                &o.ray,
            );
            let tb = &mut tracks[o.track_pos];
            tb.v += j_dir.transpose() * j_dir;
            let g_s = j_dir.transpose() * res;
            tb.g += g_s;
            gradient_sq += g_s.norm_squared();
            if let Some(slot) = cam_slot[o.frame_pos] {
                u[slot] += j_att.transpose() * j_att;
                let g_cam = j_att.transpose() * res;
                g_c[slot] += g_cam;
                gradient_sq += g_cam.norm_squared();
                tb.slots.push(slot);
                tb.w.push(j_att.transpose() * j_dir);
            }
        }

        if gradient_sq.sqrt() < params.gradient_tol {
            break;
        }

        // Damping attempts share the assembled blocks.
        loop {
            let mut h = BandedSymmetric::zeros(3 * n_cam, half_bw.max(2));
            let mut rhs = DVector::<f64>::zeros(3 * n_cam);
            for (slot, (ublk, gblk)) in u.iter().zip(g_c.iter()).enumerate() {
                for r in 0..3 {
                    for c in r..3 {
                        h.add(3 * slot + r, 3 * slot + c, ublk[(r, c)]);
                    }
                    h.add(3 * slot + r, 3 * slot + r, lambda);
                    rhs[3 * slot + r] = -gblk[r];
                }
            }

            let mut v_inv: Vec<Matrix2<f64>> = Vec::with_capacity(tracks.len());
            let mut solvable = true;
            for tb in &tracks {
                let v_damped = tb.v + Matrix2::identity() * lambda;
                match v_damped.try_inverse() {
                    Some(inv) => v_inv.push(inv),
                    None => {
                        solvable = false;
                        break;
                    }
                }
            }
            if !solvable {
                lambda *= 4.0;
                if lambda > 1e14 {
                    break 'outer;
                }
                continue;
            }

            // Schur complement: subtract W V^-1 Wᵀ, adjust the rhs.
            for (tb, vinv) in tracks.iter().zip(v_inv.iter()) {
                for (ai, &slot_a) in tb.slots.iter().enumerate() {
                    let wa_vinv = tb.w[ai] * vinv;
                    let rhs_adj = wa_vinv * tb.g;
                    for r in 0..3 {
                        rhs[3 * slot_a + r] += rhs_adj[r];
                    }
                    for (bi, &slot_b) in tb.slots.iter().enumerate() {
                        if slot_b < slot_a {
                            continue;
                        }
                        let blk = wa_vinv * tb.w[bi].transpose();
                        for r in 0..3 {
                            for c in 0..3 {
                                let (gr, gc) = (3 * slot_a + r, 3 * slot_b + c);
                                if gr <= gc {
                                    h.add(gr, gc, -blk[(r, c)]);
                                }
                            }
                        }
                    }
                }
            }

            let delta_c = match h.cholesky() {
                Ok(ch) => ch.solve(&rhs),
                Err(_) => {
                    lambda *= 4.0;
                    if lambda > 1e14 {
                        break 'outer;
                    }
                    continue;
                }
            };

            // Back-substitute the star increments and retract.
            let mut candidate = state.clone();
            for (pos, slot) in cam_slot.iter().enumerate() {
                if let Some(slot) = slot {
                    let d = Vector3::new(
                        delta_c[3 * slot],
                        delta_c[3 * slot + 1],
                        delta_c[3 * slot + 2],
                    );
                    candidate.attitudes[pos] =
                        candidate.attitudes[pos].compose(&Rotation::exp(&d));
                }
            }
            for (s, (tb, vinv)) in tracks.iter().zip(v_inv.iter()).enumerate() {
                let mut rhs_s = -tb.g;
                for (ai, &slot_a) in tb.slots.iter().enumerate() {
                    let dc = Vector3::new(
                        delta_c[3 * slot_a],
                        delta_c[3 * slot_a + 1],
                        delta_c[3 * slot_a + 2],
                    );
                    rhs_s -= tb.w[ai].transpose() * dc;
                }
                let zeta = vinv * rhs_s;
                // The increment is tangent, so the norm is at least 1 and
                // renormalization fails only on non-finite values.
                let moved = state.directions[s].as_vector() + bases[s] * zeta;
                candidate.directions[s] =
                    UnitVector3::new(moved).map_err(|_| BundleError::NumericalFailure {
                        iteration,
                        lambda,
                        last_cost: cost,
                    })?;
            }

            let new_cost = candidate.cost();
            if !new_cost.is_finite() {
                return Err(BundleError::NumericalFailure {
                    iteration,
                    lambda,
                    last_cost: cost,
                });
            }
            if new_cost < cost {
                let rel_decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                state = candidate;
                cost = new_cost;
                log.push(BundleIteration {
                    iteration,
                    cost,
                    lambda,
                    accepted: true,
                });
                lambda = (lambda / 3.0).max(1e-12);
                if rel_decrease < params.cost_tol_rel {
                    break 'outer;
                }
                break;
            }
            log.push(BundleIteration {
                iteration,
                cost: new_cost,
                lambda,
                accepted: false,
            });
            lambda *= 4.0;
            if lambda > 1e14 {
                break 'outer;
            }
        }
    }

    Ok(BundleResult {
        problem: state,
        initial_cost,
        final_cost: cost,
        log,
    })
}

/// Iteration log rows `iter,cost,lambda,accepted`.
pub fn write_bundle_log<W: Write>(mut w: W, log: &[BundleIteration]) -> std::io::Result<()> {
    writeln!(w, "iter,cost,lambda,accepted")?;
    for rec in log {
        writeln!(
            w,
            "{},{},{},{}",
            rec.iteration, rec.cost, rec.lambda, rec.accepted as u8
        )?;
    }
    Ok(())
}

/// Star-direction dump rows `track_id,x,y,z`.
pub fn write_star_directions<W: Write>(mut w: W, result: &BundleResult) -> std::io::Result<()> {
    writeln!(w, "track_id,x,y,z")?;
    for (id, d) in result
        .problem
        .track_ids
        .iter()
        .zip(result.problem.directions.iter())
    {
        writeln!(w, "{},{},{},{}", id, d.x(), d.y(), d.z())?;
    }
    Ok(())
}
