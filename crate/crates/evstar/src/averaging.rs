//! Augmented rotation averaging: fuse relative rotations on the window
//! adjacency graph with absolute rotations entering as relative edges to a
//! dummy anchor node.
//!
//! The objective is the sum of unsquared chordal residuals
//!
//! ```text
//! Σ_{⟨j,i⟩} ‖R_j − R̃_{j,i} R_i‖_F  +  α Σ_{k∈𝒜} ‖R_k − R̃_k R_{M+1}‖_F
//! ```
//!
//! minimized by IRLS in the tangent space: Huber-style weights on the
//! current residuals, one weighted Gauss-Newton step over so(3) increments
//! (a banded system with a dense border for the dummy node), retraction,
//! and a backtracking halving that accepts a step only when the objective
//! does not increase, so the objective is non-increasing by construction.
//! All variables start at identity; the gauge is fixed afterwards by
//! right-multiplying every attitude with the dummy node's transpose.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::frames::FrameId;
use crate::geometry::{skew, Rotation};
use crate::linalg::{solve_bordered_banded, BandedSymmetric};
use crate::registration::RelativeRotation;

#[derive(Debug, Error)]
pub enum AveragingError {
    #[error("no absolute rotations: the gauge is unanchored")]
    AnchorFree,
    #[error("measurement graph disconnected: frames {start}..={end} unreachable from any anchor")]
    Disconnected { start: FrameId, end: FrameId },
    #[error("frames {start}..={end} unreachable by chaining")]
    UnchainedSegment { start: FrameId, end: FrameId },
    #[error("frame index {0} outside 1..={1}")]
    FrameOutOfRange(FrameId, usize),
    #[error("linear solve failed: {0}")]
    Solve(#[from] crate::linalg::LinalgError),
}

/// One relative edge `⟨to ← from⟩` with its measured rotation.
#[derive(Debug, Clone)]
pub struct RelativeEdge {
    pub from: FrameId,
    pub to: FrameId,
    pub rotation: Rotation,
}

/// Relative measurements on the adjacency graph plus absolute measurements
/// on the selected frames, with the absolute weight α.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    frame_count: usize,
    relative: Vec<RelativeEdge>,
    absolute: Vec<(FrameId, Rotation)>,
    alpha: f64,
}

impl MeasurementSet {
    /// Edges are canonicalized (sorted) so downstream results do not depend
    /// on the caller's edge order.
    pub fn new(
        frame_count: usize,
        relative: Vec<RelativeEdge>,
        absolute: Vec<(FrameId, Rotation)>,
        alpha: f64,
    ) -> Result<Self, AveragingError> {
        let mut relative = relative;
        let mut absolute = absolute;
        for e in &relative {
            for f in [e.from, e.to] {
                if f == 0 || f > frame_count {
                    return Err(AveragingError::FrameOutOfRange(f, frame_count));
                }
            }
        }
        for &(f, _) in &absolute {
            if f == 0 || f > frame_count {
                return Err(AveragingError::FrameOutOfRange(f, frame_count));
            }
        }
        relative.sort_by_key(|e| (e.to, e.from));
        absolute.sort_by_key(|&(f, _)| f);
        Ok(Self {
            frame_count,
            relative,
            absolute,
            alpha,
        })
    }

    pub fn from_relatives(
        frame_count: usize,
        relatives: &[RelativeRotation],
        absolute: Vec<(FrameId, Rotation)>,
        alpha: f64,
    ) -> Result<Self, AveragingError> {
        let edges = relatives
            .iter()
            .map(|r| RelativeEdge {
                from: r.from,
                to: r.to,
                rotation: r.rotation,
            })
            .collect();
        Self::new(frame_count, edges, absolute, alpha)
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }
    pub fn relative(&self) -> &[RelativeEdge] {
        &self.relative
    }
    pub fn absolute(&self) -> &[(FrameId, Rotation)] {
        &self.absolute
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Connected components of the (M+1)-node graph; errors with the first
    /// frame segment that cannot reach an anchor.
    fn check_connected(&self) -> Result<(), AveragingError> {
        let m = self.frame_count;
        let dummy = m; // 0-based node index of the dummy
        let mut parent: Vec<usize> = (0..=m).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let union = |parent: &mut [usize], a: usize, b: usize| {
            let (ra, rb) = (find(parent, a), find(parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        };
        for e in &self.relative {
            union(&mut parent, e.from - 1, e.to - 1);
        }
        for &(k, _) in &self.absolute {
            union(&mut parent, k - 1, dummy);
        }
        let anchor_root = find(&mut parent, dummy);
        let mut bad: Vec<FrameId> = Vec::new();
        for node in 0..m {
            if find(&mut parent, node) != anchor_root {
                bad.push(node + 1);
            }
        }
        if let (Some(&start), Some(&end)) = (bad.first(), bad.last()) {
            return Err(AveragingError::Disconnected { start, end });
        }
        Ok(())
    }
}

/// The augmented averaging objective (sum of unsquared Frobenius residuals).
pub fn objective(ms: &MeasurementSet, attitudes: &[Rotation], dummy: &Rotation) -> f64 {
    let rel: f64 = ms
        .relative
        .iter()
        .map(|e| {
            (attitudes[e.to - 1].matrix() - e.rotation.matrix() * attitudes[e.from - 1].matrix())
                .norm()
        })
        .sum();
    let abs: f64 = ms
        .absolute
        .iter()
        .map(|(k, r)| (attitudes[k - 1].matrix() - r.matrix() * dummy.matrix()).norm())
        .sum();
    rel + ms.alpha * abs
}

#[derive(Debug, Clone, Copy)]
pub struct AveragingParams {
    /// Huber scale on the chordal residual; residuals above it are
    /// downweighted as 1/r.
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the largest per-node update, radians.
    pub update_tol_rad: f64,
}

impl Default for AveragingParams {
    fn default() -> Self {
        Self {
            huber_delta: 0.1,
            max_iterations: 200,
            update_tol_rad: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AveragingIteration {
    pub iteration: usize,
    pub objective: f64,
    pub max_update_rad: f64,
}

#[derive(Debug, Clone)]
pub struct AveragingResult {
    /// One attitude per frame, gauge-fixed so the dummy node is identity.
    pub attitudes: Vec<Rotation>,
    pub log: Vec<AveragingIteration>,
}

/// Jacobian of `vec(R·exp(δ))` with respect to δ at zero: columns are
/// `vec(R·[e_k]×)` (column-major flattening).
fn retraction_jacobian(r: &Matrix3<f64>) -> SMatrix<f64, 9, 3> {
    let mut j = SMatrix::<f64, 9, 3>::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = 1.0;
        let m = r * skew(&e);
        for (idx, v) in m.iter().enumerate() {
            j[(idx, k)] = *v;
        }
    }
    j
}

fn flatten(m: &Matrix3<f64>) -> SMatrix<f64, 9, 1> {
    let mut out = SMatrix::<f64, 9, 1>::zeros();
    for (idx, v) in m.iter().enumerate() {
        out[idx] = *v;
    }
    out
}

/// Solve the augmented rotation averaging problem.
///
/// Requires at least one absolute measurement and a connected measurement
/// graph. Returns gauge-fixed attitudes and the convergence log.
pub fn augmented_rotation_averaging(
    ms: &MeasurementSet,
    params: &AveragingParams,
) -> Result<AveragingResult, AveragingError> {
    if ms.absolute.is_empty() {
        return Err(AveragingError::AnchorFree);
    }
    ms.check_connected()?;

    let m = ms.frame_count;
    let n_nodes = m + 1; // frames plus dummy
    let mut rotations: Vec<Rotation> = vec![Rotation::identity(); n_nodes];

    // Banded width from the largest frame-to-frame gap; the dummy node is
    // the dense border.
    let max_gap = ms
        .relative
        .iter()
        .map(|e| e.to - e.from)
        .max()
        .unwrap_or(1);
    let half_bw = 3 * max_gap + 2;

    let mut log = Vec::new();
    let mut current_obj = {
        let (frames, dummy) = rotations.split_at(m);
        objective(ms, frames, &dummy[0])
    };

    for iteration in 0..params.max_iterations {
        let mut h = BandedSymmetric::zeros(3 * m, half_bw);
        let mut border = DMatrix::<f64>::zeros(3 * m, 3);
        let mut corner = Matrix3::<f64>::zeros();
        let mut g = DVector::<f64>::zeros(3 * n_nodes);

        let add_edge =
            |h: &mut BandedSymmetric,
             border: &mut DMatrix<f64>,
             corner: &mut Matrix3<f64>,
             g: &mut DVector<f64>,
             node_i: usize,
             node_j: usize,
             meas: &Rotation,
             weight: f64| {
                let r_i = rotations[node_i].matrix();
                let r_j = rotations[node_j].matrix();
                let residual = flatten(&(r_j - meas.matrix() * r_i));
                let j_j = retraction_jacobian(r_j);
                let j_i = -retraction_jacobian(&(meas.matrix() * r_i));

                let hjj = j_j.transpose() * j_j * weight;
                let hii = j_i.transpose() * j_i * weight;
                let hji = j_j.transpose() * j_i * weight;
                let gj = j_j.transpose() * residual * weight;
                let gi = j_i.transpose() * residual * weight;

                let mut add_block = |a: usize, b: usize, blk: &Matrix3<f64>| {
                    for r in 0..3 {
                        for c in 0..3 {
                            let (gr, gc) = (3 * a + r, 3 * b + c);
                            if gr > gc {
                                continue;
                            }
                            if gc >= 3 * m {
                                if gr >= 3 * m {
                                    // Both in the dummy corner.
                                    corner[(gr - 3 * m, gc - 3 * m)] += blk[(r, c)];
                                    if gr != gc {
                                        corner[(gc - 3 * m, gr - 3 * m)] += blk[(r, c)];
                                    }
                                } else {
                                    border[(gr, gc - 3 * m)] += blk[(r, c)];
                                }
                            } else {
                                h.add(gr, gc, blk[(r, c)]);
                            }
                        }
                    }
                };
                add_block(node_j, node_j, &hjj);
                add_block(node_i, node_i, &hii);
                if node_j <= node_i {
                    add_block(node_j, node_i, &hji);
                } else {
                    add_block(node_i, node_j, &hji.transpose());
                }
                for r in 0..3 {
                    g[3 * node_j + r] += gj[r];
                    g[3 * node_i + r] += gi[r];
                }
            };

        // IRLS weights from the current residuals.
        for e in &ms.relative {
            let res = (rotations[e.to - 1].matrix()
                - e.rotation.matrix() * rotations[e.from - 1].matrix())
            .norm();
            let w = 1.0 / res.max(params.huber_delta);
            add_edge(&mut h, &mut border, &mut corner, &mut g, e.from - 1, e.to - 1, &e.rotation, w);
        }
        for (k, meas) in &ms.absolute {
            let res =
                (rotations[k - 1].matrix() - meas.matrix() * rotations[m].matrix()).norm();
            let w = ms.alpha / res.max(params.huber_delta);
            add_edge(&mut h, &mut border, &mut corner, &mut g, m, k - 1, meas, w);
        }

        // Tiny Tikhonov term controls the global-gauge null direction.
        let damping = 1e-9 * (1.0 + ms.alpha);
        h.add_diagonal(damping);
        for d in 0..3 {
            corner[(d, d)] += damping;
        }

        let corner_dyn = DMatrix::from_fn(3, 3, |r, c| corner[(r, c)]);
        let delta = solve_bordered_banded(h, &border, &corner_dyn, &(-&g))?;

        // Backtracking on the augmented objective.
        let mut scale = 1.0f64;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate: Vec<Rotation> = rotations
                .iter()
                .enumerate()
                .map(|(n, r)| {
                    let d = Vector3::new(
                        delta[3 * n] * scale,
                        delta[3 * n + 1] * scale,
                        delta[3 * n + 2] * scale,
                    );
                    r.compose(&Rotation::exp(&d))
                })
                .collect();
            let (frames, dummy) = candidate.split_at(m);
            let obj = objective(ms, frames, &dummy[0]);
            if obj <= current_obj {
                accepted = Some((candidate, obj));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, obj)) = accepted else {
            break;
        };
        let max_update = (0..n_nodes)
            .map(|n| {
                (delta[3 * n].powi(2) + delta[3 * n + 1].powi(2) + delta[3 * n + 2].powi(2)).sqrt()
                    * scale
            })
            .fold(0.0f64, f64::max);
        rotations = candidate;
        current_obj = obj;
        log.push(AveragingIteration {
            iteration,
            objective: obj,
            max_update_rad: max_update,
        });
        if max_update < params.update_tol_rad {
            break;
        }
    }

    // Gauge fix: right-multiply by the dummy transpose, leaving residuals
    // unchanged and the dummy at identity.
    let dummy_t = rotations[m].transpose();
    let attitudes = rotations[..m]
        .iter()
        .map(|r| r.compose(&dummy_t).renormalized())
        .collect();
    Ok(AveragingResult { attitudes, log })
}

/// Baseline: anchor at the earliest absolute rotation and chain relative
/// edges outward, bridging gaps with the shortest available edge.
pub fn chain_rotations(ms: &MeasurementSet) -> Result<Vec<Rotation>, AveragingError> {
    if ms.absolute.is_empty() {
        return Err(AveragingError::AnchorFree);
    }
    let m = ms.frame_count;
    let (anchor_frame, anchor_rot) = ms.absolute[0];
    let mut attitudes: Vec<Option<Rotation>> = vec![None; m];
    attitudes[anchor_frame - 1] = Some(anchor_rot);

    // Edges keyed for lookup: incoming[to] and outgoing[from].
    let mut incoming: BTreeMap<FrameId, Vec<&RelativeEdge>> = BTreeMap::new();
    let mut outgoing: BTreeMap<FrameId, Vec<&RelativeEdge>> = BTreeMap::new();
    for e in &ms.relative {
        incoming.entry(e.to).or_default().push(e);
        outgoing.entry(e.from).or_default().push(e);
    }

    // Forward pass: R_to = R̃_{to,from} · R_from.
    for t in anchor_frame + 1..=m {
        let best = incoming
            .get(&t)
            .into_iter()
            .flatten()
            .filter(|e| attitudes[e.from - 1].is_some())
            .min_by_key(|e| t - e.from);
        match best {
            Some(e) => {
                let base = attitudes[e.from - 1].unwrap();
                attitudes[t - 1] = Some(e.rotation.compose(&base).renormalized());
            }
            None => {
                return Err(AveragingError::UnchainedSegment { start: t, end: m });
            }
        }
    }
    // Backward pass: R_from = R̃ᵀ · R_to.
    for t in (1..anchor_frame).rev() {
        let best = outgoing
            .get(&t)
            .into_iter()
            .flatten()
            .filter(|e| attitudes[e.to - 1].is_some())
            .min_by_key(|e| e.to - t);
        match best {
            Some(e) => {
                let base = attitudes[e.to - 1].unwrap();
                attitudes[t - 1] = Some(e.rotation.transpose().compose(&base).renormalized());
            }
            None => {
                return Err(AveragingError::UnchainedSegment { start: 1, end: t });
            }
        }
    }
    Ok(attitudes.into_iter().map(|r| r.unwrap()).collect())
}

/// Convergence log rows `iter,objective,max_update`.
pub fn write_convergence_log<W: Write>(
    mut w: W,
    log: &[AveragingIteration],
) -> std::io::Result<()> {
    writeln!(w, "iter,objective,max_update")?;
    for rec in log {
        writeln!(w, "{},{},{}", rec.iteration, rec.objective, rec.max_update_rad)?;
    }
    Ok(())
}
