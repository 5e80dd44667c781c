//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (run with `cargo test --test acceptance -- --nocapture` to see them all).
//!
//! The end-to-end criteria share four full 45 s simulated sequences at the
//! default configuration (20° FOV, 4°/s, 40 ms windows → 1125 frames),
//! differing only in seed, rotation axis and initial attitude.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use evstar::averaging::{
    augmented_rotation_averaging, chain_rotations, objective, AveragingParams, MeasurementSet,
    RelativeEdge,
};
use evstar::bundle::{bundle_adjust, residual_and_jacobians, BaProblem, BundleParams};
use evstar::calibration::{estimate_homography, factor_projection, solve_projection};
use evstar::eval::{evaluate, EvaluationInputs, EvaluationReport};
use evstar::frames::{FrameId, PointSet};
use evstar::geometry::{
    angular_error_deg, backproject, Intrinsics, Rotation, UnitVector3,
};
use evstar::pipeline::{cmd_evaluate, cmd_simulate, cmd_track, PipelineConfig, TrackOutputs};
use evstar::registration::{trimmed_icp, IcpParams, StarTrack, TrackObservation};
use evstar::sim::Trajectory;
use evstar::star_id::{wahba_svd, Correspondence};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

struct Sequence {
    label: String,
    track: TrackOutputs,
    report: EvaluationReport,
    truth: BTreeMap<FrameId, Rotation>,
    wall_s: f64,
}

fn sequence_configs() -> Vec<(u64, [f64; 3], u64, f64)> {
    // (sim seed, rotation axis, catalog seed, initial attitude angle deg)
    vec![
        (22, [1.0, 0.0, 0.0], 2, 15.0),
        (33, [0.6, 0.8, 0.2], 3, -40.0),
        (44, [0.3, -0.9, 0.1], 4, 75.0),
        (55, [-0.7, 0.7, 0.15], 5, 160.0),
    ]
}

fn run_sequence(seed: u64, axis: [f64; 3], cat_seed: u64, init_deg: f64) -> Sequence {
    let t0 = std::time::Instant::now();
    let mut config = PipelineConfig::default();
    config.sim.seed = seed;
    config.catalog.seed = cat_seed;
    config.sim.axis = UnitVector3::from_components(axis[0], axis[1], axis[2]).unwrap();
    config.sim.initial_attitude = Rotation::from_axis_angle(
        &UnitVector3::from_components(0.2, -0.5, 0.8).unwrap(),
        init_deg.to_radians(),
    );
    let dir = tempfile::tempdir().unwrap();
    let sim = cmd_simulate(&config, dir.path()).unwrap();
    let track = cmd_track(&sim.events, &sim.catalog, &config, dir.path()).unwrap();
    let truth: BTreeMap<FrameId, Rotation> = sim
        .ground_truth
        .iter()
        .map(|r| (r.frame, r.rotation))
        .collect();
    let report = evaluate(&EvaluationInputs {
        truth: &truth,
        chained: Some(&track.chained),
        averaged: Some(&track.averaged),
        bundled: Some(&track.bundled),
        identification: Some(&track.identification),
        relatives: Some(&track.relatives),
        runtimes_s: None,
    })
    .unwrap();
    Sequence {
        label: format!("seed {seed}"),
        track,
        report,
        truth,
        wall_s: t0.elapsed().as_secs_f64(),
    }
}

fn sequences() -> &'static [Sequence] {
    static SEQ: OnceLock<Vec<Sequence>> = OnceLock::new();
    SEQ.get_or_init(|| {
        sequence_configs()
            .into_iter()
            .map(|(s, a, c, q)| run_sequence(s, a, c, q))
            .collect()
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> UnitVector3 {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 1e-3 {
            return UnitVector3::new(v).unwrap();
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let axis = random_unit(rng);
    Rotation::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI))
}

// ---------------------------------------------------------------------------
// Criterion 1: end-to-end accuracy
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_end_to_end_accuracy() {
    for seq in sequences() {
        let stats = &seq.report.bundled.as_ref().expect("bundled output").stats;
        assert_eq!(
            stats.count, 1125,
            "{}: expected full 1125-frame coverage",
            seq.label
        );
        assert!(
            stats.rmse_deg <= 1.0,
            "{}: bundle-adjusted RMSE {:.4} deg exceeds 1 deg",
            seq.label,
            stats.rmse_deg
        );
        assert!(
            seq.wall_s <= 300.0,
            "{}: sequence took {:.1}s (budget 300s)",
            seq.label,
            seq.wall_s
        );
        println!(
            "[PASS] criterion 1 ({}): bundle RMSE {:.4} deg <= 1.0 over {} frames in {:.1}s",
            seq.label, stats.rmse_deg, stats.count, seq.wall_s
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 2: relative-rotation quality
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_relative_rotation_quality() {
    for seq in sequences() {
        let stats = seq.report.relative_stats.expect("relative stats");
        assert!(
            stats.rmse_deg <= 0.35,
            "{}: relative-rotation RMSE {:.4} deg exceeds 0.35",
            seq.label,
            stats.rmse_deg
        );
        println!(
            "[PASS] criterion 2 ({}): relative RMSE {:.4} deg <= 0.35 over {} pairs",
            seq.label, stats.rmse_deg, stats.count
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 3: error ordering and drift growth
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_error_ordering() {
    for seq in sequences() {
        let chained = &seq.report.chained.as_ref().unwrap().stats;
        let averaged = &seq.report.averaged.as_ref().unwrap().stats;
        let bundled = &seq.report.bundled.as_ref().unwrap().stats;
        assert!(
            bundled.rmse_deg <= averaged.rmse_deg,
            "{}: bundle {:.4} > averaged {:.4}",
            seq.label,
            bundled.rmse_deg,
            averaged.rmse_deg
        );
        assert!(
            averaged.rmse_deg < chained.rmse_deg,
            "{}: averaged {:.4} >= chained {:.4}",
            seq.label,
            averaged.rmse_deg,
            chained.rmse_deg
        );
        // Drift: chained error grows with frame index.
        let per_frame = &seq.report.chained.as_ref().unwrap().per_frame;
        let quarter = per_frame.len() / 4;
        let mean = |s: &[(FrameId, f64)]| s.iter().map(|&(_, e)| e).sum::<f64>() / s.len() as f64;
        let first = mean(&per_frame[..quarter]);
        let last = mean(&per_frame[per_frame.len() - quarter..]);
        assert!(
            last > first,
            "{}: chained error does not grow ({:.4} -> {:.4})",
            seq.label,
            first,
            last
        );
        println!(
            "[PASS] criterion 3 ({}): bundle {:.4} <= averaged {:.4} < chained {:.4}; drift {:.4} -> {:.4}",
            seq.label, bundled.rmse_deg, averaged.rmse_deg, chained.rmse_deg, first, last
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: Wahba optimality
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_wahba_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a5);
    // One shared pool of a million random rotations.
    let pool: Vec<Matrix3<f64>> = (0..1_000_000)
        .map(|_| *random_rotation(&mut rng).matrix())
        .collect();

    let mut worst_margin = f64::INFINITY;
    for instance in 0..100 {
        let r0 = random_rotation(&mut rng);
        let corrs: Vec<Correspondence> = (0..20)
            .map(|i| {
                let d = random_unit(&mut rng);
                let noisy = UnitVector3::new(
                    r0.apply(&d).as_vector()
                        + Vector3::new(
                            rng.random_range(-1e-3..1e-3),
                            rng.random_range(-1e-3..1e-3),
                            rng.random_range(-1e-3..1e-3),
                        ),
                )
                .unwrap();
                Correspondence {
                    point: [0.0, 0.0],
                    ray: noisy,
                    star_id: i,
                    catalog_direction: d,
                }
            })
            .collect();
        let estimate = wahba_svd(&corrs).unwrap();

        // cost(R) = Σ‖x − R X‖² = 2N − 2 tr(Rᵀ B) for unit vectors.
        let mut b = Matrix3::zeros();
        for c in &corrs {
            b += c.ray.as_vector() * c.catalog_direction.as_vector().transpose();
        }
        let n2 = 2.0 * corrs.len() as f64;
        let cost_of = |m: &Matrix3<f64>| n2 - 2.0 * (m.transpose() * b).trace();
        // Spot-check the trace identity against the direct sum once.
        if instance == 0 {
            let direct: f64 = corrs
                .iter()
                .map(|c| {
                    (c.ray.as_vector() - estimate.apply_vector(c.catalog_direction.as_vector()))
                        .norm_squared()
                })
                .sum();
            assert!((direct - cost_of(estimate.matrix())).abs() < 1e-9);
        }
        let svd_cost = cost_of(estimate.matrix());
        let sampled_min = pool.iter().map(&cost_of).fold(f64::INFINITY, f64::min);
        assert!(
            svd_cost <= sampled_min + 1e-12,
            "instance {instance}: svd cost {svd_cost} beaten by sampling {sampled_min}"
        );
        worst_margin = worst_margin.min(sampled_min - svd_cost);
    }

    // Noiseless instances recover exactly.
    let mut worst_exact = 0.0f64;
    for _ in 0..100 {
        let r0 = random_rotation(&mut rng);
        let corrs: Vec<Correspondence> = (0..20)
            .map(|i| {
                let d = random_unit(&mut rng);
                Correspondence {
                    point: [0.0, 0.0],
                    ray: r0.apply(&d),
                    star_id: i,
                    catalog_direction: d,
                }
            })
            .collect();
        let estimate = wahba_svd(&corrs).unwrap();
        worst_exact = worst_exact.max(angular_error_deg(&estimate, &r0));
    }
    assert!(worst_exact <= 1e-9, "noiseless recovery error {worst_exact}");
    println!(
        "[PASS] criterion 4: wahba_svd beat 10^6-rotation sampling on 100 noisy instances \
         (min margin {worst_margin:.3e}); noiseless recovery <= {worst_exact:.2e} deg"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: trimmed ICP robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_trimmed_icp_robustness() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let trials = 100;
    let mut good = 0;
    for _ in 0..trials {
        let n = 40;
        let rays: Vec<UnitVector3> = (0..n)
            .map(|_| {
                UnitVector3::from_components(
                    rng.random_range(-0.18..0.18),
                    rng.random_range(-0.13..0.13),
                    1.0,
                )
                .unwrap()
            })
            .collect();
        let magnitude = rng.random_range(0.05f64..1.0);
        let r0 = Rotation::from_axis_angle(&random_unit(&mut rng), magnitude.to_radians());
        let target_rays: Vec<UnitVector3> = rays.iter().map(|r| r0.apply(r)).collect();
        let mut src_rays = rays;
        // 30% uniform outliers.
        for corrupt in src_rays.iter_mut().take(n * 3 / 10) {
            *corrupt = random_unit(&mut rng);
        }
        let mk = |frame, rays: Vec<UnitVector3>| PointSet {
            frame,
            points: vec![[0.0, 0.0]; n],
            weights: vec![1.0; n],
            rays,
        };
        let res = trimmed_icp(
            &mk(1, src_rays),
            &mk(2, target_rays),
            0.7,
            &Rotation::identity(),
            &IcpParams::default(),
        )
        .unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "trimmed objective increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        if angular_error_deg(&res.rotation, &r0) <= 0.05 {
            good += 1;
        }
    }
    assert!(good >= 95, "only {good}/{trials} trials within 0.05 deg");
    println!(
        "[PASS] criterion 5: {good}/{trials} contaminated registrations within 0.05 deg; \
         trimmed objective monotone in all trials"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: augmented averaging exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_averaging_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let m = 300;
    let axis = random_unit(&mut rng);
    let truth: Vec<Rotation> = (0..m)
        .map(|i| Rotation::from_axis_angle(&axis, (0.16 * i as f64).to_radians()))
        .collect();
    let mut rel = Vec::new();
    for i in 1..=m {
        for j in i + 1..=m.min(i + 5) {
            rel.push(RelativeEdge {
                from: i,
                to: j,
                rotation: truth[j - 1].compose(&truth[i - 1].transpose()),
            });
        }
    }
    let anchors: Vec<(usize, Rotation)> =
        (1..=m).step_by(25).map(|k| (k, truth[k - 1])).collect();
    let ms = MeasurementSet::new(m, rel.clone(), anchors.clone(), 1.0).unwrap();
    let result = augmented_rotation_averaging(&ms, &AveragingParams::default()).unwrap();
    let mut worst = 0.0f64;
    for (got, want) in result.attitudes.iter().zip(truth.iter()) {
        worst = worst.max(angular_error_deg(got, want));
    }
    assert!(worst <= 1e-6, "exact-recovery error {worst} deg");

    // alpha = 1e6 pins anchored frames to their measurements.
    let noisy_rel: Vec<RelativeEdge> = rel
        .iter()
        .map(|e| RelativeEdge {
            from: e.from,
            to: e.to,
            rotation: Rotation::from_axis_angle(
                &random_unit(&mut rng),
                rng.random_range(0.0..0.1f64).to_radians(),
            )
            .compose(&e.rotation),
        })
        .collect();
    let ms = MeasurementSet::new(m, noisy_rel, anchors.clone(), 1e6).unwrap();
    let result = augmented_rotation_averaging(&ms, &AveragingParams::default()).unwrap();
    let mut worst_pin = 0.0f64;
    for (k, meas) in &anchors {
        worst_pin = worst_pin.max(angular_error_deg(&result.attitudes[k - 1], meas));
    }
    assert!(worst_pin <= 1e-3, "alpha=1e6 pinning error {worst_pin} deg");
    println!(
        "[PASS] criterion 6: exact recovery <= {worst:.2e} deg; alpha=1e6 pins anchors to \
         {worst_pin:.2e} deg"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: bundle adjustment correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_bundle_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    // Analytic Jacobians against central finite differences.
    let h = 1e-6;
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let r = random_rotation(&mut rng);
        let x = random_unit(&mut rng);
        let ray = random_unit(&mut rng);
        let basis = {
            // Reuse the internal basis through the public jacobian API by
            // projecting two arbitrary tangent vectors.
            let v = x.as_vector();
            let seed = if v.x.abs() <= v.y.abs() && v.x.abs() <= v.z.abs() {
                Vector3::x()
            } else if v.y.abs() <= v.z.abs() {
                Vector3::y()
            } else {
                Vector3::z()
            };
            let b1 = (seed - v * seed.dot(v)).normalize();
            let b2 = v.cross(&b1);
            nalgebra::Matrix3x2::from_columns(&[b1, b2])
        };
        let (_, j_att, j_dir) = residual_and_jacobians(&r, &x, &basis, &ray);
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let fp = ray.as_vector()
                - r.compose(&Rotation::exp(&d)).apply_vector(x.as_vector());
            let fm = ray.as_vector()
                - r.compose(&Rotation::exp(&(-d))).apply_vector(x.as_vector());
            let fd = (fp - fm) / (2.0 * h);
            let col = j_att.column(k);
            worst_rel = worst_rel.max((fd - col).norm() / col.norm().max(1e-8));
        }
        for k in 0..2 {
            let mut z = Vector2::zeros();
            z[k] = h;
            let xp = UnitVector3::new(x.as_vector() + basis * z).unwrap();
            let xm = UnitVector3::new(x.as_vector() - basis * z).unwrap();
            let fp = ray.as_vector() - r.apply_vector(xp.as_vector());
            let fm = ray.as_vector() - r.apply_vector(xm.as_vector());
            let fd = (fp - fm) / (2.0 * h);
            let col = j_dir.column(k);
            worst_rel = worst_rel.max((fd - col).norm() / col.norm().max(1e-8));
        }
    }
    assert!(worst_rel <= 1e-5, "jacobian mismatch {worst_rel}");

    // Strictly decreasing accepted costs on a real problem, and gauge
    // invariance of the objective.
    let axis = random_unit(&mut rng);
    let truth: BTreeMap<FrameId, Rotation> = (1..=15)
        .map(|i| {
            (
                i,
                Rotation::from_axis_angle(&axis, (0.2 * i as f64).to_radians()),
            )
        })
        .collect();
    let stars: Vec<UnitVector3> = (0..10)
        .map(|_| {
            let cam = UnitVector3::from_components(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.15..0.15),
                1.0,
            )
            .unwrap();
            truth[&1].transpose().apply(&cam)
        })
        .collect();
    let tracks: Vec<StarTrack> = stars
        .iter()
        .enumerate()
        .map(|(s, star)| StarTrack {
            id: s,
            observations: (1..=15)
                .map(|i| TrackObservation {
                    frame: i,
                    point: [0.0, 0.0],
                    ray: truth[&i].apply(star),
                })
                .collect(),
        })
        .collect();
    let perturbed: BTreeMap<FrameId, Rotation> = truth
        .iter()
        .map(|(&f, r)| {
            (
                f,
                Rotation::from_axis_angle(&random_unit(&mut rng), 0.3f64.to_radians()).compose(r),
            )
        })
        .collect();
    let problem = BaProblem::from_tracks(&perturbed, &tracks).unwrap();
    let c0 = problem.cost();
    for _ in 0..5 {
        let q = random_rotation(&mut rng);
        let mut shifted = problem.clone();
        for r in shifted.attitudes.iter_mut() {
            *r = r.compose(&q.transpose());
        }
        for d in shifted.directions.iter_mut() {
            *d = q.apply(d);
        }
        let c1 = shifted.cost();
        assert!(
            (c0 - c1).abs() <= 1e-9 * c0.max(1e-30),
            "objective not gauge invariant: {c0} vs {c1}"
        );
    }
    let result = bundle_adjust(&problem, &BundleParams::default()).unwrap();
    let accepted: Vec<f64> = result
        .log
        .iter()
        .filter(|l| l.accepted)
        .map(|l| l.cost)
        .collect();
    assert!(!accepted.is_empty());
    for w in accepted.windows(2) {
        assert!(w[1] < w[0], "accepted cost did not decrease");
    }
    assert!(result.final_cost <= result.initial_cost);
    println!(
        "[PASS] criterion 7: jacobians match FD to {worst_rel:.2e} rel; {} accepted steps \
         strictly decreasing; objective gauge-invariant to 1e-9",
        accepted.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: calibration round-trip
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_calibration_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_k = 0.0f64;
    let mut worst_r = 0.0f64;
    for _ in 0..20 {
        let k0 = Intrinsics::new(
            rng.random_range(400.0..900.0),
            rng.random_range(400.0..900.0),
            rng.random_range(100.0..200.0),
            rng.random_range(80.0..150.0),
            rng.random_range(-2.0..2.0),
        )
        .unwrap();
        let r0 = random_rotation(&mut rng);
        let pairs: Vec<([f64; 2], UnitVector3)> = (0..15)
            .map(|_| {
                let cam = UnitVector3::from_components(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    1.0,
                )
                .unwrap();
                let dir = r0.transpose().apply(&cam);
                let img = k0.matrix() * cam.as_vector();
                ([img.x / img.z, img.y / img.z], dir)
            })
            .collect();
        let p = solve_projection(&pairs).unwrap();
        let (k, r) = factor_projection(&p).unwrap();
        worst_k = worst_k.max((k.matrix() - k0.matrix()).norm() / k0.matrix().norm());
        worst_r = worst_r.max(angular_error_deg(&r, &r0));
    }
    assert!(worst_k <= 1e-6, "intrinsics recovery error {worst_k}");
    assert!(worst_r <= 1e-6, "rotation recovery error {worst_r} deg");

    // Noiseless DLT homography recovery to 1e-9.
    let truth = Matrix3::new(1.1, 0.08, -4.0, -0.05, 0.95, 6.0, 4e-4, -6e-4, 1.0);
    let mut worst_h = 0.0f64;
    for _ in 0..20 {
        let pairs: Vec<([f64; 2], [f64; 2])> = (0..10)
            .map(|_| {
                let s = [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)];
                let v = truth * Vector3::new(s[0], s[1], 1.0);
                (s, [v.x / v.z, v.y / v.z])
            })
            .collect();
        let h = estimate_homography(&pairs).unwrap();
        worst_h = worst_h.max((h - truth).norm() / truth.norm());
    }
    assert!(worst_h <= 1e-9, "homography recovery error {worst_h}");
    println!(
        "[PASS] criterion 8: projection factorization recovers K to {worst_k:.2e}, R to \
         {worst_r:.2e} deg; homography exact to {worst_h:.2e}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism() {
    let mut config = PipelineConfig::default();
    config.sim.seed = 22;
    config.catalog.seed = 2;
    config.sim.duration_s = 8.0;
    config.sim.axis = UnitVector3::from_components(1.0, 0.0, 0.0).unwrap();

    let run = || -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let sim_dir = dir.path().join("sim");
        let track_dir = dir.path().join("track");
        let eval_dir = dir.path().join("eval");
        let sim = cmd_simulate(&config, &sim_dir).unwrap();
        cmd_track(&sim.events, &sim.catalog, &config, &track_dir).unwrap();
        cmd_evaluate(&track_dir, &sim_dir.join("gt_attitude.txt"), &eval_dir).unwrap();
        (
            std::fs::read(sim_dir.join("events.csv")).unwrap(),
            std::fs::read(track_dir.join("attitude_chained.txt")).unwrap(),
            std::fs::read(track_dir.join("attitude_averaged.txt")).unwrap(),
            std::fs::read(track_dir.join("attitude_bundled.txt")).unwrap(),
            std::fs::read(eval_dir.join("report.json")).unwrap(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0, "event streams differ");
    assert_eq!(a.1, b.1, "chained attitude files differ");
    assert_eq!(a.2, b.2, "averaged attitude files differ");
    assert_eq!(a.3, b.3, "bundled attitude files differ");
    assert_eq!(a.4, b.4, "evaluation reports differ");
    println!(
        "[PASS] criterion 9: repeated runs byte-identical (events {} bytes, report {} bytes)",
        a.0.len(),
        a.4.len()
    );
}

// ---------------------------------------------------------------------------
// Structural extras exercised alongside the criteria
// ---------------------------------------------------------------------------

/// The three-bucket absolute-rotation table is emitted and consistent.
#[test]
fn absolute_rotation_buckets_structural() {
    for seq in sequences() {
        let buckets = seq.report.absolute_buckets.expect("buckets");
        let total = buckets.below_1_deg + buckets.from_1_to_10_deg + buckets.above_10_deg;
        let identified = seq
            .track
            .identification
            .iter()
            .filter(|r| r.rotation.is_some())
            .count();
        assert_eq!(total, identified, "{}: bucket total mismatch", seq.label);
        println!(
            "[PASS] buckets ({}): <1deg {}, 1-10deg {}, >10deg {}",
            seq.label, buckets.below_1_deg, buckets.from_1_to_10_deg, buckets.above_10_deg
        );
    }
}

/// Fault injection: corrupting one frame's points drops that frame without
/// disturbing the others (Table-1-style tolerance to bad identifications).
#[test]
fn fault_injection_drops_corrupted_frame() {
    use evstar::frames::{build_event_images, mean_filter, extract_points};
    use evstar::star_id::{absolute_rotations, build_index, identify, ExtractionParams, IdentifyParams};

    let mut config = PipelineConfig::default();
    config.sim.seed = 22;
    config.catalog.seed = 2;
    config.sim.duration_s = 4.0;
    config.sim.axis = UnitVector3::from_components(1.0, 0.0, 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sim = cmd_simulate(&config, dir.path()).unwrap();
    let k = config.intrinsics();
    let images = build_event_images(&sim.events, 0, 4_000_000, 40.0, 240, 180);
    let index = build_index(&sim.catalog, 20.0, 3.6, 0.2, 12);
    let params = IdentifyParams::default();
    let extraction = ExtractionParams {
        epsilon1: 2.0,
        mode: evstar::frames::PointsMode::Centroids,
    };
    let selected: Vec<FrameId> = vec![10, 20, 30];
    let clean = absolute_rotations(&images, &selected, &index, &k, &extraction, &params);
    assert_eq!(clean.rotations.len(), 3);

    // Corrupt frame 20's points by shuffling them to random positions.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut points = extract_points(&mean_filter(&images[19]), 2.0, &k, 20);
    for p in points.points.iter_mut() {
        *p = [rng.random_range(0.0..240.0), rng.random_range(0.0..180.0)];
    }
    points.rays = points.points.iter().map(|&p| backproject(p, &k)).collect();
    let corrupted = identify(&points, &index, &k, &params);
    assert!(corrupted.is_err(), "random pattern should not identify");
    // Other frames unaffected.
    let partial = absolute_rotations(&images, &[10, 30], &index, &k, &extraction, &params);
    for f in [10usize, 30] {
        let a = clean.rotations[&f];
        let b = partial.rotations[&f];
        assert!(angular_error_deg(&a, &b) == 0.0);
    }
    println!("[PASS] fault injection: corrupted frame dropped, others unaffected");
}

/// Absolute rotations on clean sequences stay within 1 deg of ground truth.
#[test]
fn absolute_rotations_within_one_degree() {
    for seq in sequences() {
        for rec in &seq.track.identification {
            if let Some(rot) = rec.rotation {
                let err = angular_error_deg(&rot, &seq.truth[&rec.frame]);
                assert!(
                    err < 1.0,
                    "{}: frame {} absolute error {:.3} deg",
                    seq.label,
                    rec.frame,
                    err
                );
            }
        }
    }
    println!("[PASS] absolute rotations all within 1 deg on clean sequences");
}

/// Gauge sanity for the trajectory model used by the fixtures.
#[test]
fn trajectory_consistency() {
    let config = PipelineConfig::default();
    let trajectory = Trajectory {
        initial: config.sim.initial_attitude,
        axis: config.sim.axis,
        omega_deg_per_s: config.sim.omega_deg_per_s,
        times_s: vec![],
        rotations: vec![],
    };
    let r0 = trajectory.attitude_at(0.0);
    let r45 = trajectory.attitude_at(45.0);
    assert!((angular_error_deg(&r45, &r0) - 180.0).abs() < 1e-9);
    println!("[PASS] trajectory: 4 deg/s for 45 s sweeps 180 deg");
}

/// The averaging objective helper agrees with a direct recomputation on a
/// pipeline-scale measurement set (used by the convergence logs).
#[test]
fn averaging_objective_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let truth: Vec<Rotation> = (0..40)
        .map(|i| {
            Rotation::from_axis_angle(
                &UnitVector3::from_components(0.0, 1.0, 0.0).unwrap(),
                (0.16 * i as f64).to_radians(),
            )
        })
        .collect();
    let rel: Vec<RelativeEdge> = (1..40)
        .map(|i| RelativeEdge {
            from: i,
            to: i + 1,
            rotation: truth[i].compose(&truth[i - 1].transpose()),
        })
        .collect();
    let ms = MeasurementSet::new(40, rel, vec![(1, truth[0])], 2.0).unwrap();
    let attitudes: Vec<Rotation> = (0..40).map(|_| random_rotation(&mut rng)).collect();
    let dummy = random_rotation(&mut rng);
    let got = objective(&ms, &attitudes, &dummy);
    let mut want = 0.0;
    for e in ms.relative() {
        want += (attitudes[e.to - 1].matrix() - e.rotation.matrix() * attitudes[e.from - 1].matrix())
            .norm();
    }
    for (k, r) in ms.absolute() {
        want += ms.alpha() * (attitudes[k - 1].matrix() - r.matrix() * dummy.matrix()).norm();
    }
    assert!((got - want).abs() < 1e-12);
    println!("[PASS] averaging objective helper consistent");
}
