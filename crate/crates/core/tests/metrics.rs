mod common;

use common::*;
use graphpose_core::data::{Pose, REST_POSE_MM};
use graphpose_core::metrics::{
    fit_similarity, joint_errors, mpjpe, pa_mpjpe, pck, pck_counts, per_joint_mpjpe, procrustes_align,
    squared_residual, torso_length, MetricsReport, PCK_THRESHOLDS, TABLE1_COLUMNS,
};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::RngExt;

fn rest() -> Pose {
    Pose::new(REST_POSE_MM.to_vec())
}

fn noisy(r: &mut rand_chacha::ChaCha8Rng, gt: &Pose, sigma: f64) -> Pose {
    let d = normals(r, 3 * gt.num_joints());
    Pose::new(gt.joints().iter().zip(d.chunks(3)).map(|(p, e)| [0, 1, 2].map(|k| p[k] + sigma * e[k])).collect())
}

#[test]
fn uniform_offset_is_exactly_five() {
    let gt = rest();
    let pred = gt.map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]);
    assert_eq!(mpjpe(&pred, &gt).unwrap(), 5.0);
    assert!(joint_errors(&pred, &gt).unwrap().iter().all(|&e| e == 5.0));
}

#[test]
fn pck_matches_counting_oracle() {
    let mut r = rng(200);
    for _ in 0..200 {
        let gt = random_pose(&mut r, 17);
        let sigma = r.random_range(1.0..400.0);
        let pred = noisy(&mut r, &gt, sigma);
        let aligned = procrustes_align(&pred, &gt).unwrap();
        let torso = {
            let (a, b) = (gt.joints()[9], gt.joints()[0]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        assert_eq!(torso_length(&gt).unwrap(), torso);
        let got = pck(&pred, &gt, &PCK_THRESHOLDS).unwrap();
        for k in PCK_THRESHOLDS {
            let mut hits = 0;
            for (p, g) in aligned.joints().iter().zip(gt.joints()) {
                let e = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
                if e <= k as f64 / 100.0 * torso {
                    hits += 1;
                }
            }
            assert_eq!(got[&k], 100.0 * hits as f64 / 17.0);
        }
        let (counts, n) = pck_counts(&pred, &gt, &[10, 50]).unwrap();
        assert_eq!(n, 17);
        assert!(counts[0] <= counts[1]);
    }
}

#[test]
fn per_joint_mean_equals_mpjpe_and_report_matches_loop() {
    let mut r = rng(201);
    let gts: Vec<Pose> = (0..40).map(|_| random_pose(&mut r, 17)).collect();
    let preds: Vec<Pose> = gts.iter().map(|g| noisy(&mut r, g, 60.0)).collect();
    let per_joint = per_joint_mpjpe(&preds, &gts).unwrap();
    let report = MetricsReport::from_batch(&preds, &gts).unwrap();
    let loop_mpjpe = preds.iter().zip(&gts).map(|(p, g)| mpjpe(p, g).unwrap()).sum::<f64>() / 40.0;
    let loop_pa = preds.iter().zip(&gts).map(|(p, g)| pa_mpjpe(p, g).unwrap()).sum::<f64>() / 40.0;
    assert!((per_joint.iter().sum::<f64>() / 17.0 - loop_mpjpe).abs() < 1e-9);
    assert!((report.mpjpe_mm - loop_mpjpe).abs() < 1e-9);
    assert!((report.pa_mpjpe_mm - loop_pa).abs() < 1e-9);
    assert_eq!(report.per_joint_mpjpe_mm, per_joint);
    assert_eq!(report.joint_names[0], "Bot Torso");
    assert_eq!(report.joint_names[16], "L.Hand");
}

#[test]
fn csv_schemas() {
    let gt = rest();
    let report = MetricsReport::from_batch(&[gt.clone()], &[gt]).unwrap();
    assert_eq!(
        MetricsReport::table1_header(),
        "Method,PCK@10,PCK@20,PCK@30,PCK@40,PCK@50,MPJPE,PA-MPJPE"
    );
    let row = report.table1_row("x");
    assert_eq!(row.split(',').count(), TABLE1_COLUMNS.len());
    let csv = report.per_joint_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "Joint,MPJPE");
    assert_eq!(lines.len(), 1 + 17 + 1);
    assert!(lines[18].starts_with("Average,"));
}

#[test]
fn procrustes_never_increases_squared_residual() {
    let mut r = rng(202);
    for _ in 0..1000 {
        let gt = random_pose(&mut r, 17);
        let pred = random_pose(&mut r, 17);
        let aligned = procrustes_align(&pred, &gt).unwrap();
        assert!(squared_residual(&aligned, &gt) <= squared_residual(&pred, &gt) * (1.0 + 1e-12));
    }
}

#[test]
fn pa_mpjpe_is_similarity_invariant() {
    let mut r = rng(203);
    for _ in 0..200 {
        let gt = random_pose(&mut r, 17);
        let pred = noisy(&mut r, &gt, 80.0);
        let base = pa_mpjpe(&pred, &gt).unwrap();
        let moved = random_similarity(&mut r, &pred);
        let after = pa_mpjpe(&moved, &gt).unwrap();
        assert!((after - base).abs() <= 1e-6 * base.max(1.0), "{base} vs {after}");
    }
}

#[test]
fn similarity_images_are_recovered_exactly() {
    let mut r = rng(204);
    for _ in 0..200 {
        let gt = random_pose(&mut r, 17);
        let pred = random_similarity(&mut r, &gt);
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-6);
    }
}

#[test]
fn no_sampled_transform_beats_the_closed_form() {
    let mut r = rng(205);
    for _ in 0..5 {
        let gt = random_pose(&mut r, 17);
        let pred = noisy(&mut r, &gt, 100.0);
        let best = squared_residual(&procrustes_align(&pred, &gt).unwrap(), &gt);
        let fit = fit_similarity(&pred, &gt, false).unwrap();
        for _ in 0..1000 {
            // perturbations around the optimum and fully random transforms
            let cand = if r.random_bool(0.5) {
                let axis = Vector3::new(normal(&mut r), normal(&mut r), normal(&mut r)) * 0.02;
                let rot = Rotation3::new(axis).into_inner() * fit.rotation;
                let s = fit.scale * r.random_range(0.95..1.05);
                let c = fit.pred_centroid;
                let g = fit.gt_centroid;
                let centered = pred.map(|p| [p[0] - c.x, p[1] - c.y, p[2] - c.z]);
                let t = [g.x, g.y, g.z].map(|v| v + r.random_range(-5.0..5.0));
                similarity(&centered, s, &rot, t)
            } else {
                random_similarity(&mut r, &pred)
            };
            assert!(squared_residual(&cand, &gt) >= best * (1.0 - 1e-12));
        }
    }
}

#[test]
fn reflections_are_not_used() {
    let mut r = rng(206);
    let gt = random_pose(&mut r, 17);
    let mirrored = gt.map(|p| [-p[0], p[1], p[2]]);
    let fit = fit_similarity(&mirrored, &gt, false).unwrap();
    assert!((fit.rotation.determinant() - 1.0).abs() < 1e-9);
    // a reflection would have matched exactly
    let with = fit_similarity(&mirrored, &gt, true).unwrap();
    assert!(squared_residual(&with.apply(&mirrored), &gt) < 1e-12);
    assert!(pa_mpjpe(&mirrored, &gt).unwrap() > 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mpjpe_is_a_symmetric_mean(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let a = random_pose(&mut r, 17);
        let b = random_pose(&mut r, 17);
        let ab = mpjpe(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mpjpe(&b, &a).unwrap());
        prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn pck_is_monotone_in_threshold(seed in 0u64..100_000, sigma in 1.0f64..300.0) {
        let mut r = rng(seed);
        let gt = random_pose(&mut r, 17);
        let pred = noisy(&mut r, &gt, sigma);
        let p = pck(&pred, &gt, &PCK_THRESHOLDS).unwrap();
        let v: Vec<f64> = p.values().copied().collect();
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(v.iter().all(|&x| (0.0..=100.0).contains(&x)));
    }
}
