//! Pose metrics: MPJPE, Procrustes alignment, PA-MPJPE, PCK and per-joint
//! breakdowns. All distances are in millimeters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Pose, BOT_TORSO, JOINT_NAMES, NECK_BASE};

pub const PCK_THRESHOLDS: [u32; 5] = [10, 20, 30, 40, 50];

/// Column order of the summary CSV.
pub const TABLE1_COLUMNS: [&str; 8] = [
    "Method", "PCK@10", "PCK@20", "PCK@30", "PCK@40", "PCK@50", "MPJPE", "PA-MPJPE",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("pose shapes differ: {0} vs {1} joints")]
    ShapeMismatch(usize, usize),
    #[error("ground-truth joints all coincide; similarity alignment is undefined")]
    DegenerateGroundTruth,
    #[error("ground-truth torso length is zero")]
    ZeroTorso,
    #[error("empty batch")]
    Empty,
}

fn check(pred: &Pose, gt: &Pose) -> Result<(), MetricsError> {
    if pred.num_joints() != gt.num_joints() {
        return Err(MetricsError::ShapeMismatch(pred.num_joints(), gt.num_joints()));
    }
    if gt.num_joints() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Euclidean error of every joint.
pub fn joint_errors(pred: &Pose, gt: &Pose) -> Result<Vec<f64>, MetricsError> {
    check(pred, gt)?;
    Ok(pred.joints().iter().zip(gt.joints()).map(|(p, g)| dist(*p, *g)).collect())
}

pub fn mpjpe(pred: &Pose, gt: &Pose) -> Result<f64, MetricsError> {
    let e = joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Optimal similarity transform `s·R·(x − c_pred) + c_gt`, proper rotations
/// only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub pred_centroid: Vector3<f64>,
    pub gt_centroid: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, pose: &Pose) -> Pose {
        pose.map(|p| {
            let v = self.rotation * (Vector3::from(p) - self.pred_centroid) * self.scale + self.gt_centroid;
            [v.x, v.y, v.z]
        })
    }
}

/// Least-squares similarity (Umeyama) aligning `pred` to `gt`.
///
/// `allow_reflection` is only used by tests as a reference solution.
pub fn fit_similarity(pred: &Pose, gt: &Pose, allow_reflection: bool) -> Result<Similarity, MetricsError> {
    check(pred, gt)?;
    let cp = Vector3::from(pred.centroid());
    let cg = Vector3::from(gt.centroid());
    let mut cross = Matrix3::zeros();
    let mut pred_sq = 0.0;
    let mut gt_sq = 0.0;
    for (p, g) in pred.joints().iter().zip(gt.joints()) {
        let x = Vector3::from(*p) - cp;
        let y = Vector3::from(*g) - cg;
        cross += y * x.transpose();
        pred_sq += x.norm_squared();
        gt_sq += y.norm_squared();
    }
    if gt_sq <= f64::EPSILON * f64::EPSILON {
        return Err(MetricsError::DegenerateGroundTruth);
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let d = if allow_reflection || (u * v_t).determinant() >= 0.0 {
        1.0
    } else {
        -1.0
    };
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * fix * v_t;
    let sv = svd.singular_values;
    let trace = sv[0] + sv[1] + d * sv[2];
    let scale = if pred_sq > 0.0 { (trace / pred_sq).max(0.0) } else { 0.0 };
    Ok(Similarity {
        scale,
        rotation,
        pred_centroid: cp,
        gt_centroid: cg,
    })
}

pub fn procrustes_align(pred: &Pose, gt: &Pose) -> Result<Pose, MetricsError> {
    Ok(fit_similarity(pred, gt, false)?.apply(pred))
}

/// Sum of squared joint distances, the quantity Procrustes minimizes.
pub fn squared_residual(pred: &Pose, gt: &Pose) -> f64 {
    pred.joints()
        .iter()
        .zip(gt.joints())
        .map(|(p, g)| dist(*p, *g).powi(2))
        .sum()
}

pub fn pa_mpjpe(pred: &Pose, gt: &Pose) -> Result<f64, MetricsError> {
    mpjpe(&procrustes_align(pred, gt)?, gt)
}

/// Body-size normalizer for PCK: ground-truth Neck Base to Bot Torso.
pub fn torso_length(gt: &Pose) -> Result<f64, MetricsError> {
    if gt.num_joints() <= NECK_BASE.max(BOT_TORSO) {
        return Err(MetricsError::ShapeMismatch(gt.num_joints(), JOINT_NAMES.len()));
    }
    let len = dist(gt.joints()[NECK_BASE], gt.joints()[BOT_TORSO]);
    if len <= 0.0 {
        return Err(MetricsError::ZeroTorso);
    }
    Ok(len)
}

/// A joint counts as correct at level `k` when its error is at most
/// `k/100` of the body size (boundary inclusive).
pub fn within_threshold(error: f64, body_size: f64, k: u32) -> bool {
    error <= k as f64 / 100.0 * body_size
}

/// Correct-joint counts per threshold after Procrustes alignment, plus the
/// number of joints evaluated.
pub fn pck_counts(pred: &Pose, gt: &Pose, ks: &[u32]) -> Result<(Vec<usize>, usize), MetricsError> {
    let body = torso_length(gt)?;
    let errors = joint_errors(&procrustes_align(pred, gt)?, gt)?;
    let counts = ks
        .iter()
        .map(|&k| errors.iter().filter(|&&e| within_threshold(e, body, k)).count())
        .collect();
    Ok((counts, errors.len()))
}

/// PCK percentages for one pose pair.
pub fn pck(pred: &Pose, gt: &Pose, ks: &[u32]) -> Result<BTreeMap<u32, f64>, MetricsError> {
    let (counts, n) = pck_counts(pred, gt, ks)?;
    Ok(ks
        .iter()
        .zip(counts)
        .map(|(&k, c)| (k, 100.0 * c as f64 / n as f64))
        .collect())
}

/// Mean error per joint index across a batch.
pub fn per_joint_mpjpe(preds: &[Pose], gts: &[Pose]) -> Result<Vec<f64>, MetricsError> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(MetricsError::Empty);
    }
    let j = gts[0].num_joints();
    let mut sums = vec![0.0; j];
    for (p, g) in preds.iter().zip(gts) {
        let e = joint_errors(p, g)?;
        if e.len() != j {
            return Err(MetricsError::ShapeMismatch(e.len(), j));
        }
        for (s, x) in sums.iter_mut().zip(e) {
            *s += x;
        }
    }
    Ok(sums.into_iter().map(|s| s / preds.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    /// Threshold `k` to percentage of correct joints.
    #[serde(with = "string_keys")]
    pub pck: BTreeMap<u32, f64>,
    pub per_joint_mpjpe_mm: Vec<f64>,
    pub joint_names: Vec<String>,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Aggregates a batch. PA-MPJPE and PCK align each sample on its own.
    pub fn from_batch(preds: &[Pose], gts: &[Pose]) -> Result<Self, MetricsError> {
        let per_joint = per_joint_mpjpe(preds, gts)?;
        let n = preds.len();
        let mut pa = 0.0;
        let mut correct = vec![0usize; PCK_THRESHOLDS.len()];
        let mut total = 0usize;
        for (p, g) in preds.iter().zip(gts) {
            pa += pa_mpjpe(p, g)?;
            let (c, joints) = pck_counts(p, g, &PCK_THRESHOLDS)?;
            for (acc, x) in correct.iter_mut().zip(c) {
                *acc += x;
            }
            total += joints;
        }
        let mpjpe_mm = per_joint.iter().sum::<f64>() / per_joint.len() as f64;
        let joint_names = (0..per_joint.len())
            .map(|j| JOINT_NAMES.get(j).map_or_else(|| format!("joint{j}"), |s| s.to_string()))
            .collect();
        Ok(Self {
            mpjpe_mm,
            pa_mpjpe_mm: pa / n as f64,
            pck: PCK_THRESHOLDS
                .iter()
                .zip(correct)
                .map(|(&k, c)| (k, 100.0 * c as f64 / total as f64))
                .collect(),
            per_joint_mpjpe_mm: per_joint,
            joint_names,
            n_samples: n,
        })
    }

    pub fn table1_header() -> String {
        TABLE1_COLUMNS.join(",")
    }

    /// One summary row in [`TABLE1_COLUMNS`] order.
    pub fn table1_row(&self, method: &str) -> String {
        let mut row = method.replace(',', ";");
        for k in PCK_THRESHOLDS {
            let _ = write!(row, ",{:.1}", self.pck.get(&k).copied().unwrap_or(f64::NAN));
        }
        let _ = write!(row, ",{:.1},{:.1}", self.mpjpe_mm, self.pa_mpjpe_mm);
        row
    }

    /// `Joint,MPJPE` rows followed by the average.
    pub fn per_joint_csv(&self) -> String {
        let mut out = String::from("Joint,MPJPE\n");
        for (name, v) in self.joint_names.iter().zip(&self.per_joint_mpjpe_mm) {
            let _ = writeln!(out, "{name},{v:.1}");
        }
        let _ = writeln!(out, "Average,{:.1}", self.mpjpe_mm);
        out
    }
}

/// JSON object keys are strings; parse them back explicitly so the map also
/// survives buffered (internally tagged) deserialization.
mod string_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<u32, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| D::Error::custom(format!("bad PCK threshold {k:?}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::REST_POSE_MM;
    use nalgebra::Rotation3;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> Pose {
        Pose::new((0..j).map(|_| [0; 3].map(|_| rng.random_range(-500.0..500.0))).collect())
    }

    fn rest() -> Pose {
        Pose::new(REST_POSE_MM.to_vec())
    }

    #[test]
    fn mpjpe_basics() {
        let gt = rest();
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]);
        assert_eq!(mpjpe(&shifted, &gt).unwrap(), 5.0);
        assert_eq!(mpjpe(&Pose::zeros(3), &gt), Err(MetricsError::ShapeMismatch(3, 17)));
    }

    #[test]
    fn similarity_is_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pose(&mut rng, 17);
        let r = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let t = Vector3::new(10.0, -40.0, 7.0);
        let pred = gt.map(|p| {
            let v = r * Vector3::from(p) * 2.0 + t;
            [v.x, v.y, v.z]
        });
        let aligned = procrustes_align(&pred, &gt).unwrap();
        for (a, g) in aligned.joints().iter().zip(gt.joints()) {
            assert!(dist(*a, *g) < 1e-8);
        }
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-8);
    }

    #[test]
    fn reflections_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_pose(&mut rng, 17);
        let mirrored = gt.map(|p| [-p[0], p[1], p[2]]);
        let proper = procrustes_align(&mirrored, &gt).unwrap();
        let improper = fit_similarity(&mirrored, &gt, true).unwrap().apply(&mirrored);
        assert!(squared_residual(&improper, &gt) < 1e-12);
        assert!(squared_residual(&proper, &gt) > 1.0);
        assert!(fit_similarity(&mirrored, &gt, false).unwrap().rotation.determinant() > 0.0);
    }

    #[test]
    fn alignment_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_pose(&mut rng, 17);
        let pred = random_pose(&mut rng, 17);
        let once = procrustes_align(&pred, &gt).unwrap();
        let twice = procrustes_align(&once, &gt).unwrap();
        for (a, b) in once.joints().iter().zip(twice.joints()) {
            assert!(dist(*a, *b) < 1e-8);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let gt = Pose::new(vec![[1.0, 2.0, 3.0]; 17]);
        assert_eq!(procrustes_align(&rest(), &gt), Err(MetricsError::DegenerateGroundTruth));
        // collapsed torso but otherwise valid skeleton
        let mut flat = rest();
        flat.joints_mut()[NECK_BASE] = flat.joints()[BOT_TORSO];
        assert_eq!(pck(&rest(), &flat, &[10]), Err(MetricsError::ZeroTorso));
    }

    #[test]
    fn pa_can_exceed_mpjpe_for_a_single_outlier() {
        // Least squares trades one large error for many small ones, so the
        // mean Euclidean error may grow after alignment.
        let gt = rest();
        let mut pred = gt.clone();
        pred.joints_mut()[16][0] += 40.0;
        assert!(pa_mpjpe(&pred, &gt).unwrap() > mpjpe(&pred, &gt).unwrap());
    }

    #[test]
    fn pck_boundary_is_inclusive() {
        let errors = [10.0, 50.0];
        let hits = errors.iter().filter(|&&e| within_threshold(e, 100.0, 10)).count();
        assert_eq!(100.0 * hits as f64 / errors.len() as f64, 50.0);
        let gt = rest();
        assert!(pck(&gt, &gt, &PCK_THRESHOLDS).unwrap().values().all(|&v| v == 100.0));
    }

    #[test]
    fn report_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gts: Vec<Pose> = (0..20).map(|_| random_pose(&mut rng, 17)).collect();
        let preds: Vec<Pose> = gts
            .iter()
            .map(|g| {
                let flat: Vec<f64> = g.to_flat().iter().map(|x| x + rng.random_range(-80.0..80.0)).collect();
                Pose::from_flat(&flat)
            })
            .collect();
        let r = MetricsReport::from_batch(&preds, &gts).unwrap();
        let mean_pj = r.per_joint_mpjpe_mm.iter().sum::<f64>() / 17.0;
        assert!((mean_pj - r.mpjpe_mm).abs() < 1e-9);
        let vals: Vec<f64> = r.pck.values().copied().collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        assert!(vals.iter().all(|v| (0.0..=100.0).contains(v)));
        assert_eq!(r.joint_names[0], "Bot Torso");
        assert_eq!(r.joint_names[16], "L.Hand");
        assert_eq!(
            MetricsReport::table1_header(),
            "Method,PCK@10,PCK@20,PCK@30,PCK@40,PCK@50,MPJPE,PA-MPJPE"
        );
        assert_eq!(r.table1_row("x").split(',').count(), 8);
        assert_eq!(r.per_joint_csv().lines().count(), 19);
    }
}
