use serde::{Deserialize, Serialize};

/// Joint names in label order.
pub const JOINT_NAMES: [&str; 17] = [
    "Bot Torso",
    "L.Hip",
    "L.Knee",
    "L.Foot",
    "R.Hip",
    "R.Knee",
    "R.Foot",
    "Center Torso",
    "Upper Torso",
    "Neck Base",
    "Center Head",
    "R.Shoulder",
    "R.Elbow",
    "R.Hand",
    "L.Shoulder",
    "L.Elbow",
    "L.Hand",
];

pub const BOT_TORSO: usize = 0;
pub const NECK_BASE: usize = 9;

/// 3D joint coordinates in millimeters, one row per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    joints: Vec<[f64; 3]>,
}

impl Pose {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Self { joints }
    }

    /// Builds a pose from a row-major `J×3` buffer.
    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 3, 0, "pose buffer length must be a multiple of 3");
        Self {
            joints: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn zeros(j: usize) -> Self {
        Self {
            joints: vec![[0.0; 3]; j],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.joints
    }

    pub fn joints_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.joints
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|x| x.is_finite())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.joints.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.joints {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|x| x / n)
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            joints: self.joints.iter().map(|&p| f(p)).collect(),
        }
    }
}
