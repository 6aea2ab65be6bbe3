//! Learnable synthetic CSI corpus.
//!
//! Poses come from a rest skeleton whose bones swing sinusoidally (bone
//! lengths are preserved by construction). CSI is a fixed random feature map
//! of the pose trajectory:
//!
//! `z(a,s,t) = Σ_j w[a,s,j]·cos(⟨u_j, Y_j(t)⟩/λ + φ[a,s,t,j]) + o[e,a,s] + ε`
//!
//! with `ε ~ N(0, σ²)` and `o` a static per-environment offset.

use std::f64::consts::PI;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_corpus, CsiSample, DataError, DatasetIndex, Manifest, Pose, PoseUnits, SynthMap};
use crate::skeleton::DEFAULT_EDGES;

/// Rest pose in millimeters, pelvis at the origin, z up.
pub const REST_POSE_MM: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [130.0, 0.0, 0.0],
    [130.0, 0.0, -440.0],
    [130.0, 0.0, -870.0],
    [-130.0, 0.0, 0.0],
    [-130.0, 0.0, -440.0],
    [-130.0, 0.0, -870.0],
    [0.0, 0.0, 230.0],
    [0.0, 0.0, 480.0],
    [0.0, 0.0, 600.0],
    [0.0, 0.0, 760.0],
    [-170.0, 0.0, 500.0],
    [-170.0, 0.0, 220.0],
    [-170.0, 0.0, -30.0],
    [170.0, 0.0, 500.0],
    [170.0, 0.0, 220.0],
    [170.0, 0.0, -30.0],
];

const FRAME_DT_S: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_subjects: usize,
    pub n_environments: usize,
    pub n_actions: usize,
    pub noise_sigma: f64,
    pub antennas: usize,
    pub subcarriers: usize,
    pub frames: usize,
    pub wavelength_mm: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_subjects: 40,
            n_environments: 4,
            n_actions: 14,
            noise_sigma: 0.05,
            antennas: 3,
            subcarriers: 114,
            frames: 10,
            wavelength_mm: 150.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let counts = [
            ("n_samples", self.n_samples),
            ("n_subjects", self.n_subjects),
            ("n_environments", self.n_environments),
            ("n_actions", self.n_actions),
            ("antennas", self.antennas),
            ("subcarriers", self.subcarriers),
            ("frames", self.frames),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DataError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.wavelength_mm > 0.0 && self.wavelength_mm.is_finite()) {
            return Err(DataError::Config(format!("wavelength_mm must be > 0, got {}", self.wavelength_mm)));
        }
        Ok(())
    }
}

/// Per-bone swing amplitudes (rad), shared frequency and phases.
struct ActionProfile {
    freq_hz: f64,
    swing: Vec<[f64; 2]>,
    phase: Vec<[f64; 2]>,
}

fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    // Rz(yaw) · Rx(pitch) · Ry(roll)
    let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let ry = [[cr, 0.0, sr], [0.0, 1.0, 0.0], [-sr, 0.0, cr]];
    mat3_mul(&rz, &mat3_mul(&rx, &ry))
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

/// Pose at time `tau` for a subject scale, facing `yaw` and an action.
fn pose_at(tau: f64, scale: f64, yaw: f64, action: &ActionProfile) -> Pose {
    let mut joints = vec![[0.0; 3]; REST_POSE_MM.len()];
    // DEFAULT_EDGES lists every parent before its children.
    for (b, &(parent, child)) in DEFAULT_EDGES.iter().enumerate() {
        let rest: [f64; 3] = [0, 1, 2].map(|d| (REST_POSE_MM[child][d] - REST_POSE_MM[parent][d]) * scale);
        let w = 2.0 * PI * action.freq_hz * tau;
        let pitch = action.swing[b][0] * (w + action.phase[b][0]).sin();
        let roll = action.swing[b][1] * (w + action.phase[b][1]).sin();
        let bone = apply(&rotation(yaw, pitch, roll), rest);
        joints[child] = [0, 1, 2].map(|d| joints[parent][d] + bone[d]);
    }
    Pose::new(joints)
}

/// Generates the corpus in memory.
pub fn generate(config: &SynthConfig) -> Result<(Manifest, Vec<CsiSample>), DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (na, ns, nt, nj) = (config.antennas, config.subcarriers, config.frames, REST_POSE_MM.len());
    let ne = config.n_environments;

    let directions: Vec<[f64; 3]> = (0..nj)
        .map(|_| {
            let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            v.map(|x| x / n)
        })
        .collect();
    let wscale = 1.0 / (nj as f64).sqrt();
    let weights: Vec<f64> = (0..na * ns * nj)
        .map(|_| wscale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let phases: Vec<f64> = (0..na * ns * nt * nj).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let environment_offsets: Vec<f64> = (0..ne * na * ns)
        .map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();

    let subject_scale: Vec<f64> = (0..config.n_subjects).map(|_| rng.random_range(0.9..1.1)).collect();
    let actions: Vec<ActionProfile> = (0..config.n_actions)
        .map(|_| ActionProfile {
            freq_hz: rng.random_range(0.3..1.0),
            swing: (0..DEFAULT_EDGES.len())
                .map(|_| [rng.random_range(0.0..0.6), rng.random_range(0.0..0.4)])
                .collect(),
            phase: (0..DEFAULT_EDGES.len())
                .map(|_| [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)])
                .collect(),
        })
        .collect();

    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let inv_lambda = 1.0 / config.wavelength_mm;
    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let subject = i % config.n_subjects;
        let env = (i / config.n_subjects) % ne;
        let action = rng.random_range(0..config.n_actions);
        let t0 = rng.random_range(0.0..10.0);
        let yaw = rng.random_range(-0.3..0.3);

        let trajectory: Vec<Pose> = (0..nt)
            .map(|t| pose_at(t0 + t as f64 * FRAME_DT_S, subject_scale[subject], yaw, &actions[action]))
            .collect();
        // projected coordinate per (t, j)
        let proj: Vec<f64> = trajectory
            .iter()
            .flat_map(|p| {
                p.joints()
                    .iter()
                    .zip(&directions)
                    .map(|(y, u)| (y[0] * u[0] + y[1] * u[1] + y[2] * u[2]) * inv_lambda)
                    .collect::<Vec<_>>()
            })
            .collect();

        let mut z = Vec::with_capacity(na * ns * nt);
        for a in 0..na {
            for s in 0..ns {
                let w = &weights[(a * ns + s) * nj..(a * ns + s + 1) * nj];
                let offset = environment_offsets[(env * na + a) * ns + s];
                for t in 0..nt {
                    let ph = &phases[((a * ns + s) * nt + t) * nj..((a * ns + s) * nt + t + 1) * nj];
                    let pr = &proj[t * nj..(t + 1) * nj];
                    let mut v = offset;
                    for j in 0..nj {
                        v += w[j] * (pr[j] + ph[j]).cos();
                    }
                    if config.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    z.push(v as f32);
                }
            }
        }
        let label = trajectory[nt / 2].map(|p| p.map(|x| x as f32 as f64));
        samples.push(CsiSample {
            antennas: na,
            subcarriers: ns,
            frames: nt,
            z,
            pose: label,
            subject_id: format!("S{:02}", subject + 1),
            environment_id: format!("E{:02}", env + 1),
            action_id: format!("A{:02}", action + 1),
        });
    }

    let mut manifest = Manifest::new(na, ns, nt, nj, PoseUnits::Mm);
    manifest.synth = Some(SynthMap {
        seed: config.seed,
        noise_sigma: config.noise_sigma,
        wavelength_mm: config.wavelength_mm,
        directions,
        weights,
        phases,
        environment_offsets,
    });
    Ok((manifest, samples))
}

/// Generates the corpus and writes it in the canonical layout under `root`.
pub fn synth_dataset(config: &SynthConfig, root: impl AsRef<Path>) -> Result<DatasetIndex, DataError> {
    let (manifest, samples) = generate(config)?;
    write_corpus(root, manifest, &samples)
}
