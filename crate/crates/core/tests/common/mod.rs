#![allow(dead_code)]

use graphpose_core::data::Pose;
use graphpose_core::skeleton::SkeletonGraph;
use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Random spanning tree plus a few extra edges; always connected.
pub fn random_connected_edges(rng: &mut ChaCha8Rng, j: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for v in 1..j {
        let u = rng.random_range(0..v);
        edges.push((u, v));
    }
    let extra = rng.random_range(0..=j);
    for _ in 0..extra {
        let a = rng.random_range(0..j);
        let b = rng.random_range(0..j);
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    edges
}

pub fn random_graph(rng: &mut ChaCha8Rng, j: usize) -> SkeletonGraph {
    SkeletonGraph::new(j, &random_connected_edges(rng, j)).expect("connected by construction")
}

pub fn chain(j: usize) -> SkeletonGraph {
    let edges: Vec<_> = (1..j).map(|v| (v - 1, v)).collect();
    SkeletonGraph::new(j, &edges).unwrap()
}

/// Random permutation: joint `j` is relabeled `perm[j]`.
pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let k = rng.random_range(0..=i);
        p.swap(i, k);
    }
    p
}

pub fn permute_edges(edges: &[(usize, usize)], perm: &[usize]) -> Vec<(usize, usize)> {
    edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect()
}

/// Moves row `r` of a `(rows, width)` matrix to row `perm[r]`.
pub fn permute_rows(x: &[f64], width: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, &p) in perm.iter().enumerate() {
        out[p * width..(p + 1) * width].copy_from_slice(&x[r * width..(r + 1) * width]);
    }
    out
}

/// `T_k(L̃)` by eigendecomposition and scalar Chebyshev polynomials.
pub fn spectral_cheb(lt: &DMatrix<f64>, order: usize) -> Vec<DMatrix<f64>> {
    let eig = SymmetricEigen::new(lt.clone());
    let u = &eig.eigenvectors;
    (0..order)
        .map(|k| {
            let d = eig.eigenvalues.map(|l| (k as f64 * l.clamp(-1.0, 1.0).acos()).cos());
            u * DMatrix::from_diagonal(&d) * u.transpose()
        })
        .collect()
}

pub fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> Pose {
    Pose::new((0..j).map(|_| [0; 3].map(|_| rng.random_range(-500.0..500.0))).collect())
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    // normalized quaternion
    let q: Vec<f64> = normals(rng, 4);
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn similarity(pose: &Pose, s: f64, r: &Matrix3<f64>, t: [f64; 3]) -> Pose {
    pose.map(|p| {
        let v = r * Vector3::new(p[0], p[1], p[2]) * s;
        [v[0] + t[0], v[1] + t[1], v[2] + t[2]]
    })
}

pub fn random_similarity(rng: &mut ChaCha8Rng, pose: &Pose) -> Pose {
    let s = rng.random_range(0.3..3.0);
    let r = random_rotation(rng);
    let t = [0; 3].map(|_| rng.random_range(-1000.0..1000.0));
    similarity(pose, s, &r, t)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
