//! Skeleton graph and the spectral operators consumed by Chebyshev graph
//! convolution.
//!
//! All spectral quantities are built in `f64` once per graph; model layers
//! receive a cast copy of the Chebyshev basis.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::scalar::Scalar;

/// Kinematic tree over the 17 joints in [`crate::data::JOINT_NAMES`] order.
/// Shoulders hang off Upper Torso (index 8).
pub const DEFAULT_EDGES: [(usize, usize); 16] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
    (12, 13),
    (8, 14),
    (14, 15),
    (15, 16),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one joint")]
    Empty,
    #[error("edge ({0}, {1}) references a joint outside 0..{2}")]
    OutOfRange(usize, usize, usize),
    #[error("self-loop on joint {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    Duplicate(usize, usize),
    #[error("graph is disconnected: joint {0} is unreachable from joint 0")]
    Disconnected(usize),
    #[error("joint {0} has no incident edge, so D^-1/2 is undefined")]
    Isolated(usize),
    #[error("Chebyshev order must be at least 1, got {0}")]
    BadOrder(usize),
}

/// Undirected unweighted skeleton with its normalized and rescaled Laplacians.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    edges: Vec<(usize, usize)>,
    adjacency: DMatrix<f64>,
    degree: DVector<f64>,
    laplacian: DMatrix<f64>,
    lambda_max: f64,
    rescaled: DMatrix<f64>,
}

impl SkeletonGraph {
    /// Builds the graph and all derived matrices. `λ_max` comes from a full
    /// symmetric eigendecomposition of `L`.
    pub fn new(joints: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if joints == 0 {
            return Err(GraphError::Empty);
        }
        let mut seen = BTreeSet::new();
        let mut adjacency = DMatrix::zeros(joints, joints);
        for &(a, b) in edges {
            if a >= joints || b >= joints {
                return Err(GraphError::OutOfRange(a, b, joints));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(GraphError::Duplicate(a, b));
            }
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        if joints == 1 {
            return Err(GraphError::Isolated(0));
        }
        if let Some(j) = first_unreachable(&adjacency) {
            return Err(GraphError::Disconnected(j));
        }

        let degree = DVector::from_iterator(joints, adjacency.row_iter().map(|r| r.sum()));
        let inv_sqrt = degree.map(|d| 1.0 / d.sqrt());
        let mut laplacian = DMatrix::identity(joints, joints);
        for i in 0..joints {
            for k in 0..joints {
                laplacian[(i, k)] -= inv_sqrt[i] * adjacency[(i, k)] * inv_sqrt[k];
            }
        }
        let lambda_max = SymmetricEigen::new(laplacian.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let rescaled = &laplacian * (2.0 / lambda_max) - DMatrix::identity(joints, joints);

        Ok(Self {
            edges: edges.to_vec(),
            adjacency,
            degree,
            laplacian,
            lambda_max,
            rescaled,
        })
    }

    /// The default 17-joint skeleton.
    pub fn default_skeleton() -> Self {
        Self::new(17, &DEFAULT_EDGES).expect("default skeleton is a connected tree")
    }

    pub fn joints(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn degree(&self) -> &DVector<f64> {
        &self.degree
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn rescaled_laplacian(&self) -> &DMatrix<f64> {
        &self.rescaled
    }

    /// Chebyshev polynomials `T_0..T_{K-1}` of the rescaled Laplacian by the
    /// three-term recurrence.
    pub fn cheb_basis(&self, order: usize) -> Result<ChebBasis, GraphError> {
        if order < 1 {
            return Err(GraphError::BadOrder(order));
        }
        let j = self.joints();
        let mut polys: Vec<DMatrix<f64>> = Vec::with_capacity(order);
        polys.push(DMatrix::identity(j, j));
        if order > 1 {
            polys.push(self.rescaled.clone());
        }
        for k in 2..order {
            let next = (&self.rescaled * &polys[k - 1]) * 2.0 - &polys[k - 2];
            polys.push(next);
        }
        Ok(ChebBasis { polys })
    }
}

fn first_unreachable(adjacency: &DMatrix<f64>) -> Option<usize> {
    let n = adjacency.nrows();
    let mut visited = vec![false; n];
    let mut stack = vec![0];
    visited[0] = true;
    while let Some(v) = stack.pop() {
        for u in 0..n {
            if adjacency[(v, u)] != 0.0 && !visited[u] {
                visited[u] = true;
                stack.push(u);
            }
        }
    }
    visited.iter().position(|v| !v)
}

/// `T_k(L̃)` for `k < K`.
#[derive(Debug, Clone)]
pub struct ChebBasis {
    polys: Vec<DMatrix<f64>>,
}

impl ChebBasis {
    pub fn order(&self) -> usize {
        self.polys.len()
    }

    pub fn joints(&self) -> usize {
        self.polys[0].nrows()
    }

    pub fn polys(&self) -> &[DMatrix<f64>] {
        &self.polys
    }

    /// Row-major copies of every polynomial in the working scalar type.
    pub fn to_scalar<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.polys
            .iter()
            .map(|m| {
                let j = m.nrows();
                let mut out = Vec::with_capacity(j * j);
                for r in 0..j {
                    for c in 0..j {
                        out.push(T::from_f64(m[(r, c)]).expect("finite basis entry"));
                    }
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn two_node_path_is_analytic() {
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        let l = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(close(g.laplacian(), &l, 1e-15));
        assert!((g.lambda_max() - 2.0).abs() < 1e-12);
        let lt = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(close(g.rescaled_laplacian(), &lt, 1e-12));

        let basis = g.cheb_basis(2).unwrap();
        assert!(close(&basis.polys()[0], &DMatrix::identity(2, 2), 0.0));
        assert!(close(&basis.polys()[1], &lt, 1e-12));
    }

    #[test]
    fn order_one_is_identity() {
        let g = SkeletonGraph::default_skeleton();
        let basis = g.cheb_basis(1).unwrap();
        assert_eq!(basis.order(), 1);
        assert!(close(&basis.polys()[0], &DMatrix::identity(17, 17), 0.0));
        assert_eq!(g.cheb_basis(0).unwrap_err(), GraphError::BadOrder(0));
    }

    #[test]
    fn scaled_degree_vector_is_in_the_null_space() {
        let g = SkeletonGraph::default_skeleton();
        let v = g.degree().map(f64::sqrt);
        assert!((g.laplacian() * v).amax() < 1e-12);
    }

    #[test]
    fn invalid_graphs_are_rejected() {
        assert_eq!(
            SkeletonGraph::new(3, &[(0, 1)]).unwrap_err(),
            GraphError::Disconnected(2)
        );
        assert_eq!(
            SkeletonGraph::new(2, &[(0, 1), (1, 0)]).unwrap_err(),
            GraphError::Duplicate(1, 0)
        );
        assert_eq!(
            SkeletonGraph::new(2, &[(0, 2)]).unwrap_err(),
            GraphError::OutOfRange(0, 2, 2)
        );
        assert_eq!(
            SkeletonGraph::new(2, &[(1, 1), (0, 1)]).unwrap_err(),
            GraphError::SelfLoop(1)
        );
        assert_eq!(SkeletonGraph::new(0, &[]).unwrap_err(), GraphError::Empty);
    }

    #[test]
    fn default_skeleton_is_symmetric_tree() {
        let g = SkeletonGraph::default_skeleton();
        assert_eq!(g.joints(), 17);
        assert_eq!(g.adjacency(), &g.adjacency().transpose());
        assert_eq!(g.adjacency().sum(), 32.0);
        assert!((0..17).all(|j| g.adjacency()[(j, j)] == 0.0));
        assert!(close(g.laplacian(), &g.laplacian().transpose(), 0.0));
    }
}
