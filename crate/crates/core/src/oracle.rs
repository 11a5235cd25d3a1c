//! Dense direct solver used as ground truth and as the direct baseline.
//!
//! Rows follow lexicographic voxel order. Means come from a hand-written
//! Cholesky factorisation; variances from the diagonal of `L⁻ᵀL⁻¹`.
//! [`solve_via_inverse`] is an independent route through an LU inverse.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::FactorGraph;
use crate::occupancy::VoxelIndex;

/// Largest system the dense path is meant for.
pub const DENSE_CAP: usize = 2_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("graph has no nodes")]
    Empty,
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is singular")]
    Singular,
    #[error("voxel {0} is not part of the system")]
    UnknownVoxel(VoxelIndex),
}

#[derive(Clone, Debug)]
pub struct DenseSystem {
    pub voxels: Vec<VoxelIndex>,
    index: HashMap<VoxelIndex, usize>,
    pub lambda: DMatrix<f64>,
    pub g: DVector<f64>,
}

impl DenseSystem {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn row(&self, v: VoxelIndex) -> Option<usize> {
        self.index.get(&v).copied()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..i).all(|j| self.lambda[(i, j)] == self.lambda[(j, i)]))
    }

    pub fn is_strictly_diagonally_dominant(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| self.lambda[(i, j)].abs()).sum();
            self.lambda[(i, i)] > off
        })
    }

    /// The same system with the coupling between rows `a` and `b` removed
    /// but both diagonals unchanged.
    pub fn without_coupling(&self, a: usize, b: usize) -> DenseSystem {
        let mut out = self.clone();
        out.lambda[(a, b)] = 0.0;
        out.lambda[(b, a)] = 0.0;
        out
    }
}

/// Dense `(Λ, g)` from the graph's stored self potentials and edges.
pub fn assemble(graph: &FactorGraph) -> Result<DenseSystem, OracleError> {
    if graph.node_count() == 0 {
        return Err(OracleError::Empty);
    }
    let mut voxels: Vec<VoxelIndex> = graph.nodes().map(|(_, n)| n.voxel).collect();
    voxels.sort();
    let index: HashMap<VoxelIndex, usize> = voxels.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let n = voxels.len();
    let mut lambda = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for (id, node) in graph.nodes() {
        let r = index[&node.voxel];
        let (l, h) = graph.information(id);
        lambda[(r, r)] = l;
        g[r] = h;
    }
    for (_, e) in graph.edges() {
        let a = index[&graph.node(e.endpoints.0).voxel];
        let b = index[&graph.node(e.endpoints.1).voxel];
        lambda[(a, b)] = -e.coupling;
        lambda[(b, a)] = -e.coupling;
    }
    Ok(DenseSystem { voxels, index, lambda, g })
}

/// Lower Cholesky factor, packed by rows.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn at(i: usize) -> usize {
        i * (i + 1) / 2
    }

    pub fn factor(a: &DMatrix<f64>) -> Result<Self, OracleError> {
        let n = a.nrows();
        let mut l = vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            let ri = Self::at(i);
            for j in 0..=i {
                let rj = Self::at(j);
                let dot: f64 = l[ri..ri + j].iter().zip(&l[rj..rj + j]).map(|(x, y)| x * y).sum();
                let s = a[(i, j)] - dot;
                if i == j {
                    if !(s > 0.0) {
                        return Err(OracleError::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y = b.clone();
        for i in 0..n {
            let ri = Self::at(i);
            let dot: f64 = self.l[ri..ri + i].iter().zip(y.iter()).map(|(x, y)| x * y).sum();
            y[i] = (y[i] - dot) / self.l[ri + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[Self::at(k) + i] * y[k];
            }
            y[i] = s / self.l[Self::at(i) + i];
        }
        y
    }

    /// Diagonal of `A⁻¹`: column `i` of `L⁻¹` is zero above row `i`, and
    /// `(A⁻¹)_ii` is its squared norm.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let n = self.n;
        let mut out = DVector::zeros(n);
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for k in i..n {
                let rk = Self::at(k);
                let dot: f64 = self.l[rk + i..rk + k].iter().zip(&w[i..k]).map(|(x, y)| x * y).sum();
                let rhs = if k == i { 1.0 } else { 0.0 };
                w[k] = (rhs - dot) / self.l[rk + k];
                acc += w[k] * w[k];
            }
            out[i] = acc;
        }
        out
    }
}

/// Marginal means `Λ⁻¹g`.
pub fn solve_map(sys: &DenseSystem) -> Result<DVector<f64>, OracleError> {
    Ok(Cholesky::factor(&sys.lambda)?.solve(&sys.g))
}

/// Marginal variances `diag(Λ⁻¹)`.
pub fn marginal_variances(sys: &DenseSystem) -> Result<DVector<f64>, OracleError> {
    Ok(Cholesky::factor(&sys.lambda)?.inverse_diagonal())
}

/// Means and variances from one factorisation.
pub fn solve_full(sys: &DenseSystem) -> Result<(DVector<f64>, DVector<f64>), OracleError> {
    let c = Cholesky::factor(&sys.lambda)?;
    Ok((c.solve(&sys.g), c.inverse_diagonal()))
}

/// Means and variances through an explicit LU inverse.
pub fn solve_via_inverse(sys: &DenseSystem) -> Result<(DVector<f64>, DVector<f64>), OracleError> {
    let inv = sys.lambda.clone().lu().try_inverse().ok_or(OracleError::Singular)?;
    let mean = &inv * &sys.g;
    Ok((mean, inv.diagonal()))
}

/// Oracle marginal `(mean, variance)` keyed by voxel.
pub fn marginals_by_voxel(sys: &DenseSystem) -> Result<HashMap<VoxelIndex, (f64, f64)>, OracleError> {
    let (m, v) = solve_full(sys)?;
    Ok(sys.voxels.iter().enumerate().map(|(i, &vx)| (vx, (m[i], v[i]))).collect())
}

/// Belief at `node` with the coupling to `exclude` cut, as `(precision,
/// mean)`. On a tree this is exactly the GaBP cavity belief.
pub fn cavity(sys: &DenseSystem, node: VoxelIndex, exclude: VoxelIndex) -> Result<(f64, f64), OracleError> {
    let a = sys.row(node).ok_or(OracleError::UnknownVoxel(node))?;
    let b = sys.row(exclude).ok_or(OracleError::UnknownVoxel(exclude))?;
    let cut = sys.without_coupling(a, b);
    let (m, v) = solve_full(&cut)?;
    Ok((1.0 / v[a], m[a]))
}

/// `‖Λμ − g‖∞`.
pub fn residual_norm(sys: &DenseSystem, mean: &DVector<f64>) -> f64 {
    (&sys.lambda * mean - &sys.g).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{HyperParams, Measurement};
    use crate::occupancy::{Connectivity, VoxelGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: i64, y: i64, z: i64) -> VoxelIndex {
        VoxelIndex::new(x, y, z)
    }

    #[test]
    fn single_node_system() {
        let grid = VoxelGrid::new([1, 1, 1], 1.0, [0.0; 3]).unwrap();
        let mut g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        let id = g.node_id(v(0, 0, 0)).unwrap();
        g.attach_measurement(id, Measurement::new(5.0, 0.0, v(0, 0, 0)), 0.0).unwrap();
        let sys = assemble(&g).unwrap();
        assert_eq!(sys.lambda[(0, 0)], 1e-4 + 10.0);
        assert!((sys.g[0] - 50.0).abs() < 1e-12);
        let m = solve_map(&sys).unwrap();
        assert!((m[0] - 4.99995).abs() < 1e-9);
        let var = marginal_variances(&sys).unwrap();
        assert!((var[0] - 1.0 / (10.0 + 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn two_free_neighbours() {
        let grid = VoxelGrid::new([2, 1, 1], 1.0, [0.0; 3]).unwrap();
        let g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        let sys = assemble(&g).unwrap();
        assert_eq!(sys.lambda[(0, 0)], 1e-4 + 0.5);
        assert_eq!(sys.lambda[(0, 1)], -0.5);
        assert!(sys.is_symmetric());
    }

    #[test]
    fn no_measurements_gives_prior() {
        let grid = VoxelGrid::new([3, 3, 2], 1.0, [0.0; 3]).unwrap();
        let params = HyperParams { z0: 0.3, ..HyperParams::default() };
        let g = FactorGraph::full(grid, params, Connectivity::Six).unwrap();
        let sys = assemble(&g).unwrap();
        let m = solve_map(&sys).unwrap();
        for x in m.iter() {
            assert!((x - 0.3).abs() < 1e-9);
        }
        let grid = VoxelGrid::new([1, 1, 1], 1.0, [0.0; 3]).unwrap();
        let g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        assert_eq!(marginal_variances(&assemble(&g).unwrap()).unwrap()[0], 1e4);
    }

    #[test]
    fn rows_are_lexicographic() {
        let grid = VoxelGrid::new([2, 2, 2], 1.0, [0.0; 3]).unwrap();
        let g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        let sys = assemble(&g).unwrap();
        let mut sorted = sys.voxels.clone();
        sorted.sort();
        assert_eq!(sys.voxels, sorted);
        assert_eq!(sys.row(v(0, 0, 0)), Some(0));
    }

    fn random_system(seed: u64) -> DenseSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = VoxelGrid::new([6, 6, 3], 1.0, [0.0; 3]).unwrap();
        for _ in 0..20 {
            let c = v(rng.random_range(0..6), rng.random_range(0..6), rng.random_range(0..3));
            grid.set_occupied(c, true).unwrap();
        }
        let mut g = FactorGraph::full(grid, HyperParams::default(), Connectivity::Six).unwrap();
        let ids: Vec<_> = g.nodes().map(|(id, _)| id).collect();
        for k in 0..10 {
            let id = ids[rng.random_range(0..ids.len())];
            let vx = g.node(id).voxel;
            g.attach_measurement(id, Measurement::new(rng.random_range(0.0..3.0), k as f64, vx), 10.0)
                .unwrap();
        }
        assemble(&g).unwrap()
    }

    #[test]
    fn random_instances_are_dominant_and_cross_check() {
        for seed in 0..5 {
            let sys = random_system(seed);
            assert!(sys.is_symmetric());
            assert!(sys.is_strictly_diagonally_dominant());
            let (m, var) = solve_full(&sys).unwrap();
            assert!(residual_norm(&sys, &m) <= 1e-10 * sys.g.amax());
            let (m2, var2) = solve_via_inverse(&sys).unwrap();
            assert!((&m - &m2).amax() <= 1e-8);
            assert!((&var - &var2).amax() <= 1e-8 * var2.amax());
            for x in var.iter() {
                assert!(*x > 0.0 && *x <= 1e4);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Cholesky::factor(&a), Err(OracleError::NotPositiveDefinite { row: 1, .. })));
    }
}
