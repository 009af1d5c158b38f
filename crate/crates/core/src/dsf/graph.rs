use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::FreqSample;
use crate::{Error, Result};

pub const DEFAULT_REL_TOL: f64 = 1e-4;

/// Dynamic network: `q_adj[(i, j)]` marks the edge `y_j -> y_i`,
/// `p_adj[(i, j)]` the edge `u_j -> y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub q_adj: DMatrix<bool>,
    pub p_adj: DMatrix<bool>,
    /// Sampled `Q_ij(q)` for every present `Q` edge, keyed by `(i, j)`.
    pub capacities: BTreeMap<(usize, usize), Vec<Complex64>>,
}

impl NetworkGraph {
    pub fn from_adjacency(q_adj: DMatrix<bool>, p_adj: DMatrix<bool>) -> Self {
        Self { q_adj, p_adj, capacities: BTreeMap::new() }
    }

    pub fn n_q_edges(&self) -> usize {
        off_diagonal(&self.q_adj).filter(|&(_, _, e)| e).count()
    }
}

fn off_diagonal(m: &DMatrix<bool>) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
    let (r, c) = m.shape();
    (0..r).flat_map(move |i| (0..c).filter(move |&j| j != i).map(move |j| (i, j, m[(i, j)])))
}

fn peak_magnitudes(vals: &[DMatrix<Complex64>]) -> DMatrix<f64> {
    let (r, c) = vals[0].shape();
    let mut peak = DMatrix::zeros(r, c);
    for v in vals {
        for (p, z) in peak.iter_mut().zip(v.iter()) {
            *p = f64::max(*p, z.norm());
        }
    }
    peak
}

fn threshold(peak: &DMatrix<f64>, rel_tol: f64) -> DMatrix<bool> {
    let max = peak.iter().fold(0.0, |m: f64, &v| m.max(v));
    peak.map(|v| max > 0.0 && v > rel_tol * max)
}

/// Edges are the entries whose peak magnitude over the sample exceeds
/// `rel_tol` times the largest magnitude in the same matrix.
pub fn boolean_structure(sample: &FreqSample, rel_tol: f64) -> Result<NetworkGraph> {
    if sample.is_empty() {
        return Err(Error::invalid("empty structure-function sample"));
    }
    if !(rel_tol >= 0.0) {
        return Err(Error::invalid(format!("rel_tol must be >= 0, got {rel_tol}")));
    }
    let mut q_adj = threshold(&peak_magnitudes(&sample.q_vals), rel_tol);
    for i in 0..q_adj.nrows() {
        q_adj[(i, i)] = false;
    }
    let p_adj = threshold(&peak_magnitudes(&sample.p_vals), rel_tol);
    let capacities = off_diagonal(&q_adj)
        .filter(|&(_, _, e)| e)
        .map(|(i, j, _)| ((i, j), sample.q_vals.iter().map(|m| m[(i, j)]).collect()))
        .collect();
    Ok(NetworkGraph { q_adj, p_adj, capacities })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub precision: f64,
    pub tpr: f64,
    pub n_est_edges: usize,
    pub n_true_edges: usize,
    pub n_correct: usize,
}

/// Precision and true-positive rate of the estimated `Q` edges.
///
/// An empty estimate has precision 1; an empty truth has TPR 1.
pub fn graph_compare(est: &NetworkGraph, truth: &NetworkGraph) -> Result<GraphMetrics> {
    if est.q_adj.shape() != truth.q_adj.shape() {
        return Err(Error::dim(format!(
            "estimated network is {:?}, truth is {:?}",
            est.q_adj.shape(),
            truth.q_adj.shape()
        )));
    }
    let mut n_est = 0;
    let mut n_true = 0;
    let mut n_correct = 0;
    for ((_, _, e), (_, _, t)) in off_diagonal(&est.q_adj).zip(off_diagonal(&truth.q_adj)) {
        n_est += e as usize;
        n_true += t as usize;
        n_correct += (e && t) as usize;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(GraphMetrics {
        precision: ratio(n_correct, n_est),
        tpr: ratio(n_correct, n_true),
        n_est_edges: n_est,
        n_true_edges: n_true,
        n_correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(p: usize, edges: &[(usize, usize)]) -> NetworkGraph {
        let mut q = DMatrix::from_element(p, p, false);
        for &(i, j) in edges {
            q[(i, j)] = true;
        }
        NetworkGraph::from_adjacency(q, DMatrix::from_element(p, p, false))
    }

    fn sample(q: DMatrix<Complex64>) -> FreqSample {
        let p = q.nrows();
        FreqSample {
            q_points: vec![Complex64::new(2.0, 0.0)],
            p_vals: vec![DMatrix::zeros(p, p)],
            h_vals: vec![DMatrix::zeros(p, p)],
            q_vals: vec![q],
        }
    }

    #[test]
    fn two_node_edges() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.25, 0.15, 0.0]).map(|v| Complex64::new(v, 0.0));
        let g = boolean_structure(&sample(q), DEFAULT_REL_TOL).unwrap();
        assert_eq!(g.q_adj, DMatrix::from_row_slice(2, 2, &[false, true, true, false]));
        assert_eq!(g.capacities.len(), 2);
        assert!(!g.p_adj.iter().any(|&e| e));
    }

    #[test]
    fn zero_matrix_has_no_edges() {
        let g = boolean_structure(&sample(DMatrix::zeros(3, 3)), DEFAULT_REL_TOL).unwrap();
        assert_eq!(g.n_q_edges(), 0);
    }

    #[test]
    fn small_entries_below_threshold_are_dropped() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1e-5, 0.0]).map(|v| Complex64::new(v, 0.0));
        let g = boolean_structure(&sample(q), DEFAULT_REL_TOL).unwrap();
        assert!(g.q_adj[(0, 1)] && !g.q_adj[(1, 0)]);
    }

    #[test]
    fn compare_half_precision() {
        let est = graph(3, &[(0, 1), (1, 2)]);
        let truth = graph(3, &[(0, 1)]);
        let m = graph_compare(&est, &truth).unwrap();
        assert_eq!((m.precision, m.tpr), (0.5, 1.0));
        assert_eq!((m.n_est_edges, m.n_true_edges, m.n_correct), (2, 1, 1));
    }

    #[test]
    fn compare_identity_and_empty() {
        let truth = graph(3, &[(0, 1), (2, 0)]);
        let m = graph_compare(&truth, &truth).unwrap();
        assert_eq!((m.precision, m.tpr), (1.0, 1.0));
        let m = graph_compare(&graph(3, &[]), &truth).unwrap();
        assert_eq!((m.precision, m.tpr), (1.0, 0.0));
    }

    #[test]
    fn compare_rejects_mismatched_sizes() {
        assert!(graph_compare(&graph(2, &[]), &graph(3, &[])).is_err());
    }
}
