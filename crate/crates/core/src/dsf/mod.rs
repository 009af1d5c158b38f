//! Dynamical structure functions.
//!
//! For `x+ = A x + B u + K e`, `y = C x + D u + e` the state is split as
//! `z = T x` with `T = [C; E^T]`, `E` an orthonormal basis of `null(C)`, so that
//! `z1` is the measured part. Eliminating the hidden block `z2` gives
//!
//! ```text
//! W(q) = A11 + A12 (qI - A22)^-1 A21        (V, L likewise with B, K)
//! Q = (qI - D_W)^-1 (W - D_W),   D_W = diag(W)
//! P = (qI - D_W)^-1 V + (I - Q) D
//! H = (qI - D_W)^-1 L + (I - Q)
//! ```
//!
//! and `y = Q y + P u + H e`. The result is invariant to block-diagonal
//! changes of the hidden coordinates.

mod graph;
mod rational;

pub use graph::{boolean_structure, graph_compare, GraphMetrics, NetworkGraph, DEFAULT_REL_TOL};
pub use rational::{exact_dsf_small, ExactDsf, Poly, Rational, RationalMatrix, MAX_EXACT_HIDDEN};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, derive_seed, rng_from_seed};
use crate::model::StateSpaceModel;
use crate::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Structure function sampled at a set of shift-operator values.
#[derive(Debug, Clone)]
pub struct FreqSample {
    pub q_points: Vec<Complex64>,
    pub q_vals: Vec<CMatrix>,
    pub p_vals: Vec<CMatrix>,
    pub h_vals: Vec<CMatrix>,
}

impl FreqSample {
    pub fn len(&self) -> usize {
        self.q_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_points.is_empty()
    }

    pub fn p(&self) -> usize {
        self.q_vals.first().map_or(0, |m| m.nrows())
    }

    pub fn m(&self) -> usize {
        self.p_vals.first().map_or(0, |m| m.ncols())
    }
}

/// Model in hidden-block coordinates.
#[derive(Debug, Clone)]
pub(crate) struct BlockForm {
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl BlockForm {
    pub fn new(model: &StateSpaceModel) -> Result<Self> {
        let (n, p) = (model.n(), model.p());
        let c = &model.c;
        if linalg::numerical_rank(c, 1e-12) < p {
            return Err(Error::RankDeficient);
        }
        let e = linalg::null_space_basis(c).ok_or(Error::RankDeficient)?;
        let cct_inv = (c * c.transpose()).try_inverse().ok_or(Error::RankDeficient)?;
        let ebar = c.transpose() * cct_inv;

        let mut t = DMatrix::zeros(n, n);
        t.rows_mut(0, p).copy_from(c);
        t.rows_mut(p, n - p).copy_from(&e.transpose());
        let mut t_inv = DMatrix::zeros(n, n);
        t_inv.columns_mut(0, p).copy_from(&ebar);
        t_inv.columns_mut(p, n - p).copy_from(&e);

        let a_hat = &t * &model.a * &t_inv;
        let b_hat = &t * &model.b;
        let k_hat = &t * model.innovation_gain();
        let r = n - p;
        Ok(Self {
            a11: a_hat.view((0, 0), (p, p)).into_owned(),
            a12: a_hat.view((0, p), (p, r)).into_owned(),
            a21: a_hat.view((p, 0), (r, p)).into_owned(),
            a22: a_hat.view((p, p), (r, r)).into_owned(),
            b1: b_hat.rows(0, p).into_owned(),
            b2: b_hat.rows(p, r).into_owned(),
            k1: k_hat.rows(0, p).into_owned(),
            k2: k_hat.rows(p, r).into_owned(),
            d: model.d.clone(),
        })
    }

    pub fn p(&self) -> usize {
        self.a11.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.a22.nrows()
    }

    /// `(W, V, L)` at `q`, or `None` if `qI - A22` is singular.
    fn wvl(&self, q: Complex64) -> Option<(CMatrix, CMatrix, CMatrix)> {
        let w0 = to_complex(&self.a11);
        let v0 = to_complex(&self.b1);
        let l0 = to_complex(&self.k1);
        let r = self.hidden();
        if r == 0 {
            return Some((w0, v0, l0));
        }
        let mut resolvent = to_complex(&self.a22).map(|v| -v);
        for i in 0..r {
            resolvent[(i, i)] += q;
        }
        let lu = resolvent.lu();
        let a12 = to_complex(&self.a12);
        let x_a = lu.solve(&to_complex(&self.a21))?;
        let x_b = lu.solve(&to_complex(&self.b2))?;
        let x_k = lu.solve(&to_complex(&self.k2))?;
        Some((w0 + &a12 * x_a, v0 + &a12 * x_b, l0 + &a12 * x_k))
    }

    /// `(Q, P, H)` at `q`, or `None` when `q` is at or near a pole.
    fn evaluate(&self, q: Complex64) -> Option<(CMatrix, CMatrix, CMatrix)> {
        let scale = 1.0 + q.norm();
        let hidden_eigs = self.hidden_eigenvalues();
        if hidden_eigs.iter().any(|l| (q - l).norm() < 1e-6 * scale) {
            return None;
        }
        let (w, v, l) = self.wvl(q)?;
        let p = self.p();
        let mut inv_diag = Vec::with_capacity(p);
        for i in 0..p {
            let gap = q - w[(i, i)];
            if gap.norm() < 1e-8 * scale {
                return None;
            }
            inv_diag.push(gap.inv());
        }
        let mut qm = w;
        for i in 0..p {
            qm[(i, i)] = Complex64::new(0.0, 0.0);
        }
        let mut pm = v;
        let mut hm = l;
        for (i, &s) in inv_diag.iter().enumerate() {
            qm.row_mut(i).iter_mut().for_each(|x| *x *= s);
            pm.row_mut(i).iter_mut().for_each(|x| *x *= s);
            hm.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let i_minus_q = CMatrix::identity(p, p) - &qm;
        if self.d.iter().any(|&x| x != 0.0) {
            pm += &i_minus_q * to_complex(&self.d);
        }
        hm += i_minus_q;
        Some((qm, pm, hm))
    }

    pub fn hidden_eigenvalues(&self) -> Vec<Complex64> {
        if self.hidden() == 0 {
            return Vec::new();
        }
        self.a22.complex_eigenvalues().iter().copied().collect()
    }
}

pub(crate) fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

const RESAMPLE_TRIES: usize = 12;

/// Evaluates `(Q, P, H)` at each point. Points that fall on or near a pole
/// (eigenvalue of `A22` or a root of `q - W_ii(q)`) are nudged to a nearby
/// pole-free value; the returned sample records the points actually used.
pub fn dsf_from_state_space(model: &StateSpaceModel, q_points: &[Complex64]) -> Result<FreqSample> {
    if q_points.is_empty() {
        return Err(Error::invalid("no evaluation points"));
    }
    for (i, a) in q_points.iter().enumerate() {
        if !(a.re.is_finite() && a.im.is_finite()) {
            return Err(Error::invalid(format!("evaluation point {i} is not finite")));
        }
        if q_points[..i].iter().any(|b| b == a) {
            return Err(Error::invalid(format!("duplicate evaluation point {a}")));
        }
    }
    let form = BlockForm::new(model)?;
    let mut out = FreqSample {
        q_points: Vec::with_capacity(q_points.len()),
        q_vals: Vec::with_capacity(q_points.len()),
        p_vals: Vec::with_capacity(q_points.len()),
        h_vals: Vec::with_capacity(q_points.len()),
    };
    for (idx, &q0) in q_points.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(idx as u64, 0x9019));
        let mut q = q0;
        let mut hit = None;
        for _ in 0..RESAMPLE_TRIES {
            if let Some(v) = form.evaluate(q) {
                hit = Some(v);
                break;
            }
            let radial = 1.0 + 1e-3 * rng.random_range(-1.0..1.0);
            let angle = 1e-3 * rng.random_range(-1.0..1.0);
            q = q0 * radial * Complex64::from_polar(1.0, angle) + Complex64::new(1e-4, 1e-4) * rng.random::<f64>();
        }
        let (qm, pm, hm) = hit.ok_or(Error::PoleHit(q0))?;
        out.q_points.push(q);
        out.q_vals.push(qm);
        out.p_vals.push(pm);
        out.h_vals.push(hm);
    }
    Ok(out)
}

/// Sixteen points on `|q| = 2` followed by sixteen random points in the
/// annulus `1.5 <= |q| <= 4`.
pub fn default_q_points(seed: u64) -> Vec<Complex64> {
    let mut pts: Vec<Complex64> = (0..16)
        .map(|k| Complex64::from_polar(2.0, std::f64::consts::TAU * (k as f64 + 0.25) / 16.0))
        .collect();
    let mut rng = rng_from_seed(seed);
    for _ in 0..16 {
        let r = rng.random_range(1.5..=4.0);
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        pts.push(Complex64::from_polar(r, th));
    }
    pts
}

/// `n` points on the unit circle, `q = exp(i w)` with `w` evenly spaced in
/// `[0, pi]`, for frequency-response plots.
pub fn unit_circle_points(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            let w = std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
            Complex64::from_polar(1.0, w)
        })
        .collect()
}

/// On-disk DSF document: evaluation points, per-point matrices as `[re, im]`
/// pairs, and Boolean adjacencies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DsfFile {
    pub q_points: Vec<[f64; 2]>,
    pub q: Vec<Vec<Vec<[f64; 2]>>>,
    pub p: Vec<Vec<Vec<[f64; 2]>>>,
    pub h: Vec<Vec<Vec<[f64; 2]>>>,
    pub rel_tol: f64,
    #[serde(with = "crate::io::bool_rows")]
    pub q_adj: DMatrix<bool>,
    #[serde(with = "crate::io::bool_rows")]
    pub p_adj: DMatrix<bool>,
}

fn cmatrix_rows(m: &CMatrix) -> Vec<Vec<[f64; 2]>> {
    m.row_iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect()
}

impl DsfFile {
    pub fn new(sample: &FreqSample, graph: &NetworkGraph, rel_tol: f64) -> Self {
        Self {
            q_points: sample.q_points.iter().map(|z| [z.re, z.im]).collect(),
            q: sample.q_vals.iter().map(cmatrix_rows).collect(),
            p: sample.p_vals.iter().map(cmatrix_rows).collect(),
            h: sample.h_vals.iter().map(cmatrix_rows).collect(),
            rel_tol,
            q_adj: graph.q_adj.clone(),
            p_adj: graph.p_adj.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_node() -> StateSpaceModel {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.3, 0.0]);
        StateSpaceModel::with_selector_output(a, DMatrix::identity(2, 2), 2, 1.0).unwrap()
    }

    #[test]
    fn two_node_values_at_two() {
        let s = dsf_from_state_space(&two_node(), &[c(2.0, 0.0)]).unwrap();
        let q = &s.q_vals[0];
        assert!((q[(0, 1)] - c(0.25, 0.0)).norm() < 1e-15);
        assert!((q[(1, 0)] - c(0.15, 0.0)).norm() < 1e-15);
        assert_eq!(q[(0, 0)], c(0.0, 0.0));
        assert_eq!(s.q_points[0], c(2.0, 0.0));
    }

    #[test]
    fn diagonal_is_exactly_zero() {
        let a = DMatrix::from_fn(5, 5, |i, j| 0.1 * ((i * 7 + j * 3) % 5) as f64 - 0.2);
        let b = DMatrix::from_fn(5, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let model = StateSpaceModel::with_selector_output(a, b, 2, 0.7).unwrap();
        let s = dsf_from_state_space(&model, &default_q_points(1)).unwrap();
        for qm in &s.q_vals {
            for i in 0..2 {
                assert_eq!(qm[(i, i)], c(0.0, 0.0));
            }
        }
    }

    #[test]
    fn pole_points_are_resampled() {
        // W_11 = 0.5, so q = 0.5 is a pole of row 1.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.1, 0.3]);
        let model = StateSpaceModel::with_selector_output(a, DMatrix::identity(2, 2), 2, 1.0).unwrap();
        let s = dsf_from_state_space(&model, &[c(0.5, 0.0)]).unwrap();
        assert_ne!(s.q_points[0], c(0.5, 0.0));
        assert!(s.q_vals[0].iter().all(|z| z.re.is_finite()));
    }

    #[test]
    fn rank_deficient_output_is_rejected() {
        let model = StateSpaceModel::new(
            DMatrix::identity(3, 3) * 0.5,
            DMatrix::zeros(3, 2),
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            DMatrix::zeros(2, 2),
            1.0,
            DVector::zeros(3),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        assert!(matches!(dsf_from_state_space(&model, &[c(2.0, 0.0)]), Err(Error::RankDeficient)));
    }

    #[test]
    fn default_points_are_distinct_and_in_range() {
        let pts = default_q_points(3);
        assert_eq!(pts.len(), 32);
        for (i, a) in pts.iter().enumerate() {
            assert!(a.norm() >= 1.5 - 1e-12 && a.norm() <= 4.0 + 1e-12);
            assert!(pts[..i].iter().all(|b| b != a));
        }
    }

    #[test]
    fn strictly_proper_along_real_ray() {
        let a = DMatrix::from_fn(4, 4, |i, j| if (i + j) % 3 == 0 { 0.3 } else { -0.1 });
        let model = StateSpaceModel::with_selector_output(a, DMatrix::identity(4, 2), 2, 1.0).unwrap();
        let s = dsf_from_state_space(&model, &[c(2.0, 0.0), c(1e6, 0.0)]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let near = s.q_vals[0][(i, j)].norm();
                let far = s.q_vals[1][(i, j)].norm();
                assert!(far <= 1e-4 * near.max(1e-300) || (near == 0.0 && far == 0.0));
            }
        }
    }
}
