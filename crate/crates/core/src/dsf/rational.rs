//! Exact rational structure functions for small hidden blocks.
//!
//! `(qI - A22)^-1 = adj(qI - A22) / chi(q)` with both the adjugate and the
//! characteristic polynomial produced by the Faddeev-LeVerrier recursion
//!
//! ```text
//! B_0 = I,  c_k = -tr(A22 B_{k-1}) / k,  B_k = A22 B_{k-1} + c_k I
//! chi(q) = sum_k c_k q^(r-k),   adj(qI - A22) = sum_k B_k q^(r-1-k)
//! ```
//!
//! Every row `i` of `(Q, P, H)` then shares the monic denominator
//! `d_i = q chi - w_ii`, where `w_ij` is the numerator of `W_ij` over `chi`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{BlockForm, CMatrix};
use crate::model::StateSpaceModel;
use crate::{Error, Result};

/// Largest hidden block accepted by [`exact_dsf_small`].
pub const MAX_EXACT_HIDDEN: usize = 12;

const ZERO_RTOL: f64 = 1e-10;

/// Real polynomial, coefficients in ascending powers of `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn zero() -> Self {
        Poly(vec![0.0])
    }

    pub fn constant(c: f64) -> Self {
        Poly(vec![c])
    }

    /// `c q^k`.
    pub fn monomial(c: f64, k: usize) -> Self {
        let mut v = vec![0.0; k + 1];
        v[k] = c;
        Poly(v)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    /// Degree ignoring exact-zero leading coefficients; the zero polynomial
    /// has degree 0.
    pub fn degree(&self) -> usize {
        self.0.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, c| m.max(c.abs()))
    }

    pub fn eval(&self, q: Complex64) -> Complex64 {
        self.0
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * q + c)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let len = self.0.len().max(other.0.len());
        Poly(
            (0..len)
                .map(|k| self.0.get(k).copied().unwrap_or(0.0) + other.0.get(k).copied().unwrap_or(0.0))
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly(self.0.iter().map(|c| c * s).collect())
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly(out)
    }

    /// `q * self`.
    pub fn shift(&self) -> Poly {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.push(0.0);
        v.extend_from_slice(&self.0);
        Poly(v)
    }

    fn trimmed(mut self) -> Poly {
        while self.0.len() > 1 && *self.0.last().unwrap() == 0.0 {
            self.0.pop();
        }
        self
    }
}

/// `num(q) / den(q)` with monic `den`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rational {
    pub num: Poly,
    pub den: Poly,
}

impl Rational {
    pub fn zero() -> Self {
        Rational {
            num: Poly::zero(),
            den: Poly::constant(1.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    pub fn eval(&self, q: Complex64) -> Complex64 {
        self.num.eval(q) / self.den.eval(q)
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.is_zero() || self.num.degree() < self.den.degree()
    }
}

/// Dense matrix of rational functions, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Rational>,
}

impl RationalMatrix {
    pub fn get(&self, i: usize, j: usize) -> &Rational {
        &self.entries[i * self.cols + j]
    }

    pub fn eval(&self, q: Complex64) -> CMatrix {
        CMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(q))
    }

    pub fn nonzero_pattern(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| !self.get(i, j).is_zero())
    }

    /// Zeroes every entry whose numerator is negligible relative to the
    /// largest numerator coefficient in the matrix.
    fn canonicalize(&mut self) {
        let max = self.entries.iter().fold(0.0f64, |m, e| m.max(e.num.max_abs_coeff()));
        let cutoff = ZERO_RTOL * max;
        for e in &mut self.entries {
            if e.num.max_abs_coeff() <= cutoff {
                *e = Rational::zero();
            }
        }
    }
}

/// Exact `(Q, P, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDsf {
    pub q: RationalMatrix,
    pub p: RationalMatrix,
    pub h: RationalMatrix,
    /// Characteristic polynomial of the hidden block.
    pub chi: Poly,
}

impl ExactDsf {
    pub fn eval(&self, q: Complex64) -> (CMatrix, CMatrix, CMatrix) {
        (self.q.eval(q), self.p.eval(q), self.h.eval(q))
    }
}

/// Polynomial numerators `x_ij` with `X11 + X12 (qI - M)^-1 X21 = x / chi`.
fn numerators(
    chi: &Poly,
    adj: &[DMatrix<f64>],
    left: &DMatrix<f64>,
    direct: &DMatrix<f64>,
    right: &DMatrix<f64>,
) -> Vec<Vec<Poly>> {
    let r = adj.len();
    let terms: Vec<DMatrix<f64>> = adj.iter().map(|bk| left * bk * right).collect();
    (0..direct.nrows())
        .map(|i| {
            (0..direct.ncols())
                .map(|j| {
                    let mut p = chi.scale(direct[(i, j)]);
                    for (k, t) in terms.iter().enumerate() {
                        p = p.add(&Poly::monomial(t[(i, j)], r - 1 - k));
                    }
                    p
                })
                .collect()
        })
        .collect()
}

/// Exact rational structure function. Only hidden blocks with
/// `n - p <= MAX_EXACT_HIDDEN` are accepted.
pub fn exact_dsf_small(model: &StateSpaceModel) -> Result<ExactDsf> {
    let hidden = model.n() - model.p();
    if hidden > MAX_EXACT_HIDDEN {
        return Err(Error::Unsupported(format!(
            "exact structure function needs n - p <= {MAX_EXACT_HIDDEN}, got {hidden}"
        )));
    }
    let form = BlockForm::new(model)?;
    let (p, m) = (form.p(), form.b1.ncols());
    let r = hidden;

    let mut c = vec![1.0];
    let mut adj = Vec::with_capacity(r);
    let mut bk = DMatrix::<f64>::identity(r, r);
    for k in 1..=r {
        adj.push(bk.clone());
        let mb = &form.a22 * &bk;
        let ck = -mb.trace() / k as f64;
        c.push(ck);
        bk = mb + DMatrix::identity(r, r) * ck;
    }
    // chi(q) = sum_k c_k q^(r-k), stored ascending
    let chi = Poly(c.iter().rev().copied().collect());

    let w = numerators(&chi, &adj, &form.a12, &form.a11, &form.a21);
    let v = numerators(&chi, &adj, &form.a12, &form.b1, &form.b2);
    let l = numerators(&chi, &adj, &form.a12, &form.k1, &form.k2);

    let den: Vec<Poly> = (0..p).map(|i| chi.shift().sub(&w[i][i]).trimmed()).collect();
    // off-diagonal numerators of Q, zero on the diagonal
    let nbar = |i: usize, k: usize| if i == k { Poly::zero() } else { w[i][k].clone() };

    let q_entries = (0..p)
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .map(|(i, j)| {
            if i == j {
                Rational::zero()
            } else {
                Rational { num: nbar(i, j).trimmed(), den: den[i].clone() }
            }
        })
        .collect();

    let has_d = form.d.iter().any(|&x| x != 0.0);
    let p_entries = (0..p)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| {
            let mut num = v[i][j].clone();
            if has_d {
                for k in 0..p {
                    let dkj = form.d[(k, j)];
                    if dkj == 0.0 {
                        continue;
                    }
                    let factor = if i == k { den[i].clone() } else { nbar(i, k).scale(-1.0) };
                    num = num.add(&factor.scale(dkj));
                }
            }
            Rational { num: num.trimmed(), den: den[i].clone() }
        })
        .collect();

    let h_entries = (0..p)
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .map(|(i, j)| {
            let mut num = l[i][j].sub(&nbar(i, j));
            if i == j {
                num = num.add(&den[i]);
            }
            Rational { num: num.trimmed(), den: den[i].clone() }
        })
        .collect();

    let mut q = RationalMatrix { rows: p, cols: p, entries: q_entries };
    let mut pm = RationalMatrix { rows: p, cols: m, entries: p_entries };
    let mut h = RationalMatrix { rows: p, cols: p, entries: h_entries };
    q.canonicalize();
    pm.canonicalize();
    h.canonicalize();
    Ok(ExactDsf { q, p: pm, h, chi })
}
