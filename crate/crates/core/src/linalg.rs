//! Small dense linear-algebra and RNG helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed (splitmix64 finalizer over `seed ^ stream`).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Numerical rank from singular values above `rtol * max(s)`.
pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let s = m.singular_values();
    let smax = s.max();
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * smax).count()
}

/// Orthonormal basis (columns) of the null space of a full-row-rank `c`.
///
/// Built by Gram-Schmidt on the projections of the standard basis vectors onto
/// `null(c)`, so for `c = [I 0]` it returns exactly the trailing unit vectors.
pub fn null_space_basis(c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (p, n) = c.shape();
    let cct = c * c.transpose();
    let cct_inv = cct.clone().cholesky()?.inverse();
    let proj = DMatrix::<f64>::identity(n, n) - c.transpose() * cct_inv * c;
    let target = n - p;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(target);
    for j in 0..n {
        if basis.len() == target {
            break;
        }
        let mut v = proj.column(j).into_owned();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let d = b.dot(&v);
                v.axpy(-d, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    if basis.len() != target {
        return None;
    }
    if target == 0 {
        return Some(DMatrix::zeros(n, 0));
    }
    Some(DMatrix::from_columns(&basis))
}

/// Moore-Penrose pseudoinverse with relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = rtol * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (vt.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    out
}

/// Inverse of a symmetric positive-definite matrix, falling back to the
/// pseudoinverse when Cholesky fails. The flag reports the fallback.
pub fn spd_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    match m.clone().cholesky() {
        Some(ch) => (ch.inverse(), false),
        None => (pinv(&symmetrize(m), 1e-14), true),
    }
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `ln det` of an SPD matrix via Cholesky.
pub fn spd_logdet(m: &DMatrix<f64>) -> Option<f64> {
    let ch = m.clone().cholesky()?;
    Some(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}
