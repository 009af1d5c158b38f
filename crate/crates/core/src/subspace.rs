//! Subspace (N4SID-style) starting point for the EM loop.
//!
//! A state sequence is read off the SVD of the projection of future outputs
//! onto past data, `(A, B, C)` follow by least squares, and the result is
//! moved to coordinates where `C = [I 0]` and the inputs only drive the
//! measured states.

use nalgebra::DMatrix;

use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{null_space_basis, rng_from_seed, spectral_radius};
use crate::model::Dataset;

pub(crate) struct SubspaceFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Mean variance of the measured-state equation residuals.
    pub state_residual: f64,
}

/// Block-row horizon: enough output rows to carry `n` states.
pub(crate) fn default_horizon(n: usize, p: usize) -> usize {
    (n.div_ceil(p) + 1).max(2)
}

/// Fits an `n`-state model with `y[k] = C s_k` and `s_k = A s_{k-1} + B u[k]`
/// (`s_k` is the state measured by `y[k]`), returned in structured
/// coordinates.
pub(crate) fn subspace_fit(data: &Dataset, n: usize, horizon: usize) -> Option<SubspaceFit> {
    let (p, m) = (data.p(), data.m());
    // shifted input u'[k] = u[k+1] gives s_{k+1} = A s_k + B u'[k], y[k] = C s_k
    let big_n = data.n_samples().checked_sub(1)?;
    let y = &data.y[..big_n];
    let u = &data.u[1..];
    let i = horizon;
    if m != p || n < p || i * p < n || big_n < 2 * i + 2 * (i * (p + m) + i * m) {
        return None;
    }
    let j = big_n - 2 * i + 1;
    let past_rows = i * (p + m);
    let wp = DMatrix::from_fn(past_rows, j, |r, t| {
        let (lag, c) = (r / (p + m), r % (p + m));
        if c < m {
            u[t + lag][c]
        } else {
            y[t + lag][c - m]
        }
    });
    let uf = DMatrix::from_fn(i * m, j, |r, t| u[t + i + r / m][r % m]);
    let yf = DMatrix::from_fn(i * p, j, |r, t| y[t + i + r / p][r % p]);

    let mut z = DMatrix::zeros(past_rows + i * m, j);
    z.rows_mut(0, past_rows).copy_from(&wp);
    z.rows_mut(past_rows, i * m).copy_from(&uf);
    let l = least_squares_right(&yf, &z)?;
    let o = l.columns(0, past_rows) * &wp;

    let svd = o.svd(false, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let vt = svd.v_t?;
    if order.len() < n || svd.singular_values[order[n - 1]] <= 0.0 {
        return None;
    }
    let states = DMatrix::from_fn(n, j, |r, t| svd.singular_values[order[r]].sqrt() * vt[(order[r], t)]);

    // [A B] from s_{t+1} = A s_t + B u'_t
    let cols = j - 1;
    let mut xi = DMatrix::zeros(n + m, cols);
    xi.rows_mut(0, n).copy_from(&states.columns(0, cols));
    for t in 0..cols {
        xi.view_mut((n, t), (m, 1)).copy_from(&u[t + i]);
    }
    let next = states.columns(1, cols).into_owned();
    let ab = least_squares_right(&next, &xi)?;
    let a = ab.columns(0, n).into_owned();
    let b = ab.columns(n, m).into_owned();
    let ys = DMatrix::from_fn(p, j, |r, t| y[t + i][r]);
    let c = least_squares_right(&ys, &states)?;

    // T = [C; N] with N B = 0
    let nb = null_space_basis(&b.transpose())?;
    let mut t = DMatrix::zeros(n, n);
    t.rows_mut(0, p).copy_from(&c);
    t.rows_mut(p, n - p).copy_from(&nb.transpose());
    // whiten the hidden rows' residual covariance to the measured rows' level
    let resid = &t * (&next - &a * xi.rows(0, n) - &b * xi.rows(n, m));
    let state_residual = resid.rows(0, p).norm_squared() / (p * cols) as f64;
    if n > p {
        let rh = resid.rows(p, n - p);
        let cov = rh * rh.transpose() / cols as f64;
        let eig = cov.symmetric_eigen();
        if eig.eigenvalues.min() <= 0.0 {
            return None;
        }
        let w = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (state_residual / l).sqrt()))
            * eig.eigenvectors.transpose();
        let hidden = &w * t.rows(p, n - p);
        t.rows_mut(p, n - p).copy_from(&hidden);
    }
    let t_inv = t.clone().try_inverse()?;
    let mut a_s = &t * &a * &t_inv;
    let b_s = &t * &b;
    let rho = spectral_radius(&a_s);
    if !rho.is_finite() {
        return None;
    }
    if rho >= 1.0 {
        a_s *= 0.99 / rho;
    }
    (a_s.iter().chain(b_s.iter()).all(|v| v.is_finite()) && state_residual.is_finite()).then_some(SubspaceFit {
        a: a_s,
        b: b_s,
        state_residual,
    })
}

/// Orthogonal change of the hidden coordinates (`x_h <- R^T x_h`) that
/// lowers the sum of absolute values of `A12`, `A21` and `A22`, found by
/// sweeps of pairwise Givens rotations. Measured states and the transfer from
/// inputs to outputs are unchanged; `B`'s hidden rows are rotated too.
///
/// Each of the `restarts` extra attempts begins from a seeded random
/// orthogonal rotation; the lowest-cost result is kept. Returns the
/// orthogonal `T` with `A <- T A T^T`, `B <- T B`.
pub fn sparsify_hidden(
    a: &mut DMatrix<f64>,
    b: &mut DMatrix<f64>,
    p: usize,
    sweeps: usize,
    restarts: usize,
    seed: u64,
) -> DMatrix<f64> {
    let n = a.nrows();
    if n < p + 2 {
        return DMatrix::identity(n, n);
    }
    let l1 = |m: &DMatrix<f64>| m.iter().map(|v| v.abs()).sum::<f64>();
    let (mut best_a, mut best_b) = (a.clone(), b.clone());
    let mut best_t = DMatrix::identity(n, n);
    jacobi_sweeps(&mut best_a, &mut best_b, &mut best_t, p, sweeps);
    let mut best = l1(&best_a);
    let mut rng = rng_from_seed(seed);
    let h = n - p;
    for _ in 0..restarts {
        let g = DMatrix::from_fn(h, h, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let mut t = DMatrix::<f64>::identity(n, n);
        t.view_mut((p, p), (h, h)).copy_from(&q);
        let mut ta = &t * &*a * t.transpose();
        let mut tb = &t * &*b;
        jacobi_sweeps(&mut ta, &mut tb, &mut t, p, sweeps);
        let cost = l1(&ta);
        if cost < best {
            best = cost;
            best_a = ta;
            best_b = tb;
            best_t = t;
        }
    }
    *a = best_a;
    *b = best_b;
    best_t
}

fn jacobi_sweeps(a: &mut DMatrix<f64>, b: &mut DMatrix<f64>, t: &mut DMatrix<f64>, p: usize, sweeps: usize) {
    let n = a.nrows();
    const GRID: usize = 60;
    for _ in 0..sweeps {
        let mut improved = false;
        for i in p..n {
            for j in (i + 1)..n {
                let base = pair_cost(a, i, j, 0.0);
                let mut best = (base, 0.0);
                for g in 1..GRID {
                    let th = -std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * g as f64 / GRID as f64;
                    let c = pair_cost(a, i, j, th);
                    if c < best.0 {
                        best = (c, th);
                    }
                }
                // golden-section refinement around the best grid point
                let h = std::f64::consts::FRAC_PI_2 / GRID as f64;
                let (mut lo, mut hi) = (best.1 - h, best.1 + h);
                let phi = 0.5 * (5f64.sqrt() - 1.0);
                for _ in 0..30 {
                    let x1 = hi - phi * (hi - lo);
                    let x2 = lo + phi * (hi - lo);
                    if pair_cost(a, i, j, x1) < pair_cost(a, i, j, x2) {
                        hi = x2;
                    } else {
                        lo = x1;
                    }
                }
                let mid = 0.5 * (lo + hi);
                let cm = pair_cost(a, i, j, mid);
                if cm < best.0 {
                    best = (cm, mid);
                }
                if best.0 < base * (1.0 - 1e-12) {
                    rotate_pair(a, b, t, i, j, best.1);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// L1 mass of rows/columns `i, j` of `A` after rotating the pair by `th`.
fn pair_cost(a: &DMatrix<f64>, i: usize, j: usize, th: f64) -> f64 {
    let (c, s) = (th.cos(), th.sin());
    let n = a.nrows();
    let mut total = 0.0;
    // rows i, j (excluding columns i, j)
    for k in 0..n {
        if k == i || k == j {
            continue;
        }
        let (ri, rj) = (a[(i, k)], a[(j, k)]);
        total += (c * ri + s * rj).abs() + (-s * ri + c * rj).abs();
        let (ci, cj) = (a[(k, i)], a[(k, j)]);
        total += (c * ci + s * cj).abs() + (-s * ci + c * cj).abs();
    }
    // the 2x2 block G^T M G with G = [[c, -s], [s, c]]
    let m = [[a[(i, i)], a[(i, j)]], [a[(j, i)], a[(j, j)]]];
    let g = [[c, -s], [s, c]];
    for r in 0..2 {
        for q in 0..2 {
            let mut v = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    v += g[x][r] * m[x][y] * g[y][q];
                }
            }
            total += v.abs();
        }
    }
    total
}

/// Applies `x_new = G^T x` on coordinates `(i, j)`.
fn rotate_pair(a: &mut DMatrix<f64>, b: &mut DMatrix<f64>, t: &mut DMatrix<f64>, i: usize, j: usize, th: f64) {
    let (c, s) = (th.cos(), th.sin());
    for m in [&mut *a, &mut *b, &mut *t] {
        for k in 0..m.ncols() {
            let (ri, rj) = (m[(i, k)], m[(j, k)]);
            m[(i, k)] = c * ri + s * rj;
            m[(j, k)] = -s * ri + c * rj;
        }
    }
    for k in 0..a.nrows() {
        let (ci, cj) = (a[(k, i)], a[(k, j)]);
        a[(k, i)] = c * ci + s * cj;
        a[(k, j)] = -s * ci + c * cj;
    }
}

/// Like [`sparsify_hidden`] but over all invertible hidden transforms:
/// rotation sweeps are interleaved with per-state scaling and pairwise shears
/// `x_i <- x_i + alpha x_j`. Returns `T` with `A <- T A T^-1`, `B <- T B`.
pub fn sparsify_hidden_general(
    a: &mut DMatrix<f64>,
    b: &mut DMatrix<f64>,
    p: usize,
    sweeps: usize,
    restarts: usize,
    seed: u64,
) -> DMatrix<f64> {
    let n = a.nrows();
    let mut t = sparsify_hidden(a, b, p, sweeps, restarts, seed);
    if n < p + 2 {
        return t;
    }
    let l1 = |m: &DMatrix<f64>| m.iter().map(|v| v.abs()).sum::<f64>();
    for _ in 0..sweeps {
        let before = l1(a);
        for h in p..n {
            balance_state(a, b, &mut t, h);
        }
        for i in p..n {
            for j in p..n {
                if i != j {
                    shear_pair(a, b, &mut t, i, j);
                }
            }
        }
        let mut dummy = DMatrix::identity(n, n);
        jacobi_sweeps(a, b, &mut dummy, p, 1);
        t = dummy * t;
        if l1(a) >= before * (1.0 - 1e-9) {
            break;
        }
    }
    t
}

/// Scales hidden state `h` by the factor minimizing `s R + C / s`.
fn balance_state(a: &mut DMatrix<f64>, b: &mut DMatrix<f64>, t: &mut DMatrix<f64>, h: usize) {
    let n = a.nrows();
    let r: f64 = (0..n).filter(|&k| k != h).map(|k| a[(h, k)].abs()).sum();
    let c: f64 = (0..n).filter(|&k| k != h).map(|k| a[(k, h)].abs()).sum();
    if r <= 0.0 || c <= 0.0 {
        return;
    }
    let s = (c / r).sqrt();
    a.row_mut(h).scale_mut(s);
    a.column_mut(h).scale_mut(1.0 / s);
    b.row_mut(h).scale_mut(s);
    t.row_mut(h).scale_mut(s);
}

/// `x_i <- x_i + alpha x_j` with `alpha` chosen among the kinks of the L1 cost.
fn shear_pair(a: &mut DMatrix<f64>, b: &mut DMatrix<f64>, t: &mut DMatrix<f64>, i: usize, j: usize) {
    let n = a.nrows();
    // A' = T A T^-1 with T = I + alpha e_i e_j^T:
    // row i += alpha row j, then column j -= alpha column i.
    let cost = |alpha: f64| -> f64 {
        let mut total = 0.0;
        for k in 0..n {
            let ri = |kk: usize| a[(i, kk)] + alpha * a[(j, kk)];
            // entries in row i
            let v = if k == j { ri(j) - alpha * ri(i) } else { ri(k) };
            total += v.abs();
            if k != i {
                // column j outside row i
                total += (a[(k, j)] - alpha * a[(k, i)]).abs();
            }
        }
        total
    };
    let mut cands = vec![0.0];
    for k in 0..n {
        if a[(j, k)] != 0.0 {
            cands.push(-a[(i, k)] / a[(j, k)]);
        }
        if a[(k, i)] != 0.0 && k != i {
            cands.push(a[(k, j)] / a[(k, i)]);
        }
    }
    let base = cost(0.0);
    let mut best = (base, 0.0);
    for &al in &cands {
        if al.is_finite() && al.abs() < 1e6 {
            let c = cost(al);
            if c < best.0 {
                best = (c, al);
            }
        }
    }
    if best.0 < base * (1.0 - 1e-12) && best.1 != 0.0 {
        let alpha = best.1;
        for m in [&mut *a, &mut *b, &mut *t] {
            let rj = m.row(j).into_owned();
            let mut ri = m.row_mut(i);
            ri += rj * alpha;
        }
        let ci = a.column(i).into_owned();
        a.column_mut(j).axpy(-alpha, &ci, 1.0);
    }
}

/// `argmin_L ||y - L x||_F` via SVD.
fn least_squares_right(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let svd = x.transpose().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    svd.solve(&y.transpose(), eps).ok().map(|s| s.transpose())
}
