//! Brute-force references shared by the integration tests.
//!
//! The joint-Gaussian oracle writes every state and output as an affine map
//! of one standard normal vector `e = [e0; w_1..w_N; v_1..v_N]` and reads
//! conditional moments off the dense covariance. It is cubic in `N (n + p)`
//! and only meant for small instances.

#![allow(dead_code)]

use dsfnet::linalg::{psd_sqrt, rng_from_seed, Rng};
use dsfnet::{Dataset, StateSpaceModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_matrix(rng: &mut Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector(rng: &mut Rng, r: usize) -> DVector<f64> {
    DVector::from_fn(r, |_, _| StandardNormal.sample(rng))
}

/// Random stable system with a dense full-row-rank `C`, `D = 0`, a nonzero
/// initial mean and an SPD initial covariance.
pub fn random_system(seed: u64, n: usize, p: usize, m: usize) -> StateSpaceModel {
    let mut rng = rng_from_seed(seed);
    let mut a = gaussian_matrix(&mut rng, n, n);
    let rho = dsfnet::linalg::spectral_radius(&a);
    let target = rng.random_range(0.3..0.95);
    a *= target / rho.max(1e-12);
    let b = gaussian_matrix(&mut rng, n, m);
    let c = gaussian_matrix(&mut rng, p, n);
    let sigma = rng.random_range(0.3..1.5);
    let m0 = gaussian_vector(&mut rng, n) * 0.5;
    let l = gaussian_matrix(&mut rng, n, n) * 0.5;
    let r0 = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    StateSpaceModel::new(a, b, c, DMatrix::zeros(p, m), sigma, m0, r0).unwrap()
}

/// Data drawn from the exact generative model the filter assumes
/// (process noise `sigma I`, unit output noise).
pub fn sample_data(model: &StateSpaceModel, big_n: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let (n, p, m) = (model.n(), model.p(), model.m());
    let mut x = &model.m0 + psd_sqrt(&model.r0) * gaussian_vector(&mut rng, n);
    let mut y = Vec::with_capacity(big_n);
    let mut u = Vec::with_capacity(big_n);
    for _ in 0..big_n {
        let uk = gaussian_vector(&mut rng, m);
        x = &model.a * &x + &model.b * &uk + gaussian_vector(&mut rng, n) * model.sigma;
        y.push(&model.c * &x + gaussian_vector(&mut rng, p));
        u.push(uk);
    }
    Dataset::new(y, u).unwrap()
}

/// Mean and covariance of `z = [x_0; ..; x_N; y_1; ..; y_N]`.
pub struct JointGaussian {
    pub n: usize,
    pub p: usize,
    pub big_n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(model: &StateSpaceModel, data: &Dataset) -> Self {
        let (n, p) = (model.n(), model.p());
        let big_n = data.n_samples();
        let ne = n + big_n * (n + p);
        let nz = n * (big_n + 1) + p * big_n;
        let mut mean = DVector::zeros(nz);
        let mut g = DMatrix::zeros(nz, ne);

        let l0 = psd_sqrt(&model.r0);
        mean.rows_mut(0, n).copy_from(&model.m0);
        g.view_mut((0, 0), (n, n)).copy_from(&l0);
        for k in 1..=big_n {
            let prev_mean = mean.rows((k - 1) * n, n).into_owned();
            let prev_g = g.rows((k - 1) * n, n).into_owned();
            let xm = &model.a * prev_mean + &model.b * &data.u[k - 1];
            let mut xg = &model.a * prev_g;
            let wcol = n + (k - 1) * n;
            for i in 0..n {
                xg[(i, wcol + i)] += model.sigma;
            }
            mean.rows_mut(k * n, n).copy_from(&xm);
            g.rows_mut(k * n, n).copy_from(&xg);

            let yrow = n * (big_n + 1) + (k - 1) * p;
            let vcol = n + big_n * n + (k - 1) * p;
            let ym = &model.c * &xm;
            let mut yg = &model.c * &xg;
            for i in 0..p {
                yg[(i, vcol + i)] += 1.0;
            }
            mean.rows_mut(yrow, p).copy_from(&ym);
            g.rows_mut(yrow, p).copy_from(&yg);
        }
        let cov = &g * g.transpose();
        Self { n, p, big_n, mean, cov }
    }

    fn y_index(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.n * (self.big_n + 1) + (k - 1) * self.p;
        start..start + self.p
    }

    /// Conditional mean and covariance of all states given `y_1..y_k`.
    pub fn condition(&self, data: &Dataset, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        let nx = self.n * (self.big_n + 1);
        let yi: Vec<usize> = (1..=k).flat_map(|t| self.y_index(t)).collect();
        let xi: Vec<usize> = (0..nx).collect();
        let sxx = self.cov.select_rows(&xi).select_columns(&xi);
        if yi.is_empty() {
            return (self.mean.rows(0, nx).into_owned(), sxx);
        }
        let sxy = self.cov.select_rows(&xi).select_columns(&yi);
        let syy = self.cov.select_rows(&yi).select_columns(&yi);
        let mut dy = DVector::zeros(yi.len());
        for t in 1..=k {
            dy.rows_mut((t - 1) * self.p, self.p).copy_from(&data.y[t - 1]);
        }
        dy -= self.mean.select_rows(&yi);
        let chol = syy.cholesky().expect("output covariance is positive definite");
        let mean = self.mean.rows(0, nx) + &sxy * chol.solve(&dy);
        let cov = sxx - &sxy * chol.solve(&sxy.transpose());
        (mean, cov)
    }

    /// `log N(Y^N; mean_y, cov_y)`.
    pub fn log_density(&self, data: &Dataset) -> f64 {
        let yi: Vec<usize> = (1..=self.big_n).flat_map(|t| self.y_index(t)).collect();
        let syy = self.cov.select_rows(&yi).select_columns(&yi);
        let mut dy = DVector::zeros(yi.len());
        for t in 1..=self.big_n {
            dy.rows_mut((t - 1) * self.p, self.p).copy_from(&data.y[t - 1]);
        }
        dy -= self.mean.select_rows(&yi);
        let chol = syy.cholesky().expect("output covariance is positive definite");
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let d = yi.len() as f64;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + dy.dot(&chol.solve(&dy)))
    }

    pub fn block(&self, cov: &DMatrix<f64>, i: usize, j: usize) -> DMatrix<f64> {
        cov.view((i * self.n, j * self.n), (self.n, self.n)).into_owned()
    }

    pub fn state(&self, mean: &DVector<f64>, k: usize) -> DVector<f64> {
        mean.rows(k * self.n, self.n).into_owned()
    }
}

/// Largest absolute deviation of filter, smoother and lag-one outputs from
/// the oracle.
pub fn smoother_oracle_errors(model: &StateSpaceModel, data: &Dataset) -> (f64, f64, f64) {
    let (fp, sp) = dsfnet::smoother::smooth(model, data).unwrap();
    let jg = JointGaussian::new(model, data);
    let big_n = data.n_samples();
    let mut filt = 0.0f64;
    for k in 1..=big_n {
        let (mean, cov) = jg.condition(data, k);
        filt = filt.max((&fp.x_filt[k] - jg.state(&mean, k)).amax());
        filt = filt.max((&fp.p_filt[k] - jg.block(&cov, k, k)).amax());
    }
    let (mean, cov) = jg.condition(data, big_n);
    let mut smooth = 0.0f64;
    let mut lag = 0.0f64;
    for k in 0..=big_n {
        smooth = smooth.max((&sp.x_sm[k] - jg.state(&mean, k)).amax());
        smooth = smooth.max((&sp.p_sm[k] - jg.block(&cov, k, k)).amax());
        if k >= 1 {
            lag = lag.max((&sp.m_sm[k] - jg.block(&cov, k, k - 1)).amax());
        }
    }
    (filt, smooth, lag)
}
