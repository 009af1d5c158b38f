//! Sparse Bayesian learning for the transition/input weights.
//!
//! The complete-data likelihood is a linear regression `y = Phi w + noise`
//! with `w = [vec(A); vec(B)]` (column-major), `y = [x_N; ...; x_1]` and
//! `Phi_k = [x_{k-1}^T (x) I, u_{k-1}^T (x) I]`. Each weight gets a zero-mean
//! Gaussian prior with variance `gamma_i`; the hyperparameters and the noise
//! variance are fitted by EM on the evidence, and weights whose `gamma`
//! collapses are pruned.
//!
//! Because every `Phi_k` is a Kronecker product with the identity, the
//! regression splits into `n` independent row problems that share the Gram
//! matrix `sum_k xi_k xi_k^T`. [`RegressionData::Stacked`] exploits this;
//! [`RegressionData::Dense`] keeps an explicit design matrix.

mod mask;

pub use mask::{a_index, b_index, identifiability_mask, Mask, MaskMode};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::Dataset;
use crate::smoother::{ESums, SmoothPass};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub enum RegressionData {
    Dense { phi: DMatrix<f64>, y: DVector<f64> },
    Stacked(StackedRegression),
}

/// Row-decoupled form of the state regression.
#[derive(Debug, Clone)]
pub struct StackedRegression {
    pub n: usize,
    pub m: usize,
    pub n_samples: usize,
    /// `sum_k xi_k xi_k^T`.
    pub gram: DMatrix<f64>,
    /// Row `i` is `sum_k x_k[i] xi_k^T`.
    pub cross: DMatrix<f64>,
    /// `sum_k x_k[i]^2`.
    pub yy: DVector<f64>,
    pub y_sum: f64,
    /// `(xi_k, x_k)` for `k = 1..N` when built from explicit samples.
    pub samples: Option<SamplePairs>,
}

/// Regressors and targets, index-aligned.
pub type SamplePairs = (Vec<DVector<f64>>, Vec<DVector<f64>>);

impl StackedRegression {
    /// From explicit regressors `xi_k = [x_{k-1}; u_{k-1}]` and targets `x_k`.
    pub fn new(xi: Vec<DVector<f64>>, targets: Vec<DVector<f64>>) -> Result<Self> {
        if xi.len() != targets.len() || xi.is_empty() {
            return Err(Error::dim("regressors and targets must be nonempty and equally long"));
        }
        let n = targets[0].len();
        let f = xi[0].len();
        if f < n {
            return Err(Error::dim("regressor shorter than the state"));
        }
        let mut gram = DMatrix::zeros(f, f);
        let mut cross = DMatrix::zeros(n, f);
        let mut yy = DVector::zeros(n);
        let mut y_sum = 0.0;
        for (x, t) in xi.iter().zip(&targets) {
            if x.len() != f || t.len() != n {
                return Err(Error::dim("inconsistent regression sample"));
            }
            gram.syger(1.0, x, x, 1.0);
            cross.ger(1.0, t, x, 1.0);
            yy += t.component_mul(t);
            y_sum += t.sum();
        }
        gram.fill_upper_triangle_with_lower_triangle();
        Ok(Self {
            n,
            m: f - n,
            n_samples: xi.len(),
            gram,
            cross,
            yy,
            y_sum,
            samples: Some((xi, targets)),
        })
    }

    /// From smoothed second moments: `gram = S_xixi`, `cross = S_xxi`,
    /// `yy = diag(S_xx)`. The quadratic form then equals the expected
    /// complete-data residual instead of the residual of the smoothed means.
    pub fn from_sums(es: &ESums, y_sum: f64) -> Self {
        let n = es.s_xx.nrows();
        Self {
            n,
            m: es.s_xixi.nrows() - n,
            n_samples: es.n_samples,
            gram: es.s_xixi.clone(),
            cross: es.s_xxi.clone(),
            yy: es.s_xx.diagonal(),
            y_sum,
            samples: None,
        }
    }

    /// Weight index of feature `f` in state row `i`.
    pub fn coord(&self, i: usize, f: usize) -> usize {
        if f < self.n {
            a_index(self.n, i, f)
        } else {
            b_index(self.n, i, f - self.n)
        }
    }
}

impl RegressionData {
    pub fn n_obs(&self) -> usize {
        match self {
            RegressionData::Dense { y, .. } => y.len(),
            RegressionData::Stacked(s) => s.n_samples * s.n,
        }
    }

    pub fn n_weights(&self) -> usize {
        match self {
            RegressionData::Dense { phi, .. } => phi.ncols(),
            RegressionData::Stacked(s) => s.n * (s.n + s.m),
        }
    }

    /// Number of time samples (rows of the dense design for `Dense`).
    pub fn n_samples(&self) -> usize {
        match self {
            RegressionData::Dense { y, .. } => y.len(),
            RegressionData::Stacked(s) => s.n_samples,
        }
    }

    fn y_stats(&self) -> (f64, f64) {
        match self {
            RegressionData::Dense { y, .. } => (y.norm_squared(), y.sum()),
            RegressionData::Stacked(s) => (s.yy.sum(), s.y_sum),
        }
    }

    /// Explicit `(Phi, y)` with `x_N` on top; `None` for a regression built
    /// from second moments only.
    pub fn to_dense(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        match self {
            RegressionData::Dense { phi, y } => Some((phi.clone(), y.clone())),
            RegressionData::Stacked(s) => {
                let (xi, targets) = s.samples.as_ref()?;
                let (n, big_n) = (s.n, targets.len());
                let nw = self.n_weights();
                let mut phi = DMatrix::zeros(big_n * n, nw);
                let mut y = DVector::zeros(big_n * n);
                for (blk, k) in (0..big_n).rev().enumerate() {
                    for i in 0..n {
                        let row = blk * n + i;
                        y[row] = targets[k][i];
                        for (f, &v) in xi[k].iter().enumerate() {
                            phi[(row, s.coord(i, f))] = v;
                        }
                    }
                }
                Some((phi, y))
            }
        }
    }
}

/// Regression built from the smoothed state means.
pub fn assemble_regression(sp: &SmoothPass, data: &Dataset) -> Result<RegressionData> {
    let big_n = data.n_samples();
    if sp.x_sm.len() != big_n + 1 {
        return Err(Error::dim("smoother pass does not cover k = 0..N"));
    }
    let n = sp.x_sm[0].len();
    let m = data.m();
    let xi = (1..=big_n)
        .map(|k| {
            let mut v = DVector::zeros(n + m);
            v.rows_mut(0, n).copy_from(&sp.x_sm[k - 1]);
            v.rows_mut(n, m).copy_from(&data.u[k - 1]);
            v
        })
        .collect();
    let targets = sp.x_sm[1..].to_vec();
    Ok(RegressionData::Stacked(StackedRegression::new(xi, targets)?))
}

/// Regression on the smoothed second moments (see [`StackedRegression::from_sums`]).
pub fn assemble_expected_regression(sp: &SmoothPass, es: &ESums) -> RegressionData {
    let y_sum = sp.x_sm[1..].iter().map(|x| x.sum()).sum();
    RegressionData::Stacked(StackedRegression::from_sums(es, y_sum))
}

/// Posterior of `w` for fixed `(gamma, sigma2)`. Pruned coordinates
/// (`gamma_i = 0`) have zero mean and zero covariance rows.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mu: DVector<f64>,
    pub sigma_diag: DVector<f64>,
    /// Covariance blocks on the active set, keyed by weight indices.
    pub blocks: Vec<(Vec<usize>, DMatrix<f64>)>,
    /// `Tr(I - Sigma_w Gamma^-1)` over the active set.
    pub trace_term: f64,
    /// `||y - Phi mu||^2`.
    pub residual: f64,
    /// Log evidence; `None` when `sigma2 = 0`.
    pub log_evidence: Option<f64>,
}

impl Posterior {
    pub fn covariance(&self) -> DMatrix<f64> {
        let nw = self.mu.len();
        let mut s = DMatrix::zeros(nw, nw);
        for (idx, blk) in &self.blocks {
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    s[(i, j)] = blk[(a, b)];
                }
            }
        }
        s
    }
}

/// Spectral pieces of one independent block:
/// `Gamma^{1/2} Phi^T Phi Gamma^{1/2} = V diag(s2) V^T`, `z = V^T Gamma^{1/2} Phi^T y`.
struct Spectral {
    idx: Vec<usize>,
    g_sqrt: DVector<f64>,
    v: DMatrix<f64>,
    s2: DVector<f64>,
    z: DVector<f64>,
}

const S2_RTOL: f64 = 1e-13;

fn block_from_gram(idx: Vec<usize>, g_sqrt: DVector<f64>, gram_a: DMatrix<f64>, c_a: DVector<f64>) -> Spectral {
    let scaled = DMatrix::from_fn(gram_a.nrows(), gram_a.ncols(), |i, j| g_sqrt[i] * gram_a[(i, j)] * g_sqrt[j]);
    let eig = scaled.symmetric_eigen();
    let smax = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let s2 = eig.eigenvalues.map(|v| if v > S2_RTOL * smax { v } else { 0.0 });
    let z = eig.eigenvectors.tr_mul(&c_a.component_mul(&g_sqrt));
    Spectral { idx, g_sqrt, v: eig.eigenvectors, s2, z }
}

fn block_from_design(idx: Vec<usize>, g_sqrt: DVector<f64>, phi_a: DMatrix<f64>, y: &DVector<f64>) -> Spectral {
    let mut scaled = phi_a;
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= g_sqrt[j];
    }
    let k = scaled.ncols();
    let svd = scaled.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    // thin SVD returns min(rows, cols) triplets; pad to a full basis of R^k
    let r = svd.singular_values.len();
    let mut v = DMatrix::zeros(k, k);
    v.columns_mut(0, r).copy_from(&vt.transpose());
    let mut s2 = DVector::zeros(k);
    let mut z = DVector::zeros(k);
    let uty = u.tr_mul(y);
    for t in 0..r {
        let s = svd.singular_values[t];
        if s > 0.0 && s * s > S2_RTOL * smax * smax {
            s2[t] = s * s;
            z[t] = s * uty[t];
        }
    }
    if r < k {
        // complete the basis with the orthogonal complement of the row space
        let proj = DMatrix::identity(k, k) - v.columns(0, r) * v.columns(0, r).transpose();
        let eig = proj.symmetric_eigen();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (t, &col) in order.iter().take(k - r).enumerate() {
            v.set_column(r + t, &eig.eigenvectors.column(col));
        }
    }
    Spectral { idx, g_sqrt, v, s2, z }
}

fn spectral_blocks(reg: &RegressionData, gamma: &DVector<f64>) -> Vec<Spectral> {
    match reg {
        RegressionData::Dense { phi, y } => {
            let idx: Vec<usize> = (0..phi.ncols()).filter(|&i| gamma[i] > 0.0).collect();
            if idx.is_empty() {
                return Vec::new();
            }
            let g_sqrt = DVector::from_iterator(idx.len(), idx.iter().map(|&i| gamma[i].sqrt()));
            let phi_a = phi.select_columns(&idx);
            vec![block_from_design(idx, g_sqrt, phi_a, y)]
        }
        RegressionData::Stacked(s) => {
            let nf = s.n + s.m;
            (0..s.n)
                .filter_map(|i| {
                    let feats: Vec<usize> = (0..nf).filter(|&f| gamma[s.coord(i, f)] > 0.0).collect();
                    if feats.is_empty() {
                        return None;
                    }
                    let idx: Vec<usize> = feats.iter().map(|&f| s.coord(i, f)).collect();
                    let g_sqrt = DVector::from_iterator(idx.len(), idx.iter().map(|&w| gamma[w].sqrt()));
                    let gram_a = DMatrix::from_fn(feats.len(), feats.len(), |a, b| s.gram[(feats[a], feats[b])]);
                    let c_a = DVector::from_iterator(feats.len(), feats.iter().map(|&f| s.cross[(i, f)]));
                    Some(block_from_gram(idx, g_sqrt, gram_a, c_a))
                })
                .collect()
        }
    }
}

fn check_hyper(reg: &RegressionData, gamma: &DVector<f64>, sigma2: f64) -> Result<()> {
    if gamma.len() != reg.n_weights() {
        return Err(Error::dim(format!("gamma has {} entries, expected {}", gamma.len(), reg.n_weights())));
    }
    if gamma.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(Error::invalid("gamma must be finite and nonnegative"));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("sigma2 must be finite and >= 0, got {sigma2}")));
    }
    Ok(())
}

/// `Sigma_w = (Gamma^-1 + Phi^T Phi / sigma2)^-1`, `mu_w = Sigma_w Phi^T y / sigma2`,
/// evaluated through the SVD of `Phi Gamma^{1/2}` with `sigma2` replaced by
/// `sigma2 + eps`. With `sigma2 = 0` this is the pseudoinverse solution
/// `Gamma^{1/2} (Phi Gamma^{1/2})^+ y`.
pub fn posterior(reg: &RegressionData, gamma: &DVector<f64>, sigma2: f64, eps: f64) -> Result<Posterior> {
    check_hyper(reg, gamma, sigma2)?;
    let nw = reg.n_weights();
    let blocks = spectral_blocks(reg, gamma);
    let s2e = sigma2 + eps;
    let (yy, _) = reg.y_stats();

    let mut mu = DVector::zeros(nw);
    let mut sigma_diag = DVector::zeros(nw);
    let mut cov_blocks = Vec::with_capacity(blocks.len());
    let mut trace_term = 0.0;
    let mut logdet = 0.0;
    let mut fit = 0.0;
    for b in &blocks {
        let k = b.idx.len();
        // mu = G V diag(1/(s2 + s2e)) z  on nonzero spectrum
        let mut coef = DVector::zeros(k);
        let mut shrink = DVector::zeros(k);
        for t in 0..k {
            if b.s2[t] > 0.0 {
                coef[t] = b.z[t] / (b.s2[t] + s2e);
                shrink[t] = b.s2[t] / (b.s2[t] + s2e);
                trace_term += shrink[t];
                if sigma2 > 0.0 {
                    logdet += (1.0 + b.s2[t] / sigma2).ln();
                    fit += b.z[t] * b.z[t] / (b.s2[t] + sigma2);
                }
            }
        }
        let mu_b = (&b.v * coef).component_mul(&b.g_sqrt);
        // Sigma = Gamma - G V diag(shrink) V^T G
        let gv = DMatrix::from_fn(k, k, |i, j| b.g_sqrt[i] * b.v[(i, j)]);
        let mut gvs = gv.clone();
        for (j, mut col) in gvs.column_iter_mut().enumerate() {
            col *= shrink[j];
        }
        let mut cov = -(gvs * gv.transpose());
        for i in 0..k {
            cov[(i, i)] += b.g_sqrt[i] * b.g_sqrt[i];
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        for (a, &w) in b.idx.iter().enumerate() {
            mu[w] = mu_b[a];
            sigma_diag[w] = cov[(a, a)];
        }
        cov_blocks.push((b.idx.clone(), cov));
    }

    let residual = residual_norm2(reg, &mu);
    let n_obs = reg.n_obs() as f64;
    let log_evidence = (sigma2 > 0.0).then(|| {
        let quad = ((yy - fit) / sigma2).max(0.0);
        -0.5 * (n_obs * LN_2PI + n_obs * sigma2.ln() + logdet + quad)
    });
    Ok(Posterior { mu, sigma_diag, blocks: cov_blocks, trace_term, residual, log_evidence })
}

fn residual_norm2(reg: &RegressionData, w: &DVector<f64>) -> f64 {
    match reg {
        RegressionData::Dense { phi, y } => (y - phi * w).norm_squared(),
        RegressionData::Stacked(s) => {
            let nf = s.n + s.m;
            let mut total = 0.0;
            for i in 0..s.n {
                let wi = DVector::from_fn(nf, |f, _| w[s.coord(i, f)]);
                if wi.iter().all(|&v| v == 0.0) {
                    total += s.yy[i];
                    continue;
                }
                let cw = s.cross.row(i).transpose().dot(&wi);
                let gw = &s.gram * &wi;
                total += (s.yy[i] - 2.0 * cw + wi.dot(&gw)).max(0.0);
            }
            total
        }
    }
}

/// Log of the Gaussian evidence `N(y; 0, sigma2 I + Phi Gamma Phi^T)`.
pub fn marginal_loglik(reg: &RegressionData, gamma: &DVector<f64>, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("marginal likelihood needs sigma2 > 0"));
    }
    posterior(reg, gamma, sigma2, 0.0).map(|p| p.log_evidence.expect("sigma2 > 0"))
}

/// Normalization of the noise-variance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaDenominator {
    /// Total scalar observations `N_y`.
    Observations,
    /// Number of time samples `N`.
    Samples,
}

/// Hyperparameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaUpdate {
    /// `gamma_i <- Sigma_ii + mu_i^2`.
    Em,
    /// `gamma_i <- mu_i^2 / (1 - Sigma_ii / gamma_i)`.
    FixedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SblOptions {
    pub max_iter: usize,
    pub gamma_update: GammaUpdate,
    pub tol: f64,
    pub prune_tol: f64,
    pub eps: f64,
    pub freeze_sigma2: bool,
    pub sigma_denominator: SigmaDenominator,
    /// Lower bound on `sigma2` relative to the mean squared target.
    pub sigma2_floor_rel: f64,
    /// Relative tolerance for flagging an evidence decrease.
    pub evidence_tol: f64,
}

impl Default for SblOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gamma_update: GammaUpdate::Em,
            tol: 1e-6,
            prune_tol: 1e-12,
            eps: 1e-16,
            freeze_sigma2: false,
            sigma_denominator: SigmaDenominator::Observations,
            sigma2_floor_rel: 1e-12,
            evidence_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SblState {
    pub gamma: DVector<f64>,
    pub sigma2: f64,
    pub mu: DVector<f64>,
    pub sigma_diag: DVector<f64>,
    pub active: Vec<bool>,
    pub iteration: usize,
    pub converged: bool,
    /// Evidence before each M-step.
    pub evidence: Vec<f64>,
    pub active_counts: Vec<usize>,
    /// Number of steps where the evidence fell by more than the tolerance.
    pub evidence_warnings: usize,
}

impl SblState {
    /// `gamma = 1` on free coordinates, `sigma2 = 0.1 var(y)`.
    pub fn init(reg: &RegressionData, mask: &Mask) -> Result<Self> {
        if mask.len() != reg.n_weights() {
            return Err(Error::dim("mask does not match the regression"));
        }
        let gamma = DVector::from_iterator(mask.len(), mask.free.iter().map(|&f| if f { 1.0 } else { 0.0 }));
        let (yy, ys) = reg.y_stats();
        let n_obs = reg.n_obs() as f64;
        let var = (yy / n_obs - (ys / n_obs).powi(2)).max(0.0);
        Ok(Self::with_hyper(gamma, 0.1 * var))
    }

    pub fn with_hyper(gamma: DVector<f64>, sigma2: f64) -> Self {
        let nw = gamma.len();
        let active = gamma.iter().map(|&g| g > 0.0).collect();
        Self {
            gamma,
            sigma2,
            mu: DVector::zeros(nw),
            sigma_diag: DVector::zeros(nw),
            active,
            iteration: 0,
            converged: false,
            evidence: Vec::new(),
            active_counts: Vec::new(),
            evidence_warnings: 0,
        }
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Evidence-maximization EM with pruning. Masked coordinates are forced to
/// zero before the first iteration and stay there.
pub fn sbl_em(reg: &RegressionData, mask: &Mask, init: SblState, opts: &SblOptions) -> Result<SblState> {
    let nw = reg.n_weights();
    if mask.len() != nw || init.gamma.len() != nw {
        return Err(Error::dim("mask/initial state do not match the regression"));
    }
    let (yy, _) = reg.y_stats();
    let n_obs = reg.n_obs() as f64;
    let floor = (opts.sigma2_floor_rel * yy / n_obs).max(f64::MIN_POSITIVE);
    let denom = match opts.sigma_denominator {
        SigmaDenominator::Observations => n_obs,
        SigmaDenominator::Samples => reg.n_samples() as f64,
    };

    let mut st = init;
    for (g, &f) in st.gamma.iter_mut().zip(&mask.free) {
        if !f || *g < opts.prune_tol {
            *g = 0.0;
        }
    }
    if !opts.freeze_sigma2 {
        st.sigma2 = st.sigma2.max(floor);
    }
    st.iteration = 0;
    st.converged = false;
    st.evidence.clear();
    st.active_counts.clear();
    st.evidence_warnings = 0;

    while st.iteration < opts.max_iter {
        let post = posterior(reg, &st.gamma, st.sigma2, opts.eps)?;
        if let Some(ev) = post.log_evidence {
            if let Some(&prev) = st.evidence.last() {
                if ev < prev - opts.evidence_tol * prev.abs().max(1.0) {
                    st.evidence_warnings += 1;
                }
            }
            st.evidence.push(ev);
        }
        st.active_counts.push(st.gamma.iter().filter(|&&g| g > 0.0).count());

        let mut new_gamma = DVector::zeros(nw);
        for i in 0..nw {
            if st.gamma[i] > 0.0 {
                let (s_ii, mu2) = (post.sigma_diag[i].max(0.0), post.mu[i] * post.mu[i]);
                let g = match opts.gamma_update {
                    GammaUpdate::Em => s_ii + mu2,
                    GammaUpdate::FixedPoint => {
                        let well_determined = 1.0 - s_ii / st.gamma[i];
                        if well_determined > f64::EPSILON {
                            mu2 / well_determined
                        } else {
                            0.0
                        }
                    }
                };
                new_gamma[i] = if g < opts.prune_tol { 0.0 } else { g };
            }
        }
        if !opts.freeze_sigma2 {
            st.sigma2 = ((post.residual + st.sigma2 * post.trace_term) / denom).max(floor);
        }
        let norm = st.gamma.norm();
        let change = (&new_gamma - &st.gamma).norm();
        st.gamma = new_gamma;
        st.iteration += 1;
        if norm == 0.0 || change <= opts.tol * norm {
            st.converged = true;
            break;
        }
    }

    let post = posterior(reg, &st.gamma, st.sigma2, opts.eps)?;
    st.mu = post.mu;
    st.sigma_diag = post.sigma_diag;
    st.active = st.gamma.iter().map(|&g| g > 0.0).collect();
    Ok(st)
}
