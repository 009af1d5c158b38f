//! Kalman filter, Rauch-Tung-Striebel smoother, lag-one covariance smoother
//! and the smoothed sufficient statistics of the complete-data likelihood.
//!
//! Estimation uses `x_{k} = A x_{k-1} + B u_{k-1} + sigma w_k` with
//! `w_k ~ N(0, I_n)` and `y_k = C x_k + e_k`, `e_k ~ N(0, I_p)`. All
//! per-step vectors are indexed by sample, with index 0 the initial state
//! `t_0` (no measurement).

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, symmetrize};
use crate::model::{Dataset, StateSpaceModel};
use crate::{Error, Result};

pub const DIVERGENCE_NORM: f64 = 1e12;

/// Forward pass. `x_pred[0]`/`p_pred[0]` repeat the prior and `gain[0]`,
/// `innov[0]`, `innov_cov[0]` are empty placeholders.
#[derive(Debug, Clone)]
pub struct FilterPass {
    pub x_pred: Vec<DVector<f64>>,
    pub p_pred: Vec<DMatrix<f64>>,
    pub x_filt: Vec<DVector<f64>>,
    pub p_filt: Vec<DMatrix<f64>>,
    pub gain: Vec<DMatrix<f64>>,
    pub innov: Vec<DVector<f64>>,
    pub innov_cov: Vec<DMatrix<f64>>,
    /// Sum of innovation log-densities.
    pub loglik: f64,
}

impl FilterPass {
    pub fn n_samples(&self) -> usize {
        self.x_filt.len() - 1
    }
}

/// Backward pass. `m_sm[k] = Cov(x_k, x_{k-1} | Y^N)` for `k >= 1`;
/// `m_sm[0]` is zero. `j[k]` is the smoother gain for `k = 0..N-1`.
#[derive(Debug, Clone)]
pub struct SmoothPass {
    pub x_sm: Vec<DVector<f64>>,
    pub p_sm: Vec<DMatrix<f64>>,
    pub m_sm: Vec<DMatrix<f64>>,
    pub j: Vec<DMatrix<f64>>,
    /// Set when some `P_{k+1|k}` had to be pseudo-inverted.
    pub used_pinv: bool,
    /// Largest condition estimate of `P_{k+1|k}` seen.
    pub max_pred_condition: f64,
}

/// Smoothed expectations of the complete-data sufficient statistics,
/// `xi_k = [x_{k-1}; u_{k-1}]`.
#[derive(Debug, Clone)]
pub struct ESums {
    pub s_xx: DMatrix<f64>,
    pub s_xxi: DMatrix<f64>,
    pub s_xixi: DMatrix<f64>,
    pub e0: DMatrix<f64>,
    pub x0_sm: DVector<f64>,
    pub p0_sm: DMatrix<f64>,
    pub n_samples: usize,
}

fn check_dims(model: &StateSpaceModel, data: &Dataset) -> Result<()> {
    if data.p() != model.p() || data.m() != model.m() {
        return Err(Error::dim(format!(
            "model has p = {}, m = {} but data has p = {}, m = {}",
            model.p(),
            model.m(),
            data.p(),
            data.m()
        )));
    }
    if model.has_feedthrough() {
        return Err(Error::Unsupported("estimation with nonzero D".into()));
    }
    Ok(())
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn kalman_filter(model: &StateSpaceModel, data: &Dataset) -> Result<FilterPass> {
    check_dims(model, data)?;
    let n = model.n();
    let p = model.p();
    let big_n = data.n_samples();
    let (a, b, c) = (&model.a, &model.b, &model.c);
    let at = a.transpose();
    let ct = c.transpose();
    let q_noise = model.sigma * model.sigma;

    let mut fp = FilterPass {
        x_pred: Vec::with_capacity(big_n + 1),
        p_pred: Vec::with_capacity(big_n + 1),
        x_filt: Vec::with_capacity(big_n + 1),
        p_filt: Vec::with_capacity(big_n + 1),
        gain: Vec::with_capacity(big_n + 1),
        innov: Vec::with_capacity(big_n + 1),
        innov_cov: Vec::with_capacity(big_n + 1),
        loglik: 0.0,
    };
    fp.x_pred.push(model.m0.clone());
    fp.p_pred.push(model.r0.clone());
    fp.x_filt.push(model.m0.clone());
    fp.p_filt.push(model.r0.clone());
    fp.gain.push(DMatrix::zeros(n, p));
    fp.innov.push(DVector::zeros(p));
    fp.innov_cov.push(DMatrix::zeros(p, p));

    for k in 1..=big_n {
        let x_prev = &fp.x_filt[k - 1];
        let p_prev = &fp.p_filt[k - 1];
        let x_pred = a * x_prev + b * &data.u[k - 1];
        let mut p_pred = a * p_prev * &at;
        for i in 0..n {
            p_pred[(i, i)] += q_noise;
        }
        let p_pred = symmetrize(&p_pred);
        let norm = p_pred.amax();
        if !(norm <= DIVERGENCE_NORM) || !x_pred.iter().all(|v| v.is_finite()) {
            return Err(Error::FilterDiverged { step: k, norm });
        }

        let pct = &p_pred * &ct;
        let mut s = c * &pct;
        for i in 0..p {
            s[(i, i)] += 1.0;
        }
        let s = symmetrize(&s);
        let chol = s.clone().cholesky().ok_or(Error::FilterDiverged { step: k, norm })?;
        // K = P C^T S^-1  computed as (S^-1 C P)^T
        let gain = chol.solve(&pct.transpose()).transpose();
        let v = &data.y[k - 1] - c * &x_pred;
        let x_filt = &x_pred + &gain * &v;
        let p_filt = symmetrize(&(&p_pred - &gain * pct.transpose()));

        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = v.dot(&chol.solve(&v));
        fp.loglik += -0.5 * (p as f64 * LN_2PI + logdet + quad);

        fp.x_pred.push(x_pred);
        fp.p_pred.push(p_pred);
        fp.x_filt.push(x_filt);
        fp.p_filt.push(p_filt);
        fp.gain.push(gain);
        fp.innov.push(v);
        fp.innov_cov.push(s);
    }
    Ok(fp)
}

/// Log-likelihood of `Y^N` by the prediction-error decomposition.
pub fn observed_loglik(model: &StateSpaceModel, data: &Dataset) -> Result<f64> {
    Ok(kalman_filter(model, data)?.loglik)
}

pub fn rts_smoother(model: &StateSpaceModel, fp: &FilterPass) -> SmoothPass {
    let big_n = fp.n_samples();
    let n = model.n();
    let at = model.a.transpose();
    let mut x_sm = vec![DVector::zeros(n); big_n + 1];
    let mut p_sm = vec![DMatrix::zeros(n, n); big_n + 1];
    let mut j = vec![DMatrix::zeros(n, n); big_n];
    x_sm[big_n] = fp.x_filt[big_n].clone();
    p_sm[big_n] = fp.p_filt[big_n].clone();
    let mut used_pinv = false;
    let mut max_cond: f64 = 1.0;

    for k in (0..big_n).rev() {
        let pp = &fp.p_pred[k + 1];
        // J_k = P_{k|k} A^T P_{k+1|k}^-1 = (P_{k+1|k}^-1 A P_{k|k})^T
        let rhs = &model.a * &fp.p_filt[k];
        let jk = match pp.clone().cholesky() {
            Some(ch) => {
                let d = ch.l_dirty().diagonal();
                let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                max_cond = max_cond.max((hi / lo).powi(2));
                ch.solve(&rhs).transpose()
            }
            None => {
                used_pinv = true;
                max_cond = f64::INFINITY;
                &fp.p_filt[k] * &at * linalg::pinv(&symmetrize(pp), 1e-14)
            }
        };
        x_sm[k] = &fp.x_filt[k] + &jk * (&x_sm[k + 1] - &fp.x_pred[k + 1]);
        p_sm[k] = symmetrize(&(&fp.p_filt[k] + &jk * (&p_sm[k + 1] - pp) * jk.transpose()));
        j[k] = jk;
    }
    SmoothPass {
        x_sm,
        p_sm,
        m_sm: Vec::new(),
        j,
        used_pinv,
        max_pred_condition: max_cond,
    }
}

/// Lag-one covariances `M_{k|N}`, `k = 1..N`, with `M_{0|N}` returned as zero.
pub fn lag_one_smoother(model: &StateSpaceModel, fp: &FilterPass, sp: &SmoothPass) -> Vec<DMatrix<f64>> {
    let big_n = fp.n_samples();
    let n = model.n();
    let mut m = vec![DMatrix::zeros(n, n); big_n + 1];
    if big_n == 0 {
        return m;
    }
    let ikc = DMatrix::identity(n, n) - &fp.gain[big_n] * &model.c;
    m[big_n] = ikc * &model.a * &fp.p_filt[big_n - 1];
    for k in (1..big_n).rev() {
        let jt_prev = sp.j[k - 1].transpose();
        let inner = &m[k + 1] - &model.a * &fp.p_filt[k];
        m[k] = &fp.p_filt[k] * &jt_prev + &sp.j[k] * inner * &jt_prev;
    }
    m
}

/// Filter, smoother and lag-one smoother in one call.
pub fn smooth(model: &StateSpaceModel, data: &Dataset) -> Result<(FilterPass, SmoothPass)> {
    let fp = kalman_filter(model, data)?;
    let mut sp = rts_smoother(model, &fp);
    sp.m_sm = lag_one_smoother(model, &fp, &sp);
    Ok((fp, sp))
}

pub fn expectation_sums(sp: &SmoothPass, data: &Dataset, m0: &DVector<f64>) -> Result<ESums> {
    let big_n = data.n_samples();
    if sp.x_sm.len() != big_n + 1 || sp.m_sm.len() != big_n + 1 {
        return Err(Error::dim("smoother pass does not cover k = 0..N with lag-one terms"));
    }
    let n = sp.x_sm[0].len();
    let m = data.m();
    if m0.len() != n {
        return Err(Error::dim("m0 does not match the state dimension"));
    }
    let mut s_xx = DMatrix::zeros(n, n);
    let mut s_xxi = DMatrix::zeros(n, n + m);
    let mut s_xixi = DMatrix::zeros(n + m, n + m);
    for k in 1..=big_n {
        let xk = &sp.x_sm[k];
        let xp = &sp.x_sm[k - 1];
        let u = &data.u[k - 1];
        s_xx += xk * xk.transpose() + &sp.p_sm[k];
        {
            let mut blk = s_xxi.view_mut((0, 0), (n, n));
            blk += xk * xp.transpose() + &sp.m_sm[k];
        }
        {
            let mut blk = s_xxi.view_mut((0, n), (n, m));
            blk += xk * u.transpose();
        }
        {
            let mut blk = s_xixi.view_mut((0, 0), (n, n));
            blk += xp * xp.transpose() + &sp.p_sm[k - 1];
        }
        let xu = xp * u.transpose();
        {
            let mut blk = s_xixi.view_mut((0, n), (n, m));
            blk += &xu;
        }
        {
            let mut blk = s_xixi.view_mut((n, 0), (m, n));
            blk += xu.transpose();
        }
        {
            let mut blk = s_xixi.view_mut((n, n), (m, m));
            blk += u * u.transpose();
        }
    }
    let d0 = &sp.x_sm[0] - m0;
    let e0 = symmetrize(&(&sp.p_sm[0] + &d0 * d0.transpose()));
    Ok(ESums {
        s_xx: symmetrize(&s_xx),
        s_xxi,
        s_xixi: symmetrize(&s_xixi),
        e0,
        x0_sm: sp.x_sm[0].clone(),
        p0_sm: sp.p_sm[0].clone(),
        n_samples: big_n,
    })
}

/// Expected complete-data log-likelihood up to constants. The flag reports
/// whether `R0` needed a diagonal jitter to be inverted.
pub fn q_function(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma2: f64,
    _m0: &DVector<f64>,
    r0: &DMatrix<f64>,
    es: &ESums,
    n_samples: usize,
) -> Result<(f64, bool)> {
    let n = a.nrows();
    if es.s_xx.nrows() != n || es.s_xixi.nrows() != n + b.ncols() {
        return Err(Error::dim("parameters do not match the sufficient statistics"));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    let mut l = DMatrix::zeros(n, n + b.ncols());
    l.columns_mut(0, n).copy_from(a);
    l.columns_mut(n, b.ncols()).copy_from(b);

    let (r0_used, jittered) = match linalg::spd_logdet(r0) {
        Some(_) => (r0.clone(), false),
        None => {
            let jitter = 1e-10 * (r0.trace() / n as f64).abs().max(1e-300);
            (r0 + DMatrix::identity(n, n) * jitter, true)
        }
    };
    let logdet_r0 = linalg::spd_logdet(&r0_used).ok_or_else(|| Error::invalid("R0 is not positive semidefinite"))?;
    let ch = r0_used.clone().cholesky().expect("factorized above");
    let tr_e0 = ch.solve(&es.e0).trace();

    let lsx = &l * es.s_xxi.transpose();
    let resid = &es.s_xx - &lsx - lsx.transpose() + &l * &es.s_xixi * l.transpose();
    let value = -0.5
        * (logdet_r0 + (n_samples * n) as f64 * sigma2.ln() + tr_e0 + resid.trace() / sigma2);
    Ok((value, jittered))
}
