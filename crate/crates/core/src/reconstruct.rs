//! Outer EM loop: Kalman smoothing for the E-step and sparse Bayesian
//! learning (or plain maximum likelihood) for the M-step, followed by DSF and
//! network extraction from the final estimate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsf::{self, DsfFile, FreqSample, NetworkGraph};
use crate::io;
use crate::linalg::{derive_seed, symmetrize};
use crate::model::{Dataset, StateSpaceModel};
use crate::sbl::{self, a_index, b_index, identifiability_mask, GammaUpdate, Mask, MaskMode, SblOptions, SblState};
use crate::subspace;
use crate::smoother::{self, ESums, FilterPass, SmoothPass};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStepKind {
    /// Sparse Bayesian learning on the smoothed-state regression.
    Sbl,
    /// Exact maximizer of the expected complete-data log-likelihood
    /// (classical EM, no sparsity prior).
    MaximumLikelihood,
}

/// Starting point of the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `A = 0.5 I` on free diagonal entries plus a seeded perturbation of the
    /// free entries, unit diagonal input gains.
    Diagonal,
    /// Subspace fit moved to structured coordinates and masked; falls back to
    /// `Diagonal` when the fit is not available.
    Subspace,
}

/// Statistics fed to the SBL M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionKind {
    /// Smoothed means plugged in for the states.
    SmoothedMeans,
    /// Smoothed second moments, including the state covariances.
    SecondMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub n_states: usize,
    pub mask: MaskMode,
    pub outer_max_iter: usize,
    pub outer_tol: f64,
    pub m_step: MStepKind,
    pub init: InitKind,
    pub regression: RegressionKind,
    pub sbl: SblOptions,
    pub rel_tol: f64,
    pub seed: u64,
    /// Estimate a common scale of the output and process noise (data are
    /// divided by it so the unit-variance innovation assumption holds).
    pub estimate_output_scale: bool,
    /// Carry `gamma` and `sigma2` between outer iterations.
    pub warm_start: bool,
    /// Apply a general sparsifying hidden transform to the subspace start.
    pub sparsify_start: bool,
    /// Random restarts of the rotation search.
    pub rotation_restarts: usize,
    /// Standard deviation of the seeded perturbation added to the free
    /// entries of the initial `A`.
    pub init_perturbation: f64,
    /// Starting point replacing the default initialization.
    #[serde(skip)]
    pub initial_model: Option<StateSpaceModel>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_states: 0,
            mask: MaskMode::DiagB,
            outer_max_iter: 50,
            outer_tol: 1e-4,
            m_step: MStepKind::Sbl,
            init: InitKind::Diagonal,
            regression: RegressionKind::SecondMoments,
            sbl: SblOptions { gamma_update: GammaUpdate::FixedPoint, ..SblOptions::default() },
            rel_tol: dsf::DEFAULT_REL_TOL,
            seed: 0,
            estimate_output_scale: true,
            warm_start: true,
            init_perturbation: 0.1,
            rotation_restarts: 8,
            sparsify_start: true,
            initial_model: None,
        }
    }
}

impl ReconConfig {
    pub fn new(n_states: usize) -> Self {
        Self { n_states, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIter,
    Diverged,
}

/// Diagnostics of one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Log-likelihood of the raw outputs under the parameters used in the E-step.
    pub loglik: f64,
    pub n_active: usize,
    pub sigma2: f64,
    pub output_scale: f64,
    pub gamma_max: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub evidence_warnings: usize,
    pub damped: bool,
    pub smoother_pinv: bool,
    /// Frobenius norm of `M_{1|N}`.
    pub lag_one_norm: f64,
    pub w_change: f64,
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma2: f64,
    pub m0: DVector<f64>,
    pub r0: DMatrix<f64>,
    pub output_scale: f64,
    pub dsf: FreqSample,
    pub network: NetworkGraph,
    pub trace: Vec<TraceEntry>,
    pub status: Status,
    pub mask: Mask,
}

impl ReconResult {
    /// Estimated model in the scaled coordinates used during fitting.
    pub fn model(&self) -> Result<StateSpaceModel> {
        let p = self.network.q_adj.nrows();
        let mut model = StateSpaceModel::with_selector_output(self.a.clone(), self.b.clone(), p, self.sigma2.sqrt())?;
        model.m0 = self.m0.clone();
        model.r0 = self.r0.clone();
        Ok(model)
    }
}

/// Column-major split of `w = [vec(A); vec(B)]`.
pub fn unpack_w(w: &DVector<f64>, n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if w.len() != n * n + n * m {
        return Err(Error::dim(format!("w has {} entries, expected {}", w.len(), n * n + n * m)));
    }
    let a = DMatrix::from_column_slice(n, n, &w.as_slice()[..n * n]);
    let b = DMatrix::from_column_slice(n, m, &w.as_slice()[n * n..]);
    Ok((a, b))
}

pub fn pack_w(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// `||w_curr - w_prev|| <= tol * max(1, ||w_prev||)`.
pub fn converged(w_prev: &DVector<f64>, w_curr: &DVector<f64>, tol: f64) -> bool {
    (w_curr - w_prev).norm() <= tol * w_prev.norm().max(1.0)
}

const ARX_ORDER: usize = 4;
/// Floor on the noise scale relative to the output RMS, so exact data stay
/// well conditioned after scaling.
const MIN_RELATIVE_SCALE: f64 = 1e-6;
const ROTATION_SWEEPS: usize = 30;

fn initial_model(cfg: &ReconConfig, mask: &Mask, p: usize, sigma: f64) -> Result<StateSpaceModel> {
    let n = cfg.n_states;
    let m = mask.m;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1A17));
    let normal = Normal::new(0.0, cfg.init_perturbation.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            if mask.free[a_index(n, i, j)] {
                let base = if i == j { 0.5 } else { 0.0 };
                a[(i, j)] = base + normal.sample(&mut rng);
            }
        }
    }
    let mut b = DMatrix::zeros(n, m);
    for (i, j) in mask.diagonal_gains(p) {
        b[(i, j)] = 1.0;
    }
    StateSpaceModel::with_selector_output(a, b, p, sigma)
}

fn subspace_start(cfg: &ReconConfig, data: &Dataset, mask: &Mask, p: usize) -> Option<StateSpaceModel> {
    let n = mask.n;
    let fit = subspace::subspace_fit(data, n, subspace::default_horizon(n, p))?;
    let (mut a, mut b) = (fit.a, fit.b);
    if cfg.sparsify_start && !matches!(mask.mode, MaskMode::PDiag { .. }) {
        subspace::sparsify_hidden_general(
            &mut a,
            &mut b,
            p,
            ROTATION_SWEEPS,
            cfg.rotation_restarts,
            derive_seed(cfg.seed, 0x2070),
        );
    }
    for (i, v) in a.iter_mut().enumerate() {
        if !mask.free[i] {
            *v = 0.0;
        }
    }
    for (i, v) in b.iter_mut().enumerate() {
        if !mask.free[n * n + i] {
            *v = 0.0;
        }
    }
    let sigma = fit.state_residual.sqrt().max(1e-6);
    StateSpaceModel::with_selector_output(a, b, p, sigma).ok()
}

fn blend(prev: &StateSpaceModel, next: &StateSpaceModel) -> StateSpaceModel {
    let mut out = next.clone();
    out.a = (&prev.a + &next.a) * 0.5;
    out.b = (&prev.b + &next.b) * 0.5;
    out.sigma = (0.5 * (prev.sigma.powi(2) + next.sigma.powi(2))).sqrt();
    out
}

/// Classical M-step: row-wise least squares on the smoothed sufficient
/// statistics restricted to the free coordinates, and the matching `sigma2`.
fn ml_m_step(es: &ESums, mask: &Mask) -> (DVector<f64>, f64) {
    let (n, m) = (mask.n, mask.m);
    let nf = n + m;
    let mut w = DVector::zeros(n * nf);
    for i in 0..n {
        let feats: Vec<usize> = (0..nf)
            .filter(|&f| mask.free[if f < n { a_index(n, i, f) } else { b_index(n, i, f - n) }])
            .collect();
        if feats.is_empty() {
            continue;
        }
        let g = DMatrix::from_fn(feats.len(), feats.len(), |a, b| es.s_xixi[(feats[a], feats[b])]);
        let c = DVector::from_iterator(feats.len(), feats.iter().map(|&f| es.s_xxi[(i, f)]));
        let sol = match g.clone().cholesky() {
            Some(ch) => ch.solve(&c),
            None => crate::linalg::pinv(&g, 1e-12) * c,
        };
        for (a, &f) in feats.iter().enumerate() {
            let idx = if f < n { a_index(n, i, f) } else { b_index(n, i, f - n) };
            w[idx] = sol[a];
        }
    }
    let (a, b) = unpack_w(&w, n, m).expect("sizes match");
    let mut l = DMatrix::zeros(n, nf);
    l.columns_mut(0, n).copy_from(&a);
    l.columns_mut(n, m).copy_from(&b);
    let lsx = &l * es.s_xxi.transpose();
    let resid = &es.s_xx - &lsx - lsx.transpose() + &l * &es.s_xixi * l.transpose();
    let sigma2 = resid.trace() / (es.n_samples * n) as f64;
    (w, sigma2)
}

/// Mean over samples and channels of `E ||y_k - C x_k||^2 | Y^N`.
fn output_residual(model: &StateSpaceModel, data: &Dataset, sp: &SmoothPass) -> f64 {
    let c = &model.c;
    let big_n = data.n_samples();
    let mut total = 0.0;
    for k in 1..=big_n {
        let r = &data.y[k - 1] - c * &sp.x_sm[k];
        total += r.norm_squared() + (c * &sp.p_sm[k] * c.transpose()).trace();
    }
    total / (big_n * model.p()) as f64
}

/// RMS one-step prediction residual of a least-squares ARX fit: outputs at
/// lags `1..=order` and inputs at lags `0..order` (`y[k]` already depends on
/// `u[k]` through `B`).
fn arx_residual_scale(data: &Dataset, order: usize) -> Option<f64> {
    let (p, m, big_n) = (data.p(), data.m(), data.n_samples());
    let nf = order * (p + m);
    if big_n <= order + nf {
        return None;
    }
    let rows = big_n - order;
    let phi = DMatrix::from_fn(rows, nf, |r, c| {
        let k = r + order;
        let lag = c / (p + m);
        let j = c % (p + m);
        if j < p {
            data.y[k - lag - 1][j]
        } else {
            data.u[k - lag][j - p]
        }
    });
    let targets = DMatrix::from_fn(rows, p, |r, j| data.y[r + order][j]);
    let svd = phi.clone().svd(true, true);
    let theta = svd.solve(&targets, 1e-12 * svd.singular_values.max()).ok()?;
    let resid = targets - phi * theta;
    let mse = resid.norm_squared() / (rows * p) as f64;
    (mse > 0.0 && mse.is_finite()).then(|| mse.sqrt())
}

fn e_step(model: &StateSpaceModel, data: &Dataset) -> Result<(FilterPass, SmoothPass)> {
    smoother::smooth(model, data)
}

/// Identifies `(A, B, sigma2)` from input/output data and extracts the network.
pub fn reconstruct(data: &Dataset, cfg: &ReconConfig) -> Result<ReconResult> {
    let p = data.p();
    let m = data.m();
    let n = cfg.n_states;
    if n < p {
        return Err(Error::invalid(format!("n_states = {n} must be at least p = {p}")));
    }
    if !(cfg.outer_tol > 0.0) {
        return Err(Error::invalid("outer_tol must be positive"));
    }
    if data.n_samples() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let mask = identifiability_mask(n, p, m, cfg.mask)?;
    let big_n = data.n_samples();

    let mean_var = data.output_variances().mean();
    if !(mean_var > 0.0) && cfg.estimate_output_scale {
        return Err(Error::ZeroSignal);
    }
    let mut scale = if cfg.estimate_output_scale {
        arx_residual_scale(data, ARX_ORDER)
            .unwrap_or((0.1 * mean_var).sqrt())
            .max(MIN_RELATIVE_SCALE * mean_var.sqrt())
    } else {
        1.0
    };
    let mut scaled = data.scaled(scale);

    let sigma0 = (0.1 * scaled.output_variances().mean()).sqrt().max(1e-6);
    let mut model = match &cfg.initial_model {
        Some(init) => {
            if init.n() != n || init.p() != p || init.m() != m {
                return Err(Error::dim("initial model does not match the configuration"));
            }
            let mut init = init.clone();
            for (i, v) in init.a.iter_mut().enumerate() {
                if !mask.free[i] {
                    *v = 0.0;
                }
            }
            for (i, v) in init.b.iter_mut().enumerate() {
                if !mask.free[n * n + i] {
                    *v = 0.0;
                }
            }
            init
        }
        None => match cfg.init {
            InitKind::Subspace => subspace_start(cfg, &scaled, &mask, p)
                .map_or_else(|| initial_model(cfg, &mask, p, sigma0), Ok)?,
            InitKind::Diagonal => initial_model(cfg, &mask, p, sigma0)?,
        },
    };
    let mut w = pack_w(&model.a, &model.b);
    let mut sbl_state: Option<SblState> = None;
    let mut prev_model: Option<StateSpaceModel> = None;
    let mut trace = Vec::new();
    let mut status = Status::MaxIter;

    for it in 0..cfg.outer_max_iter {
        // E-step with one damped retry
        let mut damped = false;
        let scale_before = scale;
        let sigma2_before = model.sigma * model.sigma;
        let (fp, mut sp) = match e_step(&model, &scaled) {
            Ok(v) => v,
            Err(Error::FilterDiverged { .. }) | Err(Error::SimulationDiverged { .. }) => {
                let Some(prev) = &prev_model else {
                    status = Status::Diverged;
                    break;
                };
                damped = true;
                model = blend(prev, &model);
                match e_step(&model, &scaled) {
                    Ok(v) => v,
                    Err(Error::FilterDiverged { .. }) => {
                        status = Status::Diverged;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        let loglik = fp.loglik - (big_n * p) as f64 * scale.ln();
        let lag_one_norm = sp.m_sm.get(1).map_or(0.0, |m1| m1.norm());
        let smoother_pinv = sp.used_pinv;
        prev_model = Some(model.clone());

        model.m0 = sp.x_sm[0].clone();
        model.r0 = symmetrize(&sp.p_sm[0]);

        if cfg.estimate_output_scale {
            let r = output_residual(&model, &scaled, &sp).max(1e-12);
            let f = 1.0 / r.sqrt();
            scale *= r.sqrt();
            scaled = data.scaled(scale);
            for x in sp.x_sm.iter_mut() {
                *x *= f;
            }
            for pm in sp.p_sm.iter_mut().chain(sp.m_sm.iter_mut()) {
                *pm *= f * f;
            }
            model.m0 *= f;
            model.r0 *= f * f;
            if let Some(st) = sbl_state.as_mut() {
                st.sigma2 *= f * f;
            }
        }

        let (w_new, sigma2_new, n_active, gamma_max, inner_iterations, inner_converged, evidence_warnings) =
            match cfg.m_step {
                MStepKind::Sbl => {
                    let reg = match cfg.regression {
                        RegressionKind::SmoothedMeans => sbl::assemble_regression(&sp, &scaled)?,
                        RegressionKind::SecondMoments => {
                            let es = smoother::expectation_sums(&sp, &scaled, &model.m0)?;
                            sbl::assemble_expected_regression(&sp, &es)
                        }
                    };
                    let init = match (&sbl_state, cfg.warm_start) {
                        (Some(st), true) => SblState::with_hyper(st.gamma.clone(), st.sigma2),
                        _ => SblState::init(&reg, &mask)?,
                    };
                    let st = sbl::sbl_em(&reg, &mask, init, &cfg.sbl)?;
                    let out = (
                        st.mu.clone(),
                        st.sigma2,
                        st.n_active(),
                        st.gamma.max(),
                        st.iteration,
                        st.converged,
                        st.evidence_warnings,
                    );
                    sbl_state = Some(st);
                    out
                }
                MStepKind::MaximumLikelihood => {
                    let es = smoother::expectation_sums(&sp, &scaled, &prev_model.as_ref().unwrap().m0)?;
                    let (w_ml, s2) = ml_m_step(&es, &mask);
                    let active = w_ml.iter().filter(|&&v| v != 0.0).count();
                    (w_ml, s2, active, f64::INFINITY, 0, true, 0)
                }
            };
        let (a, b) = unpack_w(&w_new, n, m)?;
        model.a = a;
        model.b = b;
        model.sigma = sigma2_new.max(0.0).sqrt();

        let w_change = (&w_new - &w).norm();
        let done = converged(&w, &w_new, cfg.outer_tol)
            && (scale - scale_before).abs() <= cfg.outer_tol * scale_before
            && (sigma2_new - sigma2_before).abs() <= cfg.outer_tol * sigma2_before.max(1e-300);
        w = w_new;
        trace.push(TraceEntry {
            iteration: it + 1,
            loglik,
            n_active,
            sigma2: sigma2_new,
            output_scale: scale,
            gamma_max,
            inner_iterations,
            inner_converged,
            evidence_warnings,
            damped,
            smoother_pinv,
            lag_one_norm,
            w_change,
        });
        if done {
            status = Status::Converged;
            break;
        }
    }

    let est = StateSpaceModel::with_selector_output(model.a.clone(), model.b.clone(), p, model.sigma)?;
    let q_points = dsf::default_q_points(derive_seed(cfg.seed, 0xD5F));
    let sample = dsf::dsf_from_state_space(&est, &q_points)?;
    let network = dsf::boolean_structure(&sample, cfg.rel_tol)?;
    Ok(ReconResult {
        a: model.a,
        b: model.b,
        sigma2: model.sigma * model.sigma,
        m0: model.m0,
        r0: model.r0,
        output_scale: scale,
        dsf: sample,
        network,
        trace,
        status,
        mask,
    })
}

/// Runs [`reconstruct`] in P-diagonal mode for every feasible `p22`.
pub fn sweep_p22(data: &Dataset, cfg: &ReconConfig) -> Vec<(usize, Result<ReconResult>)> {
    let p = data.p();
    (0..=p)
        .filter(|&p22| cfg.n_states >= p + (p - p22))
        .map(|p22| {
            let mut c = cfg.clone();
            c.mask = MaskMode::PDiag { p22 };
            (p22, reconstruct(data, &c))
        })
        .collect()
}

/// On-disk reconstruction result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultFile {
    pub config: ReconConfig,
    pub status: Status,
    #[serde(with = "crate::io::rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::io::rows")]
    pub b: DMatrix<f64>,
    pub sigma2: f64,
    #[serde(with = "crate::io::vector")]
    pub m0: DVector<f64>,
    #[serde(with = "crate::io::rows")]
    pub r0: DMatrix<f64>,
    pub output_scale: f64,
    pub dsf: DsfFile,
    pub trace: Vec<TraceEntry>,
}

impl ResultFile {
    pub fn new(result: &ReconResult, cfg: &ReconConfig) -> Self {
        Self {
            config: cfg.clone(),
            status: result.status,
            a: result.a.clone(),
            b: result.b.clone(),
            sigma2: result.sigma2,
            m0: result.m0.clone(),
            r0: result.r0.clone(),
            output_scale: result.output_scale,
            dsf: DsfFile::new(&result.dsf, &result.network, cfg.rel_tol),
            trace: result.trace.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        io::from_json_str(text, "result file")
    }
}
