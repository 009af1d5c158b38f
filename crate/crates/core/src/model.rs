//! Innovations-form state-space models, random sparse ground truths and
//! input/output simulation.
//!
//! The model class is
//!
//! ```text
//! x(t_{k+1}) = A x(t_k) + B u(t_k) + sigma * w(t_k)
//! y(t_k)     = C x(t_k) + D u(t_k) + e(t_k),       e ~ N(0, I)
//! ```
//!
//! with `x(t_0) ~ N(m0, R0)`. The innovation covariance is fixed to the
//! identity and is therefore not stored.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dsf::{self, DEFAULT_REL_TOL};
use crate::io::{self, matrix_from_rows, matrix_to_rows};
use crate::linalg::{self, derive_seed, rng_from_seed, standard_normal};
use crate::{Error, Result};

/// Discrete-time state-space model with scalar process-noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma: f64,
    pub m0: DVector<f64>,
    pub r0: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        sigma: f64,
        m0: DVector<f64>,
        r0: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim(format!("A must be square, got {:?}", a.shape())));
        }
        let m = b.ncols();
        if b.nrows() != n {
            return Err(Error::dim(format!("B must have {n} rows, got {}", b.nrows())));
        }
        let p = c.nrows();
        if c.ncols() != n {
            return Err(Error::dim(format!("C must have {n} columns, got {}", c.ncols())));
        }
        if p > n {
            return Err(Error::dim(format!("need n >= p, got n = {n}, p = {p}")));
        }
        if d.shape() != (p, m) {
            return Err(Error::dim(format!("D must be {p}x{m}, got {:?}", d.shape())));
        }
        if m0.len() != n || r0.shape() != (n, n) {
            return Err(Error::dim("m0/R0 must match the state dimension"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&a) && finite(&b) && finite(&c) && finite(&d) && finite(&r0))
            || !m0.iter().all(|v| v.is_finite())
        {
            return Err(Error::invalid("model entries must be finite"));
        }
        if (&r0 - r0.transpose()).abs().max() > 1e-9 * (1.0 + r0.abs().max()) {
            return Err(Error::invalid("R0 must be symmetric"));
        }
        Ok(Self { a, b, c, d, sigma, m0, r0 })
    }

    /// Model with `C = [I 0]`, `D = 0`, `m0 = 0` and `R0 = I`.
    pub fn with_selector_output(a: DMatrix<f64>, b: DMatrix<f64>, p: usize, sigma: f64) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if p > n {
            return Err(Error::dim(format!("need n >= p, got n = {n}, p = {p}")));
        }
        Self::new(
            a,
            b,
            selector(p, n),
            DMatrix::zeros(p, m),
            sigma,
            DVector::zeros(n),
            DMatrix::identity(n, n),
        )
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Innovation gain `K = sigma * I_{n x p}`.
    pub fn innovation_gain(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.p()) * self.sigma
    }

    pub fn has_feedthrough(&self) -> bool {
        self.d.iter().any(|&v| v != 0.0)
    }

    pub fn is_stable(&self) -> bool {
        linalg::spectral_radius(&self.a) < 1.0
    }
}

/// `[I_p 0]` of size `p x n`.
pub fn selector(p: usize, n: usize) -> DMatrix<f64> {
    DMatrix::identity(p, n)
}

/// Input/output record. `u[k]` drives the transition into sample `k + 1`,
/// so row `k` pairs `y(t_{k+1})` with `u(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub seed: Option<u64>,
    pub snr_db: Option<f64>,
    /// Noise scale actually used by [`simulate`], if known.
    pub noise_scale: Option<f64>,
}

impl Dataset {
    pub fn new(y: Vec<DVector<f64>>, u: Vec<DVector<f64>>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::invalid("dataset needs at least one sample"));
        }
        if y.len() != u.len() {
            return Err(Error::dim(format!("len(Y) = {} but len(U) = {}", y.len(), u.len())));
        }
        let p = y[0].len();
        let m = u[0].len();
        for (k, (yk, uk)) in y.iter().zip(&u).enumerate() {
            if yk.len() != p || uk.len() != m {
                return Err(Error::dim(format!("sample {k} has inconsistent dimensions")));
            }
            if !yk.iter().chain(uk.iter()).all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("sample {k} is not finite")));
            }
        }
        Ok(Self { y, u, seed: None, snr_db: None, noise_scale: None })
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.y[0].len()
    }

    pub fn m(&self) -> usize {
        self.u[0].len()
    }

    /// Copy with outputs and inputs divided by `scale`.
    pub fn scaled(&self, scale: f64) -> Dataset {
        let inv = 1.0 / scale;
        Dataset {
            y: self.y.iter().map(|v| v * inv).collect(),
            u: self.u.iter().map(|v| v * inv).collect(),
            ..self.clone()
        }
    }

    /// Per-channel sample variance of the outputs.
    pub fn output_variances(&self) -> DVector<f64> {
        channel_variances(&self.y)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        io::write_dataset_csv(self, out)
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Dataset> {
        io::read_dataset_csv(input)
    }
}

pub(crate) fn channel_variances(series: &[DVector<f64>]) -> DVector<f64> {
    let n = series.len() as f64;
    let dim = series.first().map_or(0, |v| v.len());
    let mut mean = DVector::zeros(dim);
    for v in series {
        mean += v;
    }
    mean /= n;
    let mut var = DVector::zeros(dim);
    for v in series {
        let d = v - &mean;
        var += d.component_mul(&d);
    }
    var / n
}

/// Random sparse stable model together with its true network structure.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub model: StateSpaceModel,
    /// `q_structure[(i, j)]` is true iff `Q_ij != 0` (edge `j -> i`).
    pub q_structure: DMatrix<bool>,
    pub p_structure: DMatrix<bool>,
    pub seed: u64,
    pub density: f64,
    /// Number of rejected draws before this one.
    pub rejected: usize,
}

pub const GENERATION_RETRIES: usize = 20;

/// Draws a random sparse stable system with `C = [I 0]`, `D = 0` and
/// `B = [diag(b); 0]`.
///
/// The sparsity pattern of `A` is directed Erdos-Renyi with the given density;
/// nonzero entries are uniform on `+-[0.5, 1.0]` before `A` is rescaled to a
/// spectral radius drawn uniformly from `[0.5, 0.95]`.
pub fn generate_random_network(p: usize, n: usize, m: usize, density: f64, seed: u64) -> Result<GroundTruth> {
    if p == 0 || n < p {
        return Err(Error::invalid(format!("need n >= p >= 1, got n = {n}, p = {p}")));
    }
    if m != p {
        return Err(Error::Identifiability { m, p });
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density must lie in (0, 1], got {density}")));
    }
    let expected_nnz = density * (n * n) as f64;
    if expected_nnz < n as f64 {
        return Err(Error::invalid(format!(
            "density * n^2 = {expected_nnz:.1} is below n = {n}; the system would be mostly disconnected"
        )));
    }

    let mut rng = rng_from_seed(seed);
    let q_points = dsf::default_q_points(derive_seed(seed, 0xD5F));
    let mut last_reason = String::new();
    for attempt in 0..GENERATION_RETRIES {
        let mut a = DMatrix::zeros(n, n);
        let mut nnz = 0usize;
        for j in 0..n {
            for i in 0..n {
                if rng.random::<f64>() < density {
                    let mag = rng.random_range(0.5..=1.0);
                    a[(i, j)] = if rng.random::<bool>() { mag } else { -mag };
                    nnz += 1;
                }
            }
        }
        let rho_target = rng.random_range(0.5..=0.95);
        let mut b = DMatrix::zeros(n, m);
        for i in 0..p {
            b[(i, i)] = rng.random_range(0.5..=1.5);
        }

        if nnz as f64 > 1.5 * expected_nnz {
            last_reason = format!("A has {nnz} nonzeros, expected about {expected_nnz:.0}");
            continue;
        }
        let rho = linalg::spectral_radius(&a);
        if rho < 1e-8 {
            last_reason = "sparsity pattern of A is nilpotent".into();
            continue;
        }
        a *= rho_target / rho;

        let model = StateSpaceModel::with_selector_output(a, b, p, 1.0)?;
        let sample = match dsf::dsf_from_state_space(&model, &q_points) {
            Ok(s) => s,
            Err(e) => {
                last_reason = format!("structure function evaluation failed: {e}");
                continue;
            }
        };
        let graph = dsf::boolean_structure(&sample, DEFAULT_REL_TOL)?;
        if !graph.q_adj.iter().any(|&e| e) {
            last_reason = "network has no edges".into();
            continue;
        }
        return Ok(GroundTruth {
            model,
            q_structure: graph.q_adj,
            p_structure: graph.p_adj,
            seed,
            density,
            rejected: attempt,
        });
    }
    Err(Error::GenerationFailed {
        retries: GENERATION_RETRIES,
        reason: last_reason,
    })
}

/// Input sequence for [`simulate`].
#[derive(Debug, Clone)]
pub enum InputSpec {
    /// Independent standard normal samples on every channel.
    GaussianIid,
    Provided(Vec<DVector<f64>>),
}

/// Simulates `n_samples` outputs. Both noise channels are scaled by the noise
/// scale: `model.sigma`, or the value returned by [`scale_noise_for_snr`] when
/// `snr_db` is given.
pub fn simulate(
    model: &StateSpaceModel,
    n_samples: usize,
    input: InputSpec,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if model.has_feedthrough() {
        return Err(Error::Unsupported("simulation with nonzero D".into()));
    }
    let m = model.m();
    let u = match input {
        InputSpec::GaussianIid => {
            let mut rng = rng_from_seed(derive_seed(seed, 0));
            (0..n_samples).map(|_| standard_normal(&mut rng, m)).collect::<Vec<_>>()
        }
        InputSpec::Provided(u) => {
            if u.len() != n_samples {
                return Err(Error::dim(format!("provided {} inputs for {n_samples} samples", u.len())));
            }
            if u.iter().any(|v| v.len() != m) {
                return Err(Error::dim(format!("inputs must have {m} channels")));
            }
            u
        }
    };
    let scale = match snr_db {
        Some(snr) => scale_noise_for_snr(model, &u, snr, derive_seed(seed, 2))?,
        None => model.sigma,
    };
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let x0 = &model.m0 + linalg::psd_sqrt(&model.r0) * standard_normal(&mut rng, model.n());
    let y = rollout(model, &x0, &u, scale, Some(&mut rng))?;
    let mut data = Dataset::new(y, u)?;
    data.seed = Some(seed);
    data.snr_db = snr_db;
    data.noise_scale = Some(scale);
    Ok(data)
}

/// Runs the recursion from `x0`; with `noise = None` the rollout is noise-free.
fn rollout(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    u: &[DVector<f64>],
    scale: f64,
    mut noise: Option<&mut linalg::Rng>,
) -> Result<Vec<DVector<f64>>> {
    let n = model.n();
    let p = model.p();
    let mut x = x0.clone();
    let mut y = Vec::with_capacity(u.len());
    for (k, uk) in u.iter().enumerate() {
        x = &model.a * &x + &model.b * uk;
        if let Some(rng) = noise.as_deref_mut() {
            x += standard_normal(rng, n) * scale;
        }
        let mut yk = &model.c * &x;
        if let Some(rng) = noise.as_deref_mut() {
            yk += standard_normal(rng, p) * scale;
        }
        if !x.iter().all(|v| v.is_finite() && v.abs() < 1e150) {
            return Err(Error::SimulationDiverged { step: k + 1 });
        }
        y.push(yk);
    }
    Ok(y)
}

/// Noise scale giving the requested channel-averaged output SNR.
///
/// SNR is `10 log10(mean_i var(y_i^clean) / var(y_i^noise))`, estimated from one
/// noise-free rollout driven by `u` and one rollout driven only by unit noise.
pub fn scale_noise_for_snr(model: &StateSpaceModel, u: &[DVector<f64>], snr_db: f64, seed: u64) -> Result<f64> {
    if u.len() < 2 {
        return Err(Error::invalid("need at least two input samples to estimate signal power"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    let clean = rollout(model, &model.m0, u, 0.0, None)?;
    let zeros = vec![DVector::zeros(model.m()); u.len()];
    let mut rng = rng_from_seed(seed);
    let noise = rollout(model, &DVector::zeros(model.n()), &zeros, 1.0, Some(&mut rng))?;
    let signal_var = channel_variances(&clean);
    let noise_var = channel_variances(&noise);
    if signal_var.iter().all(|&v| v <= 0.0) {
        return Err(Error::ZeroSignal);
    }
    let ratio = signal_var
        .iter()
        .zip(noise_var.iter())
        .map(|(s, n)| s / n)
        .sum::<f64>()
        / signal_var.len() as f64;
    Ok((ratio / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// On-disk model document (JSON). Matrices are arrays of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub sigma: f64,
    pub m0: Vec<f64>,
    pub r0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub density: f64,
    pub rejected: usize,
    #[serde(with = "crate::io::bool_rows")]
    pub q_structure: DMatrix<bool>,
    #[serde(with = "crate::io::bool_rows")]
    pub p_structure: DMatrix<bool>,
}

impl ModelFile {
    pub fn from_model(model: &StateSpaceModel) -> Self {
        Self {
            n: model.n(),
            p: model.p(),
            m: model.m(),
            a: matrix_to_rows(&model.a),
            b: matrix_to_rows(&model.b),
            c: matrix_to_rows(&model.c),
            d: matrix_to_rows(&model.d),
            sigma: model.sigma,
            m0: model.m0.iter().copied().collect(),
            r0: matrix_to_rows(&model.r0),
            generator: None,
        }
    }

    pub fn from_ground_truth(truth: &GroundTruth) -> Self {
        let mut f = Self::from_model(&truth.model);
        f.generator = Some(GeneratorInfo {
            seed: truth.seed,
            density: truth.density,
            rejected: truth.rejected,
            q_structure: truth.q_structure.clone(),
            p_structure: truth.p_structure.clone(),
        });
        f
    }

    pub fn to_model(&self) -> Result<StateSpaceModel> {
        let check_rows = |rows: &Vec<Vec<f64>>, expect: usize, name: &str| -> Result<()> {
            if rows.len() != expect {
                return Err(Error::parse(
                    format!("field `{name}`"),
                    format!("expected {expect} rows, found {}", rows.len()),
                ));
            }
            Ok(())
        };
        check_rows(&self.a, self.n, "a")?;
        check_rows(&self.b, self.n, "b")?;
        check_rows(&self.c, self.p, "c")?;
        check_rows(&self.d, self.p, "d")?;
        check_rows(&self.r0, self.n, "r0")?;
        if self.m0.len() != self.n {
            return Err(Error::parse("field `m0`", format!("expected {} entries", self.n)));
        }
        StateSpaceModel::new(
            matrix_from_rows(&self.a, self.n, "a")?,
            matrix_from_rows(&self.b, self.m, "b")?,
            matrix_from_rows(&self.c, self.n, "c")?,
            matrix_from_rows(&self.d, self.m, "d")?,
            self.sigma,
            DVector::from_column_slice(&self.m0),
            matrix_from_rows(&self.r0, self.n, "r0")?,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        io::from_json_str(text, "model file")
    }
}
