//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines reach the terminal
//! under `cargo test`. The benchmark criterion is reported but only gates the
//! exit status when `DSFNET_STRICT=1`; every other criterion always gates it.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{gaussian_matrix, gaussian_vector, random_system, sample_data, smoother_oracle_errors, JointGaussian};
use dsfnet::dsf::{default_q_points, CMatrix};
use dsfnet::linalg::{pinv, rng_from_seed, spectral_radius};
use dsfnet::model::{selector, InputSpec};
use dsfnet::reconstruct::{pack_w, MStepKind};
use dsfnet::sbl::{posterior, RegressionData, SblOptions, SblState};
use dsfnet::{
    dsf_from_state_space, exact_dsf_small, generate_random_network, observed_loglik, reconstruct, run_benchmark,
    sbl_em, simulate, BenchConfig, Mask, MaskMode, ReconConfig, StateSpaceModel,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

/// Id, name, check, and whether a failure gates the exit status.
type Criterion = (u8, &'static str, fn() -> Verdict, bool);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random_dims(rng: &mut dsfnet::linalg::Rng) -> (usize, usize, usize, usize) {
    let p = rng.random_range(1..=3);
    let n = rng.random_range(p..=6);
    let m = rng.random_range(1..=2);
    let big_n = rng.random_range(1..=20);
    (n, p, m, big_n)
}

fn smoother_oracle() -> Verdict {
    let mut rng = rng_from_seed(0xacc1);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let (n, p, m, big_n) = random_dims(&mut rng);
        let model = random_system(seed, n, p, m);
        let data = sample_data(&model, big_n, seed + 10_000);
        let (f, s, l) = smoother_oracle_errors(&model, &data);
        worst = worst.max(f).max(s).max(l);
    }
    verdict(worst <= 1e-8, format!("100 systems, max abs error {worst:.2e} (tol 1e-8)"))
}

fn likelihood_oracle() -> Verdict {
    let mut rng = rng_from_seed(0xacc1);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let (n, p, m, big_n) = random_dims(&mut rng);
        let model = random_system(seed, n, p, m);
        let data = sample_data(&model, big_n, seed + 10_000);
        let ll = observed_loglik(&model, &data).unwrap();
        let oracle = JointGaussian::new(&model, &data).log_density(&data);
        worst = worst.max((ll - oracle).abs());
    }
    verdict(worst <= 1e-8, format!("100 systems, max abs error {worst:.2e} (tol 1e-8)"))
}

fn em_monotonicity() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = rng_from_seed(seed);
        let (p, n) = (2, 2 + (seed % 3) as usize);
        let mut a = gaussian_matrix(&mut rng, n, n);
        a *= 0.8 / spectral_radius(&a);
        let mut b = DMatrix::zeros(n, p);
        b[(0, 0)] = 1.0;
        b[(1, 1)] = 0.7;
        let truth = StateSpaceModel::with_selector_output(a, b, p, 0.5).unwrap();
        let data = simulate(&truth, 200, InputSpec::GaussianIid, None, seed + 100).unwrap();
        let cfg = ReconConfig {
            m_step: MStepKind::MaximumLikelihood,
            estimate_output_scale: false,
            outer_max_iter: 10,
            outer_tol: 1e-300,
            seed,
            ..ReconConfig::new(n)
        };
        let res = reconstruct(&data, &cfg).unwrap();
        if res.trace.len() != 10 {
            return verdict(false, format!("seed {seed} stopped after {} iterations", res.trace.len()));
        }
        for w in res.trace.windows(2) {
            worst = worst.max(w[0].loglik - w[1].loglik);
        }
    }
    verdict(worst <= 1e-8, format!("20 instances x 10 iterations, largest decrease {worst:.2e} (tol 1e-8)"))
}

fn open_mask(len: usize) -> Mask {
    Mask { free: vec![true; len], mode: MaskMode::Unconstrained, n: len, m: 0 }
}

fn sbl_checks() -> Verdict {
    let mut rng = rng_from_seed(0xacc4);
    // (a) ridge normal equations
    let mut ridge_err = 0.0f64;
    for _ in 0..10 {
        let phi = gaussian_matrix(&mut rng, 30, 8);
        let y = gaussian_vector(&mut rng, 30);
        let gamma = DVector::from_fn(8, |_, _| rng.random_range(0.1..3.0));
        let s2 = rng.random_range(0.05..2.0);
        let post = posterior(&RegressionData::Dense { phi: phi.clone(), y: y.clone() }, &gamma, s2, 0.0).unwrap();
        let normal = phi.tr_mul(&phi) / s2 + DMatrix::from_diagonal(&gamma.map(|g| 1.0 / g));
        let ridge = normal.lu().solve(&(phi.tr_mul(&y) / s2)).unwrap();
        ridge_err = ridge_err.max((&post.mu - &ridge).amax() / ridge.amax().max(1.0));
    }
    // (b) noiseless limit
    let phi = gaussian_matrix(&mut rng, 20, 8);
    let y = gaussian_vector(&mut rng, 20);
    let gamma = DVector::from_fn(8, |_, _| rng.random_range(0.1..3.0));
    let post = posterior(&RegressionData::Dense { phi: phi.clone(), y: y.clone() }, &gamma, 0.0, 0.0).unwrap();
    let g_sqrt = DMatrix::from_diagonal(&gamma.map(f64::sqrt));
    let oracle = &g_sqrt * pinv(&(&phi * &g_sqrt), 1e-12) * &y;
    let pinv_err = (&post.mu - &oracle).amax();
    // (c) support recovery
    let opts = SblOptions { max_iter: 5000, tol: 1e-10, prune_tol: 1e-8, ..Default::default() };
    let mut hits = 0;
    for trial in 0..100u64 {
        let mut rng = rng_from_seed(1000 + trial);
        let phi = gaussian_matrix(&mut rng, 100, 50);
        let mut support = sample(&mut rng, 50, 5).into_vec();
        let mut w0 = DVector::zeros(50);
        for &i in &support {
            let mag: f64 = rng.random_range(0.5..2.0);
            w0[i] = if rng.random_bool(0.5) { mag } else { -mag };
        }
        let reg = RegressionData::Dense { phi: phi.clone(), y: &phi * &w0 };
        let mask = open_mask(50);
        let st = sbl_em(&reg, &mask, SblState::init(&reg, &mask).unwrap(), &opts).unwrap();
        support.sort_unstable();
        if (0..50).filter(|&i| st.active[i]).collect::<Vec<_>>() == support {
            hits += 1;
        }
    }
    // (d) evidence monotone per inner iteration
    let mut drop = 0.0f64;
    for seed in 0..10 {
        let mut rng = rng_from_seed(50 + seed);
        let phi = gaussian_matrix(&mut rng, 40, 12);
        let mut w = gaussian_vector(&mut rng, 12);
        w.rows_mut(0, 8).fill(0.0);
        let y = &phi * w + gaussian_vector(&mut rng, 40) * 0.3;
        let reg = RegressionData::Dense { phi, y };
        let mask = open_mask(12);
        let st = sbl_em(&reg, &mask, SblState::init(&reg, &mask).unwrap(), &SblOptions { max_iter: 300, ..Default::default() })
            .unwrap();
        for e in st.evidence.windows(2) {
            drop = drop.max((e[0] - e[1]) / e[0].abs().max(1.0));
        }
    }
    let pass = ridge_err <= 1e-8 && pinv_err <= 1e-6 && hits >= 95 && drop <= 1e-10;
    verdict(
        pass,
        format!(
            "(a) ridge {ridge_err:.1e} (tol 1e-8), (b) pinv {pinv_err:.1e} (tol 1e-6), (c) support {hits}/100 (need 95), (d) evidence drop {drop:.1e} (tol 1e-10)"
        ),
    )
}

fn rel_err(a: &[CMatrix], b: &[CMatrix]) -> f64 {
    let scale = b.iter().flat_map(|m| m.iter()).map(|v| v.norm()).fold(0.0f64, f64::max).max(1e-300);
    let diff = a.iter().zip(b).flat_map(|(x, y)| (x - y).iter().map(|v| v.norm()).collect::<Vec<_>>()).fold(0.0, f64::max);
    diff / scale
}

fn dsf_checks() -> Verdict {
    let mut rng = rng_from_seed(0xacc5);
    let pts = default_q_points(5);
    let (mut inv, mut agree) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let p = rng.random_range(1..=5);
        let n = rng.random_range(p..=12);
        let mut mr = rng_from_seed(seed + 500);
        let mut a = gaussian_matrix(&mut mr, n, n);
        a *= 0.9 / spectral_radius(&a).max(1e-12);
        let b = gaussian_matrix(&mut mr, n, p);
        let d = gaussian_matrix(&mut mr, p, p) * 0.3;
        let model =
            StateSpaceModel::new(a, b, selector(p, n), d, 0.7, DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
        let base = dsf_from_state_space(&model, &pts).unwrap();
        if n > p {
            let r = n - p;
            let s = DMatrix::identity(r, r) + gaussian_matrix(&mut rng, r, r) * 0.4;
            let mut t = DMatrix::identity(n, n);
            t.view_mut((p, p), (r, r)).copy_from(&s);
            if let Some(t_inv) = t.clone().try_inverse() {
                let mut moved = model.clone();
                moved.a = &t * &model.a * &t_inv;
                moved.b = &t * &model.b;
                let y = dsf_from_state_space(&moved, &base.q_points).unwrap();
                inv = inv.max(rel_err(&y.q_vals, &base.q_vals)).max(rel_err(&y.p_vals, &base.p_vals)).max(rel_err(&y.h_vals, &base.h_vals));
            }
        }
        let general = if seed % 2 == 1 { random_system(seed, n, p, p) } else { model };
        let sample = dsf_from_state_space(&general, &pts).unwrap();
        let exact = exact_dsf_small(&general).unwrap();
        let (mut q, mut pm, mut h) = (Vec::new(), Vec::new(), Vec::new());
        for &z in &sample.q_points {
            let (a, b, c) = exact.eval(z);
            q.push(a);
            pm.push(b);
            h.push(c);
        }
        agree = agree.max(rel_err(&q, &sample.q_vals)).max(rel_err(&pm, &sample.p_vals)).max(rel_err(&h, &sample.h_vals));
    }
    verdict(
        inv <= 1e-8 && agree <= 1e-10,
        format!("50 models, invariance {inv:.1e} (tol 1e-8), sampled vs exact {agree:.1e} (tol 1e-10)"),
    )
}

fn identifiability_checks() -> Verdict {
    let mut checked = 0;
    for seed in 0..3u64 {
        let truth = generate_random_network(4, 8, 4, 0.25, 20 + seed).unwrap();
        let data = simulate(&truth.model, 300, InputSpec::GaussianIid, Some(30.0), 30 + seed).unwrap();
        let res = reconstruct(&data, &ReconConfig { outer_max_iter: 8, seed, ..ReconConfig::new(9) }).unwrap();
        let offdiag_zero = res
            .dsf
            .p_vals
            .iter()
            .all(|m| (0..4).all(|i| (0..4).all(|j| i == j || m[(i, j)].norm() == 0.0)));
        if !offdiag_zero {
            return verdict(false, format!("diag_b seed {seed}: off-diagonal P sample is nonzero"));
        }
        checked += 1;
        for p22 in 0..=4 {
            let cfg = ReconConfig { mask: MaskMode::PDiag { p22 }, outer_max_iter: 6, seed, ..ReconConfig::new(9) };
            let res = reconstruct(&data, &cfg).unwrap();
            let w = pack_w(&res.a, &res.b);
            if let Some(i) = (0..w.len()).find(|&i| !res.mask.free[i] && w[i] != 0.0) {
                return verdict(false, format!("p_diag p22 = {p22}, seed {seed}: masked coordinate {i} is nonzero"));
            }
            checked += 1;
        }
    }
    verdict(true, format!("{checked} reconstructions, zero patterns exact"))
}

fn benchmark() -> Verdict {
    let cfg = BenchConfig {
        n_networks: 10,
        p: 10,
        n_true: 25,
        n_assumed: 30,
        m: 10,
        density: 0.1,
        n_samples: 1000,
        snr_list: vec![40.0, 0.0],
        seed: 2024,
        parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()).min(4),
        ..Default::default()
    };
    let start = Instant::now();
    let table = run_benchmark(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let hi = &table.rows[0];
    let lo = &table.rows[1];
    let failure = table.failure_rate_mean;
    let pass = hi.precision_mean >= 0.80
        && hi.tpr_mean >= 0.70
        && lo.precision_mean >= 0.55
        && failure <= 0.20
        && secs <= 900.0;
    verdict(
        pass,
        format!(
            "40 dB precision {:.2} (need 0.80) TPR {:.2} (need 0.70); 0 dB precision {:.2} (need 0.55) TPR {:.2}; failure {:.0}% (max 20%); {:.0} s on {} thread(s) (max 900)",
            hi.precision_mean,
            hi.tpr_mean,
            lo.precision_mean,
            lo.tpr_mean,
            100.0 * failure,
            secs,
            cfg.parallelism
        ),
    )
}

/// Runs a simulate, reconstruct, dsf and benchmark pipeline in `dir`.
fn pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(
        dir.join("bench.toml"),
        "n_networks = 2\np = 3\nn_true = 6\nn_assumed = 7\nm = 3\ndensity = 0.25\nn_samples = 200\nsnr_list = [10.0]\nparallelism = 2\n",
    )
    .map_err(|e| e.to_string())?;
    let invocations = [
        vec!["simulate", "--p", "3", "--n", "6", "--density", "0.25", "--samples", "300", "--snr", "20", "--seed", "8", "--out", "data.csv", "--model-out", "model.json"],
        vec!["reconstruct", "--data", "data.csv", "--n-states", "7", "--mask", "diag-b", "--seed", "8", "--out", "diag.json"],
        vec!["reconstruct", "--data", "data.csv", "--n-states", "7", "--mask", "p-diag", "--p22", "2", "--seed", "8", "--out", "pdiag.json"],
        vec!["dsf", "--model", "model.json", "--seed", "8", "--out", "dsf.json"],
        vec!["benchmark", "--config", "bench.toml", "--seed", "8", "--out", "table.csv"],
    ];
    for args in &invocations {
        let out = Command::new(env!("CARGO_BIN_EXE_dsfnet")).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn cli_determinism() -> Verdict {
    let (a, b) = (tempfile::TempDir::new().unwrap(), tempfile::TempDir::new().unwrap());
    for dir in [&a, &b] {
        if let Err(e) = pipeline(dir.path()) {
            return verdict(false, e);
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        if std::fs::read(a.path().join(name)).ok() != std::fs::read(b.path().join(name)).ok() {
            return verdict(false, format!("{} differs between identical runs", name.to_string_lossy()));
        }
    }
    verdict(true, format!("{} files byte-identical across two runs of 5 invocations", names.len()))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let strict = std::env::var("DSFNET_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 8] = [
        (1, "smoother matches joint-Gaussian conditioning", smoother_oracle, true),
        (2, "observed log-likelihood matches joint density", likelihood_oracle, true),
        (3, "classical EM never lowers the likelihood", em_monotonicity, true),
        (4, "sparse Bayesian learning correctness", sbl_checks, true),
        (5, "structure function invariance and exactness", dsf_checks, true),
        (6, "identifiability masks hold exactly", identifiability_checks, true),
        (7, "desk-scale benchmark", benchmark, strict),
        (8, "CLI reruns are byte-identical", cli_determinism, true),
    ];
    let mut gating_failures = 0;
    for (id, name, check, gates) in criteria {
        let v = check();
        println!("criterion {id} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass && gates {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        std::process::exit(1);
    }
}
