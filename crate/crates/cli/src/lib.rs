//! Command-line front end for `dsfnet`.
//!
//! Every subcommand reads an optional TOML config, lets flags override it and
//! writes output that carries the effective config and seeds, so a rerun with
//! the same arguments reproduces the same bytes.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsfnet::dsf::{default_q_points, DsfFile, DEFAULT_REL_TOL};
use dsfnet::linalg::derive_seed;
use dsfnet::model::{InputSpec, ModelFile};
use dsfnet::reconstruct::ResultFile;
use dsfnet::{
    boolean_structure, dsf_from_state_space, generate_random_network, reconstruct, run_benchmark, simulate,
    BenchConfig, Dataset, MaskMode, ReconConfig,
};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dsfnet", version, about = "Sparse dynamic network reconstruction from input/output data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random sparse network (or load one) and simulate data from it.
    Simulate(SimulateArgs),
    /// Reconstruct the network from a dataset.
    Reconstruct(ReconstructArgs),
    /// Run the randomized precision/TPR benchmark.
    Benchmark(BenchmarkArgs),
    /// Evaluate the structure function of a saved model and print its network.
    Dsf(DsfArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Simulate this model instead of generating one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Where to write the generated model.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<usize>,
    /// True state dimension.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output SNR in dB; noise follows the model's sigma when omitted.
    #[arg(long)]
    pub snr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    DiagB,
    PDiag,
    Unconstrained,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_states: Option<usize>,
    #[arg(long, value_enum)]
    pub mask: Option<MaskArg>,
    /// Directly actuated outputs in p-diag mode.
    #[arg(long)]
    pub p22: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub networks: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Full table with per-run records (defaults to the CSV path with a
    /// `.json` extension).
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DsfArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model JSON.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub rel_tol: Option<f64>,
}

#[derive(Debug)]
struct Failure(String);

impl<E: Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first) and runs it. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Dsf(a) => cmd_dsf(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure(format!("{}: {e}", path.display()))),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Outcome<String> {
    Ok(dsfnet::io::to_json_string(value)?)
}

/// `simulate` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub p: usize,
    pub n: usize,
    pub density: f64,
    pub samples: usize,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { p: 10, n: 25, density: 0.1, samples: 1000, snr_db: Some(40.0), seed: 0 }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Outcome<()> {
    let mut cfg: SimConfig = load_toml(a.common.config.as_deref())?;
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.p {
        cfg.p = v;
    }
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.density {
        cfg.density = v;
    }
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if a.snr.is_some() {
        cfg.snr_db = a.snr;
    }
    let model_file = match &a.model {
        Some(path) => ModelFile::from_json(&read_text(path)?)?,
        None => ModelFile::from_ground_truth(&generate_random_network(cfg.p, cfg.n, cfg.p, cfg.density, cfg.seed)?),
    };
    let model = model_file.to_model()?;
    let data_seed = derive_seed(cfg.seed, 1);
    let data = simulate(&model, cfg.samples, InputSpec::GaussianIid, cfg.snr_db, data_seed)?;
    if let Some(path) = &a.model_out {
        emit(Some(path), &model_file.to_json()?)?;
    }
    let mut buf = Vec::new();
    let snr = cfg.snr_db.map_or_else(|| "none".to_string(), |s| s.to_string());
    writeln!(
        buf,
        "# dsfnet simulate config_seed={} p={} n={} density={} samples={} snr={snr}",
        cfg.seed,
        model.p(),
        model.n(),
        cfg.density,
        cfg.samples
    )?;
    data.write_csv(&mut buf)?;
    emit(a.common.out.as_deref(), &String::from_utf8(buf)?)
}

/// Shape of the dataset a result was computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataInfo {
    pub n_samples: usize,
    pub p: usize,
    pub m: usize,
    pub seed: Option<u64>,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructOutput {
    pub data: DataInfo,
    pub result: ResultFile,
}

fn cmd_reconstruct(a: ReconstructArgs) -> Outcome<()> {
    let mut cfg: ReconConfig = load_toml(a.common.config.as_deref())?;
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_states {
        cfg.n_states = v;
    }
    if let Some(v) = a.max_iter {
        cfg.outer_max_iter = v;
    }
    match (a.mask, a.p22) {
        (Some(MaskArg::DiagB), None) => cfg.mask = MaskMode::DiagB,
        (Some(MaskArg::Unconstrained), None) => cfg.mask = MaskMode::Unconstrained,
        (Some(MaskArg::PDiag), p22) => cfg.mask = MaskMode::PDiag { p22: p22.unwrap_or(0) },
        (None, Some(p22)) => cfg.mask = MaskMode::PDiag { p22 },
        (None, None) => {}
        (Some(_), Some(_)) => return Err(Failure("--p22 only applies to --mask p-diag".into())),
    }
    let text = read_text(&a.data)?;
    let data = Dataset::read_csv(text.as_bytes()).map_err(|e| Failure(format!("{}: {e}", a.data.display())))?;
    if cfg.n_states == 0 {
        return Err(Failure("--n-states is required (or `n_states` in the config)".into()));
    }
    let res = reconstruct(&data, &cfg)?;
    let out = ReconstructOutput {
        data: DataInfo { n_samples: data.n_samples(), p: data.p(), m: data.m(), seed: data.seed, snr_db: data.snr_db },
        result: ResultFile::new(&res, &cfg),
    };
    emit(a.common.out.as_deref(), &json(&out)?)
}

fn cmd_benchmark(a: BenchmarkArgs) -> Outcome<()> {
    let mut cfg: BenchConfig = load_toml(a.common.config.as_deref())?;
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.networks {
        cfg.n_networks = v;
    }
    if let Some(v) = a.parallelism {
        cfg.parallelism = v;
    }
    let start = Instant::now();
    let table = run_benchmark(&cfg)?;
    let total = start.elapsed().as_secs_f64();
    for (r, s) in table.records.iter().zip(&table.seconds) {
        eprintln!(
            "network {:>3}  snr {:>5} dB  {:>4} outer iterations  {:>8.2} s{}",
            r.network,
            r.snr_db,
            r.outer_iterations,
            s,
            r.error.as_deref().map_or(String::new(), |e| format!("  error: {e}"))
        );
    }
    eprintln!("total {total:.2} s");
    print!("{}", table.to_text());
    if let Some(csv) = &a.common.out {
        emit(Some(csv), &table.to_csv())?;
        let records = a.records.clone().unwrap_or_else(|| csv.with_extension("json"));
        emit(Some(&records), &json(&table)?)?;
    } else if let Some(records) = &a.records {
        emit(Some(records), &json(&table)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DsfOutput {
    pub seed: u64,
    pub dsf: DsfFile,
}

/// Rows of `0`/`1`, one line per output node.
pub fn adjacency_text(adj: &DMatrix<bool>) -> String {
    let mut s = String::new();
    for i in 0..adj.nrows() {
        let row: Vec<&str> = (0..adj.ncols()).map(|j| if adj[(i, j)] { "1" } else { "0" }).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn cmd_dsf(a: DsfArgs) -> Outcome<()> {
    let seed = a.common.seed.unwrap_or(0);
    if a.common.config.is_some() {
        return Err(Failure("dsf takes no config file".into()));
    }
    let rel_tol = a.rel_tol.unwrap_or(DEFAULT_REL_TOL);
    let model = ModelFile::from_json(&read_text(&a.model)?)
        .map_err(|e| Failure(format!("{}: {e}", a.model.display())))?
        .to_model()?;
    let sample = dsf_from_state_space(&model, &default_q_points(seed))?;
    let graph = boolean_structure(&sample, rel_tol)?;
    print!("{}", adjacency_text(&graph.q_adj));
    if let Some(path) = &a.common.out {
        emit(Some(path), &json(&DsfOutput { seed, dsf: DsfFile::new(&sample, &graph, rel_tol) })?)?;
    }
    Ok(())
}
