//! Randomized reconstruction benchmark: random sparse ground truths,
//! simulated data at several SNRs, and precision/TPR/failure aggregates.

use serde::{Deserialize, Serialize};

use crate::dsf::{graph_compare, GraphMetrics, NetworkGraph};
use crate::linalg::derive_seed;
use crate::model::{generate_random_network, simulate, GroundTruth, InputSpec};
use crate::reconstruct::{reconstruct, ReconConfig, Status};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_networks: usize,
    pub p: usize,
    pub n_true: usize,
    pub n_assumed: usize,
    pub m: usize,
    pub density: f64,
    pub n_samples: usize,
    pub snr_list: Vec<f64>,
    pub failure_precision_threshold: f64,
    pub seed: u64,
    pub parallelism: usize,
    /// Simulate without noise (the SNR list only labels the cells).
    pub zero_noise: bool,
    /// Start every reconstruction from the true model.
    pub oracle_init: bool,
    /// Reconstruction settings; `n_states` is replaced by `n_assumed`.
    pub recon: ReconConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_networks: 10,
            p: 10,
            n_true: 25,
            n_assumed: 30,
            m: 10,
            density: 0.1,
            n_samples: 1000,
            snr_list: vec![0.0, 20.0, 40.0],
            failure_precision_threshold: 0.05,
            seed: 0,
            parallelism: 1,
            zero_noise: false,
            oracle_init: false,
            recon: ReconConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_networks == 0 || self.snr_list.is_empty() {
            return Err(Error::invalid("need at least one network and one SNR"));
        }
        if self.m != self.p {
            return Err(Error::Identifiability { m: self.m, p: self.p });
        }
        if self.n_assumed < self.p || self.n_true < self.p {
            return Err(Error::invalid("state dimensions must be at least p"));
        }
        if self.oracle_init && self.n_assumed != self.n_true {
            return Err(Error::invalid("oracle_init needs n_assumed = n_true"));
        }
        if self.parallelism == 0 {
            return Err(Error::invalid("parallelism must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of one (network, SNR) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub network: usize,
    pub snr_db: f64,
    pub network_seed: u64,
    pub data_seed: u64,
    pub metrics: Option<GraphMetrics>,
    pub failed: bool,
    pub status: Option<Status>,
    pub outer_iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub snr_db: f64,
    /// Means over non-failed runs; `NaN` when every run failed.
    pub precision_mean: f64,
    pub tpr_mean: f64,
    pub n_failed: usize,
    pub n_total: usize,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchTable {
    pub config: BenchConfig,
    pub rows: Vec<SnrRow>,
    /// Failed runs over all runs.
    pub failure_rate_pooled: f64,
    /// Mean of the per-SNR failure rates.
    pub failure_rate_mean: f64,
    pub records: Vec<RunRecord>,
    /// Wall-clock seconds per record, kept out of serialized output.
    #[serde(skip)]
    pub seconds: Vec<f64>,
}

fn run_cell(cfg: &BenchConfig, truth: &std::result::Result<GroundTruth, String>, net: usize, snr: f64) -> RunRecord {
    let network_seed = derive_seed(cfg.seed, net as u64);
    let snr_idx = cfg.snr_list.iter().position(|&s| s == snr).unwrap_or(0);
    let data_seed = derive_seed(network_seed, 1000 + snr_idx as u64);
    let mut rec = RunRecord {
        network: net,
        snr_db: snr,
        network_seed,
        data_seed,
        metrics: None,
        failed: true,
        status: None,
        outer_iterations: 0,
        error: None,
    };
    let truth = match truth {
        Ok(t) => t,
        Err(e) => {
            rec.error = Some(e.clone());
            return rec;
        }
    };
    let outcome = (|| -> Result<(GraphMetrics, Status, usize)> {
        let mut model = truth.model.clone();
        let data = if cfg.zero_noise {
            model.sigma = 0.0;
            model.r0 = nalgebra::DMatrix::zeros(model.n(), model.n());
            simulate(&model, cfg.n_samples, InputSpec::GaussianIid, None, data_seed)?
        } else {
            simulate(&model, cfg.n_samples, InputSpec::GaussianIid, Some(snr), data_seed)?
        };
        let mut rc = cfg.recon.clone();
        rc.n_states = cfg.n_assumed;
        rc.seed = data_seed;
        if cfg.zero_noise {
            rc.estimate_output_scale = false;
        }
        if cfg.oracle_init {
            let mut init = truth.model.clone();
            init.sigma = if cfg.zero_noise { 1e-6 } else { data.noise_scale.unwrap_or(1.0) };
            rc.initial_model = Some(init);
        }
        let res = reconstruct(&data, &rc)?;
        let truth_graph = NetworkGraph::from_adjacency(truth.q_structure.clone(), truth.p_structure.clone());
        Ok((graph_compare(&res.network, &truth_graph)?, res.status, res.trace.len()))
    })();
    match outcome {
        Ok((metrics, status, iters)) => {
            rec.failed = metrics.precision < cfg.failure_precision_threshold;
            rec.metrics = Some(metrics);
            rec.status = Some(status);
            rec.outer_iterations = iters;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn run_cells(cfg: &BenchConfig, cells: &[(usize, f64)], truths: &[std::result::Result<GroundTruth, String>]) -> Vec<(RunRecord, f64)> {
    let work = |&(net, snr): &(usize, f64)| {
        let t0 = std::time::Instant::now();
        let rec = run_cell(cfg, &truths[net], net, snr);
        (rec, t0.elapsed().as_secs_f64())
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if cfg.parallelism > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallelism).build() {
                return pool.install(|| cells.par_iter().map(work).collect());
            }
        }
    }
    cells.iter().map(work).collect()
}

/// Runs every (network, SNR) cell. Records are ordered by network then SNR
/// regardless of the degree of parallelism.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchTable> {
    cfg.validate()?;
    let truths: Vec<_> = (0..cfg.n_networks)
        .map(|net| {
            generate_random_network(cfg.p, cfg.n_true, cfg.m, cfg.density, derive_seed(cfg.seed, net as u64))
                .map_err(|e| e.to_string())
        })
        .collect();
    let cells: Vec<(usize, f64)> = (0..cfg.n_networks)
        .flat_map(|net| cfg.snr_list.iter().map(move |&s| (net, s)))
        .collect();
    let results = run_cells(cfg, &cells, &truths);
    let (records, seconds): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(aggregate(cfg, records, seconds))
}

/// Recomputes the table from per-run records.
pub fn aggregate(cfg: &BenchConfig, records: Vec<RunRecord>, seconds: Vec<f64>) -> BenchTable {
    let rows: Vec<SnrRow> = cfg
        .snr_list
        .iter()
        .map(|&snr| {
            let cell: Vec<&RunRecord> = records.iter().filter(|r| r.snr_db == snr).collect();
            let ok: Vec<&GraphMetrics> = cell.iter().filter(|r| !r.failed).filter_map(|r| r.metrics.as_ref()).collect();
            let mean = |f: fn(&GraphMetrics) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
                }
            };
            let n_failed = cell.iter().filter(|r| r.failed).count();
            SnrRow {
                snr_db: snr,
                precision_mean: mean(|m| m.precision),
                tpr_mean: mean(|m| m.tpr),
                n_failed,
                n_total: cell.len(),
                failure_rate: n_failed as f64 / cell.len().max(1) as f64,
            }
        })
        .collect();
    let total_failed: usize = rows.iter().map(|r| r.n_failed).sum();
    let total: usize = rows.iter().map(|r| r.n_total).sum();
    let failure_rate_mean = rows.iter().map(|r| r.failure_rate).sum::<f64>() / rows.len().max(1) as f64;
    BenchTable {
        config: cfg.clone(),
        rows,
        failure_rate_pooled: total_failed as f64 / total.max(1) as f64,
        failure_rate_mean,
        records,
        seconds,
    }
}

fn pct(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{:.0}%", 100.0 * v)
    }
}

impl BenchTable {
    /// Aligned text table: SNR columns, precision/TPR rows, failure line.
    pub fn to_text(&self) -> String {
        let mut heads = vec![String::new()];
        heads.extend(self.rows.iter().map(|r| format!("{} dB", r.snr_db)));
        let mut prec = vec!["Precision".to_string()];
        prec.extend(self.rows.iter().map(|r| pct(r.precision_mean)));
        let mut tpr = vec!["TPR".to_string()];
        tpr.extend(self.rows.iter().map(|r| pct(r.tpr_mean)));
        let mut fail = vec!["Failure".to_string()];
        fail.extend(self.rows.iter().map(|r| pct(r.failure_rate)));
        let lines = [heads, prec, tpr, fail];
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("   ").trim_end());
            out.push('\n');
        }
        out.push_str(&format!(
            "Failure (pooled): {}   Failure (mean over SNR): {}\n",
            pct(self.failure_rate_pooled),
            pct(self.failure_rate_mean)
        ));
        out
    }

    /// `snr_db,precision_mean,tpr_mean,n_failed,n_total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr_db,precision_mean,tpr_mean,n_failed,n_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.snr_db, r.precision_mean, r.tpr_mean, r.n_failed, r.n_total
            ));
        }
        out
    }
}
