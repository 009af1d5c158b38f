//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export takes plain numbers or a model JSON string and returns a JSON
//! string, so the page needs no generated TypeScript types.

use dsfnet::dsf::unit_circle_points;
use dsfnet::model::{InputSpec, ModelFile};
use dsfnet::{
    boolean_structure, dsf_from_state_space, generate_random_network, graph_compare, reconstruct, simulate,
    NetworkGraph, ReconConfig,
};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn rows(adj: &DMatrix<bool>) -> Vec<Vec<bool>> {
    adj.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn load(model_json: &str) -> Result<dsfnet::StateSpaceModel, String> {
    ModelFile::from_json(model_json).and_then(|f| f.to_model()).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Generated {
    model: ModelFile,
    q_adj: Vec<Vec<bool>>,
    edges: usize,
}

pub fn generate(p: usize, n: usize, density: f64, seed: u64) -> Result<String, String> {
    let truth = generate_random_network(p, n, p, density, seed).map_err(|e| e.to_string())?;
    to_json(&Generated {
        model: ModelFile::from_ground_truth(&truth),
        q_adj: rows(&truth.q_structure),
        edges: truth.q_structure.iter().filter(|&&e| e).count(),
    })
}

#[derive(Serialize)]
struct Curves {
    omega: Vec<f64>,
    /// `magnitude[i][j][k] = |Q_ij(e^{i omega_k})|`.
    magnitude: Vec<Vec<Vec<f64>>>,
}

pub fn magnitudes(model_json: &str, points: usize) -> Result<String, String> {
    let model = load(model_json)?;
    let sample = dsf_from_state_space(&model, &unit_circle_points(points.max(2))).map_err(|e| e.to_string())?;
    let p = model.p();
    let magnitude = (0..p)
        .map(|i| (0..p).map(|j| sample.q_vals.iter().map(|q| q[(i, j)].norm()).collect()).collect())
        .collect();
    to_json(&Curves { omega: sample.q_points.iter().map(|z| z.arg()).collect(), magnitude })
}

#[derive(Serialize)]
struct Reconstruction {
    q_adj: Vec<Vec<bool>>,
    precision: f64,
    tpr: f64,
    iterations: usize,
    converged: bool,
}

pub fn recover(model_json: &str, samples: usize, snr_db: f64, n_states: usize, seed: u64) -> Result<String, String> {
    let model = load(model_json)?;
    let truth = boolean_structure(
        &dsf_from_state_space(&model, &dsfnet::dsf::default_q_points(seed)).map_err(|e| e.to_string())?,
        dsfnet::dsf::DEFAULT_REL_TOL,
    )
    .map_err(|e| e.to_string())?;
    let data = simulate(&model, samples, InputSpec::GaussianIid, Some(snr_db), seed).map_err(|e| e.to_string())?;
    let cfg = ReconConfig { seed, outer_max_iter: 30, ..ReconConfig::new(n_states.max(model.p())) };
    let res = reconstruct(&data, &cfg).map_err(|e| e.to_string())?;
    let metrics = graph_compare(&res.network, &NetworkGraph::from_adjacency(truth.q_adj, truth.p_adj))
        .map_err(|e| e.to_string())?;
    to_json(&Reconstruction {
        q_adj: rows(&res.network.q_adj),
        precision: metrics.precision,
        tpr: metrics.tpr,
        iterations: res.trace.len(),
        converged: res.status == dsfnet::reconstruct::Status::Converged,
    })
}

/// Random sparse network: `{model, q_adj, edges}`.
#[wasm_bindgen(js_name = generateNetwork)]
pub fn generate_network(p: usize, n: usize, density: f64, seed: u32) -> Result<String, JsValue> {
    generate(p, n, density, seed.into()).map_err(|e| JsValue::from_str(&e))
}

/// `|Q_ij|` along the upper unit circle: `{omega, magnitude}`.
#[wasm_bindgen(js_name = dsfMagnitude)]
pub fn dsf_magnitude(model_json: &str, points: usize) -> Result<String, JsValue> {
    magnitudes(model_json, points).map_err(|e| JsValue::from_str(&e))
}

/// Simulates the model and reconstructs its network:
/// `{q_adj, precision, tpr, iterations, converged}`.
#[wasm_bindgen(js_name = reconstructNetwork)]
pub fn reconstruct_network(
    model_json: &str,
    samples: usize,
    snr_db: f64,
    n_states: usize,
    seed: u32,
) -> Result<String, JsValue> {
    recover(model_json, samples, snr_db, n_states, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_json() {
        let g: serde_json::Value = serde_json::from_str(&generate(3, 6, 0.25, 4).unwrap()).unwrap();
        let model = g["model"].to_string();
        let edges = g["edges"].as_u64().unwrap() as usize;
        let curves: serde_json::Value = serde_json::from_str(&magnitudes(&model, 16).unwrap()).unwrap();
        assert_eq!(curves["omega"].as_array().unwrap().len(), 16);
        let peak = |i: usize, j: usize| {
            curves["magnitude"][i][j].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(0.0, f64::max)
        };
        let top = (0..9).map(|k| peak(k / 3, k % 3)).fold(0.0, f64::max);
        for i in 0..3 {
            for j in 0..3 {
                let present = g["q_adj"][i][j].as_bool().unwrap();
                assert_eq!(peak(i, j) > 1e-6 * top, present, "Q[{i}][{j}]");
            }
        }
        assert!(edges > 0);
        let r: serde_json::Value = serde_json::from_str(&recover(&model, 300, 30.0, 7, 1).unwrap()).unwrap();
        assert!(r["precision"].as_f64().unwrap() >= 0.0);
        assert_eq!(r["q_adj"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn errors_are_messages() {
        assert!(magnitudes("{", 8).is_err());
        assert!(generate(3, 2, 0.3, 0).is_err());
    }
}
