use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsfnet::exact_dsf_small;
use dsfnet::model::ModelFile;
use dsfnet_cli::{adjacency_text, ReconstructOutput, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/small_model.json")
}

fn dsfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsfnet")).args(args).output().unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn simulate_fixture(dir: &TempDir, name: &str) -> String {
    let out = path(dir, name);
    let o = dsfnet(&["simulate", "--model", fixture().to_str().unwrap(), "--samples", "200", "--snr", "30", "--seed", "4", "--out", &out]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn exit_codes() {
    assert_eq!(dsfnet(&["--help"]).status.code(), Some(EXIT_OK));
    assert_eq!(dsfnet(&["frobnicate"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(dsfnet(&["reconstruct", "--n-states", "4"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(dsfnet(&["reconstruct", "--data", "/nonexistent.csv", "--n-states", "4"]).status.code(), Some(EXIT_RUNTIME));
    assert_eq!(dsfnet_cli::run(["dsfnet", "dsf"]), EXIT_USAGE);
}

#[test]
fn dsf_prints_the_exact_structure_of_the_fixture() {
    let o = dsfnet(&["dsf", "--model", fixture().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let model = ModelFile::from_json(&std::fs::read_to_string(fixture()).unwrap()).unwrap().to_model().unwrap();
    let exact = exact_dsf_small(&model).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), adjacency_text(&exact.q.nonzero_pattern()));
}

#[test]
fn malformed_model_names_the_field() {
    let dir = TempDir::new().unwrap();
    let bad = path(&dir, "bad.json");
    let text = std::fs::read_to_string(fixture()).unwrap().replacen("\"sigma\"", "\"sigma\": \"x\", \"unused\"", 1);
    std::fs::write(&bad, text).unwrap();
    let o = dsfnet(&["dsf", "--model", &bad]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("sigma") && err.contains("line"), "{err}");
}

#[test]
fn malformed_config_names_the_line() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "bench.toml");
    std::fs::write(&cfg, "p = 3\nsnr_list = \"loud\"\n").unwrap();
    let o = dsfnet(&["benchmark", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("line 2") && err.contains("snr_list"), "{err}");
}

#[test]
fn reconstruction_is_reproducible_and_embeds_its_config() {
    let dir = TempDir::new().unwrap();
    let data = simulate_fixture(&dir, "d.csv");
    let mut outputs = Vec::new();
    for name in ["r1.json", "r2.json"] {
        let out = path(&dir, name);
        let o = dsfnet(&["reconstruct", "--data", &data, "--n-states", "8", "--mask", "p-diag", "--p22", "1", "--seed", "5", "--out", &out]);
        assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let parsed: ReconstructOutput = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(parsed.result.config.seed, 5);
    assert_eq!(parsed.result.config.n_states, 8);
    assert_eq!(parsed.result.config.mask, dsfnet::MaskMode::PDiag { p22: 1 });
    assert_eq!(parsed.data.n_samples, 200);
    assert!(parsed.data.seed.is_some());
}

#[test]
fn benchmark_writes_the_table_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "bench.toml");
    std::fs::write(
        &cfg,
        "n_networks = 2\np = 3\nn_true = 6\nn_assumed = 6\nm = 3\ndensity = 0.25\nn_samples = 200\nsnr_list = [0.0, 40.0]\n\n[recon]\nouter_max_iter = 5\n",
    )
    .unwrap();
    let csv = path(&dir, "table.csv");
    let o = dsfnet(&["benchmark", "--config", &cfg, "--seed", "3", "--out", &csv]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "snr_db,precision_mean,tpr_mean,n_failed,n_total");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[1].ends_with(",2"));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("Precision") && stdout.contains("TPR") && stdout.contains("Failure"));
    assert!(String::from_utf8(o.stderr).unwrap().contains("total"));
    let records: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path(&dir, "table.json")).unwrap()).unwrap();
    assert_eq!(records["config"]["seed"], 3);
    assert_eq!(records["records"].as_array().unwrap().len(), 4);
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = path(&dir, name);
        let model = path(&dir, &format!("{name}.model.json"));
        let o = dsfnet(&["simulate", "--p", "3", "--n", "6", "--density", "0.25", "--samples", "50", "--seed", "11", "--out", &out, "--model-out", &model]);
        assert_eq!(o.status.code(), Some(EXIT_OK));
        (std::fs::read(out).unwrap(), std::fs::read(model).unwrap())
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let head = String::from_utf8(a.0).unwrap();
    assert!(head.starts_with("# dsfnet simulate config_seed=11 "));
}
