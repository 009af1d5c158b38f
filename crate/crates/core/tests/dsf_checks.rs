mod common;

use common::{gaussian_matrix, random_system};
use dsfnet::dsf::{default_q_points, CMatrix};
use dsfnet::linalg::{rng_from_seed, spectral_radius};
use dsfnet::model::selector;
use dsfnet::{boolean_structure, dsf_from_state_space, exact_dsf_small, generate_random_network, StateSpaceModel};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

fn rel_err(a: &[CMatrix], b: &[CMatrix]) -> f64 {
    let scale = b.iter().flat_map(|m| m.iter()).map(|v| v.norm()).fold(0.0f64, f64::max).max(1e-300);
    let diff = a.iter().zip(b).flat_map(|(x, y)| (x - y).iter().map(|v| v.norm()).collect::<Vec<_>>()).fold(0.0, f64::max);
    diff / scale
}

/// Selector-output model with feedthrough, so `K = sigma [I; 0]` is left
/// unchanged by a hidden-block change of coordinates.
fn selector_model(seed: u64, p: usize, n: usize) -> StateSpaceModel {
    let mut rng = rng_from_seed(seed);
    let mut a = gaussian_matrix(&mut rng, n, n);
    a *= 0.9 / spectral_radius(&a).max(1e-12);
    let b = gaussian_matrix(&mut rng, n, p);
    let d = gaussian_matrix(&mut rng, p, p) * 0.3;
    StateSpaceModel::new(a, b, selector(p, n), d, 0.7, DVector::zeros(n), DMatrix::identity(n, n)).unwrap()
}

fn hidden_transform(model: &StateSpaceModel, s: &DMatrix<f64>) -> StateSpaceModel {
    let (n, p) = (model.n(), model.p());
    let mut t = DMatrix::identity(n, n);
    t.view_mut((p, p), (n - p, n - p)).copy_from(s);
    let t_inv = t.clone().try_inverse().unwrap();
    let mut out = model.clone();
    out.a = &t * &model.a * &t_inv;
    out.b = &t * &model.b;
    out
}

fn dims(rng: &mut dsfnet::linalg::Rng) -> (usize, usize) {
    let p = rng.random_range(1..=5);
    let n = rng.random_range(p..=12);
    (p, n)
}

#[test]
fn structure_function_is_invariant_to_hidden_coordinates() {
    let mut rng = rng_from_seed(0xd5f);
    let pts = default_q_points(3);
    for seed in 0..50u64 {
        let (p, n) = dims(&mut rng);
        let model = selector_model(seed, p, n);
        let r = n - p;
        let s = DMatrix::identity(r, r) + gaussian_matrix(&mut rng, r, r) * 0.4;
        if s.clone().try_inverse().is_none() {
            continue;
        }
        let moved = hidden_transform(&model, &s);
        let x = dsf_from_state_space(&model, &pts).unwrap();
        let y = dsf_from_state_space(&moved, &x.q_points).unwrap();
        assert_eq!(x.q_points, y.q_points);
        assert!(rel_err(&y.q_vals, &x.q_vals) <= 1e-8, "Q, seed {seed}");
        assert!(rel_err(&y.p_vals, &x.p_vals) <= 1e-8, "P, seed {seed}");
        assert!(rel_err(&y.h_vals, &x.h_vals) <= 1e-8, "H, seed {seed}");
    }
}

#[test]
fn sampled_and_exact_paths_agree() {
    let mut rng = rng_from_seed(0xe7ac7);
    let pts = default_q_points(4);
    for seed in 0..50u64 {
        let (p, n) = dims(&mut rng);
        let model = if seed % 2 == 0 { selector_model(seed, p, n) } else { random_system(seed, n, p, p) };
        let sample = dsf_from_state_space(&model, &pts).unwrap();
        let exact = exact_dsf_small(&model).unwrap();
        let (mut q, mut pm, mut h) = (Vec::new(), Vec::new(), Vec::new());
        for &z in &sample.q_points {
            let (a, b, c) = exact.eval(z);
            q.push(a);
            pm.push(b);
            h.push(c);
        }
        assert!(rel_err(&q, &sample.q_vals) <= 1e-10, "Q, seed {seed}, n = {n}, p = {p}");
        assert!(rel_err(&pm, &sample.p_vals) <= 1e-10, "P, seed {seed}");
        assert!(rel_err(&h, &sample.h_vals) <= 1e-10, "H, seed {seed}");
    }
}

#[test]
fn exact_entries_match_samples_off_the_default_grid() {
    let model = random_system(41, 4, 2, 2);
    let exact = exact_dsf_small(&model).unwrap();
    let mut rng = rng_from_seed(42);
    let pts: Vec<Complex64> =
        (0..8).map(|_| Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
    let sample = dsf_from_state_space(&model, &pts).unwrap();
    for (k, &z) in sample.q_points.iter().enumerate() {
        let (q, p, h) = exact.eval(z);
        assert!(rel_err(&[q], &[sample.q_vals[k].clone()]) <= 1e-10);
        assert!(rel_err(&[p], &[sample.p_vals[k].clone()]) <= 1e-10);
        assert!(rel_err(&[h], &[sample.h_vals[k].clone()]) <= 1e-10);
    }
}

#[test]
fn fixed_small_network_structure_matches_exact_pattern() {
    let truth = generate_random_network(3, 6, 3, 0.2, 7).unwrap();
    let exact = exact_dsf_small(&truth.model).unwrap();
    assert_eq!(truth.q_structure, exact.q.nonzero_pattern());
    assert_eq!(truth.p_structure, exact.p.nonzero_pattern());
}

#[test]
fn ten_node_sampled_structure_matches_exact_pattern() {
    for seed in 0..5 {
        let truth = generate_random_network(10, 20, 10, 0.1, 100 + seed).unwrap();
        let exact = exact_dsf_small(&truth.model).unwrap();
        let sample = dsf_from_state_space(&truth.model, &default_q_points(seed)).unwrap();
        let graph = boolean_structure(&sample, 1e-4).unwrap();
        assert_eq!(graph.q_adj, exact.q.nonzero_pattern(), "seed {seed}");
        assert_eq!(graph.q_adj, truth.q_structure, "seed {seed}");
    }
}

#[test]
fn fully_measured_structure_follows_a() {
    for seed in 0..10 {
        let truth = generate_random_network(6, 6, 6, 0.3, seed).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = i != j && truth.model.a[(i, j)] != 0.0;
                assert_eq!(truth.q_structure[(i, j)], expect);
            }
        }
    }
}
