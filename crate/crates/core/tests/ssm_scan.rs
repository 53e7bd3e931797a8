//! Discretization, the sequential and chunked scans, and S6 selection.

mod common;

use common::rand_tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmamba::nn::ParamStore;
use voxmamba::ssm::{
    discretize_sequence, discretize_zoh, discretize_zoh_scalar, s6_eval, scan_chunked, scan_sequential,
    select_params, state_size_for, DiscretizedParams, S6Weights,
};
use voxmamba::{Error, Tape, Tensor};

/// Random stable parameters: `a ∈ [-2, -0.05]`, `Δ ∈ [1e-3, 0.5]`.
fn random_problem(l: usize, e: usize, n: usize, seed: u64) -> (Tensor<f64>, DiscretizedParams<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(&[e, n], |_| -rng.random_range(0.05..2.0));
    let b = Tensor::<f64>::from_fn(&[l, n], |_| rng.random_range(-1.0..1.0));
    let c = Tensor::from_fn(&[l, n], |_| rng.random_range(-1.0..1.0));
    let delta = Tensor::from_fn(&[l, e], |_| rng.random_range(1e-3..0.5));
    let x = Tensor::<f64>::from_fn(&[l, e], |_| rng.random_range(-1.0..1.0));
    (x, discretize_sequence(&a, &b, &delta).unwrap(), c)
}

/// Scan with every Ā, B̄ equal to the given constants and C = 1.
fn constant_problem(xs: &[f64], abar: f64, bbar: f64) -> (Tensor<f64>, DiscretizedParams<f64>, Tensor<f64>) {
    let l = xs.len();
    let p = DiscretizedParams { len: l, channels: 1, state: 1, a_bar: vec![abar; l], b_bar: vec![bbar; l] };
    (Tensor::from_f64(&[l, 1], xs).unwrap(), p, Tensor::ones(&[l, 1]))
}

#[test]
fn zoh_golden_value() {
    let (ab, bb) = discretize_zoh_scalar(-1.0f64, 1.0, 2f64.ln()).unwrap();
    assert!((ab - 0.5).abs() < 1e-12 && (bb - 0.5).abs() < 1e-12, "{ab} {bb}");
}

#[test]
fn zoh_small_step_limit() {
    let d = 1e-8;
    let (ab, bb) = discretize_zoh_scalar(-1.0f64, 1.0, d).unwrap();
    // Second-order Taylor terms are O(Δ²) = 1e-16.
    assert!((ab - (1.0 - d)).abs() < 1e-15);
    assert!((bb - d).abs() / d < 1e-7);
}

#[test]
fn zoh_zero_input_matrix() {
    for d in [1e-3, 0.5, 7.0] {
        let (_, bb) = discretize_zoh(&[-2.0f64], &[0.0], d).unwrap();
        assert_eq!(bb, vec![0.0]);
    }
}

#[test]
fn zoh_errors() {
    assert!(matches!(
        discretize_zoh(&[-1.0f64, 0.0], &[1.0, 1.0], 0.1),
        Err(Error::SingularDiscretization { index: 1 })
    ));
    assert!(matches!(discretize_zoh_scalar(-1.0f64, 1.0, 0.0), Err(Error::Contract { .. })));
}

#[test]
fn discretized_decay_lies_in_unit_interval() {
    let (_, p, _) = random_problem(200, 3, 8, 1);
    assert!(p.a_bar.iter().all(|&a| a > 0.0 && a < 1.0));
}

#[test]
fn sequential_scan_hand_example() {
    let (x, p, c) = constant_problem(&[1.0, 1.0, 1.0], 0.5, 0.5);
    assert_eq!(scan_sequential(&x, &p, &c).unwrap().data(), &[0.5, 0.75, 0.875]);
}

#[test]
fn memoryless_and_zero_input() {
    let (x, p, c) = constant_problem(&[2.0, -1.0, 3.0], 0.0, 0.25);
    assert_eq!(scan_sequential(&x, &p, &c).unwrap().data(), &[0.5, -0.25, 0.75]);
    let (x, p, c) = constant_problem(&[0.0; 5], 0.9, 0.3);
    assert!(scan_sequential(&x, &p, &c).unwrap().data().iter().all(|&y| y == 0.0));
}

#[test]
fn empty_sequence_is_valid() {
    let (x, p, c) = constant_problem(&[], 0.5, 0.5);
    assert_eq!(scan_sequential(&x, &p, &c).unwrap().numel(), 0);
    assert_eq!(scan_chunked(&x, &p, &c, 4).unwrap().numel(), 0);
}

#[test]
fn chunk_one_and_chunk_len_are_bitwise_sequential() {
    let (x, p, c) = random_problem(97, 3, 5, 2);
    let seq = scan_sequential(&x, &p, &c).unwrap();
    assert_eq!(scan_chunked(&x, &p, &c, 1).unwrap(), seq);
    assert_eq!(scan_chunked(&x, &p, &c, 97).unwrap(), seq);
    assert!(matches!(scan_chunked(&x, &p, &c, 0), Err(Error::Contract { .. })));
}

#[test]
fn chunked_513_tokens() {
    let (x, p, c) = random_problem(513, 4, 16, 3);
    let d = scan_sequential(&x, &p, &c).unwrap().max_abs_diff(&scan_chunked(&x, &p, &c, 64).unwrap());
    assert!(d < 1e-10, "{d}");
}

#[test]
fn chunked_f32_tolerance() {
    let (x, p, c) = random_problem(700, 2, 8, 4);
    let x32 = x.cast::<f32>();
    let c32 = c.cast::<f32>();
    let p32 = DiscretizedParams {
        len: p.len,
        channels: p.channels,
        state: p.state,
        a_bar: p.a_bar.iter().map(|&v| v as f32).collect(),
        b_bar: p.b_bar.iter().map(|&v| v as f32).collect(),
    };
    let d = scan_sequential(&x32, &p32, &c32).unwrap().max_abs_diff(&scan_chunked(&x32, &p32, &c32, 64).unwrap());
    assert!(d < 1e-5, "{d}");
}

#[test]
fn chunked_result_is_independent_of_worker_count() {
    let (x, p, c) = random_problem(1000, 2, 4, 5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| scan_chunked(&x, &p, &c, 37).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn causality() {
    let (x, p, c) = random_problem(64, 2, 4, 6);
    let y = scan_sequential(&x, &p, &c).unwrap();
    let t0 = 40;
    let mut x2 = x.clone();
    x2.data_mut()[t0 * 2] += 3.0;
    let y2 = scan_sequential(&x2, &p, &c).unwrap();
    assert_eq!(&y.data()[..t0 * 2], &y2.data()[..t0 * 2]);
    assert_ne!(y.data()[t0 * 2], y2.data()[t0 * 2]);
}

#[test]
fn million_token_stream_stays_bounded() {
    let l = 1_000_000;
    let (e, n) = (1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::from_f64(&[e, n], &[-0.5, -1.5]).unwrap();
    let b = Tensor::<f64>::from_fn(&[l, n], |_| rng.random_range(-1.0..1.0));
    let c = Tensor::ones(&[l, n]);
    let delta = Tensor::<f64>::from_fn(&[l, e], |_| rng.random_range(0.01..0.2));
    let x = Tensor::<f64>::from_fn(&[l, e], |_| rng.random_range(-1.0..1.0));
    let p = discretize_sequence(&a, &b, &delta).unwrap();
    // ‖h‖∞ ≤ max‖B̄ ⊙ x‖∞ / (1 − max Ā), and |y| ≤ Σ_n |C|·‖h‖∞.
    let max_in = (0..l)
        .flat_map(|t| (0..n).map(move |j| (t, j)))
        .map(|(t, j)| (p.b_bar[t * n + j] * x.data()[t]).abs())
        .fold(0.0, f64::max);
    let max_a = p.a_bar.iter().copied().fold(0.0, f64::max);
    let bound = n as f64 * max_in / (1.0 - max_a);
    let y = scan_chunked(&x, &p, &c, 4096).unwrap();
    let worst = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(y.is_finite() && worst <= bound, "{worst} > {bound}");
}

#[test]
fn state_size_rule() {
    assert_eq!(state_size_for(16), 16);
    assert_eq!(state_size_for(256), 256);
    assert_eq!(state_size_for(1024), 256);
}

fn zeroed_s6(bias: f64) -> (ParamStore<f64>, S6Weights) {
    let mut store = ParamStore::new();
    let w = S6Weights::init(&mut store, "s6", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
    for id in [w.w_b, w.w_c, w.w_delta] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    store.get_mut(w.delta_bias).data_mut().iter_mut().for_each(|v| *v = bias);
    (store, w)
}

#[test]
fn selection_with_zero_input() {
    let (store, w) = zeroed_s6(0.7);
    let p = select_params(&Tensor::zeros(&[5, 3]), &w, &store).unwrap();
    let want = (1.0 + 0.7f64.exp()).ln();
    assert!(p.delta.data().iter().all(|&d| (d - want).abs() < 1e-15));
    let (store, w) = zeroed_s6(0.0);
    let p = select_params(&Tensor::zeros(&[5, 3]), &w, &store).unwrap();
    assert!(p.delta.data().iter().all(|&d| (d - 2f64.ln()).abs() < 1e-15));
    assert!(p.a.data().iter().all(|&a| a < 0.0));
}

#[test]
fn selection_rejects_non_finite_input() {
    let (store, w) = zeroed_s6(0.0);
    let x = Tensor::from_f64(&[1, 3], &[0.0, f64::NAN, 0.0]).unwrap();
    assert!(matches!(select_params(&x, &w, &store), Err(Error::NonFinite { .. })));
}

#[test]
fn step_sizes_stay_positive_over_a_million_draws() {
    let mut store = ParamStore::new();
    let w = S6Weights::init(&mut store, "s6", 4, 4, &mut ChaCha8Rng::seed_from_u64(8));
    let x = rand_tensor(&[250_000, 4], 9, 20.0);
    let p = select_params(&x, &w, &store).unwrap();
    assert_eq!(p.delta.numel(), 1_000_000);
    assert!(p.delta.data().iter().all(|&d| d > 0.0));
}

#[test]
fn s6_single_token_is_pointwise() {
    let mut store = ParamStore::new();
    let w = S6Weights::init(&mut store, "s6", 3, 4, &mut ChaCha8Rng::seed_from_u64(10));
    let x = rand_tensor(&[1, 3], 11, 1.0);
    let p = select_params(&x, &w, &store).unwrap();
    let y = s6_eval(&x, &w, &store, None).unwrap();
    for d in 0..3 {
        let mut want = 0.0;
        for j in 0..4 {
            let a = p.a.get(&[d, j]);
            let bbar = (p.delta.get(&[0, d]) * a).exp_m1() / a * p.b.get(&[0, j]);
            want += p.c.get(&[0, j]) * bbar * x.get(&[0, d]);
        }
        assert!((y.get(&[0, d]) - want).abs() < 1e-14);
    }
}

#[test]
fn s6_memoryless_limit() {
    // Large steps with strongly negative A forget everything between tokens.
    let (mut store, w) = zeroed_s6(30.0);
    store.get_mut(w.a_log).data_mut().iter_mut().for_each(|v| *v = 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for id in [w.w_b, w.w_c] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let x = rand_tensor(&[20, 3], 13, 1.0);
    let p = select_params(&x, &w, &store).unwrap();
    let y = s6_eval(&x, &w, &store, None).unwrap();
    for t in 0..20 {
        for d in 0..3 {
            // Ā ≈ 0 leaves h_t = B̄_t x_t with B̄ = (Ā − 1)/a · b ≈ −b/a.
            let want: f64 = (0..2).map(|j| p.c.get(&[t, j]) * (-p.b.get(&[t, j]) / p.a.get(&[d, j])) * x.get(&[t, d])).sum();
            assert!((y.get(&[t, d]) - want).abs() < 1e-9);
        }
    }
}

#[test]
fn tape_scan_matches_oracle() {
    let mut store = ParamStore::new();
    let w = S6Weights::init(&mut store, "s6", 4, 3, &mut ChaCha8Rng::seed_from_u64(14));
    let x = rand_tensor(&[50, 4], 15, 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = w.forward(tape.constant(x.clone()), &p).unwrap();
    let oracle = s6_eval(&x, &w, &store, None).unwrap();
    assert!(y.value().max_abs_diff(&oracle) < 1e-12);
    assert!(s6_eval(&x, &w, &store, Some(8)).unwrap().max_abs_diff(&oracle) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn chunked_equals_sequential(l in 1usize..=1024, n in 1usize..=32, chunk in 1usize..200, seed in any::<u64>()) {
        let (x, p, c) = random_problem(l, 2, n, seed);
        let d = scan_sequential(&x, &p, &c).unwrap().max_abs_diff(&scan_chunked(&x, &p, &c, chunk).unwrap());
        prop_assert!(d < 1e-10, "max diff {}", d);
    }
}
