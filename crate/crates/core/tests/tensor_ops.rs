//! Forward values of the tensor ops on hand-checkable inputs, plus
//! nested-loop oracles for matmul and convolution.

mod common;

use common::rand_tensor;
use proptest::prelude::*;
use voxmamba::{Error, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let tape = Tape::new();
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let id = tape.constant(Tensor::identity(2));
    assert_eq!(id.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let v = tape.constant(t(&[2, 1], &[5.0, 7.0]));
    assert_eq!(p.matmul(v).unwrap().value().data(), &[5.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (rand_tensor(&[3, 4], 1, 1.0), rand_tensor(&[4, 2], 2, 1.0));
    let tape = Tape::new();
    let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.get(&[i, k]) * b.get(&[k, j]);
            }
            assert!((y.value().get(&[i, j]) - s).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let err = tape
        .constant(Tensor::<f64>::zeros(&[2, 3]))
        .matmul(tape.constant(Tensor::zeros(&[2, 3])))
        .unwrap_err();
    match err {
        Error::Dimension { lhs, rhs, .. } => assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3])),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn elementwise_values() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::<f64>::zeros(&[1]));
    assert!((z.softplus().unwrap().value().item() - 2f64.ln()).abs() < 1e-15);
    assert_eq!(z.silu().unwrap().value().item(), 0.0);
    let e = tape.constant(t(&[2], &[0.0, 1.0])).exp().unwrap();
    assert_eq!(e.value().data(), &[1.0, std::f64::consts::E]);
}

#[test]
fn non_broadcastable_shapes_are_rejected() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[3, 4]));
    let b = tape.constant(Tensor::<f64>::zeros(&[3]));
    assert!(matches!(a.add(b), Err(Error::Dimension { .. })));
}

#[test]
fn non_finite_forward_is_an_error() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1], &[1000.0]));
    assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
    let z = tape.constant(t(&[1], &[0.0]));
    assert!(matches!(z.ln(), Err(Error::NonFinite { .. })));
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let c = tape.constant(t(&[4], &[5.0; 4])).layer_norm(None, None, 1e-5).unwrap();
    assert_eq!(c.value().data(), &[0.0; 4]);
    let pm = tape.constant(t(&[2], &[1.0, -1.0])).layer_norm(None, None, 1e-12).unwrap();
    for (got, want) in pm.value().data().iter().zip([1.0, -1.0]) {
        assert!((got - want).abs() < 1e-10);
    }
    let x = tape.constant(rand_tensor(&[3, 4], 3, 1.0));
    let g = tape.constant(Tensor::zeros(&[4]));
    assert!(x.layer_norm(Some(g), None, 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
    assert_eq!(tape.backward(x.sum().unwrap()).unwrap().get_or_zeros(x).data(), &[1.0; 3]);
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.get_or_zeros(x).data(), &[2.0, 4.0]);
}

#[test]
fn gradients_accumulate_across_uses() {
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.5, -0.5]));
    let y = x.add(x).unwrap().add(x.scale(3.0).unwrap()).unwrap().sum().unwrap();
    assert_eq!(tape.backward(y).unwrap().get_or_zeros(x).data(), &[5.0, 5.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let tape = Tape::new();
    let x = tape.param(Tensor::<f64>::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
}

#[test]
fn permute_examples() {
    let x = rand_tensor(&[2, 3, 4], 4, 1.0);
    let y = x.permute(&[2, 0, 1]).unwrap();
    assert_eq!(y.shape(), &[4, 2, 3]);
    assert_eq!(y.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
    assert_eq!(x.permute(&[0, 1, 2]).unwrap(), x);
    assert!(matches!(x.permute(&[0, 0, 1]), Err(Error::Contract { .. })));
}

#[test]
fn causal_conv_identity_tap() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let k = tape.constant(t(&[2, 1], &[0.0, 1.0]));
    assert_eq!(x.conv1d_depthwise_causal(k, None).unwrap().value().data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn conv3d_unit_kernel_is_identity() {
    let x = rand_tensor(&[3, 4, 5, 1], 5, 1.0);
    let tape = Tape::new();
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = tape.constant(x.clone()).conv3d(k, None, 1, 0).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv3d_kernel_larger_than_input_is_rejected() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[2, 2, 2, 1]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 3, 1, 1]));
    assert!(matches!(x.conv3d(k, None, 1, 0), Err(Error::Dimension { .. })));
}

/// Direct six-nested-loop cross-correlation with zero padding.
fn conv3d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let (kk, ci, co) = (ks[0], ks[3], ks[4]);
    let out: Vec<usize> = (0..3).map(|a| (xs[a] + 2 * pad - kk) / stride + 1).collect();
    let mut y = Tensor::zeros(&[out[0], out[1], out[2], co]);
    for oh in 0..out[0] {
        for ow in 0..out[1] {
            for od in 0..out[2] {
                for o in 0..co {
                    let mut s = 0.0;
                    for a in 0..kk {
                        for b in 0..kk {
                            for c in 0..kk {
                                let (h, w, d) = (
                                    (oh * stride + a) as isize - pad as isize,
                                    (ow * stride + b) as isize - pad as isize,
                                    (od * stride + c) as isize - pad as isize,
                                );
                                if h < 0 || w < 0 || d < 0 || h >= xs[0] as isize || w >= xs[1] as isize || d >= xs[2] as isize {
                                    continue;
                                }
                                for i in 0..ci {
                                    s += x.get(&[h as usize, w as usize, d as usize, i]) * k.get(&[a, b, c, i, o]);
                                }
                            }
                        }
                    }
                    let idx = ((oh * out[1] + ow) * out[2] + od) * co + o;
                    y.data_mut()[idx] = s;
                }
            }
        }
    }
    y
}

#[test]
fn conv3d_matches_nested_loop_oracle() {
    for (stride, pad, k) in [(1, 1, 3), (2, 0, 2), (2, 1, 3), (1, 0, 1)] {
        let x = rand_tensor(&[5, 4, 6, 2], 6, 1.0);
        let kern = rand_tensor(&[k, k, k, 2, 3], 7, 1.0);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv3d(tape.constant(kern.clone()), None, stride, pad).unwrap();
        let want = conv3d_oracle(&x, &kern, stride, pad);
        assert_eq!(y.shape(), want.shape());
        assert!(y.value().max_abs_diff(&want) < 1e-5, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv_transpose_inverts_stride_two_layout() {
    // Each input voxel scatters its kernel block into a disjoint 2³ cell.
    let x = rand_tensor(&[2, 3, 2, 1], 8, 1.0);
    let k = rand_tensor(&[2, 2, 2, 1, 1], 9, 1.0);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv_transpose3d(tape.constant(k.clone()), None).unwrap();
    assert_eq!(y.shape(), vec![4, 6, 4, 1]);
    for h in 0..4 {
        for w in 0..6 {
            for d in 0..4 {
                let want = x.get(&[h / 2, w / 2, d / 2, 0]) * k.get(&[h % 2, w % 2, d % 2, 0, 0]);
                assert_eq!(y.value().get(&[h, w, d, 0]), want);
            }
        }
    }
}

#[test]
fn tape_ids_are_topological() {
    let tape = Tape::new();
    let a = tape.param(Tensor::<f64>::ones(&[2]));
    let b = a.exp().unwrap();
    let c = b.mul(a).unwrap();
    assert!(a.id() < b.id() && b.id() < c.id());
}

#[test]
fn determinism_of_forward() {
    let run = || {
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[4, 4, 4, 2], 10, 1.0));
        let k = tape.constant(rand_tensor(&[3, 3, 3, 2, 2], 11, 1.0));
        (*x.conv3d(k, None, 1, 1).unwrap().softmax_last().unwrap().value()).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn permute_round_trip_is_exact(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let x = rand_tensor(&dims, seed, 1.0);
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        perm.rotate_left(seed as usize % dims.len());
        let inv = voxmamba::tensor::inverse_permutation(&perm);
        prop_assert_eq!(x.permute(&perm).unwrap().permute(&inv).unwrap(), x);
    }

    #[test]
    fn reverse_rows_is_an_involution(rows in 1usize..20, cols in 1usize..6, seed in any::<u64>()) {
        let x = rand_tensor(&[rows, cols], seed, 1.0);
        prop_assert_eq!(x.reverse_rows().reverse_rows(), x);
    }

    #[test]
    fn broadcast_add_matches_explicit_expansion(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let a = rand_tensor(&[r, c], seed, 1.0);
        let b = rand_tensor(&[c], seed ^ 1, 1.0);
        let tape = Tape::new();
        let y = tape.constant(a.clone()).add(tape.constant(b.clone())).unwrap();
        for i in 0..r {
            for j in 0..c {
                prop_assert_eq!(y.value().get(&[i, j]), a.get(&[i, j]) + b.get(&[j]));
            }
        }
    }
}

#[test]
fn concat_then_slice_recovers_parts() {
    let tape = Tape::new();
    let a = tape.constant(rand_tensor(&[3, 2], 12, 1.0));
    let b = tape.constant(rand_tensor(&[3, 4], 13, 1.0));
    let cat = Var::concat_last(&[a, b]).unwrap();
    assert_eq!(*cat.slice_last(0, 2).unwrap().value(), *a.value());
    assert_eq!(*cat.slice_last(2, 6).unwrap().value(), *b.value());
}
