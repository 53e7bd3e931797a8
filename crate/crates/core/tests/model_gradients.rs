//! Whole-module gradients (S6, Mamba block and layer, bidirectional and
//! multi-directional layers, 8³ U-Nets) against central differences.

mod common;

use common::{grad_check, grad_check_step, probe, rand_tensor, MODEL_TOL, UNET_STEP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxmamba::layers::{BidirWeights, MambaBlockWeights, MambaLayerWeights, MultiDirWeights, DEFAULT_DIRECTIONS, H, W, D};
use voxmamba::nn::{Bound, ParamStore};
use voxmamba::ssm::S6Weights;
use voxmamba::train::dice_ce_loss;
use voxmamba::unet::{build_variant, Variant, VariantConfig};
use voxmamba::{Tape, Tensor};

/// Checks gradients w.r.t. the input (index 0) and every parameter of `store`.
fn check_module<F>(store: &ParamStore<f64>, input: Tensor<f64>, f: F) -> f64
where
    F: for<'t> Fn(voxmamba::Var<'t, f64>, &Bound<'t, f64>) -> voxmamba::Result<voxmamba::Var<'t, f64>>,
{
    let mut inputs = vec![input];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    grad_check(&inputs, 1, |_: &Tape<f64>, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        probe(f(v[0], &p)?, 21)
    })
}

#[test]
fn s6_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w = S6Weights::init(&mut store, "s6", 3, 4, &mut rng);
    let err = check_module(&store, rand_tensor(&[7, 3], 2, 1.0), |x, p| w.forward(x, p));
    assert!(err < MODEL_TOL, "{err}");
}

#[test]
fn mamba_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = MambaBlockWeights::init(&mut store, "blk", 3, 1.0, &mut rng);
    let err = check_module(&store, rand_tensor(&[6, 3], 4, 1.0), |x, p| w.forward(x, p));
    assert!(err < MODEL_TOL, "{err}");
}

#[test]
fn mamba_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = MambaLayerWeights::init(&mut store, "layer", 3, 1.0, &mut rng);
    let err = check_module(&store, rand_tensor(&[6, 3], 6, 1.0), |x, p| w.forward(x, p));
    assert!(err < MODEL_TOL, "{err}");
}

#[test]
fn bidirectional_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let w = BidirWeights::init(&mut store, "bi", 3, [W, D, H], 1.0, &mut rng);
    let err = check_module(&store, rand_tensor(&[2, 3, 2, 3], 8, 1.0), |x, p| w.forward(x, p));
    assert!(err < MODEL_TOL, "{err}");
}

#[test]
fn multi_directional_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let w = MultiDirWeights::init(&mut store, "md", 3, &DEFAULT_DIRECTIONS, 1.0, &mut rng).unwrap();
    let err = check_module(&store, rand_tensor(&[2, 2, 3, 3], 10, 1.0), |x, p| w.forward(x, p));
    assert!(err < MODEL_TOL, "{err}");
}

/// Every parameter of an 8³ model through the Dice + CE loss.
fn unet_error(variant: Variant) -> f64 {
    let cfg = VariantConfig { widths: vec![4, 8], crop: [8, 8, 8], ..VariantConfig::desk(variant) };
    let model = build_variant::<f64>(&cfg, 3).unwrap();
    let x = rand_tensor(&[8, 8, 8, 1], 5, 1.0);
    let labels: Vec<usize> = (0..512).map(|i| (i * 7 / 13) % 3).collect();
    let params: Vec<_> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let (err, k, j) = grad_check_step(&params, 23, UNET_STEP, |tape: &Tape<f64>, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        dice_ce_loss(model.forward(tape.constant(x.clone()), &bound)?, &labels)
    });
    assert!(err < MODEL_TOL, "{variant:?}: {err} at {}[{j}]", model.store.iter().nth(k).unwrap().0);
    err
}

#[test]
fn unet_baseline() {
    unet_error(Variant::Baseline);
}

#[test]
fn unet_seg_mamba() {
    unet_error(Variant::SegMamba);
}

#[test]
fn unet_seg_mamba_skip() {
    unet_error(Variant::SegMambaSkip);
}

#[test]
fn unet_pan_seg_mamba() {
    unet_error(Variant::PanSegMamba);
}

#[test]
fn unet_multi_seg_mamba() {
    unet_error(Variant::MultiSegMamba);
}
