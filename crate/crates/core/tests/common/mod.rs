#![allow(dead_code)]

use voxmamba::{Result, Tape, Tensor, Var};

/// Central-difference gradient of a scalar function of several f64 inputs,
/// checked against the tape. Returns the worst relative error over all
/// probed coordinates (`stride` thins out large inputs).
pub fn grad_check<F>(inputs: &[Tensor<f64>], stride: usize, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_detail(inputs, stride, f).0
}

/// Like [`grad_check`], also returning the input and element of the worst error.
pub fn grad_check_detail<F>(inputs: &[Tensor<f64>], stride: usize, f: F) -> (f64, usize, usize)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_step(inputs, stride, 1e-3, f)
}

/// [`grad_check_detail`] with an explicit finite-difference step.
pub fn grad_check_step<F>(inputs: &[Tensor<f64>], stride: usize, h: f64, f: F) -> (f64, usize, usize)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |ins: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).unwrap().value().item()
    };
    let mut worst = (0.0f64, 0, 0);
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in (0..input.numel()).step_by(stride.max(1)) {
            let x0 = input.data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let up = eval(&probe);
            probe[k].data_mut()[j] = x0 - h;
            let down = eval(&probe);
            probe[k].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[j];
            let err = (a - numeric).abs() / (1e-3 + a.abs().max(numeric.abs()));
            if err > worst.0 {
                worst = (err, k, j);
            }
        }
    }
    worst
}

/// Deterministic pseudo-random tensor in `[-scale, scale)`.
pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `Σ y ⊙ R` for a fixed random `R`, a scalar probe that keeps every
/// output element's gradient distinct.
pub fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = rand_tensor(&y.shape(), seed ^ 0xA5A5, 1.0);
    y.mul(y.tape().constant(r))?.sum()
}

/// Relative tolerance for single-op gradient checks.
pub const OP_TOL: f64 = 1e-4;
/// Relative tolerance for whole-model gradient checks.
pub const MODEL_TOL: f64 = 1e-3;
/// Finite-difference step for whole U-Nets. Channel layer norm over a few
/// channels curves sharply where a voxel's channels nearly agree, and 1e-3
/// steps straddle that.
pub const UNET_STEP: f64 = 1e-5;
