//! Loss, optimizers, learning-rate schedule and the single training step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::unet::UNet;

pub const DICE_SMOOTH: f64 = 1e-5;

/// Soft Dice over foreground classes plus cross-entropy, equally weighted:
/// `CE + (1 − mean_{k≥1} dice_k)`. `logits` is `[.., K]`, one label per row.
pub fn dice_ce_loss<'t, T: Real>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let k = *shape.last().ok_or_else(|| Error::contract("dice_ce_loss", "rank-0 logits"))?;
    let rows = logits.numel() / k;
    let flat = logits.reshape(&[rows, k])?;
    let ce = flat.cross_entropy(labels)?;
    if k < 2 {
        return Ok(ce);
    }
    let tape = logits.tape();
    let mut onehot = vec![T::zero(); rows * k];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * k + l] = T::one();
    }
    let onehot = Tensor::new(&[rows, k], onehot)?;
    let gsum = Tensor::from_fn(&[k], |c| onehot.data().iter().skip(c).step_by(k).copied().sum());
    let probs = flat.softmax_last()?;
    let inter = probs.mul(tape.constant(onehot))?.sum_leading()?;
    let psum = probs.sum_leading()?;
    let num = inter.scale(2.0)?.add_scalar(DICE_SMOOTH)?;
    let den = psum.add(tape.constant(gsum))?.add_scalar(DICE_SMOOTH)?;
    let dice = num.div(den)?.slice_last(1, k)?.mean()?;
    ce.add(dice.neg()?.add_scalar(1.0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    RAdam,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::RAdam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self { step: 0, m, v }
    }

    pub fn for_model(model: &UNet<T>) -> Self {
        Self::new(model.store.iter().map(|(_, t)| t.shape()))
    }
}

/// Applies one Adam or RAdam update with learning rate `lr`.
///
/// RAdam uses the variance-rectification term
/// `r_t = sqrt((ρ_t−4)(ρ_t−2)ρ_∞ / ((ρ_∞−4)(ρ_∞−2)ρ_t))` when `ρ_t > 4`
/// and falls back to an un-normalized momentum step otherwise.
pub fn optimizer_step<T: Real>(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(
            "optimizer_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let (step_size, adaptive) = match cfg.kind {
        OptimizerKind::Adam => (lr / bc1, true),
        OptimizerKind::RAdam => {
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
            if rho_t > 4.0 {
                let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
                (lr * r / bc1, true)
            } else {
                (lr / bc1, false)
            }
        }
    };
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (one, eps, step_t, sbc2) = (T::one(), T::lit(cfg.eps), T::lit(step_size), T::lit(bc2.sqrt()));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1t * m[j] + (one - b1t) * gj;
            v[j] = b2t * v[j] + (one - b2t) * gj * gj;
            let update = if adaptive {
                m[j] / (v[j].sqrt() / sbc2 + eps)
            } else {
                m[j]
            };
            *w = *w - step_t * update;
        }
    }
    Ok(())
}

/// `lr(e) = base · (1 − e / total)` for epoch `e` in `0..total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base: f64,
    pub total_epochs: usize,
}

impl LinearSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let e = epoch.min(self.total_epochs) as f64;
        self.base * (1.0 - e / self.total_epochs.max(1) as f64)
    }
}

/// One training example: image `[H, W, D, C_in]` and per-voxel labels.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub image: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Forward, backward and one optimizer update over a batch. Returns the
/// per-example losses in batch order; the update uses their mean.
pub fn train_step<T: Real>(
    model: &mut UNet<T>,
    batch: &[&Example<T>],
    opt: &OptimizerConfig,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::contract("train_step", "empty batch"));
    }
    let step = state.step as usize;
    let diverged = |loss: f64| Error::Divergence { step, loss };
    let (grads, losses) = {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let mut per = Vec::with_capacity(batch.len());
        for ex in batch {
            let x = tape.constant(ex.image.clone());
            let logits = match model.forward(x, &p) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            match dice_ce_loss(logits, &ex.labels) {
                Ok(l) => per.push(l),
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            }
        }
        let loss = Var::mean_of(&per)?;
        let losses: Vec<f64> = per.iter().map(|l| l.value().item().as_f64()).collect();
        let total = loss.value().item().as_f64();
        if !total.is_finite() {
            return Err(diverged(total));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor<T>> = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
        (g, losses)
    };
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(diverged(f64::NAN));
    }
    let mut params: Vec<&mut Tensor<T>> = model.store.values_mut().collect();
    optimizer_step(opt, state, &mut params, &grads, lr)?;
    Ok(losses)
}
