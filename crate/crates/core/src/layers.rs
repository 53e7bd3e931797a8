//! Mamba block, the pre-norm Mamba layer wrapper, and the bidirectional and
//! multi-directional 3-D layers that run it over flattened volumes.
//!
//! Volumes are `[H, W, D, C]`. A [`DirectionalLayout`] flattens a volume by
//! permuting its spatial axes and reading them row-major, so the last axis of
//! the permutation is the contiguous one: under `(H, W, D)` the voxels
//! `(0, 0, 0)` and `(0, 0, 1)` are neighbours in the sequence while `(0, 0, 0)`
//! and `(1, 0, 0)` are `W·D` tokens apart.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamId, ParamStore};
use crate::ssm::{state_size_for, S6Weights};
use crate::tensor::{inverse_permutation, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const EXPAND: usize = 2;
pub const CONV_WIDTH: usize = 4;
pub const MLP_RATIO: usize = 4;

/// Spatial axis indices of a volume.
pub const H: usize = 0;
pub const W: usize = 1;
pub const D: usize = 2;

/// One voxel-to-sequence ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DirectionalLayout {
    pub perm: [usize; 3],
    pub reversed: bool,
}

impl fmt::Display for DirectionalLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [char; 3] = ['H', 'W', 'D'];
        write!(
            f,
            "({}, {}, {}){}",
            NAMES[self.perm[0]],
            NAMES[self.perm[1]],
            NAMES[self.perm[2]],
            if self.reversed { " reversed" } else { "" }
        )
    }
}

impl DirectionalLayout {
    pub const fn forward(perm: [usize; 3]) -> Self {
        Self { perm, reversed: false }
    }

    pub const fn backward(perm: [usize; 3]) -> Self {
        Self { perm, reversed: true }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = self.perm;
        p.sort_unstable();
        if p != [0, 1, 2] {
            return Err(Error::Config(format!("{:?} is not a permutation of the spatial axes", self.perm)));
        }
        Ok(())
    }

    pub fn reversed(self) -> Self {
        Self { reversed: !self.reversed, ..self }
    }

    /// All six axis permutations in both directions.
    pub fn all() -> Vec<Self> {
        ALL_PERMS
            .iter()
            .flat_map(|&p| [Self::forward(p), Self::backward(p)])
            .collect()
    }

    /// Sequence position of voxel `(h, w, d)` in a volume of `dims`.
    pub fn position(&self, dims: [usize; 3], voxel: [usize; 3]) -> usize {
        let len = dims.iter().product::<usize>();
        let [a, b, c] = self.perm;
        let idx = (voxel[a] * dims[b] + voxel[b]) * dims[c] + voxel[c];
        if self.reversed {
            len - 1 - idx
        } else {
            idx
        }
    }
}

pub const ALL_PERMS: [[usize; 3]; 6] = [
    [H, W, D],
    [H, D, W],
    [W, H, D],
    [W, D, H],
    [D, H, W],
    [D, W, H],
];

/// The four axis orders used by the multi-directional layer.
pub const DEFAULT_DIRECTIONS: [[usize; 3]; 4] = [[H, W, D], [H, D, W], [W, H, D], [D, W, H]];

fn volume_dims(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match shape {
        &[h, w, d, c] => Ok([h, w, d, c]),
        _ => Err(Error::dim(op, shape, &[0, 0, 0, 0])),
    }
}

/// `[H, W, D, C] -> [L, C]` under `layout`.
pub fn flatten_volume<'t, T: Real>(v: Var<'t, T>, layout: DirectionalLayout) -> Result<Var<'t, T>> {
    layout.validate()?;
    let [_, _, _, c] = volume_dims(&v.shape(), "flatten_volume")?;
    let [a, b, d] = layout.perm;
    let seq = v.permute(&[a, b, d, 3])?.reshape(&[v.numel() / c.max(1), c])?;
    if layout.reversed {
        seq.reverse_rows()
    } else {
        Ok(seq)
    }
}

/// Inverse of [`flatten_volume`] for a volume of spatial size `dims`.
pub fn unflatten_volume<'t, T: Real>(
    seq: Var<'t, T>,
    dims: [usize; 3],
    layout: DirectionalLayout,
) -> Result<Var<'t, T>> {
    layout.validate()?;
    let shape = seq.shape();
    let l = dims.iter().product::<usize>();
    if shape.len() != 2 || shape[0] != l {
        return Err(Error::dim("unflatten_volume", &shape, &[dims[0], dims[1], dims[2]]));
    }
    let c = shape[1];
    let seq = if layout.reversed { seq.reverse_rows()? } else { seq };
    let [a, b, d] = layout.perm;
    let inv = inverse_permutation(&[a, b, d, 3]);
    seq.reshape(&[dims[a], dims[b], dims[d], c])?.permute(&inv)
}

/// Value-level [`flatten_volume`].
pub fn flatten_tensor<T: Real>(v: &Tensor<T>, layout: DirectionalLayout) -> Result<Tensor<T>> {
    layout.validate()?;
    let [_, _, _, c] = volume_dims(v.shape(), "flatten_volume")?;
    let [a, b, d] = layout.perm;
    let seq = v.permute(&[a, b, d, 3])?.reshape(&[v.numel() / c.max(1), c])?;
    Ok(if layout.reversed { seq.reverse_rows() } else { seq })
}

/// Value-level [`unflatten_volume`].
pub fn unflatten_tensor<T: Real>(
    seq: &Tensor<T>,
    dims: [usize; 3],
    layout: DirectionalLayout,
) -> Result<Tensor<T>> {
    layout.validate()?;
    let l = dims.iter().product::<usize>();
    if seq.rank() != 2 || seq.shape()[0] != l {
        return Err(Error::dim("unflatten_volume", seq.shape(), &[dims[0], dims[1], dims[2]]));
    }
    let c = seq.shape()[1];
    let s = if layout.reversed { seq.reverse_rows() } else { seq.clone() };
    let [a, b, d] = layout.perm;
    s.reshape(&[dims[a], dims[b], dims[d], c])?
        .permute(&inverse_permutation(&[a, b, d, 3]))
}

/// `1/sqrt(n)` scaling applied to residual-branch output projections at
/// init, for a model with `n` residual branches.
pub fn residual_scale(n_residual: usize) -> f64 {
    1.0 / (n_residual.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct MambaBlockWeights {
    pub d_model: usize,
    pub d_inner: usize,
    pub conv_width: usize,
    /// `[D_model, 2·E]`: first half feeds the SSM path, second half the gate.
    pub in_proj: ParamId,
    /// `[K, E]`
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub s6: S6Weights,
    /// `[E, D_model]`
    pub out_proj: ParamId,
}

impl MambaBlockWeights {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        residual_scale: f64,
        rng: &mut R,
    ) -> Self {
        let e = EXPAND * d_model;
        let state = state_size_for(d_model);
        let in_proj = store.add(format!("{prefix}.in_proj"), nn::fan_in_uniform(rng, &[d_model, 2 * e], d_model));
        let conv_w = store.add(format!("{prefix}.conv_w"), nn::fan_in_uniform(rng, &[CONV_WIDTH, e], CONV_WIDTH));
        let conv_b = store.add(format!("{prefix}.conv_b"), nn::fan_in_uniform(rng, &[e], CONV_WIDTH));
        let s6 = S6Weights::init(store, &format!("{prefix}.s6"), e, state, rng);
        let out = nn::fan_in_uniform::<T, _>(rng, &[e, d_model], e).map(|w| w * T::lit(residual_scale));
        let out_proj = store.add(format!("{prefix}.out_proj"), out);
        Self {
            d_model,
            d_inner: e,
            conv_width: CONV_WIDTH,
            in_proj,
            conv_w,
            conv_b,
            s6,
            out_proj,
        }
    }

    /// The residual branch `OutProj(SiLU(z) ⊙ S6(SiLU(conv(x_in))))`.
    pub fn mixer<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let e = self.d_inner;
        let xz = x.linear(p.var(self.in_proj), None)?;
        let xs = xz.slice_last(0, e)?;
        let z = xz.slice_last(e, 2 * e)?;
        let xc = xs
            .conv1d_depthwise_causal(p.var(self.conv_w), Some(p.var(self.conv_b)))?
            .silu()?;
        let y = self.s6.forward(xc, p)?;
        y.mul(z.silu()?)?.linear(p.var(self.out_proj), None)
    }

    /// `x + mixer(x)` over `[L, D_model]`.
    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        check_tokens(&x.shape(), self.d_model)?;
        x.add(self.mixer(x, p)?)
    }
}

fn check_tokens(shape: &[usize], d_model: usize) -> Result<()> {
    if shape.len() != 2 || shape[1] != d_model || shape[0] == 0 {
        return Err(Error::dim("mamba", shape, &[0, d_model]));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LayerNormWeights {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormWeights {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[c])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(Some(p.var(self.gain)), Some(p.var(self.bias)), LN_EPS)
    }
}

/// Pre-norm wrapper: `u = x + mixer(LN(x))`, `out = u + MLP(LN(u))`.
/// The layer's residual connection is the block's skip connection.
#[derive(Clone, Debug)]
pub struct MambaLayerWeights {
    pub d_model: usize,
    pub norm1: LayerNormWeights,
    pub block: MambaBlockWeights,
    pub norm2: LayerNormWeights,
    pub fc1: ParamId,
    pub fc1_b: ParamId,
    pub fc2: ParamId,
    pub fc2_b: ParamId,
}

impl MambaLayerWeights {
    /// Residual branches contributed by one layer (mixer and MLP).
    pub const RESIDUAL_BRANCHES: usize = 2;

    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        residual_scale: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = MLP_RATIO * d_model;
        let norm1 = LayerNormWeights::init(store, &format!("{prefix}.norm1"), d_model);
        let block = MambaBlockWeights::init(store, &format!("{prefix}.mamba"), d_model, residual_scale, rng);
        let norm2 = LayerNormWeights::init(store, &format!("{prefix}.norm2"), d_model);
        let fc1 = store.add(format!("{prefix}.mlp.fc1"), nn::fan_in_uniform(rng, &[d_model, hidden], d_model));
        let fc1_b = store.add(format!("{prefix}.mlp.fc1_b"), nn::fan_in_uniform(rng, &[hidden], d_model));
        let w2 = nn::fan_in_uniform::<T, _>(rng, &[hidden, d_model], hidden).map(|w| w * T::lit(residual_scale));
        let fc2 = store.add(format!("{prefix}.mlp.fc2"), w2);
        let fc2_b = store.add(format!("{prefix}.mlp.fc2_b"), Tensor::zeros(&[d_model]));
        Self {
            d_model,
            norm1,
            block,
            norm2,
            fc1,
            fc1_b,
            fc2,
            fc2_b,
        }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        check_tokens(&x.shape(), self.d_model)?;
        let u = x.add(self.block.mixer(self.norm1.forward(x, p)?, p)?)?;
        let m = self
            .norm2
            .forward(u, p)?
            .linear(p.var(self.fc1), Some(p.var(self.fc1_b)))?
            .silu()?
            .linear(p.var(self.fc2), Some(p.var(self.fc2_b)))?;
        u.add(m)
    }

    /// Zeroes both residual-branch output projections, making the layer an
    /// exact identity.
    pub fn zero_residual_outputs<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in [self.block.out_proj, self.fc2, self.fc2_b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Runs the layer over a volume flattened with `layout`.
    pub fn forward_volume<'t, T: Real>(
        &self,
        v: Var<'t, T>,
        layout: DirectionalLayout,
        p: &Bound<'t, T>,
    ) -> Result<Var<'t, T>> {
        let [h, w, d, _] = volume_dims(&v.shape(), "mamba_layer")?;
        let seq = flatten_volume(v, layout)?;
        unflatten_volume(self.forward(seq, p)?, [h, w, d], layout)
    }
}

/// Two independent Mamba layers over the forward and reversed flattening,
/// summed token-wise and layer-normalized.
#[derive(Clone, Debug)]
pub struct BidirWeights {
    pub perm: [usize; 3],
    pub fwd: MambaLayerWeights,
    pub bwd: MambaLayerWeights,
    pub norm: LayerNormWeights,
}

impl BidirWeights {
    pub const RESIDUAL_BRANCHES: usize = 2 * MambaLayerWeights::RESIDUAL_BRANCHES;

    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        perm: [usize; 3],
        residual_scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            perm,
            fwd: MambaLayerWeights::init(store, &format!("{prefix}.fwd"), d_model, residual_scale, rng),
            bwd: MambaLayerWeights::init(store, &format!("{prefix}.bwd"), d_model, residual_scale, rng),
            norm: LayerNormWeights::init(store, &format!("{prefix}.norm"), d_model),
        }
    }

    /// Pre-normalization token-wise sum over an already flattened sequence.
    pub fn branch_sum<'t, T: Real>(&self, seq: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let out_f = self.fwd.forward(seq, p)?;
        let out_b = self.bwd.forward(seq.reverse_rows()?, p)?.reverse_rows()?;
        out_f.add(out_b)
    }

    pub fn forward<'t, T: Real>(&self, v: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let [h, w, d, _] = volume_dims(&v.shape(), "bidir_mamba_3d")?;
        let layout = DirectionalLayout::forward(self.perm);
        let seq = flatten_volume(v, layout)?;
        let sum = self.branch_sum(seq, p)?;
        unflatten_volume(self.norm.forward(sum, p)?, [h, w, d], layout)
    }

    pub fn zero_residual_outputs<T: Real>(&self, store: &mut ParamStore<T>) {
        self.fwd.zero_residual_outputs(store);
        self.bwd.zero_residual_outputs(store);
    }
}

/// Bidirectional layers under several axis orders, averaged per voxel.
#[derive(Clone, Debug)]
pub struct MultiDirWeights {
    pub layers: Vec<BidirWeights>,
}

impl MultiDirWeights {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        perms: &[[usize; 3]],
        residual_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_direction_set(perms)?;
        let layers = perms
            .iter()
            .enumerate()
            .map(|(i, &perm)| BidirWeights::init(store, &format!("{prefix}.dir{i}"), d_model, perm, residual_scale, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn perms(&self) -> Vec<[usize; 3]> {
        self.layers.iter().map(|l| l.perm).collect()
    }

    pub fn forward<'t, T: Real>(&self, v: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let outs = self
            .layers
            .iter()
            .map(|l| l.forward(v, p))
            .collect::<Result<Vec<_>>>()?;
        Var::mean_of(&outs)
    }
}

/// Direction sets must be non-empty with distinct, valid permutations.
pub fn validate_direction_set(perms: &[[usize; 3]]) -> Result<()> {
    if perms.is_empty() {
        return Err(Error::Config("empty direction set".into()));
    }
    for (i, p) in perms.iter().enumerate() {
        DirectionalLayout::forward(*p).validate()?;
        if perms[..i].contains(p) {
            return Err(Error::Config(format!("duplicate layout {} in direction set", DirectionalLayout::forward(*p))));
        }
    }
    Ok(())
}
