//! Compact 3-D U-Net and the Mamba placement variants.
//!
//! Encoder level `l` runs two `3³` conv + channel LayerNorm + LeakyReLU
//! stages; levels are joined by `2³` stride-2 convolutions and the decoder
//! upsamples with `2³` stride-2 transposed convolutions, concatenating the
//! encoder skip of the same level before its own two conv stages.
//!
//! Mamba placement per variant, for `S` levels:
//!
//! | variant        | sites                                   | module            |
//! |----------------|-----------------------------------------|-------------------|
//! | Baseline       | none                                    |                   |
//! | SegMamba       | end of encoder levels `0..S` (S sites)  | Mamba layer       |
//! | SegMambaSkip   | skip connections `0..S-1` (S−1 sites)   | bidirectional     |
//! | PanSegMamba    | end of encoder levels `0..S` (S sites)  | bidirectional     |
//! | MultiSegMamba  | end of encoder levels `0..S` (S sites)  | multi-directional |
//!
//! An encoder-level site sits before that level's downsampling convolution
//! (or in the bottleneck for the last level) and its output also feeds the
//! skip connection.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    residual_scale, validate_direction_set, BidirWeights, DirectionalLayout, LayerNormWeights,
    MambaLayerWeights, MultiDirWeights, DEFAULT_DIRECTIONS, H, W, D,
};
use crate::nn::{self, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    SegMamba,
    SegMambaSkip,
    PanSegMamba,
    MultiSegMamba,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::SegMamba,
        Variant::SegMambaSkip,
        Variant::PanSegMamba,
        Variant::MultiSegMamba,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SegMamba => "seg-mamba",
            Variant::SegMambaSkip => "seg-mamba-skip",
            Variant::PanSegMamba => "pan-seg-mamba",
            Variant::MultiSegMamba => "multi-seg-mamba",
        }
    }

    /// Number of Mamba modules the placement policy inserts for `stages` levels.
    pub fn expected_sites(self, stages: usize) -> usize {
        match self {
            Variant::Baseline => 0,
            Variant::SegMambaSkip => stages - 1,
            _ => stages,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().replace('-', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

fn default_in_channels() -> usize {
    1
}

fn default_directions() -> Vec<[usize; 3]> {
    DEFAULT_DIRECTIONS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Channel width per resolution level; its length is the level count.
    pub widths: Vec<usize>,
    /// Patch shape `(H, W, D)`.
    pub crop: [usize; 3],
    pub classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Axis orders of the multi-directional layer.
    #[serde(default = "default_directions")]
    pub directions: Vec<[usize; 3]>,
}

impl VariantConfig {
    /// Four levels of widths `16..128` on a `32³` crop.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            widths: vec![16, 32, 64, 128],
            crop: [32, 32, 32],
            classes: 3,
            in_channels: 1,
            directions: default_directions(),
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s < 2 {
            return Err(Error::Config(format!("need at least 2 levels, got {s}")));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("widths must be positive and strictly increasing: {:?}", self.widths)));
        }
        let f = 1usize << (s - 1);
        if self.crop.iter().any(|&c| c == 0 || c % f != 0) {
            return Err(Error::Config(format!("crop {:?} not divisible by 2^(S-1) = {f}", self.crop)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.variant == Variant::MultiSegMamba {
            validate_direction_set(&self.directions)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    /// End of encoder level `l` (the bottleneck when `l == S − 1`).
    Encoder(usize),
    /// Skip connection of level `l`.
    Skip(usize),
}

#[derive(Clone, Debug)]
pub enum MambaModule {
    Unidirectional(MambaLayerWeights),
    Bidirectional(BidirWeights),
    MultiDirectional(MultiDirWeights),
}

impl MambaModule {
    pub fn forward<'t, T: Real>(&self, v: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        match self {
            MambaModule::Unidirectional(l) => l.forward_volume(v, DirectionalLayout::forward([H, W, D]), p),
            MambaModule::Bidirectional(b) => b.forward(v, p),
            MambaModule::MultiDirectional(m) => m.forward(v, p),
        }
    }

    /// Number of Mamba layers (unidirectional wrappers) inside the module.
    pub fn layer_count(&self) -> usize {
        match self {
            MambaModule::Unidirectional(_) => 1,
            MambaModule::Bidirectional(_) => 2,
            MambaModule::MultiDirectional(m) => 2 * m.layers.len(),
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        !matches!(self, MambaModule::Unidirectional(_))
    }

    pub fn zero_residual_outputs<T: Real>(&self, store: &mut ParamStore<T>) {
        match self {
            MambaModule::Unidirectional(l) => l.zero_residual_outputs(store),
            MambaModule::Bidirectional(b) => b.zero_residual_outputs(store),
            MambaModule::MultiDirectional(m) => m.layers.iter().for_each(|b| b.zero_residual_outputs(store)),
        }
    }

    fn residual_branches(&self) -> usize {
        MambaLayerWeights::RESIDUAL_BRANCHES
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn init<T: Real>(store: &mut ParamStore<T>, name: &str, k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = k * k * k * cin;
        Self {
            weight: store.add(format!("{name}.weight"), nn::fan_in_uniform(rng, &[k, k, k, cin, cout], fan_in)),
            bias: store.add(format!("{name}.bias"), nn::fan_in_uniform(rng, &[cout], fan_in)),
        }
    }
}

/// Conv, per-voxel LayerNorm over channels, LeakyReLU. The norm is kept
/// local: statistics pooled over the volume would carry global context into
/// every voxel and blur the receptive-field differences between variants.
#[derive(Clone, Debug)]
struct ConvStage {
    conv: Conv,
    norm: LayerNormWeights,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    stages: [ConvStage; 2],
}

impl ConvBlock {
    fn init<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let mk = |store: &mut ParamStore<T>, i: usize, ci: usize, rng: &mut ChaCha8Rng| ConvStage {
            conv: Conv::init(store, &format!("{name}.conv{i}"), 3, ci, cout, rng),
            norm: LayerNormWeights::init(store, &format!("{name}.norm{i}"), cout),
        };
        let a = mk(store, 0, cin, rng);
        let b = mk(store, 1, cout, rng);
        Self { stages: [a, b] }
    }

    fn forward<'t, T: Real>(&self, mut x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        for s in &self.stages {
            x = x.conv3d(p.var(s.conv.weight), Some(p.var(s.conv.bias)), 1, 1)?;
            x = s.norm.forward(x, p)?.leaky_relu(LEAKY_SLOPE)?;
        }
        Ok(x)
    }
}

/// A built model: configuration, parameters and the layer graph.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    cfg: VariantConfig,
    pub store: ParamStore<T>,
    encoder: Vec<ConvBlock>,
    down: Vec<Conv>,
    up: Vec<Conv>,
    decoder: Vec<ConvBlock>,
    head: Conv,
    mamba: Vec<(Site, MambaModule)>,
}

/// Builds a variant. Convolution parameters are drawn first from the seed's
/// stream, so two variants with the same seed and widths share them exactly.
pub fn build_variant<T: Real>(cfg: &VariantConfig, seed: u64) -> Result<UNet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let s = cfg.stages();
    let w = &cfg.widths;

    let mut encoder = Vec::with_capacity(s);
    let mut down = Vec::with_capacity(s - 1);
    for l in 0..s {
        if l > 0 {
            down.push(Conv::init(&mut store, &format!("down{l}"), 2, w[l - 1], w[l], &mut rng));
        }
        let cin = if l == 0 { cfg.in_channels } else { w[l] };
        encoder.push(ConvBlock::init(&mut store, &format!("enc{l}"), cin, w[l], &mut rng));
    }
    let mut up = Vec::with_capacity(s - 1);
    let mut decoder = Vec::with_capacity(s - 1);
    for l in 0..s - 1 {
        up.push(Conv::init(&mut store, &format!("up{l}"), 2, w[l + 1], w[l], &mut rng));
        decoder.push(ConvBlock::init(&mut store, &format!("dec{l}"), 2 * w[l], w[l], &mut rng));
    }
    let head = Conv::init(&mut store, "head", 1, w[0], cfg.classes, &mut rng);

    let sites: Vec<Site> = match cfg.variant {
        Variant::Baseline => vec![],
        Variant::SegMambaSkip => (0..s - 1).map(Site::Skip).collect(),
        _ => (0..s).map(Site::Encoder).collect(),
    };
    let scale = residual_scale(sites.len() * MambaLayerWeights::RESIDUAL_BRANCHES);
    let mut mamba = Vec::with_capacity(sites.len());
    for site in sites {
        let (l, name) = match site {
            Site::Encoder(l) => (l, format!("mamba.enc{l}")),
            Site::Skip(l) => (l, format!("mamba.skip{l}")),
        };
        let module = match cfg.variant {
            Variant::SegMamba => MambaModule::Unidirectional(MambaLayerWeights::init(&mut store, &name, w[l], scale, &mut rng)),
            Variant::SegMambaSkip | Variant::PanSegMamba => {
                MambaModule::Bidirectional(BidirWeights::init(&mut store, &name, w[l], [H, W, D], scale, &mut rng))
            }
            Variant::MultiSegMamba => MambaModule::MultiDirectional(MultiDirWeights::init(
                &mut store,
                &name,
                w[l],
                &cfg.directions,
                scale,
                &mut rng,
            )?),
            Variant::Baseline => unreachable!(),
        };
        mamba.push((site, module));
    }
    Ok(UNet {
        cfg: cfg.clone(),
        store,
        encoder,
        down,
        up,
        decoder,
        head,
        mamba,
    })
}

impl<T: Real> UNet<T> {
    pub fn config(&self) -> &VariantConfig {
        &self.cfg
    }

    pub fn mamba_modules(&self) -> &[(Site, MambaModule)] {
        &self.mamba
    }

    /// Total Mamba layers, counting each direction of a bidirectional module.
    pub fn mamba_layer_count(&self) -> usize {
        self.mamba.iter().map(|(_, m)| m.layer_count()).sum()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    pub fn num_mamba_parameters(&self) -> usize {
        self.store.num_elements_with_prefix("mamba.")
    }

    /// Residual branches counted for the init scaling.
    pub fn residual_branch_count(&self) -> usize {
        self.mamba.iter().map(|(_, m)| m.residual_branches()).sum()
    }

    /// Zeroes the residual-branch outputs of every unidirectional or
    /// bidirectional Mamba layer.
    pub fn zero_mamba_residuals(&mut self) {
        for (_, m) in &self.mamba {
            m.zero_residual_outputs(&mut self.store);
        }
    }

    fn module_at(&self, site: Site) -> Option<&MambaModule> {
        self.mamba.iter().find(|(s, _)| *s == site).map(|(_, m)| m)
    }

    /// Logits `[H, W, D, classes]` for a volume `[H, W, D, C_in]`.
    pub fn forward<'t>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let expected = [self.cfg.crop[0], self.cfg.crop[1], self.cfg.crop[2], self.cfg.in_channels];
        if x.shape() != expected {
            return Err(Error::dim("unet forward", &x.shape(), &expected));
        }
        let s = self.cfg.stages();
        let mut skips = Vec::with_capacity(s - 1);
        let mut h = x;
        for l in 0..s {
            if l > 0 {
                let c = &self.down[l - 1];
                h = h.conv3d(p.var(c.weight), Some(p.var(c.bias)), 2, 0)?;
            }
            h = self.encoder[l].forward(h, p)?;
            if let Some(m) = self.module_at(Site::Encoder(l)) {
                h = m.forward(h, p)?;
            }
            if l < s - 1 {
                let skip = match self.module_at(Site::Skip(l)) {
                    Some(m) => m.forward(h, p)?,
                    None => h,
                };
                skips.push(skip);
            }
        }
        for l in (0..s - 1).rev() {
            let c = &self.up[l];
            h = h.conv_transpose3d(p.var(c.weight), Some(p.var(c.bias)))?;
            h = Var::concat_last(&[h, skips[l]])?;
            h = self.decoder[l].forward(h, p)?;
        }
        h.conv3d(p.var(self.head.weight), Some(p.var(self.head.bias)), 1, 0)
    }

    /// Inference forward pass; nothing is recorded for differentiation.
    pub fn predict(&self, volume: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let x = tape.constant(volume.clone());
        let y = self.forward(x, &p)?;
        Ok((*y.value()).clone())
    }
}
