//! Deterministic synthetic segmentation tasks.
//!
//! - `blobs`: non-overlapping balls, one per foreground class, whose
//!   intensity encodes the class. Locally solvable.
//! - `directional-pair`: a bright and a dim box near `h = 0` and a marker
//!   slab at the far end of the H axis. The slab's polarity decides which box
//!   is class 1 and which is class 2, so a voxel's label depends on content
//!   more than half the H extent away.
//! - `gallbladder-like`: a large ellipsoid (class 1) and a small structure
//!   (class 2) jittered around its surface.
//!
//! Images are `[H, W, D, 1]` with additive Gaussian noise. Sample `i` of a
//! spec is a pure function of `(seed, i)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;

pub const MIN_DIM: usize = 8;
/// Minimum fraction of voxels each class must occupy in every sample.
pub const MIN_CLASS_FRACTION: f64 = 0.01;
const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Blobs,
    DirectionalPair,
    GallbladderLike,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Blobs => "blobs",
            TaskKind::DirectionalPair => "directional-pair",
            TaskKind::GallbladderLike => "gallbladder-like",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::Blobs, TaskKind::DirectionalPair, TaskKind::GallbladderLike]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub kind: TaskKind,
    pub dims: [usize; 3],
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::Config(format!("every dimension must be >= {MIN_DIM}, got {:?}", self.dims)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        match self.kind {
            TaskKind::Blobs if !(2..=8).contains(&self.classes) => {
                Err(Error::Config(format!("blobs supports 2..=8 classes, got {}", self.classes)))
            }
            TaskKind::DirectionalPair | TaskKind::GallbladderLike if self.classes != 3 => {
                Err(Error::Config(format!("{} requires exactly 3 classes, got {}", self.kind, self.classes)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[H, W, D, 1]`
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
}

/// Geometry of one directional-pair sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionalLayoutSpec {
    /// Rows `0..object_rows` hold the boxes.
    pub object_rows: usize,
    /// Rows `h - marker_rows..h` hold the marker slab.
    pub marker_rows: usize,
    /// Side of each box in the `(W, D)` plane.
    pub side: usize,
    /// `(w, d)` corners of the bright and the dim box.
    pub bright: [usize; 2],
    pub dim: [usize; 2],
    /// Positive marker: bright box is class 1. Negative: bright is class 2.
    pub positive: bool,
}

pub const BRIGHT: f32 = 1.0;
pub const DIM: f32 = 0.5;
pub const MARKER: f32 = 1.0;

impl DirectionalLayoutSpec {
    pub fn label_at(&self, [h, w, d]: [usize; 3]) -> u8 {
        if h >= self.object_rows {
            return 0;
        }
        let inside = |c: [usize; 2]| w >= c[0] && w < c[0] + self.side && d >= c[1] && d < c[1] + self.side;
        let (bright_class, dim_class) = if self.positive { (1, 2) } else { (2, 1) };
        if inside(self.bright) {
            bright_class
        } else if inside(self.dim) {
            dim_class
        } else {
            0
        }
    }

    /// Noise-free intensity.
    pub fn intensity_at(&self, dims: [usize; 3], [h, w, d]: [usize; 3]) -> f32 {
        if h + self.marker_rows >= dims[0] {
            return if self.positive { MARKER } else { -MARKER };
        }
        if h >= self.object_rows {
            return 0.0;
        }
        let inside = |c: [usize; 2]| w >= c[0] && w < c[0] + self.side && d >= c[1] && d < c[1] + self.side;
        if inside(self.bright) {
            BRIGHT
        } else if inside(self.dim) {
            DIM
        } else {
            0.0
        }
    }
}

fn mix(seed: u64, index: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn each_voxel(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    let [h, w, d] = dims;
    (0..h).flat_map(move |a| (0..w).flat_map(move |b| (0..d).map(move |c| [a, b, c])))
}

/// Marker polarity of sample `index`: alternates with the index so every
/// consecutive pair of samples holds one of each.
pub fn directional_polarity(seed: u64, index: u64) -> bool {
    (index + (seed & 1)) % 2 == 0
}

pub fn directional_layout(spec: &SynthTaskSpec, index: u64) -> Result<DirectionalLayoutSpec> {
    spec.validate()?;
    let [h, w, d] = spec.dims;
    let object_rows = (h / 8).max(1);
    let marker_rows = (h / 16).max(1);
    let need = (MIN_CLASS_FRACTION * (h * w * d) as f64 / object_rows as f64).sqrt().ceil() as usize + 1;
    let side = need.max(2);
    if 2 * side > w.max(d) || side > w.min(d) {
        return Err(Error::Config(format!("dims {:?} too small for two {side}x{side} boxes", spec.dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index, 1));
    let place = |rng: &mut ChaCha8Rng| [rng.random_range(0..=w - side), rng.random_range(0..=d - side)];
    for _ in 0..MAX_REDRAWS {
        let bright = place(&mut rng);
        let dim = place(&mut rng);
        let apart = bright[0] + side <= dim[0] || dim[0] + side <= bright[0] || bright[1] + side <= dim[1] || dim[1] + side <= bright[1];
        if apart {
            return Ok(DirectionalLayoutSpec {
                object_rows,
                marker_rows,
                side,
                bright,
                dim,
                positive: directional_polarity(spec.seed, index),
            });
        }
    }
    Err(Error::Config("could not place non-overlapping boxes".into()))
}

/// Generates sample `index` of `spec`.
pub fn generate(spec: &SynthTaskSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let (clean, labels) = match spec.kind {
        TaskKind::DirectionalPair => {
            let lay = directional_layout(spec, index)?;
            let img: Vec<f32> = each_voxel(dims).map(|v| lay.intensity_at(dims, v)).collect();
            let lab: Vec<u8> = each_voxel(dims).map(|v| lay.label_at(v)).collect();
            (img, lab)
        }
        TaskKind::Blobs => redraw(spec, index, blobs)?,
        TaskKind::GallbladderLike => redraw(spec, index, gallbladder)?,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index, 2));
    let image: Vec<f32> = if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).expect("valid noise");
        clean.iter().map(|&v| v + dist.sample(&mut noise_rng) as f32).collect()
    } else {
        clean
    };
    let labels = LabelVolume::new(dims, labels, spec.classes)?;
    let min = labels.class_fractions().into_iter().fold(f64::INFINITY, f64::min);
    if min < MIN_CLASS_FRACTION {
        return Err(Error::Config(format!("class balance violated: minimum fraction {min}")));
    }
    debug_assert_eq!(image.len(), n);
    Ok(Sample {
        image: Tensor::new(&[dims[0], dims[1], dims[2], 1], image)?,
        labels,
    })
}

type Drawn = (Vec<f32>, Vec<u8>);

/// Draws from `f` until every class covers at least the minimum fraction.
fn redraw(spec: &SynthTaskSpec, index: u64, f: fn(&SynthTaskSpec, &mut ChaCha8Rng) -> Drawn) -> Result<Drawn> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index, 1));
    let n = spec.dims.iter().product::<usize>() as f64;
    for _ in 0..MAX_REDRAWS {
        let (img, lab) = f(spec, &mut rng);
        let mut counts = vec![0usize; spec.classes];
        lab.iter().for_each(|&l| counts[l as usize] += 1);
        if counts.iter().all(|&c| c as f64 / n >= MIN_CLASS_FRACTION) {
            return Ok((img, lab));
        }
    }
    Err(Error::Config(format!("could not satisfy class balance for {:?}", spec.dims)))
}

fn blobs(spec: &SynthTaskSpec, rng: &mut ChaCha8Rng) -> Drawn {
    let dims = spec.dims;
    let m = *dims.iter().min().unwrap() as f64;
    let k = spec.classes - 1;
    let mut balls: Vec<([f64; 3], f64)> = Vec::with_capacity(k);
    let mut tries = 0;
    while balls.len() < k {
        tries += 1;
        if tries % 1000 == 0 {
            // Earlier balls left no room; start over.
            balls.clear();
        }
        let r = rng.random_range(m / 6.0..=m / 4.0);
        let c = [0, 1, 2].map(|a| rng.random_range(r..=dims[a] as f64 - 1.0 - r));
        if balls.iter().all(|(o, ro)| dist(o, &c) > r + ro + 1.0) {
            balls.push((c, r));
        }
    }
    let mut img = Vec::new();
    let mut lab = Vec::new();
    for v in each_voxel(dims) {
        let p = v.map(|x| x as f64);
        let class = balls.iter().position(|(c, r)| dist(c, &p) <= *r).map(|i| i + 1).unwrap_or(0);
        lab.push(class as u8);
        img.push(class as f32 / k as f32);
    }
    (img, lab)
}

fn gallbladder(spec: &SynthTaskSpec, rng: &mut ChaCha8Rng) -> Drawn {
    let dims = spec.dims.map(|d| d as f64);
    let centre = dims.map(|d| d / 2.0 + rng.random_range(-d / 10.0..=d / 10.0));
    let radii = dims.map(|d| d * rng.random_range(0.22..=0.3));
    let dir = {
        let v = [0, 1, 2].map(|_| rng.random_range(-1.0..=1.0f64));
        let n = dist(&v, &[0.0; 3]).max(1e-6);
        v.map(|x| x / n)
    };
    let small_r = (MIN_CLASS_FRACTION * dims.iter().product::<f64>() * 3.0 / (4.0 * std::f64::consts::PI)).cbrt()
        * rng.random_range(1.1..=1.4);
    // centre of the small structure just outside the large surface along `dir`
    let reach = 1.0 / (0..3).map(|a| (dir[a] / radii[a]).powi(2)).sum::<f64>().sqrt();
    let small = [0, 1, 2].map(|a| {
        (centre[a] + dir[a] * (reach + small_r * 0.8) + rng.random_range(-1.0..=1.0))
            .clamp(small_r, dims[a] - 1.0 - small_r)
    });
    let mut img = Vec::new();
    let mut lab = Vec::new();
    for v in each_voxel(spec.dims) {
        let p = v.map(|x| x as f64);
        let in_small = dist(&p, &small) <= small_r;
        let in_large = (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0;
        let (l, i) = if in_small {
            (2, 0.4)
        } else if in_large {
            (1, 0.8)
        } else {
            (0, 0.0)
        };
        lab.push(l);
        img.push(i);
    }
    (img, lab)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}
