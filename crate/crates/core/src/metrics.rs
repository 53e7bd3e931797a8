//! Volumetric segmentation metrics: Dice, IoU and the 95th-percentile
//! Hausdorff distance.
//!
//! Conventions:
//! - both masks empty: Dice 1, HD95 0;
//! - exactly one mask empty: HD95 is undefined and reported as the volume
//!   diagonal (spacing-scaled) with `defined = false`;
//! - a boundary voxel is a foreground voxel with a 6-neighbour that is
//!   background or outside the volume;
//! - percentiles use the nearest rank, the `ceil(0.95·n)`-th smallest value;
//! - distances are in voxels, or in physical units when spacing is given.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PERCENTILE: f64 = 95.0;

/// Integer label per voxel of an `H x W x D` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
    pub classes: usize,
    pub spacing: Option<[f64; 3]>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, classes: usize) -> Result<Self> {
        let v = Self {
            dims,
            labels,
            classes,
            spacing: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        self.spacing = Some(spacing);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if self.labels.len() != n {
            return Err(Error::dim("LabelVolume", &self.dims, &[self.labels.len()]));
        }
        if self.classes == 0 || self.classes > 256 {
            return Err(Error::Config(format!("class count {} out of range", self.classes)));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Config(format!("label {l} outside [0, {})", self.classes)));
        }
        if let Some(s) = self.spacing {
            if s.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("spacing must be positive, got {s:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mask(&self, class: u8) -> Mask {
        Mask {
            dims: self.dims,
            data: self.labels.iter().map(|&l| l == class).collect(),
        }
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Fraction of voxels carrying each class.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.labels.len().max(1) as f64).collect()
    }
}

/// Per-voxel argmax over the last axis of `[H, W, D, K]` logits; ties go to
/// the lowest class id.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<LabelVolume> {
    let s = logits.shape();
    if s.len() != 4 || s[3] == 0 || s[3] > 256 {
        return Err(Error::dim("argmax_labels", s, &[0, 0, 0, 0]));
    }
    let k = s[3];
    let labels = logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new([s[0], s[1], s[2]], labels, k)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::dim("Mask", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn from_points(dims: [usize; 3], points: &[[usize; 3]]) -> Result<Self> {
        let mut m = Self::new(dims, vec![false; dims.iter().product()])?;
        for p in points {
            if (0..3).any(|a| p[a] >= dims[a]) {
                return Err(Error::dim("Mask::from_points", &dims, p));
            }
            let i = m.index(*p);
            m.data[i] = true;
        }
        Ok(m)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn index(&self, [h, w, d]: [usize; 3]) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [_, w, d] = self.dims;
        [i / (w * d), (i / d) % w, i % d]
    }

    /// Foreground voxels 6-adjacent to background or to the volume edge.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let dims = self.dims;
        let mut out = Vec::new();
        for (i, &fg) in self.data.iter().enumerate() {
            if !fg {
                continue;
            }
            let c = self.coords(i);
            let mut edge = false;
            for ax in 0..3 {
                if c[ax] == 0 || c[ax] + 1 == dims[ax] {
                    edge = true;
                    break;
                }
                for delta in [-1isize, 1] {
                    let mut n = c;
                    n[ax] = (n[ax] as isize + delta) as usize;
                    if !self.data[self.index(n)] {
                        edge = true;
                    }
                }
                if edge {
                    break;
                }
            }
            if edge {
                out.push(c);
            }
        }
        out
    }
}

fn check_dims(a: &Mask, b: &Mask, op: &'static str) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::dim(op, &a.dims, &b.dims));
    }
    Ok(())
}

fn overlap(p: &Mask, g: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut np, mut ng) = (0, 0);
    for (&a, &b) in p.data.iter().zip(&g.data) {
        np += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    (inter, np, ng)
}

/// `2|P ∩ GT| / (|P| + |GT|)`; 1 when both are empty.
pub fn dice(p: &Mask, g: &Mask) -> Result<f64> {
    check_dims(p, g, "dice")?;
    let (inter, np, ng) = overlap(p, g);
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// `|P ∩ GT| / |P ∪ GT|`; 1 when both are empty.
pub fn iou(p: &Mask, g: &Mask) -> Result<f64> {
    check_dims(p, g, "iou")?;
    let (inter, np, ng) = overlap(p, g);
    let union = np + ng - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hd95 {
    pub value: f64,
    /// False when exactly one mask is empty; `value` is then the sentinel.
    pub defined: bool,
}

/// Nearest-rank percentile of unsorted values (`pct` in `(0, 100]`).
pub fn nearest_rank_percentile(values: &mut [f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * values.len() as f64).ceil() as usize;
    Some(values[rank.clamp(1, values.len()) - 1])
}

pub fn volume_diagonal(dims: [usize; 3], spacing: Option<[f64; 3]>) -> f64 {
    let s = spacing.unwrap_or([1.0; 3]);
    (0..3).map(|a| (dims[a] as f64 * s[a]).powi(2)).sum::<f64>().sqrt()
}

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries.
pub fn hd95(p: &Mask, g: &Mask, spacing: Option<[f64; 3]>) -> Result<Hd95> {
    check_dims(p, g, "hd95")?;
    let (np, ng) = (p.count(), g.count());
    if np == 0 && ng == 0 {
        return Ok(Hd95 { value: 0.0, defined: true });
    }
    if np == 0 || ng == 0 {
        return Ok(Hd95 {
            value: volume_diagonal(p.dims, spacing),
            defined: false,
        });
    }
    let bp = p.boundary();
    let bg = g.boundary();
    let d_pg = directed_percentile(&bp, &bg, p.dims, spacing);
    let d_gp = directed_percentile(&bg, &bp, p.dims, spacing);
    Ok(Hd95 {
        value: d_pg.max(d_gp),
        defined: true,
    })
}

/// Percentile over `from` of the distance to the nearest point of `to`,
/// via an exact Euclidean distance transform of `to`.
fn directed_percentile(from: &[[usize; 3]], to: &[[usize; 3]], dims: [usize; 3], spacing: Option<[f64; 3]>) -> f64 {
    let field = squared_distance_field(to, dims, spacing.unwrap_or([1.0; 3]));
    let mut d: Vec<f64> = from
        .iter()
        .map(|&[h, w, z]| field[(h * dims[1] + w) * dims[2] + z].sqrt())
        .collect();
    nearest_rank_percentile(&mut d, PERCENTILE).unwrap_or(0.0)
}

/// Squared Euclidean distance from every voxel to the nearest seed, by
/// separable lower-envelope passes along each axis.
pub fn squared_distance_field(seeds: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut f = vec![f64::INFINITY; n];
    for &[h, w, d] in seeds {
        f[(h * dims[1] + w) * dims[2] + d] = 0.0;
    }
    let st = [dims[1] * dims[2], dims[2], 1];
    for ax in 0..3 {
        let len = dims[ax];
        let w2 = spacing[ax] * spacing[ax];
        let (o1, o2) = match ax {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for i in 0..dims[o1] {
            for j in 0..dims[o2] {
                let base = i * st[o1] + j * st[o2];
                for k in 0..len {
                    line[k] = f[base + k * st[ax]];
                }
                lower_envelope(&line, &mut out, w2);
                for k in 0..len {
                    f[base + k * st[ax]] = out[k];
                }
            }
        }
    }
    f
}

/// 1-D squared distance transform `out[q] = min_p f[p] + w2·(q − p)²`.
fn lower_envelope(f: &[f64], out: &mut [f64], w2: f64) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    // intersection abscissa of parabolas rooted at p and q (p < q)
    let meet = |p: usize, q: usize| -> f64 {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf))
    };
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = meet(p, q);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = f[v[k]] + w2 * dq * dq;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// True when the class occurs in the prediction or the ground truth.
    pub present: bool,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub hd95_defined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `"voxel"` or `"mm"`.
    pub distance_unit: String,
    pub classes: Vec<ClassMetrics>,
    /// Mean over present classes; `None` when no class is present.
    pub mean_dice: Option<f64>,
    pub mean_hd95: Option<f64>,
}

/// Per-class one-vs-rest Dice and HD95 for foreground classes `1..K`.
/// Spacing comes from the ground truth when present.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    pred.validate()?;
    gt.validate()?;
    if pred.dims != gt.dims {
        return Err(Error::dim("evaluate", &pred.dims, &gt.dims));
    }
    if pred.classes != gt.classes {
        return Err(Error::Config(format!(
            "class sets differ: prediction has {}, ground truth has {}",
            pred.classes, gt.classes
        )));
    }
    let spacing = gt.spacing.or(pred.spacing);
    let mut classes = Vec::with_capacity(gt.classes.saturating_sub(1));
    for k in 1..gt.classes {
        let (p, g) = (pred.mask(k as u8), gt.mask(k as u8));
        let h = hd95(&p, &g, spacing)?;
        classes.push(ClassMetrics {
            class: k,
            present: p.count() + g.count() > 0,
            dice: dice(&p, &g)?,
            iou: iou(&p, &g)?,
            hd95: h.value,
            hd95_defined: h.defined,
        });
    }
    let present: Vec<&ClassMetrics> = classes.iter().filter(|c| c.present).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        (!present.is_empty()).then(|| present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64)
    };
    Ok(MetricsReport {
        distance_unit: if spacing.is_some() { "mm" } else { "voxel" }.into(),
        mean_dice: mean(|c| c.dice),
        mean_hd95: mean(|c| c.hd95),
        classes,
    })
}
