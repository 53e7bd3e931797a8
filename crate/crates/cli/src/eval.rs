//! `eval`: per-volume and aggregate metrics for a checkpoint (or for label
//! volumes already on disk) over one dataset split.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use voxmamba::checkpoint::Checkpoint;
use voxmamba::metrics::{argmax_labels, evaluate, MetricsReport};
use voxmamba::unet::build_variant;
use voxmamba::volume::Volume;
use voxmamba::{Error, Result};

use crate::dataset::{load_split, Manifest, Split};

#[derive(Clone, Debug)]
pub enum EvalSource {
    /// Predict with the model stored in a checkpoint.
    Checkpoint(PathBuf),
    /// Read predicted label volumes from a directory mirroring the dataset
    /// layout (same relative paths as the ground-truth label files).
    Predictions(PathBuf),
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub source: EvalSource,
    pub data: PathBuf,
    pub split: Split,
    /// Report file; nothing is written if `None`.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub index: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    /// Mean over volumes where the class is present.
    pub mean_dice: Option<f64>,
    /// Mean over volumes where HD95 is defined.
    pub mean_hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub distance_unit: String,
    pub volumes: Vec<VolumeReport>,
    pub classes: Vec<ClassSummary>,
    /// Mean over volumes of each volume's mean foreground Dice.
    pub mean_dice: Option<f64>,
    pub mean_hd95: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (manifest, root) = Manifest::load(&args.data)?;
    let classes = manifest.spec.classes;
    let pairs = load_split(&manifest, &root, args.split)?;

    let mut volumes = Vec::with_capacity(pairs.len());
    match &args.source {
        EvalSource::Checkpoint(path) => {
            let ck = Checkpoint::<f32>::read(path)?;
            if ck.config.crop != manifest.spec.dims || ck.config.classes != classes {
                return Err(Error::Config(format!(
                    "checkpoint expects crop {:?} with {} classes, dataset has {:?} with {classes}",
                    ck.config.crop, ck.config.classes, manifest.spec.dims
                )));
            }
            let mut model = build_variant::<f32>(&ck.config, ck.meta.seed)?;
            ck.restore_model(&mut model)?;
            for p in &pairs {
                let pred = argmax_labels(&model.predict(&p.image)?)?;
                volumes.push(VolumeReport { index: p.index, metrics: evaluate(&pred, &p.labels)? });
            }
        }
        EvalSource::Predictions(dir) => {
            for (p, e) in pairs.iter().zip(manifest.entries(args.split)) {
                let pred = Volume::read(dir.join(&e.labels))?.into_labels(classes)?;
                volumes.push(VolumeReport { index: p.index, metrics: evaluate(&pred, &p.labels)? });
            }
        }
    }

    let class_ids: Vec<usize> = (1..classes).collect();
    let summaries = class_ids
        .iter()
        .map(|&c| {
            let rows = volumes.iter().filter_map(|v| v.metrics.classes.iter().find(|m| m.class == c));
            ClassSummary {
                class: c,
                mean_dice: mean(rows.clone().filter(|m| m.present).map(|m| m.dice)),
                mean_hd95: mean(rows.filter(|m| m.hd95_defined).map(|m| m.hd95)),
            }
        })
        .collect();
    let report = EvalReport {
        split: format!("{:?}", args.split).to_lowercase(),
        distance_unit: volumes
            .first()
            .map(|v| v.metrics.distance_unit.clone())
            .unwrap_or_else(|| "voxel".into()),
        mean_dice: mean(volumes.iter().filter_map(|v| v.metrics.mean_dice)),
        mean_hd95: mean(volumes.iter().filter_map(|v| v.metrics.mean_hd95)),
        classes: summaries,
        volumes,
    };
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}
