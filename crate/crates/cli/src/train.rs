//! `train`: fit a variant on a generated dataset, logging one JSON line per
//! epoch and keeping `last.vxck` (every epoch) and `best.vxck` (best
//! validation Dice).

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxmamba::checkpoint::{Checkpoint, CheckpointMeta};
use voxmamba::metrics::{argmax_labels, evaluate};
use voxmamba::train::{train_step, Example, LinearSchedule, OptimizerState};
use voxmamba::unet::{build_variant, UNet};
use voxmamba::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{load_split, Manifest, Pair, Split};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.vxck";
pub const BEST_CHECKPOINT: &str = "best.vxck";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `last.vxck` in the output directory if it exists.
    pub resume: bool,
    /// Overrides the config's `out_dir`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many epochs in this invocation; the schedule still
    /// spans the configured total, so a later `resume` continues it.
    pub stop_after: Option<usize>,
}

/// One line of `loss_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub records: Vec<EpochRecord>,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn to_examples(pairs: &[Pair]) -> Vec<Example<f32>> {
    pairs
        .iter()
        .map(|p| Example { image: p.image.clone(), labels: p.labels.labels_usize() })
        .collect()
}

/// Mean foreground Dice over `pairs`; classes absent from both prediction
/// and ground truth are left out of each per-volume mean.
pub fn mean_dice(model: &UNet<f32>, pairs: &[Pair]) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for p in pairs {
        let logits = model.predict(&p.image)?;
        let pred = argmax_labels(&logits)?;
        if let Some(d) = evaluate(&pred, &p.labels)?.mean_dice {
            scores.push(d);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let (manifest, root) = Manifest::load(&cfg.data)?;
    if manifest.spec.dims != cfg.model.crop {
        return Err(Error::Config(format!(
            "dataset dims {:?} differ from model crop {:?}",
            manifest.spec.dims, cfg.model.crop
        )));
    }
    if manifest.spec.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            manifest.spec.classes, cfg.model.classes
        )));
    }
    if manifest.train.is_empty() {
        return Err(Error::Config("dataset has no training pairs".into()));
    }
    let train_pairs = load_split(&manifest, &root, Split::Train)?;
    let val_pairs = load_split(&manifest, &root, Split::Val)?;
    let train = to_examples(&train_pairs);

    let out = crate::resolve_out_dir(opts.out_dir.clone().or_else(|| cfg.out_dir.clone()));
    let mut model = build_variant::<f32>(&cfg.model, cfg.seed)?;
    let mut state = OptimizerState::for_model(&model);
    let mut meta = CheckpointMeta { seed: cfg.seed, ..Default::default() };
    let mut records = Vec::new();
    let log_path = out.join(LOSS_LOG);

    let last = out.join(LAST_CHECKPOINT);
    if opts.resume && last.exists() {
        let ck = Checkpoint::<f32>::read(&last)?;
        if ck.meta.seed != cfg.seed {
            return Err(Error::Config(format!("checkpoint seed {} differs from config seed {}", ck.meta.seed, cfg.seed)));
        }
        ck.restore_model(&mut model)?;
        state = ck
            .restore_optimizer(&model)?
            .ok_or_else(|| Error::Config("last checkpoint has no optimizer state".into()))?;
        meta = ck.meta;
        records = read_loss_log(&log_path)?;
        records.truncate(meta.epoch);
        if records.len() != meta.epoch {
            return Err(Error::Config(format!(
                "loss log has {} epochs but checkpoint is at epoch {}",
                records.len(),
                meta.epoch
            )));
        }
    }

    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    let mut log = OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)?;
    for r in &records {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
    }

    let opt = cfg.optimizer.optimizer();
    let schedule = LinearSchedule { base: cfg.optimizer.lr, total_epochs: cfg.epochs };
    let mut best_epoch = records
        .iter()
        .filter(|r| r.val_dice.is_some() && r.val_dice == meta.best_val_dice)
        .map(|r| r.epoch)
        .last();
    let end = opts.stop_after.map_or(cfg.epochs, |n| cfg.epochs.min(meta.epoch + n));
    for epoch in meta.epoch..end {
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut losses = vec![0.0; train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let exs: Vec<&Example<f32>> = batch.iter().map(|&i| &train[i]).collect();
            let l = train_step(&mut model, &exs, &opt, &mut state, lr)?;
            for (&i, v) in batch.iter().zip(l) {
                losses[i] = v;
            }
        }
        // Summed in dataset order so the value does not depend on batching.
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_dice = mean_dice(&model, &val_pairs)?;
        let rec = EpochRecord { epoch, lr, train_loss, val_dice };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        log.flush()?;
        records.push(rec);

        meta.epoch = epoch + 1;
        meta.step = state.step;
        let improved = match (val_dice, meta.best_val_dice) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            meta.best_val_dice = val_dice;
            best_epoch = Some(epoch);
            Checkpoint::capture(&model, None, meta.clone()).write(out.join(BEST_CHECKPOINT))?;
        }
        Checkpoint::capture(&model, Some(&state), meta.clone()).write(&last)?;
    }
    if !out.join(BEST_CHECKPOINT).exists() {
        // No validation signal at all: the final weights stand in for "best".
        Checkpoint::capture(&model, None, meta.clone()).write(out.join(BEST_CHECKPOINT))?;
    }
    Ok(TrainSummary {
        out_dir: out,
        epochs_run: records.len(),
        best_epoch,
        best_val_dice: meta.best_val_dice,
        records,
    })
}
