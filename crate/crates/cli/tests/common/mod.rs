#![allow(dead_code)]

use std::path::{Path, PathBuf};

use voxmamba::synth::{SynthTaskSpec, TaskKind};
use voxmamba::train::OptimizerKind;
use voxmamba::unet::{Variant, VariantConfig};
use voxmamba_cli::config::OptimizerSettings;
use voxmamba_cli::{cmd_gen, GenArgs, Manifest, RunConfig};

pub fn gen(dir: &Path, kind: TaskKind, side: usize, n: usize, noise: f64, seed: u64) -> Manifest {
    let spec = SynthTaskSpec { kind, dims: [side; 3], classes: 3, noise, seed };
    cmd_gen(&GenArgs { spec, n, out: dir.to_path_buf() }).unwrap()
}

pub fn run_config(data: &Path, out: PathBuf, variant: Variant, widths: &[usize], side: usize) -> RunConfig {
    RunConfig {
        data: data.to_path_buf(),
        out_dir: Some(out),
        seed: 5,
        epochs: 2,
        batch_size: 2,
        model: VariantConfig { widths: widths.to_vec(), crop: [side; 3], ..VariantConfig::desk(variant) },
        optimizer: OptimizerSettings { kind: OptimizerKind::RAdam, lr: 1e-2, ..Default::default() },
    }
}
