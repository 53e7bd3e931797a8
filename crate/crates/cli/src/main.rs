use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxmamba::synth::{SynthTaskSpec, TaskKind};
use voxmamba_cli::dataset::Split;
use voxmamba_cli::{
    cmd_bench, cmd_eval, cmd_gen, cmd_train, exit_code, resolve_out_dir, with_threads, BenchArgs, EvalArgs,
    EvalSource, GenArgs, RunConfig, TrainOptions, EXIT_OK, EXIT_VALIDATION, OUT_ENV,
};

#[derive(Parser)]
#[command(name = "voxmamba", version, about = "Mamba-augmented 3-D U-Nets on synthetic volumes")]
struct Cli {
    /// Worker threads (default: all cores). Use 1 for bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Gen {
        /// blobs | directional-pair | gallbladder-like
        #[arg(long)]
        task: TaskKind,
        /// Edge length of a cubic volume, or H,W,D.
        #[arg(long, value_delimiter = ',', default_value = "32")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: $VOXMAMBA_OUT).
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Train from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Continue from last.vxck in the output directory.
        #[arg(long)]
        resume: bool,
        /// Run at most this many epochs now (continue later with --resume).
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or saved predictions) on a dataset split.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of predicted label volumes laid out like the dataset.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Report path (default: $VOXMAMBA_OUT/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the sequential and chunked scans over a range of lengths.
    Bench {
        #[arg(long, default_value_t = 10)]
        min_log2: u32,
        #[arg(long, default_value_t = 20)]
        max_log2: u32,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        state: usize,
        #[arg(long, default_value_t = voxmamba::ssm::DEFAULT_CHUNK)]
        chunk: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> voxmamba::Result<()> {
    match cli.command {
        Command::Gen { task, dims, n, classes, noise, seed, out } => {
            let dims = match dims.as_slice() {
                &[d] => [d; 3],
                &[h, w, d] => [h, w, d],
                other => return Err(voxmamba::Error::Config(format!("--dims takes 1 or 3 values, got {other:?}"))),
            };
            let args = GenArgs { spec: SynthTaskSpec { kind: task, dims, classes, noise, seed }, n, out: resolve_out_dir(out) };
            let m = with_threads(cli.threads, || cmd_gen(&args))??;
            println!(
                "wrote {} train / {} val / {} test pairs to {}",
                m.train.len(),
                m.val.len(),
                m.test.len(),
                args.out.display()
            );
        }
        Command::Train { config, resume, stop_after, out } => {
            let cfg = RunConfig::load(&config)?;
            let opts = TrainOptions { resume, out_dir: out, stop_after };
            let s = with_threads(cli.threads, || cmd_train(&cfg, &opts))??;
            for r in &s.records {
                println!(
                    "epoch {:>3}  lr {:.3e}  loss {:.5}  val_dice {}",
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    r.val_dice.map_or("-".into(), |d| format!("{d:.4}"))
                );
            }
            println!("checkpoints in {}", s.out_dir.display());
        }
        Command::Eval { checkpoint, predictions, data, split, out } => {
            let source = match (checkpoint, predictions) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                (None, None) => unreachable!("clap enforces one source"),
            };
            let out = out.unwrap_or_else(|| resolve_out_dir(None).join("report.json"));
            let args = EvalArgs { source, data, split, out: Some(out.clone()) };
            let r = with_threads(cli.threads, || cmd_eval(&args))??;
            for c in &r.classes {
                println!(
                    "class {}  dice {}  hd95 {}",
                    c.class,
                    c.mean_dice.map_or("-".into(), |d| format!("{d:.4}")),
                    c.mean_hd95.map_or("-".into(), |d| format!("{d:.3}"))
                );
            }
            println!(
                "mean     dice {}  hd95 {}  ({})",
                r.mean_dice.map_or("-".into(), |d| format!("{d:.4}")),
                r.mean_hd95.map_or("-".into(), |d| format!("{d:.3}")),
                r.distance_unit
            );
            println!("report written to {}", out.display());
        }
        Command::Bench { min_log2, max_log2, reps, channels, state, chunk, out } => {
            let args = BenchArgs { min_log2, max_log2, reps, channels, state, chunk, seed: 0 };
            let r = with_threads(cli.threads, || cmd_bench(&args))??;
            print!("{}", r.table());
            if let Some(out) = out {
                std::fs::write(out, serde_json::to_vec_pretty(&r)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
