//! Library side of the `voxmamba` command: each subcommand is a plain
//! function so it can be driven from tests without spawning a process.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod train;

use std::path::PathBuf;

pub use bench::{cmd_bench, BenchArgs, BenchReport};
pub use config::RunConfig;
pub use dataset::{cmd_gen, GenArgs, Manifest};
pub use eval::{cmd_eval, EvalArgs, EvalReport, EvalSource};
pub use train::{cmd_train, TrainOptions, TrainSummary};

use voxmamba::Error;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "VOXMAMBA_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_DIVERGENCE,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => EXIT_IO,
        Error::Dimension { .. }
        | Error::Contract { .. }
        | Error::SingularDiscretization { .. }
        | Error::Config(_) => EXIT_VALIDATION,
    }
}

/// Explicit directory, else `$VOXMAMBA_OUT`, else `./voxmamba-out`.
pub fn resolve_out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("voxmamba-out"))
}

/// Runs `f` on a dedicated pool of `threads` workers (all cores if `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, Error> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
