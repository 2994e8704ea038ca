//! Command-line entry point.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

use crate::error::{Error, Result};

macro_rules! overrides {
    ($($field:ident),* $(,)?) => {
        /// Flags overriding the config key of the same name.
        #[derive(Args, Clone, Debug, Default)]
        pub struct Overrides {
            $(
                #[arg(long, value_name = "VALUE", help_heading = "Config keys")]
                pub $field: Option<String>,
            )*
        }

        impl Overrides {
            /// `(key, value)` for every flag given, in key order.
            pub fn pairs(&self) -> Vec<(String, String)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push((stringify!($field).to_string(), x.clone()));
                    }
                )*
                v
            }
        }

        #[cfg(test)]
        const FLAG_KEYS: &[&str] = &[$(stringify!($field)),*];
    };
}

overrides!(
    scales,
    filters,
    channels,
    fusion,
    negatives,
    window,
    batch,
    lr,
    lr_factor,
    lr_step,
    momentum,
    iterations,
    seed,
    checkpoint_interval,
    validation_interval,
    validation_pairs,
    validation_triplets,
    train_list,
    validation_list,
    out_dir,
    width,
    height,
    max_flow,
    flow,
    regions,
    brightness,
    noise,
    contrast_floor,
    radius,
    fb_threshold,
);

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub keys: Overrides,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.keys.pairs())
    }
}

#[derive(Parser, Debug)]
#[command(name = "scalecorr", version, about = "Scale-attention dense correspondence")]
pub struct Cli {
    /// Worker threads for parallel stages (results do not depend on it).
    #[arg(long, global = true, env = "ASCM_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoints and `train_log.csv` to `out_dir`.
    Train(Common),

    /// Dense flow between two images of equal size.
    Flow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Filled flow.
        #[arg(long)]
        out: PathBuf,
        /// Also write the flow after the consistency check, before filling.
        #[arg(long)]
        filtered: Option<PathBuf>,
    },

    /// End-point error of a flow file against ground truth.
    ///
    /// CSV columns: epe, pixels, coverage, epe_masked, masked_pixels.
    /// `epe` averages over pixels valid in both files; `coverage` is that
    /// count over the ground-truth valid count.
    EvalFlow {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// PGM whose non-zero pixels select the masked subset.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// PCK curve from keypoint annotations and predictions.
    ///
    /// Keypoint CSV columns: src_x, src_y, tgt_x, tgt_y, visible, src_w,
    /// src_h, tgt_w, tgt_h. Prediction CSV columns: pred_x, pred_y, one row
    /// per keypoint row. Output columns: alpha, pck.
    EvalPck {
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Comma-separated thresholds; 0.01 to 0.10 by default.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Export per-scale attention weights and the dominant-scale map.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output path prefix.
        #[arg(long)]
        prefix: PathBuf,
    },

    /// Generate a synthetic pair: source, target and ground-truth flow in
    /// `out_dir`.
    Synth(Common),

    /// Score one source pixel against its target window.
    ///
    /// CSV columns: index, row, col, score, best.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
    },

    /// Train single-scale, concatenation and attention variants with one
    /// config and compare held-out top-1 accuracy in `out_dir/ablation.csv`.
    Ablation(Common),
}

/// Runs a parsed command inside a pool of `threads` workers.
pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("`threads` must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(cli.command))
}

/// One-line error report: `error kind=<kind> <message>`.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} {msg}", e.kind())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage {first}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
