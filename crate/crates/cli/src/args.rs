use std::path::PathBuf;

use bibq_core::{LossReference, QuantizerKind};
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_clip, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "bibq", version, about = "Bitwise information bottleneck quantization of activation dumps")]
pub struct Cli {
    /// Run configuration file; flags given on the command line override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-layer work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer activation histograms and per-bit rate-of-one tables.
    Stats(RunArgs),
    /// Threshold sweep over the penalty grid; writes schemes, traces and a summary.
    Sweep(RunArgs),
    /// Best-subset oracle against the LASSO path and top-bit truncation.
    Oracle {
        #[command(flatten)]
        run: RunArgs,
        /// Largest support size to report (default: D).
        #[arg(long)]
        eta: Option<usize>,
    },
    /// Operation and memory estimates against the 32-bit baseline.
    Efficiency {
        /// Bit widths to tabulate, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "scheme")]
        bits: Vec<f64>,
        /// Scheme files whose effective rates are averaged into one row.
        #[arg(long, num_args = 1..)]
        scheme: Vec<PathBuf>,
    },
    /// Applies scheme files to every sample and writes the reconstructed dataset.
    Reconstruct {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding scheme_layer_<l>.txt for every layer.
        #[arg(long)]
        schemes: PathBuf,
    },
    /// Writes a four-layer synthetic rectified-sparse dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prints the effective configuration in config-file form.
    Config(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Dataset directory, manifest file or single-layer .npy file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Initial quantizer: clip_scale or rounding.
    #[arg(long, value_parser = parse_kind)]
    pub init_quantizer: Option<QuantizerKind>,
    /// Bit depth D of the initial quantizer.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Clipping rule: a percentile of |x| such as 99.9, or exact-max.
    #[arg(long)]
    pub clip: Option<String>,
    /// PSNR-loss threshold T in dB.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lambda_min_factor: Option<f64>,
    #[arg(long)]
    pub lambda_max_factor: Option<f64>,
    #[arg(long)]
    pub lambda_points: Option<usize>,
    /// Number of leading samples used for fitting.
    #[arg(long)]
    pub n_fit: Option<usize>,
    /// Constrain coefficients to be nonnegative.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub nonnegative: Option<bool>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reference for the PSNR loss: initial or peak.
    #[arg(long, value_parser = parse_reference)]
    pub loss_reference: Option<LossReference>,
}

fn parse_kind(s: &str) -> std::result::Result<QuantizerKind, String> {
    QuantizerKind::from_name(s).ok_or_else(|| format!("expected clip_scale or rounding, got `{s}`"))
}

fn parse_reference(s: &str) -> std::result::Result<LossReference, String> {
    LossReference::from_name(s).ok_or_else(|| format!("expected initial or peak, got `{s}`"))
}

impl RunArgs {
    pub fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.init_quantizer {
            cfg.quantizer = v;
        }
        if let Some(v) = self.bits {
            cfg.bits = v;
        }
        if let Some(v) = &self.clip {
            cfg.clip = parse_clip(v).map_err(CliError::Usage)?;
        }
        if let Some(v) = self.threshold {
            cfg.threshold_db = v;
        }
        if let Some(v) = self.lambda_min_factor {
            cfg.grid.min_factor = v;
        }
        if let Some(v) = self.lambda_max_factor {
            cfg.grid.max_factor = v;
        }
        if let Some(v) = self.lambda_points {
            cfg.grid.points = v;
        }
        if let Some(v) = self.n_fit {
            cfg.n_fit = v;
        }
        if let Some(v) = self.nonnegative {
            cfg.nonnegative = v;
        }
        if let Some(v) = &self.out {
            cfg.output = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.loss_reference {
            cfg.loss_reference = v;
        }
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }
}
