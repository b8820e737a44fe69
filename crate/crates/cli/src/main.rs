//! `volseg`: synthetic data, preprocessing, distance transforms, training,
//! inference, evaluation and gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "volseg", version, about = "Fractured-bone CT segmentation toolkit")]
struct Cli {
    /// Log level: error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

/// Flat `key=value` configuration plus command-line overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file of `key=value` lines
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic fractured-bone volumes with labels
    ///
    /// Config keys: seed, count, extents (voxels), spacing (mm), bodies,
    /// radius_mm (mm,mm), gaps, gap_width_mm (mm,mm), shell_voxels (voxels),
    /// shell_intensity, cancellous_intensity, soft_tissue_intensity,
    /// noise_std (window units), hu_window (HU,HU).
    Synth {
        /// Synthetic spec file (`key=value`)
        #[arg(long, visible_alias = "spec", value_name = "FILE")]
        config: Option<PathBuf>,
        /// Override one spec key (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Number of cases; case i uses seed + i [count]
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Output directory for `<case>_image.vol`, `<case>_label.vol` and `manifest.txt`
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Clamp, window and resample a HU volume (and optionally its label)
    ///
    /// Config keys: hu_min (HU), hu_max (HU), target_spacing (mm or mm,mm,mm).
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input intensity volume in HU (VOL1)
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        /// Output windowed volume, values in [0, 1] (VOL1 f32)
        #[arg(long, value_name = "FILE")]
        out_image: PathBuf,
        /// Input binary label volume (VOL1 u8)
        #[arg(long, value_name = "FILE", requires = "out_label")]
        label: Option<PathBuf>,
        /// Output label resampled by nearest neighbour (VOL1 u8)
        #[arg(long, value_name = "FILE", requires = "label")]
        out_label: Option<PathBuf>,
    },
    /// Signed distance field of a binary mask, in mm (negative inside)
    Sdt {
        /// Binary mask (VOL1 u8)
        #[arg(long, value_name = "FILE")]
        mask: PathBuf,
        /// Output field in mm (VOL1 f32)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train a network on `<case>_image.vol` / `<case>_label.vol` pairs
    ///
    /// Config keys: preprocessing (hu_min, hu_max, target_spacing),
    /// network (base_width, csa_levels, csa_k_size, csa_channel_divisor,
    /// csa_sigma1, csa_sigma2, bn_eps, bn_momentum, in_channels, classes),
    /// training (initial_lr, lr_min, beta1, beta2, adam_eps, batch_size,
    /// max_epochs, loss_mode, lambda, surface_reduction, dice_smooth, seed,
    /// patch_size (voxels), patch_overlap (voxels), foreground_probability,
    /// val_every (epochs)) and train_ratio (fraction of cases for training).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of raw HU image / label pairs
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Output directory for manifest.txt, loss.csv, validation.csv and checkpoints
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// dice-only, surface-only or combined [loss_mode]
        #[arg(long, value_name = "MODE")]
        loss_mode: Option<String>,
        /// Seed for initialisation, sampling and the split [seed]
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Number of epochs [max_epochs]
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Plain skip connections instead of cross-scale attention [csa_levels=none]
        #[arg(long)]
        no_csa: bool,
    },
    /// Segment a HU volume with a trained checkpoint
    ///
    /// Config keys: hu_min (HU), hu_max (HU), target_spacing (mm),
    /// patch_size (voxels), patch_overlap (voxels). Patch settings default to
    /// those stored in the checkpoint.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train`
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Input intensity volume in HU (VOL1)
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output label volume at the target spacing (VOL1 u8)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// DSC, ASSD (mm) and 95% Hausdorff distance (mm) per case, as CSV
    ///
    /// Label files with the same name in both directories are paired.
    Evaluate {
        /// Directory of predicted label volumes
        #[arg(long, value_name = "DIR")]
        pred_dir: PathBuf,
        /// Directory of ground-truth label volumes
        #[arg(long, value_name = "DIR")]
        truth_dir: PathBuf,
        /// Write the CSV here instead of standard output
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable op
    Gradcheck {
        /// Seed for the random test points
        #[arg(long, default_value_t = 7, value_name = "N")]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth {
            config,
            overrides,
            count,
            out_dir,
        } => commands::synth(&ConfigArgs { config, overrides }, count, &out_dir),
        Command::Preprocess {
            cfg,
            image,
            out_image,
            label,
            out_label,
        } => commands::preprocess(&cfg, &image, &out_image, label.as_deref().zip(out_label.as_deref())),
        Command::Sdt { mask, out } => commands::sdt(&mask, &out),
        Command::Train {
            cfg,
            data_dir,
            out_dir,
            loss_mode,
            seed,
            epochs,
            no_csa,
        } => commands::train(&cfg, &data_dir, &out_dir, loss_mode, seed, epochs, no_csa),
        Command::Infer {
            cfg,
            checkpoint,
            input,
            out,
        } => commands::infer(&cfg, &checkpoint, &input, &out),
        Command::Evaluate { pred_dir, truth_dir, out } => commands::evaluate(&pred_dir, &truth_dir, out.as_deref()),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
