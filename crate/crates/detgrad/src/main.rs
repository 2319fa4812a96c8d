use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use detgrad::commands::{
    cmd_calibrate, cmd_dropout, cmd_flops, cmd_fuse, cmd_gradients, cmd_meta_eval,
    cmd_meta_train, cmd_synth, CalibrateArgs, DropoutArgs, FlopsArgs, FuseArgs, GlobalOpts,
    GradientArgs, MetaEvalArgs, MetaTrainArgs, SynthArgs,
};

/// Gradient-based uncertainty metrics for anchor-based object detectors.
#[derive(Parser)]
#[command(name = "detgrad", version)]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// On-disk format version to read and write.
    #[arg(long, global = true, default_value_t = 1)]
    format_version: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (injected feature signal or a physical toy head).
    Synth {
        /// Corpus kind: "injected" or "physical".
        #[arg(long, default_value = "injected")]
        kind: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 150)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Separation of the injected gradient-feature block.
        #[arg(long, default_value_t = 3.5)]
        signal: f64,
        /// Separation of the injected MC-dropout block.
        #[arg(long, default_value_t = 2.5)]
        mc_signal: f64,
        /// Logit-scale noise on the detector score.
        #[arg(long, default_value_t = 2.2)]
        score_noise: f64,
        /// Logit-scale overconfidence shift on the score.
        #[arg(long, default_value_t = 1.6)]
        score_shift: f64,
        /// Head family of the physical corpus.
        #[arg(long, default_value = "yolo")]
        head: String,
        /// Anchor slots per cell of the physical corpus.
        #[arg(long, default_value_t = 2)]
        slots: usize,
    },
    /// Compute per-box gradient uncertainty features through the conv head.
    Gradients {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score pre-filter before feature computation.
        #[arg(long, default_value_t = 1e-4)]
        prefilter: f64,
        #[arg(long, default_value_t = 0.5)]
        eps_iou: f64,
    },
    /// Compute MC-dropout uncertainty features.
    Dropout {
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        prefilter: f64,
        #[arg(long, default_value_t = 0.5)]
        eps_iou: f64,
    },
    /// Train a meta classifier or meta regressor on feature CSVs.
    MetaTrain {
        /// One or more feature CSVs (columns are merged by box).
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        /// Feature subset: score, G, norms2, norms12, MC, G+MC.
        #[arg(long)]
        source: String,
        /// "classify" (TP/FP) or "regress" (IoU).
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        estimators: usize,
        #[arg(long, default_value_t = 6)]
        depth: usize,
        #[arg(long, default_value_t = 0.3)]
        learning_rate: f64,
    },
    /// Image-wise cross-validated evaluation of meta models.
    MetaEval {
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        source: Vec<String>,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write out-of-fold predictions (single source only).
        #[arg(long)]
        out_preds: Option<PathBuf>,
    },
    /// Reliability bins and calibration errors for score vs meta classifier.
    Calibrate {
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long, default_value = "G")]
        source: String,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline vs MetaFusion decision sweeps (mAP or FP/FN grids).
    Fuse {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        source: Vec<String>,
        /// "map" (0:0.025:1) or "fpfn" (0:1e-4:1).
        #[arg(long, default_value = "map")]
        grid: String,
        /// Designated class for the FP/FN sweep.
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify the cost model (micro-kernels, scaling fits, bounds).
    Flops {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> detgrad::Result<()> {
    let cli = Cli::parse();
    let opts = GlobalOpts {
        seed: cli.seed,
        threads: cli.threads,
        format_version: cli.format_version,
    };
    opts.init()?;
    match cli.command {
        Command::Synth {
            kind,
            out_dir,
            images,
            classes,
            signal,
            mc_signal,
            score_noise,
            score_shift,
            head,
            slots,
        } => cmd_synth(
            &opts,
            &SynthArgs {
                kind,
                out_dir,
                images,
                classes,
                signal,
                mc_signal,
                score_noise,
                score_shift,
                head,
                slots,
            },
        ),
        Command::Gradients { head, inputs, detections, out, prefilter, eps_iou } => {
            cmd_gradients(&opts, &GradientArgs { head, inputs, detections, out, prefilter, eps_iou })
        }
        Command::Dropout { head, inputs, detections, out, rate, samples, prefilter, eps_iou } => {
            cmd_dropout(
                &opts,
                &DropoutArgs { head, inputs, detections, out, rate, samples, prefilter, eps_iou },
            )
        }
        Command::MetaTrain { features, source, task, out, estimators, depth, learning_rate } => {
            cmd_meta_train(
                &opts,
                &MetaTrainArgs { features, source, task, out, estimators, depth, learning_rate },
            )
        }
        Command::MetaEval { features, source, task, folds, out, out_preds } => cmd_meta_eval(
            &opts,
            &MetaEvalArgs { features, sources: source, task, folds, out, out_preds },
        ),
        Command::Calibrate { features, source, folds, bins, out } => {
            cmd_calibrate(&opts, &CalibrateArgs { features, source, folds, bins, out })
        }
        Command::Fuse { detections, features, source, grid, class, folds, out } => cmd_fuse(
            &opts,
            &FuseArgs { detections, features, sources: source, grid, class, folds, out },
        ),
        Command::Flops { out } => cmd_flops(&opts, &FlopsArgs { out }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
