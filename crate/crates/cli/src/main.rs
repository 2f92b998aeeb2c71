//! `tcnn`: run-directory driven pipeline for tweaked-CNN landmark regression.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use tcnn::error::Error;
use tcnn::pipeline::{self, RunConfig};
use tcnn::synth::{synth_generate, SynthConfig};
use tcnn::tweak::TweakedModel;

#[derive(Parser, Debug)]
#[command(name = "tcnn", version, about = "Tweaked-CNN facial landmark regression pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (run directory for pipeline commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-pose face dataset.
    Synth {
        #[arg(long, default_value_t = 4400)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        modes: usize,
        #[arg(long, default_value_t = 1.0)]
        jitter: f64,
    },
    /// Train the vanilla network.
    Train {
        /// Annotation file; without it a synthetic dataset is generated in the run directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        /// Synthetic dataset size when no annotation file is given.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        modes: Option<usize>,
    },
    /// Fit the routing mixture on tap features of the training split.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tap: Option<String>,
    },
    /// Per-layer cluster statistics, variance tables and cluster-mean images.
    Analyze {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Fine-tune one head per cluster over the frozen trunk.
    Tweak {
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        augment_target: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Compare vanilla and tweaked models, or score a prediction file.
    Eval {
        /// Prediction file as written by `predict`.
        #[arg(long, requires = "truth")]
        predictions: Option<PathBuf>,
        /// Annotation file with the ground truth for `--predictions`.
        #[arg(long, requires = "predictions")]
        truth: Option<PathBuf>,
        #[arg(long)]
        no_mirror: bool,
    },
    /// Predict landmarks for a PNG image or every record of an annotation file.
    Predict {
        #[arg(long)]
        input: PathBuf,
        /// Use the vanilla network even when a tweaked model exists.
        #[arg(long)]
        vanilla: bool,
        #[arg(long)]
        no_mirror: bool,
        /// Write predictions here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tweak and evaluate for every K in a list.
    Sweepk {
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Collate the run directory into report.md.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownTap(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn run_dir(common: &Common) -> Result<PathBuf, Error> {
    common.out.clone().ok_or_else(|| Error::Config("--out is required".into()))
}

/// Config file if given, else the run directory's snapshot, else defaults;
/// then `--seed`.
fn base_config(common: &Common, run: &Path) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
        None if run.join(pipeline::CONFIG_FILE).exists() => RunConfig::load(run)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn finish(cfg: &RunConfig, run: &Path) -> Result<(), Error> {
    cfg.validate()?;
    cfg.save(run)
}

fn execute(cli: Cli) -> Result<(), Error> {
    let common = &cli.common;
    match cli.command {
        Command::Synth { n, modes, jitter } => {
            let out = run_dir(common)?;
            if n == 0 || modes == 0 {
                return Err(Error::Config("--n and --modes must be positive".into()));
            }
            let seed = match &common.config {
                Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?.seed,
                None => 0,
            };
            let cfg = SynthConfig { count: n, modes, seed: common.seed.unwrap_or(seed), jitter };
            let manifest = synth_generate(&cfg)?.write(&out)?;
            println!("{}\t{}", manifest.count, manifest.checksum);
        }
        Command::Train { data, image_root, epochs, patience, n, modes } => {
            let run = run_dir(common)?;
            let mut cfg = base_config(common, &run)?;
            if data.is_some() {
                cfg.data.annotations = data.map(|p| fs::canonicalize(&p).unwrap_or(p));
            }
            if image_root.is_some() {
                cfg.data.image_root = image_root;
            }
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.patience = patience.unwrap_or(cfg.train.patience);
            cfg.synth.count = n.unwrap_or(cfg.synth.count);
            cfg.synth.modes = modes.unwrap_or(cfg.synth.modes);
            finish(&cfg, &run)?;
            let s = pipeline::stage_train(&cfg, &run)?;
            println!("epochs\t{}\nbest_epoch\t{}\nval_error\t{:.4}", s.epochs, s.best_epoch, s.val_error);
        }
        Command::Cluster { k, tap } => {
            let run = run_dir(common)?;
            let mut cfg = base_config(common, &run)?;
            cfg.cluster.k = k.unwrap_or(cfg.cluster.k);
            cfg.cluster.tap = tap.unwrap_or(cfg.cluster.tap);
            pipeline::load_vanilla(&run)?;
            finish(&cfg, &run)?;
            let s = pipeline::stage_cluster(&cfg, &run)?;
            println!("k\t{}\nsizes\t{:?}\nem_iterations\t{}", s.k, s.sizes, s.em_iterations);
        }
        Command::Analyze { k } => {
            let run = run_dir(common)?;
            let mut cfg = base_config(common, &run)?;
            cfg.analysis.k = k.unwrap_or(cfg.analysis.k);
            pipeline::load_vanilla(&run)?;
            finish(&cfg, &run)?;
            let s = pipeline::stage_analyze(&cfg, &run)?;
            for l in &s.layers {
                println!("{}\t{:.6}", l.tap, l.mean_landmark_variance());
            }
        }
        Command::Tweak { no_augment, augment_target, epochs, patience } => {
            let run = run_dir(common)?;
            let mut cfg = base_config(common, &run)?;
            cfg.tweak.augment &= !no_augment;
            cfg.tweak.augment_target = augment_target.unwrap_or(cfg.tweak.augment_target);
            cfg.tweak.epochs = epochs.unwrap_or(cfg.tweak.epochs);
            cfg.tweak.patience = patience.unwrap_or(cfg.tweak.patience);
            pipeline::load_vanilla(&run)?;
            finish(&cfg, &run)?;
            let s = pipeline::stage_tweak(&cfg, &run)?;
            println!("k\t{}\nsame_rejection\t{:.4}\ncross_rejection\t{:.4}", s.k, s.same_rejection, s.cross_rejection);
        }
        Command::Eval { predictions, truth, no_mirror } => {
            if let (Some(p), Some(t)) = (predictions, truth) {
                let scored = pipeline::score_predictions(&p, &t)?;
                let errors: Vec<f64> = scored.iter().map(|s| s.1).collect();
                let s = tcnn::analysis::summarize_errors(&errors);
                println!("count\t{}\nfailures\t{}\nmean_error\t{:.4}\nmedian_error\t{:.4}", s.count, s.failures, s.mean, s.median);
                return Ok(());
            }
            let run = run_dir(common)?;
            let mut cfg = base_config(common, &run)?;
            cfg.eval.mirror &= !no_mirror;
            finish(&cfg, &run)?;
            let s = pipeline::stage_eval(&cfg, &run)?;
            println!("vanilla\t{:.4}\ntweaked\t{:.4}", s.vanilla.mean, s.tweaked.mean);
            if let Some(m) = s.tweaked_mirror {
                println!("tweaked_mirror\t{:.4}", m.mean);
            }
        }
        Command::Predict { input, vanilla, no_mirror, output } => {
            let run = run_dir(common)?;
            let model = pipeline::load_vanilla(&run)?;
            let tweaked_dir = run.join(pipeline::TWEAKED);
            let tweaked = if !vanilla && tweaked_dir.join("manifest.json").exists() {
                Some(TweakedModel::load(&tweaked_dir)?)
            } else {
                None
            };
            let preds = pipeline::predict_paths(&input, &model, tweaked.as_ref(), !no_mirror)?;
            let text = pipeline::format_predictions(&preds, model.landmark_count());
            match output {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Sweepk { ks } => {
            let run = run_dir(common)?;
            let mut cfg = base_config(common, &run)?;
            cfg.sweep.ks = ks.unwrap_or(cfg.sweep.ks);
            pipeline::load_vanilla(&run)?;
            finish(&cfg, &run)?;
            for r in pipeline::stage_sweepk(&cfg, &run)? {
                println!("{}\t{:.4}\t{}", r.k, r.mean_error, r.total_epochs);
            }
        }
        Command::Report => {
            let run = run_dir(common)?;
            tcnn::report::emit_report(&run)?;
            info!("wrote {}", run.join(tcnn::report::REPORT_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.common.jobs {
        if j == 0 {
            error!("--jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            error!("{e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
