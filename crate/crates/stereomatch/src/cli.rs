//! Command-line interface: `infer`, `train`, `eval`, `bench`, `selfcheck`.
//!
//! Exit codes: 0 success, 1 usage errors, 2 I/O or file-format errors,
//! 3 numeric failures (non-finite outputs).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::ImagePair;
use crate::error::{Error, Result};
use crate::io::checkpoint::{load_model, Checkpoint};
use crate::io::image::{load_image, save_disparity_png};
use crate::io::pfm::{read_pfm, write_pfm};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{ModelConfig, RolloutOptions, StereoModel};
use crate::training::{train, TrainConfig};
use crate::update::IterationSchedule;

#[derive(Parser)]
#[command(
    name = "stereomatch",
    version,
    about = "Recurrent stereo matching: disparity inference, toy training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a disparity map for a rectified image pair.
    Infer(InferArgs),
    /// Train a toy-scale model on synthetic stereo data.
    Train(TrainArgs),
    /// Compare predicted PFM disparity maps against ground truth.
    Eval(EvalArgs),
    /// Report parameter counts, per-stage MAC counts, and wall time.
    Bench(BenchArgs),
    /// Run the built-in oracle and gradient-check suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Checkpoint to load weights (and architecture) from.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Refinement levels (1-3); must match the checkpoint when both given.
    #[arg(long)]
    levels: Option<usize>,
    /// Feature resolution divisor (4 or 8).
    #[arg(long)]
    resolution: Option<usize>,
    /// Share one backbone between correlation and context features.
    #[arg(long)]
    shared_backbone: bool,
    /// Seed for randomly initialized weights (no checkpoint).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelFlags {
    fn build(&self) -> Result<StereoModel<f32>> {
        match &self.ckpt {
            Some(path) => {
                let (model, ckpt) = load_model(path)?;
                self.check_conflicts(&ckpt)?;
                Ok(model)
            }
            None => {
                let mut cfg = ModelConfig::toy();
                if let Some(l) = self.levels {
                    cfg.encoder.levels = l;
                }
                if let Some(r) = self.resolution {
                    cfg.encoder.downsample = r;
                }
                cfg.encoder.shared_backbone = self.shared_backbone;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                StereoModel::new(&mut rng, &cfg)
            }
        }
    }

    fn check_conflicts(&self, ckpt: &Checkpoint) -> Result<()> {
        if let Some(l) = self.levels {
            if l != ckpt.config.encoder.levels {
                return Err(Error::Checkpoint(format!(
                    "config conflict: checkpoint has {} levels but --levels {l} was requested",
                    ckpt.config.encoder.levels
                )));
            }
        }
        if let Some(r) = self.resolution {
            if r != ckpt.config.encoder.downsample {
                return Err(Error::Checkpoint(format!(
                    "config conflict: checkpoint resolution 1/{} but --resolution {r} was requested",
                    ckpt.config.encoder.downsample
                )));
            }
        }
        if self.shared_backbone && !ckpt.config.encoder.shared_backbone {
            return Err(Error::Checkpoint(
                "config conflict: checkpoint uses separate backbones but --shared-backbone was requested"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Args)]
struct InferArgs {
    /// Left image (PNG or PPM).
    #[arg(long)]
    left: PathBuf,
    /// Right image (PNG or PPM).
    #[arg(long)]
    right: PathBuf,
    /// Output disparity map (PFM).
    #[arg(long)]
    out: PathBuf,
    /// Refinement iterations for the regular schedule.
    #[arg(long, default_value_t = 32)]
    iters: usize,
    /// Use the slow-fast schedule (30/20/10 coarse-to-fine updates).
    #[arg(long)]
    slow_fast: bool,
    /// Compute correlation features on the fly (no W x W volume).
    #[arg(long)]
    on_the_fly: bool,
    /// Also write a colormapped PNG (plus a .range.txt sidecar).
    #[arg(long)]
    png: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint and metric log.
    #[arg(long, default_value = "train_out")]
    out_dir: PathBuf,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted .pfm files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth .pfm files with matching names.
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated bad-pixel thresholds.
    #[arg(long, default_value = "0.5,1,2,3,4")]
    thresholds: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long)]
    shared_backbone: bool,
    /// Feature resolution divisor (4 or 8).
    #[arg(long, default_value_t = 8)]
    resolution: usize,
    /// Benchmark the slow-fast schedule instead of the regular one.
    #[arg(long)]
    slow_fast: bool,
    #[arg(long, default_value_t = 32)]
    iters: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Shape { .. } | Error::Contract { .. } => 1,
    }
}

/// Entry point shared by the binary and the tests. `argv` includes the
/// program name.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes, not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Command::Infer(args) => cmd_infer(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn schedule_for(levels: usize, iters: usize, slow_fast: bool) -> Result<IterationSchedule> {
    if slow_fast {
        if levels != 3 {
            return Err(Error::contract(
                "cli",
                "--slow-fast requires a 3-level model",
            ));
        }
        IterationSchedule::slow_fast(&[10, 20, 30])
    } else {
        IterationSchedule::regular(levels, iters)
    }
}

fn cmd_infer(args: InferArgs) -> Result<i32> {
    let model = args.model.build()?;
    let left = load_image(&args.left)?;
    let right = load_image(&args.right)?;
    let pair = ImagePair::new(left, right)?;
    let levels = model.cfg.encoder.levels;
    let opts = RolloutOptions {
        schedule: schedule_for(levels, args.iters, args.slow_fast)?,
        keep_all: false,
        on_the_fly: args.on_the_fly,
        phase: crate::nn::Phase::Eval,
    };
    let updates = opts.schedule.finest_updates();
    let start = Instant::now();
    let (field, _, _) = model.run_inference(&pair, &opts, false)?;
    let elapsed = start.elapsed();
    if !field.values.all_finite() {
        return Err(Error::NonFinite("inference output".to_string()));
    }
    write_pfm(&args.out, &field.values)?;
    if let Some(png) = &args.png {
        save_disparity_png(png, &field.values)?;
    }
    println!(
        "wrote {} ({}x{}, {} disparity updates, {:.1} ms)",
        args.out.display(),
        field.values.shape()[2],
        field.values.shape()[1],
        updates,
        elapsed.as_secs_f64() * 1e3
    );
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                offset: 0,
                msg: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = StereoModel::new(&mut rng, &cfg.model)?;
    eprintln!(
        "training {} params for {} steps (batch {}, {} iters/rollout)",
        model.param_count(),
        cfg.steps,
        cfg.batch_size,
        cfg.loss.train_iters
    );
    let report = train(&model, &cfg, &args.out_dir)?;
    println!(
        "finished {} steps: loss {:.4}, checkpoint {}",
        report.steps_run,
        report.final_loss,
        report.checkpoint_path.display()
    );
    if let Some(val) = &report.final_val {
        println!("validation: {val}");
    }
    Ok(0)
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::contract("eval", format!("bad threshold {t:?}")))
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let thresholds = parse_thresholds(&args.thresholds)?;
    let mut names: Vec<String> = std::fs::read_dir(&args.pred)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pfm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Parse {
            path: args.pred.display().to_string(),
            offset: 0,
            msg: "no .pfm files found".to_string(),
        });
    }
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    let mut pooled_pred = Vec::new();
    let mut pooled_gt = Vec::new();
    let mut pooled_mask = Vec::new();
    for name in &names {
        let gt_path = args.gt.join(name);
        if !gt_path.exists() {
            return Err(Error::Parse {
                path: gt_path.display().to_string(),
                offset: 0,
                msg: "missing ground-truth file".to_string(),
            });
        }
        let (pred, _) = read_pfm(&args.pred.join(name))?;
        let (gt, _) = read_pfm(&gt_path)?;
        if pred.shape() != gt.shape() {
            return Err(Error::shape("eval", pred.shape(), gt.shape()));
        }
        // Non-finite ground truth marks invalid pixels.
        let mask: Vec<f32> = gt
            .iter()
            .map(|v| if v.is_finite() { 1.0 } else { 0.0 })
            .collect();
        for (p, m) in pred.iter().zip(&mask) {
            if *m > 0.0 && !p.is_finite() {
                return Err(Error::NonFinite(format!("prediction {name}")));
            }
        }
        let mask_t = crate::tensor::Tensor::from_vec(mask.clone(), gt.shape())?;
        let report = compute_metrics(&pred, &gt, Some(&mask_t), &thresholds)?;
        reports.push((name.clone(), report));
        pooled_pred.extend_from_slice(pred.data());
        pooled_gt.extend(gt.iter().map(|v| if v.is_finite() { *v } else { 0.0 }));
        pooled_mask.extend_from_slice(&mask);
    }
    for (name, r) in &reports {
        println!("{name}: {r}");
    }
    let n = pooled_pred.len();
    let pred = crate::tensor::Tensor::from_vec(pooled_pred, &[n])?;
    let gt = crate::tensor::Tensor::from_vec(pooled_gt, &[n])?;
    let mask = crate::tensor::Tensor::from_vec(pooled_mask, &[n])?;
    let aggregate = compute_metrics(&pred, &gt, Some(&mask), &thresholds)?;
    println!("aggregate ({} files): {aggregate}", reports.len());
    Ok(0)
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    use rand::Rng;
    if args.height % crate::encoders::PAD_MULTIPLE != 0
        || args.width % crate::encoders::PAD_MULTIPLE != 0
    {
        return Err(Error::contract(
            "bench",
            format!(
                "extents {}x{} must divide {}",
                args.height,
                args.width,
                crate::encoders::PAD_MULTIPLE
            ),
        ));
    }
    let mut cfg = ModelConfig::toy();
    cfg.encoder.levels = args.levels;
    cfg.encoder.downsample = args.resolution;
    cfg.encoder.shared_backbone = args.shared_backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = StereoModel::new(&mut rng, &cfg)?;

    let mut gen = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(0.0..1.0)).collect() };
    let (h, w) = (args.height, args.width);
    let left = crate::tensor::Tensor::from_vec(gen(3 * h * w), &[3, h, w])?;
    let right = crate::tensor::Tensor::from_vec(gen(3 * h * w), &[3, h, w])?;
    let pair = ImagePair::new(left, right)?;

    let opts = RolloutOptions {
        schedule: schedule_for(args.levels, args.iters, args.slow_fast)?,
        keep_all: false,
        on_the_fly: false,
        phase: crate::nn::Phase::Eval,
    };
    let start = Instant::now();
    let (_, _, stats) = model.run_inference(&pair, &opts, false)?;
    let elapsed = start.elapsed();

    println!(
        "model: levels {}, resolution 1/{}, {} backbone",
        args.levels,
        args.resolution,
        if args.shared_backbone { "shared" } else { "separate" }
    );
    println!("parameters: {}", model.param_count());
    println!(
        "schedule: {} ({} finest updates)",
        if args.slow_fast { "slow-fast 30/20/10" } else { "regular" },
        opts.schedule.finest_updates()
    );
    println!("input: {h}x{w}");
    println!("stage               MACs");
    println!("  encoders    {:>12}", stats.encoder_macs);
    println!("  volume      {:>12}", stats.volume_macs);
    println!("  lookup      {:>12}", stats.lookup_macs);
    println!("  motion enc  {:>12}", stats.motion_macs);
    for (l, (macs, count)) in stats.gru_macs.iter().zip(&stats.gru_updates).enumerate() {
        println!(
            "  gru level {l} {:>12}  ({} updates, {:.0} MACs each)",
            macs,
            count,
            stats.macs_per_update(l)
        );
    }
    println!("  heads       {:>12}", stats.head_macs);
    let total = stats.encoder_macs
        + stats.volume_macs
        + stats.lookup_macs
        + stats.motion_macs
        + stats.total_gru_macs()
        + stats.head_macs;
    println!("  total       {total:>12}");
    println!("wall time: {:.1} ms", elapsed.as_secs_f64() * 1e3);
    Ok(0)
}

fn cmd_selfcheck(args: SelfcheckArgs) -> Result<i32> {
    let results = crate::selfcheck::run_all(args.seed);
    let mut failed = 0;
    for r in &results {
        match &r.detail {
            Ok(detail) => println!("ok   {} — {detail}", r.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} — {detail}", r.name);
            }
        }
    }
    println!("{} checks, {} failed", results.len(), failed);
    Ok(if failed == 0 { 0 } else { 3 })
}

/// Convenience wrapper for tests: run with string arguments.
pub fn run_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut argv = vec!["stereomatch".to_string()];
    argv.extend(args.into_iter().map(Into::into));
    run(&argv)
}

fn _assert_path_usable(_: &Path) {}
