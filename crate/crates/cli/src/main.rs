use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use roadsense::ablation::{run_ablation, standard_variants, AblationOptions};
use roadsense::config::{LaneDecoderKind, LaneLossKind, ModelConfig, RunConfig};
use roadsense::data::{load_manifest, prep_lanes, synth_generate, write_image, write_mask, Split, SynthConfig};
use roadsense::inference::{benchmark, render_overlay, run_inference, InferOptions, DEFAULT_BENCH_WARMUP};
use roadsense::training::{evaluate, fit, load_checkpoint, EvalOptions, FitOptions, Schedule};
use roadsense::PerceptionModel;

#[derive(Parser, Debug)]
#[command(name = "roadsense", version, about = "Multi-task driving perception: detection, drivable area and lanes")]
struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Flat TOML run config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a dataset root.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Run a checkpoint on images and write results and overlays.
    Infer(InferArgs),
    /// Measure forward speed and parameter count.
    Bench(BenchArgs),
    /// Rasterize lane masks from the lane annotations at a given width.
    PrepLanes(PrepLanesArgs),
    /// Write a synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Train the cumulative ablation variants and print the comparison.
    Ablate(AblateArgs),
}

/// Settings shared by every command that builds or trains a model.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Narrow encoder sized for CPU runs on small images.
    #[arg(long)]
    compact: bool,
    /// Training input size, e.g. 640x640.
    #[arg(long, value_parser = parse_size)]
    input_size: Option<(usize, usize)>,
    /// Evaluation / inference input size, e.g. 640x384.
    #[arg(long, value_parser = parse_size)]
    eval_size: Option<(usize, usize)>,
    /// Number of object classes.
    #[arg(long)]
    num_classes: Option<usize>,
    /// `transposed_conv` or `nearest_upsample`.
    #[arg(long, value_parser = parse_decoder)]
    lane_decoder: Option<LaneDecoderKind>,
    /// `focal_plus_dice` or `focal`.
    #[arg(long, value_parser = parse_lane_loss)]
    lane_loss: Option<LaneLossKind>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, logs and reports.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    /// Total training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs of linear learning-rate warmup.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial (peak) learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate every this many epochs; 0 only at the end.
    #[arg(long)]
    eval_every: Option<usize>,
    /// `warmup_cosine` or `warm_restarts`.
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    /// Disable mosaic and mixup.
    #[arg(long)]
    no_augment: bool,
    /// Re-fit the anchors to the training boxes with k-means.
    #[arg(long)]
    auto_anchors: bool,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs (the schedule still spans all epochs).
    #[arg(long)]
    stop_after_epoch: Option<usize>,
    /// Split scored during training; skipped when empty or missing.
    #[arg(long, default_value = "val")]
    eval_split: Split,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "val")]
    split: Split,
    /// Network input size, e.g. 640x384.
    #[arg(long, value_parser = parse_size)]
    eval_size: Option<(usize, usize)>,
    /// Lane mask width of the ground truth (px).
    #[arg(long)]
    lane_width: Option<u32>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint to run.
    #[arg(long)]
    weights: PathBuf,
    /// Image file(s).
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Network input size, e.g. 640x384.
    #[arg(long, value_parser = parse_size)]
    eval_size: Option<(usize, usize)>,
    /// Confidence threshold for reported detections.
    #[arg(long)]
    conf: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint; without it a freshly initialised model is timed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    /// Timed forward passes at batch 1.
    #[arg(long, default_value_t = 50)]
    iterations: usize,
    /// Untimed passes before timing.
    #[arg(long, default_value_t = DEFAULT_BENCH_WARMUP)]
    warmup: usize,
    /// Also time without warmup and report the difference.
    #[arg(long)]
    compare_warmup: bool,
    /// Write the report here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrepLanesArgs {
    /// Dataset root.
    #[arg(long)]
    root: PathBuf,
    /// `train`, `val` or `test`.
    #[arg(long)]
    split: Split,
    /// Lane line width in pixels.
    #[arg(long)]
    width: u32,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// Output dataset root.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 160)]
    height: usize,
    /// Images in the train split.
    #[arg(long, default_value_t = 16)]
    train: usize,
    /// Images in the val split.
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Images in the test split.
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 2)]
    min_objects: usize,
    #[arg(long, default_value_t = 5)]
    max_objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Dataset root with train and val splits.
    #[arg(long)]
    data: PathBuf,
    /// Directory for per-variant runs and the report.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    /// Training epochs per variant.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok((w, h))
}

fn parse_decoder(s: &str) -> Result<LaneDecoderKind, String> {
    match s {
        "transposed_conv" => Ok(LaneDecoderKind::TransposedConv),
        "nearest_upsample" => Ok(LaneDecoderKind::NearestUpsample),
        _ => Err("expected transposed_conv or nearest_upsample".into()),
    }
}

fn parse_lane_loss(s: &str) -> Result<LaneLossKind, String> {
    match s {
        "focal" => Ok(LaneLossKind::Focal),
        "focal_plus_dice" => Ok(LaneLossKind::FocalPlusDice),
        _ => Err("expected focal or focal_plus_dice".into()),
    }
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    match s {
        "warmup_cosine" => Ok(Schedule::WarmupCosine),
        "warm_restarts" => Ok(Schedule::WarmRestarts),
        _ => Err("expected warmup_cosine or warm_restarts".into()),
    }
}

struct Ctx {
    workdir: PathBuf,
    config: RunConfig,
    /// The config came from `--config` rather than the defaults.
    from_file: bool,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) {
    if let Some((w, h)) = f.input_size {
        cfg.input_width = w;
        cfg.input_height = h;
    }
    if f.compact {
        let c = ModelConfig::compact(cfg.input_width, cfg.input_height);
        cfg.stage_channels = c.stage_channels;
        cfg.blocks_per_stage = c.blocks_per_stage;
        cfg.anchors = c.anchor_sizes;
    }
    if let Some((w, h)) = f.eval_size {
        cfg.eval_width = w;
        cfg.eval_height = h;
    }
    if let Some(n) = f.num_classes {
        cfg.num_classes = n;
    }
    if let Some(d) = f.lane_decoder {
        cfg.lane_decoder = d;
    }
    if let Some(l) = f.lane_loss {
        cfg.lane_loss = l;
    }
}

fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        eprintln!("interrupt received; saving and stopping after the current step");
        f.store(true, Ordering::SeqCst);
    }) {
        log::warn!("cannot install the interrupt handler: {e}");
    }
    flag
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg = ctx.config.clone();
    apply_model_flags(&mut cfg, &a.model);
    if let Some(v) = a.epochs {
        cfg.total_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.initial_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.schedule {
        cfg.schedule = v;
    }
    if a.no_augment {
        cfg.use_mosaic = false;
        cfg.use_mixup = false;
    }
    cfg.auto_anchors |= a.auto_anchors;
    cfg.validate()?;

    let data = ctx.path(&a.data);
    let run = ctx.path(&a.run);
    let train_split = load_manifest(&data, Split::Train, cfg.lane_width(Split::Train))?;
    let eval = load_manifest(&data, a.eval_split, cfg.lane_width(a.eval_split))
        .ok()
        .filter(|m| !m.is_empty());
    std::fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
    cfg.save(&run.join("config.toml"))?;

    let mut opts = FitOptions::new(&run, cfg.model(), cfg.train(), cfg.loss_weights());
    opts.eval = eval;
    opts.resume = a.resume;
    opts.stop_after_epoch = a.stop_after_epoch;
    opts.stop = Some(stop_flag());
    let out = fit(&train_split, &opts)?;
    if let Some(last) = out.history.last() {
        println!("step {} lr {:.6} total loss {:.5}", last.step, last.lr, last.losses.total);
    }
    if let Some((epoch, report)) = out.reports.last() {
        println!("evaluation after epoch {epoch}:\n{}", report.to_table());
    }
    println!("last checkpoint: {}", out.last.display());
    if let Some(b) = &out.best {
        println!("best checkpoint: {}", b.display());
    }
    if out.interrupted {
        bail!("training interrupted; resume with --resume");
    }
    Ok(())
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint::<f32>(&ctx.path(&a.weights))?;
    let mut opts = EvalOptions::from_train(&ck.header.train);
    if ctx.from_file {
        opts.eval_size = (ctx.config.eval_width, ctx.config.eval_height);
        opts.conf_threshold = ctx.config.eval_conf_threshold;
        opts.nms_iou_threshold = ctx.config.nms_iou_threshold;
    }
    if let Some(s) = a.eval_size {
        opts.eval_size = s;
    }
    let width = a.lane_width.unwrap_or(ctx.config.lane_width(a.split));
    let manifest = load_manifest(&ctx.path(&a.data), a.split, width)?;
    for issue in &manifest.issues {
        log::warn!("{}: {}", issue.path.display(), issue.message);
    }
    let report = evaluate(&ck.model, &manifest, &opts)?;
    println!("{}", report.to_table());
    if let Some(out) = &a.out {
        let out = ctx.path(out);
        if let Some(dir) = out.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn infer(ctx: &Ctx, a: &InferArgs) -> Result<()> {
    let ck = load_checkpoint::<f32>(&ctx.path(&a.weights))?;
    let train = &ck.header.train;
    let opts = InferOptions {
        input_size: a.eval_size.unwrap_or(train.eval_size),
        conf_threshold: a.conf.unwrap_or(train.conf_threshold),
        nms_iou_threshold: train.nms_iou_threshold,
    };
    let out = ctx.path(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for path in &a.image {
        let path = ctx.path(path);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let image = roadsense::data::read_image(&path)?;
        let result = run_inference(&ck.model, &path, &opts)?;
        let overlay = render_overlay(&image, &result)?;
        std::fs::write(out.join(format!("{stem}.json")), result.to_json())?;
        write_image(&out.join(format!("{stem}_overlay.png")), &overlay)?;
        write_mask(&out.join(format!("{stem}_drivable.png")), &result.drivable_mask)?;
        write_mask(&out.join(format!("{stem}_lane.png")), &result.lane_mask)?;
        println!("{}: {} detections", path.display(), result.detections.len());
    }
    Ok(())
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    let (model, size) = match &a.weights {
        Some(w) => {
            let ck = load_checkpoint::<f32>(&ctx.path(w))?;
            let size = a.model.eval_size.unwrap_or(ck.header.train.eval_size);
            (ck.model, size)
        }
        None => {
            let mut cfg = ctx.config.clone();
            apply_model_flags(&mut cfg, &a.model);
            cfg.validate()?;
            (PerceptionModel::<f32>::new(cfg.model(), cfg.seed)?, (cfg.eval_width, cfg.eval_height))
        }
    };
    let report = benchmark(&model, size, a.iterations, a.warmup)?;
    let mut text = report.to_text();
    if a.compare_warmup {
        let cold = benchmark(&model, size, a.iterations, 0)?;
        text.push_str(&format!(
            "without warmup: {:.2} fps ({:+.2} fps vs warmup {})\n",
            cold.fps,
            cold.fps - report.fps,
            a.warmup
        ));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(ctx.path(out), &text)?;
    }
    Ok(())
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let mut cfg = ctx.config.clone();
    apply_model_flags(&mut cfg, &a.model);
    if let Some(v) = a.epochs {
        cfg.total_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if cfg.close_mosaic_epochs >= cfg.total_epochs {
        // keep at least one mosaic epoch so the augmentation row differs
        cfg.close_mosaic_epochs = cfg.total_epochs / 2;
    }
    if cfg.warmup_epochs >= cfg.total_epochs {
        cfg.warmup_epochs = cfg.total_epochs / 2;
    }
    cfg.validate()?;
    let data = ctx.path(&a.data);
    let train = load_manifest(&data, Split::Train, cfg.lane_width(Split::Train))?;
    let val = load_manifest(&data, Split::Val, cfg.lane_width(Split::Val))?;
    let run = ctx.path(&a.run);
    let opts = AblationOptions {
        run_dir: run.clone(),
        model: cfg.model(),
        train: cfg.train(),
        loss: cfg.loss_weights(),
        variants: standard_variants(),
    };
    let report = run_ablation(&train, &val, &opts)?;
    std::fs::write(run.join("ablation.json"), report.to_json())?;
    std::fs::write(run.join("ablation.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => {
            let p = if p.is_absolute() { p.clone() } else { cli.workdir.join(p) };
            RunConfig::load(&p)?
        }
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        workdir: cli.workdir.clone(),
        config,
        from_file: cli.config.is_some(),
    };
    match &cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
        Command::PrepLanes(a) => {
            let n = prep_lanes(&ctx.path(&a.root), a.split, a.width)?;
            println!("wrote {n} lane masks at {} px", a.width);
            Ok(())
        }
        Command::GenSynth(a) => {
            let cfg = SynthConfig {
                width: a.width,
                height: a.height,
                train: a.train,
                val: a.val,
                test: a.test,
                min_objects: a.min_objects,
                max_objects: a.max_objects,
                seed: a.seed,
                train_lane_width: ctx.config.train_lane_width,
                test_lane_width: ctx.config.test_lane_width,
            };
            let manifests = synth_generate(&ctx.path(&a.root), &cfg)?;
            for m in manifests {
                println!("{}: {} images", m.split, m.len());
            }
            Ok(())
        }
        Command::Ablate(a) => ablate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
