use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mirrornet_core::config::resolve_seed;
use mirrornet_core::crf::crf_refine;
use mirrornet_core::dataset::{
    compute_stats, generate_synthetic, image_tensor, load_pairs, prepare_image, split_by_group_seeded, GrayImage,
    RgbImage,
};
use mirrornet_core::network::threshold_mask;
use mirrornet_core::ops::upsample_bilinear;
use mirrornet_core::train::{evaluate, training_records};
use mirrornet_core::{train, Checkpoint, Error, Network, Result, RunConfig, Shape, Tensor};

/// Training and checkpoints use single precision.
type P = f32;

const DEFAULT_CHECKPOINT: &str = "mirrornet.ckpt";

const CONFIG_HELP: &str = "\
CONFIGURATION
  --config takes a TOML file of `key = value` lines under section headers.
  Every key is optional; unknown keys are errors. Defaults:

  [network]
  resolution = 64            square input side; a multiple of the total stride
  widths = [16, 32, 64, 128] backbone stage widths, shallowest first
  stem_stride = 2            stride of the first convolution (1 or 2)
  ccfe_blocks = 4            contrast blocks per module
  ccfe_scales = 4            parallel dilation scales per block (1, 2, 4, 8)
  reduction = 4              channel-attention reduction ratio
  supervision = 4            supervised levels, one per backbone stage
  loss_weights = [1.0, 1.0, 1.0, 1.0]
                             per-level loss weight, shallowest first
  ablation = \"full\"          full | no_ccfe | bce_loss | ccfe_no_contrast |
                             1B4C | 4B1C

  [optim]
  base_lr = 0.001            initial learning rate
  momentum = 0.9
  weight_decay = 0.0005
  power = 0.9                poly decay exponent
  epochs = 300
  batch_size = 10
  decay_norm_affine = true   apply weight decay to batch-norm scale and shift

  [crf]
  w_appearance = 4.0         appearance kernel weight
  w_smoothness = 3.0         smoothness kernel weight
  theta_alpha = 30.0         appearance spatial bandwidth, pixels
  theta_beta = 13.0          appearance colour bandwidth, intensity units
  theta_gamma = 3.0          smoothness spatial bandwidth, pixels
  iterations = 10            mean-field iterations

  [data]
  train_dir = \"...\"          directory of <stem>.ppm / <stem>_mask.pgm pairs;
                             synthetic scenes are used when unset
  test_dir = \"...\"           evaluation directory used when eval has no --data
  synthetic_scenes = 20      synthetic training scenes
  augment = true             random horizontal flips while training
  test_fraction = 0.2376...  held-out share for gen-data --split

  [data.synth]
  min_area = 0.1             mirror area bounds, fraction of the image
  max_area = 0.5
  scenes_per_group = 2       scenes sharing one mirror geometry
  max_brightness_shift = 50.0
                             largest reflection brightness offset
  frame_width = 2            frame ring around the mirror, pixels
  texture_amplitude = 40.0   background grating amplitude

  [run]
  seed = 0                   overridden by MIRRORNET_SEED, then by --seed
  checkpoint = \"...\"         train output and default eval/infer input
  log = \"...\"                append-only training log
  threshold = 0.5            infer binarization threshold
  eval_every = 1             epochs between train-set IoU checks; 0 disables
  stop_at_iou = 0.9          stop once train-set IoU reaches this (unset: never)

ERRORS
  Failures print one line `error: <category>: <message>` to stderr and exit 1.
  Categories: config, argument, data, format, shape, params, metric, io.";

#[derive(Parser, Debug)]
#[command(name = "mirrornet", version, about = "Mirror segmentation on CPU", after_long_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on an image/mask directory.
    Eval(EvalArgs),
    /// Write probability maps and masks for images.
    Infer(InferArgs),
    /// Mirror area, location and colour-contrast statistics of a directory.
    Stats(StatsArgs),
    /// Refine a probability map with the dense CRF.
    Crf(CrfArgs),
    /// Write synthetic image/mask pairs.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML configuration file; see `--help` for every key.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Overrides the configured seed and MIRRORNET_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Training directory; overrides `data.train_dir`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output checkpoint; overrides `run.checkpoint`.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Append-only log; overrides `run.log`.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Records,
    Table,
    Both,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Optional config; its network must match the checkpoint and its CRF
    /// settings replace the stored ones.
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Evaluation directory; defaults to `data.test_dir`.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Refine probabilities with the dense CRF before binarization.
    #[arg(long)]
    crf: bool,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Output directory for `<stem>_prob.pgm` and `<stem>_mask.pgm`.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Overrides `run.threshold`.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    crf: bool,
    /// Binary PPM images.
    #[arg(required = true, value_name = "IMAGE")]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(value_name = "DIR")]
    data: PathBuf,
    /// Side of the mean location map.
    #[arg(long, default_value_t = 16)]
    map_size: usize,
}

#[derive(Args, Debug)]
struct CrfArgs {
    /// Source of the `[crf]` settings.
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "PPM")]
    image: PathBuf,
    /// 8-bit mirror probability map with the image's dimensions.
    #[arg(long, value_name = "PGM")]
    prob: PathBuf,
    #[arg(long, value_name = "PGM")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Defaults to `data.synthetic_scenes`.
    #[arg(long)]
    count: Option<usize>,
    /// Defaults to `network.resolution`.
    #[arg(long)]
    resolution: Option<usize>,
    /// Write `train/` and `test/` split by group at `data.test_fraction`.
    #[arg(long)]
    split: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Stats(a) => run_stats(a),
        Command::Crf(a) => run_crf(a),
        Command::GenData(a) => run_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = args.config.load()?;
    config.run.seed = resolve_seed(args.seed, config.run.seed)?;
    if let Some(dir) = args.data {
        config.data.train_dir = Some(dir);
    }
    if let Some(path) = args.checkpoint {
        config.run.checkpoint = Some(path);
    }
    if let Some(path) = args.log {
        config.run.log = Some(path);
    }
    config.validate()?;
    let checkpoint_path = config
        .run
        .checkpoint
        .clone()
        .unwrap_or_else(|| DEFAULT_CHECKPOINT.into());
    let mut log = match &config.run.log {
        Some(path) => Some(OpenOptions::new().create(true).append(true).open(path)?),
        None => None,
    };
    let mut emit = |line: String| -> Result<()> {
        println!("{line}");
        if let Some(f) = log.as_mut() {
            writeln!(f, "{line}")?;
        }
        Ok(())
    };

    let records = training_records(&config)?;
    emit(format!(
        "start seed={} ablation={} images={} epochs={} batch_size={}",
        config.run.seed,
        config.network.ablation,
        records.len(),
        config.optim.epochs,
        config.optim.batch_size
    ))?;
    let (_, checkpoint, report) = train::<P>(&config, &records, |e| emit(e.record()))?;
    checkpoint.save(&checkpoint_path)?;
    let mut end = format!(
        "end epochs={} stopped_early={} checkpoint={}",
        report.epochs.len(),
        report.stopped_early,
        checkpoint_path.display()
    );
    if let Some(loss) = report.final_loss() {
        end.push_str(&format!(" final_loss={loss:.9}"));
    }
    if let Some(iou) = report.best_iou() {
        end.push_str(&format!(" best_iou={iou:.6}"));
    }
    for op in ["lovasz_hinge", "bce"] {
        end.push_str(&format!(" ops.{op}={}", report.op_count(op)));
    }
    emit(end)
}

fn checkpoint_path(flag: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or_else(|| config.run.checkpoint.clone())
        .unwrap_or_else(|| DEFAULT_CHECKPOINT.into())
}

/// Loads the checkpoint; a config given on the command line must describe
/// the same network and contributes its CRF and run settings.
fn load_model(config_arg: &ConfigArg, flag: Option<PathBuf>) -> Result<(RunConfig, Network, Checkpoint<P>)> {
    let cli_config = config_arg.load()?;
    let checkpoint = Checkpoint::<P>::load(&checkpoint_path(flag, &cli_config))?;
    let mut config = checkpoint.config.clone();
    if config_arg.config.is_some() {
        let (want, have) = (&cli_config.network, &checkpoint.config.network);
        if want.resolution != have.resolution {
            return Err(Error::Config(format!(
                "config resolution {} does not match checkpoint resolution {}",
                want.resolution, have.resolution
            )));
        }
        if want != have {
            return Err(Error::Config("config network differs from the checkpoint network".into()));
        }
        config.crf = cli_config.crf;
        config.run = cli_config.run;
        config.data = cli_config.data;
    }
    let network = Network::new(config.network.clone())?;
    Ok((config, network, checkpoint))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (config, network, checkpoint) = load_model(&args.config, args.checkpoint)?;
    let dir = args
        .data
        .or_else(|| config.data.test_dir.clone())
        .ok_or_else(|| Error::Argument("no evaluation directory: pass --data or set data.test_dir".into()))?;
    let records = load_pairs(&dir)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} contains no image/mask pairs", dir.display())));
    }
    let crf = args.crf.then_some(&config.crf);
    let report = evaluate(&network, &checkpoint.store, &records, config.optim.batch_size, crf)?;
    match args.format {
        Format::Records => print!("{}", report.records()),
        Format::Table => print!("{}", report.table()),
        Format::Both => print!("{}\n{}", report.records(), report.table()),
    }
    Ok(())
}

fn quantize(prob: &Tensor<P>) -> Vec<u8> {
    prob.data()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn gray(width: usize, height: usize, data: Vec<u8>) -> GrayImage {
    GrayImage { width, height, data }
}

fn stem_of(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))
}

fn run_infer(args: InferArgs) -> Result<()> {
    let (config, network, checkpoint) = load_model(&args.config, args.checkpoint)?;
    let threshold = args.threshold.unwrap_or(config.run.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!("threshold {threshold} not in (0, 1)")));
    }
    std::fs::create_dir_all(&args.out)?;
    for path in &args.images {
        let image = RgbImage::read(path)?;
        let input = prepare_image::<P>(&image, config.network.resolution)?;
        let mut prob = network.probabilities(&checkpoint.store, &input)?;
        if args.crf {
            prob = crf_refine(&input, &prob, &config.crf)?;
        }
        let prob = upsample_bilinear(&prob, image.height, image.width)?;
        // the mask is derived from the stored 8-bit map so the two files agree
        let levels = quantize(&prob);
        let stored = Tensor::from_vec(
            Shape::new(1, 1, image.height, image.width),
            levels.iter().map(|&v| v as P / 255.0).collect(),
        )?;
        let mask = quantize(&threshold_mask(&stored, threshold));
        let stem = stem_of(path)?;
        let prob_path = args.out.join(format!("{stem}_prob.pgm"));
        let mask_path = args.out.join(format!("{stem}_mask.pgm"));
        gray(image.width, image.height, levels).write(&prob_path)?;
        gray(image.width, image.height, mask).write(&mask_path)?;
        println!("image={} prob={} mask={}", path.display(), prob_path.display(), mask_path.display());
    }
    Ok(())
}

fn run_stats(args: StatsArgs) -> Result<()> {
    let records = load_pairs(&args.data)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} contains no image/mask pairs", args.data.display())));
    }
    print!("{}", compute_stats(&records, args.map_size)?.to_lines());
    Ok(())
}

fn run_crf(args: CrfArgs) -> Result<()> {
    let config = args.config.load()?;
    let image = RgbImage::read(&args.image)?;
    let prob = GrayImage::read(&args.prob)?;
    if (prob.width, prob.height) != (image.width, image.height) {
        return Err(Error::Shape(format!(
            "probability map is {}x{} but the image is {}x{}",
            prob.width, prob.height, image.width, image.height
        )));
    }
    let prob = Tensor::from_vec(
        Shape::new(1, 1, prob.height, prob.width),
        prob.data.iter().map(|&v| v as P / 255.0).collect(),
    )?;
    let refined = crf_refine(&image_tensor::<P>(&image), &prob, &config.crf)?;
    gray(image.width, image.height, quantize(&refined)).write(&args.out)?;
    println!("out={}", args.out.display());
    Ok(())
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let config = args.config.load()?;
    let seed = resolve_seed(args.seed, config.run.seed)?;
    let count = args.count.unwrap_or(config.data.synthetic_scenes);
    let resolution = args.resolution.unwrap_or(config.network.resolution);
    let records = generate_synthetic(count, resolution, seed, &config.data.synth)?;
    let sets = if args.split {
        let (train, test) = split_by_group_seeded(&records, config.data.test_fraction, seed)?;
        vec![(args.out.join("train"), train), (args.out.join("test"), test)]
    } else {
        vec![(args.out.clone(), records)]
    };
    for (dir, mut set) in sets {
        std::fs::create_dir_all(&dir)?;
        for record in &mut set {
            record.save(&dir)?;
        }
        println!("dir={} images={} seed={seed}", dir.display(), set.len());
    }
    Ok(())
}
