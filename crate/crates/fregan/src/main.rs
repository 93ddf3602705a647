//! Command-line interface: prepare a dataset, train, sweep the loss delta,
//! interpolate a frame sequence to double rate, and evaluate a checkpoint.
//!
//! Exit codes: 0 success, 2 flag/validation errors (raised before any output
//! is touched), 1 runtime failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fregan::checkpoint::load_checkpoint;
use fregan::data::{
    load_frame_sequence, read_manifest, save_frame_image, split_dataset, synth_moving_square,
    write_manifest, write_source_records, Split, SplitMode, TripletRecord,
};
use fregan::error::{Error, Result};
use fregan::model::{DiscriminatorConfig, Generator, GeneratorConfig};
use fregan::optim::OptimizerConfig;
use fregan::threads::set_threads;
use fregan::training::{
    self, delta_sweep, evaluate_dataset, load_split_tensors, Schedule, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "fregan",
    version,
    about = "Frame rate doubling: adversarial middle-frame synthesis over frame triplets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a triplet manifest from frame directories or synthetic clips.
    Prepare(PrepareArgs),
    /// Train generator and discriminator from a manifest.
    Train(TrainArgs),
    /// Train one model per delta and tabulate test PSNR/SSIM.
    Sweep(SweepArgs),
    /// Double the frame rate of a directory of frames.
    Interpolate(InterpolateArgs),
    /// Score a checkpoint's predictions over a manifest split.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SharedArgs {
    /// Seed for every randomized choice; runs never draw wall-clock entropy.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Worker threads; 1 keeps runs bit-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory holding one subdirectory of PNG frames per source clip.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate this many synthetic moving-square triplets instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Output directory; receives frames/ and manifest.tsv.
    #[arg(long)]
    output: PathBuf,
    /// Square frame extent; power of two, at least 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = fregan::data::DEFAULT_TEST_FRACTION)]
    test_fraction: f64,
    /// Keep whole source clips on one side of the train/test split.
    #[arg(long)]
    split_per_video: bool,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 15000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Pseudo-Huber transition point.
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long = "lr", default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    beta1: f64,
    #[arg(long, default_value_t = 0.95)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    /// Weight of the optional direct pixel loss; 0 is purely adversarial.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Channel width of the first layer of both networks.
    #[arg(long, default_value_t = 16)]
    base_filters: usize,
    /// Discriminator width override; a narrower critic keeps the adversarial
    /// race balanced on small datasets.
    #[arg(long)]
    disc_base_filters: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Dwell on each triplet for --epochs-per-triplet consecutive steps
    /// instead of shuffling.
    #[arg(long)]
    cyclic: bool,
    #[arg(long, default_value_t = 50)]
    epochs_per_triplet: usize,
}

impl TrainFlags {
    fn disc_filters(&self) -> usize {
        self.disc_base_filters.unwrap_or(self.base_filters)
    }

    fn configs(&self, seed: u64, checkpoint_every: usize, log_every: usize) -> Result<Configs> {
        let gen = GeneratorConfig::new(self.size, self.base_filters);
        gen.validate()?;
        DiscriminatorConfig::new(self.size, self.disc_filters()).validate()?;
        let train = TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            delta: self.delta,
            reconstruction_weight: self.lambda,
            seed,
            checkpoint_every,
            log_every,
            schedule: if self.cyclic {
                Schedule::CyclicPerTriplet { epochs_per_triplet: self.epochs_per_triplet }
            } else {
                Schedule::Shuffled
            },
        };
        train.validate()?;
        let opt = OptimizerConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        };
        opt.validate()?;
        Ok(Configs { gen, train, opt })
    }
}

struct Configs {
    gen: GeneratorConfig,
    train: TrainConfig,
    opt: OptimizerConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: usize,
    /// Progress line cadence on standard error.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Sweep CSV destination; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated list of delta values to train at.
    #[arg(long, value_delimiter = ',', default_values_t = training::DEFAULT_DELTAS)]
    deltas: Vec<f64>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of input frames, ordered by filename.
    #[arg(long)]
    frames: PathBuf,
    /// Output directory for the doubled sequence.
    #[arg(long)]
    output: PathBuf,
    /// Must match the checkpoint's training extent when given.
    #[arg(long)]
    size: Option<usize>,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Must match the checkpoint's training extent when given.
    #[arg(long)]
    size: Option<usize>,
    #[command(flatten)]
    shared: SharedArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Interpolate(args) => cmd_interpolate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    set_threads(args.shared.threads)?;
    GeneratorConfig::new(args.size, 16).validate()?;
    if !(args.test_fraction > 0.0 && args.test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {} outside (0, 1)",
            args.test_fraction
        )));
    }
    enum Source {
        Synthetic(usize),
        Directory(PathBuf),
    }
    let source = match (&args.input, args.synthetic) {
        (None, Some(count)) if count > 0 => Source::Synthetic(count),
        (None, Some(_)) => return Err(Error::Config("--synthetic needs a positive count".into())),
        (Some(dir), None) => {
            require_exists(dir, "input directory")?;
            Source::Directory(dir.clone())
        }
        _ => return Err(Error::Config("pass exactly one of --input and --synthetic".into())),
    };

    fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let mut records: Vec<TripletRecord> = Vec::new();
    match source {
        Source::Synthetic(count) => {
            for triplet in synth_moving_square(count, args.size, args.shared.seed)? {
                let frames = [triplet.x_n, triplet.x_np1, triplet.x_np2];
                records.extend(write_source_records(&frames, &args.output, "frames")?);
            }
        }
        Source::Directory(input) => {
            let mut sources: Vec<PathBuf> = fs::read_dir(&input)
                .map_err(|e| Error::io(&input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            sources.sort();
            for dir in sources {
                let frames = load_frame_sequence(&dir, args.size)?;
                records.extend(write_source_records(&frames, &args.output, "frames")?);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Config(
            "input produced no triplets; each source needs at least 3 frames".into(),
        ));
    }
    let mode = if args.split_per_video { SplitMode::PerVideo } else { SplitMode::PerTriplet };
    let manifest = split_dataset(records, args.test_fraction, args.shared.seed, mode)?;
    let manifest_path = args.output.join("manifest.tsv");
    write_manifest(&manifest, &manifest_path)?;
    eprintln!(
        "prepared {} triplets ({} test, {} train) at size {}",
        manifest.records.len(),
        manifest.split_records(Split::Test).len(),
        manifest.split_records(Split::Train).len(),
        args.size,
    );
    println!("{}", manifest_path.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    set_threads(args.shared.threads)?;
    let configs = args.flags.configs(args.shared.seed, args.checkpoint_every, args.log_every)?;
    require_exists(&args.manifest, "manifest")?;
    let manifest = read_manifest(&args.manifest)?;
    let manifest_dir = manifest_dir(&args.manifest);
    let artifacts = training::train(
        &manifest,
        manifest_dir,
        configs.gen,
        args.flags.disc_filters(),
        &configs.train,
        &configs.opt,
        &args.output,
    )?;
    println!("{}", artifacts.final_checkpoint.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    set_threads(args.shared.threads)?;
    let configs = args.flags.configs(args.shared.seed, usize::MAX, usize::MAX)?;
    for &delta in &args.deltas {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("delta {delta} must be positive")));
        }
    }
    require_exists(&args.manifest, "manifest")?;
    let manifest = read_manifest(&args.manifest)?;
    let dir = manifest_dir(&args.manifest);
    let train_set = load_split_tensors(&manifest, dir, Split::Train, configs.gen.image_size)?;
    let test_set = load_split_tensors(&manifest, dir, Split::Test, configs.gen.image_size)?;
    let rows = |out: &mut dyn Write| {
        delta_sweep(
            &train_set,
            &test_set,
            configs.gen,
            args.flags.disc_filters(),
            &configs.train,
            &configs.opt,
            &args.deltas,
            out,
        )
    };
    match &args.output {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = std::io::BufWriter::new(file);
            rows(&mut out)?;
            out.flush().map_err(|e| Error::io(path, e))?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            rows(&mut out)?;
        }
    }
    Ok(())
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<()> {
    set_threads(args.shared.threads)?;
    require_exists(&args.checkpoint, "checkpoint")?;
    require_exists(&args.frames, "frames directory")?;
    let snapshot = load_checkpoint(&args.checkpoint)?;
    let gen = Generator::from_params(snapshot.gen_params)?;
    check_size_flag(args.size, gen.config.image_size)?;
    let frames = load_frame_sequence(&args.frames, gen.config.image_size)?;
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 frames to interpolate, found {}",
            frames.len()
        )));
    }
    fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    // Originals land on odd 1-indexed positions, synthesized frames between
    // them; n inputs become 2n-1 outputs.
    let out_path =
        |position: usize| args.output.join(format!("frame_{position:05}.png"));
    save_frame_image(&frames[0].image, &out_path(1))?;
    for (i, pair) in frames.windows(2).enumerate() {
        let middle = gen.predict(&pair[0].image, &pair[1].image)?;
        save_frame_image(&middle, &out_path(2 * i + 2))?;
        save_frame_image(&pair[1].image, &out_path(2 * i + 3))?;
    }
    eprintln!("interpolated {} frames into {}", frames.len(), 2 * frames.len() - 1);
    println!("{}", args.output.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    set_threads(args.shared.threads)?;
    require_exists(&args.checkpoint, "checkpoint")?;
    require_exists(&args.manifest, "manifest")?;
    let split = Split::parse(&args.split).expect("clap restricts the values");
    let snapshot = load_checkpoint(&args.checkpoint)?;
    let gen = Generator::from_params(snapshot.gen_params)?;
    check_size_flag(args.size, gen.config.image_size)?;
    let manifest = read_manifest(&args.manifest)?;
    let dataset =
        load_split_tensors(&manifest, manifest_dir(&args.manifest), split, gen.config.image_size)?;
    if dataset.is_empty() {
        return Err(Error::Config(format!("manifest has no {} records", args.split)));
    }
    let report = evaluate_dataset(&gen, &dataset)?;
    println!("index,psnr,ssim");
    for row in &report.rows {
        println!("{},{},{}", row.index, row.psnr, row.ssim);
    }
    println!("mean,{},{}", report.mean_psnr, report.mean_ssim);
    eprintln!(
        "psnr mean={} min={} max={}; ssim mean={} min={} max={}",
        report.mean_psnr,
        report.min_psnr,
        report.max_psnr,
        report.mean_ssim,
        report.min_ssim,
        report.max_ssim,
    );
    Ok(())
}

fn manifest_dir(manifest: &Path) -> &Path {
    manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn check_size_flag(flag: Option<usize>, checkpoint_size: usize) -> Result<()> {
    if let Some(size) = flag {
        if size != checkpoint_size {
            return Err(Error::Config(format!(
                "--size {size} does not match the checkpoint's training extent {checkpoint_size}"
            )));
        }
    }
    Ok(())
}
