//! The adversarial training loop. Each step runs three passes: the
//! discriminator updates on the real middle frame, then on the generator's
//! detached output, and finally the generator updates against the freshly
//! updated, frozen discriminator. Also houses evaluation over a split and
//! the delta sweep protocol.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, TrainingSnapshot};
use crate::data::{load_record_frames, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{self, SsimConstants};
use crate::model::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Pass,
};
use crate::optim::{adam_step, AdamState, OptimizerConfig};
use crate::tape::GradientTape;
use crate::tensor::{stack_batch, Tensor};

pub const LOG_HEADER: &str = "step,d_loss,g_loss,psnr,ssim";
pub const SWEEP_HEADER: &str = "delta,psnr,ssim";
/// The delta values the sweep walks by default.
pub const DEFAULT_DELTAS: [f64; 7] = [0.1, 0.25, 0.45, 0.5, 0.75, 0.8, 1.0];

/// One triplet as normalized tensors: first, middle, third frame.
pub type TripletTensors = [Tensor<f32>; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// Seeded shuffle, reshuffled every epoch.
    Shuffled,
    /// Dwells on each triplet for a fixed number of consecutive steps before
    /// moving to the next, cycling through the dataset in order.
    CyclicPerTriplet { epochs_per_triplet: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub delta: f64,
    /// Weight of the optional direct pixel term; 0 trains purely
    /// adversarially.
    pub reconstruction_weight: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 15000,
            batch_size: 1,
            delta: 0.5,
            reconstruction_weight: 0.0,
            seed: 42,
            checkpoint_every: 1000,
            log_every: 100,
            schedule: Schedule::Shuffled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta {} must be positive", self.delta)));
        }
        if !(self.reconstruction_weight >= 0.0 && self.reconstruction_weight.is_finite()) {
            return Err(Error::Config(format!(
                "reconstruction weight {} must be non-negative",
                self.reconstruction_weight
            )));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("checkpoint_every and log_every must be at least 1".into()));
        }
        if let Schedule::CyclicPerTriplet { epochs_per_triplet } = self.schedule {
            if epochs_per_triplet == 0 {
                return Err(Error::Config("epochs_per_triplet must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl StepReport {
    fn validated(step: usize, d_loss: f64, g_loss: f64, psnr: f64, ssim: f64) -> Result<StepReport> {
        for (name, value) in
            [("d_loss", d_loss), ("g_loss", g_loss), ("psnr", psnr), ("ssim", ssim)]
        {
            if !value.is_finite() {
                return Err(Error::Numeric(format!("step {step}: {name} is {value}")));
            }
        }
        Ok(StepReport { step, d_loss, g_loss, psnr, ssim })
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.d_loss, self.g_loss, self.psnr, self.ssim)
    }
}

pub struct TrainedModels {
    pub gen: Generator,
    pub disc: Discriminator,
    pub gen_state: AdamState,
    pub disc_state: AdamState,
}

impl TrainedModels {
    pub fn snapshot(&self) -> TrainingSnapshot {
        snapshot_parts(&self.gen, &self.disc, &self.gen_state, &self.disc_state)
    }
}

fn snapshot_parts(
    gen: &Generator,
    disc: &Discriminator,
    gen_state: &AdamState,
    disc_state: &AdamState,
) -> TrainingSnapshot {
    TrainingSnapshot {
        gen_params: gen.params.clone(),
        disc_params: disc.params.clone(),
        gen_state: gen_state.clone(),
        disc_state: disc_state.clone(),
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    (seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// [-1, 1] into [0, 1], the domain the image metrics are defined on.
fn unit_range(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5)
}

fn scalar_value(tape: &GradientTape<f32>, id: crate::tape::NodeId) -> f64 {
    tape.value(id).data()[0] as f64
}

fn check_loss(step: usize, name: &str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Numeric(format!("step {step}: {name} is {value}")));
    }
    Ok(value)
}

/// Sequential real-then-fake discriminator update on a detached fake batch.
/// Returns the real-half and fake-half losses as each half saw them.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_update(
    disc: &mut Discriminator,
    disc_state: &mut AdamState,
    x_n: &Tensor<f32>,
    x_np1: &Tensor<f32>,
    x_np2: &Tensor<f32>,
    fake: &Tensor<f32>,
    opt: &OptimizerConfig,
    step: usize,
) -> Result<(f64, f64)> {
    let mut tape = GradientTape::new();
    let binding = disc.bind_trainable(&mut tape);
    let binding = binding?;
    let a = tape.leaf(x_n.clone());
    let b = tape.leaf(x_np2.clone());
    let real = tape.leaf(x_np1.clone());
    let out = disc.forward(&mut tape, &binding, a, b, real, Pass::Train { dropout_seed: 0 })?;
    let loss = losses::real_half_loss_on_tape(&mut tape, out.node)?;
    let real_loss = check_loss(step, "discriminator real-half loss", scalar_value(&tape, loss))?;
    let grads = tape.backward(loss)?;
    disc.commit_batch_stats(&out.batch_stats)?;
    adam_step(&mut disc.params, grads.named(), disc_state, opt)?;

    let mut tape = GradientTape::new();
    let binding = disc.bind_trainable(&mut tape)?;
    let a = tape.leaf(x_n.clone());
    let b = tape.leaf(x_np2.clone());
    let fake_leaf = tape.leaf(fake.clone());
    let out = disc.forward(&mut tape, &binding, a, b, fake_leaf, Pass::Train { dropout_seed: 0 })?;
    let loss = losses::fake_half_loss_on_tape(&mut tape, out.node)?;
    let fake_loss = check_loss(step, "discriminator fake-half loss", scalar_value(&tape, loss))?;
    let grads = tape.backward(loss)?;
    disc.commit_batch_stats(&out.batch_stats)?;
    adam_step(&mut disc.params, grads.named(), disc_state, opt)?;

    Ok((real_loss, fake_loss))
}

/// One full adversarial step over a stacked batch. `step` is 1-based and
/// seeds the dropout masks.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    step: usize,
    gen: &mut Generator,
    disc: &mut Discriminator,
    gen_state: &mut AdamState,
    disc_state: &mut AdamState,
    x_n: &Tensor<f32>,
    x_np1: &Tensor<f32>,
    x_np2: &Tensor<f32>,
    train: &TrainConfig,
    opt: &OptimizerConfig,
) -> Result<StepReport> {
    let dropout_seed = mix_seed(train.seed, step as u64);
    let delta = train.delta as f32;

    // Generator forward; its tape stays open until the generator update at
    // the end so the same graph serves both the detached fake batch and the
    // adversarial gradient.
    let mut tape = GradientTape::new();
    let g_binding = gen.bind_trainable(&mut tape)?;
    let a = tape.leaf(x_n.clone());
    let b = tape.leaf(x_np2.clone());
    let real = tape.leaf(x_np1.clone());
    let g_out = gen.forward(&mut tape, &g_binding, a, b, Pass::Train { dropout_seed })?;
    let fake = tape.value(g_out.node).clone();
    gen.commit_batch_stats(&g_out.batch_stats)?;

    let (real_loss, fake_loss) =
        discriminator_update(disc, disc_state, x_n, x_np1, x_np2, &fake, opt, step)?;
    let d_loss = real_loss + fake_loss;

    // Generator update against the updated discriminator, whose parameters
    // join this tape as constants: nothing here may write to them or to its
    // running statistics.
    let d_binding = disc.bind_frozen(&mut tape)?;
    let d_fake = disc.forward(&mut tape, &d_binding, a, b, g_out.node, Pass::Train {
        dropout_seed: 0,
    })?;
    let d_real = disc.forward(&mut tape, &d_binding, a, b, real, Pass::Train {
        dropout_seed: 0,
    })?;
    let d_fake_score = tape.mean_all(d_fake.node);
    let d_real_score = tape.mean_all(d_real.node);
    let adv = losses::adversarial_loss_on_tape(&mut tape, d_real_score, d_fake_score, delta)?;
    let total = if train.reconstruction_weight > 0.0 {
        let diff = tape.sub(g_out.node, real)?;
        let penalty = tape.pseudo_huber(diff, delta)?;
        let mean = tape.mean_all(penalty);
        let weighted = tape.affine(mean, train.reconstruction_weight as f32, 0.0);
        tape.add(adv, weighted)?
    } else {
        adv
    };
    let g_loss = check_loss(step, "generator loss", scalar_value(&tape, total))?;
    let grads = tape.backward(total)?;
    adam_step(&mut gen.params, grads.named(), gen_state, opt)?;

    let reference = unit_range(x_np1);
    let predicted = unit_range(&fake);
    let psnr = metrics::psnr(&reference, &predicted)?;
    let ssim = metrics::ssim_global(&reference, &predicted, &SsimConstants::default())?;
    StepReport::validated(step, d_loss, g_loss, psnr, ssim)
}

struct Scheduler {
    kind: Schedule,
    order: Vec<usize>,
    pos: usize,
    counter: usize,
    rng: ChaCha8Rng,
}

impl Scheduler {
    fn new(kind: Schedule, len: usize, seed: u64) -> Scheduler {
        let mut s = Scheduler {
            kind,
            order: (0..len).collect(),
            pos: 0,
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if kind == Schedule::Shuffled {
            s.order.shuffle(&mut s.rng);
        }
        s
    }

    fn next(&mut self) -> usize {
        match self.kind {
            Schedule::Shuffled => {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                let idx = self.order[self.pos];
                self.pos += 1;
                idx
            }
            Schedule::CyclicPerTriplet { epochs_per_triplet } => {
                let idx = (self.counter / epochs_per_triplet) % self.order.len();
                self.counter += 1;
                idx
            }
        }
    }
}

fn stack_position(dataset: &[TripletTensors], indices: &[usize], pos: usize) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &dataset[i][pos]).collect();
    stack_batch(&refs)
}

/// Runs the full loop over an in-memory dataset. Log rows stream to `log`
/// when given; checkpoints land in `checkpoint_dir` every
/// `checkpoint_every` steps plus a final one at completion.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    dataset: &[TripletTensors],
    gen_config: GeneratorConfig,
    disc_base_filters: usize,
    train: &TrainConfig,
    opt: &OptimizerConfig,
    mut log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
    progress: bool,
) -> Result<(TrainedModels, Vec<StepReport>)> {
    gen_config.validate()?;
    train.validate()?;
    opt.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for (i, triplet) in dataset.iter().enumerate() {
        for t in triplet {
            let s = t.shape();
            if s.h != gen_config.image_size || s.w != gen_config.image_size || s.c != 3 {
                return Err(Error::Dimension {
                    axis: "height",
                    detail: format!(
                        "triplet {i} frame is {s}, model wants (1, 3, {0}, {0})",
                        gen_config.image_size
                    ),
                });
            }
        }
    }

    let mut gen = Generator::build(gen_config, train.seed)?;
    let disc_config = DiscriminatorConfig::new(gen_config.image_size, disc_base_filters);
    let mut disc = Discriminator::build(disc_config, train.seed.wrapping_add(1))?;
    let mut gen_state = AdamState::for_params(&gen.params);
    let mut disc_state = AdamState::for_params(&disc.params);
    let mut scheduler = Scheduler::new(train.schedule, dataset.len(), mix_seed(train.seed, 3));

    if progress {
        eprintln!(
            "run: steps={} batch={} delta={} lr={} beta1={} beta2={} lambda={} seed={} size={}",
            train.steps,
            train.batch_size,
            train.delta,
            opt.learning_rate,
            opt.beta1,
            opt.beta2,
            train.reconstruction_weight,
            train.seed,
            gen_config.image_size,
        );
    }
    if let Some(log) = log.as_deref_mut() {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(Path::new("<log>"), e))?;
    }

    let mut reports = Vec::with_capacity(train.steps);
    for step in 1..=train.steps {
        let indices: Vec<usize> = (0..train.batch_size).map(|_| scheduler.next()).collect();
        let x_n = stack_position(dataset, &indices, 0)?;
        let x_np1 = stack_position(dataset, &indices, 1)?;
        let x_np2 = stack_position(dataset, &indices, 2)?;
        let report = train_step(
            step,
            &mut gen,
            &mut disc,
            &mut gen_state,
            &mut disc_state,
            &x_n,
            &x_np1,
            &x_np2,
            train,
            opt,
        )?;
        if let Some(log) = log.as_deref_mut() {
            writeln!(log, "{}", report.csv_row()).map_err(|e| Error::io(Path::new("<log>"), e))?;
        }
        if progress && (step % train.log_every == 0 || step == train.steps) {
            eprintln!(
                "step {step}/{}: d_loss={:.5} g_loss={:.5} psnr={:.2} ssim={:.4}",
                train.steps, report.d_loss, report.g_loss, report.psnr, report.ssim
            );
        }
        reports.push(report);
        if let Some(dir) = checkpoint_dir {
            if step % train.checkpoint_every == 0 {
                let snap = snapshot_parts(&gen, &disc, &gen_state, &disc_state);
                save_checkpoint(&snap, &dir.join(format!("checkpoint_{step:06}.ckpt")))?;
            }
        }
    }

    let models = TrainedModels { gen, disc, gen_state, disc_state };
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&models.snapshot(), &dir.join("checkpoint_final.ckpt"))?;
    }
    Ok((models, reports))
}

/// Loads every triplet of one split into memory.
pub fn load_split_tensors(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    split: Split,
    image_size: usize,
) -> Result<Vec<TripletTensors>> {
    manifest
        .split_records(split)
        .into_iter()
        .map(|r| load_record_frames(r, manifest_dir, image_size))
        .collect()
}

pub struct TrainArtifacts {
    pub models: TrainedModels,
    pub reports: Vec<StepReport>,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Manifest-level entry point: loads the train split, streams the log to
/// `<out_dir>/training_log.csv`, and checkpoints into `out_dir`.
pub fn train(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    gen_config: GeneratorConfig,
    disc_base_filters: usize,
    train_cfg: &TrainConfig,
    opt: &OptimizerConfig,
    out_dir: &Path,
) -> Result<TrainArtifacts> {
    gen_config.validate()?;
    train_cfg.validate()?;
    opt.validate()?;
    let dataset =
        load_split_tensors(manifest, manifest_dir, Split::Train, gen_config.image_size)?;
    if dataset.is_empty() {
        return Err(Error::Config("manifest has no train records".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("training_log.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let (models, reports) = run_training(
        &dataset,
        gen_config,
        disc_base_filters,
        train_cfg,
        opt,
        Some(&mut log),
        Some(out_dir),
        true,
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainArtifacts {
        models,
        reports,
        log_path,
        final_checkpoint: out_dir.join("checkpoint_final.ckpt"),
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct EvalRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub min_psnr: f64,
    pub max_psnr: f64,
    pub mean_ssim: f64,
    pub min_ssim: f64,
    pub max_ssim: f64,
}

/// Predicts the middle frame of every triplet and scores it against the real
/// one.
pub fn evaluate_dataset(gen: &Generator, dataset: &[TripletTensors]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for (index, [x_n, x_np1, x_np2]) in dataset.iter().enumerate() {
        let predicted = gen.predict(x_n, x_np2)?;
        let reference = unit_range(x_np1);
        let predicted = unit_range(&predicted);
        rows.push(EvalRow {
            index,
            psnr: metrics::psnr(&reference, &predicted)?,
            ssim: metrics::ssim_global(&reference, &predicted, &SsimConstants::default())?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        min_psnr: rows.iter().map(|r| r.psnr).fold(f64::INFINITY, f64::min),
        max_psnr: rows.iter().map(|r| r.psnr).fold(f64::NEG_INFINITY, f64::max),
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        min_ssim: rows.iter().map(|r| r.ssim).fold(f64::INFINITY, f64::min),
        max_ssim: rows.iter().map(|r| r.ssim).fold(f64::NEG_INFINITY, f64::max),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Delta sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub delta: f64,
    /// Mean test PSNR and SSIM; None when training or evaluation failed.
    pub outcome: Option<(f64, f64)>,
}

/// Trains a fresh model per delta from the same seed and scores it on the
/// test split. One CSV row per delta lands in `out` as soon as it is known;
/// a failed delta yields a `failed,failed` row and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn delta_sweep(
    train_set: &[TripletTensors],
    test_set: &[TripletTensors],
    gen_config: GeneratorConfig,
    disc_base_filters: usize,
    base_train: &TrainConfig,
    opt: &OptimizerConfig,
    deltas: &[f64],
    out: &mut dyn Write,
) -> Result<Vec<SweepRow>> {
    if deltas.is_empty() {
        return Err(Error::Config("delta list is empty".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Config("sweep needs a non-empty test split".into()));
    }
    let io_err = |e| Error::io(Path::new("<sweep>"), e);
    writeln!(out, "{SWEEP_HEADER}").map_err(io_err)?;
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let cfg = TrainConfig { delta, ..*base_train };
        let outcome = run_training(
            train_set,
            gen_config,
            disc_base_filters,
            &cfg,
            opt,
            None,
            None,
            false,
        )
        .and_then(|(models, _)| evaluate_dataset(&models.gen, test_set));
        let row = match outcome {
            Ok(report) => {
                writeln!(out, "{},{},{}", delta, report.mean_psnr, report.mean_ssim)
                    .map_err(io_err)?;
                SweepRow { delta, outcome: Some((report.mean_psnr, report.mean_ssim)) }
            }
            Err(err) => {
                eprintln!("delta {delta}: {err}");
                writeln!(out, "{delta},failed,failed").map_err(io_err)?;
                SweepRow { delta, outcome: None }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_moving_square;

    fn tiny_dataset(count: usize, size: usize) -> Vec<TripletTensors> {
        synth_moving_square(count, size, 77)
            .unwrap()
            .into_iter()
            .map(|t| [t.x_n.image, t.x_np1.image, t.x_np2.image])
            .collect()
    }

    fn tiny_configs() -> (GeneratorConfig, TrainConfig, OptimizerConfig) {
        let gen_cfg = GeneratorConfig::new(32, 2);
        let train_cfg = TrainConfig { steps: 3, checkpoint_every: 2, ..Default::default() };
        (gen_cfg, train_cfg, OptimizerConfig::default())
    }

    #[test]
    fn config_defaults_follow_the_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.steps, 15000);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.delta, 0.5);
        assert_eq!(c.reconstruction_weight, 0.0);
        assert!(c.validate().is_ok());
        assert!(TrainConfig { delta: 0.0, ..c }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..c }.validate().is_err());
        assert!(TrainConfig { reconstruction_weight: -0.5, ..c }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_both_networks_bit_identical() {
        let dataset = tiny_dataset(2, 32);
        let mut gen = Generator::build(GeneratorConfig::new(32, 2), 1).unwrap();
        let mut disc = Discriminator::build(DiscriminatorConfig::new(32, 2), 2).unwrap();
        let gen_before = gen.params.clone();
        let disc_before = disc.params.clone();
        let mut gs = AdamState::for_params(&gen.params);
        let mut ds = AdamState::for_params(&disc.params);
        let train = TrainConfig::default();
        let opt = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        let report = train_step(
            1, &mut gen, &mut disc, &mut gs, &mut ds,
            &dataset[0][0], &dataset[0][1], &dataset[0][2], &train, &opt,
        )
        .unwrap();
        // Trainable parameters must not move; running statistics may.
        for (name, tensor) in gen.params.trainable_iter() {
            assert_eq!(tensor, gen_before.get(name).unwrap(), "{name} moved");
        }
        for (name, tensor) in disc.params.trainable_iter() {
            assert_eq!(tensor, disc_before.get(name).unwrap(), "{name} moved");
        }
        assert!(report.d_loss >= 0.0 && report.g_loss >= 0.0);
    }

    #[test]
    fn step_losses_are_finite_and_non_negative() {
        let dataset = tiny_dataset(1, 32);
        let mut gen = Generator::build(GeneratorConfig::new(32, 2), 3).unwrap();
        let mut disc = Discriminator::build(DiscriminatorConfig::new(32, 2), 4).unwrap();
        let mut gs = AdamState::for_params(&gen.params);
        let mut ds = AdamState::for_params(&disc.params);
        let report = train_step(
            1, &mut gen, &mut disc, &mut gs, &mut ds,
            &dataset[0][0], &dataset[0][1], &dataset[0][2],
            &TrainConfig::default(), &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(report.d_loss > 0.0);
        assert!(report.g_loss >= 0.0);
        assert!(report.psnr.is_finite());
        assert!((-1.0..=1.0).contains(&report.ssim));
    }

    #[test]
    fn discriminator_overfits_a_fixed_pair() {
        let dataset = tiny_dataset(1, 32);
        let gen = Generator::build(GeneratorConfig::new(32, 4), 5).unwrap();
        let mut disc = Discriminator::build(DiscriminatorConfig::new(32, 4), 6).unwrap();
        let mut ds = AdamState::for_params(&disc.params);
        let fake = gen.predict(&dataset[0][0], &dataset[0][2]).unwrap();
        let opt = OptimizerConfig { learning_rate: 1e-3, ..Default::default() };
        let mut last = f64::INFINITY;
        for step in 1..=200 {
            let (real_loss, fake_loss) = discriminator_update(
                &mut disc, &mut ds,
                &dataset[0][0], &dataset[0][1], &dataset[0][2], &fake, &opt, step,
            )
            .unwrap();
            last = real_loss + fake_loss;
        }
        assert!(last < 0.1, "discriminator loss stuck at {last}");
    }

    #[test]
    fn generator_gradients_vanish_under_the_discriminator_loss() {
        // The fake batch enters the discriminator update detached; with the
        // generator's parameters registered on the same tape, every one of
        // their gradients must come back zero.
        let dataset = tiny_dataset(1, 32);
        let gen = Generator::build(GeneratorConfig::new(32, 2), 7).unwrap();
        let disc = Discriminator::build(DiscriminatorConfig::new(32, 2), 8).unwrap();
        let mut tape = GradientTape::new();
        let g_binding = gen.bind_trainable(&mut tape).unwrap();
        let a = tape.leaf(dataset[0][0].clone());
        let b = tape.leaf(dataset[0][2].clone());
        let g_out = gen
            .forward(&mut tape, &g_binding, a, b, Pass::Train { dropout_seed: 1 })
            .unwrap();
        let detached = tape.leaf(tape.value(g_out.node).clone());
        let d_binding = disc.bind_trainable(&mut tape).unwrap();
        let d_out = disc
            .forward(&mut tape, &d_binding, a, b, detached, Pass::Train { dropout_seed: 0 })
            .unwrap();
        let loss = losses::fake_half_loss_on_tape(&mut tape, d_out.node).unwrap();
        let grads = tape.backward(loss).unwrap();
        let named = grads.named();
        for (name, _) in gen.params.trainable_iter() {
            let g = &named[name];
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} received gradient");
        }
        // The discriminator itself did get signal.
        let total: f64 = named["stage1.conv.weight"].data().iter().map(|v| v.abs() as f64).sum();
        assert!(total > 0.0);
    }

    #[test]
    fn run_training_writes_logs_and_checkpoints_on_schedule() {
        let dataset = tiny_dataset(2, 32);
        let (gen_cfg, train_cfg, opt) = tiny_configs();
        let dir = tempfile::tempdir().unwrap();
        let mut log = Vec::new();
        let (_, reports) = run_training(
            &dataset, gen_cfg, 2, &train_cfg, &opt,
            Some(&mut log), Some(dir.path()), false,
        )
        .unwrap();
        assert_eq!(reports.len(), 3);
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(dir.path().join("checkpoint_000002.ckpt").exists());
        assert!(!dir.path().join("checkpoint_000003.ckpt").exists());
        assert!(dir.path().join("checkpoint_final.ckpt").exists());
    }

    #[test]
    fn identical_seeds_reproduce_identical_runs() {
        let dataset = tiny_dataset(2, 32);
        let (gen_cfg, train_cfg, opt) = tiny_configs();
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let (models_a, _) =
            run_training(&dataset, gen_cfg, 2, &train_cfg, &opt, Some(&mut log_a), None, false)
                .unwrap();
        let (models_b, _) =
            run_training(&dataset, gen_cfg, 2, &train_cfg, &opt, Some(&mut log_b), None, false)
                .unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(models_a.snapshot(), models_b.snapshot());
        let different = TrainConfig { seed: 43, ..train_cfg };
        let (models_c, _) =
            run_training(&dataset, gen_cfg, 2, &different, &opt, None, None, false).unwrap();
        assert_ne!(models_a.snapshot(), models_c.snapshot());
    }

    #[test]
    fn scheduler_shuffled_covers_every_index_each_epoch() {
        let mut s = Scheduler::new(Schedule::Shuffled, 5, 1);
        for _ in 0..3 {
            let mut epoch: Vec<usize> = (0..5).map(|_| s.next()).collect();
            epoch.sort_unstable();
            assert_eq!(epoch, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn scheduler_cyclic_dwells_then_advances() {
        let mut s = Scheduler::new(Schedule::CyclicPerTriplet { epochs_per_triplet: 3 }, 2, 1);
        let seq: Vec<usize> = (0..8).map(|_| s.next()).collect();
        assert_eq!(seq, vec![0, 0, 0, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn evaluation_reports_cover_the_dataset() {
        let dataset = tiny_dataset(3, 32);
        let gen = Generator::build(GeneratorConfig::new(32, 2), 11).unwrap();
        let report = evaluate_dataset(&gen, &dataset).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.min_psnr <= report.mean_psnr && report.mean_psnr <= report.max_psnr);
        assert!(report.rows.iter().all(|r| r.psnr.is_finite()));
        assert!(report.rows.iter().all(|r| (-1.0..=1.0).contains(&r.ssim)));
        assert!(evaluate_dataset(&gen, &[]).is_err());
    }

    #[test]
    fn sweep_emits_one_row_per_delta_and_survives_failures() {
        let dataset = tiny_dataset(2, 32);
        let (gen_cfg, train_cfg, opt) = tiny_configs();
        let train_cfg = TrainConfig { steps: 2, ..train_cfg };
        let mut out = Vec::new();
        let rows = delta_sweep(
            &dataset, &dataset[..1], gen_cfg, 2, &train_cfg, &opt,
            &[0.5, -1.0, 0.25], &mut out,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].outcome.is_some());
        assert!(rows[1].outcome.is_none(), "negative delta must fail validation");
        assert!(rows[2].outcome.is_some());
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[2].ends_with("failed,failed"));
    }

    #[test]
    fn pixel_term_changes_the_generator_loss() {
        let dataset = tiny_dataset(1, 32);
        let run = |weight: f64| {
            let mut gen = Generator::build(GeneratorConfig::new(32, 2), 1).unwrap();
            let mut disc = Discriminator::build(DiscriminatorConfig::new(32, 2), 2).unwrap();
            let mut gs = AdamState::for_params(&gen.params);
            let mut ds = AdamState::for_params(&disc.params);
            let train = TrainConfig { reconstruction_weight: weight, ..Default::default() };
            train_step(
                1, &mut gen, &mut disc, &mut gs, &mut ds,
                &dataset[0][0], &dataset[0][1], &dataset[0][2],
                &train, &OptimizerConfig::default(),
            )
            .unwrap()
            .g_loss
        };
        let bare = run(0.0);
        let weighted = run(10.0);
        assert!(weighted > bare, "pixel term should add positive loss: {weighted} vs {bare}");
    }
}

