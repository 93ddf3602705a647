//! Network definitions: a U-Net style generator that predicts the frame
//! between two inputs, and a strided patch discriminator that scores local
//! regions as real. Parameters live in flat name-addressed sets so the
//! optimizer and the checkpoint format stay independent of the wiring here.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{ChannelStats, GradientTape, NodeId};
use crate::tensor::{Shape, Tensor};

pub const FRAME_CHANNELS: usize = 3;
/// The generator conditions on the two bracketing frames, stacked channelwise.
pub const GEN_IN_CHANNELS: usize = 2 * FRAME_CHANNELS;
/// The discriminator sees the bracketing pair plus the candidate middle frame.
pub const DISC_IN_CHANNELS: usize = 3 * FRAME_CHANNELS;

pub const LEAKY_SLOPE: f32 = 0.2;
pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.99;
pub const INIT_STD: f64 = 0.02;
const STRIDED_KERNEL: usize = 4;
const UNIT_KERNEL: usize = 3;

/// Ordered map from parameter name to tensor. Iteration is lexicographic, so
/// every walk over a set is deterministic. Running statistics are stored here
/// too but flagged non-trainable.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor<f32>,
    pub trainable: bool,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    fn insert(&mut self, name: String, tensor: Tensor<f32>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} inserted twice")));
        }
        self.entries.insert(name, Entry { tensor, trainable });
        Ok(())
    }

    pub fn insert_trainable(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        self.insert(name.into(), t, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        self.insert(name.into(), t, false)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry)> {
        self.entries.iter()
    }

    pub fn trainable_iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(n, e)| (n, &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn trainable_value_count(&self) -> usize {
        self.trainable_iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape ids of the parameters of one network bound onto one tape.
pub struct TapeBinding {
    ids: BTreeMap<String, NodeId>,
}

impl TapeBinding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound on this tape")))
    }
}

fn bind(
    params: &ParameterSet,
    tape: &mut GradientTape<f32>,
    trainable: bool,
) -> Result<TapeBinding> {
    let mut ids = BTreeMap::new();
    for (name, entry) in params.iter() {
        if !entry.trainable {
            continue; // running statistics are read by value, never bound
        }
        let id = if trainable {
            tape.parameter(name.clone(), entry.tensor.clone())?
        } else {
            tape.leaf(entry.tensor.clone())
        };
        ids.insert(name.clone(), id);
    }
    Ok(TapeBinding { ids })
}

/// How a forward pass treats batchnorm and dropout.
#[derive(Clone, Copy, Debug)]
pub enum Pass {
    /// Batch statistics, dropout active. The per-layer statistics are
    /// returned to the caller, which decides whether to fold them into the
    /// running buffers.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Infer,
}

pub struct ForwardOutput {
    pub node: NodeId,
    /// Batch statistics per batchnorm layer prefix, empty in inference mode.
    pub batch_stats: Vec<(String, ChannelStats<f32>)>,
}

fn site_seed(base: u64, site: u64) -> u64 {
    base ^ (site + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn is_power_of_two_at_least(v: usize, floor: usize) -> bool {
    v >= floor && v.is_power_of_two()
}

fn check_frame(t_shape: Shape, image_size: usize, what: &str) -> Result<()> {
    if t_shape.c != FRAME_CHANNELS {
        return Err(Error::Dimension {
            axis: "channels",
            detail: format!("{what} has {} channels, frames carry {}", t_shape.c, FRAME_CHANNELS),
        });
    }
    if t_shape.h != image_size || t_shape.w != image_size {
        return Err(Error::Dimension {
            axis: "height",
            detail: format!(
                "{what} is {}x{}, model is configured for {image_size}x{image_size}",
                t_shape.h, t_shape.w
            ),
        });
    }
    if t_shape.n == 0 {
        return Err(Error::Dimension { axis: "batch", detail: format!("{what} has empty batch") });
    }
    Ok(())
}

/// Multiplier sequence for the strided filter plan: 1, 2, 4, then 8 for every
/// deeper layer.
fn plan_multiplier(j: usize) -> usize {
    [1, 2, 4, 8][j.min(3)]
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_filters: usize,
    pub dropout_rate: f64,
}

impl GeneratorConfig {
    pub fn new(image_size: usize, base_filters: usize) -> GeneratorConfig {
        GeneratorConfig { image_size, base_filters, dropout_rate: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_power_of_two_at_least(self.image_size, 32) {
            return Err(Error::Config(format!(
                "image_size {} must be a power of two of at least 32",
                self.image_size
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Number of halvings down to 1x1; also the decoder depth.
    fn levels(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    pub fn encoder_depth(&self) -> usize {
        self.levels() + 1
    }

    pub fn decoder_depth(&self) -> usize {
        self.levels()
    }

    /// Output channels of strided encoder layer j (0-based).
    fn plan(&self, j: usize) -> usize {
        self.base_filters * plan_multiplier(j)
    }
}

struct EncSpec {
    name: String,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    bn: bool,
}

struct DecSpec {
    name: String,
    in_c: usize,
    out_c: usize,
    /// Strided encoder output concatenated before the layer, if any.
    skip: Option<usize>,
    dropout: bool,
    final_tanh: bool,
}

fn encoder_specs(cfg: &GeneratorConfig) -> Vec<EncSpec> {
    let levels = cfg.levels();
    let mut specs = Vec::with_capacity(levels + 1);
    specs.push(EncSpec {
        name: "enc1".into(),
        in_c: GEN_IN_CHANNELS,
        out_c: cfg.base_filters,
        kernel: UNIT_KERNEL,
        stride: 1,
        bn: true,
    });
    let mut prev = cfg.base_filters;
    for j in 0..levels {
        let out_c = cfg.plan(j);
        // The deepest layer produces 1x1 activations; normalizing a single
        // spatial site per image is degenerate at batch size 1, so the
        // bottleneck carries no batchnorm.
        let bn = j + 1 != levels;
        specs.push(EncSpec {
            name: format!("enc{}", j + 2),
            in_c: prev,
            out_c,
            kernel: STRIDED_KERNEL,
            stride: 2,
            bn,
        });
        prev = out_c;
    }
    specs
}

fn decoder_specs(cfg: &GeneratorConfig) -> Vec<DecSpec> {
    let levels = cfg.levels();
    let mut specs = Vec::with_capacity(levels);
    let mut prev = cfg.plan(levels - 1); // bottleneck width
    for k in 1..=levels {
        let final_tanh = k == levels;
        let skip = if k == 1 { None } else { Some(levels - k) };
        let in_c = prev + skip.map_or(0, |j| cfg.plan(j));
        let out_c = if final_tanh { FRAME_CHANNELS } else { cfg.plan(levels - k - 1) };
        specs.push(DecSpec {
            name: format!("dec{k}"),
            in_c,
            out_c,
            skip,
            dropout: k <= 3,
            final_tanh,
        });
        prev = out_c;
    }
    specs
}

#[allow(clippy::too_many_arguments)]
fn init_conv(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    kind: &str,
    out_c: usize,
    in_c: usize,
    kernel: usize,
    bn: bool,
) -> Result<()> {
    let w = Tensor::gaussian(Shape::new(out_c, in_c, kernel, kernel), INIT_STD, rng);
    params.insert_trainable(format!("{prefix}.{kind}.weight"), w)?;
    params.insert_trainable(
        format!("{prefix}.{kind}.bias"),
        Tensor::zeros(Shape::new(1, out_c, 1, 1)),
    )?;
    if bn {
        let c = Shape::new(1, out_c, 1, 1);
        params.insert_trainable(format!("{prefix}.bn.gamma"), Tensor::filled(c, 1.0))?;
        params.insert_trainable(format!("{prefix}.bn.beta"), Tensor::zeros(c))?;
        params.insert_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(c))?;
        params.insert_buffer(format!("{prefix}.bn.running_var"), Tensor::filled(c, 1.0))?;
    }
    Ok(())
}

pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParameterSet,
}

impl Generator {
    /// Fresh parameters: weights from N(0, 0.02^2), biases zero, batchnorm at
    /// identity. The same seed always produces bit-identical parameters.
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Generator> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for spec in encoder_specs(&config) {
            init_conv(&mut params, &mut rng, &spec.name, "conv", spec.out_c, spec.in_c, spec.kernel, spec.bn)?;
        }
        for spec in decoder_specs(&config) {
            init_conv(
                &mut params,
                &mut rng,
                &spec.name,
                "tconv",
                spec.out_c,
                spec.in_c,
                STRIDED_KERNEL,
                false,
            )?;
        }
        Ok(Generator { config, params })
    }

    /// Reassembles a generator around existing parameters (e.g. from a
    /// checkpoint). Geometry is inferred from the parameter shapes; the
    /// dropout rate is not recorded there and keeps its default, which only
    /// matters if training resumes.
    pub fn from_params(params: ParameterSet) -> Result<Generator> {
        let mut enc_count = 0usize;
        while params.contains(&format!("enc{}.conv.weight", enc_count + 1)) {
            enc_count += 1;
        }
        if enc_count < 2 {
            return Err(Error::Format {
                offset: 0,
                detail: "parameter set contains no encoder stack".into(),
            });
        }
        let base_filters = params.get("enc1.conv.weight")?.shape().n;
        let image_size = 1usize << (enc_count - 1);
        let config = GeneratorConfig::new(image_size, base_filters);
        validate_generator_shapes(&config, &params)?;
        Ok(Generator { config, params })
    }

    pub fn bind_trainable(&self, tape: &mut GradientTape<f32>) -> Result<TapeBinding> {
        bind(&self.params, tape, true)
    }

    pub fn bind_frozen(&self, tape: &mut GradientTape<f32>) -> Result<TapeBinding> {
        bind(&self.params, tape, false)
    }

    /// Runs the network over a tape. `x_n` and `x_np2` are the bracketing
    /// frames as (N, 3, S, S) nodes on the same tape.
    pub fn forward(
        &self,
        tape: &mut GradientTape<f32>,
        binding: &TapeBinding,
        x_n: NodeId,
        x_np2: NodeId,
        pass: Pass,
    ) -> Result<ForwardOutput> {
        check_frame(tape.shape(x_n), self.config.image_size, "first frame")?;
        check_frame(tape.shape(x_np2), self.config.image_size, "third frame")?;
        if tape.shape(x_n).n != tape.shape(x_np2).n {
            return Err(Error::Dimension {
                axis: "batch",
                detail: format!(
                    "frame batches differ: {} vs {}",
                    tape.shape(x_n).n,
                    tape.shape(x_np2).n
                ),
            });
        }
        let mut batch_stats = Vec::new();
        let mut cur = tape.concat_channels(x_n, x_np2)?;
        let mut enc_outputs = Vec::new();
        for spec in encoder_specs(&self.config) {
            let w = binding.id(&format!("{}.conv.weight", spec.name))?;
            let b = binding.id(&format!("{}.conv.bias", spec.name))?;
            cur = tape.conv2d(cur, w, b, spec.stride, 1)?;
            if spec.bn {
                cur = self.apply_bn(tape, binding, &spec.name, cur, pass, &mut batch_stats)?;
            }
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            enc_outputs.push(cur);
        }
        for (k, spec) in decoder_specs(&self.config).iter().enumerate() {
            if let Some(j) = spec.skip {
                // Strided encoder layer j is enc_outputs[j + 1] (enc1 is the
                // stride-1 stem).
                cur = tape.concat_channels(cur, enc_outputs[j + 1])?;
            }
            let w = binding.id(&format!("{}.tconv.weight", spec.name))?;
            let b = binding.id(&format!("{}.tconv.bias", spec.name))?;
            cur = tape.conv2d_transpose(cur, w, b, 2, 1)?;
            if spec.final_tanh {
                cur = tape.tanh(cur);
            } else {
                cur = tape.relu(cur);
                if spec.dropout {
                    if let Pass::Train { dropout_seed } = pass {
                        cur = tape.dropout(
                            cur,
                            self.config.dropout_rate,
                            site_seed(dropout_seed, k as u64),
                        )?;
                    }
                }
            }
        }
        Ok(ForwardOutput { node: cur, batch_stats })
    }

    fn apply_bn(
        &self,
        tape: &mut GradientTape<f32>,
        binding: &TapeBinding,
        prefix: &str,
        x: NodeId,
        pass: Pass,
        batch_stats: &mut Vec<(String, ChannelStats<f32>)>,
    ) -> Result<NodeId> {
        apply_bn_common(&self.params, tape, binding, prefix, x, pass, batch_stats)
    }

    /// Folds training-pass batch statistics into the running buffers.
    pub fn commit_batch_stats(&mut self, stats: &[(String, ChannelStats<f32>)]) -> Result<()> {
        commit_stats_common(&mut self.params, stats)
    }

    /// Inference convenience: predicted middle frame for a pair of frames.
    pub fn predict(&self, x_n: &Tensor<f32>, x_np2: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = GradientTape::new();
        let binding = self.bind_frozen(&mut tape)?;
        let a = tape.leaf(x_n.clone());
        let b = tape.leaf(x_np2.clone());
        let out = self.forward(&mut tape, &binding, a, b, Pass::Infer)?;
        Ok(tape.value(out.node).clone())
    }
}

fn apply_bn_common(
    params: &ParameterSet,
    tape: &mut GradientTape<f32>,
    binding: &TapeBinding,
    prefix: &str,
    x: NodeId,
    pass: Pass,
    batch_stats: &mut Vec<(String, ChannelStats<f32>)>,
) -> Result<NodeId> {
    let gamma = binding.id(&format!("{prefix}.bn.gamma"))?;
    let beta = binding.id(&format!("{prefix}.bn.beta"))?;
    match pass {
        Pass::Train { .. } => {
            let (y, stats) = tape.batchnorm_train(x, gamma, beta, BN_EPSILON)?;
            batch_stats.push((format!("{prefix}.bn"), stats));
            Ok(y)
        }
        Pass::Infer => {
            let mean = params.get(&format!("{prefix}.bn.running_mean"))?;
            let var = params.get(&format!("{prefix}.bn.running_var"))?;
            tape.batchnorm_infer(x, gamma, beta, mean.data(), var.data(), BN_EPSILON)
        }
    }
}

fn commit_stats_common(
    params: &mut ParameterSet,
    stats: &[(String, ChannelStats<f32>)],
) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let buf = params.get_mut(&format!("{prefix}.{suffix}"))?;
            for (old, &new) in buf.data_mut().iter_mut().zip(batch) {
                *old = BN_MOMENTUM * *old + (1.0 - BN_MOMENTUM) * new;
            }
        }
    }
    Ok(())
}

/// Checks that a parameter set has exactly the names and shapes the config
/// calls for, reporting the first offender in lexicographic order.
pub fn validate_generator_shapes(cfg: &GeneratorConfig, params: &ParameterSet) -> Result<()> {
    cfg.validate()?;
    let mut expected: BTreeMap<String, Shape> = BTreeMap::new();
    for spec in encoder_specs(cfg) {
        expected.insert(
            format!("{}.conv.weight", spec.name),
            Shape::new(spec.out_c, spec.in_c, spec.kernel, spec.kernel),
        );
        expected.insert(format!("{}.conv.bias", spec.name), Shape::new(1, spec.out_c, 1, 1));
        if spec.bn {
            let c = Shape::new(1, spec.out_c, 1, 1);
            for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                expected.insert(format!("{}.bn.{suffix}", spec.name), c);
            }
        }
    }
    for spec in decoder_specs(cfg) {
        expected.insert(
            format!("{}.tconv.weight", spec.name),
            Shape::new(spec.out_c, spec.in_c, STRIDED_KERNEL, STRIDED_KERNEL),
        );
        expected.insert(format!("{}.tconv.bias", spec.name), Shape::new(1, spec.out_c, 1, 1));
    }
    validate_shapes(&expected, params)
}

fn validate_shapes(expected: &BTreeMap<String, Shape>, params: &ParameterSet) -> Result<()> {
    for (name, shape) in expected {
        let got = params.get(name).map_err(|_| Error::Dimension {
            axis: "numel",
            detail: format!("parameter {name} missing"),
        })?;
        if got.shape() != *shape {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("parameter {name}: expected {shape}, found {}", got.shape()),
            });
        }
    }
    for (name, _) in params.iter() {
        if !expected.contains_key(name) {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("unexpected parameter {name}"),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub base_filters: usize,
}

struct StageSpec {
    name: String,
    in_c: usize,
    out_c: usize,
    stride: usize,
    bn: bool,
    sigmoid: bool,
}

fn stage_specs(cfg: &DiscriminatorConfig) -> Vec<StageSpec> {
    let b = cfg.base_filters;
    let widths = [(DISC_IN_CHANNELS, b), (b, 2 * b), (2 * b, 4 * b), (4 * b, 8 * b), (8 * b, 1)];
    widths
        .iter()
        .enumerate()
        .map(|(i, &(in_c, out_c))| StageSpec {
            name: format!("stage{}", i + 1),
            in_c,
            out_c,
            stride: if i < 3 { 2 } else { 1 },
            bn: (1..=3).contains(&i),
            sigmoid: i == 4,
        })
        .collect()
}

impl DiscriminatorConfig {
    pub fn new(image_size: usize, base_filters: usize) -> DiscriminatorConfig {
        DiscriminatorConfig { image_size, base_filters }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_power_of_two_at_least(self.image_size, 32) {
            return Err(Error::Config(format!(
                "image_size {} must be a power of two of at least 32",
                self.image_size
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be at least 1".into()));
        }
        self.patch_extent()?;
        Ok(())
    }

    /// Side length of the square patch score map.
    pub fn patch_extent(&self) -> Result<usize> {
        let mut extent = self.image_size;
        for spec in stage_specs(self) {
            let padded = extent + 2;
            if padded < STRIDED_KERNEL {
                return Err(Error::Config(format!(
                    "image_size {} collapses before the final stage",
                    self.image_size
                )));
            }
            extent = (padded - STRIDED_KERNEL) / spec.stride + 1;
        }
        if extent == 0 {
            return Err(Error::Config(format!(
                "image_size {} produces an empty patch map",
                self.image_size
            )));
        }
        Ok(extent)
    }
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParameterSet,
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for spec in stage_specs(&config) {
            init_conv(
                &mut params,
                &mut rng,
                &spec.name,
                "conv",
                spec.out_c,
                spec.in_c,
                STRIDED_KERNEL,
                spec.bn,
            )?;
        }
        Ok(Discriminator { config, params })
    }

    /// Rebuilds around checkpoint parameters. The patch geometry depends on
    /// the image size, which convolution shapes cannot encode, so it is
    /// supplied by the caller.
    pub fn from_params(params: ParameterSet, image_size: usize) -> Result<Discriminator> {
        let base_filters = params.get("stage1.conv.weight")?.shape().n;
        let config = DiscriminatorConfig::new(image_size, base_filters);
        validate_discriminator_shapes(&config, &params)?;
        Ok(Discriminator { config, params })
    }

    pub fn bind_trainable(&self, tape: &mut GradientTape<f32>) -> Result<TapeBinding> {
        bind(&self.params, tape, true)
    }

    pub fn bind_frozen(&self, tape: &mut GradientTape<f32>) -> Result<TapeBinding> {
        bind(&self.params, tape, false)
    }

    /// Patch score map in (0, 1): probability that each local region of the
    /// candidate is the real middle frame of the bracketing pair.
    pub fn forward(
        &self,
        tape: &mut GradientTape<f32>,
        binding: &TapeBinding,
        x_n: NodeId,
        x_np2: NodeId,
        candidate: NodeId,
        pass: Pass,
    ) -> Result<ForwardOutput> {
        for (what, id) in
            [("first frame", x_n), ("third frame", x_np2), ("candidate frame", candidate)]
        {
            check_frame(tape.shape(id), self.config.image_size, what)?;
        }
        let mut batch_stats = Vec::new();
        let pair = tape.concat_channels(x_n, x_np2)?;
        let mut cur = tape.concat_channels(pair, candidate)?;
        for spec in stage_specs(&self.config) {
            let w = binding.id(&format!("{}.conv.weight", spec.name))?;
            let b = binding.id(&format!("{}.conv.bias", spec.name))?;
            cur = tape.conv2d(cur, w, b, spec.stride, 1)?;
            if spec.bn {
                cur = apply_bn_common(
                    &self.params,
                    tape,
                    binding,
                    &spec.name,
                    cur,
                    pass,
                    &mut batch_stats,
                )?;
            }
            cur = if spec.sigmoid { tape.sigmoid(cur) } else { tape.leaky_relu(cur, LEAKY_SLOPE) };
        }
        Ok(ForwardOutput { node: cur, batch_stats })
    }

    pub fn commit_batch_stats(&mut self, stats: &[(String, ChannelStats<f32>)]) -> Result<()> {
        commit_stats_common(&mut self.params, stats)
    }

    /// Inference convenience: patch score map for a candidate middle frame.
    pub fn score(
        &self,
        x_n: &Tensor<f32>,
        x_np2: &Tensor<f32>,
        candidate: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let mut tape = GradientTape::new();
        let binding = self.bind_frozen(&mut tape)?;
        let a = tape.leaf(x_n.clone());
        let b = tape.leaf(x_np2.clone());
        let c = tape.leaf(candidate.clone());
        let out = self.forward(&mut tape, &binding, a, b, c, Pass::Infer)?;
        Ok(tape.value(out.node).clone())
    }
}

pub fn validate_discriminator_shapes(
    cfg: &DiscriminatorConfig,
    params: &ParameterSet,
) -> Result<()> {
    cfg.validate()?;
    let mut expected: BTreeMap<String, Shape> = BTreeMap::new();
    for spec in stage_specs(cfg) {
        expected.insert(
            format!("{}.conv.weight", spec.name),
            Shape::new(spec.out_c, spec.in_c, STRIDED_KERNEL, STRIDED_KERNEL),
        );
        expected.insert(format!("{}.conv.bias", spec.name), Shape::new(1, spec.out_c, 1, 1));
        if spec.bn {
            let c = Shape::new(1, spec.out_c, 1, 1);
            for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                expected.insert(format!("{}.bn.{suffix}", spec.name), c);
            }
        }
    }
    validate_shapes(&expected, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(n: usize, size: usize, value: f32) -> Tensor<f32> {
        Tensor::filled(Shape::new(n, FRAME_CHANNELS, size, size), value)
    }

    #[test]
    fn generator_depth_follows_image_size() {
        let c256 = GeneratorConfig::new(256, 4);
        assert_eq!(c256.encoder_depth(), 9);
        assert_eq!(c256.decoder_depth(), 8);
        let c64 = GeneratorConfig::new(64, 4);
        assert_eq!(c64.encoder_depth(), 7);
        assert_eq!(c64.decoder_depth(), 6);
    }

    #[test]
    fn generator_layer_names_enumerate_the_stack() {
        let gen = Generator::build(GeneratorConfig::new(256, 2), 1).unwrap();
        for i in 1..=9 {
            assert!(gen.params.contains(&format!("enc{i}.conv.weight")), "enc{i} missing");
        }
        assert!(!gen.params.contains("enc10.conv.weight"));
        for k in 1..=8 {
            assert!(gen.params.contains(&format!("dec{k}.tconv.weight")), "dec{k} missing");
        }
        assert!(!gen.params.contains("dec9.tconv.weight"));
        // The bottleneck carries no batchnorm, every other encoder layer does.
        assert!(gen.params.contains("enc8.bn.gamma"));
        assert!(!gen.params.contains("enc9.bn.gamma"));
    }

    #[test]
    fn generator_build_is_deterministic_per_seed() {
        let a = Generator::build(GeneratorConfig::new(32, 4), 42).unwrap();
        let b = Generator::build(GeneratorConfig::new(32, 4), 42).unwrap();
        let c = Generator::build(GeneratorConfig::new(32, 4), 43).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn generator_parameter_count_matches_plan_arithmetic() {
        let (size, base) = (32usize, 16usize);
        let gen = Generator::build(GeneratorConfig::new(size, base), 0).unwrap();
        // Independent tally over the layer plan.
        let k2 = STRIDED_KERNEL * STRIDED_KERNEL;
        let mut expected = 0usize;
        // enc1: 3x3 stem plus batchnorm.
        expected += base * GEN_IN_CHANNELS * 9 + base + 2 * base;
        let plan = [base, 2 * base, 4 * base, 8 * base, 8 * base];
        let mut prev = base;
        for (j, &out) in plan.iter().enumerate() {
            expected += out * prev * k2 + out;
            if j + 1 != plan.len() {
                expected += 2 * out; // gamma and beta
            }
            prev = out;
        }
        // Decoder: inputs concatenate the skip channels.
        let dec_in = [128, 256, 128, 64, 32usize];
        let dec_out = [128, 64, 32, 16, 3usize];
        for (i, o) in dec_in.iter().zip(&dec_out) {
            expected += o * i * k2 + o;
        }
        assert_eq!(gen.params.trainable_value_count(), expected);
    }

    #[test]
    fn generator_output_shape_matches_input_shape() {
        for size in [32usize, 64] {
            let gen = Generator::build(GeneratorConfig::new(size, 2), 5).unwrap();
            let out = gen.predict(&frame(1, size, 0.1), &frame(1, size, -0.2)).unwrap();
            assert_eq!(out.shape(), Shape::new(1, FRAME_CHANNELS, size, size));
            assert!(out.is_finite());
        }
    }

    #[test]
    fn generator_rejects_frames_of_the_wrong_extent() {
        let gen = Generator::build(GeneratorConfig::new(64, 2), 5).unwrap();
        let err = gen.predict(&frame(1, 32, 0.0), &frame(1, 32, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "height", .. }));
    }

    #[test]
    fn generator_config_validation() {
        assert!(GeneratorConfig::new(48, 4).validate().is_err());
        assert!(GeneratorConfig::new(16, 4).validate().is_err());
        assert!(GeneratorConfig::new(64, 0).validate().is_err());
        assert!(GeneratorConfig::new(64, 4).validate().is_ok());
        let mut c = GeneratorConfig::new(64, 4);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zeroed_generator_with_final_bias_emits_constant_channels() {
        let mut gen = Generator::build(GeneratorConfig::new(32, 2), 3).unwrap();
        let names: Vec<String> = gen.params.trainable_iter().map(|(n, _)| n.clone()).collect();
        let last_bias = format!("dec{}.tconv.bias", gen.config.decoder_depth());
        for name in names {
            let t = gen.params.get_mut(&name).unwrap();
            let v = if name == last_bias { 0.3 } else { 0.0 };
            for slot in t.data_mut() {
                *slot = v;
            }
        }
        let out = gen.predict(&frame(1, 32, 0.5), &frame(1, 32, -0.5)).unwrap();
        let expected = 0.3f32.tanh();
        for &v in out.data() {
            assert!((v - expected).abs() < 1e-6, "got {v}, expected {expected}");
        }
    }

    #[test]
    fn from_params_round_trips_config() {
        let gen = Generator::build(GeneratorConfig::new(64, 4), 9).unwrap();
        let rebuilt = Generator::from_params(gen.params.clone()).unwrap();
        assert_eq!(rebuilt.config.image_size, 64);
        assert_eq!(rebuilt.config.base_filters, 4);
        assert_eq!(rebuilt.params, gen.params);
    }

    #[test]
    fn shape_validation_names_the_offending_parameter() {
        let gen = Generator::build(GeneratorConfig::new(32, 4), 9).unwrap();
        let other = GeneratorConfig::new(64, 4);
        let err = validate_generator_shapes(&other, &gen.params).unwrap_err();
        match err {
            Error::Dimension { detail, .. } => {
                assert!(detail.contains("parameter dec2.tconv.bias"), "detail was: {detail}")
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn discriminator_patch_extents() {
        assert_eq!(DiscriminatorConfig::new(256, 4).patch_extent().unwrap(), 30);
        assert_eq!(DiscriminatorConfig::new(64, 4).patch_extent().unwrap(), 6);
        assert_eq!(DiscriminatorConfig::new(32, 4).patch_extent().unwrap(), 2);
    }

    #[test]
    fn discriminator_scores_stay_inside_unit_interval() {
        let disc = Discriminator::build(DiscriminatorConfig::new(32, 2), 7).unwrap();
        let s = disc.score(&frame(2, 32, 0.3), &frame(2, 32, -0.1), &frame(2, 32, 0.9)).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 2, 2));
        for &v in s.data() {
            assert!(v > 0.0 && v < 1.0, "score {v} outside (0, 1)");
        }
    }

    #[test]
    fn discriminator_has_five_conv_stages_and_three_norms() {
        let disc = Discriminator::build(DiscriminatorConfig::new(64, 4), 7).unwrap();
        let convs = disc.params.iter().filter(|(n, _)| n.ends_with(".conv.weight")).count();
        let norms = disc.params.iter().filter(|(n, _)| n.ends_with(".bn.gamma")).count();
        assert_eq!(convs, 5);
        assert_eq!(norms, 3);
    }

    #[test]
    fn discriminator_from_params_needs_matching_shapes() {
        let disc = Discriminator::build(DiscriminatorConfig::new(64, 4), 7).unwrap();
        let rebuilt = Discriminator::from_params(disc.params.clone(), 64).unwrap();
        assert_eq!(rebuilt.config.base_filters, 4);
        let gen = Generator::build(GeneratorConfig::new(64, 4), 7).unwrap();
        assert!(Discriminator::from_params(gen.params, 64).is_err());
    }

    #[test]
    fn training_forward_reports_batch_statistics() {
        let gen = Generator::build(GeneratorConfig::new(32, 2), 1).unwrap();
        let mut tape = GradientTape::new();
        let binding = gen.bind_trainable(&mut tape).unwrap();
        let a = tape.leaf(frame(2, 32, 0.2));
        let b = tape.leaf(frame(2, 32, -0.3));
        let out = gen.forward(&mut tape, &binding, a, b, Pass::Train { dropout_seed: 4 }).unwrap();
        // Every encoder layer except the bottleneck normalizes.
        assert_eq!(out.batch_stats.len(), gen.config.encoder_depth() - 1);
        assert_eq!(tape.shape(out.node), Shape::new(2, FRAME_CHANNELS, 32, 32));
    }

    #[test]
    fn committing_stats_moves_running_buffers() {
        let mut gen = Generator::build(GeneratorConfig::new(32, 2), 1).unwrap();
        let mut tape = GradientTape::new();
        let binding = gen.bind_trainable(&mut tape).unwrap();
        let a = tape.leaf(frame(2, 32, 0.9));
        let b = tape.leaf(frame(2, 32, 0.9));
        let out = gen.forward(&mut tape, &binding, a, b, Pass::Train { dropout_seed: 4 }).unwrap();
        let before = gen.params.get("enc1.bn.running_mean").unwrap().clone();
        gen.commit_batch_stats(&out.batch_stats).unwrap();
        let after = gen.params.get("enc1.bn.running_mean").unwrap();
        assert_ne!(before.data(), after.data());
    }
}
