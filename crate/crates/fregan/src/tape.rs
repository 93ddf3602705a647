//! Reverse-mode autodiff over rank-4 tensors. A `GradientTape` records every
//! differentiable operation as it executes; `backward` walks the record in
//! reverse and accumulates gradients for named parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    conv2d_backward_input, conv2d_backward_params, conv2d_forward, conv_transpose2d_backward_input,
    conv_transpose2d_backward_params, conv_transpose2d_forward, ConvGeom,
};
use crate::losses::{pseudo_huber_grad_scalar, pseudo_huber_scalar};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(usize);

/// Per-channel batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct ChannelStats<T: Element> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Element> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    ConvTranspose2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    /// `batch_stats` distinguishes training mode (statistics depend on x and
    /// carry gradient) from inference mode (statistics are constants).
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu { x: NodeId, slope: T },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Dropout { x: NodeId, mask: Vec<T> },
    MeanAll { x: NodeId },
    SumAll { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, mul: T },
    Ln { x: NodeId },
    PseudoHuber { x: NodeId, delta: T },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct GradientTape<T: Element> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

/// Result of a backward pass. Named access covers every registered parameter;
/// parameters the output does not depend on get zero gradients.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    by_node: Vec<Option<Tensor<T>>>,
    named: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn named(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }

    pub fn for_node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

fn require_same_shape(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            axis: "numel",
            detail: format!("{what}: {a} does not match {b}"),
        });
    }
    Ok(())
}

/// Strictly inside (0, 1) even where the exact sigmoid saturates in this
/// precision.
pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    let one = T::one();
    let y = one / (one + (-x).exp());
    let two = T::from_real(2.0);
    let hi = one - T::epsilon() / two;
    y.max(T::min_positive_value()).min(hi)
}

pub(crate) fn leaky_relu_scalar<T: Element>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

impl<T: Element> Default for GradientTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> GradientTape<T> {
    pub fn new() -> Self {
        GradientTape { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn parameter_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a tensor; it carries gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Registers a gradient-carrying leaf under a unique name.
    pub fn parameter(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<NodeId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let id = self.push(t, Op::Leaf, true);
        self.params.insert(name, id);
        Ok(id)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.push(Tensor::filled(Shape::new(1, 1, 1, 1), v), Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.c != xs.c {
            return Err(Error::Dimension {
                axis: "channels",
                detail: format!("conv2d input has {} channels, weights expect {}", xs.c, ws.c),
            });
        }
        if bs.as_array() != [1, ws.n, 1, 1] {
            return Err(Error::Dimension {
                axis: "channels",
                detail: format!("conv2d bias {} does not match {} output channels", bs, ws.n),
            });
        }
        let geom = ConvGeom::conv(xs.n, xs.c, ws.n, xs.h, xs.w, ws.h, ws.w, stride, padding)?;
        let mut y = Tensor::zeros(Shape::new(geom.batch, geom.out_c, geom.out_h, geom.out_w));
        conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            y.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }, needs))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.c != xs.c {
            return Err(Error::Dimension {
                axis: "channels",
                detail: format!(
                    "conv2d_transpose input has {} channels, weights expect {}",
                    xs.c, ws.c
                ),
            });
        }
        if bs.as_array() != [1, ws.n, 1, 1] {
            return Err(Error::Dimension {
                axis: "channels",
                detail: format!(
                    "conv2d_transpose bias {} does not match {} output channels",
                    bs, ws.n
                ),
            });
        }
        let geom =
            ConvGeom::transpose(xs.n, xs.c, ws.n, xs.h, xs.w, ws.h, ws.w, stride, padding)?;
        let mut y = Tensor::zeros(Shape::new(geom.batch, geom.out_c, geom.out_h, geom.out_w));
        conv_transpose2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            y.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    fn batchnorm_check(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<Shape> {
        let xs = self.shape(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(id);
            if s.as_array() != [1, xs.c, 1, 1] {
                return Err(Error::Dimension {
                    axis: "channels",
                    detail: format!("batchnorm {name} {} does not match {} channels", s, xs.c),
                });
            }
        }
        Ok(xs)
    }

    /// Normalizes with statistics of the current batch and returns them so the
    /// caller can fold them into running buffers.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: T,
    ) -> Result<(NodeId, ChannelStats<T>)> {
        let xs = self.batchnorm_check(x, gamma, beta)?;
        let m = xs.n * xs.h * xs.w;
        if m < 2 {
            return Err(Error::Numeric(format!(
                "batchnorm statistics degenerate: {m} value(s) per channel in training mode"
            )));
        }
        let m_t = T::from_real(m as f64);
        let plane = xs.h * xs.w;
        let mut mean = vec![T::zero(); xs.c];
        let mut var = vec![T::zero(); xs.c];
        {
            let data = self.value(x).data();
            for c in 0..xs.c {
                let mut acc = T::zero();
                for n in 0..xs.n {
                    let chan = &data[(n * xs.c + c) * plane..][..plane];
                    for &v in chan {
                        acc = acc + v;
                    }
                }
                mean[c] = acc / m_t;
                let mut sq = T::zero();
                for n in 0..xs.n {
                    let chan = &data[(n * xs.c + c) * plane..][..plane];
                    for &v in chan {
                        let d = v - mean[c];
                        sq = sq + d * d;
                    }
                }
                var[c] = sq / m_t;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
        let y = self.batchnorm_apply(x, gamma, beta, &mean, &inv_std);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            y,
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), inv_std, batch_stats: true },
            needs,
        );
        Ok((id, ChannelStats { mean, var }))
    }

    /// Normalizes with fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        epsilon: T,
    ) -> Result<NodeId> {
        let xs = self.batchnorm_check(x, gamma, beta)?;
        if running_mean.len() != xs.c || running_var.len() != xs.c {
            return Err(Error::Dimension {
                axis: "channels",
                detail: format!(
                    "running statistics cover {} channels, input has {}",
                    running_mean.len(),
                    xs.c
                ),
            });
        }
        if running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::Numeric("negative running variance".into()));
        }
        let inv_std: Vec<T> =
            running_var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
        let mean = running_mean.to_vec();
        let y = self.batchnorm_apply(x, gamma, beta, &mean, &inv_std);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats: false }, needs))
    }

    fn batchnorm_apply(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: &[T],
    ) -> Tensor<T> {
        let xs = self.shape(x);
        let plane = xs.h * xs.w;
        let data = self.value(x).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); data.len()];
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = (n * xs.c + c) * plane;
                let (mu, is, g, b) = (mean[c], inv_std[c], gm[c], bt[c]);
                for i in 0..plane {
                    out[base + i] = g * ((data[base + i] - mu) * is) + b;
                }
            }
        }
        Tensor::from_vec(xs, out).expect("shape preserved")
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let y = self.value(x).map(|v| leaky_relu_scalar(v, slope));
        let needs = self.needs(x);
        self.push(y, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(y, Op::Relu { x }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(y, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid_scalar);
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid { x }, needs)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::Dimension {
                axis: "height",
                detail: format!("concat_channels of {sa} with {sb}"),
            });
        }
        let plane = sa.h * sa.w;
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut out = Vec::with_capacity(out_shape.numel());
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for n in 0..sa.n {
                out.extend_from_slice(&da[n * sa.c * plane..][..sa.c * plane]);
                out.extend_from_slice(&db[n * sb.c * plane..][..sb.c * plane]);
            }
        }
        let y = Tensor::from_vec(out_shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Concat { a, b }, needs))
    }

    /// Inverted dropout: kept values are scaled by 1/(1-rate) so the expected
    /// value is unchanged. The mask derives only from the seed and the shape.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::from_real(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let xs = self.shape(x);
        let data: Vec<T> =
            self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let y = Tensor::from_vec(xs, data)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::Dropout { x, mask }, needs))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let count = T::from_real(self.value(x).numel() as f64);
        let total: T = self.value(x).data().iter().copied().sum();
        let y = Tensor::filled(Shape::new(1, 1, 1, 1), total / count);
        let needs = self.needs(x);
        self.push(y, Op::MeanAll { x }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: T = self.value(x).data().iter().copied().sum();
        let y = Tensor::filled(Shape::new(1, 1, 1, 1), total);
        let needs = self.needs(x);
        self.push(y, Op::SumAll { x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        require_same_shape(self.shape(a), self.shape(b), "add")?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let y = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        require_same_shape(self.shape(a), self.shape(b), "sub")?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let y = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        require_same_shape(self.shape(a), self.shape(b), "mul")?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul { a, b }, needs))
    }

    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let y = self.value(x).map(|v| mul * v + add);
        let needs = self.needs(x);
        self.push(y, Op::Affine { x, mul }, needs)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Domain("ln of a non-positive value".into()));
        }
        let y = self.value(x).map(|v| v.ln());
        let needs = self.needs(x);
        Ok(self.push(y, Op::Ln { x }, needs))
    }

    pub fn pseudo_huber(&mut self, x: NodeId, delta: T) -> Result<NodeId> {
        if delta <= T::zero() {
            return Err(Error::Config(format!("pseudo-huber delta {delta:?} must be positive")));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| pseudo_huber_scalar(v, delta))
            .collect();
        let y = Tensor::from_vec(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::PseudoHuber { x, delta }, needs))
    }

    /// Reverse pass from a scalar output. Every registered parameter gets an
    /// entry in the result; parameters the output does not depend on get
    /// zeros.
    pub fn backward(&self, out: NodeId) -> Result<Gradients<T>> {
        if self.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![T::one()]);

        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }

        let mut named = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.shape(*id);
            let tensor = match &grads[id.0] {
                Some(g) => Tensor::from_vec(shape, g.clone())?,
                None => Tensor::zeros(shape),
            };
            named.insert(name.clone(), tensor);
        }
        let by_node = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::from_vec(self.nodes[i].value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { by_node, named })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, contribution: Vec<T>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    conv2d_backward_input(geom, self.value(*w).data(), gy, &mut gx);
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) || self.needs(*b) {
                    let mut gw = vec![T::zero(); self.value(*w).numel()];
                    let mut gb = vec![T::zero(); self.value(*b).numel()];
                    conv2d_backward_params(geom, self.value(*x).data(), gy, &mut gw, &mut gb);
                    if self.needs(*w) {
                        self.accumulate(grads, *w, gw);
                    }
                    if self.needs(*b) {
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    conv_transpose2d_backward_input(geom, self.value(*w).data(), gy, &mut gx);
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) || self.needs(*b) {
                    let mut gw = vec![T::zero(); self.value(*w).numel()];
                    let mut gb = vec![T::zero(); self.value(*b).numel()];
                    conv_transpose2d_backward_params(
                        geom,
                        self.value(*x).data(),
                        gy,
                        &mut gw,
                        &mut gb,
                    );
                    if self.needs(*w) {
                        self.accumulate(grads, *w, gw);
                    }
                    if self.needs(*b) {
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                self.backprop_batchnorm(
                    *x,
                    *gamma,
                    *beta,
                    mean,
                    inv_std,
                    *batch_stats,
                    gy,
                    grads,
                );
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let gx: Vec<T> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v >= T::zero() { g } else { *slope * g })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let gx: Vec<T> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let gx: Vec<T> = self.nodes[i]
                        .value
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&y, &g)| g * (T::one() - y * y))
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let gx: Vec<T> = self.nodes[i]
                        .value
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa.h * sa.w;
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); sa.numel()];
                    for n in 0..sa.n {
                        let src = n * (sa.c + sb.c) * plane;
                        ga[n * sa.c * plane..][..sa.c * plane]
                            .copy_from_slice(&gy[src..][..sa.c * plane]);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); sb.numel()];
                    for n in 0..sb.n {
                        let src = n * (sa.c + sb.c) * plane + sa.c * plane;
                        gb[n * sb.c * plane..][..sb.c * plane]
                            .copy_from_slice(&gy[src..][..sb.c * plane]);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let gx: Vec<T> = mask.iter().zip(gy).map(|(&m, &g)| m * g).collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let count = self.value(*x).numel();
                    let g = gy[0] / T::from_real(count as f64);
                    self.accumulate(grads, *x, vec![g; count]);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let count = self.value(*x).numel();
                    self.accumulate(grads, *x, vec![gy[0]; count]);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.to_vec());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.to_vec());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let ga: Vec<T> =
                        self.value(*b).data().iter().zip(gy).map(|(&v, &g)| v * g).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb: Vec<T> =
                        self.value(*a).data().iter().zip(gy).map(|(&v, &g)| v * g).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Affine { x, mul } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, gy.iter().map(|&g| *mul * g).collect());
                }
            }
            Op::Ln { x } => {
                if self.needs(*x) {
                    let gx: Vec<T> =
                        self.value(*x).data().iter().zip(gy).map(|(&v, &g)| g / v).collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::PseudoHuber { x, delta } => {
                if self.needs(*x) {
                    let gx: Vec<T> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| g * pseudo_huber_grad_scalar(v, *delta))
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batchnorm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x);
        let plane = xs.h * xs.w;
        let m = T::from_real((xs.n * plane) as f64);
        let xd = self.value(x).data();
        let gm = self.value(gamma).data();

        // Per-channel sums of g and g * x_hat.
        let mut gsum = vec![T::zero(); xs.c];
        let mut gxhat = vec![T::zero(); xs.c];
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = (n * xs.c + c) * plane;
                let (mu, is) = (mean[c], inv_std[c]);
                let mut s = T::zero();
                let mut sx = T::zero();
                for i in 0..plane {
                    let g = gy[base + i];
                    s = s + g;
                    sx = sx + g * (xd[base + i] - mu) * is;
                }
                gsum[c] = gsum[c] + s;
                gxhat[c] = gxhat[c] + sx;
            }
        }

        if self.needs(beta) {
            self.accumulate(grads, beta, gsum.clone());
        }
        if self.needs(gamma) {
            self.accumulate(grads, gamma, gxhat.clone());
        }
        if self.needs(x) {
            let mut gx = vec![T::zero(); xd.len()];
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let base = (n * xs.c + c) * plane;
                    let (mu, is, g) = (mean[c], inv_std[c], gm[c]);
                    if batch_stats {
                        let mean_g = gsum[c] / m;
                        let mean_gx = gxhat[c] / m;
                        for i in 0..plane {
                            let xhat = (xd[base + i] - mu) * is;
                            gx[base + i] = g * is * (gy[base + i] - mean_g - xhat * mean_gx);
                        }
                    } else {
                        for i in 0..plane {
                            gx[base + i] = g * is * gy[base + i];
                        }
                    }
                }
            }
            self.accumulate(grads, x, gx);
        }
    }
}

/// Weights and bias of one convolution layer, value-level view.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.h == 0 || ws.w == 0 {
            return Err(Error::Config("kernel extents must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.bias.shape().as_array() != [1, ws.n, 1, 1] {
            return Err(Error::Dimension {
                axis: "channels",
                detail: format!("bias {} for {} output channels", self.bias.shape(), ws.n),
            });
        }
        Ok(())
    }
}

/// Forward-only convolution of a plain tensor.
pub fn conv2d<T: Element>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let mut tape = GradientTape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(params.weight.clone());
    let b = tape.leaf(params.bias.clone());
    let y = tape.conv2d(x, w, b, params.stride, params.padding)?;
    Ok(tape.value(y).clone())
}

/// Forward-only transposed convolution of a plain tensor.
pub fn conv2d_transpose<T: Element>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let mut tape = GradientTape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(params.weight.clone());
    let b = tape.leaf(params.bias.clone());
    let y = tape.conv2d_transpose(x, w, b, params.stride, params.padding)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_tensor(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap().with_grad()
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_the_input() {
        let mut tape = GradientTape::new();
        let w = tape
            .parameter("w", grad_tensor(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 3.0, 0.5]))
            .unwrap();
        let sq = tape.mul(w, w).unwrap();
        let out = tape.sum_all(sq);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.named()["w"].data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut tape = GradientTape::new();
        let w = tape.parameter("w", grad_tensor(Shape::new(1, 1, 1, 1), vec![3.0])).unwrap();
        let _unused =
            tape.parameter("unused", grad_tensor(Shape::new(1, 1, 2, 2), vec![1.0; 4])).unwrap();
        let out = tape.sum_all(w);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.named()["w"].data(), &[1.0]);
        assert_eq!(grads.named()["unused"].data(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = GradientTape::new();
        let w = tape.parameter("w", grad_tensor(Shape::new(1, 1, 2, 2), vec![1.0; 4])).unwrap();
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn value_reused_twice_accumulates_gradient() {
        // out = sum(w) + sum(w) has gradient 2 everywhere.
        let mut tape = GradientTape::new();
        let w = tape.parameter("w", grad_tensor(Shape::new(1, 1, 1, 2), vec![1.0, 2.0])).unwrap();
        let s1 = tape.sum_all(w);
        let s2 = tape.sum_all(w);
        let out = tape.add(s1, s2).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.named()["w"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn batchnorm_maps_two_point_channel_to_unit_deviation() {
        // Channel values {1, 3}: mean 2, population variance 1. With gamma 1,
        // beta 0 and tiny epsilon the outputs are close to {-1, +1}.
        let mut tape: GradientTape<f64> = GradientTape::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 3.0]).unwrap());
        let gamma = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 1), 1.0));
        let beta = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let (y, stats) = tape.batchnorm_train(x, gamma, beta, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-6);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-6);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batchnorm_training_mode_rejects_single_element_channel() {
        let mut tape: GradientTape<f64> = GradientTape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 4, 1, 1), 2.0));
        let gamma = tape.leaf(Tensor::filled(Shape::new(1, 4, 1, 1), 1.0));
        let beta = tape.leaf(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let err = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        let mut tape: GradientTape<f32> = GradientTape::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![-1e4f32, -30.0, 30.0, 1e4]).unwrap(),
        );
        let y = tape.sigmoid(x);
        for &v in tape.value(y).data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid output {v} escaped (0, 1)");
        }
    }

    #[test]
    fn concat_stacks_channels_and_splits_gradient() {
        let mut tape = GradientTape::new();
        let a = tape.parameter("a", grad_tensor(Shape::new(1, 1, 1, 2), vec![1.0, 2.0])).unwrap();
        let b = tape.parameter("b", grad_tensor(Shape::new(1, 2, 1, 2), vec![3.0; 4])).unwrap();
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(cat), Shape::new(1, 3, 1, 2));
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        // Weight the concatenated channels differently, then check the split.
        let weights = tape.leaf(
            Tensor::from_vec(Shape::new(1, 3, 1, 2), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap(),
        );
        let weighted = tape.mul(cat, weights).unwrap();
        let out = tape.sum_all(weighted);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.named()["a"].data(), &[1.0, 1.0]);
        assert_eq!(grads.named()["b"].data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn concat_rejects_mismatched_spatial_extents() {
        let mut tape: GradientTape<f64> = GradientTape::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 2)));
        assert!(matches!(tape.concat_channels(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dropout_mask_is_deterministic_per_seed_and_preserves_expectation() {
        let mut tape: GradientTape<f32> = GradientTape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 64, 64), 1.0));
        let a = tape.dropout(x, 0.5, 9).unwrap();
        let b = tape.dropout(x, 0.5, 9).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        let kept = tape.value(a).data().iter().filter(|&&v| v != 0.0).count();
        // Kept values are scaled to 2.0.
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
        // Roughly half survive; 4096 draws keep this loose bound safe.
        assert!((1500..=2600).contains(&kept), "kept {kept} of 4096");
    }

    #[test]
    fn dropout_rejects_rate_of_one() {
        let mut tape: GradientTape<f32> = GradientTape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0));
        assert!(matches!(tape.dropout(x, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn conv2d_validates_channel_agreement() {
        let mut tape: GradientTape<f32> = GradientTape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        let w = tape.leaf(Tensor::zeros(Shape::new(4, 2, 3, 3)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "channels", .. }));
    }

    #[test]
    fn relu_zeroes_negative_gradient_paths() {
        let mut tape = GradientTape::new();
        let x = tape
            .parameter("x", grad_tensor(Shape::new(1, 1, 1, 3), vec![-2.0, 0.5, 3.0]))
            .unwrap();
        let y = tape.relu(x);
        let out = tape.sum_all(y);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.named()["x"].data(), &[0.0, 1.0, 1.0]);
    }
}
