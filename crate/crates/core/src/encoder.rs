//! A small Siamese MLP with hand-written backpropagation.
//!
//! The online branch is `predictor(projector(backbone(x)))`, the momentum
//! branch is an EMA copy of `projector(backbone(x))`. Both end in an L2
//! normalisation. The backbone and projector live in one [`MlpStack`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{affine, dot, norm, random_orthonormal};
use crate::vmf::UnitEmbedding;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMMC";
pub const CHECKPOINT_VERSION: u32 = 1;

const RELU_BIAS_INIT: f64 = 0.01;

/// One input vector, with an optional class label used only for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub features: Vec<f64>,
    pub label: Option<u32>,
}

/// Element-wise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Config(format!(
                "unknown activation '{s}' (expected identity, relu or tanh)"
            ))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// A dense layer `y = act(W x + b)` with `W` stored row-major (`out x in`).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Layer {
    pub fn new(
        weight: Vec<f64>,
        bias: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::invalid(format!(
                "layer {in_dim}->{out_dim} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite layer parameter".into()));
        }
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        })
    }

    /// Orthogonal init: rows (or columns, when the layer widens) are
    /// orthonormal, scaled by `sqrt(2)` before a ReLU. ReLU layers get a small
    /// positive bias so an all-zero input still produces a non-zero embedding.
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let relu = activation == Activation::Relu;
        let gain = if relu { std::f64::consts::SQRT_2 } else { 1.0 };
        let mut weight = vec![0.0; in_dim * out_dim];
        if out_dim <= in_dim {
            for (o, row) in random_orthonormal(out_dim, in_dim, rng).iter().enumerate() {
                for (i, x) in row.iter().enumerate() {
                    weight[o * in_dim + i] = gain * x;
                }
            }
        } else {
            for (i, col) in random_orthonormal(in_dim, out_dim, rng).iter().enumerate() {
                for (o, x) in col.iter().enumerate() {
                    weight[o * in_dim + i] = gain * x;
                }
            }
        }
        Self {
            weight,
            bias: vec![if relu { RELU_BIAS_INIT } else { 0.0 }; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            weight,
            bias: vec![0.0; dim],
            in_dim: dim,
            out_dim: dim,
            activation: Activation::Identity,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// A chain of layers. An empty stack is the identity on `in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack {
    layers: Vec<Layer>,
    in_dim: usize,
}

impl MlpStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let in_dim = layers
            .first()
            .map(|l| l.in_dim)
            .ok_or_else(|| Error::invalid("use MlpStack::identity for an empty stack"))?;
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers, in_dim })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            layers: Vec::new(),
            in_dim: dim,
        }
    }

    /// Layers of the given widths; every layer but the last applies `hidden`.
    pub fn random<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(
                "an MLP needs at least input and output widths",
            ));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 < n {
                    hidden
                } else {
                    Activation::Identity
                };
                Layer::random(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn same_shape(&self, other: &MlpStack) -> bool {
        self.in_dim == other.in_dim
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.activation == b.activation
            })
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Plain forward pass without recording.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut out = vec![0.0; l.out_dim];
            affine(&l.weight, &l.bias, &cur, &mut out);
            if l.activation != Activation::Identity {
                out.iter_mut().for_each(|o| *o = l.activation.apply(*o));
            }
            cur = out;
        }
        cur
    }

    /// Forward pass recording the input of every layer and the pre-activations.
    fn record(&self, x: &[f64], inputs: &mut Vec<Vec<f64>>, pre: &mut Vec<Vec<f64>>) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut out = vec![0.0; l.out_dim];
            affine(&l.weight, &l.bias, &cur, &mut out);
            inputs.push(cur);
            pre.push(out.clone());
            if l.activation != Activation::Identity {
                out.iter_mut().for_each(|o| *o = l.activation.apply(*o));
            }
            cur = out;
        }
        cur
    }
}

/// Gradients for one stack, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl StackGrads {
    fn zeros(stack: &MlpStack) -> Self {
        Self {
            weight: stack
                .layers
                .iter()
                .map(|l| vec![0.0; l.weight.len()])
                .collect(),
            bias: stack
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }
}

/// Gradients of a scalar loss with respect to every online parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub encoder: StackGrads,
    pub predictor: StackGrads,
}

impl ParamGrads {
    pub fn zeros(net: &SiameseNet) -> Self {
        Self {
            encoder: StackGrads::zeros(&net.encoder),
            predictor: StackGrads::zeros(&net.predictor),
        }
    }

    /// Flattened in the order of [`SiameseNet::online_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.encoder
            .values()
            .chain(self.predictor.values())
            .copied()
            .collect()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self
            .values_mut()
            .zip(other.encoder.values().chain(other.predictor.values()))
        {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|x| *x *= s);
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.encoder
            .values()
            .chain(self.predictor.values())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder
            .values()
            .chain(self.predictor.values())
            .all(|x| x.is_finite())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder.values_mut().chain(self.predictor.values_mut())
    }
}

/// Architecture sizes for [`SiameseNet::random`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Nonlinearity of the hidden layers.
    pub activation: Activation,
    /// EMA coefficient of the momentum branch.
    pub m: f64,
}

impl NetConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 64,
            embed: 16,
            activation: Activation::Tanh,
            m: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseNet {
    /// Backbone followed by projector.
    pub encoder: MlpStack,
    pub predictor: MlpStack,
    momentum: MlpStack,
    m: f64,
    step: u64,
}

fn check_m(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!(
            "EMA coefficient must lie in [0, 1], got {m}"
        )));
    }
    Ok(())
}

impl SiameseNet {
    /// Momentum branch starts as an exact copy of `encoder`.
    pub fn new(encoder: MlpStack, predictor: MlpStack, m: f64) -> Result<Self> {
        check_m(m)?;
        if predictor.in_dim() != encoder.out_dim() || predictor.out_dim() != encoder.out_dim() {
            return Err(Error::invalid(format!(
                "predictor maps {} -> {}, embeddings have dimension {}",
                predictor.in_dim(),
                predictor.out_dim(),
                encoder.out_dim()
            )));
        }
        Ok(Self {
            momentum: encoder.clone(),
            encoder,
            predictor,
            m,
            step: 0,
        })
    }

    /// Two-layer backbone, two-layer projector, two-layer predictor.
    pub fn random<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden == 0 || cfg.embed == 0 {
            return Err(Error::invalid("network widths must be positive"));
        }
        let (i, h, e) = (cfg.input_dim, cfg.hidden, cfg.embed);
        let encoder = MlpStack::random(&[i, h, h, h, e], cfg.activation, rng)?;
        let predictor = MlpStack::random(&[e, h, e], cfg.activation, rng)?;
        Self::new(encoder, predictor, cfg.m)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn set_m(&mut self, m: f64) -> Result<()> {
        check_m(m)?;
        self.m = m;
        Ok(())
    }

    /// Number of optimiser steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn momentum(&self) -> &MlpStack {
        &self.momentum
    }

    pub fn online_param_count(&self) -> usize {
        self.encoder.param_count() + self.predictor.param_count()
    }

    /// Encoder parameters then predictor parameters; per layer weights then bias.
    pub fn online_params(&self) -> Vec<f64> {
        self.encoder
            .params()
            .chain(self.predictor.params())
            .copied()
            .collect()
    }

    pub fn set_online_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.online_param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.online_param_count(),
                found: values.len(),
            });
        }
        for (p, v) in self
            .encoder
            .params_mut()
            .chain(self.predictor.params_mut())
            .zip(values)
        {
            *p = *v;
        }
        Ok(())
    }

    pub fn momentum_params(&self) -> Vec<f64> {
        self.momentum.params().copied().collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Momentum-branch embedding of one input.
    pub fn embed_momentum(&self, x: &[f64]) -> Result<UnitEmbedding> {
        self.check_input(x)?;
        normalize_output(self.momentum.apply(x))
    }

    /// Online embedding before the predictor, i.e. the representation a
    /// downstream probe sees.
    pub fn embed_online(&self, x: &[f64]) -> Result<UnitEmbedding> {
        self.check_input(x)?;
        normalize_output(self.encoder.apply(x))
    }

    /// Runs both branches on two views.
    pub fn forward(&self, x1: &[f64], x2: &[f64]) -> Result<ForwardOutput> {
        self.check_input(x1)?;
        self.check_input(x2)?;
        let (v1, t1) = self.forward_online(x1)?;
        let (v2, t2) = self.forward_online(x2)?;
        Ok(ForwardOutput {
            v1,
            v2,
            v1m: normalize_output(self.momentum.apply(x1))?,
            v2m: normalize_output(self.momentum.apply(x2))?,
            tape: Tape {
                step: self.step,
                views: [t1, t2],
            },
        })
    }

    fn forward_online(&self, x: &[f64]) -> Result<(UnitEmbedding, ViewTape)> {
        let mut inputs =
            Vec::with_capacity(self.encoder.layers.len() + self.predictor.layers.len());
        let mut pre = Vec::with_capacity(inputs.capacity());
        let h = self.encoder.record(x, &mut inputs, &mut pre);
        let z = self.predictor.record(&h, &mut inputs, &mut pre);
        let z_norm = norm(&z);
        let v = normalize_output(z)?;
        Ok((
            v.clone(),
            ViewTape {
                inputs,
                pre,
                out: v,
                z_norm,
            },
        ))
    }

    /// Gradients of a loss with respect to the online parameters, given the
    /// loss gradients at the two normalised online outputs.
    pub fn backward(&self, tape: &Tape, grad_v1: &[f64], grad_v2: &[f64]) -> Result<ParamGrads> {
        if tape.step != self.step {
            return Err(Error::StaleTape {
                tape_step: tape.step,
                net_step: self.step,
            });
        }
        let mut grads = ParamGrads::zeros(self);
        for (view, g) in tape.views.iter().zip([grad_v1, grad_v2]) {
            if g.len() != self.embed_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.embed_dim(),
                    found: g.len(),
                });
            }
            // d(z/|z|)/dz = (I - v v^T) / |z|
            let c = dot(g, &view.out);
            let mut dy: Vec<f64> = g
                .iter()
                .zip(view.out.iter())
                .map(|(gi, vi)| (gi - c * vi) / view.z_norm)
                .collect();
            let n_enc = self.encoder.layers.len();
            let all: Vec<&Layer> = self
                .encoder
                .layers
                .iter()
                .chain(&self.predictor.layers)
                .collect();
            for (i, layer) in all.into_iter().enumerate().rev() {
                let (sg, li) = if i >= n_enc {
                    (&mut grads.predictor, i - n_enc)
                } else {
                    (&mut grads.encoder, i)
                };
                if layer.activation != Activation::Identity {
                    for (d, p) in dy.iter_mut().zip(&view.pre[i]) {
                        *d *= layer.activation.derivative(*p);
                    }
                }
                let x = &view.inputs[i];
                let gw = &mut sg.weight[li];
                for (o, d) in dy.iter().enumerate() {
                    if *d != 0.0 {
                        for (w, xi) in gw[o * layer.in_dim..(o + 1) * layer.in_dim]
                            .iter_mut()
                            .zip(x)
                        {
                            *w += d * xi;
                        }
                    }
                }
                for (b, d) in sg.bias[li].iter_mut().zip(&dy) {
                    *b += d;
                }
                if i > 0 {
                    let mut dx = vec![0.0; layer.in_dim];
                    for (o, d) in dy.iter().enumerate() {
                        if *d != 0.0 {
                            for (acc, w) in dx
                                .iter_mut()
                                .zip(&layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim])
                            {
                                *acc += d * w;
                            }
                        }
                    }
                    dy = dx;
                }
            }
        }
        Ok(grads)
    }

    /// `theta_m <- m theta_m + (1 - m) theta` over backbone and projector.
    pub fn momentum_update(&mut self) {
        let m = self.m;
        for (tm, t) in self.momentum.params_mut().zip(self.encoder.params()) {
            *tm = m * *tm + (1.0 - m) * t;
        }
    }
}

fn normalize_output(z: Vec<f64>) -> Result<UnitEmbedding> {
    let n = norm(&z);
    if !n.is_finite() || n < 1e-150 {
        return Err(Error::Numeric(format!(
            "cannot normalise network output with norm {n:e}"
        )));
    }
    UnitEmbedding::normalize(z)
}

#[derive(Debug, Clone)]
struct ViewTape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: UnitEmbedding,
    z_norm: f64,
}

/// Activations recorded by [`SiameseNet::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    step: u64,
    views: [ViewTape; 2],
}

impl Tape {
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Smallest |pre-activation| over ReLU units; finite differences are
    /// unreliable when this is close to zero.
    pub fn relu_margin(&self, net: &SiameseNet) -> f64 {
        let relu: Vec<bool> = net
            .encoder
            .layers
            .iter()
            .chain(&net.predictor.layers)
            .map(|l| l.activation == Activation::Relu)
            .collect();
        self.views
            .iter()
            .flat_map(|v| {
                v.pre
                    .iter()
                    .zip(&relu)
                    .filter(|(_, r)| **r)
                    .flat_map(|(p, _)| p.iter())
            })
            .fold(f64::INFINITY, |acc, p| acc.min(p.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub v1: UnitEmbedding,
    pub v2: UnitEmbedding,
    pub v1m: UnitEmbedding,
    pub v2m: UnitEmbedding,
    pub tape: Tape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub sigma: f64,
    /// Probability of zeroing each coordinate.
    pub p_drop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            p_drop: 0.1,
        }
    }
}

fn augment_one<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let noisy = if cfg.sigma > 0.0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                xi + cfg.sigma * z
            } else {
                xi
            };
            if cfg.p_drop > 0.0 && rng.random::<f64>() < cfg.p_drop {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

/// Two independent noisy, partially dropped views of `x`.
pub fn augment<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let a = augment_one(x, cfg, rng);
    let b = augment_one(x, cfg, rng);
    (a, b)
}

/// Momentum SGD with decoupled weight decay:
/// `v <- mu v + g`, `theta <- theta - lr v - lr wd theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut SiameseNet, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {}",
                net.step
            )));
        }
        let g = grads.flatten();
        if g.len() != net.online_param_count() {
            return Err(Error::DimensionMismatch {
                expected: net.online_param_count(),
                found: g.len(),
            });
        }
        let vel = self.velocity.get_or_insert_with(|| vec![0.0; g.len()]);
        let (mu, wd) = (self.momentum, self.weight_decay);
        let params = net.encoder.params_mut().chain(net.predictor.params_mut());
        for ((p, v), gi) in params.zip(vel.iter_mut()).zip(&g) {
            *v = mu * *v + gi;
            *p -= lr * *v + lr * wd * *p;
        }
        net.step += 1;
        Ok(())
    }
}

fn write_stack<W: Write>(w: &mut W, s: &MlpStack) -> Result<()> {
    w.write_all(&(s.layers.len() as u32).to_le_bytes())?;
    w.write_all(&(s.in_dim as u32).to_le_bytes())?;
    for l in &s.layers {
        w.write_all(&(l.in_dim as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim as u32).to_le_bytes())?;
        w.write_all(&[l.activation.code()])?;
    }
    Ok(())
}

/// Layout, little-endian: `b"SMMC" | u32 version | u32 stack count (3)`,
/// then per stack (encoder, predictor, momentum) `u32 layers | u32 in_dim |
/// layers x (u32 in, u32 out, u8 activation)`, then every parameter as f64
/// (row-major weights then bias, stack by stack), then `f64 m | u64 step`.
pub fn write_checkpoint<W: Write>(net: &SiameseNet, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let stacks = [&net.encoder, &net.predictor, &net.momentum];
    w.write_all(&(stacks.len() as u32).to_le_bytes())?;
    for s in stacks {
        write_stack(&mut w, s)?;
    }
    for s in stacks {
        for p in s.params() {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.write_all(&net.m.to_le_bytes())?;
    w.write_all(&net.step.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            Error::parse(format!(
                "checkpoint truncated reading {what} at byte {}: {e}",
                self.offset
            ))
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<SiameseNet> {
    let mut rd = Reader {
        inner: r,
        offset: 0,
    };
    let magic: [u8; 4] = rd.bytes("magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(format!(
            "bad checkpoint magic {magic:?} at byte 0"
        )));
    }
    let version = rd.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::parse(format!(
            "unsupported checkpoint version {version} at byte 4"
        )));
    }
    let n_stacks = rd.u32("stack count")?;
    if n_stacks != 3 {
        return Err(Error::parse(format!(
            "expected 3 stacks, found {n_stacks} at byte 8"
        )));
    }
    let mut shapes = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = rd.u32("layer count")?;
        let in_dim = rd.u32("stack input width")?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rd.u32("layer input width")?;
            let o = rd.u32("layer output width")?;
            let at = rd.offset;
            let [code] = rd.bytes::<1>("activation flag")?;
            let act = Activation::from_code(code).ok_or_else(|| {
                Error::parse(format!("unknown activation code {code} at byte {at}"))
            })?;
            layers.push((i, o, act));
        }
        shapes.push((in_dim, layers));
    }
    let mut stacks = Vec::with_capacity(3);
    for (in_dim, layers) in shapes {
        let mut built = Vec::with_capacity(layers.len());
        for (i, o, act) in layers {
            let at = rd.offset;
            let mut read = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| Ok(f64::from_le_bytes(rd.bytes("parameter")?)))
                    .collect()
            };
            let w = read(i * o)?;
            let b = read(o)?;
            built.push(
                Layer::new(w, b, i, o, act)
                    .map_err(|e| Error::parse(format!("layer at byte {at}: {e}")))?,
            );
        }
        stacks.push(if built.is_empty() {
            MlpStack::identity(in_dim)
        } else {
            MlpStack::new(built)?
        });
    }
    let m = f64::from_le_bytes(rd.bytes("EMA coefficient")?);
    let step = u64::from_le_bytes(rd.bytes("step counter")?);
    let momentum = stacks.pop().expect("three stacks");
    let predictor = stacks.pop().expect("three stacks");
    let encoder = stacks.pop().expect("three stacks");
    if !momentum.same_shape(&encoder) {
        return Err(Error::parse(
            "momentum stack shape differs from the encoder",
        ));
    }
    let mut net =
        SiameseNet::new(encoder, predictor, m).map_err(|e| Error::parse(e.to_string()))?;
    net.momentum = momentum;
    net.step = step;
    Ok(net)
}

pub fn save_checkpoint(net: &SiameseNet, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SiameseNet> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests;
