//! The training loop: cluster the momentum embeddings, refit the mixture,
//! train the online network against it, merge close components.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{
    augment, save_checkpoint, Activation, AugmentConfig, ForwardOutput, NetConfig, ParamGrads, Sgd,
    SiameseNet,
};
use crate::evaluate::{ami, linear_probe, majority_label_accuracy, Metrics, ProbeConfig};
use crate::losses::{
    cluster_loss_over, instance_loss, nce_centroid_loss, nce_instance_loss, ClusterLossConfig,
    LossValueGrad, PriorWeights, WeightGrad,
};
use crate::mixture::{
    e_step_hard, init_centroids, log_likelihood, m_step, merge_pass, nearest_centroids,
    responsibilities, save_snapshot, KappaMode, MStepConfig, MergeConfig, MergeRule, MixtureState,
    Posterior,
};
use crate::vmf::{Guards, UnitEmbedding};
use crate::{Error, Result};

/// Samples per gradient partial sum; fixed so the reduction order does not
/// depend on the number of threads.
const REDUCE_CHUNK: usize = 16;

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} '{}' (expected one of: {})",
                        stringify!($name),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(
    /// Which objective trains the network.
    LossMode {
        SiamMm => "siammm",
        SiamMmNoInst => "siammm_no_inst",
        Nce1 => "nce1",
        Nce2 => "nce2",
        InstOnly => "inst_only",
    }
);

keyword_enum!(
    /// Posterior used by the per-epoch M-step.
    AssignMode {
        HardCosine => "hard_cosine",
        Posterior => "posterior",
    }
);

keyword_enum!(
    /// `consistent` carries components across epochs; `reinit` reseeds them every epoch.
    CentroidMode {
        Consistent => "consistent",
        Reinit => "reinit",
    }
);

keyword_enum!(
    KappaKind {
        Plain => "plain",
        Pca => "pca",
    }
);

keyword_enum!(
    WeightGradKind {
        ThroughPi => "through_pi",
        Detached => "detached",
    }
);

keyword_enum!(
    PriorKind {
        Uniform => "uniform",
        ClusterSize => "cluster_size",
    }
);

keyword_enum!(
    MergeRuleKind {
        ZScore => "zscore",
        Percentile => "percentile",
    }
);

impl LossMode {
    pub fn uses_mixture(self) -> bool {
        !matches!(self, LossMode::InstOnly)
    }

    fn has_instance_term(self) -> bool {
        !matches!(self, LossMode::SiamMmNoInst)
    }
}

/// Everything a training run depends on. Parsed from `key = value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k0: usize,
    /// Concentration given to every component at initialisation.
    pub kappa0: f64,
    pub h: usize,
    pub tau: f64,
    pub merge: bool,
    pub merge_rule: MergeRuleKind,
    pub zeta: f64,
    pub percentile: f64,
    /// Overlap factor of the merge guard; `None` disables the guard.
    pub merge_overlap: Option<f64>,
    pub min_count: f64,
    pub em_iters: usize,
    pub m: f64,
    pub lr_base: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Rescales each batch gradient to at most this global norm; `None` disables.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sigma_aug: f64,
    pub p_drop: f64,
    pub hidden: usize,
    pub embed: usize,
    pub activation: Activation,
    pub kappa_mode: KappaKind,
    pub pca_retention: f64,
    pub loss_mode: LossMode,
    pub assign_mode: AssignMode,
    pub weight_grad: WeightGradKind,
    pub prior: PriorKind,
    pub centroid_mode: CentroidMode,
    pub probe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k0: 200,
            kappa0: 10.0,
            h: 5,
            tau: 0.02,
            merge: true,
            merge_rule: MergeRuleKind::ZScore,
            zeta: -1.2,
            percentile: 0.10,
            merge_overlap: Some(0.7),
            min_count: 2.0,
            em_iters: 1,
            m: 0.99,
            lr_base: 0.0002,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            batch_size: 256,
            epochs: 30,
            seed: 0,
            sigma_aug: 0.1,
            p_drop: 0.1,
            hidden: 64,
            embed: 16,
            activation: Activation::Tanh,
            kappa_mode: KappaKind::Plain,
            pca_retention: crate::mixture::DEFAULT_RETENTION,
            loss_mode: LossMode::SiamMm,
            assign_mode: AssignMode::HardCosine,
            weight_grad: WeightGradKind::ThroughPi,
            prior: PriorKind::Uniform,
            centroid_mode: CentroidMode::Consistent,
            probe: true,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "k0",
    "kappa0",
    "h",
    "tau",
    "merge",
    "merge_rule",
    "zeta",
    "percentile",
    "merge_overlap",
    "min_count",
    "em_iters",
    "m",
    "lr_base",
    "sgd_momentum",
    "weight_decay",
    "grad_clip",
    "batch_size",
    "epochs",
    "seed",
    "sigma_aug",
    "p_drop",
    "hidden",
    "embed",
    "activation",
    "kappa_mode",
    "pca_retention",
    "loss_mode",
    "assign_mode",
    "weight_grad",
    "prior",
    "centroid_mode",
    "probe",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean '{value}' for key '{key}'"
        ))),
    }
}

impl TrainConfig {
    /// Sets one key. Unknown keys are rejected with the list of valid ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k0" => self.k0 = parse_num(key, v)?,
            "kappa0" => self.kappa0 = parse_num(key, v)?,
            "h" => self.h = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "merge" => self.merge = parse_bool(key, v)?,
            "merge_rule" => self.merge_rule = v.parse()?,
            "zeta" => self.zeta = parse_num(key, v)?,
            "percentile" => self.percentile = parse_num(key, v)?,
            "merge_overlap" => {
                self.merge_overlap = match v {
                    "off" | "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "min_count" => self.min_count = parse_num(key, v)?,
            "em_iters" => self.em_iters = parse_num(key, v)?,
            "m" => self.m = parse_num(key, v)?,
            "lr_base" => self.lr_base = parse_num(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "grad_clip" => {
                self.grad_clip = match v {
                    "off" | "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "sigma_aug" => self.sigma_aug = parse_num(key, v)?,
            "p_drop" => self.p_drop = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "embed" => self.embed = parse_num(key, v)?,
            "activation" => self.activation = v.parse()?,
            "kappa_mode" => self.kappa_mode = v.parse()?,
            "pca_retention" => self.pca_retention = parse_num(key, v)?,
            "loss_mode" => self.loss_mode = v.parse()?,
            "assign_mode" => self.assign_mode = v.parse()?,
            "weight_grad" => self.weight_grad = v.parse()?,
            "prior" => self.prior = v.parse()?,
            "centroid_mode" => self.centroid_mode = v.parse()?,
            "probe" => self.probe = parse_bool(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}'; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{kv}' is not of the form key=value"))
        })?;
        self.set(k, v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    /// Serialises every key in [`CONFIG_KEYS`] order.
    pub fn to_kv_string(&self) -> String {
        let overlap = self
            .merge_overlap
            .map_or("off".to_string(), |o| o.to_string());
        let clip = self.grad_clip.map_or("off".to_string(), |c| c.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("k0", self.k0.to_string()),
            ("kappa0", self.kappa0.to_string()),
            ("h", self.h.to_string()),
            ("tau", self.tau.to_string()),
            ("merge", self.merge.to_string()),
            ("merge_rule", self.merge_rule.to_string()),
            ("zeta", self.zeta.to_string()),
            ("percentile", self.percentile.to_string()),
            ("merge_overlap", overlap),
            ("min_count", self.min_count.to_string()),
            ("em_iters", self.em_iters.to_string()),
            ("m", self.m.to_string()),
            ("lr_base", self.lr_base.to_string()),
            ("sgd_momentum", self.sgd_momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", clip),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("sigma_aug", self.sigma_aug.to_string()),
            ("p_drop", self.p_drop.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed", self.embed.to_string()),
            ("activation", self.activation.to_string()),
            ("kappa_mode", self.kappa_mode.to_string()),
            ("pca_retention", self.pca_retention.to_string()),
            ("loss_mode", self.loss_mode.to_string()),
            ("assign_mode", self.assign_mode.to_string()),
            ("weight_grad", self.weight_grad.to_string()),
            ("prior", self.prior.to_string()),
            ("centroid_mode", self.centroid_mode.to_string()),
            ("probe", self.probe.to_string()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k0", self.k0 as f64),
            ("h", self.h as f64),
            ("tau", self.tau),
            ("batch_size", self.batch_size as f64),
            ("hidden", self.hidden as f64),
            ("embed", self.embed as f64),
            ("em_iters", self.em_iters as f64),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("kappa0", self.kappa0),
            ("lr_base", self.lr_base),
            ("sgd_momentum", self.sgd_momentum),
            ("weight_decay", self.weight_decay),
            ("sigma_aug", self.sigma_aug),
            ("min_count", self.min_count),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        for (k, v) in [
            ("m", self.m),
            ("p_drop", self.p_drop),
            ("percentile", self.percentile),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        if !(self.pca_retention > 0.0 && self.pca_retention <= 1.0) {
            return Err(Error::Config(format!(
                "pca_retention must lie in (0, 1], got {}",
                self.pca_retention
            )));
        }
        Ok(())
    }

    pub fn net_config(&self, input_dim: usize) -> NetConfig {
        NetConfig {
            input_dim,
            hidden: self.hidden,
            embed: self.embed,
            activation: self.activation,
            m: self.m,
        }
    }

    pub fn m_step_config(&self) -> MStepConfig {
        MStepConfig {
            min_count: self.min_count,
            kappa_mode: match self.kappa_mode {
                KappaKind::Plain => KappaMode::Plain,
                KappaKind::Pca => KappaMode::Pca {
                    retention: self.pca_retention,
                },
            },
            guards: Guards::default(),
        }
    }

    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            rule: match self.merge_rule {
                MergeRuleKind::ZScore => MergeRule::ZScore(self.zeta),
                MergeRuleKind::Percentile => MergeRule::Percentile(self.percentile),
            },
            overlap: self.merge_overlap,
            guards: Guards::default(),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            sigma: self.sigma_aug,
            p_drop: self.p_drop,
        }
    }

    fn cluster_loss_config(&self, k: usize) -> ClusterLossConfig {
        ClusterLossConfig {
            h: self.h.min(k),
            tau: self.tau,
            prior: match self.prior {
                PriorKind::Uniform => PriorWeights::Uniform,
                PriorKind::ClusterSize => PriorWeights::ClusterSize,
            },
            weight_grad: match self.weight_grad {
                WeightGradKind::ThroughPi => WeightGrad::ThroughPi,
                WeightGradKind::Detached => WeightGrad::Detached,
            },
            sphere_grad: false,
        }
    }

    /// Peak learning rate, scaled linearly with batch size from a base of 256.
    pub fn peak_lr(&self) -> f64 {
        self.lr_base * self.batch_size as f64 / 256.0
    }
}

/// Cosine decay from `peak` at step 0 to zero at `total`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One line of `trajectory.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub log_likelihood: f64,
    pub mean_loss: f64,
    pub merges: usize,
    /// Components dropped by the M-step.
    pub dropped: usize,
    pub wall_time_s: f64,
}

/// Mutable state threaded through epochs.
pub struct TrainState {
    pub net: SiameseNet,
    pub mixture: MixtureState,
    sgd: Sgd,
    rng: ChaCha8Rng,
    global_step: usize,
    total_steps: usize,
}

/// Momentum-branch embedding of every sample.
pub fn embed_momentum(net: &SiameseNet, data: &Dataset) -> Result<Vec<UnitEmbedding>> {
    data.samples()
        .par_iter()
        .map(|s| net.embed_momentum(&s.features))
        .collect()
}

/// Online embedding (before the predictor) of every sample.
pub fn embed_online(net: &SiameseNet, data: &Dataset) -> Result<Vec<UnitEmbedding>> {
    data.samples()
        .par_iter()
        .map(|s| net.embed_online(&s.features))
        .collect()
}

impl TrainState {
    /// Builds the network and initialises the mixture once from the
    /// momentum embeddings.
    pub fn new(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        if cfg.k0 > data.len() {
            return Err(Error::Config(format!(
                "k0 = {} exceeds sample count {}",
                cfg.k0,
                data.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = SiameseNet::random(&cfg.net_config(data.dim()), &mut rng)?;
        let emb = embed_momentum(&net, data)?;
        let mixture = init_centroids(&emb, cfg.k0, cfg.kappa0, &mut rng)?;
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        Ok(Self {
            net,
            mixture,
            sgd: Sgd::new(cfg.sgd_momentum, cfg.weight_decay),
            rng,
            global_step: 0,
            total_steps: steps_per_epoch * cfg.epochs,
        })
    }

    /// E-step, M-step, one pass of minibatch training, merge pass.
    pub fn run_epoch(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<EpochReport> {
        let start = Instant::now();
        let epoch = self.mixture.epoch;
        let emb = embed_momentum(&self.net, data)?;

        if cfg.centroid_mode == CentroidMode::Reinit && epoch > 0 {
            self.mixture = init_centroids(&emb, self.mixture.k(), cfg.kappa0, &mut self.rng)?;
            self.mixture.epoch = epoch;
        }
        let k_before = self.mixture.k();
        let ms = cfg.m_step_config();
        for _ in 0..cfg.em_iters {
            let next = match cfg.assign_mode {
                AssignMode::HardCosine => {
                    let table = e_step_hard(&emb, &self.mixture)?;
                    m_step(&emb, Posterior::Hard(&table), &self.mixture, &ms)?
                }
                AssignMode::Posterior => {
                    let resp = responsibilities(&emb, &self.mixture)?;
                    m_step(&emb, Posterior::Soft(&resp), &self.mixture, &ms)?
                }
            };
            self.mixture = MixtureState { epoch, ..next };
        }
        let dropped = k_before - self.mixture.k();

        let mean_loss = self.train_pass(data, cfg)?;

        let mut merges = 0;
        if cfg.merge {
            let (merged, report) = merge_pass(&self.mixture, &cfg.merge_config())?;
            if report.absorbed > 0 {
                debug!("epoch {epoch}: merged groups {:?}", report.groups);
            }
            merges = report.absorbed;
            self.mixture = merged;
        }
        let log_likelihood = log_likelihood(&emb, &self.mixture)?;
        self.mixture.epoch = epoch + 1;
        let report = EpochReport {
            epoch: epoch + 1,
            k: self.mixture.k(),
            log_likelihood,
            mean_loss,
            merges,
            dropped,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {:>3}  K {:>4}  loss {:>10.4}  loglik {:>12.2}  merged {}",
            report.epoch, report.k, report.mean_loss, report.log_likelihood, report.merges
        );
        Ok(report)
    }

    fn train_pass(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let aug = cfg.augment_config();
        let loss_cfg = cfg.cluster_loss_config(self.mixture.k());
        let peak = cfg.peak_lr();
        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let views: Vec<(Vec<f64>, Vec<f64>)> = batch
                .iter()
                .map(|&i| augment(data.features(i), &aug, &mut self.rng))
                .collect();
            let net = &self.net;
            let outs: Vec<ForwardOutput> = views
                .par_iter()
                .map(|(x1, x2)| net.forward(x1, x2))
                .collect::<Result<_>>()?;
            let ctx = BatchContext {
                batch,
                outs: &outs,
                mixture: &self.mixture,
                loss_cfg: &loss_cfg,
                mode: cfg.loss_mode,
            };
            let partials: Vec<(f64, ParamGrads)> = (0..batch.len())
                .collect::<Vec<_>>()
                .par_chunks(REDUCE_CHUNK)
                .map(|chunk| {
                    let mut grads = ParamGrads::zeros(net);
                    let mut value = 0.0;
                    for &b in chunk {
                        let l = ctx.sample_loss(b)?;
                        value += l.value;
                        grads.add_assign(&net.backward(&outs[b].tape, &l.grads[0], &l.grads[1])?);
                    }
                    Ok((value, grads))
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::zeros(net);
            let mut value = 0.0;
            for (v, g) in &partials {
                value += v;
                grads.add_assign(g);
            }
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} step {}",
                    self.mixture.epoch, self.global_step
                )));
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            total_loss += value;
            let lr = cosine_lr(peak, self.global_step, self.total_steps);
            self.sgd.step(&mut self.net, &grads, lr)?;
            self.net.momentum_update();
            self.global_step += 1;
        }
        Ok(total_loss / data.len() as f64)
    }
}

struct BatchContext<'a> {
    batch: &'a [usize],
    outs: &'a [ForwardOutput],
    mixture: &'a MixtureState,
    loss_cfg: &'a ClusterLossConfig,
    mode: LossMode,
}

impl BatchContext<'_> {
    /// Loss of one batch element with gradients for its two online outputs.
    fn sample_loss(&self, b: usize) -> Result<LossValueGrad> {
        let o = &self.outs[b];
        let d = o.v1.dim();
        let mut total = LossValueGrad::zero(&[d, d]);
        let mut add = |slot: usize, l: LossValueGrad| {
            total.value += l.value;
            for (t, g) in total.grads[slot].iter_mut().zip(&l.grads[0]) {
                *t += g;
            }
        };
        match self.mode {
            LossMode::SiamMm | LossMode::SiamMmNoInst => {
                // The neighbour set of each view is fixed by its momentum embedding.
                for (slot, (v, vm)) in [(&o.v1, &o.v1m), (&o.v2, &o.v2m)].into_iter().enumerate() {
                    let ids = nearest_centroids(vm, self.mixture, self.loss_cfg.h)?;
                    add(
                        slot,
                        cluster_loss_over(v, &ids, self.mixture, self.loss_cfg)?,
                    );
                }
            }
            LossMode::Nce1 => {
                let pos = self.mixture.assignments.get(self.batch[b]);
                let negs: Vec<usize> = (0..self.mixture.k()).filter(|&k| k != pos).collect();
                for (slot, v) in [&o.v1, &o.v2].into_iter().enumerate() {
                    add(slot, nce_centroid_loss(v, pos, &negs, self.mixture)?);
                }
            }
            LossMode::Nce2 => {
                let own = self.mixture.assignments.get(self.batch[b]);
                let comp = &self.mixture.components[own];
                for slot in 0..2 {
                    let negs: Vec<&[f64]> = self
                        .batch
                        .iter()
                        .zip(self.outs)
                        .filter(|(&j, _)| self.mixture.assignments.get(j) != own)
                        .map(|(_, oj)| {
                            if slot == 0 {
                                oj.v1m.as_slice()
                            } else {
                                oj.v2m.as_slice()
                            }
                        })
                        .collect();
                    let v = if slot == 0 { &o.v1 } else { &o.v2 };
                    add(slot, nce_instance_loss(v, &negs, comp)?);
                }
            }
            LossMode::InstOnly => {}
        }
        if self.mode.has_instance_term() {
            let inst = instance_loss(&o.v1, &o.v2, &o.v1m, &o.v2m)?;
            total.value += inst.value;
            for (t, g) in total.grads.iter_mut().zip(&inst.grads) {
                for (a, b) in t.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(total)
    }
}

/// The result of [`fit`].
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub net: SiameseNet,
    pub mixture: MixtureState,
    /// K right after initialisation, before any epoch.
    pub k_initial: usize,
    pub trajectory: Vec<EpochReport>,
    /// Final cluster id of every sample (hard cosine assignment of the
    /// momentum embeddings to the final mixture).
    pub assignments: Vec<u32>,
}

impl TrainOutcome {
    /// `(epoch, K)` including the initial count at epoch 0.
    pub fn k_curve(&self) -> Vec<(usize, usize)> {
        std::iter::once((0, self.k_initial))
            .chain(self.trajectory.iter().map(|r| (r.epoch, r.k)))
            .collect()
    }

    /// Clustering metrics against the dataset labels; the probe runs on
    /// online embeddings when enabled.
    pub fn metrics(&self, data: &Dataset) -> Result<Option<Metrics>> {
        let Some(truth) = data.labels() else {
            return Ok(None);
        };
        let probe_acc = if self.config.probe {
            let feats = embed_online(&self.net, data)?;
            Some(linear_probe(
                &feats,
                &truth,
                &ProbeConfig {
                    seed: self.config.seed,
                    ..Default::default()
                },
            )?)
        } else {
            None
        };
        Ok(Some(Metrics {
            ami: ami(&self.assignments, &truth)?,
            majority_acc: majority_label_accuracy(&self.assignments, &truth)?,
            probe_acc,
            k_final: self.mixture.k(),
            epochs: self.trajectory.len(),
        }))
    }

    /// Writes `trajectory.jsonl`, `clusters.csv`, `mixture.smm`,
    /// `checkpoint.smmc`, `config.kv` and, when labels exist, `metrics.json`.
    pub fn write(&self, dir: impl AsRef<Path>, data: &Dataset) -> Result<Option<Metrics>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut traj = BufWriter::new(File::create(dir.join("trajectory.jsonl"))?);
        for r in &self.trajectory {
            serde_json::to_writer(&mut traj, r)?;
            traj.write_all(b"\n")?;
        }
        traj.flush()?;
        write_k_curve(&self.k_curve(), File::create(dir.join("clusters.csv"))?)?;
        save_snapshot(&self.mixture, dir.join("mixture.smm"))?;
        save_checkpoint(&self.net, dir.join("checkpoint.smmc"))?;
        fs::write(dir.join("config.kv"), self.config.to_kv_string())?;
        let metrics = self.metrics(data)?;
        if let Some(m) = &metrics {
            fs::write(
                dir.join("metrics.json"),
                serde_json::to_string_pretty(m)? + "\n",
            )?;
        }
        Ok(metrics)
    }
}

pub fn write_k_curve<W: Write>(curve: &[(usize, usize)], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "K"])
        .map_err(|e| Error::parse(e.to_string()))?;
    for (e, k) in curve {
        out.write_record([e.to_string(), k.to_string()])
            .map_err(|e| Error::parse(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Full run: one initialisation, then `cfg.epochs` epochs.
pub fn fit(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut st = TrainState::new(data, cfg)?;
    let k_initial = st.mixture.k();
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        trajectory.push(st.run_epoch(data, cfg)?);
    }
    let emb = embed_momentum(&st.net, data)?;
    let table = e_step_hard(&emb, &st.mixture)?;
    let assignments = table
        .as_slice()
        .iter()
        .map(|&k| st.mixture.components[k].id)
        .collect();
    st.mixture.assignments = table;
    Ok(TrainOutcome {
        config: cfg.clone(),
        net: st.net,
        mixture: st.mixture,
        k_initial,
        trajectory,
        assignments,
    })
}

/// Settings for clustering fixed embeddings without training a network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub k0: usize,
    pub kappa0: f64,
    pub iterations: usize,
    pub soft: bool,
    pub merge: Option<MergeConfig>,
    pub m_step: MStepConfig,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k0: 10,
            kappa0: 10.0,
            iterations: 20,
            soft: true,
            merge: None,
            m_step: MStepConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub log_likelihood: f64,
    pub merges: usize,
}

/// Seeding, then alternating E/M steps with an optional merge pass after
/// each M-step.
pub fn cluster_embeddings(
    emb: &[UnitEmbedding],
    cfg: &EmConfig,
) -> Result<(MixtureState, Vec<EmIteration>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init_centroids(emb, cfg.k0, cfg.kappa0, &mut rng)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        state = if cfg.soft {
            let resp = responsibilities(emb, &state)?;
            m_step(emb, Posterior::Soft(&resp), &state, &cfg.m_step)?
        } else {
            let table = e_step_hard(emb, &state)?;
            m_step(emb, Posterior::Hard(&table), &state, &cfg.m_step)?
        };
        let mut merges = 0;
        if let Some(mc) = &cfg.merge {
            let (merged, report) = merge_pass(&state, mc)?;
            merges = report.absorbed;
            state = merged;
        }
        state.epoch = it + 1;
        log.push(EmIteration {
            iteration: it + 1,
            k: state.k(),
            log_likelihood: log_likelihood(emb, &state)?,
            merges,
        });
    }
    state.assignments = e_step_hard(emb, &state)?;
    Ok((state, log))
}

/// Count of samples per cluster id, for progress output.
pub fn cluster_sizes(assignments: &[u32]) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for &a in assignments {
        *m.entry(a).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests;
