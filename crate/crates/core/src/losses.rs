//! Training objectives with exact gradients with respect to embeddings.
//!
//! Mixture estimates (`mu`, `kappa`, `alpha`) and momentum-branch embeddings
//! enter every loss as plain numbers: no loss returns a gradient slot for
//! them, so there is no path for gradient to flow into them.

use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, log_sum_exp, norm, project_tangent};
use crate::mixture::{nearest_centroids, MixtureState, VmfComponent};
use crate::{Error, Result};

/// Inputs to [`instance_loss`] must have unit norm within this tolerance.
pub const LOSS_UNIT_TOL: f64 = 1e-4;

/// Which size weights multiply the soft-assignment softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PriorWeights {
    /// All weights equal to one.
    #[default]
    Uniform,
    /// The mixing weights `alpha_k` of the mixture.
    ClusterSize,
}

/// Whether the soft-assignment weights are differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightGrad {
    /// Exact derivative of the written objective, through `pi_k(v)`.
    #[default]
    ThroughPi,
    /// Treat `pi_k` as constants.
    Detached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterLossConfig {
    pub h: usize,
    pub tau: f64,
    pub prior: PriorWeights,
    pub weight_grad: WeightGrad,
    /// Project the gradient onto the tangent space of the sphere at `v`.
    pub sphere_grad: bool,
}

impl Default for ClusterLossConfig {
    fn default() -> Self {
        Self {
            h: 5,
            tau: 0.02,
            prior: PriorWeights::Uniform,
            weight_grad: WeightGrad::ThroughPi,
            sphere_grad: false,
        }
    }
}

/// Convex weights over the `h` nearest components.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    /// Component indices, most similar first.
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
    pub tau: f64,
}

impl SoftAssignment {
    pub fn h(&self) -> usize {
        self.ids.len()
    }
}

/// A loss value and one gradient per differentiable input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossValueGrad {
    pub fn zero(shapes: &[usize]) -> Self {
        Self {
            value: 0.0,
            grads: shapes.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    fn check_finite(self) -> Result<Self> {
        if !self.value.is_finite() || self.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient (value {})",
                self.value
            )));
        }
        Ok(self)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn check_dim(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    Ok(())
}

fn prior_log(prior: PriorWeights, c: &VmfComponent) -> f64 {
    match prior {
        PriorWeights::Uniform => 0.0,
        PriorWeights::ClusterSize => c.alpha.ln(),
    }
}

/// `log pi_k(v)` over the given membership set.
fn log_weights(
    v: &[f64],
    ids: &[usize],
    state: &MixtureState,
    tau: f64,
    prior: PriorWeights,
) -> Vec<f64> {
    let mut a: Vec<f64> = ids
        .iter()
        .map(|&k| {
            let c = &state.components[k];
            prior_log(prior, c) + dot(&c.mu, v) / tau
        })
        .collect();
    let lse = log_sum_exp(&a);
    a.iter_mut().for_each(|x| *x -= lse);
    a
}

fn check_ids(ids: &[usize], state: &MixtureState) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::invalid("empty membership set"));
    }
    if let Some(&bad) = ids.iter().find(|&&k| k >= state.k()) {
        return Err(Error::invalid(format!(
            "component index {bad} out of range (K = {})",
            state.k()
        )));
    }
    Ok(())
}

/// `pi_k(v) = alpha_k exp(mu_k^T v / tau) / sum_l alpha_l exp(mu_l^T v / tau)`
/// over the `h` nearest components.
pub fn soft_assign_weights(
    v: &[f64],
    state: &MixtureState,
    h: usize,
    tau: f64,
    prior: PriorWeights,
) -> Result<SoftAssignment> {
    check_tau(tau)?;
    let ids = nearest_centroids(v, state, h)?;
    soft_assign_weights_over(v, &ids, state, tau, prior)
}

/// As [`soft_assign_weights`] for an explicit membership set.
pub fn soft_assign_weights_over(
    v: &[f64],
    ids: &[usize],
    state: &MixtureState,
    tau: f64,
    prior: PriorWeights,
) -> Result<SoftAssignment> {
    check_tau(tau)?;
    check_dim(v, state.dim)?;
    check_ids(ids, state)?;
    let weights = log_weights(v, ids, state, tau, prior)
        .into_iter()
        .map(f64::exp)
        .collect();
    Ok(SoftAssignment {
        ids: ids.to_vec(),
        weights,
        tau,
    })
}

/// `-log sum_{k in M} pi_k(v) exp(kappa_k mu_k^T v)` with `M` the `h`
/// components nearest to `v`.
pub fn cluster_loss(
    v: &[f64],
    state: &MixtureState,
    config: &ClusterLossConfig,
) -> Result<LossValueGrad> {
    check_tau(config.tau)?;
    let ids = nearest_centroids(v, state, config.h)?;
    cluster_loss_over(v, &ids, state, config)
}

/// As [`cluster_loss`] with the membership set fixed by the caller
/// (`config.h` is ignored). The set is a constant of the objective.
pub fn cluster_loss_over(
    v: &[f64],
    ids: &[usize],
    state: &MixtureState,
    config: &ClusterLossConfig,
) -> Result<LossValueGrad> {
    check_tau(config.tau)?;
    check_dim(v, state.dim)?;
    check_ids(ids, state)?;
    let tau = config.tau;
    let log_pi = log_weights(v, ids, state, tau, config.prior);
    let logits: Vec<f64> = ids
        .iter()
        .zip(&log_pi)
        .map(|(&k, lp)| {
            let c = &state.components[k];
            lp + c.kappa * dot(&c.mu, v)
        })
        .collect();
    let lse = log_sum_exp(&logits);
    let value = -lse;

    // q_k: posterior over M of the combined logits.
    let mut grad = vec![0.0; v.len()];
    for ((&k, logit), lp) in ids.iter().zip(&logits).zip(&log_pi) {
        let c = &state.components[k];
        let q = (logit - lse).exp();
        let coeff = match config.weight_grad {
            // d/dv [-(LSE(a + b) - LSE(a))] with a_k = log alpha_k + s_k / tau, b_k = kappa_k s_k
            WeightGrad::ThroughPi => -q * (c.kappa + 1.0 / tau) + lp.exp() / tau,
            WeightGrad::Detached => -q * c.kappa,
        };
        axpy(coeff, &c.mu, &mut grad);
    }
    if config.sphere_grad {
        grad = project_tangent(v, &grad);
    }
    LossValueGrad {
        value,
        grads: vec![grad],
    }
    .check_finite()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = norm(v);
    if !n.is_finite() || (n - 1.0).abs() > LOSS_UNIT_TOL {
        return Err(Error::domain(format!(
            "{what} must have unit norm, got {n}"
        )));
    }
    Ok(())
}

/// Symmetrised instance loss `D(v1, sg(v2m)) + D(v2, sg(v1m))` with
/// `D(a, b) = -a^T b`. Gradients are returned for `v1` and `v2` only.
pub fn instance_loss(v1: &[f64], v2: &[f64], v1m: &[f64], v2m: &[f64]) -> Result<LossValueGrad> {
    let d = v1.len();
    for (v, name) in [(v1, "v1"), (v2, "v2"), (v1m, "v1m"), (v2m, "v2m")] {
        check_dim(v, d)?;
        check_unit(v, name)?;
    }
    let value = -dot(v1, v2m) - dot(v2, v1m);
    LossValueGrad {
        value,
        grads: vec![
            v2m.iter().map(|x| -x).collect(),
            v1m.iter().map(|x| -x).collect(),
        ],
    }
    .check_finite()
}

/// Unweighted sum of two losses over the same inputs.
pub fn total_loss(cluster: &LossValueGrad, instance: &LossValueGrad) -> Result<LossValueGrad> {
    if cluster.grads.len() != instance.grads.len()
        || cluster
            .grads
            .iter()
            .zip(&instance.grads)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::invalid("loss terms have different gradient shapes"));
    }
    Ok(LossValueGrad {
        value: cluster.value + instance.value,
        grads: cluster
            .grads
            .iter()
            .zip(&instance.grads)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect(),
    })
}

/// Cross-entropy of `v` against its positive centroid with the other listed
/// centroids as negatives; logits are `kappa_k mu_k^T v`.
pub fn nce_centroid_loss(
    v: &[f64],
    pos_id: usize,
    neg_ids: &[usize],
    state: &MixtureState,
) -> Result<LossValueGrad> {
    check_dim(v, state.dim)?;
    check_ids(&[pos_id], state)?;
    if !neg_ids.is_empty() {
        check_ids(neg_ids, state)?;
    }
    if neg_ids.contains(&pos_id) {
        return Err(Error::invalid(format!(
            "positive component {pos_id} listed as negative"
        )));
    }
    let ids: Vec<usize> = std::iter::once(pos_id)
        .chain(neg_ids.iter().copied())
        .collect();
    let logits: Vec<f64> = ids
        .iter()
        .map(|&k| {
            let c = &state.components[k];
            c.kappa * dot(&c.mu, v)
        })
        .collect();
    let lse = log_sum_exp(&logits);
    let mut grad = vec![0.0; v.len()];
    for (i, (&k, logit)) in ids.iter().zip(&logits).enumerate() {
        let c = &state.components[k];
        let p = (logit - lse).exp();
        let coeff = if i == 0 { p - 1.0 } else { p } * c.kappa;
        axpy(coeff, &c.mu, &mut grad);
    }
    LossValueGrad {
        value: lse - logits[0],
        grads: vec![grad],
    }
    .check_finite()
}

/// Contrasts `v_pos` against negative embeddings under one component:
/// logits are `kappa mu^T v`. Only `v_pos` receives a gradient.
pub fn nce_instance_loss<V: AsRef<[f64]>>(
    v_pos: &[f64],
    v_negs: &[V],
    comp: &VmfComponent,
) -> Result<LossValueGrad> {
    let d = comp.mu.dim();
    check_dim(v_pos, d)?;
    let mut logits = Vec::with_capacity(v_negs.len() + 1);
    logits.push(comp.kappa * dot(&comp.mu, v_pos));
    for n in v_negs {
        check_dim(n.as_ref(), d)?;
        logits.push(comp.kappa * dot(&comp.mu, n.as_ref()));
    }
    let lse = log_sum_exp(&logits);
    let p_pos = (logits[0] - lse).exp();
    let grad = comp
        .mu
        .iter()
        .map(|m| comp.kappa * (p_pos - 1.0) * m)
        .collect();
    LossValueGrad {
        value: lse - logits[0],
        grads: vec![grad],
    }
    .check_finite()
}
