//! The von Mises-Fisher mixture over embeddings.
//!
//! Components keep a stable `id` for the whole run; they are always stored in
//! ascending id order, so "lowest index" and "lowest id" tie-breaking agree.
//! Centroids are seeded once by [`init_centroids`] and afterwards only refit
//! ([`m_step`]), merged ([`merge_pass`]) or dropped.

mod merge;
mod pca;
mod snapshot;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, log_sum_exp, norm};
use crate::vmf::{direction, estimate_kappa_with, log_norm_const, Guards, UnitEmbedding};
use crate::{Error, Result};

pub use merge::{merge_pass, merge_stats, MergeConfig, MergeReport, MergeRule, MergeStats};
pub use pca::{fit_pca, kappa_pca, PcaProjection, DEFAULT_RETENTION};
pub use snapshot::{
    load_snapshot, read_snapshot, save_snapshot, snapshot_json, write_snapshot, SNAPSHOT_MAGIC,
    SNAPSHOT_VERSION,
};

/// One mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfComponent {
    /// Stable identifier, preserved across epochs.
    pub id: u32,
    pub mu: UnitEmbedding,
    pub kappa: f64,
    /// Unnormalised (weighted) mean of the members.
    pub r: Vec<f64>,
    /// Mixing weight: fraction of the data held by this component.
    pub alpha: f64,
    /// Hard or soft member count.
    pub member_count: f64,
}

impl VmfComponent {
    pub fn r_norm(&self) -> f64 {
        norm(&self.r)
    }
}

/// Hard assignment of every sample to a component index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssignmentTable {
    cluster_of: Vec<usize>,
}

impl AssignmentTable {
    pub fn new(cluster_of: Vec<usize>) -> Self {
        Self { cluster_of }
    }

    pub fn len(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_of.is_empty()
    }

    pub fn get(&self, i: usize) -> usize {
        self.cluster_of[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.cluster_of
    }

    /// Number of samples held by each of `k` components.
    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &c in &self.cluster_of {
            counts[c] += 1;
        }
        counts
    }
}

/// Dense posterior `p(k | v_i)`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k: usize,
    probs: Vec<f64>,
}

impl Responsibilities {
    pub fn n(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.probs.len() / self.k
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Most probable component of sample `i`; ties go to the lowest index.
    pub fn argmax(&self, i: usize) -> usize {
        argmax_first(self.row(i))
    }
}

/// Either hard assignments or soft responsibilities, as consumed by [`m_step`].
#[derive(Debug, Clone, Copy)]
pub enum Posterior<'a> {
    Hard(&'a AssignmentTable),
    Soft(&'a Responsibilities),
}

/// How component concentrations are estimated in the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KappaMode {
    Plain,
    /// Re-measure `||r||` in a PCA subspace keeping `retention` of the norm.
    Pca {
        retention: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepConfig {
    /// Components with a smaller (soft) count are dropped.
    pub min_count: f64,
    pub kappa_mode: KappaMode,
    pub guards: Guards,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self {
            min_count: 2.0,
            kappa_mode: KappaMode::Plain,
            guards: Guards::default(),
        }
    }
}

/// The full cluster model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub components: Vec<VmfComponent>,
    pub assignments: AssignmentTable,
    pub epoch: usize,
    pub dim: usize,
}

impl MixtureState {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.components.iter().map(|c| c.id).collect()
    }

    /// Cluster id (not index) of every sample.
    pub fn labels(&self) -> Vec<usize> {
        self.assignments
            .as_slice()
            .iter()
            .map(|&k| self.components[k].id as usize)
            .collect()
    }

    /// Checks the structural invariants; used by tests and after loading files.
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture has no components"));
        }
        for c in &self.components {
            if c.mu.dim() != self.dim || c.r.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: c.mu.dim(),
                });
            }
        }
        if self.components.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::invalid("component ids must be strictly increasing"));
        }
        if let Some(&bad) = self.assignments.as_slice().iter().find(|&&k| k >= self.k()) {
            return Err(Error::invalid(format!(
                "assignment to missing component {bad}"
            )));
        }
        Ok(())
    }

    fn check_dim<V: AsRef<[f64]>>(&self, embeddings: &[V]) -> Result<()> {
        match embeddings.iter().find(|v| v.as_ref().len() != self.dim) {
            Some(v) => Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.as_ref().len(),
            }),
            None => Ok(()),
        }
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn nearest_index(v: &[f64], components: &[VmfComponent]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, c) in components.iter().enumerate() {
        let s = dot(&c.mu, v);
        if s > best_sim {
            best_sim = s;
            best = k;
        }
    }
    best
}

/// Spherical k-means++ seeding (weights are squared cosine distances to the
/// nearest seed) followed by one hard refit of the means.
///
/// Every component starts with concentration `kappa0` and weight `1/k0`.
pub fn init_centroids<R: Rng + ?Sized>(
    embeddings: &[UnitEmbedding],
    k0: usize,
    kappa0: f64,
    rng: &mut R,
) -> Result<MixtureState> {
    let n = embeddings.len();
    if k0 == 0 {
        return Err(Error::invalid("k0 must be at least 1"));
    }
    if k0 > n {
        return Err(Error::invalid(format!(
            "k0 = {k0} exceeds sample count {n}"
        )));
    }
    let dim = embeddings[0].dim();
    let probe = MixtureState {
        components: Vec::new(),
        assignments: AssignmentTable::default(),
        epoch: 0,
        dim,
    };
    probe.check_dim(embeddings)?;

    let mut chosen = vec![false; n];
    let mut seeds = Vec::with_capacity(k0);
    let first = rng.random_range(0..n);
    seeds.push(first);
    chosen[first] = true;
    let mut dist: Vec<f64> = embeddings
        .iter()
        .map(|v| (1.0 - dot(v, &embeddings[first])).max(0.0).powi(2))
        .collect();
    dist[first] = 0.0;

    while seeds.len() < k0 {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 {
                    pick = Some(i);
                    if target < *d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // Remaining points coincide with seeds; pick uniformly among the rest.
            let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            rest[rng.random_range(0..rest.len())]
        };
        seeds.push(next);
        chosen[next] = true;
        dist[next] = 0.0;
        for (i, v) in embeddings.iter().enumerate() {
            if !chosen[i] {
                dist[i] = dist[i].min((1.0 - dot(v, &embeddings[next])).max(0.0).powi(2));
            }
        }
    }

    let mut components: Vec<VmfComponent> = seeds
        .iter()
        .enumerate()
        .map(|(k, &i)| VmfComponent {
            id: k as u32,
            mu: embeddings[i].clone(),
            kappa: kappa0,
            r: embeddings[i].to_vec(),
            alpha: 1.0 / k0 as f64,
            member_count: 0.0,
        })
        .collect();

    let cluster_of: Vec<usize> = embeddings
        .par_iter()
        .map(|v| nearest_index(v, &components))
        .collect();
    let mut sums = vec![vec![0.0; dim]; k0];
    let mut counts = vec![0usize; k0];
    for (v, &k) in embeddings.iter().zip(&cluster_of) {
        counts[k] += 1;
        for (s, x) in sums[k].iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    for ((c, sum), count) in components.iter_mut().zip(sums).zip(counts) {
        c.member_count = count as f64;
        if count == 0 {
            continue;
        }
        let r: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        if let Ok(mu) = direction(&r, crate::vmf::EPS_R) {
            c.mu = mu;
            c.r = r;
        }
    }

    Ok(MixtureState {
        components,
        assignments: AssignmentTable::new(cluster_of),
        epoch: 0,
        dim,
    })
}

/// Assigns every sample to the component with the largest cosine similarity.
pub fn e_step_hard(embeddings: &[UnitEmbedding], state: &MixtureState) -> Result<AssignmentTable> {
    state.check_dim(embeddings)?;
    let cluster_of = embeddings
        .par_iter()
        .map(|v| nearest_index(v, &state.components))
        .collect();
    Ok(AssignmentTable::new(cluster_of))
}

/// Per-component log weights `log alpha_k + log c_d(kappa_k)`.
fn log_prefactors(state: &MixtureState) -> Result<Vec<f64>> {
    state
        .components
        .iter()
        .map(|c| Ok(c.alpha.ln() + log_norm_const(state.dim, c.kappa)?))
        .collect()
}

/// Full posterior `p(k|v) ∝ alpha_k c_d(kappa_k) exp(kappa_k mu_k^T v)`.
pub fn responsibilities(
    embeddings: &[UnitEmbedding],
    state: &MixtureState,
) -> Result<Responsibilities> {
    state.check_dim(embeddings)?;
    let pre = log_prefactors(state)?;
    let k = state.k();
    let rows: Vec<Vec<f64>> = embeddings
        .par_iter()
        .map(|v| {
            let mut logits: Vec<f64> = state
                .components
                .iter()
                .zip(&pre)
                .map(|(c, p)| p + c.kappa * dot(&c.mu, v))
                .collect();
            crate::linalg::softmax_in_place(&mut logits);
            let s: f64 = logits.iter().sum();
            logits.iter_mut().for_each(|x| *x /= s);
            logits
        })
        .collect();
    Ok(Responsibilities {
        k,
        probs: rows.into_iter().flatten().collect(),
    })
}

/// `sum_i log sum_k alpha_k c_d(kappa_k) exp(kappa_k mu_k^T v_i)`.
pub fn log_likelihood(embeddings: &[UnitEmbedding], state: &MixtureState) -> Result<f64> {
    state.check_dim(embeddings)?;
    let pre = log_prefactors(state)?;
    let per_sample: Vec<f64> = embeddings
        .par_iter()
        .map(|v| {
            let logits: Vec<f64> = state
                .components
                .iter()
                .zip(&pre)
                .map(|(c, p)| p + c.kappa * dot(&c.mu, v))
                .collect();
            log_sum_exp(&logits)
        })
        .collect();
    Ok(per_sample.iter().sum())
}

/// The `h` most similar component indices, most similar first; ties by lowest index.
pub fn nearest_centroids(v: &[f64], state: &MixtureState, h: usize) -> Result<Vec<usize>> {
    if h == 0 || h > state.k() {
        return Err(Error::invalid(format!(
            "h = {h} must lie in [1, {}]",
            state.k()
        )));
    }
    if v.len() != state.dim {
        return Err(Error::DimensionMismatch {
            expected: state.dim,
            found: v.len(),
        });
    }
    let sims: Vec<f64> = state.components.iter().map(|c| dot(&c.mu, v)).collect();
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx.truncate(h);
    Ok(idx)
}

/// Maximum-likelihood refit of every component from hard or soft memberships.
///
/// Components whose count falls below `min_count`, or whose resultant is
/// degenerate, are dropped. Mixing weights are renormalised over survivors and
/// the assignment table is remapped onto them.
pub fn m_step(
    embeddings: &[UnitEmbedding],
    posterior: Posterior<'_>,
    state: &MixtureState,
    config: &MStepConfig,
) -> Result<MixtureState> {
    state.check_dim(embeddings)?;
    let n = embeddings.len();
    let k = state.k();
    let dim = state.dim;

    let (counts, sums): (Vec<f64>, Vec<Vec<f64>>) = match posterior {
        Posterior::Hard(table) => {
            if table.len() != n {
                return Err(Error::invalid(format!(
                    "assignment table has {} rows for {n} samples",
                    table.len()
                )));
            }
            let mut counts = vec![0.0; k];
            let mut sums = vec![vec![0.0; dim]; k];
            for (v, &c) in embeddings.iter().zip(table.as_slice()) {
                if c >= k {
                    return Err(Error::invalid(format!(
                        "assignment to missing component {c}"
                    )));
                }
                counts[c] += 1.0;
                crate::linalg::axpy(1.0, v, &mut sums[c]);
            }
            (counts, sums)
        }
        Posterior::Soft(resp) => {
            if resp.n() != n || resp.k() != k {
                return Err(Error::invalid("responsibility matrix shape does not match"));
            }
            (0..k)
                .into_par_iter()
                .map(|c| {
                    let mut count = 0.0;
                    let mut sum = vec![0.0; dim];
                    for (i, v) in embeddings.iter().enumerate() {
                        let p = resp.row(i)[c];
                        count += p;
                        crate::linalg::axpy(p, v, &mut sum);
                    }
                    (count, sum)
                })
                .unzip()
        }
    };

    let mut refit: Vec<Option<VmfComponent>> = state
        .components
        .iter()
        .zip(counts.iter().zip(&sums))
        .map(|(old, (&count, sum))| {
            if count <= 0.0 {
                return None;
            }
            let r: Vec<f64> = sum.iter().map(|s| s / count).collect();
            let mu = direction(&r, config.guards.eps_r).ok()?;
            let kappa = estimate_kappa_with(norm(&r), dim, &config.guards);
            Some(VmfComponent {
                id: old.id,
                mu,
                kappa,
                r,
                alpha: 0.0,
                member_count: count,
            })
        })
        .collect();

    let survives = |c: &VmfComponent| c.member_count >= config.min_count;
    if !refit.iter().flatten().any(survives) {
        // Keep the largest valid component rather than emptying the model.
        let best = refit
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, c.member_count)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Numeric("every component has a degenerate resultant".into()))?;
        for (i, c) in refit.iter_mut().enumerate() {
            if i != best {
                *c = None;
            }
        }
    } else {
        for c in refit.iter_mut() {
            if c.as_ref().is_some_and(|c| !survives(c)) {
                *c = None;
            }
        }
    }

    let mut new_index = vec![usize::MAX; k];
    let mut components = Vec::new();
    for (old, c) in refit.into_iter().enumerate() {
        if let Some(c) = c {
            new_index[old] = components.len();
            components.push(c);
        }
    }
    let total: f64 = components.iter().map(|c| c.member_count).sum();
    for c in components.iter_mut() {
        c.alpha = c.member_count / total;
    }

    if let KappaMode::Pca { retention } = config.kappa_mode {
        if components.len() >= 2 {
            let (kappas, _) = kappa_pca(&components, retention, &config.guards)?;
            for (c, kappa) in components.iter_mut().zip(kappas) {
                c.kappa = kappa;
            }
        }
    }

    let cluster_of: Vec<usize> = match posterior {
        Posterior::Hard(table) => table
            .as_slice()
            .par_iter()
            .zip(embeddings.par_iter())
            .map(|(&old, v)| match new_index[old] {
                usize::MAX => nearest_index(v, &components),
                i => i,
            })
            .collect(),
        Posterior::Soft(resp) => (0..n)
            .map(|i| {
                let row = resp.row(i);
                let mut best = usize::MAX;
                let mut best_p = f64::NEG_INFINITY;
                for (old, &p) in row.iter().enumerate() {
                    if new_index[old] != usize::MAX && p > best_p {
                        best_p = p;
                        best = new_index[old];
                    }
                }
                best
            })
            .collect(),
    };

    Ok(MixtureState {
        components,
        assignments: AssignmentTable::new(cluster_of),
        epoch: state.epoch,
        dim,
    })
}
