//! Dynamic cluster merging on standardised pairwise centroid distances.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{MixtureState, VmfComponent};
use crate::linalg::{dist, norm};
use crate::vmf::{direction, estimate_kappa_with, Guards};
use crate::{Error, Result};

/// Which standardised distances count as "close".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MergeRule {
    /// Mark pairs whose z-score is below `zeta`.
    ZScore(f64),
    /// Mark pairs whose z-score is below this quantile (in `[0, 1]`) of all z-scores.
    Percentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub rule: MergeRule,
    /// When set, marked pairs are joined closest first, and only while the two
    /// groups they belong to satisfy `||mu_a - mu_b|| <= overlap * 2 min(s_a, s_b)`.
    /// Means and `s = sqrt(2 (1 - ||r||))` (typical chord distance from a
    /// member to its mean direction) are taken from the groups' pooled `r`.
    /// `None` takes the plain transitive closure of marked pairs.
    pub overlap: Option<f64>,
    pub guards: Guards,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            rule: MergeRule::ZScore(-1.2),
            overlap: Some(0.7),
            guards: Guards::default(),
        }
    }
}

/// Pairwise distances `||mu_i - mu_j||` for `i < j` and their moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeStats {
    /// `(i, j, Z_ij)` in lexicographic index order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

impl MergeStats {
    pub fn z_score(&self, distance: f64) -> f64 {
        (distance - self.mean) / self.sd
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeReport {
    /// Number of components absorbed into others.
    pub absorbed: usize,
    /// Merged groups as lists of component ids (singletons omitted).
    pub groups: Vec<Vec<u32>>,
    /// Effective z-score threshold used for this pass.
    pub threshold: Option<f64>,
}

pub fn merge_stats(state: &MixtureState) -> MergeStats {
    let comps = &state.components;
    let mut pairs = Vec::with_capacity(comps.len() * comps.len().saturating_sub(1) / 2);
    for i in 0..comps.len() {
        for j in i + 1..comps.len() {
            pairs.push((i, j, dist(&comps[i].mu, &comps[j].mu)));
        }
    }
    let m = pairs.len().max(1) as f64;
    let mean = pairs.iter().map(|p| p.2).sum::<f64>() / m;
    let var = pairs.iter().map(|p| (p.2 - mean).powi(2)).sum::<f64>() / m;
    MergeStats {
        pairs,
        mean,
        sd: var.sqrt(),
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Links the larger root under the smaller, so roots are group minima.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Linear-interpolated quantile of an unsorted sample.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Running count-weighted resultant of a tentative merge group.
#[derive(Clone)]
struct GroupSum {
    weighted_r: Vec<f64>,
    weight: f64,
}

impl GroupSum {
    fn new(c: &VmfComponent, dim: usize) -> Self {
        // Same weighting as `merge_group`; unit weight when both are unknown.
        let weight = if c.member_count > 0.0 {
            c.member_count
        } else if c.alpha > 0.0 {
            c.alpha
        } else {
            1.0
        };
        let mut weighted_r = vec![0.0; dim];
        crate::linalg::axpy(weight, &c.r, &mut weighted_r);
        Self { weighted_r, weight }
    }

    fn mean_r(&self) -> Vec<f64> {
        self.weighted_r.iter().map(|x| x / self.weight).collect()
    }

    fn absorb(&mut self, other: &GroupSum) {
        crate::linalg::axpy(1.0, &other.weighted_r, &mut self.weighted_r);
        self.weight += other.weight;
    }

    /// `||mu_a - mu_b|| <= factor * 2 min(s_a, s_b)` on the group means.
    fn overlaps(&self, other: &GroupSum, factor: f64) -> bool {
        let (ra, rb) = (self.mean_r(), other.mean_r());
        let (na, nb) = (norm(&ra), norm(&rb));
        if !(na > 0.0 && nb > 0.0) {
            return false;
        }
        let spread = |n: f64| (2.0 * (1.0 - n.min(1.0))).sqrt();
        let d = ra
            .iter()
            .zip(&rb)
            .map(|(a, b)| (a / na - b / nb).powi(2))
            .sum::<f64>()
            .sqrt();
        d <= factor * 2.0 * spread(na).min(spread(nb))
    }
}

/// One merge pass: mark close pairs, take their transitive closure and
/// collapse every group into its lowest-id member.
///
/// The merged component's `r` is the count-weighted mean of the member `r`
/// vectors, its weight is the sum of member weights, and its concentration is
/// re-estimated from the merged resultant. Statistics are computed once per
/// pass. Fewer than two components, or all centroids equidistant, is a no-op.
pub fn merge_pass(
    state: &MixtureState,
    config: &MergeConfig,
) -> Result<(MixtureState, MergeReport)> {
    let state = sorted_by_id(state);
    let k = state.k();
    if k < 2 {
        return Ok((state, MergeReport::default()));
    }
    let stats = merge_stats(&state);
    if !(stats.sd > 0.0) || !stats.sd.is_finite() {
        warn!("merge pass skipped: pairwise centroid distances have zero spread");
        return Ok((state, MergeReport::default()));
    }

    let z: Vec<f64> = stats.pairs.iter().map(|p| stats.z_score(p.2)).collect();
    let threshold = match config.rule {
        MergeRule::ZScore(zeta) => zeta,
        MergeRule::Percentile(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "merge percentile {p} outside [0, 1]"
                )));
            }
            quantile(&z, p)
        }
    };

    let mut uf = UnionFind::new(k);
    let mut marked: Vec<(usize, usize, f64)> = stats
        .pairs
        .iter()
        .zip(&z)
        .filter(|(_, &zij)| zij < threshold)
        .map(|(&p, _)| p)
        .collect();
    match config.overlap {
        None => marked.iter().for_each(|&(i, j, _)| uf.union(i, j)),
        Some(factor) => {
            // Closest pairs first; each union is checked against the groups
            // built so far, so a chain of borderline pairs cannot link two
            // well-separated groups.
            marked.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
            let mut sums: Vec<GroupSum> = state
                .components
                .iter()
                .map(|c| GroupSum::new(c, state.dim))
                .collect();
            for (i, j, _) in marked {
                let (ri, rj) = (uf.find(i), uf.find(j));
                if ri == rj || !sums[ri].overlaps(&sums[rj], factor) {
                    continue;
                }
                let absorbed = sums[ri.max(rj)].clone();
                sums[ri.min(rj)].absorb(&absorbed);
                uf.union(ri, rj);
            }
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..k {
        let root = uf.find(i);
        members[root].push(i);
    }

    let dim = state.dim;
    let mut components = Vec::new();
    let mut new_index = vec![0usize; k];
    let mut groups = Vec::new();
    for group in members.iter().filter(|g| !g.is_empty()) {
        for &i in group {
            new_index[i] = components.len();
        }
        if group.len() == 1 {
            components.push(state.components[group[0]].clone());
            continue;
        }
        groups.push(group.iter().map(|&i| state.components[i].id).collect());
        components.push(merge_group(&state.components, group, dim, &config.guards));
    }

    let cluster_of = state
        .assignments
        .as_slice()
        .iter()
        .map(|&c| new_index[c])
        .collect();
    let report = MergeReport {
        absorbed: k - components.len(),
        groups,
        threshold: Some(threshold),
    };
    Ok((
        MixtureState {
            components,
            assignments: super::AssignmentTable::new(cluster_of),
            epoch: state.epoch,
            dim,
        },
        report,
    ))
}

fn merge_group(
    comps: &[VmfComponent],
    group: &[usize],
    dim: usize,
    guards: &Guards,
) -> VmfComponent {
    let count: f64 = group.iter().map(|&i| comps[i].member_count).sum();
    let alpha: f64 = group.iter().map(|&i| comps[i].alpha).sum();
    // Fall back to mixing weights when counts are unknown (e.g. loaded snapshots).
    let use_counts = count > 0.0;
    let total = if use_counts { count } else { alpha };
    let mut r = vec![0.0; dim];
    for &i in group {
        let w = if use_counts {
            comps[i].member_count
        } else {
            comps[i].alpha
        } / total;
        crate::linalg::axpy(w, &comps[i].r, &mut r);
    }
    let base = &comps[group[0]];
    let (mu, r) = match direction(&r, guards.eps_r) {
        Ok(mu) => (mu, r),
        Err(_) => {
            let largest = group
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    comps[a]
                        .member_count
                        .total_cmp(&comps[b].member_count)
                        .then(b.cmp(&a))
                })
                .expect("group is non-empty");
            (comps[largest].mu.clone(), comps[largest].r.clone())
        }
    };
    let kappa = estimate_kappa_with(norm(&r), dim, guards);
    VmfComponent {
        id: base.id,
        mu,
        kappa,
        r,
        alpha,
        member_count: count,
    }
}

/// Reorders components by id and remaps the assignment table to match.
fn sorted_by_id(state: &MixtureState) -> MixtureState {
    if state.components.windows(2).all(|w| w[0].id < w[1].id) {
        return state.clone();
    }
    let mut order: Vec<usize> = (0..state.k()).collect();
    order.sort_by_key(|&i| state.components[i].id);
    let mut position = vec![0; state.k()];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    MixtureState {
        components: order.iter().map(|&i| state.components[i].clone()).collect(),
        assignments: super::AssignmentTable::new(
            state
                .assignments
                .as_slice()
                .iter()
                .map(|&c| position[c])
                .collect(),
        ),
        epoch: state.epoch,
        dim: state.dim,
    }
}
