//! Clustering and representation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::split_indices;
use crate::linalg::softmax_in_place;
use crate::{Error, Result};

/// Dense contingency table between two labelings.
#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Row-major `rows.len() x cols.len()` counts.
    pub counts: Vec<usize>,
    pub n: usize,
}

/// Renumbers labels to `0..k` in ascending label order.
fn dense_ids(labels: &[u32]) -> (Vec<usize>, usize) {
    let order: BTreeMap<u32, usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<u32>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    (labels.iter().map(|l| order[l]).collect(), order.len())
}

fn check_pair(a: &[u32], b: &[u32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "labelings have different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("labelings are empty"));
    }
    Ok(())
}

impl Contingency {
    pub fn new(a: &[u32], b: &[u32]) -> Result<Self> {
        check_pair(a, b)?;
        let (ia, ka) = dense_ids(a);
        let (ib, kb) = dense_ids(b);
        let mut counts = vec![0usize; ka * kb];
        for (x, y) in ia.iter().zip(&ib) {
            counts[x * kb + y] += 1;
        }
        let mut rows = vec![0; ka];
        let mut cols = vec![0; kb];
        for i in 0..ka {
            for j in 0..kb {
                rows[i] += counts[i * kb + j];
                cols[j] += counts[i * kb + j];
            }
        }
        Ok(Self {
            rows,
            cols,
            counts,
            n: a.len(),
        })
    }

    /// True when the two labelings are the same partition.
    pub fn is_bijective(&self) -> bool {
        self.rows.len() == self.cols.len()
            && self.counts.iter().filter(|&&c| c > 0).count() == self.rows.len()
    }
}

fn entropy(sizes: &[usize], n: usize) -> f64 {
    let n = n as f64;
    -sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

pub fn mutual_information(t: &Contingency) -> f64 {
    let n = t.n as f64;
    let kb = t.cols.len();
    let mut mi = 0.0;
    for (i, &a) in t.rows.iter().enumerate() {
        for (j, &b) in t.cols.iter().enumerate() {
            let c = t.counts[i * kb + j];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (a as f64 * b as f64)).ln();
            }
        }
    }
    mi
}

/// `ln k!` for `k = 0..=n`.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(n + 1);
    t.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        t.push(acc);
    }
    t
}

/// Expected mutual information under random permutations with the margins
/// of `t` fixed (hypergeometric cell counts).
pub fn expected_mutual_information(t: &Contingency) -> f64 {
    let n = t.n;
    let lf = log_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &t.rows {
        for &b in &t.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let base = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n];
            for nij in lo..=hi {
                let x = nij as f64;
                let log_p = base - lf[nij] - lf[a - nij] - lf[b - nij] - lf[n + nij - a - b];
                emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with the arithmetic-mean normaliser.
/// Exactly 1 when the labelings define the same partition.
pub fn ami(a: &[u32], b: &[u32]) -> Result<f64> {
    let t = Contingency::new(a, b)?;
    if t.is_bijective() {
        return Ok(1.0);
    }
    let mi = mutual_information(&t);
    let emi = expected_mutual_information(&t);
    let mean_h = 0.5 * (entropy(&t.rows, t.n) + entropy(&t.cols, t.n));
    let denom = mean_h - emi;
    if denom.abs() < f64::EPSILON {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

/// Maps each cluster to its most frequent true label (ties to the smaller
/// label) and returns the fraction of samples that match.
pub fn majority_label_accuracy(clusters: &[u32], truth: &[u32]) -> Result<f64> {
    if clusters.len() != truth.len() {
        return Err(Error::invalid(format!(
            "labelings have different lengths ({} vs {})",
            clusters.len(),
            truth.len()
        )));
    }
    if clusters.is_empty() {
        return Err(Error::invalid("labelings are empty"));
    }
    let mut per_cluster: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&c, &t) in clusters.iter().zip(truth) {
        *per_cluster.entry(c).or_default().entry(t).or_default() += 1;
    }
    // BTreeMap iterates labels in ascending order, so `>` keeps the smaller on ties.
    let hits: usize = per_cluster
        .values()
        .map(|hist| {
            hist.values()
                .fold(0, |best, &c| if c > best { c } else { best })
        })
        .sum();
    Ok(hits as f64 / clusters.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_frac: f64,
    pub seed: u64,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            seed: 0,
            iterations: 500,
            lr: 1.0,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on frozen features, trained by
/// full-batch gradient descent on a seeded split; returns test accuracy.
pub fn linear_probe<V: AsRef<[f64]>>(
    features: &[V],
    truth: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if features.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} labels",
            features.len(),
            truth.len()
        )));
    }
    let (ids, k) = dense_ids(truth);
    if k < 2 {
        return Err(Error::invalid("linear probe needs at least two classes"));
    }
    let d = features.first().map_or(0, |f| f.as_ref().len());
    if let Some(i) = features.iter().position(|f| f.as_ref().len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: features[i].as_ref().len(),
        });
    }
    let (train, test) = split_indices(features.len(), cfg.train_frac, cfg.seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(
            "probe split leaves an empty train or test set",
        ));
    }
    // Weights: k x (d + 1), last column is the bias.
    let cols = d + 1;
    let mut w = vec![0.0; k * cols];
    let mut grad = vec![0.0; k * cols];
    let mut probs = vec![0.0; k];
    let inv_n = 1.0 / train.len() as f64;
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in &train {
            let x = features[i].as_ref();
            scores(&w, x, cols, &mut probs);
            softmax_in_place(&mut probs);
            probs[ids[i]] -= 1.0;
            for (c, p) in probs.iter().enumerate() {
                let row = &mut grad[c * cols..(c + 1) * cols];
                for (g, xj) in row.iter_mut().zip(x) {
                    *g += p * xj;
                }
                row[d] += p;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= cfg.lr * (gi * inv_n + cfg.l2 * *wi);
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            scores(&w, features[i].as_ref(), cols, &mut probs);
            argmax(&probs) == ids[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn scores(w: &[f64], x: &[f64], cols: usize, out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        let row = &w[c * cols..(c + 1) * cols];
        *o = row[..x.len()]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + row[x.len()];
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Summary written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ami: f64,
    pub majority_acc: f64,
    pub probe_acc: Option<f64>,
    #[serde(rename = "K_final")]
    pub k_final: usize,
    pub epochs: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exact E[MI] by enumerating every relabelling of `b` against `a`:
    /// all permutations of the sample positions are equally likely.
    fn brute_force_emi(a: &[u32], b: &[u32]) -> f64 {
        fn permute(idx: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
            if k == idx.len() {
                out.push(idx.clone());
                return;
            }
            for i in k..idx.len() {
                idx.swap(k, i);
                permute(idx, k + 1, out);
                idx.swap(k, i);
            }
        }
        let mut perms = Vec::new();
        permute(&mut (0..b.len()).collect(), 0, &mut perms);
        let total: f64 = perms
            .iter()
            .map(|p| {
                let pb: Vec<u32> = p.iter().map(|&i| b[i]).collect();
                mutual_information(&Contingency::new(a, &pb).unwrap())
            })
            .sum();
        total / perms.len() as f64
    }

    fn brute_force_ami(a: &[u32], b: &[u32]) -> f64 {
        let t = Contingency::new(a, b).unwrap();
        let emi = brute_force_emi(a, b);
        let h = 0.5 * (entropy(&t.rows, t.n) + entropy(&t.cols, t.n));
        (mutual_information(&t) - emi) / (h - emi)
    }

    #[test]
    fn identical_and_permuted_labels() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert_eq!(ami(&a, &a).unwrap(), 1.0);
        let b = [5, 5, 3, 3, 9, 9, 9];
        assert_eq!(ami(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn four_point_instance_matches_enumeration() {
        let (a, b) = ([0, 0, 1, 1], [0, 1, 0, 1]);
        let expected = brute_force_ami(&a, &b);
        assert!((ami(&a, &b).unwrap() - expected).abs() < 1e-10);
        assert!((expected + 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_built_instances_match_enumeration() {
        let cases: [(&[u32], &[u32]); 5] = [
            (&[0, 0, 1, 1], &[0, 1, 0, 1]),
            (&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]),
            (&[0, 1, 2, 0, 1, 2, 0], &[0, 0, 0, 1, 1, 1, 1]),
            (&[0, 0, 0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 1, 1, 1, 0]),
            (&[0, 1, 1, 2, 2, 2, 3, 3], &[1, 1, 0, 0, 2, 2, 2, 2]),
        ];
        for (a, b) in cases {
            let expected = brute_force_ami(a, b);
            let got = ami(a, b).unwrap();
            assert!(
                (got - expected).abs() < 1e-10,
                "{a:?} {b:?}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn ami_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(5..300);
            let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let ab = ami(&a, &b).unwrap();
            let ba = ami(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab <= 1.0);
        }
        assert!(ami(&[0, 1], &[0]).is_err());
        assert!(ami(&[], &[]).is_err());
    }

    #[test]
    fn majority_examples() {
        assert_eq!(
            majority_label_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(),
            1.0
        );
        let truth: Vec<u32> = (0..20).map(|i| (i / 10) as u32).collect();
        assert_eq!(majority_label_accuracy(&[0; 20], &truth).unwrap(), 0.5);
        assert_eq!(
            majority_label_accuracy(&[0, 0, 0, 1, 1], &[2, 2, 3, 3, 3]).unwrap(),
            0.8
        );
        assert_eq!(
            majority_label_accuracy(&[4, 4, 4, 7, 7], &[2, 2, 3, 3, 3]).unwrap(),
            majority_label_accuracy(&[1, 1, 1, 0, 0], &[2, 2, 3, 3, 3]).unwrap()
        );
        assert!(majority_label_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn probe_on_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..400 {
            let c = (i % 2) as u32;
            let s = if c == 0 { 1.0 } else { -1.0 };
            x.push(vec![
                s + rng.random_range(-0.5..0.5),
                rng.random_range(-1.0..1.0),
            ]);
            y.push(c);
        }
        assert_eq!(linear_probe(&x, &y, &ProbeConfig::default()).unwrap(), 1.0);
        assert!(linear_probe(&x, &vec![3; 400], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn probe_on_shuffled_labels_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut y: Vec<u32> = (0..2000).map(|i| (i % 2) as u32).collect();
        y.shuffle(&mut rng);
        let acc = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert!((0.45..=0.55).contains(&acc), "{acc}");
        assert_eq!(acc, linear_probe(&x, &y, &ProbeConfig::default()).unwrap());
    }

    #[test]
    fn metrics_json_keys() {
        let m = Metrics {
            ami: 0.5,
            majority_acc: 0.75,
            probe_acc: Some(0.9),
            k_final: 10,
            epochs: 3,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(
            s,
            r#"{"ami":0.5,"majority_acc":0.75,"probe_acc":0.9,"K_final":10,"epochs":3}"#
        );
    }
}
