//! PCA-corrected concentration estimates.
//!
//! Embedding coordinates are correlated, so the nominal dimension overstates
//! the degrees of freedom in the concentration estimate. The mean vectors are
//! projected onto the leading principal axes of `{r_k}` and the estimate is
//! redone with the reduced dimension.

use super::VmfComponent;
use crate::linalg::{dot, norm};
use crate::vmf::{estimate_kappa_with, Guards};
use crate::{Error, Result};

/// Default fraction of aggregate norm the projection must keep.
pub const DEFAULT_RETENTION: f64 = 0.8;

const MAX_POWER_ITERS: usize = 200_000;
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// Orthonormal principal axes, leading first; `basis.len() == d_pca`.
    pub basis: Vec<Vec<f64>>,
    /// Eigenvalues of the second-moment matrix for the retained axes.
    pub eigenvalues: Vec<f64>,
    pub d_pca: usize,
    /// Achieved `sum_k ||P r_k|| / sum_k ||r_k||`.
    pub retention: f64,
}

impl PcaProjection {
    /// Coordinates of `x` in the retained basis.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|b| dot(b, x)).collect()
    }
}

/// Symmetric eigenpairs by power iteration with deflation, stopping at the
/// numerical rank. Returns `(eigenvalue, eigenvector)` in decreasing order.
fn power_eigen(mut a: Vec<f64>, d: usize) -> Vec<(f64, Vec<f64>)> {
    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::new();
    if trace <= 0.0 {
        return pairs;
    }
    for _ in 0..d {
        // Start from the largest column of the deflated matrix.
        let start = (0..d)
            .map(|j| (j, (0..d).map(|i| a[i * d + j].powi(2)).sum::<f64>()))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|(j, _)| j)
            .unwrap_or(0);
        let mut v: Vec<f64> = (0..d).map(|i| a[i * d + start]).collect();
        let n0 = norm(&v);
        if n0 <= RANK_TOL * trace {
            break;
        }
        v.iter_mut().for_each(|x| *x /= n0);
        // Orthogonalise against found vectors to suppress deflation drift.
        for (_, u) in &pairs {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
        }
        let mut lambda = 0.0;
        let mut w = vec![0.0; d];
        for _ in 0..MAX_POWER_ITERS {
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = dot(&a[i * d..(i + 1) * d], &v);
            }
            for (_, u) in &pairs {
                let c = dot(&w, u);
                w.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
            }
            lambda = norm(&w);
            if lambda <= 0.0 {
                break;
            }
            let mut delta = 0.0;
            for (vi, wi) in v.iter_mut().zip(&w) {
                let next = wi / lambda;
                delta += (next - *vi).powi(2);
                *vi = next;
            }
            if delta.sqrt() < 1e-15 {
                break;
            }
        }
        if lambda <= RANK_TOL * trace {
            break;
        }
        // Rayleigh quotient is more accurate than ||Av|| once converged.
        let av: Vec<f64> = (0..d).map(|i| dot(&a[i * d..(i + 1) * d], &v)).collect();
        let lambda = dot(&v, &av);
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        pairs.push((lambda, v));
    }
    pairs
}

/// Fits principal axes to the uncentred second moment `(1/K) sum r r^T` and
/// keeps the fewest axes whose projections retain `retention_target` of the
/// aggregate norm.
pub fn fit_pca<V: AsRef<[f64]>>(rs: &[V], retention_target: f64) -> Result<PcaProjection> {
    if rs.len() < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 vectors, got {}",
            rs.len()
        )));
    }
    if !(retention_target > 0.0 && retention_target <= 1.0) {
        return Err(Error::invalid(format!(
            "retention {retention_target} outside (0, 1]"
        )));
    }
    let d = rs[0].as_ref().len();
    let mut m = vec![0.0; d * d];
    for r in rs {
        let r = r.as_ref();
        if r.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.len(),
            });
        }
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] += r[i] * r[j];
            }
        }
    }
    let k = rs.len() as f64;
    m.iter_mut().for_each(|x| *x /= k);

    let pairs = power_eigen(m, d);
    if pairs.is_empty() {
        return Err(Error::Numeric("all mean vectors are zero".into()));
    }
    let coords: Vec<Vec<f64>> = rs
        .iter()
        .map(|r| pairs.iter().map(|(_, u)| dot(u, r.as_ref())).collect())
        .collect();
    let total: f64 = rs.iter().map(|r| norm(r.as_ref())).sum();
    let retained = |m: usize| -> f64 {
        coords
            .iter()
            .map(|c| c[..m].iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / total
    };
    let rank = pairs.len();
    let d_pca = (1..=rank)
        .find(|&m| retained(m) >= retention_target - 1e-12)
        .unwrap_or(rank);
    let (eigenvalues, basis) = pairs.into_iter().take(d_pca).unzip();
    Ok(PcaProjection {
        basis,
        eigenvalues,
        d_pca,
        retention: retained(d_pca),
    })
}

/// Concentrations re-estimated from `||P r_k||` with `d_pca` in place of `d`.
pub fn kappa_pca(
    components: &[VmfComponent],
    retention_target: f64,
    guards: &Guards,
) -> Result<(Vec<f64>, PcaProjection)> {
    if components.len() < 2 {
        return Err(Error::invalid(
            "PCA concentration needs at least 2 components",
        ));
    }
    let rs: Vec<&[f64]> = components.iter().map(|c| c.r.as_slice()).collect();
    let pca = fit_pca(&rs, retention_target)?;
    let kappas = rs
        .iter()
        .map(|r| estimate_kappa_with(norm(&pca.project(r)), pca.d_pca, guards))
        .collect();
    Ok((kappas, pca))
}
