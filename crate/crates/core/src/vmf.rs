//! The von Mises-Fisher distribution on the unit hypersphere.
//!
//! ```text
//! f(v | mu, kappa) = c_d(kappa) * exp(kappa * mu^T v)
//! c_d(kappa)       = kappa^(d/2-1) / ((2 pi)^(d/2) * I_(d/2-1)(kappa))
//! ```
//!
//! Everything is evaluated in log space; the Bessel function overflows `f64`
//! for concentrations in the hundreds.

use std::f64::consts::PI;
use std::ops::Deref;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::linalg::{dot, norm};
use crate::{Error, Result};

/// Largest concentration any estimator will return.
pub const KAPPA_MAX: f64 = 1e5;
/// Resultant lengths are clamped to `1 - EPS_CLAMP` before estimating kappa.
pub const EPS_CLAMP: f64 = 1e-6;
/// Resultants shorter than this have no usable direction.
pub const EPS_R: f64 = 1e-12;
/// Tolerance on `||v|| = 1` for [`UnitEmbedding::new`].
pub const UNIT_TOL: f64 = 1e-9;

/// Numeric guards for the closed-form estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guards {
    pub eps_clamp: f64,
    pub kappa_max: f64,
    pub eps_r: f64,
}

impl Default for Guards {
    fn default() -> Self {
        Self {
            eps_clamp: EPS_CLAMP,
            kappa_max: KAPPA_MAX,
            eps_r: EPS_R,
        }
    }
}

/// An L2-normalised vector of dimension at least 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    /// Wraps `values`, which must already have unit norm.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_dim(values.len())?;
        let n = norm(&values);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::domain(format!("expected unit norm, got {n}")));
        }
        Ok(Self(values))
    }

    /// Normalises `values` onto the sphere.
    pub fn normalize(mut values: Vec<f64>) -> Result<Self> {
        check_dim(values.len())?;
        let n = norm(&values);
        if !n.is_finite() || n <= EPS_R {
            return Err(Error::DegenerateResultant { norm: n });
        }
        values.iter_mut().for_each(|x| *x /= n);
        Ok(Self(values))
    }

    /// Builds the i-th standard basis vector.
    pub fn basis(dim: usize, i: usize) -> Result<Self> {
        check_dim(dim)?;
        if i >= dim {
            return Err(Error::invalid(format!(
                "basis index {i} out of range for d={dim}"
            )));
        }
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for UnitEmbedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for UnitEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::domain(format!(
            "dimension must be at least 2, got {d}"
        )));
    }
    Ok(())
}

/// Mean direction and concentration of a single vMF distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub mu: UnitEmbedding,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitEmbedding, kappa: f64) -> Result<Self> {
        if !kappa.is_finite() || !(0.0..=KAPPA_MAX).contains(&kappa) {
            return Err(Error::domain(format!(
                "kappa must lie in [0, {KAPPA_MAX}], got {kappa}"
            )));
        }
        Ok(Self { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// `log I_nu(x)` for `nu >= 0`, `x >= 0`.
///
/// Power series for `x <= 20 max(1, nu)`. Above that, the large-argument
/// expansion when `nu^2 < x` (its terms shrink from the start and it can be
/// carried to full precision), Debye's uniform expansion otherwise.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x >= 0.0);
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x <= 20.0 * nu.max(1.0) {
        log_bessel_i_series(nu, x)
    } else if nu * nu < x {
        log_bessel_i_large_x(nu, x)
    } else {
        log_bessel_i_debye(nu, x)
    }
}

/// `I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k`, summed until
/// the terms stop shrinking or drop below machine precision.
fn log_bessel_i_large_x(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (8.0 * k as f64 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

/// `log sum_j (x/2)^(2j+nu) / (j! Gamma(nu+j+1))`, accumulated as a running
/// log-sum-exp.
fn log_bessel_i_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let log_q = q.ln();
    let mut log_term = nu * (0.5 * x).ln() - ln_gamma(nu + 1.0);
    let mut max = log_term;
    let mut acc = 1.0;
    let mut j = 0.0_f64;
    loop {
        j += 1.0;
        log_term += log_q - j.ln() - (nu + j).ln();
        if log_term > max {
            acc = acc * (max - log_term).exp() + 1.0;
            max = log_term;
        } else {
            acc += (log_term - max).exp();
        }
        // Terms decrease once j(nu+j) > q.
        if j * (nu + j) > q && log_term < max + acc.ln() - 40.0 {
            break;
        }
    }
    max + acc.ln()
}

/// Numerators of the Debye polynomials `u_k(t)`; entry `i` multiplies `t^(k+2i)`.
const DEBYE_NUM: [&[f64]; 5] = [
    &[3.0, -5.0],
    &[81.0, -462.0, 385.0],
    &[30375.0, -369603.0, 765765.0, -425425.0],
    &[
        4465125.0,
        -94121676.0,
        349922430.0,
        -446185740.0,
        185910725.0,
    ],
    &[
        1519035525.0,
        -49286948607.0,
        284499769554.0,
        -614135872350.0,
        566098157625.0,
        -188699385875.0,
    ],
];
const DEBYE_DEN: [f64; 5] = [24.0, 1152.0, 414720.0, 39813120.0, 6688604160.0];

fn log_bessel_i_debye(nu: f64, x: f64) -> f64 {
    // With s = sqrt(nu^2 + x^2) and t = nu / s, each u_k(t) / nu^k is a sum of
    // nu^(j-k) / s^j for j >= k, which stays finite as nu -> 0.
    let s = nu.hypot(x);
    let inv_s = 1.0 / s;
    let mut series = 1.0;
    for (k, (num, den)) in DEBYE_NUM.iter().zip(DEBYE_DEN).enumerate() {
        let k = k as i32 + 1;
        let mut term = 0.0;
        for (i, c) in num.iter().enumerate() {
            let j = k + 2 * i as i32;
            term += c * nu.powi(j - k) * inv_s.powi(j);
        }
        series += term / den;
    }
    s + nu * (x / (nu + s)).ln() - 0.5 * (2.0 * PI * s).ln() + series.ln()
}

/// `log c_d(kappa)`, the log normaliser of the vMF density.
pub fn log_norm_const(d: usize, kappa: f64) -> Result<f64> {
    check_dim(d)?;
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(Error::domain(format!(
            "kappa must be finite and non-negative, got {kappa}"
        )));
    }
    let half_d = d as f64 / 2.0;
    if kappa == 0.0 {
        return Ok(log_uniform_density(d));
    }
    let nu = half_d - 1.0;
    Ok(nu * kappa.ln() - half_d * (2.0 * PI).ln() - log_bessel_i(nu, kappa))
}

/// `-log |S^(d-1)|`, the density of the uniform distribution on the sphere.
pub fn log_uniform_density(d: usize) -> f64 {
    let half_d = d as f64 / 2.0;
    -(2f64.ln() + half_d * PI.ln() - ln_gamma(half_d))
}

/// `log c_d(kappa) + kappa * mu^T v`.
pub fn log_density(v: &[f64], params: &VmfParams) -> Result<f64> {
    if v.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: v.len(),
        });
    }
    Ok(log_norm_const(params.dim(), params.kappa)? + params.kappa * dot(&params.mu, v))
}

/// Weighted resultant `r` and the mean direction `r / ||r||`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEstimate {
    pub r: Vec<f64>,
    pub mu: UnitEmbedding,
}

impl MeanEstimate {
    pub fn r_norm(&self) -> f64 {
        norm(&self.r)
    }
}

/// `r = sum w_i v_i / sum w_i` and `mu = r / ||r||`.
pub fn estimate_mean<V: AsRef<[f64]>>(points: &[V], weights: &[f64]) -> Result<MeanEstimate> {
    if points.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    let dim = points
        .first()
        .map(|p| p.as_ref().len())
        .ok_or_else(|| Error::invalid("no points"))?;
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("at least one weight must be positive"));
    }
    let mut r = vec![0.0; dim];
    for (p, w) in points.iter().zip(weights) {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: p.len(),
            });
        }
        for (ri, pi) in r.iter_mut().zip(p) {
            *ri += w * pi;
        }
    }
    r.iter_mut().for_each(|x| *x /= total);
    let mu = direction(&r, EPS_R)?;
    Ok(MeanEstimate { r, mu })
}

/// `r / ||r||`, or a degenerate-resultant error when `||r|| < eps_r`.
pub fn direction(r: &[f64], eps_r: f64) -> Result<UnitEmbedding> {
    let n = norm(r);
    if !n.is_finite() || n < eps_r {
        return Err(Error::DegenerateResultant { norm: n });
    }
    UnitEmbedding::normalize(r.to_vec())
}

/// Closed-form concentration estimate `(r d - r^3) / (1 - r^2)` with default guards.
pub fn estimate_kappa(r_norm: f64, d: usize) -> f64 {
    estimate_kappa_with(r_norm, d, &Guards::default())
}

pub fn estimate_kappa_with(r_norm: f64, d: usize, guards: &Guards) -> f64 {
    let r = r_norm.max(0.0).min(1.0 - guards.eps_clamp);
    let d = d as f64;
    let kappa = (r * d - r * r * r) / (1.0 - r * r);
    kappa.clamp(0.0, guards.kappa_max)
}

/// Draws `n` samples from `vMF(mu, kappa)` using Wood's rejection sampler.
pub fn sample_vmf<R: Rng + ?Sized>(
    params: &VmfParams,
    n: usize,
    rng: &mut R,
) -> Vec<UnitEmbedding> {
    let d = params.dim();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if params.kappa == 0.0 {
        for _ in 0..n {
            out.push(uniform_on_sphere(d, rng));
        }
        return out;
    }

    let kappa = params.kappa;
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("beta parameters are positive");

    // Householder reflection taking e_1 onto mu.
    let mut u: Vec<f64> = params.mu.iter().map(|m| -m).collect();
    u[0] += 1.0;
    let uu = dot(&u, &u);

    for _ in 0..n {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let log_u = rng.random::<f64>().ln();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= log_u {
                break w;
            }
        };
        let tangent = uniform_on_sphere_raw(d - 1, rng);
        let scale = (1.0 - w * w).max(0.0).sqrt();
        let mut x = Vec::with_capacity(d);
        x.push(w);
        x.extend(tangent.iter().map(|t| scale * t));
        if uu > 1e-24 {
            let proj = 2.0 * dot(&u, &x) / uu;
            for (xi, ui) in x.iter_mut().zip(&u) {
                *xi -= proj * ui;
            }
        }
        out.push(UnitEmbedding::normalize(x).expect("reflected sample has unit length"));
    }
    out
}

/// A uniform draw from the unit sphere in `R^d`.
pub fn uniform_on_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> UnitEmbedding {
    UnitEmbedding(uniform_on_sphere_raw(d, rng))
}

fn uniform_on_sphere_raw<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}
