//! Small dense vector helpers on `f64` slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(a: &mut [f64], s: f64) {
    for x in a {
        *x *= s;
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax in place; returns the log-normalizer.
pub fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// Projects `g` onto the tangent space of the unit sphere at `v`.
pub fn project_tangent(v: &[f64], g: &[f64]) -> Vec<f64> {
    let c = dot(v, g);
    g.iter().zip(v).map(|(gi, vi)| gi - c * vi).collect()
}

/// Dense row-major matrix-vector product: `out = W x + b`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, (row, bi)) in out.iter_mut().zip(w.chunks_exact(cols).zip(b)) {
        *o = dot(row, x) + bi;
    }
}


/// `count` orthonormal vectors in `R^dim` by modified Gram-Schmidt on
/// standard normal draws (redrawn when nearly dependent).
pub fn random_orthonormal<R: rand::Rng + ?Sized>(
    count: usize,
    dim: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    assert!(
        count <= dim,
        "cannot fit {count} orthonormal vectors in R^{dim}"
    );
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut c: Vec<f64> = (0..dim)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        for q in &out {
            let p = dot(q, &c);
            axpy(-p, q, &mut c);
        }
        let n = norm(&c);
        if n > 1e-8 {
            c.iter_mut().for_each(|x| *x /= n);
            out.push(c);
        }
    }
    out
}
