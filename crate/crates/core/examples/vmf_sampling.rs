//! Draws from a von Mises-Fisher distribution and recovers its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siammm::vmf::{
    estimate_kappa, estimate_mean, log_density, log_norm_const, sample_vmf, UnitEmbedding,
    VmfParams,
};

fn main() -> siammm::Result<()> {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mu = UnitEmbedding::normalize(vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 0.0, 3.0])?;

    println!(
        "{:>8} {:>12} {:>12} {:>10}",
        "kappa", "log c_d", "kappa_hat", "cos(mu)"
    );
    for kappa in [1.0, 10.0, 50.0, 200.0, 1000.0] {
        let params = VmfParams::new(mu.clone(), kappa)?;
        let xs = sample_vmf(&params, 5000, &mut rng);
        let est = estimate_mean(&xs, &vec![1.0; xs.len()])?;
        let kappa_hat = estimate_kappa(est.r_norm(), d);
        let cos: f64 = est.mu.iter().zip(mu.iter()).map(|(a, b)| a * b).sum();
        println!(
            "{kappa:>8.1} {:>12.4} {kappa_hat:>12.2} {cos:>10.5}",
            log_norm_const(d, kappa)?
        );
    }

    // The density peaks at the mean direction.
    let params = VmfParams::new(mu.clone(), 20.0)?;
    let away = UnitEmbedding::basis(d, 2)?;
    println!(
        "log p(mu) = {:.3}, log p(e_2) = {:.3}",
        log_density(&mu, &params)?,
        log_density(&away, &params)?
    );
    Ok(())
}
