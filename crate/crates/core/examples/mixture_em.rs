//! Soft EM on embeddings sampled from a three-component vMF mixture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siammm::mixture::{
    init_centroids, log_likelihood, m_step, responsibilities, MStepConfig, Posterior,
};
use siammm::vmf::{sample_vmf, uniform_on_sphere, VmfParams};

fn main() -> siammm::Result<()> {
    let (d, kappa, per) = (8, 50.0, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<VmfParams> = (0..3)
        .map(|_| VmfParams::new(uniform_on_sphere(d, &mut rng), kappa))
        .collect::<Result<_, _>>()?;
    let emb: Vec<_> = truth
        .iter()
        .flat_map(|p| sample_vmf(p, per, &mut rng))
        .collect();

    let mut state = init_centroids(&emb, 3, 10.0, &mut rng)?;
    let cfg = MStepConfig::default();
    for it in 1..=15 {
        let resp = responsibilities(&emb, &state)?;
        state = m_step(&emb, Posterior::Soft(&resp), &state, &cfg)?;
        println!("iter {it:>2}  loglik {:.3}", log_likelihood(&emb, &state)?);
    }

    for c in &state.components {
        let best = truth
            .iter()
            .map(|t| {
                t.mu.iter()
                    .zip(c.mu.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .fold(f64::MIN, f64::max);
        println!(
            "component {}: kappa {:.1}  alpha {:.3}  best cos to a true mean {:.4}",
            c.id, c.kappa, c.alpha, best
        );
    }
    Ok(())
}
