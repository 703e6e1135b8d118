//! Concentrations measured in a PCA subspace of the centroid resultants.

use siammm::data::{generate_synthetic, SyntheticSpec};
use siammm::mixture::{kappa_pca, DEFAULT_RETENTION};
use siammm::trainer::{cluster_embeddings, EmConfig};
use siammm::vmf::Guards;

fn main() -> siammm::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::new(8, 32, 40.0, 4000, 5))?;
    let (state, _) = cluster_embeddings(
        &data.to_embeddings()?,
        &EmConfig {
            k0: 8,
            ..EmConfig::default()
        },
    )?;

    for target in [0.5, DEFAULT_RETENTION, 0.95, 1.0] {
        let (kappas, proj) = kappa_pca(&state.components, target, &Guards::default())?;
        let mean = kappas.iter().sum::<f64>() / kappas.len() as f64;
        println!(
            "retention {target:.2}: d_pca {:>2} (achieved {:.3}), mean kappa {mean:.1}",
            proj.d_pca, proj.retention
        );
    }
    let plain = state.components.iter().map(|c| c.kappa).sum::<f64>() / state.k() as f64;
    println!("plain estimate in d = 32: mean kappa {plain:.1}");
    Ok(())
}
