//! Starts heavily over-clustered and merges down with repeated passes.

use siammm::data::{generate_synthetic, SyntheticSpec};
use siammm::evaluate::ami;
use siammm::mixture::MergeConfig;
use siammm::trainer::{cluster_embeddings, EmConfig};

fn main() -> siammm::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::new(6, 12, 60.0, 1800, 11))?;
    let emb = data.to_embeddings()?;

    for (label, merge) in [
        ("guarded", MergeConfig::default()),
        (
            "plain z-score",
            MergeConfig {
                overlap: None,
                ..MergeConfig::default()
            },
        ),
    ] {
        let (state, log) = cluster_embeddings(
            &emb,
            &EmConfig {
                k0: 120,
                iterations: 8,
                soft: false,
                merge: Some(merge),
                ..EmConfig::default()
            },
        )?;
        let ks: Vec<String> = log.iter().map(|it| it.k.to_string()).collect();
        let ids: Vec<u32> = state
            .assignments
            .as_slice()
            .iter()
            .map(|&k| state.components[k].id)
            .collect();
        println!(
            "{label:<14} K: 120 -> {}   AMI {:.3}",
            ks.join(" -> "),
            ami(&ids, &data.labels().expect("synthetic data is labelled"))?
        );
    }
    Ok(())
}
