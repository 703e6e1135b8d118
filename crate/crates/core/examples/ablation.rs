//! Runs a few training variants on the same data and tabulates the outcome.
//!
//! ```text
//! cargo run --release --example ablation -- siammm nce1 fixed
//! ```

use siammm::cli::{variant_overrides, VARIANTS};
use siammm::data::{generate_synthetic, SyntheticSpec};
use siammm::trainer::{fit, TrainConfig};

fn main() -> siammm::Result<()> {
    let mut names: Vec<String> = std::env::args().skip(1).collect();
    if names.is_empty() {
        names = vec!["siammm".into(), "inst_only".into(), "fixed".into()];
    }
    let data = generate_synthetic(&SyntheticSpec::new(4, 12, 60.0, 1200, 3))?;
    let base = TrainConfig {
        k0: 60,
        epochs: 10,
        ..TrainConfig::default()
    };

    println!(
        "available: {}",
        VARIANTS
            .iter()
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("{:<16} {:>4} {:>7} {:>7}", "variant", "K", "AMI", "probe");
    for name in &names {
        let mut cfg = base.clone();
        for kv in variant_overrides(name)? {
            cfg.apply_override(kv)?;
        }
        let out = fit(&data, &cfg)?;
        let m = out.metrics(&data)?.expect("synthetic data is labelled");
        println!(
            "{name:<16} {:>4} {:>7.3} {:>7}",
            m.k_final,
            m.ami,
            m.probe_acc.map_or("-".into(), |p| format!("{p:.3}"))
        );
    }
    Ok(())
}
