//! Trains on a synthetic vMF mixture and prints the cluster-count curve and
//! final metrics. Extra arguments are `key=value` config overrides.
//!
//! ```text
//! cargo run --release --example train_synthetic -- epochs=10 merge_overlap=off
//! ```

use siammm::data::{generate_synthetic, InputMap, SyntheticSpec};
use siammm::trainer::{fit, TrainConfig};

fn main() -> siammm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut spec = SyntheticSpec::new(10, 16, 80.0, 5000, 1);
    spec.input_map = InputMap::RandomLinear;
    let data = generate_synthetic(&spec)?;

    let mut cfg = TrainConfig::default();
    for kv in std::env::args().skip(1) {
        cfg.apply_override(&kv)?;
    }
    let out = fit(&data, &cfg)?;
    let curve: Vec<String> = out.k_curve().iter().map(|(_, k)| k.to_string()).collect();
    println!("K curve: {}", curve.join(" "));
    if let Some(m) = out.metrics(&data)? {
        println!("{}", serde_json::to_string(&m)?);
    }
    Ok(())
}
