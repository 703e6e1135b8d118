//! AMI, majority-label accuracy and a linear probe on a few hand-made
//! labelings.

use siammm::data::{generate_synthetic, SyntheticSpec};
use siammm::evaluate::{ami, linear_probe, majority_label_accuracy, ProbeConfig};

fn main() -> siammm::Result<()> {
    let truth: Vec<u32> = (0..300).map(|i| i / 100).collect();
    let relabelled: Vec<u32> = truth.iter().map(|&t| 7 - t).collect();
    let split: Vec<u32> = (0..300).map(|i| i / 50).collect();
    let merged: Vec<u32> = truth.iter().map(|&t| t.min(1)).collect();
    let noise: Vec<u32> = (0..300u32).map(|i| (i * 7919 + 13) % 3).collect();

    println!("{:<12} {:>7} {:>9}", "labeling", "AMI", "majority");
    for (name, pred) in [
        ("relabelled", &relabelled),
        ("split x2", &split),
        ("merged 2/3", &merged),
        ("scrambled", &noise),
    ] {
        println!(
            "{name:<12} {:>7.3} {:>9.3}",
            ami(pred, &truth)?,
            majority_label_accuracy(pred, &truth)?
        );
    }

    let data = generate_synthetic(&SyntheticSpec::new(5, 10, 30.0, 1000, 2))?;
    let feats = data.to_embeddings()?;
    let acc = linear_probe(&feats, &data.labels().unwrap(), &ProbeConfig::default())?;
    println!("linear probe on raw synthetic features: {acc:.3}");
    Ok(())
}
