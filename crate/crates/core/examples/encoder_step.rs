//! One hand-rolled optimisation loop on the Siamese network: forward two
//! augmented views, pull them together, step SGD, update the momentum branch
//! and round-trip a checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siammm::encoder::{
    augment, read_checkpoint, write_checkpoint, AugmentConfig, NetConfig, ParamGrads, Sgd,
    SiameseNet,
};
use siammm::linalg::dot;
use siammm::vmf::uniform_on_sphere;

fn main() -> siammm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = NetConfig {
        hidden: 32,
        embed: 8,
        ..NetConfig::new(12)
    };
    let mut net = SiameseNet::random(&cfg, &mut rng)?;
    println!("online parameters: {}", net.online_param_count());

    let inputs: Vec<Vec<f64>> = (0..64)
        .map(|_| uniform_on_sphere(12, &mut rng).to_vec())
        .collect();
    let aug = AugmentConfig::default();
    let mut sgd = Sgd::new(0.9, 1e-4);

    for step in 0..=40 {
        let mut grads = ParamGrads::zeros(&net);
        let mut agreement = 0.0;
        for x in &inputs {
            let (a, b) = augment(x, &aug, &mut rng);
            let out = net.forward(&a, &b)?;
            // Minimise -v1.v2m - v2.v1m: each view predicts the other's
            // momentum embedding.
            let g1: Vec<f64> = out.v2m.iter().map(|t| -t).collect();
            let g2: Vec<f64> = out.v1m.iter().map(|t| -t).collect();
            grads.add_assign(&net.backward(&out.tape, &g1, &g2)?);
            agreement += 0.5 * (dot(&out.v1, &out.v2m) + dot(&out.v2, &out.v1m));
        }
        grads.scale(1.0 / inputs.len() as f64);
        sgd.step(&mut net, &grads, 0.05)?;
        net.momentum_update();
        if step % 10 == 0 {
            println!(
                "step {step:>2}: mean cross-view cosine {:.4}, grad norm {:.4}",
                agreement / inputs.len() as f64,
                grads.norm()
            );
        }
    }

    let mut buf = Vec::new();
    write_checkpoint(&net, &mut buf)?;
    let back = read_checkpoint(buf.as_slice())?;
    println!(
        "checkpoint: {} bytes, restored identical: {}",
        buf.len(),
        back == net
    );
    Ok(())
}
