//! Evaluates the clustering and instance losses and checks their gradients
//! against finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siammm::gradcheck::{central_difference, relative_error};
use siammm::losses::{
    cluster_loss, cluster_loss_over, instance_loss, soft_assign_weights, total_loss,
    ClusterLossConfig, PriorWeights, WeightGrad,
};
use siammm::mixture::init_centroids;
use siammm::vmf::uniform_on_sphere;

fn main() -> siammm::Result<()> {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pool: Vec<_> = (0..200).map(|_| uniform_on_sphere(d, &mut rng)).collect();
    let state = init_centroids(&pool, 8, 20.0, &mut rng)?;
    let v = uniform_on_sphere(d, &mut rng);

    let soft = soft_assign_weights(&v, &state, 5, 0.1, PriorWeights::Uniform)?;
    println!("nearest components {:?}", soft.ids);
    let w: Vec<String> = soft.weights.iter().map(|w| format!("{w:.3}")).collect();
    println!("soft weights       [{}]", w.join(", "));

    for weight_grad in [WeightGrad::ThroughPi, WeightGrad::Detached] {
        let cfg = ClusterLossConfig {
            tau: 0.1,
            weight_grad,
            ..ClusterLossConfig::default()
        };
        let loss = cluster_loss(&v, &state, &cfg)?;
        // Keep the neighbour set fixed while probing so the objective is smooth.
        let ids = soft.ids.clone();
        let numeric = central_difference(
            |x| {
                cluster_loss_over(x, &ids, &state, &cfg)
                    .map(|l| l.value)
                    .unwrap_or(f64::NAN)
            },
            &v,
            1e-6,
        );
        // Detached weights give a surrogate gradient, so only ThroughPi
        // should agree with the numerical one.
        println!(
            "{weight_grad:?}: loss {:.4}, rel. error vs finite differences {:.2e}",
            loss.value,
            relative_error(&loss.grads[0], &numeric)
        );
    }

    // The full objective over two views: cluster terms plus the cross-view
    // instance term.
    let v2 = uniform_on_sphere(d, &mut rng);
    let (v1m, v2m) = (
        uniform_on_sphere(d, &mut rng),
        uniform_on_sphere(d, &mut rng),
    );
    let cfg = ClusterLossConfig::default();
    let c1 = cluster_loss(&v, &state, &cfg)?;
    let c2 = cluster_loss(&v2, &state, &cfg)?;
    let cluster = siammm::losses::LossValueGrad {
        value: c1.value + c2.value,
        grads: vec![c1.grads[0].clone(), c2.grads[0].clone()],
    };
    let inst = instance_loss(&v, &v2, &v1m, &v2m)?;
    let inst = siammm::losses::LossValueGrad {
        value: inst.value,
        grads: inst.grads[..2].to_vec(),
    };
    println!("total loss {:.4}", total_loss(&cluster, &inst)?.value);
    Ok(())
}
