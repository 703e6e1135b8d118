use super::*;
use crate::gradcheck::{central_difference, relative_error};
use crate::losses::{
    cluster_loss_over, instance_loss, total_loss, ClusterLossConfig, LossValueGrad, WeightGrad,
};
use crate::mixture::{nearest_centroids, AssignmentTable, MixtureState, VmfComponent};
use crate::vmf::uniform_on_sphere;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_net(seed: u64) -> SiameseNet {
    tiny_net_with(seed, Activation::Relu)
}

fn tiny_net_with(seed: u64, act: Activation) -> SiameseNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = MlpStack::random(&[6, 8, 8, 8, 4], act, &mut rng).unwrap();
    let mut pred = MlpStack::random(&[4, 8, 4], act, &mut rng).unwrap();
    // Positive biases keep the narrow ReLU layers alive and make the bias
    // gradients non-trivial.
    for l in enc.layers.iter_mut().chain(pred.layers.iter_mut()) {
        l.bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(0.05..0.3));
    }
    SiameseNet::new(enc, pred, 0.9).unwrap()
}

fn scalar_net(w: f64) -> SiameseNet {
    let enc = MlpStack::new(vec![Layer::new(
        vec![w],
        vec![0.0],
        1,
        1,
        Activation::Identity,
    )
    .unwrap()])
    .unwrap();
    SiameseNet::new(enc, MlpStack::identity(1), 0.9).unwrap()
}

fn oracle_stack(stack: &MlpStack, x: &[f64]) -> DVector<f64> {
    let mut cur = DVector::from_column_slice(x);
    for l in stack.layers() {
        let w = DMatrix::from_row_slice(l.out_dim, l.in_dim, &l.weight);
        cur = w * cur + DVector::from_column_slice(&l.bias);
        cur = match l.activation {
            Activation::Identity => cur,
            Activation::Relu => cur.map(|v| v.max(0.0)),
            Activation::Tanh => cur.map(f64::tanh),
        };
    }
    cur
}

#[test]
fn identity_layer_passes_unit_input() {
    let enc = MlpStack::new(vec![Layer::identity(3)]).unwrap();
    let net = SiameseNet::new(enc, MlpStack::identity(3), 0.99).unwrap();
    let x = [0.6, 0.0, 0.8];
    let out = net.forward(&x, &x).unwrap();
    for v in [&out.v1, &out.v2, &out.v1m, &out.v2m] {
        for (a, b) in v.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn forward_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for act in [Activation::Relu, Activation::Tanh] {
        let cfg = NetConfig {
            activation: act,
            ..NetConfig::new(10)
        };
        let net = SiameseNet::random(&cfg, &mut rng).unwrap();
        for _ in 0..20 {
            let x1: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x2: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let out = net.forward(&x1, &x2).unwrap();
            for (v, x, with_pred) in [
                (&out.v1, &x1, true),
                (&out.v2, &x2, true),
                (&out.v1m, &x1, false),
                (&out.v2m, &x2, false),
            ] {
                let mut z = oracle_stack(&net.encoder, x);
                if with_pred {
                    z = oracle_stack(&net.predictor, z.as_slice());
                }
                let z = z.normalize();
                assert!((norm(v) - 1.0).abs() < 1e-9);
                for (a, b) in v.iter().zip(z.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(net.forward(&[1.0; 3], &[1.0; 10]).is_err());
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let net = tiny_net(1);
    let x = [0.3, -0.2, 0.5, 0.1, 0.9, -0.4];
    let out = net.forward(&x, &x).unwrap();
    let g = net.backward(&out.tape, &[0.0; 4], &[0.0; 4]).unwrap();
    assert!(g.flatten().iter().all(|v| *v == 0.0));
}

#[test]
fn stale_tape_is_rejected() {
    let mut net = tiny_net(2);
    let x = [0.3, -0.2, 0.5, 0.1, 0.9, -0.4];
    let out = net.forward(&x, &x).unwrap();
    let g = ParamGrads::zeros(&net);
    Sgd::new(0.0, 0.0).step(&mut net, &g, 0.1).unwrap();
    assert!(matches!(
        net.backward(&out.tape, &[1.0; 4], &[1.0; 4]),
        Err(Error::StaleTape {
            tape_step: 0,
            net_step: 1
        })
    ));
}

fn random_state(d: usize, k: usize, rng: &mut ChaCha8Rng) -> MixtureState {
    MixtureState {
        components: (0..k)
            .map(|i| {
                let mu = uniform_on_sphere(d, rng);
                VmfComponent {
                    id: i as u32,
                    r: mu.to_vec(),
                    mu,
                    kappa: rng.random_range(1.0..20.0),
                    alpha: 1.0 / k as f64,
                    member_count: 1.0,
                }
            })
            .collect(),
        assignments: AssignmentTable::default(),
        epoch: 0,
        dim: d,
    }
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 200 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = if seed % 2 == 0 {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        let net = tiny_net_with(seed, act);
        let state = random_state(4, 6, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (x1, x2) = augment(
            &x,
            &AugmentConfig {
                sigma: 0.3,
                p_drop: 0.2,
            },
            &mut rng,
        );
        let out = net.forward(&x1, &x2).unwrap();
        if out.tape.relu_margin(&net) < 1e-4 {
            continue;
        }
        let cfg = ClusterLossConfig {
            h: 3,
            tau: 0.3,
            // Detached weights are not the derivative of the value, so only
            // the exact mode can be checked end to end.
            weight_grad: WeightGrad::ThroughPi,
            ..Default::default()
        };
        let ids1 = nearest_centroids(&out.v1m, &state, 3).unwrap();
        let ids2 = nearest_centroids(&out.v2m, &state, 3).unwrap();
        let (v1m, v2m) = (out.v1m.clone(), out.v2m.clone());
        let loss_of = |v1: &[f64], v2: &[f64]| {
            let c1 = cluster_loss_over(v1, &ids1, &state, &cfg).unwrap();
            let c2 = cluster_loss_over(v2, &ids2, &state, &cfg).unwrap();
            let inst = instance_loss(v1, v2, &v1m, &v2m).unwrap();
            let cl = LossValueGrad {
                value: c1.value + c2.value,
                grads: vec![c1.grads[0].clone(), c2.grads[0].clone()],
            };
            total_loss(&cl, &inst).unwrap()
        };
        let l = loss_of(&out.v1, &out.v2);
        let grads = net.backward(&out.tape, &l.grads[0], &l.grads[1]).unwrap();
        let theta = net.online_params();
        let f = |p: &[f64]| {
            let mut probe = net.clone();
            probe.set_online_params(p).unwrap();
            let o = probe.forward(&x1, &x2).unwrap();
            loss_of(&o.v1, &o.v2).value
        };
        let fd = central_difference(f, &theta, 1e-6);
        let err = relative_error(&grads.flatten(), &fd);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
        assert_eq!(
            net.momentum_params(),
            tiny_net_with(seed, act).momentum_params()
        );
        checked += 1;
    }
}

#[test]
fn momentum_update_examples() {
    let mut net = scalar_net(1.0);
    net.set_online_params(&[0.0, 0.0]).unwrap();
    net.set_m(1.0).unwrap();
    net.momentum_update();
    assert_eq!(net.momentum_params(), vec![1.0, 0.0]);
    net.set_m(0.9).unwrap();
    net.momentum_update();
    assert_eq!(net.momentum_params()[0], 0.9);
    net.set_m(0.0).unwrap();
    net.momentum_update();
    assert_eq!(net.momentum_params(), net.online_params());
    assert!(net.set_m(1.5).is_err());
}

#[test]
fn ema_gap_contracts_by_m() {
    let mut net = tiny_net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p: Vec<f64> = net
        .online_params()
        .iter()
        .map(|x| x + rng.random_range(-1.0..1.0))
        .collect();
    net.set_online_params(&p).unwrap();
    let enc_len = net.momentum_params().len();
    let gap = |n: &SiameseNet| {
        n.momentum_params()
            .iter()
            .zip(&n.online_params()[..enc_len])
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
    };
    let mut prev = gap(&net);
    for _ in 0..50 {
        net.momentum_update();
        let g = gap(&net);
        assert!((g - 0.9 * prev).abs() < 1e-12);
        prev = g;
    }
}

#[test]
fn sgd_examples() {
    let mut net = scalar_net(1.0);
    let mut g = ParamGrads::zeros(&net);
    g.encoder.weight[0][0] = 1.0;
    let mut sgd = Sgd::new(0.0, 0.0);
    sgd.step(&mut net, &g, 0.0).unwrap();
    assert_eq!(net.online_params()[0], 1.0);
    sgd.step(&mut net, &g, 0.1).unwrap();
    assert!((net.online_params()[0] - 0.9).abs() < 1e-15);

    let mut net = scalar_net(0.0);
    let mut sgd = Sgd::new(0.9, 0.0);
    sgd.step(&mut net, &g, 0.1).unwrap();
    sgd.step(&mut net, &g, 0.1).unwrap();
    assert!((net.online_params()[0] + 0.29).abs() < 1e-15);

    assert!(sgd.step(&mut net, &g, -0.1).is_err());
    g.encoder.weight[0][0] = f64::NAN;
    assert!(matches!(
        sgd.step(&mut net, &g, 0.1),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn training_steps_are_deterministic() {
    let run = || {
        let mut net = tiny_net(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut sgd = Sgd::new(0.9, 1e-4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (x1, x2) = augment(&x, &AugmentConfig::default(), &mut rng);
            let out = net.forward(&x1, &x2).unwrap();
            let l = instance_loss(&out.v1, &out.v2, &out.v1m, &out.v2m).unwrap();
            let g = net.backward(&out.tape, &l.grads[0], &l.grads[1]).unwrap();
            sgd.step(&mut net, &g, 0.05).unwrap();
            net.momentum_update();
        }
        net
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_ne!(a.online_params(), tiny_net(9).online_params());
}

#[test]
fn augment_examples() {
    let x = [1.0, -2.0, 3.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = augment(
        &x,
        &AugmentConfig {
            sigma: 0.0,
            p_drop: 0.0,
        },
        &mut rng,
    );
    assert_eq!((a.as_slice(), b.as_slice()), (&x[..], &x[..]));
    let (a, b) = augment(
        &x,
        &AugmentConfig {
            sigma: 0.5,
            p_drop: 1.0,
        },
        &mut rng,
    );
    assert!(a.iter().chain(&b).all(|v| *v == 0.0));
    let cfg = AugmentConfig::default();
    let first = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(6));
    let second = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(first, second);
    assert_ne!(first.0, first.1);
}

#[test]
fn checkpoint_round_trip() {
    let mut net = tiny_net(7);
    let g = ParamGrads::zeros(&net);
    Sgd::new(0.0, 0.0).step(&mut net, &g, 0.1).unwrap();
    net.momentum_update();
    let mut buf = Vec::new();
    write_checkpoint(&net, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, net);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_checkpoint(bad.as_slice())
        .unwrap_err()
        .to_string()
        .contains("magic"));
    let err = read_checkpoint(&buf[..buf.len() - 3])
        .unwrap_err()
        .to_string();
    assert!(err.contains("step counter"), "{err}");
}

#[test]
fn layer_shapes_must_chain() {
    let a = Layer::identity(3);
    let b = Layer::identity(4);
    assert!(MlpStack::new(vec![a, b]).is_err());
    assert!(Layer::new(vec![1.0; 5], vec![0.0; 2], 3, 2, Activation::Identity).is_err());
    let enc = MlpStack::new(vec![Layer::identity(3)]).unwrap();
    assert!(SiameseNet::new(enc, MlpStack::identity(4), 0.9).is_err());
}
