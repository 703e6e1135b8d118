use super::*;
use crate::data::{generate_synthetic, SyntheticSpec};

fn small_data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::new(3, 8, 50.0, 300, seed)).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        k0: 12,
        hidden: 16,
        embed: 8,
        batch_size: 64,
        epochs: 5,
        lr_base: 0.01,
        probe: false,
        ..TrainConfig::default()
    }
}

/// Reports with the wall-clock field cleared.
fn comparable(reports: &[EpochReport]) -> Vec<EpochReport> {
    reports
        .iter()
        .map(|r| EpochReport {
            wall_time_s: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn zero_epochs_change_nothing() {
    let data = small_data(1);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg()
    };
    let st = TrainState::new(&data, &cfg).unwrap();
    let out = fit(&data, &cfg).unwrap();
    assert_eq!(out.net, st.net);
    assert_eq!(out.mixture.components, st.mixture.components);
    assert!(out.trajectory.is_empty());
    assert_eq!(out.k_curve(), vec![(0, cfg.k0)]);
}

#[test]
fn frozen_run_keeps_k_and_network() {
    let data = small_data(2);
    let cfg = TrainConfig {
        lr_base: 0.0,
        zeta: -1e6,
        k0: 3,
        ..small_cfg()
    };
    let st = TrainState::new(&data, &cfg).unwrap();
    let out = fit(&data, &cfg).unwrap();
    assert!(out.trajectory.iter().all(|r| r.k == 3 && r.merges == 0));
    assert_eq!(out.net.online_params(), st.net.online_params());
    // The EMA of identical copies is exact only up to rounding.
    for (a, b) in out
        .net
        .momentum_params()
        .iter()
        .zip(st.net.momentum_params())
    {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let data = small_data(3);
    let cfg = small_cfg();
    let a = fit(&data, &cfg).unwrap();
    let b = fit(&data, &cfg).unwrap();
    assert_eq!(comparable(&a.trajectory), comparable(&b.trajectory));
    assert_eq!(a.net, b.net);
    assert_eq!(a.assignments, b.assignments);
}

#[test]
fn k_is_non_increasing_and_ids_persist() {
    let data = small_data(4);
    let cfg = small_cfg();
    let mut st = TrainState::new(&data, &cfg).unwrap();
    let mut ids: Vec<u32> = st.mixture.components.iter().map(|c| c.id).collect();
    for _ in 0..cfg.epochs {
        let report = st.run_epoch(&data, &cfg).unwrap();
        let next: Vec<u32> = st.mixture.components.iter().map(|c| c.id).collect();
        assert_eq!(report.k, next.len());
        assert!(next.len() <= ids.len());
        assert!(
            next.iter().all(|id| ids.contains(id)),
            "{next:?} vs {ids:?}"
        );
        ids = next;
    }
}

#[test]
fn h_larger_than_k_is_clamped() {
    let data = small_data(5);
    let cfg = TrainConfig {
        k0: 2,
        h: 5,
        epochs: 1,
        ..small_cfg()
    };
    assert!(fit(&data, &cfg).is_ok());
}

#[test]
fn every_loss_mode_runs() {
    let data = small_data(6);
    for mode in ["siammm", "siammm_no_inst", "nce1", "nce2", "inst_only"] {
        let mut cfg = TrainConfig {
            epochs: 2,
            ..small_cfg()
        };
        cfg.set("loss_mode", mode).unwrap();
        let out = fit(&data, &cfg).unwrap();
        assert_eq!(out.trajectory.len(), 2, "{mode}");
        assert!(out.trajectory.iter().all(|r| r.mean_loss.is_finite()));
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.4, 0, 100), 0.4);
    assert!((cosine_lr(0.4, 50, 100) - 0.2).abs() < 1e-15);
    assert!(cosine_lr(0.4, 100, 100).abs() < 1e-15);
    assert!(cosine_lr(0.4, 150, 100).abs() < 1e-15);
    let cfg = TrainConfig {
        lr_base: 0.05,
        batch_size: 512,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.peak_lr(), 0.1);
}

#[test]
fn config_text_round_trips() {
    let mut cfg = TrainConfig::default();
    cfg.apply_override("loss_mode=nce2").unwrap();
    cfg.apply_override("merge_overlap=off").unwrap();
    cfg.apply_override(" tau = 0.5 ").unwrap();
    cfg.apply_override("grad_clip=none").unwrap();
    let back = TrainConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.loss_mode, LossMode::Nce2);
    assert_eq!(back.merge_overlap, None);
    assert_eq!(back.tau, 0.5);
}

#[test]
fn config_errors_name_the_problem() {
    let err = TrainConfig::default().set("kapa0", "3").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("kapa0") && msg.contains("kappa0"), "{msg}");

    let err = TrainConfig::from_kv_str("# header\nk0 = 10\nloss_mode = triplet\n").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 3") && msg.contains("triplet"), "{msg}");

    assert!(TrainConfig::default().apply_override("k0").is_err());
    assert!(TrainConfig::default().set("merge", "maybe").is_err());
}

#[test]
fn validate_rejects_bad_values() {
    for (k, v) in [
        ("tau", "0"),
        ("m", "1.5"),
        ("lr_base", "-1"),
        ("batch_size", "0"),
        ("pca_retention", "0"),
        ("grad_clip", "0"),
    ] {
        let mut cfg = TrainConfig::default();
        cfg.set(k, v).unwrap();
        assert!(cfg.validate().is_err(), "{k}={v}");
    }
    let data = small_data(7);
    let cfg = TrainConfig {
        k0: 10_000,
        ..small_cfg()
    };
    assert!(matches!(
        TrainState::new(&data, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn outcome_files_are_written() {
    let data = small_data(8);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_cfg()
    };
    let out = fit(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let metrics = out.write(dir.path(), &data).unwrap().unwrap();
    for f in [
        "trajectory.jsonl",
        "clusters.csv",
        "mixture.smm",
        "checkpoint.smmc",
        "config.kv",
        "metrics.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(dir.path().join("clusters.csv")).unwrap();
    assert!(curve.starts_with("epoch,K\n0,12\n"), "{curve}");
    assert_eq!(metrics.epochs, 2);
    let lines = std::fs::read_to_string(dir.path().join("trajectory.jsonl")).unwrap();
    let first: EpochReport = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first.epoch, 1);
    let snap = crate::mixture::load_snapshot(dir.path().join("mixture.smm")).unwrap();
    assert_eq!(snap.k(), out.mixture.k());
}

#[test]
fn standalone_em_ascends_and_recovers() {
    let data = small_data(9);
    let emb = data.to_embeddings().unwrap();
    let (state, log) = cluster_embeddings(
        &emb,
        &EmConfig {
            k0: 3,
            iterations: 15,
            ..EmConfig::default()
        },
    )
    .unwrap();
    for w in log.windows(2) {
        let slack = 1e-4 * w[0].log_likelihood.abs();
        assert!(
            w[1].log_likelihood >= w[0].log_likelihood - slack,
            "{log:?}"
        );
    }
    let truth = data.labels().unwrap();
    let ids: Vec<u32> = state
        .assignments
        .as_slice()
        .iter()
        .map(|&k| k as u32)
        .collect();
    assert!(crate::evaluate::ami(&ids, &truth).unwrap() > 0.95);
}

#[test]
fn standalone_em_merges_down() {
    let data = small_data(10);
    let emb = data.to_embeddings().unwrap();
    let (state, log) = cluster_embeddings(
        &emb,
        &EmConfig {
            k0: 30,
            soft: false,
            merge: Some(MergeConfig::default()),
            ..EmConfig::default()
        },
    )
    .unwrap();
    assert!(log.windows(2).all(|w| w[1].k <= w[0].k));
    assert_eq!(state.k(), 3, "{log:?}");
}

#[test]
fn cluster_sizes_counts() {
    let sizes = cluster_sizes(&[3, 1, 3, 3]);
    assert_eq!(sizes.into_iter().collect::<Vec<_>>(), vec![(1, 1), (3, 3)]);
}
