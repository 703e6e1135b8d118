//! Drives the `siammm` binary as a subprocess and checks exit codes and files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use siammm::data::{load_dataset, DataFormat};

fn siammm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siammm"))
        .arg("-q")
        .args(args)
        .env("SIAMMM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a labelled synthetic CSV and returns its path.
fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec![
        "synth", "--g", "3", "--dim", "8", "--n", "300", "--kappa", "50", "--seed", "7", "--out",
    ];
    args.push(path_str(&path));
    args.extend_from_slice(extra);
    let out = siammm(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn last_k(clusters_csv: &Path) -> usize {
    let text = std::fs::read_to_string(clusters_csv).unwrap();
    let last = text.lines().last().unwrap();
    last.split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn synth_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.csv", &[]);
    let b = synth(dir.path(), "b.csv", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let ds = load_dataset(&a, DataFormat::Csv).unwrap();
    assert_eq!((ds.len(), ds.dim()), (300, 8));
    assert_histogram(&ds.labels().unwrap(), &[1.0 / 3.0; 3]);

    let bin = synth(dir.path(), "c.smmd", &["--proportions", "0.5,0.25,0.25"]);
    let ds = load_dataset(&bin, DataFormat::Binary).unwrap();
    assert_histogram(&ds.labels().unwrap(), &[0.5, 0.25, 0.25]);
}

/// Labels are drawn independently, so counts sit within a few binomial
/// standard deviations of `n p`.
fn assert_histogram(labels: &[u32], proportions: &[f64]) {
    let n = labels.len() as f64;
    for (g, p) in proportions.iter().enumerate() {
        let count = labels.iter().filter(|&&l| l == g as u32).count() as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!(
            (count - n * p).abs() < 4.0 * sd,
            "class {g}: {count} of {n}"
        );
    }
}

#[test]
fn synth_with_no_samples_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    let out = siammm(&[
        "synth",
        "--g",
        "2",
        "--dim",
        "4",
        "--n",
        "0",
        "--kappa",
        "5",
        "--out",
        path_str(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = load_dataset(&path, DataFormat::Csv).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.dim(), 4);
}

#[test]
fn train_with_zero_epochs_keeps_k0() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let out_dir = dir.path().join("run");
    let out = siammm(&[
        "train",
        path_str(&data),
        "--set",
        "epochs=0",
        "--set",
        "k0=25",
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(last_k(&out_dir.join("clusters.csv")), 25);
    assert!(out_dir.join("metrics.json").exists());
    assert!(out_dir.join("checkpoint.smmc").exists());
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let out = siammm(&["train", "/nonexistent/data.csv"]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("/nonexistent/data.csv"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn cluster_single_component_and_merge_off() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);

    let one = dir.path().join("one");
    let out = siammm(&[
        "cluster",
        path_str(&data),
        "--k0",
        "1",
        "--iterations",
        "1",
        "--out",
        path_str(&one),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(last_k(&one.join("clusters.csv")), 1);

    let off = dir.path().join("off");
    let out = siammm(&[
        "cluster",
        path_str(&data),
        "--k0",
        "12",
        "--merge",
        "off",
        "--out",
        path_str(&off),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // 100 points per class leaves no component below the drop threshold.
    assert_eq!(last_k(&off.join("clusters.csv")), 12);
}

#[test]
fn eval_scores_assignments_and_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let labels = load_dataset(&data, DataFormat::Csv)
        .unwrap()
        .labels()
        .unwrap();

    let perfect = dir.path().join("perfect.csv");
    let mut text = String::from("index,cluster\n");
    for (i, l) in labels.iter().enumerate() {
        text.push_str(&format!("{i},{}\n", l + 40));
    }
    std::fs::write(&perfect, &text).unwrap();
    let out_dir = dir.path().join("eval");
    let out = siammm(&[
        "eval",
        path_str(&data),
        "--assignments",
        path_str(&perfect),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["ami"].as_f64(), Some(1.0));

    let short = dir.path().join("short.csv");
    let truncated: String = text.lines().take(11).map(|l| format!("{l}\n")).collect();
    std::fs::write(&short, truncated).unwrap();
    let out = siammm(&["eval", path_str(&data), "--assignments", path_str(&short)]);
    assert_eq!(code(&out), 1);
    let msg = stderr(&out);
    assert!(msg.contains("10") && msg.contains("300"), "{msg}");

    let unlabelled = dir.path().join("unlabelled.csv");
    std::fs::write(&unlabelled, "x0,x1\n1,0\n0,1\n").unwrap();
    let two = dir.path().join("two.csv");
    std::fs::write(&two, "index,cluster\n0,0\n1,1\n").unwrap();
    let out = siammm(&[
        "eval",
        path_str(&unlabelled),
        "--assignments",
        path_str(&two),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("label"), "{}", stderr(&out));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let out_dir = dir.path().join("ablate");
    let out = siammm(&[
        "ablate",
        path_str(&data),
        "--set",
        "epochs=2",
        "--set",
        "k0=20",
        "--set",
        "hidden=16",
        "--variants",
        "siammm,nce1,nce2",
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[1].starts_with("nce1,"));

    let out = siammm(&["ablate", path_str(&data), "--variants", "siammm,triplet"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("triplet"), "{}", stderr(&out));
}
