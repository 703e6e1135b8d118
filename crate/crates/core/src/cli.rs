//! Command-line front end: `train`, `cluster`, `eval`, `synth`, `ablate`.
//!
//! Exit codes: 0 success, 1 usage or data error, 2 numeric failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::data::{
    generate_synthetic, load_dataset, save_dataset, DataFormat, Dataset, InputMap, SyntheticSpec,
};
use crate::encoder::load_checkpoint;
use crate::evaluate::{ami, linear_probe, majority_label_accuracy, Metrics, ProbeConfig};
use crate::mixture::{
    e_step_hard, load_snapshot, save_snapshot, MStepConfig, MergeConfig, MergeRule,
};
use crate::trainer::{cluster_embeddings, fit, write_k_curve, EmConfig, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "SIAMMM_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "siammm",
    version,
    about = "vMF mixture clustering for Siamese representation learning"
)]
pub struct Cli {
    /// Worker threads for the parallel phases (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the network and mixture on a dataset.
    Train(TrainArgs),
    /// EM (with optional merging) on fixed embeddings, no network.
    Cluster(ClusterArgs),
    /// Score cluster assignments against dataset labels.
    Eval(EvalArgs),
    /// Write a labelled synthetic vMF mixture.
    Synth(SynthArgs),
    /// Train a list of named variants and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file (`.csv`, otherwise the binary format).
    pub data: PathBuf,
    /// Override the format implied by the extension.
    #[arg(long)]
    pub format: Option<DataFormat>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let format = self
            .format
            .unwrap_or_else(|| DataFormat::from_path(&self.data));
        load_dataset(&self.data, format)
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Key-value config file (`key = value`, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub k0: usize,
    #[arg(long, default_value_t = 10.0)]
    pub kappa0: f64,
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    /// Hard cosine assignments instead of full posteriors.
    #[arg(long)]
    pub hard: bool,
    /// Merge pass after every M-step (`on` or `off`).
    #[arg(long, default_value = "on", value_parser = parse_switch, action = clap::ArgAction::Set)]
    pub merge: bool,
    #[arg(long, default_value_t = -1.2, allow_hyphen_values = true)]
    pub zeta: f64,
    /// Merge guard factor (library default when absent).
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Plain z-score merging without the overlap guard.
    #[arg(long, conflicts_with = "overlap")]
    pub no_guard: bool,
    #[arg(long, default_value_t = 2.0)]
    pub min_count: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/cluster")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labelled dataset.
    #[command(flatten)]
    pub data: DataArgs,
    /// CSV of `index,cluster` rows (as written by `cluster`).
    #[arg(long, conflicts_with = "snapshot")]
    pub assignments: Option<PathBuf>,
    /// Mixture snapshot; samples are assigned to its nearest centroid.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Network checkpoint. Embeds the data for `--snapshot` (momentum branch)
    /// and enables the linear probe (online branch).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub g: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `identity` or `random_linear`.
    #[arg(long, default_value = "identity")]
    pub map: InputMap,
    /// Comma-separated mixing proportions (uniform when absent).
    #[arg(long, value_delimiter = ',')]
    pub proportions: Vec<f64>,
    /// Output file; the extension picks the format unless `--format` is given.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub format: Option<DataFormat>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated variant names; see `VARIANTS`.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "siammm,siammm_no_inst,nce1,nce2,inst_only"
    )]
    pub variants: Vec<String>,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

/// Named ablation variants and the config overrides they apply on top of
/// the base config.
pub const VARIANTS: &[(&str, &[&str])] = &[
    ("siammm", &["loss_mode=siammm"]),
    ("siammm_no_inst", &["loss_mode=siammm_no_inst"]),
    ("nce1", &["loss_mode=nce1"]),
    ("nce2", &["loss_mode=nce2"]),
    ("inst_only", &["loss_mode=inst_only"]),
    ("pca", &["kappa_mode=pca"]),
    ("posterior", &["assign_mode=posterior"]),
    ("detached", &["weight_grad=detached"]),
    ("cluster_size_prior", &["prior=cluster_size"]),
    ("fixed", &["merge=false"]),
    ("reinit", &["centroid_mode=reinit"]),
    ("consistent", &["centroid_mode=consistent"]),
];

pub fn variant_overrides(name: &str) -> Result<&'static [&'static str]> {
    VARIANTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, o)| *o)
        .ok_or_else(|| {
            let names: Vec<&str> = VARIANTS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "unknown variant '{name}'; valid variants: {}",
                names.join(", ")
            ))
        })
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(format!("expected on or off, got '{s}'")),
    }
}

/// Maps an error onto the exit-code contract.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors are reported on stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.quiet);
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                Error::Config(format!("{THREADS_ENV}='{v}' is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        // The global pool can only be built once per process.
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            warn!("thread pool already initialised; ignoring thread count {n}");
        }
    }
    Ok(())
}

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let data = args.data.load()?;
    info!(
        "training on {} ({} samples, dim {}), K0 = {}, {} epochs",
        data.name,
        data.len(),
        data.dim(),
        cfg.k0,
        cfg.epochs
    );
    let outcome = fit(&data, &cfg)?;
    let metrics = outcome.write(&args.out, &data)?;
    print_summary(outcome.mixture.k(), metrics.as_ref(), &args.out);
    Ok(())
}

fn print_summary(k: usize, metrics: Option<&Metrics>, out: &Path) {
    match metrics {
        Some(m) => println!(
            "K = {k}  AMI = {:.4}  majority = {:.4}  probe = {}",
            m.ami,
            m.majority_acc,
            m.probe_acc.map_or("-".to_string(), |p| format!("{p:.4}"))
        ),
        None => println!("K = {k} (dataset has no labels; metrics skipped)"),
    }
    println!("outputs in {}", out.display());
}

pub fn cmd_cluster(args: &ClusterArgs) -> Result<()> {
    let data = args.data.load()?;
    let emb = data.to_embeddings()?;
    let cfg = EmConfig {
        k0: args.k0,
        kappa0: args.kappa0,
        iterations: args.iterations,
        soft: !args.hard,
        merge: args.merge.then(|| MergeConfig {
            rule: MergeRule::ZScore(args.zeta),
            overlap: if args.no_guard {
                None
            } else {
                args.overlap.or(MergeConfig::default().overlap)
            },
            ..MergeConfig::default()
        }),
        m_step: MStepConfig {
            min_count: args.min_count,
            ..MStepConfig::default()
        },
        seed: args.seed,
    };
    let (state, log) = cluster_embeddings(&emb, &cfg)?;
    for it in &log {
        info!(
            "iteration {:>3}  K {:>4}  loglik {:>12.3}  merged {}",
            it.iteration, it.k, it.log_likelihood, it.merges
        );
    }

    fs::create_dir_all(&args.out)?;
    let ids: Vec<u32> = state
        .assignments
        .as_slice()
        .iter()
        .map(|&k| state.components[k].id)
        .collect();
    write_assignments(&ids, args.out.join("assignments.csv"))?;
    save_snapshot(&state, args.out.join("mixture.smm"))?;
    let mut traj = String::new();
    for it in &log {
        traj.push_str(&serde_json::to_string(it)?);
        traj.push('\n');
    }
    fs::write(args.out.join("trajectory.jsonl"), traj)?;
    let curve: Vec<(usize, usize)> = std::iter::once((0, args.k0.min(emb.len())))
        .chain(log.iter().map(|it| (it.iteration, it.k)))
        .collect();
    write_k_curve(&curve, File::create(args.out.join("clusters.csv"))?)?;

    let metrics = match data.labels() {
        Some(truth) => {
            let m = Metrics {
                ami: ami(&ids, &truth)?,
                majority_acc: majority_label_accuracy(&ids, &truth)?,
                probe_acc: None,
                k_final: state.k(),
                epochs: log.len(),
            };
            write_metrics(&m, &args.out)?;
            Some(m)
        }
        None => None,
    };
    print_summary(state.k(), metrics.as_ref(), &args.out);
    Ok(())
}

pub fn write_assignments(ids: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["index", "cluster"]).map_err(csv_err)?;
    for (i, id) in ids.iter().enumerate() {
        w.write_record([i.to_string(), id.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `index,cluster` CSV; rows must be in index order.
pub fn read_assignments(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut ids = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let field = |j: usize| {
            rec.get(j).ok_or_else(|| {
                Error::Parse(format!("{} line {line}: expected 2 fields", path.display()))
            })
        };
        let index: usize = field(0)?.trim().parse().map_err(|_| {
            Error::Parse(format!(
                "{} line {line}: bad index '{}'",
                path.display(),
                &rec[0]
            ))
        })?;
        if index != ids.len() {
            return Err(Error::Parse(format!(
                "{} line {line}: expected index {}, found {index}",
                path.display(),
                ids.len()
            )));
        }
        let id = field(1)?.trim().parse().map_err(|_| {
            Error::Parse(format!(
                "{} line {line}: bad cluster id '{}'",
                path.display(),
                &rec[1]
            ))
        })?;
        ids.push(id);
    }
    Ok(ids)
}

fn write_metrics(m: &Metrics, dir: &Path) -> Result<()> {
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(m)? + "\n",
    )?;
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let data = args.data.load()?;
    let truth = data.labels().ok_or_else(|| {
        Error::invalid(format!(
            "{} has no labels; eval needs ground truth",
            args.data.data.display()
        ))
    })?;
    let net = args.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let ids = match (&args.assignments, &args.snapshot) {
        (Some(path), _) => read_assignments(path)?,
        (None, Some(path)) => {
            let state = load_snapshot(path)?;
            let emb = match &net {
                Some(net) => crate::trainer::embed_momentum(net, &data)?,
                None => data.to_embeddings()?,
            };
            let table = e_step_hard(&emb, &state)?;
            table
                .as_slice()
                .iter()
                .map(|&k| state.components[k].id)
                .collect()
        }
        (None, None) => return Err(Error::invalid("eval needs --assignments or --snapshot")),
    };
    if ids.len() != truth.len() {
        return Err(Error::invalid(format!(
            "assignments have {} entries but the dataset has {} labelled samples",
            ids.len(),
            truth.len()
        )));
    }
    let probe_acc = match &net {
        Some(net) => {
            let feats = crate::trainer::embed_online(net, &data)?;
            Some(linear_probe(
                &feats,
                &truth,
                &ProbeConfig {
                    seed: args.seed,
                    ..Default::default()
                },
            )?)
        }
        None => None,
    };
    let mut distinct = ids.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let m = Metrics {
        ami: ami(&ids, &truth)?,
        majority_acc: majority_label_accuracy(&ids, &truth)?,
        probe_acc,
        k_final: distinct.len(),
        epochs: 0,
    };
    fs::create_dir_all(&args.out)?;
    write_metrics(&m, &args.out)?;
    print_summary(m.k_final, Some(&m), &args.out);
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        proportions: args.proportions.clone(),
        input_map: args.map,
        ..SyntheticSpec::new(args.g, args.dim, args.kappa, args.n, args.seed)
    };
    let ds = generate_synthetic(&spec)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let format = args
        .format
        .unwrap_or_else(|| DataFormat::from_path(&args.out));
    save_dataset(&ds, &args.out, format)?;
    println!(
        "wrote {} samples (g = {}, dim = {}) to {}",
        ds.len(),
        args.g,
        args.dim,
        args.out.display()
    );
    Ok(())
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(rename = "K_final")]
    pub k_final: usize,
    pub ami: Option<f64>,
    pub probe_acc: Option<f64>,
    pub wall_time_s: f64,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.config.resolve()?;
    // Reject bad names before spending time on training.
    let plans: Vec<(&str, TrainConfig)> = args
        .variants
        .iter()
        .map(|name| {
            let mut cfg = base.clone();
            for kv in variant_overrides(name)? {
                cfg.apply_override(kv)?;
            }
            Ok((name.as_str(), cfg))
        })
        .collect::<Result<_>>()?;
    let data = args.data.load()?;
    fs::create_dir_all(&args.out)?;

    let mut rows = Vec::with_capacity(plans.len());
    for (name, cfg) in plans {
        info!("variant {name}");
        let start = Instant::now();
        let outcome = fit(&data, &cfg)?;
        let wall_time_s = start.elapsed().as_secs_f64();
        let metrics = outcome.write(args.out.join(name), &data)?;
        let row = AblationRow {
            variant: name.to_string(),
            k_final: outcome.mixture.k(),
            ami: metrics.as_ref().map(|m| m.ami),
            probe_acc: metrics.as_ref().and_then(|m| m.probe_acc),
            wall_time_s,
        };
        println!(
            "{:<20} K {:>4}  AMI {}  probe {}  {:.1}s",
            row.variant,
            row.k_final,
            row.ami.map_or("-".into(), |a| format!("{a:.4}")),
            row.probe_acc.map_or("-".into(), |p| format!("{p:.4}")),
            row.wall_time_s
        );
        rows.push(row);
    }

    let mut w = csv::Writer::from_path(args.out.join("ablation.csv"))
        .map_err(|e| Error::Parse(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        let cli = Cli::try_parse_from([
            "siammm", "train", "d.csv", "--set", "epochs=0", "--set", "k0=5", "--seed", "3",
        ])
        .unwrap();
        let Command::Train(t) = cli.command else {
            panic!("expected train")
        };
        assert_eq!(t.config.overrides, vec!["epochs=0", "k0=5"]);
        let cfg = t.config.resolve().unwrap();
        assert_eq!((cfg.epochs, cfg.k0, cfg.seed), (0, 5, 3));

        let cli = Cli::try_parse_from([
            "siammm", "cluster", "e.bin", "--merge", "off", "--zeta", "-2",
        ])
        .unwrap();
        let Command::Cluster(c) = cli.command else {
            panic!("expected cluster")
        };
        assert!(!c.merge);
        assert_eq!(c.zeta, -2.0);
        assert_eq!(c.overlap, None);
        assert!(!c.no_guard);

        let cli = Cli::try_parse_from([
            "siammm",
            "synth",
            "--g",
            "3",
            "--dim",
            "8",
            "--n",
            "30",
            "--kappa",
            "50",
            "--out",
            "x.csv",
            "--map",
            "random_linear",
        ])
        .unwrap();
        let Command::Synth(s) = cli.command else {
            panic!("expected synth")
        };
        assert_eq!(s.map, InputMap::RandomLinear);

        let cli =
            Cli::try_parse_from(["siammm", "ablate", "d.csv", "--variants", "nce1,nce2"]).unwrap();
        let Command::Ablate(a) = cli.command else {
            panic!("expected ablate")
        };
        assert_eq!(a.variants, vec!["nce1", "nce2"]);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_from(["siammm", "train"]), EXIT_USAGE);
        assert_eq!(run_from(["siammm", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_from(["siammm", "--help"]), EXIT_OK);
    }

    #[test]
    fn numeric_errors_exit_two() {
        assert_eq!(exit_code(&Error::Numeric("nan".into())), EXIT_NUMERIC);
        assert_eq!(
            exit_code(&Error::DegenerateResultant { norm: 0.0 }),
            EXIT_NUMERIC
        );
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    }

    #[test]
    fn every_variant_applies_cleanly() {
        for (name, overrides) in VARIANTS {
            let mut cfg = TrainConfig::default();
            for kv in *overrides {
                cfg.apply_override(kv)
                    .unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        }
        let err = variant_overrides("nce3").unwrap_err().to_string();
        assert!(err.contains("nce3") && err.contains("nce2"), "{err}");
    }

    #[test]
    fn assignments_round_trip_and_reject_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_assignments(&[4, 0, 4], &p).unwrap();
        assert_eq!(read_assignments(&p).unwrap(), vec![4, 0, 4]);
        fs::write(&p, "index,cluster\n0,1\n2,1\n").unwrap();
        let msg = read_assignments(&p).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }
}
