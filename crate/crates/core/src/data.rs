//! Datasets: synthetic vMF mixtures, CSV and binary files, seeded splits.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! b"SMMD" | u32 n | u32 d | u8 has_labels | n*d x f32 features | n x u32 labels (if present)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::encoder::RawSample;
use crate::linalg::{dot, random_orthonormal};
use crate::vmf::{sample_vmf, uniform_on_sphere, UnitEmbedding, VmfParams};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SMMD";
/// Largest cosine allowed between two synthetic component means.
pub const MAX_MEAN_COSINE: f64 = 0.5;
/// Redraws per mean before giving up on separation.
pub const SEPARATION_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    dim: usize,
    samples: Vec<RawSample>,
}

impl Dataset {
    /// Labels must be present on every sample or on none.
    pub fn new(name: impl Into<String>, dim: usize, samples: Vec<RawSample>) -> Result<Self> {
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.features.len() != dim)
        {
            return Err(Error::invalid(format!(
                "sample {i} has {} features, dataset dimension is {dim}",
                s.features.len()
            )));
        }
        let labelled = samples.iter().filter(|s| s.label.is_some()).count();
        if labelled != 0 && labelled != samples.len() {
            return Err(Error::invalid(format!(
                "{labelled} of {} samples carry labels",
                samples.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            dim,
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[RawSample] {
        &self.samples
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.samples[i].features
    }

    pub fn has_labels(&self) -> bool {
        self.samples.first().is_some_and(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<u32>> {
        if self.samples.is_empty() || !self.has_labels() {
            return None;
        }
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Treats every row as an embedding and normalises it.
    pub fn to_embeddings(&self) -> Result<Vec<UnitEmbedding>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                UnitEmbedding::normalize(s.features.clone())
                    .map_err(|e| Error::invalid(format!("sample {i}: {e}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMap {
    #[default]
    Identity,
    /// A fixed seeded map `Q diag(s)` with `Q` orthogonal and `s` in `[0.5, 2]`.
    RandomLinear,
}

impl std::str::FromStr for InputMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "random_linear" => Ok(Self::RandomLinear),
            _ => Err(Error::Config(format!(
                "unknown input map '{s}' (expected identity or random_linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of true clusters.
    pub g: usize,
    pub dim: usize,
    pub kappa_true: f64,
    /// Mixing proportions; empty means uniform.
    pub proportions: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub input_map: InputMap,
}

impl SyntheticSpec {
    pub fn new(g: usize, dim: usize, kappa_true: f64, n: usize, seed: u64) -> Self {
        Self {
            g,
            dim,
            kappa_true,
            proportions: Vec::new(),
            n,
            seed,
            input_map: InputMap::Identity,
        }
    }

    fn validate(&self) -> Result<Vec<f64>> {
        if self.g == 0 {
            return Err(Error::invalid("synthetic spec needs g >= 1"));
        }
        if self.dim < 2 {
            return Err(Error::invalid(format!(
                "synthetic dimension must be >= 2, got {}",
                self.dim
            )));
        }
        if !(self.kappa_true >= 0.0) || !self.kappa_true.is_finite() {
            return Err(Error::invalid(format!(
                "kappa must be finite and >= 0, got {}",
                self.kappa_true
            )));
        }
        if self.proportions.is_empty() {
            return Ok(vec![1.0 / self.g as f64; self.g]);
        }
        if self.proportions.len() != self.g {
            return Err(Error::invalid(format!(
                "{} proportions for {} clusters",
                self.proportions.len(),
                self.g
            )));
        }
        let total: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "proportions must be non-negative and sum to 1",
            ));
        }
        Ok(self.proportions.clone())
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub means: Vec<UnitEmbedding>,
    /// Unit-norm points before the input map.
    pub latent: Vec<UnitEmbedding>,
    /// Row-major `dim x dim` input map, if any.
    pub map: Option<Vec<f64>>,
}

fn separated_means<R: Rng>(g: usize, dim: usize, rng: &mut R) -> Result<Vec<UnitEmbedding>> {
    let mut means: Vec<UnitEmbedding> = Vec::with_capacity(g);
    for k in 0..g {
        let mut found = None;
        for _ in 0..SEPARATION_ATTEMPTS {
            let cand = uniform_on_sphere(dim, rng);
            if means.iter().all(|m| dot(m, &cand) <= MAX_MEAN_COSINE) {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(m) => means.push(m),
            None => {
                return Err(Error::invalid(format!(
                    "could not place mean {k} of {g} in dimension {dim} with cosine <= {MAX_MEAN_COSINE} \
                     after {SEPARATION_ATTEMPTS} attempts"
                )))
            }
        }
    }
    Ok(means)
}

/// Orthogonal matrix (modified Gram-Schmidt on a Gaussian matrix) times a
/// diagonal scaling, row-major.
fn random_linear_map<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let cols = random_orthonormal(dim, dim, rng);
    let scales: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut a = vec![0.0; dim * dim];
    for (j, (c, s)) in cols.iter().zip(&scales).enumerate() {
        for i in 0..dim {
            a[i * dim + j] = c[i] * s;
        }
    }
    a
}

/// Samples a labelled vMF mixture. Same spec, same bits.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_synthetic_full(spec)?.dataset)
}

pub fn generate_synthetic_full(spec: &SyntheticSpec) -> Result<Synthetic> {
    let props = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = separated_means(spec.g, spec.dim, &mut rng)?;
    let map = match spec.input_map {
        InputMap::Identity => None,
        InputMap::RandomLinear => Some(random_linear_map(spec.dim, &mut rng)),
    };
    let params: Vec<VmfParams> = means
        .iter()
        .map(|m| VmfParams::new(m.clone(), spec.kappa_true))
        .collect::<Result<_>>()?;
    let picker =
        WeightedIndex::new(&props).map_err(|e| Error::invalid(format!("proportions: {e}")))?;
    let mut samples = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let k = picker.sample(&mut rng);
        let v = sample_vmf(&params[k], 1, &mut rng)
            .pop()
            .expect("one sample");
        let features = match &map {
            None => v.to_vec(),
            Some(a) => a.chunks_exact(spec.dim).map(|row| dot(row, &v)).collect(),
        };
        samples.push(RawSample {
            features,
            label: Some(k as u32),
        });
        latent.push(v);
    }
    let name = format!(
        "synthetic-g{}-d{}-k{}-n{}-s{}",
        spec.g, spec.dim, spec.kappa_true, spec.n, spec.seed
    );
    Ok(Synthetic {
        dataset: Dataset::new(name, spec.dim, samples)?,
        means,
        latent,
        map,
    })
}

/// Seeded shuffle split into `(train, test)` index sets.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::invalid(format!(
            "train fraction must lie in [0, 1], got {train_frac}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n as f64 * train_frac).round() as usize;
    let test = idx.split_off(cut);
    Ok((idx, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Csv,
    Binary,
}

impl DataFormat {
    /// `.csv` files are CSV, everything else is the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Binary,
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "bin" | "binary" | "smm_binary" => Ok(Self::Binary),
            _ => Err(Error::Config(format!(
                "unknown data format '{s}' (expected csv or binary)"
            ))),
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let name = stem(path);
    match format {
        DataFormat::Csv => read_csv(BufReader::new(file), name),
        DataFormat::Binary => read_binary(BufReader::new(file), name),
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>, format: DataFormat) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    match format {
        DataFormat::Csv => write_csv(ds, w),
        DataFormat::Binary => write_binary(ds, w),
    }
}

/// Header `x0,...,x{d-1}[,label]`; values use the shortest round-trip form.
pub fn write_csv<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..ds.dim).map(|j| format!("x{j}")).collect();
    if ds.has_labels() {
        header.push("label".into());
    }
    out.write_record(&header).map_err(csv_err)?;
    for s in &ds.samples {
        let mut row: Vec<String> = s.features.iter().map(|x| x.to_string()).collect();
        if let Some(l) = s.label {
            row.push(l.to_string());
        }
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(format!("csv: {e}"))
}

/// First row is a header; a final column named `label` holds class ids.
pub fn read_csv<R: Read>(r: R, name: impl Into<String>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(csv_err)?,
        None => return Err(Error::parse("line 1: missing header")),
    };
    if header.is_empty() || header.iter().any(|h| h.trim().is_empty()) {
        return Err(Error::parse("line 1: malformed header (empty column name)"));
    }
    let has_labels = header.iter().last().is_some_and(|h| h.trim() == "label");
    if header
        .iter()
        .rev()
        .skip(usize::from(has_labels))
        .any(|h| h.trim() == "label")
    {
        return Err(Error::parse(
            "line 1: malformed header ('label' must be the last column)",
        ));
    }
    let width = header.len();
    let dim = width - usize::from(has_labels);
    let mut samples = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::parse(format!(
                "line {line}: expected {width} fields, found {}",
                rec.len()
            )));
        }
        let mut features = Vec::with_capacity(dim);
        for (col, field) in rec.iter().take(dim).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(format!(
                    "line {line}, column {}: invalid number '{field}'",
                    col + 1
                ))
            })?;
            features.push(v);
        }
        let label = if has_labels {
            let field = &rec[dim];
            Some(field.trim().parse::<u32>().map_err(|_| {
                Error::parse(format!(
                    "line {line}, column {width}: invalid label '{field}'"
                ))
            })?)
        } else {
            None
        };
        samples.push(RawSample { features, label });
    }
    Dataset::new(name, dim, samples)
}

pub fn write_binary<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let labels = ds.has_labels();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.dim as u32).to_le_bytes())?;
    w.write_all(&[labels as u8])?;
    for s in &ds.samples {
        for x in &s.features {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    if labels {
        for s in &ds.samples {
            w.write_all(&s.label.unwrap_or(0).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R, name: impl Into<String>) -> Result<Dataset> {
    let mut offset = 0usize;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|e| {
            Error::parse(format!(
                "dataset truncated reading {what} at byte {offset}: {e}"
            ))
        })?;
        offset += buf.len();
        Ok(())
    };
    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::parse(format!(
            "bad dataset magic {magic:?} at byte 0"
        )));
    }
    let mut b4 = [0u8; 4];
    take(&mut b4, "sample count")?;
    let n = u32::from_le_bytes(b4) as usize;
    take(&mut b4, "dimension")?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut flag = [0u8; 1];
    take(&mut flag, "label flag")?;
    let has_labels = match flag[0] {
        0 => false,
        1 => true,
        f => return Err(Error::parse(format!("bad label flag {f} at byte 12"))),
    };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            take(&mut b4, "features")?;
            features.push(f32::from_le_bytes(b4) as f64);
        }
        samples.push(RawSample {
            features,
            label: None,
        });
    }
    if has_labels {
        for s in &mut samples {
            take(&mut b4, "labels")?;
            s.label = Some(u32::from_le_bytes(b4));
        }
    }
    Dataset::new(name, dim, samples)
}
