//! Mixture snapshot files.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! b"SMM1" | u32 version | u32 K | u32 d | K x (f64 kappa, f64 alpha, d x f64 mu, d x f64 r)
//! ```
//!
//! Ids, counts and assignments are not stored; a loaded mixture gets ids
//! `0..K`, counts proportional to `alpha`, and an empty assignment table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use super::{AssignmentTable, MixtureState, VmfComponent};
use crate::vmf::UnitEmbedding;
use crate::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SMM1";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(state: &MixtureState, mut w: W) -> Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&(state.k() as u32).to_le_bytes())?;
    w.write_all(&(state.dim as u32).to_le_bytes())?;
    for c in &state.components {
        w.write_all(&c.kappa.to_le_bytes())?;
        w.write_all(&c.alpha.to_le_bytes())?;
        for x in c.mu.iter().chain(&c.r) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            Error::parse(format!(
                "snapshot truncated reading {what} at byte {}: {e}",
                self.offset
            ))
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(what)?))
    }
}

pub fn read_snapshot<R: Read>(r: R) -> Result<MixtureState> {
    let mut cur = Cursor {
        inner: r,
        offset: 0,
    };
    let magic: [u8; 4] = cur.take("magic")?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::parse(format!(
            "bad snapshot magic {magic:?} at byte 0"
        )));
    }
    let version = cur.u32("version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::parse(format!(
            "unsupported snapshot version {version} at byte 4"
        )));
    }
    let k = cur.u32("component count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    if k == 0 {
        return Err(Error::parse("snapshot has no components (byte 8)"));
    }
    let mut components = Vec::with_capacity(k);
    for id in 0..k {
        let at = cur.offset;
        let kappa = cur.f64("kappa")?;
        let alpha = cur.f64("alpha")?;
        let mut mu = Vec::with_capacity(dim);
        for _ in 0..dim {
            mu.push(cur.f64("mu")?);
        }
        let mut r = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.push(cur.f64("r")?);
        }
        let mu = UnitEmbedding::new(mu)
            .map_err(|e| Error::parse(format!("component {id} at byte {at}: {e}")))?;
        components.push(VmfComponent {
            id: id as u32,
            mu,
            kappa,
            r,
            alpha,
            member_count: alpha,
        });
    }
    let state = MixtureState {
        components,
        assignments: AssignmentTable::default(),
        epoch: 0,
        dim,
    };
    state.validate()?;
    Ok(state)
}

pub fn save_snapshot(state: &MixtureState, path: impl AsRef<Path>) -> Result<()> {
    write_snapshot(state, BufWriter::new(File::create(path)?))
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<MixtureState> {
    read_snapshot(BufReader::new(File::open(path)?))
}

#[derive(Serialize)]
struct ComponentJson<'a> {
    id: u32,
    kappa: f64,
    alpha: f64,
    member_count: f64,
    mu: &'a [f64],
    r: &'a [f64],
}

#[derive(Serialize)]
struct SnapshotJson<'a> {
    version: u32,
    epoch: usize,
    k: usize,
    dim: usize,
    components: Vec<ComponentJson<'a>>,
}

/// Human-readable JSON view of a mixture.
pub fn snapshot_json(state: &MixtureState) -> Result<String> {
    let doc = SnapshotJson {
        version: SNAPSHOT_VERSION,
        epoch: state.epoch,
        k: state.k(),
        dim: state.dim,
        components: state
            .components
            .iter()
            .map(|c| ComponentJson {
                id: c.id,
                kappa: c.kappa,
                alpha: c.alpha,
                member_count: c.member_count,
                mu: &c.mu,
                r: &c.r,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}
