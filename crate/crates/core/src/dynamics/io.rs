//! Binary dataset files and per-simulation CSV export.
//!
//! Layout (little-endian): `b"CDS1"`, `u32` version, `u32` byte length of a
//! UTF-8 JSON metadata blob, the blob, `sims·n·n` link-type bytes, then
//! `sims·n·T·D` `f32` feature values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DatasetMeta, InteractionGraph, TrajectoryDataset};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDS1";
pub const VERSION: u32 = 1;

pub fn encode_dataset(d: &TrajectoryDataset) -> Result<Vec<u8>> {
    d.check_consistent()?;
    let meta = serde_json::to_vec(&d.meta)?;
    let n = d.n_agents();
    let mut buf = Vec::with_capacity(12 + meta.len() + d.sims() * n * n + 4 * d.features.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    for g in &d.graphs {
        buf.extend_from_slice(g.link_matrix());
    }
    for v in &d.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_dataset(d: &TrajectoryDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(d)?;
    crate::write_atomic(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    decode_dataset(&fs::read(path)?)
}

/// Cursor that reports the byte offset of whatever it failed to read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if len > remaining {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {len} bytes, {remaining} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset(), format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrajectoryDataset> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let at = r.offset();
    let meta: DatasetMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(at, format!("metadata: {e}")))?;
    if meta.feature_dim != meta.spec.feature_dim() {
        return Err(Error::format(
            at,
            format!(
                "feature_dim {} inconsistent with {:?}",
                meta.feature_dim, meta.spec.system
            ),
        ));
    }
    let n = meta.spec.n_agents;
    let graph_bytes = meta
        .sims
        .checked_mul(n * n)
        .ok_or_else(|| Error::format(at, "graph block size overflows"))?;
    let at = r.offset();
    let links = r.take(graph_bytes, "graphs")?;
    let mut graphs = Vec::with_capacity(meta.sims);
    for (s, m) in links.chunks_exact(n * n.max(1)).enumerate() {
        let g = InteractionGraph::new(n, m.to_vec(), meta.spec.type_values.clone()).map_err(
            |e| Error::format(at + (s * n * n) as u64, format!("graph {s}: {e}")),
        )?;
        graphs.push(g);
    }
    let count = meta
        .sims
        .checked_mul(n * meta.spec.frames * meta.feature_dim)
        .ok_or_else(|| Error::format(r.offset(), "feature block size overflows"))?;
    let features = r.f32s(count, "features")?;
    r.finish()?;
    Ok(TrajectoryDataset {
        meta,
        graphs,
        features,
    })
}

/// One CSV per simulation: `agent,frame,<channel>...` rows.
pub fn write_sim_csv(d: &TrajectoryDataset, sim: usize, out: &mut impl Write) -> Result<()> {
    let names = d.meta.spec.system.channel_names(d.meta.spec.frequency_mode);
    writeln!(out, "agent,frame,{}", names.join(","))?;
    for i in 0..d.n_agents() {
        for t in 0..d.frames() {
            write!(out, "{i},{t}")?;
            for v in d.frame(sim, i, t) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Link-type matrix as CSV, one row per agent.
pub fn write_matrix_csv(n: usize, values: &[u8], out: &mut impl Write) -> Result<()> {
    for i in 0..n {
        let row: Vec<String> = values[i * n..(i + 1) * n].iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
