//! `.tipl` checkpoints: magic, version, TOML header, then named
//! little-endian f32 blocks with explicit shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tipool::{NetworkTopology, Tensor, TransformSet};

use crate::config::{OptimizerConfig, Regime};
use crate::error::{HarnessError, Result};
use crate::io::write_atomic;
use crate::metrics::MetricsRow;

pub const MAGIC: &[u8; 4] = b"TIPL";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the run except the tensors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub regime: Regime,
    pub topology: NetworkTopology,
    /// The configured transform set (the augment regime samples from it).
    pub transforms: TransformSet,
    pub optimizer: OptimizerConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub presentations: u64,
    /// Per-epoch random streams are derived from the seed and the epoch
    /// counter, so these two values are the whole generator state.
    pub seed: u64,
    pub best_test_err_pct: Option<f64>,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: Vec<(String, Tensor<f32>)>,
}

fn format_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(format_err("checkpoint is truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header)?;
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        push_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        push_u32(&mut out, self.blocks.len());
        for (name, t) in &self.blocks {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.rank());
            for &d in t.shape() {
                push_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4).map_err(|_| format_err("not a checkpoint"))? != MAGIC {
            return Err(format_err("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let n = r.len()?;
        let header = std::str::from_utf8(r.take(n)?).map_err(|_| format_err("header is not UTF-8"))?;
        let header: CheckpointHeader =
            toml::from_str(header).map_err(|e| format_err(format!("checkpoint header: {e}")))?;
        let count = r.len()?;
        let mut blocks = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = r.len()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| format_err("block name is not UTF-8"))?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format_err("block shape overflows"))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| format_err("block shape overflows"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            blocks.push((name, Tensor::from_vec(&shape, data).map_err(|e| format_err(e.to_string()))?));
        }
        if !r.buf.is_empty() {
            return Err(format_err("trailing bytes after checkpoint blocks"));
        }
        Ok(Checkpoint { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
