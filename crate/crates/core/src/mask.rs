//! Additive attention masks: graph conversion, block composition over
//! modality spans, and the QAMK binary format.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{Cursor, Tensor};

/// Square mask whose cells are either Open (additive 0) or Blocked
/// (additive `-inf`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphMask {
    size: usize,
    open: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelfLoops {
    #[default]
    Open,
    FromGraph,
}

impl GraphMask {
    pub fn all_open(size: usize) -> Self {
        Self {
            size,
            open: vec![true; size * size],
        }
    }

    pub fn diagonal(size: usize) -> Self {
        let mut m = Self {
            size,
            open: vec![false; size * size],
        };
        for i in 0..size {
            m.open[i * size + i] = true;
        }
        m
    }

    pub fn from_cells(size: usize, open: Vec<bool>) -> Result<Self> {
        if open.len() != size * size {
            return Err(Error::dim("mask cells", &[size, size], &[open.len()]));
        }
        Ok(Self { size, open })
    }

    /// Each off-diagonal cell Open with probability 1/2; diagonal Open.
    pub fn random<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let mut m = Self::diagonal(size);
        for i in 0..size {
            for j in 0..size {
                if i != j {
                    m.open[i * size + j] = rng.random_bool(0.5);
                }
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.open[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, open: bool) {
        self.open[i * self.size + j] = open;
    }

    pub fn cells(&self) -> &[bool] {
        &self.open
    }

    pub fn blocked_count(&self) -> usize {
        self.open.iter().filter(|&&o| !o).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.is_open(i, j) == self.is_open(j, i)))
    }

    /// `L×L` tensor of additive values: 0 for Open, `-inf` for Blocked.
    pub fn to_additive(&self) -> Tensor {
        let data = self
            .open
            .iter()
            .map(|&o| if o { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square")
    }

    /// Extracts the square sub-mask starting at `offset`.
    pub fn block(&self, offset: usize, len: usize) -> GraphMask {
        let mut out = GraphMask {
            size: len,
            open: vec![false; len * len],
        };
        for i in 0..len {
            for j in 0..len {
                out.open[i * len + j] = self.is_open(offset + i, offset + j);
            }
        }
        out
    }

    /// Same mask with rows and columns reordered: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> GraphMask {
        let n = self.size;
        let mut out = GraphMask::diagonal(n);
        for i in 0..n {
            for j in 0..n {
                out.open[i * n + j] = self.is_open(perm[i], perm[j]);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.open.len());
        out.extend_from_slice(QAMK_MAGIC);
        out.push(QAMK_VERSION);
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        out.extend(self.open.iter().map(|&o| o as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != QAMK_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"QAMK\""),
            });
        }
        let version = cur.take(1)?[0];
        if version != QAMK_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let b = cur.take(4)?;
        let size = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let start = cur.pos;
        let payload = cur.take(size * size)?;
        let mut open = Vec::with_capacity(payload.len());
        for (k, &v) in payload.iter().enumerate() {
            match v {
                0 => open.push(false),
                1 => open.push(true),
                other => {
                    return Err(Error::Format {
                        offset: start + k,
                        msg: format!("cell byte {other} is neither 0 nor 1"),
                    })
                }
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                offset: cur.pos,
                msg: "trailing bytes after mask payload".into(),
            });
        }
        Ok(Self { size, open })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const QAMK_MAGIC: &[u8; 4] = b"QAMK";
const QAMK_VERSION: u8 = 1;

/// Cell `(i, j)` is Open iff the graph carries `i → j`, or `i == j` under the
/// Open self-loop policy.
pub fn graph_to_mask(g: &Graph, self_loops: SelfLoops) -> GraphMask {
    let n = g.num_nodes();
    let mut open = g.adjacency();
    if self_loops == SelfLoops::Open {
        for i in 0..n {
            open[i * n + i] = true;
        }
    }
    GraphMask { size: n, open }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
    Special,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
            Modality::Special => "special",
        }
    }
}

/// Contiguous range of the fused sequence occupied by one modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalSpan {
    pub modality: Modality,
    pub offset: usize,
    pub length: usize,
}

impl ModalSpan {
    pub fn new(modality: Modality, offset: usize, length: usize) -> Self {
        Self {
            modality,
            offset,
            length,
        }
    }

    pub fn end(&self) -> usize {
        self.offset + self.length
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.offset..self.end()).contains(&i)
    }
}

/// Checks that spans are ordered, disjoint and tile `[0, L)`; returns `L`.
pub fn validate_spans(spans: &[ModalSpan]) -> Result<usize> {
    let mut next = 0;
    for s in spans {
        if s.offset != next {
            return Err(Error::Composition(format!(
                "{} span starts at {} but previous span ended at {next}",
                s.modality.as_str(),
                s.offset
            )));
        }
        next = s.end();
    }
    Ok(next)
}

/// Cross-modal blocks are always Open.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CrossPolicy {
    #[default]
    AllOpen,
}

/// Assembles the fused mask: per-modality masks on the diagonal blocks,
/// every cross-modal cell Open, and `special` spans Open in both their rows
/// and columns.
pub fn compose_block_mask(
    spans: &[ModalSpan],
    per_modality: &BTreeMap<Modality, GraphMask>,
    _cross: CrossPolicy,
) -> Result<GraphMask> {
    let l = validate_spans(spans)?;
    let mut out = GraphMask::all_open(l);
    for s in spans {
        if s.modality == Modality::Special || s.length == 0 {
            continue;
        }
        let m = per_modality.get(&s.modality).ok_or_else(|| {
            Error::Composition(format!("no mask for {} span", s.modality.as_str()))
        })?;
        if m.size() != s.length {
            return Err(Error::Composition(format!(
                "{} mask has size {} but its span has length {}",
                s.modality.as_str(),
                m.size(),
                s.length
            )));
        }
        for i in 0..s.length {
            for j in 0..s.length {
                out.set(s.offset + i, s.offset + j, m.is_open(i, j));
            }
        }
    }
    Ok(out)
}
