//! Memory micro-op traces and the `#mobtrace v1` text format.
//!
//! A trace file starts with a header line carrying JSON metadata, followed by
//! one op per line:
//!
//! ```text
//! #mobtrace v1 {"generator":"spoiler",...}
//! 0,store,0x7f00000002a0,0x401a30,0
//! 1,load,0x5500000002a0,0x401a58,1
//! ```

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::{AddressError, AddressSpace, VirtAddr};

pub const TRACE_MAGIC: &str = "#mobtrace";
pub const TRACE_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported trace version {found:?} (expected {TRACE_VERSION})")]
    Version { found: String },
    #[error("ops must have strictly increasing seq: {prev} followed by {next}")]
    NonMonotone { prev: u64, next: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Address(#[from] AddressError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Store,
    Load,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Store => "store",
            OpKind::Load => "load",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceOp {
    pub seq: u64,
    pub kind: OpKind,
    pub va: VirtAddr,
    pub pc: u64,
    pub is_probe: bool,
}

/// Ground truth recorded by the attack generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoilerLabels {
    /// Virtual page number of each measured page, by page index.
    pub probe_vpns: Vec<u64>,
    /// Page indices whose mapping was planted to alias on PA bits [19:12].
    pub aliased_pages: Vec<usize>,
    pub donor_pa: u64,
    pub rounds: usize,
}

impl SpoilerLabels {
    pub fn page_index(&self, vpn: u64) -> Option<usize> {
        self.probe_vpns.iter().position(|&v| v == vpn)
    }

    pub fn is_aliased(&self, page: usize) -> bool {
        self.aliased_pages.binary_search(&page).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub space_seed: u64,
    /// Complete virtual-to-physical page map used while generating.
    pub page_map: Vec<(u64, u64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<SpoilerLabels>,
}

impl TraceMeta {
    pub fn empty() -> Self {
        Self {
            generator: "empty".into(),
            params: serde_json::Value::Null,
            seed: 0,
            space_seed: 0,
            page_map: Vec::new(),
            labels: None,
        }
    }

    /// Rebuilds the address space the trace was generated against.
    pub fn address_space(&self) -> Result<AddressSpace, AddressError> {
        AddressSpace::from_mapping(self.space_seed, &self.page_map)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub ops: Vec<TraceOp>,
}

impl Trace {
    pub fn new(meta: TraceMeta, ops: Vec<TraceOp>) -> Self {
        Self { meta, ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn loads(&self) -> impl Iterator<Item = &TraceOp> {
        self.ops.iter().filter(|op| op.kind == OpKind::Load)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        for pair in self.ops.windows(2) {
            if pair[1].seq <= pair[0].seq {
                return Err(TraceError::NonMonotone { prev: pair[0].seq, next: pair[1].seq });
            }
        }
        Ok(())
    }
}

pub fn write_trace<W: Write>(trace: &Trace, mut sink: W) -> Result<(), TraceError> {
    let meta = serde_json::to_string(&trace.meta).map_err(std::io::Error::other)?;
    writeln!(sink, "{TRACE_MAGIC} {TRACE_VERSION} {meta}")?;
    for op in &trace.ops {
        writeln!(
            sink,
            "{},{},{:#x},{:#x},{}",
            op.seq,
            op.kind,
            op.va.value(),
            op.pc,
            u8::from(op.is_probe)
        )?;
    }
    sink.flush()?;
    Ok(())
}

fn parse_hex(field: &str, line: usize, what: &str) -> Result<u64, TraceError> {
    let digits = field
        .strip_prefix("0x")
        .ok_or_else(|| TraceError::Parse { line, msg: format!("{what} {field:?} lacks 0x prefix") })?;
    u64::from_str_radix(digits, 16)
        .map_err(|e| TraceError::Parse { line, msg: format!("{what} {field:?}: {e}") })
}

fn parse_op(text: &str, line: usize) -> Result<TraceOp, TraceError> {
    let fields: Vec<&str> = text.split(',').collect();
    let [seq, kind, va, pc, probe] = fields[..] else {
        return Err(TraceError::Parse { line, msg: format!("expected 5 fields, found {}", fields.len()) });
    };
    let seq = seq
        .parse::<u64>()
        .map_err(|e| TraceError::Parse { line, msg: format!("seq {seq:?}: {e}") })?;
    let kind = match kind {
        "store" => OpKind::Store,
        "load" => OpKind::Load,
        other => return Err(TraceError::Parse { line, msg: format!("unknown op kind {other:?}") }),
    };
    let va = VirtAddr::new(parse_hex(va, line, "va")?)
        .map_err(|e| TraceError::Parse { line, msg: e.to_string() })?;
    let pc = parse_hex(pc, line, "pc")?;
    if pc >> 48 != 0 {
        return Err(TraceError::Parse { line, msg: format!("pc {pc:#x} exceeds 48 bits") });
    }
    let is_probe = match probe {
        "0" => false,
        "1" => true,
        other => return Err(TraceError::Parse { line, msg: format!("probe flag {other:?} is not 0/1") }),
    };
    Ok(TraceOp { seq, kind, va, pc, is_probe })
}

pub fn read_trace<R: BufRead>(source: R) -> Result<Trace, TraceError> {
    let mut lines = source.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(TraceError::Parse { line: 1, msg: "missing header".into() }),
    };
    let rest = header
        .strip_prefix(TRACE_MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| TraceError::Parse { line: 1, msg: format!("header must start with {TRACE_MAGIC:?}") })?;
    let (version, json) = rest.split_once(' ').unwrap_or((rest, ""));
    if version != TRACE_VERSION {
        return Err(TraceError::Version { found: version.to_string() });
    }
    let meta: TraceMeta =
        serde_json::from_str(json).map_err(|e| TraceError::Parse { line: 1, msg: format!("metadata: {e}") })?;

    let mut ops = Vec::new();
    for (idx, text) in lines.enumerate() {
        let line = idx + 2;
        let text = text?;
        if text.is_empty() {
            continue;
        }
        let op = parse_op(&text, line)?;
        if let Some(prev) = ops.last().map(|p: &TraceOp| p.seq) {
            if op.seq <= prev {
                return Err(TraceError::Parse { line, msg: format!("seq {} not greater than {prev}", op.seq) });
            }
        }
        ops.push(op);
    }
    Ok(Trace { meta, ops })
}
