//! CSV event trace.
//!
//! ```text
//! # oscmac trace v1; config_sha256=<hex>; seed=<n>; tool=oscmac <version>
//! time_us,seq,node,event,awake_before,awake_after,charged_j,residual_j,detail
//! ```
//!
//! `node` is empty for records without a subject. `charged_j` is the
//! energy drawn from `node` by this record and `residual_j` its battery
//! afterwards. `detail` is a `;`-separated list of `key=value` pairs.

use std::fmt::Write as _;
use std::io::{self, Write};

use crate::types::{Micros, NodeId};

pub const TRACE_VERSION: u32 = 1;
pub const COLUMNS: &str =
    "time_us,seq,node,event,awake_before,awake_after,charged_j,residual_j,detail";

pub fn header_line(config_sha256: &str, seed: u64) -> String {
    format!(
        "# oscmac trace v{TRACE_VERSION}; config_sha256={config_sha256}; seed={seed}; tool=oscmac {}",
        env!("CARGO_PKG_VERSION")
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time_us: Micros,
    pub seq: u64,
    pub node: Option<NodeId>,
    pub event: String,
    pub awake_before: bool,
    pub awake_after: bool,
    pub charged_j: f64,
    pub residual_j: Option<f64>,
    pub detail: String,
}

impl TraceRecord {
    /// Value of `key` in the detail column.
    pub fn detail_value(&self, key: &str) -> Option<&str> {
        self.detail.split(';').find_map(|kv| {
            kv.split_once('=')
                .filter(|(k, _)| *k == key)
                .map(|(_, v)| v)
        })
    }
}

/// Builder for the detail column.
#[derive(Debug, Default, Clone)]
pub struct Detail(String);

impl Detail {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kv(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        if !self.0.is_empty() {
            self.0.push(';');
        }
        let _ = write!(self.0, "{key}={value}");
        self
    }

    pub fn finish(self) -> String {
        self.0
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
    records: u64,
    line: String,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, config_sha256: &str, seed: u64) -> io::Result<Self> {
        writeln!(out, "{}", header_line(config_sha256, seed))?;
        writeln!(out, "{COLUMNS}")?;
        Ok(Self {
            out,
            records: 0,
            line: String::with_capacity(160),
        })
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    #[allow(clippy::too_many_arguments)]
    pub fn write(
        &mut self,
        time_us: Micros,
        node: Option<NodeId>,
        event: &str,
        awake: (bool, bool),
        charged_j: f64,
        residual_j: Option<f64>,
        detail: &str,
    ) -> io::Result<()> {
        debug_assert!(!detail.contains(',') && !detail.contains('\n'));
        self.line.clear();
        let seq = self.records;
        let _ = write!(self.line, "{time_us},{seq},");
        if let Some(n) = node {
            let _ = write!(self.line, "{n}");
        }
        let _ = write!(
            self.line,
            ",{event},{},{},{charged_j:e},",
            u8::from(awake.0),
            u8::from(awake.1)
        );
        if let Some(r) = residual_j {
            let _ = write!(self.line, "{r:e}");
        }
        let _ = writeln!(self.line, ",{detail}");
        self.out.write_all(self.line.as_bytes())?;
        self.records += 1;
        Ok(())
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub config_sha256: String,
    pub seed: u64,
    pub records: Vec<TraceRecord>,
}

fn bad(line: usize, msg: &str) -> io::Error {
    io::Error::new(
        io::ErrorKind::InvalidData,
        format!("trace line {line}: {msg}"),
    )
}

/// Reads a trace back, for audits and tests.
pub fn parse_trace(text: &str) -> io::Result<ParsedTrace> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty trace"))?;
    let field = |key: &str| {
        header
            .split("; ")
            .find_map(|p| p.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| bad(1, "malformed header"))
    };
    let config_sha256 = field("config_sha256")?.to_string();
    let seed = field("seed")?.parse().map_err(|_| bad(1, "bad seed"))?;
    if lines.next() != Some(COLUMNS) {
        return Err(bad(2, "unexpected column header"));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 3;
        let cols: Vec<&str> = line.splitn(9, ',').collect();
        if cols.len() != 9 {
            return Err(bad(n, "expected 9 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
        records.push(TraceRecord {
            time_us: cols[0].parse().map_err(|_| bad(n, "bad time"))?,
            seq: cols[1].parse().map_err(|_| bad(n, "bad seq"))?,
            node: if cols[2].is_empty() {
                None
            } else {
                Some(NodeId(cols[2].parse().map_err(|_| bad(n, "bad node"))?))
            },
            event: cols[3].to_string(),
            awake_before: cols[4] == "1",
            awake_after: cols[5] == "1",
            charged_j: num(cols[6])?,
            residual_j: if cols[7].is_empty() {
                None
            } else {
                Some(num(cols[7])?)
            },
            detail: cols[8].to_string(),
        });
    }
    Ok(ParsedTrace {
        config_sha256,
        seed,
        records,
    })
}
