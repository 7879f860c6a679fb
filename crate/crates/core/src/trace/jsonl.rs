//! Lossless JSON-Lines rendering of a trace.
//!
//! Line 1 is the header object:
//!
//! ```json
//! {"format":"moet-jsonl","version":1,"domain":"math","fingerprint":"00ab...",
//!  "num_layers":4,"num_experts":32,"top_k":4,"hidden_dim":16,
//!  "tokens_per_sample":[64,64]}
//! ```
//!
//! Every following line is one record:
//!
//! ```json
//! {"sample":0,"token":0,"layer":0,"experts":[3,9],"gates":[0.6,0.4],
//!  "out_norms":[1.2,0.8],"s":0.031}
//! ```
//!
//! `fingerprint` is 16 lowercase hex digits so that 64-bit values survive
//! JSON tooling that reads numbers as doubles. Floats are written with the
//! shortest representation that round-trips to the same `f32`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExpertActivation, TraceFile, TraceHeader, TraceRecord, TRACE_VERSION};
use crate::error::{Error, Result};

pub const JSONL_FORMAT: &str = "moet-jsonl";

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    domain: String,
    fingerprint: String,
    num_layers: usize,
    num_experts: usize,
    top_k: usize,
    hidden_dim: usize,
    tokens_per_sample: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    sample: u32,
    token: u32,
    layer: u32,
    experts: Vec<u32>,
    gates: Vec<f32>,
    out_norms: Vec<f32>,
    s: f32,
}

fn malformed(line: usize, detail: impl std::fmt::Display) -> Error {
    Error::Malformed { kind: "trace-jsonl", detail: format!("line {line}: {detail}") }
}

impl TraceFile {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let h = &self.header;
        let header = HeaderLine {
            format: JSONL_FORMAT.into(),
            version: TRACE_VERSION,
            domain: h.domain.clone(),
            fingerprint: format!("{:016x}", h.fingerprint),
            num_layers: h.num_layers,
            num_experts: h.num_experts,
            top_k: h.top_k,
            hidden_dim: h.hidden_dim,
            tokens_per_sample: h.tokens_per_sample.clone(),
        };
        let io = |e| Error::io("<jsonl>", e);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            let line = RecordLine {
                sample: r.sample_id,
                token: r.token_id,
                layer: r.layer,
                experts: r.activations.iter().map(|a| a.expert).collect(),
                gates: r.activations.iter().map(|a| a.gate).collect(),
                out_norms: r.activations.iter().map(|a| a.out_norm).collect(),
                s: r.contribution,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    /// Parses and validates a JSON-Lines trace. Blank lines are ignored.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (n, first) = lines.next().ok_or_else(|| malformed(1, "empty input"))?;
        let first = first.map_err(|e| Error::io("<jsonl>", e))?;
        let head: HeaderLine = serde_json::from_str(&first).map_err(|e| malformed(n, e))?;
        if head.format != JSONL_FORMAT {
            return Err(malformed(n, format!("format {:?}", head.format)));
        }
        if head.version != TRACE_VERSION {
            return Err(Error::VersionMismatch {
                kind: "trace-jsonl",
                found: head.version,
                expected: TRACE_VERSION,
            });
        }
        let fingerprint = u64::from_str_radix(&head.fingerprint, 16)
            .map_err(|e| malformed(n, format!("fingerprint: {e}")))?;
        let header = TraceHeader {
            fingerprint,
            num_layers: head.num_layers,
            num_experts: head.num_experts,
            top_k: head.top_k,
            hidden_dim: head.hidden_dim,
            domain: head.domain,
            tokens_per_sample: head.tokens_per_sample,
        };
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io("<jsonl>", e))?;
            let r: RecordLine = serde_json::from_str(&line).map_err(|e| malformed(n, e))?;
            if r.gates.len() != r.experts.len() || r.out_norms.len() != r.experts.len() {
                return Err(malformed(n, "experts, gates and out_norms differ in length"));
            }
            let activations = r
                .experts
                .iter()
                .zip(&r.gates)
                .zip(&r.out_norms)
                .map(|((&expert, &gate), &out_norm)| ExpertActivation { expert, gate, out_norm })
                .collect();
            records.push(TraceRecord {
                sample_id: r.sample,
                token_id: r.token,
                layer: r.layer,
                activations,
                contribution: r.s,
            });
        }
        let trace = TraceFile { header, records };
        trace.validate()?;
        Ok(trace)
    }
}

pub fn write_trace_jsonl(trace: &TraceFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    trace.write_jsonl(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_jsonl(path: impl AsRef<Path>) -> Result<TraceFile> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    TraceFile::read_jsonl(BufReader::new(f))
}
