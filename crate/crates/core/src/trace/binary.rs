//! Canonical binary trace file.
//!
//! ```text
//! "MOET" | version u32
//! domain: u32 byte length + UTF-8 bytes
//! L N K D (u32 each) | fingerprint u64 | M u32 | T_1..T_M (u32 each)
//! records: u32 sample_id, u32 token_id, u32 layer,
//!          K × (u32 expert, f32 gate, f32 out_norm), f32 s
//! checksum u64 over everything above
//! ```

use std::path::Path;

use super::{ExpertActivation, TraceFile, TraceHeader, TraceRecord};
use crate::codec::{self, Writer};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: [u8; 4] = *b"MOET";
pub const TRACE_VERSION: u32 = 1;

const KIND: &str = "trace";

impl TraceFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = Writer::new(TRACE_MAGIC, TRACE_VERSION);
        w.u32(h.domain.len() as u32);
        w.bytes(h.domain.as_bytes());
        for v in [h.num_layers, h.num_experts, h.top_k, h.hidden_dim] {
            w.u32(v as u32);
        }
        w.u64(h.fingerprint);
        w.u32(h.tokens_per_sample.len() as u32);
        for &t in &h.tokens_per_sample {
            w.u32(t);
        }
        for r in &self.records {
            w.u32(r.sample_id);
            w.u32(r.token_id);
            w.u32(r.layer);
            for a in &r.activations {
                w.u32(a.expert);
                w.f32(a.gate);
                w.f32(a.out_norm);
            }
            w.f32(r.contribution);
        }
        w.finish()
    }

    /// Decodes and validates a binary trace.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = codec::open(KIND, data, TRACE_MAGIC, TRACE_VERSION, 4)?;
        let len = r.usize32()?;
        let domain = std::str::from_utf8(r.take(len)?)
            .map_err(|e| r.malformed(format!("domain label: {e}")))?
            .to_string();
        let num_layers = r.usize32()?;
        let num_experts = r.usize32()?;
        let top_k = r.usize32()?;
        let hidden_dim = r.usize32()?;
        let fingerprint = r.u64()?;
        let m = r.usize32()?;
        if r.remaining() < m * 4 {
            return Err(Error::Truncated { kind: KIND, detail: "sample lengths".into() });
        }
        let tokens_per_sample = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let header = TraceHeader {
            fingerprint,
            num_layers,
            num_experts,
            top_k,
            hidden_dim,
            domain,
            tokens_per_sample,
        };
        let record_size = 4 * (3 + 3 * top_k + 1);
        let expected = header.expected_records();
        if r.remaining() != expected * record_size {
            return Err(r.malformed(format!(
                "{} record bytes, header implies {} records of {record_size} bytes",
                r.remaining(),
                expected
            )));
        }
        let mut records = Vec::with_capacity(expected);
        for _ in 0..expected {
            let sample_id = r.u32()?;
            let token_id = r.u32()?;
            let layer = r.u32()?;
            let activations = (0..top_k)
                .map(|_| {
                    Ok(ExpertActivation {
                        expert: r.u32()?,
                        gate: r.f32()?,
                        out_norm: r.f32()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let contribution = r.f32()?;
            records.push(TraceRecord { sample_id, token_id, layer, activations, contribution });
        }
        r.expect_end()?;
        let trace = TraceFile { header, records };
        trace.validate()?;
        Ok(trace)
    }
}

pub fn write_trace(trace: &TraceFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trace.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceFile> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TraceFile::from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TraceFile {
        let act = |expert, gate| ExpertActivation { expert, gate, out_norm: 1.5 };
        TraceFile {
            header: TraceHeader {
                fingerprint: 0xdead_beef_0123_4567,
                num_layers: 1,
                num_experts: 4,
                top_k: 2,
                hidden_dim: 3,
                domain: "gpqa".into(),
                tokens_per_sample: vec![2],
            },
            records: vec![
                TraceRecord {
                    sample_id: 0,
                    token_id: 0,
                    layer: 0,
                    activations: vec![act(1, 0.75), act(3, 0.25)],
                    contribution: 0.125,
                },
                TraceRecord {
                    sample_id: 0,
                    token_id: 1,
                    layer: 0,
                    activations: vec![act(0, 0.5), act(2, 0.5)],
                    contribution: 1.0,
                },
            ],
        }
    }

    #[test]
    fn exact_layout() {
        let bytes = tiny().to_bytes();
        // magic+version, domain (4+4), dims (16), fingerprint (8), M (4), T (4)
        let header = 8 + 8 + 16 + 8 + 4 + 4;
        let record = 4 * (3 + 3 * 2 + 1);
        assert_eq!(bytes.len(), header + 2 * record + 8);
        assert_eq!(&bytes[..4], b"MOET");
        assert_eq!(&bytes[12..16], b"gpqa");
        let rec0 = &bytes[header..header + record];
        assert_eq!(u32::from_le_bytes(rec0[12..16].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(rec0[16..20].try_into().unwrap()), 0.75);
        assert_eq!(f32::from_le_bytes(rec0[36..40].try_into().unwrap()), 0.125);
    }

    #[test]
    fn round_trip() {
        let t = tiny();
        let bytes = t.to_bytes();
        let back = TraceFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn integrity_errors() {
        let bytes = tiny().to_bytes();
        let mut corrupt = bytes.clone();
        corrupt[50] ^= 1;
        assert!(matches!(TraceFile::from_bytes(&corrupt), Err(Error::Checksum { .. })));
        let mut version = bytes.clone();
        version[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            TraceFile::from_bytes(&version),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
        assert!(matches!(
            TraceFile::from_bytes(&bytes[..10]),
            Err(Error::Truncated { .. })
        ));
    }
}
