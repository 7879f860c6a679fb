//! Calibration traces: the per-(token, layer) routing statistics every
//! trace-based scoring method needs.
//!
//! A trace stores, for each token and layer, the K activated experts with
//! their gate and output norm, plus the token contribution
//! `s = 1 - cos(h, h_tilde)`. Hidden states themselves are not kept.

mod binary;
mod jsonl;

pub use binary::{read_trace, write_trace, TRACE_MAGIC, TRACE_VERSION};
pub use jsonl::{read_trace_jsonl, write_trace_jsonl, JSONL_FORMAT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, LayerForwardRecord, MoeModel};
use crate::parallel::{map_shards, Workers};

/// Norms below this are treated as zero when computing cosine similarity.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertActivation {
    pub expert: u32,
    pub gate: f32,
    pub out_norm: f32,
}

/// One (sample, token, layer) entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub sample_id: u32,
    pub token_id: u32,
    pub layer: u32,
    pub activations: Vec<ExpertActivation>,
    /// Token contribution `s` in `[0, 2]`.
    pub contribution: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub fingerprint: u64,
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub domain: String,
    pub tokens_per_sample: Vec<u32>,
}

impl TraceHeader {
    pub fn dims(&self) -> Dims {
        Dims {
            num_layers: self.num_layers,
            num_experts: self.num_experts,
            top_k: self.top_k,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.tokens_per_sample.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens_per_sample.iter().map(|&t| t as usize).sum()
    }

    pub fn expected_records(&self) -> usize {
        self.num_layers * self.total_tokens()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

/// `1 - cos(h, h_tilde)`. Two (near-)zero vectors give 0; exactly one
/// (near-)zero vector gives 1; identical vectors give exactly 0.
pub fn token_contribution(h: &[f64], h_tilde: &[f64]) -> f64 {
    let nh = crate::model::l2_norm(h);
    let nt = crate::model::l2_norm(h_tilde);
    match (nh < ZERO_NORM, nt < ZERO_NORM) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        (false, false) if h == h_tilde => 0.0,
        (false, false) => {
            let dot: f64 = h.iter().zip(h_tilde).map(|(a, b)| a * b).sum();
            1.0 - (dot / (nh * nt)).clamp(-1.0, 1.0)
        }
    }
}

/// Smallest positive f32; stored in place of gates that underflow to zero so
/// that every stored activation keeps a positive gate.
const MIN_GATE: f32 = f32::from_bits(1);

impl TraceRecord {
    pub fn from_forward(
        sample_id: u32,
        token_id: u32,
        layer: u32,
        rec: &LayerForwardRecord,
    ) -> Self {
        let activations = rec
            .routing
            .selected
            .iter()
            .zip(&rec.expert_output_norms)
            .map(|(&(expert, gate), &norm)| ExpertActivation {
                expert: expert as u32,
                gate: (gate as f32).max(MIN_GATE),
                out_norm: norm as f32,
            })
            .collect();
        TraceRecord {
            sample_id,
            token_id,
            layer,
            activations,
            contribution: token_contribution(&rec.input, &rec.output) as f32,
        }
    }
}

fn capture_sample(model: &MoeModel, sample_id: u32, tokens: &[Vec<f64>]) -> Result<Vec<TraceRecord>> {
    let per_token = model.forward_sequence(tokens)?;
    let mut out = Vec::with_capacity(per_token.len() * model.config().num_layers);
    for (t, layers) in per_token.iter().enumerate() {
        for (l, rec) in layers.iter().enumerate() {
            out.push(TraceRecord::from_forward(sample_id, t as u32, l as u32, rec));
        }
    }
    Ok(out)
}

/// Forwards every sample through `model` and records its routing statistics.
pub fn capture_trace(
    model: &MoeModel,
    samples: &[Vec<Vec<f64>>],
    domain: &str,
    workers: Workers,
) -> Result<TraceFile> {
    capture_trace_observed(model, samples, domain, workers, |_| {})
}

/// As [`capture_trace`], also handing each record to `observe` in file order.
pub fn capture_trace_observed(
    model: &MoeModel,
    samples: &[Vec<Vec<f64>>],
    domain: &str,
    workers: Workers,
    mut observe: impl FnMut(&TraceRecord),
) -> Result<TraceFile> {
    let cfg = model.config();
    if let Some(n) = samples.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("sample {n} has no tokens")));
    }
    for (n, s) in samples.iter().enumerate() {
        if let Some(t) = s.iter().position(|tok| tok.len() != cfg.hidden_dim) {
            return Err(Error::DimensionMismatch(format!(
                "sample {n} token {t} has length {}, model hidden_dim is {}",
                s[t].len(),
                cfg.hidden_dim
            )));
        }
    }
    let indexed: Vec<(u32, &Vec<Vec<f64>>)> =
        samples.iter().enumerate().map(|(i, s)| (i as u32, s)).collect();
    let shards = map_shards(&indexed, workers, |_, chunk| {
        let mut recs = Vec::new();
        for &(id, s) in chunk {
            recs.extend(capture_sample(model, id, s)?);
        }
        Ok::<_, Error>(recs)
    });
    let mut records = Vec::new();
    for shard in shards {
        for rec in shard? {
            observe(&rec);
            records.push(rec);
        }
    }
    Ok(TraceFile {
        header: TraceHeader {
            fingerprint: model.fingerprint(),
            num_layers: cfg.num_layers,
            num_experts: cfg.num_experts,
            top_k: cfg.top_k,
            hidden_dim: cfg.hidden_dim,
            domain: domain.to_string(),
            tokens_per_sample: samples.iter().map(|s| s.len() as u32).collect(),
        },
        records,
    })
}

/// Concatenates traces of the same model and domain. Sample ids of later
/// traces are shifted past those of earlier ones.
pub fn merge_traces(traces: &[TraceFile]) -> Result<TraceFile> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
    let h0 = &first.header;
    let mut header = h0.clone();
    header.tokens_per_sample.clear();
    let mut records = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let h = &t.header;
        if h.fingerprint != h0.fingerprint {
            return Err(Error::HeaderMismatch(format!(
                "trace {i} fingerprint {:016x} != {:016x}",
                h.fingerprint, h0.fingerprint
            )));
        }
        if h.dims() != h0.dims() || h.hidden_dim != h0.hidden_dim {
            return Err(Error::HeaderMismatch(format!("trace {i} dimensions differ")));
        }
        if h.domain != h0.domain {
            return Err(Error::HeaderMismatch(format!(
                "trace {i} domain {:?} != {:?}",
                h.domain, h0.domain
            )));
        }
        let offset = header.tokens_per_sample.len() as u32;
        header.tokens_per_sample.extend_from_slice(&h.tokens_per_sample);
        records.extend(t.records.iter().map(|r| TraceRecord {
            sample_id: r.sample_id + offset,
            ..r.clone()
        }));
    }
    Ok(TraceFile { header, records })
}

impl TraceFile {
    pub fn dims(&self) -> Dims {
        self.header.dims()
    }

    /// Checks counts, ordering and value ranges.
    ///
    /// Records must appear in (sample, token, layer) order covering every
    /// token of every sample exactly once.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let bad = |detail: String| Error::Malformed { kind: "trace", detail };
        if h.num_layers == 0 || h.num_experts == 0 || h.top_k == 0 || h.top_k > h.num_experts {
            return Err(bad(format!(
                "invalid dims L={} N={} K={}",
                h.num_layers, h.num_experts, h.top_k
            )));
        }
        if self.records.len() != h.expected_records() {
            return Err(bad(format!(
                "{} records, header implies {}",
                self.records.len(),
                h.expected_records()
            )));
        }
        let mut it = self.records.iter();
        for (n, &tn) in h.tokens_per_sample.iter().enumerate() {
            for t in 0..tn {
                for l in 0..h.num_layers {
                    let r = it.next().expect("count checked above");
                    if (r.sample_id, r.token_id, r.layer) != (n as u32, t, l as u32) {
                        return Err(bad(format!(
                            "record ({}, {}, {}) out of order, expected ({n}, {t}, {l})",
                            r.sample_id, r.token_id, r.layer
                        )));
                    }
                    self.validate_record(r).map_err(bad)?;
                }
            }
        }
        Ok(())
    }

    fn validate_record(&self, r: &TraceRecord) -> std::result::Result<(), String> {
        let h = &self.header;
        let at = || format!("record ({}, {}, {})", r.sample_id, r.token_id, r.layer);
        if r.activations.len() != h.top_k {
            return Err(format!("{}: {} activations, K = {}", at(), r.activations.len(), h.top_k));
        }
        let mut gate_sum = 0.0f64;
        for (i, a) in r.activations.iter().enumerate() {
            if a.expert as usize >= h.num_experts {
                return Err(format!("{}: expert {} out of range", at(), a.expert));
            }
            if r.activations[..i].iter().any(|b| b.expert == a.expert) {
                return Err(format!("{}: expert {} repeated", at(), a.expert));
            }
            if !(a.gate > 0.0 && a.gate <= 1.0) {
                return Err(format!("{}: gate {} outside (0, 1]", at(), a.gate));
            }
            if !(a.out_norm >= 0.0 && a.out_norm.is_finite()) {
                return Err(format!("{}: output norm {}", at(), a.out_norm));
            }
            gate_sum += f64::from(a.gate);
        }
        if (gate_sum - 1.0).abs() > 1e-4 {
            return Err(format!("{}: gates sum to {gate_sum}", at()));
        }
        if !(0.0..=2.0).contains(&r.contribution) {
            return Err(format!("{}: contribution {} outside [0, 2]", at(), r.contribution));
        }
        Ok(())
    }

    /// Records of one sample, in (token, layer) order.
    pub fn sample_records(&self, sample_id: u32) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.sample_id == sample_id)
    }
}
