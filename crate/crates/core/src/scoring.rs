//! Per-expert importance scores computed from calibration traces.
//!
//! Trace-based methods are all sums over trace records:
//!
//! | method     | term added for each activation of expert `i` at layer `l` |
//! |------------|-----------------------------------------------------------|
//! | frequency  | `1`                                                       |
//! | gating     | `g`                                                       |
//! | easy_ep    | `g · ‖e‖ · s`                                             |
//!
//! Records are summed in file order. With several workers the records are
//! split into contiguous shards whose partial sums are added in ascending
//! shard order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dims;
use crate::parallel::{map_shards, Workers};
use crate::trace::{TraceFile, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Random,
    Frequency,
    Gating,
    EasyEp,
    Mixed,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::Random => "random",
            ScoreMethod::Frequency => "frequency",
            ScoreMethod::Gating => "gating",
            ScoreMethod::EasyEp => "easy_ep",
            ScoreMethod::Mixed => "mixed",
        }
    }

    pub fn is_trace_based(self) -> bool {
        matches!(self, ScoreMethod::Frequency | ScoreMethod::Gating | ScoreMethod::EasyEp)
    }
}

impl std::str::FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => ScoreMethod::Random,
            "frequency" => ScoreMethod::Frequency,
            "gating" => ScoreMethod::Gating,
            "easy_ep" => ScoreMethod::EasyEp,
            "mixed" => ScoreMethod::Mixed,
            other => return Err(Error::InvalidArgument(format!("unknown score method {other:?}"))),
        })
    }
}

impl std::fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a table's numbers came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Model fingerprints (hex) of the traces that fed the table.
    #[serde(default)]
    pub fingerprints: Vec<String>,
    /// Number of calibration samples per source trace.
    #[serde(default)]
    pub shots: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Methods of the tables combined into a mixed table.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_methods: Vec<ScoreMethod>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// `L × N` expert scores for one method and one or more domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertScoreTable {
    pub method: ScoreMethod,
    pub domains: Vec<String>,
    pub dims: Dims,
    pub provenance: Provenance,
    pub scores: Vec<Vec<f64>>,
}

impl ExpertScoreTable {
    pub fn zeros(method: ScoreMethod, dims: Dims) -> Self {
        ExpertScoreTable {
            method,
            domains: Vec::new(),
            dims,
            provenance: Provenance::default(),
            scores: vec![vec![0.0; dims.num_experts]; dims.num_layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { num_layers: l, num_experts: n, top_k: k } = self.dims;
        if l == 0 || n == 0 || k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("invalid dims L={l} N={n} K={k}")));
        }
        if self.scores.len() != l || self.scores.iter().any(|row| row.len() != n) {
            return Err(Error::DimensionMismatch(format!("score table is not {l} x {n}")));
        }
        for (layer, row) in self.scores.iter().enumerate() {
            if let Some(i) = row.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "score [{layer}][{i}] = {} is not a finite nonnegative number",
                    row[i]
                )));
            }
        }
        Ok(())
    }

    /// Experts of `layer` ordered by descending score, ties toward lower index.
    pub fn ranking(&self, layer: usize) -> Vec<usize> {
        rank_desc(&self.scores[layer])
    }

    /// The `m` highest-scoring experts of `layer`, sorted by index.
    pub fn top_m(&self, layer: usize, m: usize) -> Vec<usize> {
        let mut top = self.ranking(layer);
        top.truncate(m);
        top.sort_unstable();
        top
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: ExpertScoreTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "score tables differ in dims: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Indices sorted by descending value, ties toward the lower index.
pub fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Output-aware importance `c = g · ‖e‖` of one activation.
pub fn expert_importance_term(gate: f64, out_norm: f64) -> Result<f64> {
    if !(gate > 0.0) {
        return Err(Error::InvalidArgument(format!("gate must be positive, got {gate}")));
    }
    if !(out_norm >= 0.0) {
        return Err(Error::InvalidArgument(format!("output norm must be nonnegative, got {out_norm}")));
    }
    Ok(gate * out_norm)
}

/// Running per-expert sums for one trace-based method.
#[derive(Debug, Clone)]
pub struct ScoreAccumulator {
    method: ScoreMethod,
    dims: Dims,
    sums: Vec<f64>,
}

impl ScoreAccumulator {
    pub fn new(method: ScoreMethod, dims: Dims) -> Result<Self> {
        if !method.is_trace_based() {
            return Err(Error::InvalidArgument(format!("{method} is not computed from traces")));
        }
        Ok(ScoreAccumulator {
            method,
            dims,
            sums: vec![0.0; dims.num_layers * dims.num_experts],
        })
    }

    pub fn add(&mut self, rec: &TraceRecord) {
        let base = rec.layer as usize * self.dims.num_experts;
        let s = f64::from(rec.contribution);
        for a in &rec.activations {
            let term = match self.method {
                ScoreMethod::Frequency => 1.0,
                ScoreMethod::Gating => f64::from(a.gate),
                // Stored activations always carry a positive gate.
                ScoreMethod::EasyEp => f64::from(a.gate) * f64::from(a.out_norm) * s,
                _ => unreachable!("checked in new"),
            };
            self.sums[base + a.expert as usize] += term;
        }
    }

    pub fn merge(&mut self, other: &ScoreAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
    }

    pub fn finish(self) -> ExpertScoreTable {
        let n = self.dims.num_experts;
        let mut t = ExpertScoreTable::zeros(self.method, self.dims);
        t.scores = self.sums.chunks_exact(n).map(<[f64]>::to_vec).collect();
        t
    }
}

/// Knobs for trace scoring.
pub struct ScoreOptions<'a> {
    pub workers: Workers,
    /// Records for which this returns false are skipped.
    pub filter: Option<&'a (dyn Fn(&TraceRecord) -> bool + Sync)>,
}

impl Default for ScoreOptions<'_> {
    fn default() -> Self {
        ScoreOptions { workers: Workers::ONE, filter: None }
    }
}

/// Scores a trace with a trace-based method.
pub fn score_trace(trace: &TraceFile, method: ScoreMethod, opts: &ScoreOptions) -> Result<ExpertScoreTable> {
    let dims = trace.dims();
    ScoreAccumulator::new(method, dims)?;
    let partials = map_shards(&trace.records, opts.workers, |_, chunk| {
        let mut acc = ScoreAccumulator::new(method, dims).expect("method checked");
        for rec in chunk {
            if opts.filter.map_or(true, |f| f(rec)) {
                acc.add(rec);
            }
        }
        acc
    });
    let mut parts = partials.into_iter();
    let mut total = parts.next().expect("at least one shard");
    for p in parts {
        total.merge(&p);
    }
    let mut table = total.finish();
    table.domains = vec![trace.header.domain.clone()];
    table.provenance.fingerprints = vec![format!("{:016x}", trace.header.fingerprint)];
    table.provenance.shots = vec![trace.header.num_samples()];
    Ok(table)
}

pub fn score_frequency(trace: &TraceFile) -> ExpertScoreTable {
    score_trace(trace, ScoreMethod::Frequency, &ScoreOptions::default()).expect("trace method")
}

pub fn score_gating(trace: &TraceFile) -> ExpertScoreTable {
    score_trace(trace, ScoreMethod::Gating, &ScoreOptions::default()).expect("trace method")
}

pub fn score_easy_ep(trace: &TraceFile) -> ExpertScoreTable {
    score_trace(trace, ScoreMethod::EasyEp, &ScoreOptions::default()).expect("trace method")
}

/// Seeded uniform scores in `[0, 1)`.
pub fn score_random(dims: Dims, seed: u64) -> ExpertScoreTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = ExpertScoreTable::zeros(ScoreMethod::Random, dims);
    for row in &mut t.scores {
        for s in row.iter_mut() {
            *s = rng.gen::<f64>();
        }
    }
    t.provenance.seed = Some(seed);
    t
}

/// Mixed-domain score: each table is normalized to sum 1 per layer, then
/// the normalized tables are added. A layer whose scores sum to zero
/// contributes `1/N` per expert and leaves a warning in the provenance.
pub fn score_mixed(tables: &[ExpertScoreTable]) -> Result<ExpertScoreTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidArgument("mixed scoring needs at least one table".into()))?;
    for t in tables {
        first.check_same_dims(t)?;
        t.validate()?;
        if t.method == ScoreMethod::Mixed {
            return Err(Error::InvalidArgument("cannot mix an already mixed table".into()));
        }
    }
    let dims = first.dims;
    let n = dims.num_experts;
    let mut out = ExpertScoreTable::zeros(ScoreMethod::Mixed, dims);
    for t in tables {
        for (layer, row) in t.scores.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for (acc, s) in out.scores[layer].iter_mut().zip(row) {
                    *acc += s / total;
                }
            } else {
                out.provenance.warnings.push(format!(
                    "domain {:?} has zero total score at layer {layer}; using uniform weights",
                    t.domains.join("+")
                ));
                for acc in out.scores[layer].iter_mut() {
                    *acc += 1.0 / n as f64;
                }
            }
        }
        out.domains.extend(t.domains.iter().cloned());
        out.provenance.fingerprints.extend(t.provenance.fingerprints.iter().cloned());
        out.provenance.shots.extend(t.provenance.shots.iter().copied());
        out.provenance.source_methods.push(t.method);
    }
    Ok(out)
}
