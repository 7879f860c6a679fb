//! Diagnostics over score tables, traces and models.
//!
//! CSV layouts written by this module:
//!
//! * overlap: `layer,overlap` with one row per layer and a final
//!   `all,<model-wide>` row
//! * overlap matrix: `label,<label_0>,...,<label_k>` then one row per table
//! * scatter: `expert,activations,gating_score,mean_importance`
//! * similarity map: `token,layer_0,...,layer_{L-1}` holding `s` values

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_norm, MoeModel};
use crate::parallel::{map_shards, Workers};
use crate::scoring::ExpertScoreTable;
use crate::trace::TraceFile;

/// Relative tolerance used by [`bound_audit`].
pub const BOUND_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub labels: (String, String),
    pub m: usize,
    pub per_layer: Vec<f64>,
    /// Unweighted mean of `per_layer`.
    pub model_wide: f64,
}

pub fn table_label(t: &ExpertScoreTable) -> String {
    format!("{}:{}", t.method, t.domains.join("+"))
}

/// Fraction of shared experts between the two tables' top-m sets, per layer.
pub fn overlap_top_m(a: &ExpertScoreTable, b: &ExpertScoreTable, m: usize) -> Result<OverlapReport> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    let (k, n) = (a.dims.top_k, a.dims.num_experts);
    if m < k || m > n {
        return Err(Error::InvalidArgument(format!("m = {m} must lie in [{k}, {n}]")));
    }
    let per_layer: Vec<f64> = (0..a.dims.num_layers)
        .map(|l| {
            let ta = a.top_m(l, m);
            let tb = b.top_m(l, m);
            let shared = ta.iter().filter(|e| tb.binary_search(e).is_ok()).count();
            shared as f64 / m as f64
        })
        .collect();
    let model_wide = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(OverlapReport {
        labels: (table_label(a), table_label(b)),
        m,
        per_layer,
        model_wide,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub m: usize,
    /// Model-wide overlaps; symmetric with unit diagonal.
    pub values: Vec<Vec<f64>>,
}

pub fn overlap_matrix(tables: &[ExpertScoreTable], m: usize) -> Result<OverlapMatrix> {
    if tables.len() < 2 {
        return Err(Error::InvalidArgument("overlap matrix needs at least two tables".into()));
    }
    let k = tables.len();
    let mut values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = overlap_top_m(&tables[i], &tables[j], m)?.model_wide;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(OverlapMatrix {
        labels: tables.iter().map(table_label).collect(),
        m,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    /// Number of (token, layer) pairs checked.
    pub checked: usize,
    pub violations: usize,
    /// Largest `‖h_bar‖ / Σ g‖e‖` seen.
    pub max_ratio: f64,
}

/// Checks `‖h_bar‖ ≤ Σ g_i ‖e_i‖` on every (token, layer) of a forward pass.
/// A pair with both sides below `1e-12` counts as ratio 1.
pub fn bound_audit(model: &MoeModel, tokens: &[Vec<f64>], workers: Workers) -> Result<BoundAudit> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("no tokens to audit".into()));
    }
    let parts = map_shards(tokens, workers, |_, chunk| {
        let mut audit = BoundAudit { checked: 0, violations: 0, max_ratio: 0.0 };
        for tok in chunk {
            for rec in model.forward_token(tok)? {
                let bound = rec.weighted_norm_sum();
                let actual = l2_norm(&rec.routed_sum);
                let ratio = if bound < 1e-12 && actual < 1e-12 { 1.0 } else { actual / bound };
                if actual > bound + BOUND_TOLERANCE * (1.0 + bound) {
                    audit.violations += 1;
                }
                audit.checked += 1;
                audit.max_ratio = audit.max_ratio.max(ratio);
            }
        }
        Ok::<_, Error>(audit)
    });
    let mut total = BoundAudit { checked: 0, violations: 0, max_ratio: 0.0 };
    for p in parts {
        let p = p?;
        total.checked += p.checked;
        total.violations += p.violations;
        total.max_ratio = total.max_ratio.max(p.max_ratio);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub expert: usize,
    pub activations: usize,
    /// Sum of gates.
    pub gating_score: f64,
    /// Mean of `g · ‖e‖` over the expert's activations.
    pub mean_importance: f64,
}

/// Gating score against mean output-aware importance for each expert of
/// `layer` that was activated at least once.
pub fn importance_scatter(trace: &TraceFile, layer: usize) -> Result<Vec<ScatterRow>> {
    let dims = trace.dims();
    if layer >= dims.num_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    let n = dims.num_experts;
    let mut count = vec![0usize; n];
    let mut gate = vec![0.0f64; n];
    let mut imp = vec![0.0f64; n];
    for rec in trace.records.iter().filter(|r| r.layer as usize == layer) {
        for a in &rec.activations {
            let e = a.expert as usize;
            count[e] += 1;
            gate[e] += f64::from(a.gate);
            imp[e] += f64::from(a.gate) * f64::from(a.out_norm);
        }
    }
    Ok((0..n)
        .filter(|&e| count[e] > 0)
        .map(|e| ScatterRow {
            expert: e,
            activations: count[e],
            gating_score: gate[e],
            mean_importance: imp[e] / count[e] as f64,
        })
        .collect())
}

/// Stored token contributions of one sample as a `T × L` matrix.
pub fn similarity_map(trace: &TraceFile, sample_id: u32) -> Result<Vec<Vec<f32>>> {
    let tokens = *trace
        .header
        .tokens_per_sample
        .get(sample_id as usize)
        .ok_or(Error::UnknownSample(sample_id))?;
    let l = trace.header.num_layers;
    let mut map = vec![vec![0.0f32; l]; tokens as usize];
    for rec in trace.sample_records(sample_id) {
        map[rec.token_id as usize][rec.layer as usize] = rec.contribution;
    }
    Ok(map)
}

/// Mean over tokens of `‖h_tilde_full - h_tilde_pruned‖²` per layer, with
/// each layer fed the full model's input so that layers are scored
/// independently.
pub fn reconstruction_error(full: &MoeModel, pruned: &MoeModel, tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    if full.config() != pruned.config() {
        return Err(Error::DimensionMismatch("models have different configs".into()));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("no tokens".into()));
    }
    let l = full.config().num_layers;
    let mut sums = vec![0.0; l];
    for tok in tokens {
        let recs = full.forward_token(tok)?;
        for (layer, rec) in recs.iter().enumerate() {
            let p = pruned.layer_forward(layer, &rec.input)?;
            sums[layer] += rec
                .output
                .iter()
                .zip(&p.output)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    Ok(sums.into_iter().map(|s| s / tokens.len() as f64).collect())
}

pub fn write_overlap_csv<W: Write>(report: &OverlapReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "overlap"])?;
    for (l, v) in report.per_layer.iter().enumerate() {
        w.write_record([l.to_string(), v.to_string()])?;
    }
    w.write_record(["all".to_string(), report.model_wide.to_string()])?;
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_overlap_matrix_csv<W: Write>(matrix: &OverlapMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["label".to_string()];
    head.extend(matrix.labels.iter().cloned());
    w.write_record(&head)?;
    for (label, row) in matrix.labels.iter().zip(&matrix.values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_scatter_csv<W: Write>(rows: &[ScatterRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["expert", "activations", "gating_score", "mean_importance"])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_similarity_csv<W: Write>(map: &[Vec<f32>], num_layers: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["token".to_string()];
    head.extend((0..num_layers).map(|l| format!("layer_{l}")));
    w.write_record(&head)?;
    for (t, row) in map.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(f32::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
