//! Pruning plans: which experts each layer keeps.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, MoeModel};
use crate::perturb::{SearchResult, SearchStrategy};
use crate::scoring::{rank_desc, ExpertScoreTable, ScoreMethod};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanTarget {
    /// Same number of experts kept in every layer.
    TopM(usize),
    /// Fraction of all `L·N` experts kept, distributed across layers.
    GlobalRatio(f64),
    /// Complement of an explicit removal set.
    Removal,
    /// Chosen by perturbation search.
    Search(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanProvenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_method: Option<ScoreMethod>,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub fingerprints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub version: u32,
    pub dims: Dims,
    pub method: String,
    pub target: PlanTarget,
    pub provenance: PlanProvenance,
    /// Sorted retained expert indices per layer.
    pub keep: Vec<Vec<usize>>,
}

impl PruningPlan {
    fn new(dims: Dims, method: impl Into<String>, target: PlanTarget, keep: Vec<Vec<usize>>) -> Result<Self> {
        let plan = PruningPlan {
            version: PLAN_VERSION,
            dims,
            method: method.into(),
            target,
            provenance: PlanProvenance::default(),
            keep,
        };
        plan.validate()?;
        Ok(plan)
    }

    fn with_table(mut self, table: &ExpertScoreTable) -> Self {
        self.provenance = PlanProvenance {
            score_method: Some(table.method),
            domains: table.domains.clone(),
            fingerprints: table.provenance.fingerprints.clone(),
        };
        self
    }

    pub fn keep_all(dims: Dims) -> Self {
        let keep = vec![(0..dims.num_experts).collect(); dims.num_layers];
        PruningPlan::new(dims, "keep_all", PlanTarget::TopM(dims.num_experts), keep).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { num_layers: l, num_experts: n, top_k: k } = self.dims;
        if self.version != PLAN_VERSION {
            return Err(Error::VersionMismatch { kind: "plan", found: self.version, expected: PLAN_VERSION });
        }
        if self.keep.len() != l {
            return Err(Error::DimensionMismatch(format!("plan has {} layers, dims say {l}", self.keep.len())));
        }
        for (layer, keep) in self.keep.iter().enumerate() {
            if keep.len() < k {
                return Err(Error::TooFewExperts { layer, available: keep.len(), k });
            }
            if keep.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("layer {layer} keep set is not strictly sorted")));
            }
            if keep.last().is_some_and(|&e| e >= n) {
                return Err(Error::InvalidArgument(format!("layer {layer} keeps an expert outside [0, {n})")));
            }
        }
        Ok(())
    }

    /// Per-layer availability mask.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.keep
            .iter()
            .map(|keep| {
                let mut row = vec![false; self.dims.num_experts];
                keep.iter().for_each(|&e| row[e] = true);
                row
            })
            .collect()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: PruningPlan = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
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
}

/// Keeps the `m` highest-scoring experts of every layer.
pub fn plan_top_m(table: &ExpertScoreTable, m: usize) -> Result<PruningPlan> {
    table.validate()?;
    let Dims { num_layers: l, num_experts: n, top_k: k } = table.dims;
    if m < k || m > n {
        return Err(Error::InvalidArgument(format!("m = {m} must lie in [{k}, {n}]")));
    }
    let keep = (0..l).map(|layer| table.top_m(layer, m)).collect();
    Ok(PruningPlan::new(table.dims, "top_m", PlanTarget::TopM(m), keep)?.with_table(table))
}

/// Layer-wise dynamic budget.
///
/// Scores are normalized to sum 1 within each layer (uniform when a layer
/// sums to zero), all experts are ranked globally by normalized score (ties
/// toward the lower expert index, then the lower layer), and the top `⌈ratio·L·N⌉` are kept. Any
/// layer left with fewer than K experts is topped up with its own next-best
/// experts; an equal number of the globally lowest-ranked kept experts is
/// then evicted from layers that hold more than K.
pub fn plan_layerwise_dynamic(table: &ExpertScoreTable, ratio: f64) -> Result<PruningPlan> {
    table.validate()?;
    let Dims { num_layers: l, num_experts: n, top_k: k } = table.dims;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} must lie in (0, 1]")));
    }
    let total = l * n;
    let budget = ((ratio * total as f64).ceil() as usize).min(total);
    if ratio * (total as f64) < (l * k) as f64 {
        return Err(Error::InvalidArgument(format!(
            "budget of {budget} experts cannot give each of {l} layers at least K = {k}"
        )));
    }

    let normalized: Vec<Vec<f64>> = table
        .scores
        .iter()
        .map(|row| {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter().map(|s| s / sum).collect()
            } else {
                vec![1.0 / n as f64; n]
            }
        })
        .collect();
    let mut global: Vec<(usize, usize)> = (0..l).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    global.sort_by(|&(la, ea), &(lb, eb)| {
        normalized[lb][eb]
            .total_cmp(&normalized[la][ea])
            .then((ea, la).cmp(&(eb, lb)))
    });

    let mut kept = vec![vec![false; n]; l];
    let mut counts = vec![0usize; l];
    for &(layer, e) in &global[..budget] {
        kept[layer][e] = true;
        counts[layer] += 1;
    }

    let mut added = 0;
    for layer in 0..l {
        for e in rank_desc(&normalized[layer]) {
            if counts[layer] >= k {
                break;
            }
            if !kept[layer][e] {
                kept[layer][e] = true;
                counts[layer] += 1;
                added += 1;
            }
        }
    }
    for &(layer, e) in global.iter().rev() {
        if added == 0 {
            break;
        }
        if kept[layer][e] && counts[layer] > k {
            kept[layer][e] = false;
            counts[layer] -= 1;
            added -= 1;
        }
    }

    let keep = kept
        .iter()
        .map(|row| (0..n).filter(|&e| row[e]).collect())
        .collect();
    Ok(PruningPlan::new(table.dims, "layerwise_dynamic", PlanTarget::GlobalRatio(ratio), keep)?.with_table(table))
}

/// For each table, per layer, the experts in its top-m but in no other
/// table's top-m. `result[table][layer]` is sorted.
pub fn domain_exclusive_experts(tables: &[ExpertScoreTable], m: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    if tables.len() < 2 {
        return Err(Error::InvalidArgument("domain-exclusive experts need at least two tables".into()));
    }
    let dims = tables[0].dims;
    for t in tables {
        t.validate()?;
        if t.dims != dims {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", t.dims, dims)));
        }
    }
    if m == 0 || m > dims.num_experts {
        return Err(Error::InvalidArgument(format!("m = {m} must lie in [1, {}]", dims.num_experts)));
    }
    let tops: Vec<Vec<BTreeSet<usize>>> = tables
        .iter()
        .map(|t| (0..dims.num_layers).map(|l| t.top_m(l, m).into_iter().collect()).collect())
        .collect();
    Ok((0..tables.len())
        .map(|ti| {
            (0..dims.num_layers)
                .map(|l| {
                    tops[ti][l]
                        .iter()
                        .copied()
                        .filter(|e| !tops.iter().enumerate().any(|(tj, other)| tj != ti && other[l].contains(e)))
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Keeps everything except `remove[layer]`.
pub fn plan_remove_set(dims: Dims, remove: &[Vec<usize>]) -> Result<PruningPlan> {
    if remove.len() != dims.num_layers {
        return Err(Error::DimensionMismatch(format!(
            "removal sets for {} layers, model has {}",
            remove.len(),
            dims.num_layers
        )));
    }
    let keep = remove
        .iter()
        .enumerate()
        .map(|(layer, rm)| {
            if let Some(&bad) = rm.iter().find(|&&e| e >= dims.num_experts) {
                return Err(Error::InvalidArgument(format!("layer {layer}: expert {bad} out of range")));
            }
            let rm: BTreeSet<usize> = rm.iter().copied().collect();
            let keep: Vec<usize> = (0..dims.num_experts).filter(|e| !rm.contains(e)).collect();
            if keep.len() < dims.top_k {
                return Err(Error::TooFewExperts { layer, available: keep.len(), k: dims.top_k });
            }
            Ok(keep)
        })
        .collect::<Result<Vec<_>>>()?;
    PruningPlan::new(dims, "remove_set", PlanTarget::Removal, keep)
}

/// Plan keeping each layer's perturbation-search result; `results` must
/// hold one search per layer, in layer order, all with the same strategy and m.
pub fn plan_from_search(dims: Dims, results: &[SearchResult]) -> Result<PruningPlan> {
    if results.len() != dims.num_layers || results.iter().enumerate().any(|(l, r)| r.layer != l) {
        return Err(Error::InvalidArgument(format!(
            "need one search result per layer in order, got layers {:?}",
            results.iter().map(|r| r.layer).collect::<Vec<_>>()
        )));
    }
    let (strategy, m) = (results[0].strategy, results[0].m);
    if results.iter().any(|r| r.strategy != strategy || r.m != m) {
        return Err(Error::InvalidArgument("search results mix strategies or sizes".into()));
    }
    let method = match strategy {
        SearchStrategy::Exhaustive => "perturb_exhaustive",
        SearchStrategy::Greedy => "perturb_greedy",
    };
    PruningPlan::new(dims, method, PlanTarget::Search(m), results.iter().map(|r| r.keep.clone()).collect())
}

/// Returns a copy of `model` routing only to the plan's kept experts.
pub fn apply_plan(model: &MoeModel, plan: &PruningPlan) -> Result<MoeModel> {
    plan.validate()?;
    if plan.dims != model.dims() {
        return Err(Error::DimensionMismatch(format!(
            "plan dims {:?} do not match model dims {:?}",
            plan.dims,
            model.dims()
        )));
    }
    model.clone().with_mask(plan.mask())
}
