//! Perturbation-based expert selection for a single layer.
//!
//! A candidate keep set is scored by the squared L2 drift of the layer
//! output `h_tilde` against the unpruned layer, summed over calibration
//! inputs. Every evaluation goes through [`Evaluator::evaluate`], which
//! counts it, so reported evaluation totals are exact.

use std::sync::atomic::{AtomicU64, Ordering};

use itertools::Itertools;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::parallel::{map_shards, Workers};
use crate::scoring::rank_desc;

pub const DEFAULT_EVALUATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub strategy: SearchStrategy,
    pub layer: usize,
    pub m: usize,
    /// Sorted retained experts.
    pub keep: Vec<usize>,
    pub perturbation: f64,
    pub evaluations: u64,
}

/// `C(n, k)` exactly.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::from(0u8);
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u8);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Greedy evaluation count `Σ_{j=0}^{m-1} (n - j)`.
pub fn greedy_evaluations(n: usize, m: usize) -> u64 {
    (0..m).map(|j| (n - j) as u64).sum()
}

/// Shared state for scoring keep sets of one layer.
pub struct Evaluator<'a> {
    model: &'a MoeModel,
    layer: usize,
    calib: &'a [Vec<f64>],
    reference: Vec<Vec<f64>>,
    /// Full-model gate totals per expert on `calib`, used for greedy padding.
    gating: Vec<f64>,
    evaluations: AtomicU64,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a MoeModel, layer: usize, calib: &'a [Vec<f64>]) -> Result<Self> {
        if layer >= model.config().num_layers {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        if calib.is_empty() {
            return Err(Error::InvalidArgument("calibration set is empty".into()));
        }
        let mut gating = vec![0.0; model.config().num_experts];
        let mut reference = Vec::with_capacity(calib.len());
        for h in calib {
            let rec = model.layer_forward(layer, h)?;
            for &(e, g) in &rec.routing.selected {
                gating[e] += g;
            }
            reference.push(rec.output);
        }
        Ok(Evaluator {
            model,
            layer,
            calib,
            reference,
            gating,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn available(&self, keep: &[usize]) -> Vec<bool> {
        let base = &self.model.mask()[self.layer];
        let mut avail = vec![false; base.len()];
        for &e in keep {
            avail[e] = base[e];
        }
        avail
    }

    /// Summed squared output drift with only `keep` routable.
    pub fn evaluate(&self, keep: &[usize]) -> Result<f64> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let k = self.model.config().top_k;
        if let Some(&bad) = keep.iter().find(|&&e| e >= self.gating.len()) {
            return Err(Error::InvalidArgument(format!("expert {bad} out of range")));
        }
        let avail = self.available(keep);
        let usable = avail.iter().filter(|&&a| a).count();
        if usable < k {
            return Err(Error::TooFewExperts { layer: self.layer, available: usable, k });
        }
        let mut total = 0.0;
        for (h, full) in self.calib.iter().zip(&self.reference) {
            let rec = self.model.layer_forward_masked(self.layer, h, &avail)?;
            total += rec
                .output
                .iter()
                .zip(full)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }

    /// `set` extended to K experts with the highest-gating experts outside it.
    fn padded(&self, set: &[usize]) -> Vec<usize> {
        let k = self.model.config().top_k;
        if set.len() >= k {
            return set.to_vec();
        }
        let mask = &self.model.mask()[self.layer];
        let mut out = set.to_vec();
        for e in rank_desc(&self.gating) {
            if out.len() >= k {
                break;
            }
            if mask[e] && !set.contains(&e) {
                out.push(e);
            }
        }
        out.sort_unstable();
        out
    }
}

/// Perturbation of one keep set for `layer` over the layer inputs `calib`.
pub fn subset_perturbation(model: &MoeModel, layer: usize, keep: &[usize], calib: &[Vec<f64>]) -> Result<f64> {
    Evaluator::new(model, layer, calib)?.evaluate(keep)
}

/// Tries every m-subset of the layer's experts, up to `cap` evaluations.
/// Ties go to the lexicographically smallest subset.
pub fn exhaustive_search(
    model: &MoeModel,
    layer: usize,
    m: usize,
    calib: &[Vec<f64>],
    cap: u64,
    workers: Workers,
) -> Result<SearchResult> {
    let cfg = model.config();
    let n = cfg.num_experts;
    if m < cfg.top_k || m > n {
        return Err(Error::InvalidArgument(format!("m = {m} must lie in [{}, {n}]", cfg.top_k)));
    }
    let count = binomial(n, m);
    if count > BigUint::from(cap) {
        let magnitude = count.to_string().len() - 1;
        return Err(Error::SearchTooLarge(format!(
            "exhaustive search over C({n},{m}) = {count} subsets (over 10^{magnitude}) exceeds the cap of {cap} evaluations"
        )));
    }
    let eval = Evaluator::new(model, layer, calib)?;
    let subsets: Vec<Vec<usize>> = (0..n).combinations(m).collect();
    let best = map_shards(&subsets, workers, |_, chunk| {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for s in chunk {
            let v = eval.evaluate(s)?;
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, s.clone()));
            }
        }
        Ok::<_, Error>(best)
    })
    .into_iter()
    .try_fold(None::<(f64, Vec<usize>)>, |acc, shard| {
        let shard = shard?;
        Ok::<_, Error>(match (acc, shard) {
            (Some(a), Some(b)) => Some(if b.0 < a.0 { b } else { a }),
            (None, b) => b,
            (a, _) => a,
        })
    })?
    .expect("at least one subset");
    Ok(SearchResult {
        strategy: SearchStrategy::Exhaustive,
        layer,
        m,
        keep: best.1,
        perturbation: best.0,
        evaluations: eval.evaluations(),
    })
}

/// Grows the keep set one expert at a time, each step adding the candidate
/// whose inclusion gives the lowest perturbation (lowest index on ties).
/// While the set is smaller than K it is padded, for evaluation only, with
/// the highest-gating experts outside it.
pub fn greedy_search(
    model: &MoeModel,
    layer: usize,
    m: usize,
    calib: &[Vec<f64>],
    workers: Workers,
) -> Result<SearchResult> {
    let cfg = model.config();
    let n = cfg.num_experts;
    if m < cfg.top_k || m > n {
        return Err(Error::InvalidArgument(format!("m = {m} must lie in [{}, {n}]", cfg.top_k)));
    }
    let eval = Evaluator::new(model, layer, calib)?;
    let mut keep: Vec<usize> = Vec::with_capacity(m);
    let mut last = f64::INFINITY;
    for _ in 0..m {
        let candidates: Vec<usize> = (0..n).filter(|e| !keep.contains(e)).collect();
        let step = map_shards(&candidates, workers, |_, chunk| {
            let mut best: Option<(f64, usize)> = None;
            for &c in chunk {
                let mut trial = keep.clone();
                trial.push(c);
                trial.sort_unstable();
                let v = eval.evaluate(&eval.padded(&trial))?;
                if best.map_or(true, |(b, _)| v < b) {
                    best = Some((v, c));
                }
            }
            Ok::<_, Error>(best)
        });
        let mut best: Option<(f64, usize)> = None;
        for shard in step {
            if let Some((v, c)) = shard? {
                if best.map_or(true, |(b, _)| v < b) {
                    best = Some((v, c));
                }
            }
        }
        let (v, c) = best.expect("candidates remain while |keep| < m <= n");
        keep.push(c);
        keep.sort_unstable();
        last = v;
    }
    Ok(SearchResult {
        strategy: SearchStrategy::Greedy,
        layer,
        m,
        keep,
        perturbation: last,
        evaluations: eval.evaluations(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn model(n: usize, k: usize, seed: u64) -> MoeModel {
        build_model(ModelConfig {
            num_layers: 1,
            num_experts: n,
            top_k: k,
            hidden_dim: 4,
            expert_inner_dim: 6,
            seed,
        })
        .unwrap()
    }

    fn calib(count: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(8, 4), BigUint::from(70u32));
        assert_eq!(binomial(5, 0), BigUint::from(1u32));
        assert_eq!(binomial(3, 4), BigUint::from(0u32));
        assert!(binomial(256, 128) > BigUint::from(10u32).pow(75));
        assert!(binomial(256, 128) < BigUint::from(10u32).pow(76));
    }

    #[test]
    fn keep_all_has_zero_drift() {
        let m = model(6, 2, 1);
        let c = calib(5, 2);
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(subset_perturbation(&m, 0, &all, &c).unwrap(), 0.0);
    }

    #[test]
    fn never_selected_experts_do_not_matter() {
        let m = model(6, 2, 1);
        let c = calib(5, 2);
        let used: std::collections::BTreeSet<usize> = c
            .iter()
            .flat_map(|h| m.route(0, h).unwrap().experts().collect::<Vec<_>>())
            .collect();
        let keep: Vec<usize> = used.into_iter().collect();
        assert_eq!(subset_perturbation(&m, 0, &keep, &c).unwrap(), 0.0);
    }

    #[test]
    fn keep_below_k_rejected() {
        let m = model(6, 2, 1);
        assert!(matches!(
            subset_perturbation(&m, 0, &[3], &calib(2, 0)),
            Err(Error::TooFewExperts { .. })
        ));
    }

    #[test]
    fn evaluation_counts() {
        let m = model(8, 2, 4);
        let c = calib(6, 5);
        let ex = exhaustive_search(&m, 0, 4, &c, DEFAULT_EVALUATION_CAP, Workers::ONE).unwrap();
        assert_eq!(ex.evaluations, 70);
        let gr = greedy_search(&m, 0, 4, &c, Workers::ONE).unwrap();
        assert_eq!(gr.evaluations, 26);
        assert_eq!(greedy_evaluations(8, 4), 26);
        assert!(ex.perturbation <= gr.perturbation);
        assert_eq!(gr.keep.len(), 4);
        assert_eq!(gr.perturbation, subset_perturbation(&m, 0, &gr.keep, &c).unwrap());
    }

    #[test]
    fn exhaustive_is_optimal_against_spot_checks() {
        let m = model(8, 2, 9);
        let c = calib(6, 10);
        let ex = exhaustive_search(&m, 0, 3, &c, DEFAULT_EVALUATION_CAP, Workers::ONE).unwrap();
        for s in (0..8).combinations(3).step_by(5) {
            assert!(ex.perturbation <= subset_perturbation(&m, 0, &s, &c).unwrap());
        }
    }

    #[test]
    fn exhaustive_refuses_huge_search() {
        let m = model(256, 2, 1);
        let err = exhaustive_search(&m, 0, 128, &calib(1, 0), DEFAULT_EVALUATION_CAP, Workers::ONE).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::SearchTooLarge(_)));
        assert!(msg.contains("over 10^75"), "{msg}");
    }

    #[test]
    fn workers_do_not_change_results() {
        let m = model(8, 2, 21);
        let c = calib(6, 22);
        let a = greedy_search(&m, 0, 4, &c, Workers::ONE).unwrap();
        let b = greedy_search(&m, 0, 4, &c, Workers::new(4)).unwrap();
        assert_eq!(a, b);
        let a = exhaustive_search(&m, 0, 4, &c, DEFAULT_EVALUATION_CAP, Workers::ONE).unwrap();
        let b = exhaustive_search(&m, 0, 4, &c, DEFAULT_EVALUATION_CAP, Workers::new(4)).unwrap();
        assert_eq!(a, b);
    }
}
