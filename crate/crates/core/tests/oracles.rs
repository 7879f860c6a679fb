//! Library results checked against independent, deliberately naive
//! recomputations.

mod common;

use std::collections::BTreeSet;

use common::*;
use expertlab::analysis::{overlap_matrix, reconstruction_error};
use expertlab::model::{Expert, MoeLayer};
use expertlab::perturb::{exhaustive_search, greedy_search, subset_perturbation, DEFAULT_EVALUATION_CAP};
use expertlab::pruning::{apply_plan, domain_exclusive_experts, plan_layerwise_dynamic, plan_remove_set};
use expertlab::scoring::{score_easy_ep, score_frequency, score_gating, ExpertScoreTable, ScoreAccumulator, ScoreMethod};
use expertlab::synth::{gen_domain_stream, gen_planted_model, DomainSpec};
use expertlab::trace::{capture_trace, capture_trace_observed, read_trace_jsonl, TraceFile};
use expertlab::{build_model, Dims, ModelConfig, MoeModel, Workers};
use proptest::prelude::*;

// ---------------------------------------------------------------- scoring

#[test]
fn handmade_trace_matches_loop_oracle() {
    let trace = handmade_trace();
    trace.validate().unwrap();
    let oracle = loop_tables(&trace);
    let freq = score_frequency(&trace);
    let gating = score_gating(&trace);
    let easy = score_easy_ep(&trace);
    for l in 0..2 {
        for e in 0..4 {
            assert_eq!(freq.scores[l][e], oracle.frequency[l][e] as f64);
            assert!((gating.scores[l][e] - oracle.gating[l][e]).abs() <= 1e-12);
            assert!((easy.scores[l][e] - oracle.easy_ep[l][e]).abs() <= 1e-12);
        }
    }
    // Spot values worked out by hand.
    assert_eq!(freq.scores[0], vec![3.0, 2.0, 1.0, 2.0]);
    assert_eq!(easy.scores[0][0], 0.75 * 2.0 * 0.5 + 0.375 * 0.5 * 1.0 + 0.5 * 6.0 * 0.75);
    assert_eq!(easy.scores[1][0], 0.0);
}

#[test]
fn online_scoring_is_bit_identical_to_trace_scoring() {
    let fx = candidate_fixture_with(1.5, SPREAD, 32);
    let model = fx.model().unwrap();
    let stream = gen_domain_stream(&fx.domains[0], 6, 32, 3).unwrap();
    let dims = model.dims();
    for (method, offline) in [
        (ScoreMethod::Frequency, score_frequency as fn(&TraceFile) -> ExpertScoreTable),
        (ScoreMethod::Gating, score_gating),
        (ScoreMethod::EasyEp, score_easy_ep),
    ] {
        let mut acc = ScoreAccumulator::new(method, dims).unwrap();
        let trace = capture_trace_observed(&model, &stream, "alpha", Workers::new(3), |r| acc.add(r)).unwrap();
        let online = acc.finish();
        let from_trace = offline(&trace);
        for (a, b) in online.scores.iter().flatten().zip(from_trace.scores.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{method}");
        }
    }
}

#[test]
fn jsonl_written_by_hand_is_accepted() {
    let text = r#"{"format":"moet-jsonl","version":1,"domain":"ext","fingerprint":"00000000000000ff","num_layers":2,"num_experts":4,"top_k":2,"hidden_dim":8,"tokens_per_sample":[1],"exporter":"hooks"}
{"sample":0,"token":0,"layer":0,"experts":[2,0],"gates":[0.7,0.3],"out_norms":[1.5,0.25],"s":0.125}

{"sample":0,"token":0,"layer":1,"experts":[1,3],"gates":[0.5,0.5],"out_norms":[2.0,4.0],"s":0.5}
"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    std::fs::write(&path, text).unwrap();
    let t = read_trace_jsonl(&path).unwrap();
    assert_eq!(t.header.fingerprint, 255);
    let f = score_frequency(&t);
    assert!(f.scores.iter().all(|row| row.iter().sum::<f64>() == 2.0));
    let bad = text.replace("\"gates\":[0.5,0.5]", "\"gates\":[0.5,0.2]");
    std::fs::write(&path, bad).unwrap();
    assert!(read_trace_jsonl(&path).is_err());
}

// ---------------------------------------------------------------- pruning

/// Layer-wise dynamic selection written out longhand: each entry's global
/// rank is the number of entries that beat it.
fn dynamic_oracle(scores: &[Vec<f64>], k: usize, ratio: f64) -> Vec<Vec<usize>> {
    let (l, n) = (scores.len(), scores[0].len());
    let norm: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|x| if s > 0.0 { x / s } else { 1.0 / n as f64 }).collect()
        })
        .collect();
    let beats = |(la, ea): (usize, usize), (lb, eb): (usize, usize)| {
        norm[la][ea] > norm[lb][eb] || (norm[la][ea] == norm[lb][eb] && (ea, la) < (eb, lb))
    };
    let all: Vec<(usize, usize)> = (0..l).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    let rank = |x: (usize, usize)| all.iter().filter(|&&y| beats(y, x)).count();
    let budget = (ratio * (l * n) as f64).ceil() as usize;
    let mut keep: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); l];
    for &x in &all {
        if rank(x) < budget {
            keep[x.0].insert(x.1);
        }
    }
    let mut added = 0;
    for layer in 0..l {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&e| (0..n).filter(|&o| norm[layer][o] > norm[layer][e] || (norm[layer][o] == norm[layer][e] && o < e)).count());
        for e in order {
            if keep[layer].len() < k && keep[layer].insert(e) {
                added += 1;
            }
        }
    }
    let mut by_rank = all.clone();
    by_rank.sort_by_key(|&x| std::cmp::Reverse(rank(x)));
    for (layer, e) in by_rank {
        if added > 0 && keep[layer].len() > k && keep[layer].remove(&e) {
            added -= 1;
        }
    }
    keep.into_iter().map(|s| s.into_iter().collect()).collect()
}

fn table(dims: Dims, scores: Vec<Vec<f64>>) -> ExpertScoreTable {
    let mut t = ExpertScoreTable::zeros(ScoreMethod::EasyEp, dims);
    t.scores = scores;
    t
}

#[test]
fn dynamic_plan_hand_example() {
    let dims = Dims { num_layers: 2, num_experts: 4, top_k: 1 };
    let scores = vec![vec![8.0, 1.0, 1.0, 0.0], vec![3.0, 3.0, 3.0, 1.0]];
    let oracle = dynamic_oracle(&scores, 1, 0.5);
    let plan = plan_layerwise_dynamic(&table(dims, scores), 0.5).unwrap();
    assert_eq!(plan.keep, oracle);
    assert_eq!(plan.keep.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 3]);
}

#[test]
fn dynamic_plan_top_up_example() {
    // The global cut leaves layer 1 with two experts; it is topped up with
    // its expert 2 and layer 2 gives back its lowest-ranked expert.
    let dims = Dims { num_layers: 3, num_experts: 4, top_k: 3 };
    let scores = vec![vec![1.0, 1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0, 0.0], vec![1.0; 4]];
    let oracle = dynamic_oracle(&scores, 3, 0.75);
    let plan = plan_layerwise_dynamic(&table(dims, scores), 0.75).unwrap();
    assert_eq!(plan.keep, oracle);
    assert_eq!(plan.keep, vec![vec![0, 1, 2]; 3]);
}

proptest! {
    #[test]
    fn dynamic_plan_matches_oracle(
        rows in prop::collection::vec(prop::collection::vec(0u32..6, 5), 3),
        k in 1usize..=2,
        ratio in 0.4f64..=1.0,
    ) {
        let scores: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        let dims = Dims { num_layers: 3, num_experts: 5, top_k: k };
        let plan = plan_layerwise_dynamic(&table(dims, scores.clone()), ratio).unwrap();
        prop_assert_eq!(plan.keep, dynamic_oracle(&scores, k, ratio));
    }
}

fn three_tables() -> Vec<ExpertScoreTable> {
    let dims = Dims { num_layers: 1, num_experts: 6, top_k: 1 };
    vec![
        table(dims, vec![vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]]),
        table(dims, vec![vec![1.0, 6.0, 5.0, 4.0, 0.0, 0.0]]),
        table(dims, vec![vec![0.0, 0.0, 0.0, 5.0, 6.0, 4.0]]),
    ]
}

#[test]
fn exclusive_sets_match_set_algebra() {
    let tables = three_tables();
    let tops: Vec<BTreeSet<usize>> = tables.iter().map(|t| t.top_m(0, 3).into_iter().collect()).collect();
    let ex = domain_exclusive_experts(&tables, 3).unwrap();
    for i in 0..3 {
        let others: BTreeSet<usize> = (0..3).filter(|&j| j != i).flat_map(|j| tops[j].iter().copied()).collect();
        let expect: Vec<usize> = tops[i].difference(&others).copied().collect();
        assert_eq!(ex[i][0], expect);
    }
    assert_eq!(ex, vec![vec![vec![0]], vec![vec![]], vec![vec![4, 5]]]);
}

#[test]
fn overlap_matrix_matches_set_algebra() {
    let tables = three_tables();
    let tops: Vec<BTreeSet<usize>> = tables.iter().map(|t| t.top_m(0, 3).into_iter().collect()).collect();
    let mat = overlap_matrix(&tables, 3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let shared = tops[i].intersection(&tops[j]).count();
            assert_eq!(mat.values[i][j], shared as f64 / 3.0);
        }
    }
    assert_eq!(mat.values[0][2], 0.0);
}

// ------------------------------------------------------- scalar forward pass

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `e = W2 · silu(W1 · h)` by explicit index arithmetic.
fn expert_out(m: &MoeModel, layer: usize, e: usize, h: &[f64]) -> Vec<f64> {
    let (d, f) = (m.config().hidden_dim, m.config().expert_inner_dim);
    let ex = &m.layer(layer).experts[e];
    let mut inner = vec![0.0; f];
    for r in 0..f {
        for c in 0..d {
            inner[r] += ex.w1[r * d + c] as f64 * h[c];
        }
        inner[r] = silu(inner[r]);
    }
    let mut out = vec![0.0; d];
    for r in 0..d {
        for c in 0..f {
            out[r] += ex.w2[r * f + c] as f64 * inner[c];
        }
    }
    out
}

/// Layer output with routing restricted to `allowed`.
fn layer_out(m: &MoeModel, layer: usize, h: &[f64], allowed: &[usize]) -> Vec<f64> {
    let (d, k) = (m.config().hidden_dim, m.config().top_k);
    let router = &m.layer(layer).router;
    let logit = |e: usize| (0..d).map(|c| router[e * d + c] as f64 * h[c]).sum::<f64>();
    let mut order = allowed.to_vec();
    order.sort_by(|&a, &b| logit(b).partial_cmp(&logit(a)).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    let z: Vec<f64> = order.iter().map(|&e| logit(e)).collect();
    let mx = z.iter().copied().fold(f64::MIN, f64::max);
    let denom: f64 = z.iter().map(|x| (x - mx).exp()).sum();
    let mut out = h.to_vec();
    for (&e, zi) in order.iter().zip(&z) {
        let g = (zi - mx).exp() / denom;
        for (o, x) in out.iter_mut().zip(expert_out(m, layer, e, h)) {
            *o += g * x;
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn perturbation_matches_two_term_sum() {
    let cfg = ModelConfig { num_layers: 1, num_experts: 4, top_k: 1, hidden_dim: 3, expert_inner_dim: 4, seed: 12 };
    let m = build_model(cfg).unwrap();
    let calib = random_tokens(2, 3, 40);
    let all = [0, 1, 2, 3];
    let keep = [0, 1];
    let terms: Vec<f64> = calib.iter().map(|h| sq_dist(&layer_out(&m, 0, h, &all), &layer_out(&m, 0, h, &keep))).collect();
    let oracle = terms[0] + terms[1];
    assert!(oracle > 0.0, "instance should route outside the keep set");
    let got = subset_perturbation(&m, 0, &keep, &calib).unwrap();
    assert!(close_rel(got, oracle, 1e-12), "{got} vs {oracle}");
}

#[test]
fn reconstruction_error_matches_scalar_oracle() {
    let cfg = ModelConfig { num_layers: 2, num_experts: 4, top_k: 2, hidden_dim: 3, expert_inner_dim: 4, seed: 8 };
    let full = build_model(cfg).unwrap();
    let pruned = apply_plan(&full, &plan_remove_set(full.dims(), &[vec![3], vec![0]]).unwrap()).unwrap();
    let tokens = random_tokens(5, 3, 9);
    let keeps = [vec![0, 1, 2], vec![1, 2, 3]];
    let mut oracle = [0.0; 2];
    for tok in &tokens {
        let mut h = tok.clone();
        for layer in 0..2 {
            let out = layer_out(&full, layer, &h, &[0, 1, 2, 3]);
            oracle[layer] += sq_dist(&out, &layer_out(&full, layer, &h, &keeps[layer])) / tokens.len() as f64;
            h = out;
        }
    }
    let got = reconstruction_error(&full, &pruned, &tokens).unwrap();
    assert!(oracle.iter().all(|&x| x > 0.0));
    for (g, o) in got.iter().zip(&oracle) {
        assert!(close_rel(*g, *o, 1e-12), "{g} vs {o}");
    }
}

// --------------------------------------------------------------- perturbation

#[test]
fn greedy_usually_finds_the_exhaustive_optimum() {
    // Toy layer with the fixture's widths; paired runs over 20 seeds found
    // 15 exact matches when this threshold was set.
    let mut matches = 0;
    for seed in 0..20u64 {
        let cfg = ModelConfig { num_layers: 1, num_experts: 8, top_k: 2, hidden_dim: 16, expert_inner_dim: 32, seed };
        let m = build_model(cfg).unwrap();
        let calib = random_tokens(64, 16, 1000 + seed);
        let ex = exhaustive_search(&m, 0, 4, &calib, DEFAULT_EVALUATION_CAP, Workers::ONE).unwrap();
        let gr = greedy_search(&m, 0, 4, &calib, Workers::ONE).unwrap();
        assert!(ex.perturbation <= gr.perturbation);
        matches += usize::from(ex.keep == gr.keep);
    }
    assert!(matches >= 10, "greedy matched exhaustive on {matches}/20");
}

#[test]
fn superset_of_keep_can_increase_drift() {
    // Full routing picks expert 0. Keeping {1} reroutes to expert 1, whose
    // output equals expert 0's; adding expert 2 reroutes to it instead and
    // the output moves far away.
    let cfg = ModelConfig { num_layers: 1, num_experts: 3, top_k: 1, hidden_dim: 2, expert_inner_dim: 2, seed: 0 };
    let eye = vec![1.0, 0.0, 0.0, 1.0];
    let expert = |w2: Vec<f32>| Expert { w1: eye.clone(), w2 };
    let layer = MoeLayer {
        router: vec![3.0, 0.0, 1.0, 0.0, 2.0, 0.0],
        experts: vec![expert(eye.clone()), expert(eye.clone()), expert(vec![-5.0, 0.0, 0.0, 0.0])],
    };
    let m = MoeModel::from_parts(cfg, vec![layer], vec![vec![true; 3]]).unwrap();
    let calib = vec![vec![1.0, 0.0]];
    let small = subset_perturbation(&m, 0, &[1], &calib).unwrap();
    let large = subset_perturbation(&m, 0, &[1, 2], &calib).unwrap();
    assert_eq!(small, 0.0);
    assert!(large > 1.0, "{large}");
}

// ------------------------------------------------------------------ synthlab

#[test]
fn strong_planting_gives_rank_dominance() {
    let base = candidate_fixture(0.0);
    let cfg = base.config;
    let plain = build_model(cfg).unwrap();
    let domain = base.domains[0].clone();
    let probe = gen_domain_stream(&domain, 4, 64, 1).unwrap();
    let (mut total, mut count) = (0.0, 0usize);
    for tok in probe.iter().flatten() {
        for z in plain.logits(0, tok) {
            total += z.abs();
            count += 1;
        }
    }
    let alpha = 10.0 * total / count as f64;
    let strong = DomainSpec { plant_strength: alpha, ..domain };
    let model = gen_planted_model(cfg, std::slice::from_ref(&strong), cfg.seed).unwrap();
    let stream = gen_domain_stream(&strong, 10, 64, 2).unwrap();
    let trace = capture_trace(&model, &stream, "alpha", Workers::ONE).unwrap();
    assert!(planted_dominate(&score_gating(&trace), &strong));
    assert!(!planted_dominate(&score_gating(&capture_trace(&plain, &stream, "alpha", Workers::ONE).unwrap()), &strong));
}
