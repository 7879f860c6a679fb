//! Shared helpers for integration tests: planted-fixture construction, the
//! plant-strength sweep, and the localization measurements.
#![allow(dead_code)]

use expertlab::model::ModelConfig;
use expertlab::scoring::{score_easy_ep, score_gating, ExpertScoreTable};
use expertlab::synth::{gen_domain_stream, orthonormal_means, AlphaSweep, DomainSpec, PlantedFixture};
use expertlab::trace::{capture_trace, merge_traces, ExpertActivation, TraceFile, TraceHeader, TraceRecord};
use expertlab::{MoeModel, Workers};
use rand::seq::SliceRandom;
use rand::SeedableRng;

pub const PLANTED_PER_LAYER: usize = 8;
pub const DOMAIN_NAMES: [&str; 2] = ["alpha", "beta"];
pub const SPREAD: f64 = 0.3;
pub const MEAN_SEED: u64 = 77;
pub const PLANT_SEED: u64 = 91;
pub const PROBE_SEED: u64 = 5;
pub const PROBE_SAMPLES: usize = 25;
pub const TOKENS_PER_SAMPLE: usize = 512;

pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        num_experts: 32,
        top_k: 4,
        hidden_dim: 16,
        expert_inner_dim: 32,
        seed: 2024,
    }
}

/// Alpha grid: 0.25 steps up to 8.
pub fn alpha_grid() -> Vec<f64> {
    (1..=32).map(|i| i as f64 * 0.25).collect()
}

/// Fixture skeleton with every domain at strength `alpha`. Planted sets are
/// disjoint across domains and drawn per layer from a seeded shuffle.
pub fn candidate_fixture(alpha: f64) -> PlantedFixture {
    candidate_fixture_with(alpha, SPREAD, TOKENS_PER_SAMPLE)
}

pub fn candidate_fixture_with(alpha: f64, spread: f64, tokens_per_sample: usize) -> PlantedFixture {
    let cfg = fixture_config();
    let means = orthonormal_means(DOMAIN_NAMES.len(), cfg.hidden_dim, MEAN_SEED).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(PLANT_SEED);
    let mut planted = vec![Vec::new(); DOMAIN_NAMES.len()];
    for _ in 0..cfg.num_layers {
        let mut experts: Vec<usize> = (0..cfg.num_experts).collect();
        experts.shuffle(&mut rng);
        for (d, chunk) in experts.chunks(PLANTED_PER_LAYER).take(DOMAIN_NAMES.len()).enumerate() {
            let mut set = chunk.to_vec();
            set.sort_unstable();
            planted[d].push(set);
        }
    }
    let domains = DOMAIN_NAMES
        .iter()
        .zip(means)
        .zip(planted)
        .map(|((name, mean), planted)| DomainSpec {
            name: name.to_string(),
            cluster_mean: mean,
            cluster_spread: spread,
            planted,
            plant_strength: alpha,
        })
        .collect();
    PlantedFixture {
        config: cfg,
        tokens_per_sample,
        domains,
        alpha_sweep: AlphaSweep {
            grid: alpha_grid(),
            probe_samples: PROBE_SAMPLES,
            probe_seed: PROBE_SEED,
            selected: alpha,
        },
    }
}

pub fn capture(model: &MoeModel, fx: &PlantedFixture, domain: &DomainSpec, samples: usize, seed: u64) -> TraceFile {
    let stream = gen_domain_stream(domain, samples, fx.tokens_per_sample, seed).unwrap();
    capture_trace(model, &stream, &domain.name, Workers::ONE).unwrap()
}

/// True when, at every layer, the smallest planted gating score is at least
/// the largest non-planted one.
pub fn planted_dominate(table: &ExpertScoreTable, domain: &DomainSpec) -> bool {
    table.scores.iter().zip(&domain.planted).all(|(row, planted)| {
        let min_planted = planted.iter().map(|&e| row[e]).fold(f64::INFINITY, f64::min);
        let max_other = (0..row.len())
            .filter(|e| !planted.contains(e))
            .map(|e| row[e])
            .fold(f64::NEG_INFINITY, f64::max);
        min_planted >= max_other
    })
}

/// Whether every domain's planted experts dominate at strength `alpha`.
pub fn dominates_at(base: &PlantedFixture, alpha: f64) -> bool {
    let fx = base.with_strength(alpha);
    let model = fx.model().unwrap();
    fx.domains.iter().enumerate().all(|(i, d)| {
        let t = capture(&model, &fx, d, fx.alpha_sweep.probe_samples, fx.alpha_sweep.probe_seed + i as u64);
        planted_dominate(&score_gating(&t), d)
    })
}

/// Smallest grid strength with rank dominance, by brute force over the grid.
pub fn sweep_alpha(base: &PlantedFixture) -> Option<f64> {
    base.alpha_sweep.grid.iter().copied().find(|&a| dominates_at(base, a))
}

/// Fraction of planted experts found in the top-(planted count) per layer.
pub fn recovery_per_layer(table: &ExpertScoreTable, domain: &DomainSpec) -> Vec<f64> {
    domain
        .planted
        .iter()
        .enumerate()
        .map(|(l, planted)| {
            let top = table.top_m(l, planted.len());
            planted.iter().filter(|e| top.contains(e)).count() as f64 / planted.len() as f64
        })
        .collect()
}

/// EASY-EP table of the first `shots` samples of a stream (nested subsets).
pub fn shot_table(model: &MoeModel, fx: &PlantedFixture, domain: &DomainSpec, shots: usize, seed: u64) -> ExpertScoreTable {
    let stream = gen_domain_stream(domain, shots, fx.tokens_per_sample, seed).unwrap();
    let t = capture_trace(model, &stream, &domain.name, Workers::ONE).unwrap();
    score_easy_ep(&t)
}

/// Trace for `shots` samples built by merging single-sample traces of one
/// stream, so that smaller shot counts are prefixes of larger ones.
pub fn nested_traces(model: &MoeModel, fx: &PlantedFixture, domain: &DomainSpec, max_shots: usize, seed: u64) -> Vec<TraceFile> {
    let stream = gen_domain_stream(domain, max_shots, fx.tokens_per_sample, seed).unwrap();
    stream
        .iter()
        .map(|s| capture_trace(model, std::slice::from_ref(s), &domain.name, Workers::ONE).unwrap())
        .collect()
}

pub fn merged_prefix(traces: &[TraceFile], shots: usize) -> TraceFile {
    merge_traces(&traces[..shots]).unwrap()
}

/// `count` standard-normal tokens of width `dim`.
pub fn random_tokens(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    expertlab::synth::gaussian_tokens(count, dim, seed)
}

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 3,
        num_experts: 8,
        top_k: 2,
        hidden_dim: 6,
        expert_inner_dim: 10,
        seed,
    }
}

fn act(expert: u32, gate: f32, out_norm: f32) -> ExpertActivation {
    ExpertActivation { expert, gate, out_norm }
}

/// Three samples (2, 1 and 1 tokens) over 2 layers with N = 4, K = 2, with
/// gates and norms chosen so that every product is exact in binary.
pub fn handmade_trace() -> TraceFile {
    let rows: [(u32, u32, u32, [(u32, f32, f32); 2], f32); 8] = [
        (0, 0, 0, [(0, 0.75, 2.0), (1, 0.25, 4.0)], 0.5),
        (0, 0, 1, [(2, 0.5, 1.0), (3, 0.5, 3.0)], 0.25),
        (0, 1, 0, [(1, 0.625, 8.0), (0, 0.375, 0.5)], 1.0),
        (0, 1, 1, [(3, 0.875, 2.0), (2, 0.125, 16.0)], 0.125),
        (1, 0, 0, [(2, 0.5, 1.5), (3, 0.5, 2.5)], 1.5),
        (1, 0, 1, [(0, 0.75, 1.0), (2, 0.25, 2.0)], 0.0),
        (2, 0, 0, [(0, 0.5, 6.0), (3, 0.5, 0.25)], 0.75),
        (2, 0, 1, [(1, 0.9375, 4.0), (2, 0.0625, 32.0)], 2.0),
    ];
    TraceFile {
        header: TraceHeader {
            fingerprint: 0xfeed,
            num_layers: 2,
            num_experts: 4,
            top_k: 2,
            hidden_dim: 3,
            domain: "hand".into(),
            tokens_per_sample: vec![2, 1, 1],
        },
        records: rows
            .iter()
            .map(|&(sample_id, token_id, layer, acts, contribution)| TraceRecord {
                sample_id,
                token_id,
                layer,
                activations: acts.iter().map(|&(e, g, n)| act(e, g, n)).collect(),
                contribution,
            })
            .collect(),
    }
}

/// Frequency, gating and EASY-EP sums by explicit loops over raw records,
/// indexed `[layer][expert]`.
pub struct LoopTables {
    pub frequency: Vec<Vec<u64>>,
    pub gating: Vec<Vec<f64>>,
    pub easy_ep: Vec<Vec<f64>>,
}

pub fn loop_tables(trace: &TraceFile) -> LoopTables {
    let (l, n) = (trace.header.num_layers, trace.header.num_experts);
    let mut out = LoopTables {
        frequency: vec![vec![0; n]; l],
        gating: vec![vec![0.0; n]; l],
        easy_ep: vec![vec![0.0; n]; l],
    };
    for layer in 0..l {
        for expert in 0..n {
            for rec in &trace.records {
                if rec.layer as usize != layer {
                    continue;
                }
                for a in &rec.activations {
                    if a.expert as usize == expert {
                        out.frequency[layer][expert] += 1;
                        out.gating[layer][expert] += a.gate as f64;
                        out.easy_ep[layer][expert] += a.gate as f64 * a.out_norm as f64 * rec.contribution as f64;
                    }
                }
            }
        }
    }
    out
}

/// `|a - b| <= tol * max(|a|, |b|)`, with exact zeros equal.
pub fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

pub fn tables_close(a: &ExpertScoreTable, b: &ExpertScoreTable, tol: f64) -> bool {
    a.scores.len() == b.scores.len()
        && a.scores.iter().zip(&b.scores).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| close_rel(*p, *q, tol))
        })
}
