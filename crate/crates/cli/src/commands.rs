//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use expertlab::analysis::{
    bound_audit, importance_scatter, overlap_matrix, overlap_top_m, similarity_map, write_overlap_csv,
    write_overlap_matrix_csv, write_scatter_csv, write_similarity_csv,
};
use expertlab::model::{read_model, write_model};
use expertlab::perturb::{exhaustive_search, greedy_search, SearchResult};
use expertlab::pruning::{
    domain_exclusive_experts, plan_from_search, plan_layerwise_dynamic, plan_remove_set, plan_top_m,
};
use expertlab::scoring::{score_mixed, score_random, score_trace, ScoreOptions};
use expertlab::synth::{default_fixture, gaussian_tokens, gen_domain_stream, PlantedFixture};
use expertlab::trace::{merge_traces, read_trace, read_trace_jsonl, write_trace, write_trace_jsonl, TRACE_MAGIC};
use expertlab::{apply_plan, build_model, Error, ExpertScoreTable, ModelConfig, PruningPlan, ScoreMethod, TraceFile, Workers};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::exit::{ExitKind, Failure};

pub type CmdResult = Result<(), Failure>;

pub const STREAM_FORMAT: &str = "expertlab-stream";
pub const STREAM_VERSION: u32 = 1;

/// Token stream file written by `gen-domain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFile {
    pub format: String,
    pub version: u32,
    pub domain: String,
    pub samples: Vec<Vec<Vec<f64>>>,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::io(path, e))
}

fn format_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(ExitKind::Format, format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn finish(path: &Path, mut w: impl Write) -> CmdResult {
    w.flush().map_err(|e| io_failure(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_failure(path, e))? + "\n";
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// JSON to `out`, or to stdout when no path is given.
fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> CmdResult {
    match out {
        Some(path) => write_json(path, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(ExitKind::Format, e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn note(msg: impl std::fmt::Display) {
    eprintln!("{msg}");
}

pub fn load_fixture(spec: &str) -> Result<PlantedFixture, Failure> {
    if spec == "default" {
        Ok(default_fixture())
    } else {
        Ok(PlantedFixture::read(spec)?)
    }
}

pub fn read_stream(path: &Path) -> Result<StreamFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let stream: StreamFile = serde_json::from_str(&text).map_err(|e| format_failure(path, e))?;
    if stream.format != STREAM_FORMAT {
        return Err(format_failure(path, format!("format {:?} is not {STREAM_FORMAT:?}", stream.format)));
    }
    if stream.version != STREAM_VERSION {
        return Err(Error::VersionMismatch { kind: "stream", found: stream.version, expected: STREAM_VERSION }.into());
    }
    Ok(stream)
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// Reads either trace rendering, telling them apart by the binary magic.
pub fn load_trace(path: &Path) -> Result<TraceFile, Failure> {
    let mut head = [0u8; 4];
    let n = File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(|e| io_failure(path, e))?;
    if n == 4 && head == TRACE_MAGIC {
        Ok(read_trace(path)?)
    } else {
        Ok(read_trace_jsonl(path)?)
    }
}

fn save_trace(trace: &TraceFile, path: &Path) -> CmdResult {
    if is_jsonl(path) {
        write_trace_jsonl(trace, path)?;
    } else {
        write_trace(trace, path)?;
    }
    Ok(())
}

fn read_tables(paths: &[PathBuf]) -> Result<Vec<ExpertScoreTable>, Failure> {
    paths.iter().map(|p| ExpertScoreTable::read(p).map_err(Failure::from)).collect()
}

fn to_usize(v: u64) -> usize {
    usize::try_from(v).unwrap_or(usize::MAX)
}

pub fn gen_model(a: &GenModel) -> CmdResult {
    let model = match &a.fixture {
        Some(spec) => {
            let mut fx = load_fixture(spec)?;
            if let Some(alpha) = a.strength {
                fx = fx.with_strength(alpha);
            }
            fx.model()?
        }
        None => build_model(ModelConfig {
            num_layers: a.layers,
            num_experts: a.experts,
            top_k: a.top_k,
            hidden_dim: a.hidden,
            expert_inner_dim: a.inner,
            seed: a.seed,
        })?,
    };
    write_model(&model, &a.out)?;
    note(format_args!("wrote {} (fingerprint {:016x})", a.out.display(), model.fingerprint()));
    Ok(())
}

pub fn gen_domain(a: &GenDomain) -> CmdResult {
    let fx = load_fixture(&a.fixture)?;
    let domain = fx.domain(&a.domain)?;
    let tokens = a.tokens.map_or(fx.tokens_per_sample, to_usize);
    let samples = gen_domain_stream(domain, to_usize(a.samples), tokens, a.seed)?;
    let stream = StreamFile {
        format: STREAM_FORMAT.into(),
        version: STREAM_VERSION,
        domain: domain.name.clone(),
        samples,
    };
    write_json(&a.out, &stream)
}

pub fn trace(a: &TraceCmd, workers: Workers) -> CmdResult {
    let model = read_model(&a.model)?;
    let stream = read_stream(&a.stream)?;
    let trace = expertlab::capture_trace(&model, &stream.samples, &stream.domain, workers)?;
    save_trace(&trace, &a.out)?;
    note(format_args!("wrote {} ({} records)", a.out.display(), trace.records.len()));
    Ok(())
}

pub fn convert(a: &Convert) -> CmdResult {
    save_trace(&load_trace(&a.input)?, &a.out)
}

fn method_of(m: MethodArg) -> ScoreMethod {
    match m {
        MethodArg::Random => ScoreMethod::Random,
        MethodArg::Frequency => ScoreMethod::Frequency,
        MethodArg::Gating => ScoreMethod::Gating,
        MethodArg::EasyEp => ScoreMethod::EasyEp,
        MethodArg::Mixed => ScoreMethod::Mixed,
    }
}

pub fn score(a: &Score, workers: Workers) -> CmdResult {
    let skip = a.skip_first_tokens;
    let filter = move |r: &expertlab::trace::TraceRecord| r.token_id >= skip;
    let opts = ScoreOptions { workers, filter: (skip > 0).then_some(&filter as _) };
    let method = method_of(a.method);
    let table = match method {
        ScoreMethod::Random => {
            let dims = if let Some(m) = &a.model {
                read_model(m)?.dims()
            } else if let Some(t) = a.trace.first() {
                load_trace(t)?.dims()
            } else {
                ExpertScoreTable::read(&a.table[0])?.dims
            };
            score_random(dims, a.seed)
        }
        ScoreMethod::Mixed => {
            let base = method_of(a.base_method);
            if !base.is_trace_based() {
                return Err(Failure::usage(format!("--base-method {base} is not computed from traces")));
            }
            let mut tables = read_tables(&a.table)?;
            for t in &a.trace {
                tables.push(score_trace(&load_trace(t)?, base, &opts)?);
            }
            score_mixed(&tables)?
        }
        _ => {
            if a.trace.is_empty() || !a.table.is_empty() {
                return Err(Failure::usage(format!("--method {method} takes one or more --trace and no --table")));
            }
            let traces = a.trace.iter().map(|t| load_trace(t)).collect::<Result<Vec<_>, _>>()?;
            let trace = if traces.len() == 1 { traces.into_iter().next().unwrap() } else { merge_traces(&traces)? };
            score_trace(&trace, method, &opts)?
        }
    };
    table.write(&a.out)?;
    Ok(())
}

fn single_table(tables: Vec<ExpertScoreTable>, what: &str) -> Result<ExpertScoreTable, Failure> {
    if tables.len() != 1 {
        return Err(Failure::usage(format!("{what} takes exactly one --table, got {}", tables.len())));
    }
    Ok(tables.into_iter().next().unwrap())
}

pub fn plan(a: &Plan) -> CmdResult {
    let tables = read_tables(&a.table)?;
    let plan = if let Some(domain) = &a.remove_exclusive {
        let m = to_usize(a.m.expect("clap requires --m"));
        if tables.len() < 2 {
            return Err(Failure::usage("--remove-exclusive needs at least two --table files"));
        }
        let idx = tables
            .iter()
            .position(|t| t.domains.len() == 1 && &t.domains[0] == domain)
            .ok_or_else(|| Failure::new(ExitKind::Invalid, format!("no single-domain table for {domain:?}")))?;
        let exclusive = domain_exclusive_experts(&tables, m)?;
        plan_remove_set(tables[0].dims, &exclusive[idx])?
    } else if let Some(ratio) = a.ratio {
        plan_layerwise_dynamic(&single_table(tables, "--ratio")?, ratio)?
    } else {
        plan_top_m(&single_table(tables, "--m")?, to_usize(a.m.expect("clap requires --m or --ratio")))?
    };
    plan.write(&a.out)?;
    note(format_args!("wrote {} ({} experts kept)", a.out.display(), plan.kept_count()));
    Ok(())
}

pub fn apply(a: &Apply) -> CmdResult {
    let model = read_model(&a.model)?;
    let plan = PruningPlan::read(&a.plan)?;
    let pruned = apply_plan(&model, &plan)?;
    write_model(&pruned, &a.out)?;
    Ok(())
}

pub fn overlap(a: &Overlap) -> CmdResult {
    let tables = read_tables(&a.table)?;
    let m = to_usize(a.m);
    match tables.len() {
        0 | 1 => Err(Failure::usage("overlap needs at least two --table files")),
        2 => {
            let report = overlap_top_m(&tables[0], &tables[1], m)?;
            if let Some(path) = &a.csv {
                let mut w = create(path)?;
                write_overlap_csv(&report, &mut w)?;
                finish(path, w)?;
            }
            emit(a.out.as_deref(), &report)
        }
        _ => {
            let matrix = overlap_matrix(&tables, m)?;
            if let Some(path) = &a.csv {
                let mut w = create(path)?;
                write_overlap_matrix_csv(&matrix, &mut w)?;
                finish(path, w)?;
            }
            emit(a.out.as_deref(), &matrix)
        }
    }
}

pub fn perturb(a: &Perturb, workers: Workers) -> CmdResult {
    let model = read_model(&a.model)?;
    let tokens: Vec<Vec<f64>> = read_stream(&a.stream)?.samples.concat();
    let layers: Vec<usize> = match a.layer {
        Some(l) => vec![l],
        None => (0..model.config().num_layers).collect(),
    };
    let m = to_usize(a.m);
    let mut results: Vec<SearchResult> = Vec::with_capacity(layers.len());
    for layer in layers {
        if layer >= model.config().num_layers {
            return Err(Failure::new(ExitKind::Invalid, format!("layer {layer} out of range")));
        }
        let calib = model.layer_inputs(&tokens, layer)?;
        let r = match a.strategy {
            StrategyArg::Exhaustive => exhaustive_search(&model, layer, m, &calib, a.cap, workers)?,
            StrategyArg::Greedy => greedy_search(&model, layer, m, &calib, workers)?,
        };
        note(format_args!("layer {layer}: perturbation {:.6e} after {} evaluations", r.perturbation, r.evaluations));
        results.push(r);
    }
    write_json(&a.out, &results)?;
    if let Some(path) = &a.plan_out {
        plan_from_search(model.dims(), &results)?.write(path)?;
    }
    Ok(())
}

pub fn audit(a: &Audit, workers: Workers) -> CmdResult {
    let model = read_model(&a.model)?;
    let tokens = match (&a.stream, a.random_tokens) {
        (Some(path), _) => read_stream(path)?.samples.concat(),
        (None, Some(n)) => gaussian_tokens(to_usize(n), model.config().hidden_dim, a.seed),
        (None, None) => unreachable!("clap requires a token source"),
    };
    emit(a.out.as_deref(), &bound_audit(&model, &tokens, workers)?)
}

pub fn report(a: &Report) -> CmdResult {
    let trace = load_trace(&a.trace)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| io_failure(&a.out_dir, e))?;
    let tables = read_tables(&a.table)?;
    let m = to_usize(a.m);
    let mut written = Vec::new();

    if tables.len() == 1 {
        return Err(Failure::usage("report needs zero or at least two --table files"));
    }
    if tables.len() >= 2 {
        let path = a.out_dir.join("overlap.csv");
        let mut w = create(&path)?;
        if tables.len() == 2 {
            write_overlap_csv(&overlap_top_m(&tables[0], &tables[1], m)?, &mut w)?;
        } else {
            write_overlap_matrix_csv(&overlap_matrix(&tables, m)?, &mut w)?;
        }
        finish(&path, w)?;
        written.push(path);
    }
    for layer in 0..trace.header.num_layers {
        let path = a.out_dir.join(format!("scatter_layer{layer}.csv"));
        let mut w = create(&path)?;
        write_scatter_csv(&importance_scatter(&trace, layer)?, &mut w)?;
        finish(&path, w)?;
        written.push(path);
    }
    let path = a.out_dir.join(format!("similarity_sample{}.csv", a.sample));
    let mut w = create(&path)?;
    write_similarity_csv(&similarity_map(&trace, a.sample)?, trace.header.num_layers, &mut w)?;
    finish(&path, w)?;
    written.push(path);

    for p in written {
        note(format_args!("wrote {}", p.display()));
    }
    Ok(())
}
