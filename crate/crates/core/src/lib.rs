//! Expert-pruning toolkit for mixture-of-experts models.
//!
//! The crate runs a small deterministic MoE ([`model`]), records calibration
//! traces of its routing ([`trace`]), turns traces into per-expert importance
//! scores ([`scoring`]), builds and applies pruning plans ([`pruning`]), and
//! provides perturbation-search baselines ([`perturb`]), synthetic
//! multi-domain fixtures ([`synth`]) and diagnostics ([`analysis`]).

pub mod analysis;
mod checksum;
mod codec;
pub mod error;
pub mod model;
pub mod parallel;
pub mod perturb;
pub mod pruning;
pub mod scoring;
pub mod synth;
pub mod trace;

pub use checksum::digest64;
pub use error::{Error, Result};
pub use model::{build_model, Dims, LayerForwardRecord, ModelConfig, MoeModel, RoutingOutcome};
pub use parallel::Workers;
pub use pruning::{apply_plan, PruningPlan};
pub use scoring::{ExpertScoreTable, ScoreMethod};
pub use trace::{capture_trace, TraceFile};
