//! Minimal instrumented mixture-of-experts runtime.
//!
//! Each layer is a router plus `N` two-matrix SiLU MLP experts. A token's
//! hidden state `h` is routed to the top-K available experts, their outputs
//! are combined with softmax gates into `h_bar`, and the layer emits
//! `h_tilde = h + h_bar`. There is no attention: tokens are raw vectors and
//! never interact.

mod io;

pub use io::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub expert_inner_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("hidden_dim", self.hidden_dim),
            ("expert_inner_dim", self.expert_inner_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::InvalidConfig(format!("{name} does not fit in u32")));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::InvalidConfig(format!(
                "top_k {} exceeds num_experts {}",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            num_layers: self.num_layers,
            num_experts: self.num_experts,
            top_k: self.top_k,
        }
    }
}

/// The `(L, N, K)` triple shared by traces, score tables and plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
}

/// One expert MLP: `e = W2 · silu(W1 · h)`, both matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `F × D`
    pub w1: Vec<f32>,
    /// `D × F`
    pub w2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    /// `N × D`, row `i` produces expert `i`'s logit.
    pub router: Vec<f32>,
    pub experts: Vec<Expert>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    config: ModelConfig,
    layers: Vec<MoeLayer>,
    /// `mask[l][i]` is true when expert `i` of layer `l` may be routed to.
    mask: Vec<Vec<bool>>,
}

/// The experts chosen for one token at one layer, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutcome {
    pub selected: Vec<(usize, f64)>,
}

impl RoutingOutcome {
    pub fn experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().map(|&(e, _)| e)
    }

    pub fn gates(&self) -> impl Iterator<Item = f64> + '_ {
        self.selected.iter().map(|&(_, g)| g)
    }

    /// Gate of `expert`, zero when it was not selected.
    pub fn gate_of(&self, expert: usize) -> f64 {
        self.selected
            .iter()
            .find(|&&(e, _)| e == expert)
            .map_or(0.0, |&(_, g)| g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerForwardRecord {
    pub input: Vec<f64>,
    pub routed_sum: Vec<f64>,
    pub output: Vec<f64>,
    pub routing: RoutingOutcome,
    /// `‖e_i‖` for each selected expert, aligned with `routing.selected`.
    pub expert_output_norms: Vec<f64>,
}

impl LayerForwardRecord {
    /// `Σ g_i ‖e_i‖`, the triangle-inequality bound on `‖h_bar‖`.
    pub fn weighted_norm_sum(&self) -> f64 {
        self.routing
            .gates()
            .zip(&self.expert_output_norms)
            .map(|(g, n)| g * n)
            .sum()
    }
}

/// Records for one token, one per layer.
pub type TokenRecords = Vec<LayerForwardRecord>;

pub fn build_model(config: ModelConfig) -> Result<MoeModel> {
    config.validate()?;
    let ModelConfig {
        num_layers: l,
        num_experts: n,
        hidden_dim: d,
        expert_inner_dim: f,
        ..
    } = config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let router_dist = Normal::new(0.0f32, (1.0 / d as f32).sqrt()).expect("finite std");
    let w1_dist = router_dist;
    let w2_dist = Normal::new(0.0f32, (1.0 / f as f32).sqrt()).expect("finite std");
    let mut draw = |len: usize, dist: &Normal<f32>| -> Vec<f32> {
        (0..len).map(|_| dist.sample(&mut rng)).collect()
    };
    let layers = (0..l)
        .map(|_| {
            let router = draw(n * d, &router_dist);
            let experts = (0..n)
                .map(|_| Expert {
                    w1: draw(f * d, &w1_dist),
                    w2: draw(d * f, &w2_dist),
                })
                .collect();
            MoeLayer { router, experts }
        })
        .collect();
    Ok(MoeModel {
        config,
        layers,
        mask: vec![vec![true; n]; l],
    })
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn dot(row: &[f32], h: &[f64]) -> f64 {
    row.iter().zip(h).map(|(&w, &x)| f64::from(w) * x).sum()
}

fn matvec(m: &[f32], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Indices of the `k` largest logits among `available`, highest first, ties
/// broken toward the lower index. Returns `None` if fewer than `k` qualify.
fn top_k(logits: &[f64], available: &[bool], k: usize) -> Option<Vec<usize>> {
    let mut idx: Vec<usize> = (0..logits.len()).filter(|&i| available[i]).collect();
    if idx.len() < k {
        return None;
    }
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Some(idx)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Top-K softmax gating over a precomputed logit vector.
pub fn route_logits(logits: &[f64], available: &[bool], k: usize) -> Option<RoutingOutcome> {
    let chosen = top_k(logits, available, k)?;
    let sel_logits: Vec<f64> = chosen.iter().map(|&i| logits[i]).collect();
    let gates = softmax(&sel_logits);
    Some(RoutingOutcome {
        selected: chosen.into_iter().zip(gates).collect(),
    })
}

impl MoeModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> Dims {
        self.config.dims()
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> &MoeLayer {
        &self.layers[layer]
    }

    pub fn layers_mut(&mut self) -> &mut [MoeLayer] {
        &mut self.layers
    }

    pub fn mask(&self) -> &[Vec<bool>] {
        &self.mask
    }

    pub fn available_count(&self, layer: usize) -> usize {
        self.mask[layer].iter().filter(|&&a| a).count()
    }

    /// Assemble a model from raw parts, checking every shape invariant.
    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<MoeLayer>,
        mask: Vec<Vec<bool>>,
    ) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            num_layers: l,
            num_experts: n,
            hidden_dim: d,
            expert_inner_dim: f,
            ..
        } = config;
        if layers.len() != l || mask.len() != l {
            return Err(Error::DimensionMismatch(format!(
                "expected {l} layers, got {} layers and {} mask rows",
                layers.len(),
                mask.len()
            )));
        }
        for (li, layer) in layers.iter().enumerate() {
            let ok = layer.router.len() == n * d
                && layer.experts.len() == n
                && layer
                    .experts
                    .iter()
                    .all(|e| e.w1.len() == f * d && e.w2.len() == d * f);
            if !ok {
                return Err(Error::DimensionMismatch(format!(
                    "layer {li} matrices do not match config"
                )));
            }
        }
        let model = MoeModel {
            config,
            layers,
            mask: Vec::new(),
        };
        model.with_mask(mask)
    }

    /// Returns a copy of the model with the given expert mask.
    pub fn with_mask(mut self, mask: Vec<Vec<bool>>) -> Result<Self> {
        let (l, n, k) = (
            self.config.num_layers,
            self.config.num_experts,
            self.config.top_k,
        );
        if mask.len() != l || mask.iter().any(|row| row.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "mask must be {l} x {n}"
            )));
        }
        for (layer, row) in mask.iter().enumerate() {
            let available = row.iter().filter(|&&a| a).count();
            if available < k {
                return Err(Error::TooFewExperts { layer, available, k });
            }
        }
        self.mask = mask;
        Ok(self)
    }

    fn check_input(&self, layer: usize, h: &[f64]) -> Result<()> {
        if layer >= self.config.num_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range (L = {})",
                self.config.num_layers
            )));
        }
        if h.len() != self.config.hidden_dim {
            return Err(Error::DimensionMismatch(format!(
                "hidden state has length {}, expected {}",
                h.len(),
                self.config.hidden_dim
            )));
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                token: 0,
                layer,
                what: "input hidden state".into(),
            });
        }
        Ok(())
    }

    /// Router logits `z_i = row_i · h` for every expert of `layer`.
    pub fn logits(&self, layer: usize, h: &[f64]) -> Vec<f64> {
        matvec(&self.layers[layer].router, self.config.hidden_dim, h)
    }

    pub fn route(&self, layer: usize, h: &[f64]) -> Result<RoutingOutcome> {
        self.check_input(layer, h)?;
        self.route_masked(layer, h, &self.mask[layer])
    }

    /// Routes with an explicit availability mask instead of the model's own.
    pub fn route_masked(
        &self,
        layer: usize,
        h: &[f64],
        available: &[bool],
    ) -> Result<RoutingOutcome> {
        let k = self.config.top_k;
        let logits = self.logits(layer, h);
        route_logits(&logits, available, k).ok_or_else(|| Error::TooFewExperts {
            layer,
            available: available.iter().filter(|&&a| a).count(),
            k,
        })
    }

    /// Output of a single expert on `h`.
    pub fn expert_output(&self, layer: usize, expert: usize, h: &[f64]) -> Vec<f64> {
        let e = &self.layers[layer].experts[expert];
        let inner: Vec<f64> = matvec(&e.w1, self.config.hidden_dim, h)
            .into_iter()
            .map(silu)
            .collect();
        matvec(&e.w2, self.config.expert_inner_dim, &inner)
    }

    pub fn layer_forward(&self, layer: usize, h: &[f64]) -> Result<LayerForwardRecord> {
        self.check_input(layer, h)?;
        self.layer_forward_masked(layer, h, &self.mask[layer])
    }

    /// Layer forward pass with an explicit availability mask.
    pub fn layer_forward_masked(
        &self,
        layer: usize,
        h: &[f64],
        available: &[bool],
    ) -> Result<LayerForwardRecord> {
        let routing = self.route_masked(layer, h, available)?;
        let mut routed_sum = vec![0.0; h.len()];
        let mut norms = Vec::with_capacity(routing.selected.len());
        for &(expert, gate) in &routing.selected {
            let e = self.expert_output(layer, expert, h);
            norms.push(l2_norm(&e));
            for (acc, x) in routed_sum.iter_mut().zip(&e) {
                *acc += gate * x;
            }
        }
        let output: Vec<f64> = h.iter().zip(&routed_sum).map(|(a, b)| a + b).collect();
        if output.iter().any(|x| !x.is_finite()) || norms.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                token: 0,
                layer,
                what: "expert output".into(),
            });
        }
        Ok(LayerForwardRecord {
            input: h.to_vec(),
            routed_sum,
            output,
            routing,
            expert_output_norms: norms,
        })
    }

    /// Passes one token through every layer in order.
    pub fn forward_token(&self, token: &[f64]) -> Result<TokenRecords> {
        let mut h = token.to_vec();
        let mut out = Vec::with_capacity(self.config.num_layers);
        for layer in 0..self.config.num_layers {
            let rec = self.layer_forward(layer, &h)?;
            h.clone_from(&rec.output);
            out.push(rec);
        }
        Ok(out)
    }

    /// Forwards every token independently; `result[t][l]` is the record for
    /// token `t` at layer `l`. Errors carry the failing token index.
    pub fn forward_sequence(&self, tokens: &[Vec<f64>]) -> Result<Vec<TokenRecords>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("token sequence is empty".into()));
        }
        tokens
            .iter()
            .enumerate()
            .map(|(t, tok)| self.forward_token(tok).map_err(|e| at_token(e, t)))
            .collect()
    }

    /// Layer inputs `h^l` seen by `layer` for each token under this model.
    pub fn layer_inputs(&self, tokens: &[Vec<f64>], layer: usize) -> Result<Vec<Vec<f64>>> {
        tokens
            .iter()
            .enumerate()
            .map(|(t, tok)| {
                let mut h = tok.clone();
                for l in 0..layer {
                    h = self.layer_forward(l, &h).map_err(|e| at_token(e, t))?.output;
                }
                self.check_input(layer, &h)?;
                Ok(h)
            })
            .collect()
    }
}

fn at_token(e: Error, token: usize) -> Error {
    match e {
        Error::NonFinite { layer, what, .. } => Error::NonFinite { token, layer, what },
        other => other,
    }
}
