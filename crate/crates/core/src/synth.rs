//! Synthetic multi-domain data and models with planted domain experts.
//!
//! Each domain is a Gaussian cluster of token vectors. Planting adds
//! `α · unit(cluster_mean)` to a planted expert's router row, on top of the
//! row's own random initialization, so tokens of that domain favour the
//! planted experts while the random part still varies which of them win on
//! each token.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, MoeModel};

/// Maximum allowed cosine between two domains' cluster means.
pub const MAX_MEAN_COSINE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub cluster_mean: Vec<f64>,
    pub cluster_spread: f64,
    /// Planted experts per layer.
    pub planted: Vec<Vec<usize>>,
    pub plant_strength: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (crate::model::l2_norm(a) * crate::model::l2_norm(b))
}

/// Checks every domain against `config` and against each other.
pub fn validate_domains(config: &ModelConfig, domains: &[DomainSpec]) -> Result<()> {
    config.validate()?;
    for d in domains {
        let bad = |what: String| Error::InvalidArgument(format!("domain {:?}: {what}", d.name));
        if d.cluster_mean.len() != config.hidden_dim {
            return Err(bad(format!(
                "mean has length {}, hidden_dim is {}",
                d.cluster_mean.len(),
                config.hidden_dim
            )));
        }
        if crate::model::l2_norm(&d.cluster_mean) < crate::trace::ZERO_NORM
            || d.cluster_mean.iter().any(|x| !x.is_finite())
        {
            return Err(bad("mean must be a finite nonzero vector".into()));
        }
        if !(d.cluster_spread >= 0.0 && d.cluster_spread.is_finite()) {
            return Err(bad(format!("spread {} is invalid", d.cluster_spread)));
        }
        if !(d.plant_strength >= 0.0 && d.plant_strength.is_finite()) {
            return Err(bad(format!("plant strength {} is invalid", d.plant_strength)));
        }
        if d.planted.len() != config.num_layers {
            return Err(bad(format!("planted sets for {} layers", d.planted.len())));
        }
        if d.planted.iter().flatten().any(|&e| e >= config.num_experts) {
            return Err(bad("planted expert out of range".into()));
        }
    }
    for (i, a) in domains.iter().enumerate() {
        for b in &domains[i + 1..] {
            let c = cosine(&a.cluster_mean, &b.cluster_mean);
            if c >= MAX_MEAN_COSINE {
                return Err(Error::InvalidArgument(format!(
                    "domains {:?} and {:?} have mean cosine {c:.3} >= {MAX_MEAN_COSINE}",
                    a.name, b.name
                )));
            }
        }
    }
    Ok(())
}

/// Builds a random model with `seed`, then plants every domain's experts.
pub fn gen_planted_model(config: ModelConfig, domains: &[DomainSpec], seed: u64) -> Result<MoeModel> {
    validate_domains(&config, domains)?;
    let mut model = build_model(ModelConfig { seed, ..config })?;
    let d = config.hidden_dim;
    for spec in domains {
        let norm = crate::model::l2_norm(&spec.cluster_mean);
        for (layer, planted) in model.layers_mut().iter_mut().zip(&spec.planted) {
            for &e in planted {
                let row = &mut layer.router[e * d..(e + 1) * d];
                for (w, m) in row.iter_mut().zip(&spec.cluster_mean) {
                    *w += (spec.plant_strength * m / norm) as f32;
                }
            }
        }
    }
    Ok(model)
}

/// `num_samples` sequences of `tokens_per_sample` vectors drawn from the
/// domain's cluster.
pub fn gen_domain_stream(
    domain: &DomainSpec,
    num_samples: usize,
    tokens_per_sample: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if num_samples == 0 || tokens_per_sample == 0 {
        return Err(Error::InvalidArgument("stream needs at least one sample and one token".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_samples)
        .map(|_| {
            (0..tokens_per_sample)
                .map(|_| {
                    domain
                        .cluster_mean
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + domain.cluster_spread * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// `count` tokens of width `dim` with independent standard-normal entries.
pub fn gaussian_tokens(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

/// `count` mutually orthogonal unit vectors of length `dim`, from a seeded
/// Gaussian draw followed by Gram-Schmidt.
pub fn orthonormal_means(count: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::InvalidArgument(format!("cannot fit {count} orthogonal means in {dim} dims")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = crate::model::l2_norm(&v);
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(out)
}

/// A committed, reproducible planted-expert setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFixture {
    pub config: ModelConfig,
    pub tokens_per_sample: usize,
    pub domains: Vec<DomainSpec>,
    /// How the plant strength was chosen.
    pub alpha_sweep: AlphaSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    /// Candidate strengths, ascending.
    pub grid: Vec<f64>,
    /// Calibration samples per domain used to test dominance.
    pub probe_samples: usize,
    pub probe_seed: u64,
    /// Smallest grid value at which every domain's planted experts dominate.
    pub selected: f64,
}

impl PlantedFixture {
    pub fn model(&self) -> Result<MoeModel> {
        gen_planted_model(self.config, &self.domains, self.config.seed)
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("fixture has no domain {name:?}")))
    }

    /// Same fixture with every domain's plant strength set to `alpha`.
    pub fn with_strength(&self, alpha: f64) -> Self {
        let mut f = self.clone();
        f.domains.iter_mut().for_each(|d| d.plant_strength = alpha);
        f
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PlantedFixture = serde_json::from_str(text)?;
        validate_domains(&f.config, &f.domains)?;
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// The committed default fixture: two orthogonal domains, 8 disjoint
/// planted experts per layer each.
pub fn default_fixture() -> PlantedFixture {
    PlantedFixture::from_json(include_str!("../fixtures/planted.json")).expect("committed fixture is valid")
}
