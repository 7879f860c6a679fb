//! Versioned binary model file.
//!
//! ```text
//! "MOEP" | version u32 | L N K D F (u32 each) | seed u64
//! per layer: router (N×D f32), then for each available expert W1 (F×D) and W2 (D×F)
//! mask: L×N bytes (1 = available)
//! checksum u64
//! ```
//!
//! Masked experts' matrices are not stored; on load they come back as zeros.

use std::path::Path;

use super::{Expert, ModelConfig, MoeLayer, MoeModel};
use crate::codec::{self, Writer};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"MOEP";
pub const MODEL_VERSION: u32 = 1;

const KIND: &str = "model";
const HEADER_BODY: usize = 5 * 4 + 8;

impl MoeModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        for v in [c.num_layers, c.num_experts, c.top_k, c.hidden_dim, c.expert_inner_dim] {
            w.u32(v as u32);
        }
        w.u64(c.seed);
        for (layer, mask) in self.layers.iter().zip(&self.mask) {
            w.f32s(&layer.router);
            for (e, &avail) in layer.experts.iter().zip(mask) {
                if avail {
                    w.f32s(&e.w1);
                    w.f32s(&e.w2);
                }
            }
        }
        for row in &self.mask {
            for &a in row {
                w.u8(u8::from(a));
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = codec::open(KIND, data, MODEL_MAGIC, MODEL_VERSION, HEADER_BODY)?;
        let config = ModelConfig {
            num_layers: r.usize32()?,
            num_experts: r.usize32()?,
            top_k: r.usize32()?,
            hidden_dim: r.usize32()?,
            expert_inner_dim: r.usize32()?,
            seed: r.u64()?,
        };
        config.validate().map_err(|e| r.malformed(e.to_string()))?;
        let ModelConfig {
            num_layers: l,
            num_experts: n,
            hidden_dim: d,
            expert_inner_dim: f,
            ..
        } = config;

        // The mask sits at the end of the body and decides which matrices exist.
        let mask_len = l * n;
        let rest = r.rest();
        if rest.len() < mask_len {
            return Err(Error::Truncated { kind: KIND, detail: "missing expert mask".into() });
        }
        let mask_bytes = &rest[rest.len() - mask_len..];
        let mut mask = Vec::with_capacity(l);
        for row in mask_bytes.chunks_exact(n) {
            let row = row
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(r.malformed(format!("mask byte {other}"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            mask.push(row);
        }
        let available: usize = mask.iter().flatten().filter(|&&a| a).count();
        let expected = 4 * (l * n * d + available * 2 * f * d) + mask_len;
        if rest.len() != expected {
            return Err(r.malformed(format!(
                "body holds {} bytes, config and mask imply {expected}",
                rest.len()
            )));
        }

        let mut layers = Vec::with_capacity(l);
        for row in &mask {
            let router = r.f32s(n * d)?;
            let experts = row
                .iter()
                .map(|&avail| {
                    if avail {
                        Ok(Expert { w1: r.f32s(f * d)?, w2: r.f32s(d * f)? })
                    } else {
                        Ok(Expert { w1: vec![0.0; f * d], w2: vec![0.0; d * f] })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(MoeLayer { router, experts });
        }
        r.take(mask_len)?;
        r.expect_end()?;
        MoeModel::from_parts(config, layers, mask).map_err(|e| match e {
            Error::TooFewExperts { .. } => r.malformed(e.to_string()),
            other => other,
        })
    }

    /// 64-bit hash of the serialized model.
    pub fn fingerprint(&self) -> u64 {
        crate::checksum::digest64(&self.to_bytes())
    }
}

pub fn write_model(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<MoeModel> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MoeModel::from_bytes(&data)
}
