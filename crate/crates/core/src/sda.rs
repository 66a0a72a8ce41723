//! Sparse domain attention: per-domain channel masks `σ(scale · e)` on the
//! feature extractor output.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Rng};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SCALE: f64 = 100.0;

/// Embedding for one domain. Index 0 is the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAttention {
    pub domain_id: usize,
    pub embedding: Vec<f64>,
    pub scale: f64,
    /// Set once source pretraining finishes; the embedding is never trained
    /// again after that.
    pub frozen: bool,
}

impl DomainAttention {
    pub fn new(domain_id: usize, embedding: Vec<f64>) -> Self {
        Self {
            domain_id,
            embedding,
            scale: DEFAULT_SCALE,
            frozen: false,
        }
    }

    /// Embedding drawn from uniform(-0.1, 0.1).
    pub fn random(domain_id: usize, dim: usize, rng: &mut Rng) -> Self {
        let e = (0..dim).map(|_| rng.uniform_range(-0.1, 0.1)).collect();
        Self::new(domain_id, e)
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }

    pub fn mask(&self) -> Vec<f64> {
        mask(self)
    }
}

/// `σ(scale · e)` entrywise.
pub fn mask(att: &DomainAttention) -> Vec<f64> {
    att.embedding
        .iter()
        .map(|&e| sigmoid(att.scale * e))
        .collect()
}

/// `σ'(x) = σ(x)·σ(-x)`, accurate far into both tails.
fn sigmoid_deriv(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

/// Capacity penalty for a new mask given masks already claimed by earlier
/// domains:
///
/// `Σ_j A_j·(1 − M_j) / max(1, Σ_j (1 − M_j))`, with `M` the elementwise max
/// of `prior_masks` (zero when there are none).
///
/// Returns the loss and its gradient with respect to the embedding.
pub fn sparsity_penalty(
    att_new: &DomainAttention,
    prior_masks: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let d = att_new.dim();
    let mut claimed = vec![0.0; d];
    for m in prior_masks {
        if m.len() != d {
            return Err(Error::shape(format!(
                "prior mask of length {} against embedding of length {d}",
                m.len()
            )));
        }
        for (c, &v) in claimed.iter_mut().zip(m) {
            *c = f64::max(*c, v);
        }
    }
    let free: Vec<f64> = claimed.iter().map(|c| 1.0 - c).collect();
    let denom = free.iter().sum::<f64>().max(1.0);
    let a = att_new.mask();
    let loss = a.iter().zip(&free).map(|(a, f)| a * f).sum::<f64>() / denom;
    let grad = att_new
        .embedding
        .iter()
        .zip(&free)
        .map(|(&e, f)| f / denom * att_new.scale * sigmoid_deriv(att_new.scale * e))
        .collect();
    Ok((loss, grad))
}

/// Rescales an embedding gradient so the saturated `σ(scale·e)` keeps
/// learning at the pace of an unscaled sigmoid:
/// `g_j · σ'(e_j) / (scale · σ'(scale·e_j) + 1e-12)`.
pub fn compensate_embedding_grad(att: &DomainAttention, grad_e: &[f64]) -> Vec<f64> {
    att.embedding
        .iter()
        .zip(grad_e)
        .map(|(&e, &g)| {
            if g == 0.0 {
                return 0.0;
            }
            g * sigmoid_deriv(e) / (att.scale * sigmoid_deriv(att.scale * e) + 1e-12)
        })
        .collect()
}

/// All domain attentions of a run; the source sits at index 0 and targets
/// follow in adaptation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub attentions: Vec<DomainAttention>,
}

impl MaskSet {
    /// One randomly initialized attention per domain.
    pub fn random(n_domains: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            attentions: (0..n_domains)
                .map(|i| DomainAttention::random(i, dim, rng))
                .collect(),
        }
    }

    pub fn from_attentions(attentions: Vec<DomainAttention>) -> Result<Self> {
        let set = Self { attentions };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.attentions.first() else {
            return Err(Error::config("mask set is empty"));
        };
        let d = first.dim();
        for (i, a) in self.attentions.iter().enumerate() {
            if a.dim() != d {
                return Err(Error::shape("domain embeddings differ in length"));
            }
            if a.domain_id != i {
                return Err(Error::config(format!(
                    "attention at position {i} carries domain id {}",
                    a.domain_id
                )));
            }
        }
        Ok(())
    }

    pub fn n_domains(&self) -> usize {
        self.attentions.len()
    }

    pub fn n_targets(&self) -> usize {
        self.attentions.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.attentions.first().map_or(0, DomainAttention::dim)
    }

    pub fn mask(&self, domain: usize) -> Result<Vec<f64>> {
        self.attentions
            .get(domain)
            .map(mask)
            .ok_or_else(|| Error::usage(format!("no attention for domain {domain}")))
    }

    pub fn masks(&self) -> Vec<Vec<f64>> {
        self.attentions.iter().map(mask).collect()
    }

    pub fn freeze(&mut self) {
        self.attentions.iter_mut().for_each(|a| a.frozen = true);
    }

    pub fn is_frozen(&self) -> bool {
        self.attentions.iter().all(|a| a.frozen)
    }
}

/// Protection mask while adapting to target `current_target` (1-based):
/// the elementwise max of the source mask and every other target mask.
pub fn merge_masks(set: &MaskSet, current_target: usize) -> Result<Vec<f64>> {
    if current_target == 0 || current_target > set.n_targets() {
        return Err(Error::usage(format!(
            "target index {current_target} outside 1..={}",
            set.n_targets()
        )));
    }
    let mut merged = set.mask(0)?;
    for (i, att) in set.attentions.iter().enumerate().skip(1) {
        if i == current_target {
            continue;
        }
        for (m, v) in merged.iter_mut().zip(mask(att)) {
            *m = f64::max(*m, v);
        }
    }
    Ok(merged)
}
