//! Zero-shot relation scoring against a description pack.
//!
//! A description contributes the difference between the visual embedding's
//! similarity to its raw text and to its opposite text; a relation's score is
//! the association-weighted sum of those differences.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::DescriptionPack;
use crate::tensor::{norm, Scalar};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub temperature: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl SimilarityConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        let cfg = Self { temperature };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    /// Temperature-scaled `cos(v, t_a) − cos(v, t_p)` per description.
    pub per_description_delta: Vec<f64>,
    pub per_relation: Vec<f64>,
    /// Relation indices by descending score; ties go to the lower index.
    pub ranking: Vec<usize>,
}

/// Order indices by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

fn checked_norm<T: Scalar>(v: &[T]) -> Result<f64> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("visual embedding has norm {n}")));
    }
    Ok(n)
}

/// `τ · ⟨v, t⟩ / ‖v‖`; `t` is taken to be unit length already.
pub fn cosine<T: Scalar>(v: &[T], t: &[f32], cfg: &SimilarityConfig) -> Result<f64> {
    if v.len() != t.len() {
        return Err(Error::dim("cosine", &[v.len()], &[t.len()]));
    }
    let nv = checked_norm(v)?;
    Ok(cosine_with_norm(v, t, nv, cfg))
}

fn cosine_with_norm<T: Scalar>(v: &[T], t: &[f32], nv: f64, cfg: &SimilarityConfig) -> f64 {
    let d: f64 = v.iter().zip(t).map(|(a, b)| a.as_f64() * *b as f64).sum();
    cfg.temperature * d / nv
}

/// Per-description deltas and per-relation sums for one visual embedding.
pub fn self_normalized_scores<T: Scalar>(
    v: &[T],
    pack: &DescriptionPack,
    cfg: &SimilarityConfig,
) -> Result<RelationScores> {
    if v.len() != pack.embedding_dim() {
        return Err(Error::dim("self_normalized_scores", &[v.len()], &[pack.embedding_dim()]));
    }
    let nv = checked_norm(v)?;
    let per_description_delta: Vec<f64> = pack
        .pairs()
        .iter()
        .map(|p| {
            cosine_with_norm(v, &p.raw_embedding, nv, cfg)
                - cosine_with_norm(v, &p.opposite_embedding, nv, cfg)
        })
        .collect();
    let assoc = pack.associations();
    let per_relation: Vec<f64> = (0..assoc.relation_count())
        .map(|r| {
            assoc
                .row(r)
                .iter()
                .zip(&per_description_delta)
                .map(|(&c, d)| c as f64 * d)
                .sum()
        })
        .collect();
    let ranking = rank_descending(&per_relation);
    Ok(RelationScores {
        per_description_delta,
        per_relation,
        ranking,
    })
}

/// Plain category-name baseline: one cosine per relation name embedding.
pub fn score_category_names<T: Scalar>(
    v: &[T],
    name_embeddings: &[Vec<f32>],
    cfg: &SimilarityConfig,
) -> Result<Vec<f64>> {
    if let Some(bad) = name_embeddings.iter().find(|e| e.len() != v.len()) {
        return Err(Error::dim("score_category_names", &[v.len()], &[bad.len()]));
    }
    let nv = checked_norm(v)?;
    Ok(name_embeddings
        .iter()
        .map(|e| cosine_with_norm(v, e, nv, cfg))
        .collect())
}

/// The unnormalized direction `Σₙ C[r][n] (t_a − t_p)` for one relation:
/// the visual embedding that relation's score responds to most strongly.
pub fn planted_direction(pack: &DescriptionPack, relation: usize) -> Vec<f64> {
    let d = pack.embedding_dim();
    let mut w = vec![0.0f64; d];
    for (n, delta) in pack.delta_rows().iter().enumerate() {
        let c = pack.associations().get(relation, n) as f64;
        if c != 0.0 {
            for (slot, x) in w.iter_mut().zip(delta) {
                *slot += c * *x as f64;
            }
        }
    }
    w
}
