//! Ranking and retrieval metrics.

use std::collections::HashSet;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::Gallery;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// Gallery ids in descending score order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedRetrieval {
    /// 1-based rank of the best-placed id from `truths`.
    pub fn first_hit(&self, truths: &[String]) -> Option<usize> {
        self.ids.iter().position(|id| truths.contains(id)).map(|p| p + 1)
    }
}

pub fn rank(query: ArrayView1<f64>, gallery: &Gallery, similarity: Similarity) -> Result<RankedRetrieval> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let d = gallery.features.ncols();
    if query.len() != d {
        return Err(Error::shape("rank query", format!("{d} dims"), query.len()));
    }
    let mut scores = gallery.features.dot(&query);
    if similarity == Similarity::Cosine {
        let qn = query.dot(&query).sqrt();
        for (s, row) in scores.iter_mut().zip(gallery.features.rows()) {
            let denom = qn * row.dot(&row).sqrt();
            *s = if denom > 0.0 { *s / denom } else { 0.0 };
        }
    }
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| gallery.ids[a].cmp(&gallery.ids[b]))
    });
    Ok(RankedRetrieval {
        ids: order.iter().map(|&i| gallery.ids[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
    })
}

/// Checks that every truth id of every query exists in the gallery.
pub fn check_truths(query_ids: &[String], truths: &[Vec<String>], gallery_ids: &[String]) -> Result<()> {
    let known: HashSet<&str> = gallery_ids.iter().map(String::as_str).collect();
    for (q, t) in query_ids.iter().zip(truths) {
        if t.is_empty() {
            return Err(Error::InvalidInput(format!("query `{q}` has no truth ids")));
        }
        if let Some(missing) = t.iter().find(|id| !known.contains(id.as_str())) {
            return Err(Error::MissingTruth {
                query: q.clone(),
                id: missing.clone(),
            });
        }
    }
    Ok(())
}

fn check_lengths(rankings: &[RankedRetrieval], truths: &[Vec<String>], k: usize) -> Result<()> {
    if rankings.len() != truths.len() {
        return Err(Error::shape("metric inputs", rankings.len(), truths.len()));
    }
    if rankings.is_empty() {
        return Err(Error::InvalidInput("no queries to evaluate".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("K must be >= 1".into()));
    }
    Ok(())
}

/// Fraction of queries with any truth id in the top `k`.
pub fn recall_at_k(rankings: &[RankedRetrieval], truths: &[Vec<String>], k: usize) -> Result<f64> {
    check_lengths(rankings, truths, k)?;
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.ids.iter().take(k).any(|id| t.contains(id)))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Mean average precision truncated at `k`, normalized by `min(k, |truth|)`.
pub fn map_at_k(rankings: &[RankedRetrieval], truths: &[Vec<String>], k: usize) -> Result<f64> {
    check_lengths(rankings, truths, k)?;
    let total: f64 = rankings
        .iter()
        .zip(truths)
        .map(|(r, t)| {
            let truth: HashSet<&str> = t.iter().map(String::as_str).collect();
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (j, id) in r.ids.iter().take(k).enumerate() {
                if truth.contains(id.as_str()) {
                    hits += 1;
                    sum += hits as f64 / (j + 1) as f64;
                }
            }
            sum / k.min(truth.len()) as f64
        })
        .sum();
    Ok(total / rankings.len() as f64)
}
