//! Gallery indexes, ranking, retrieval metrics, submissions and ablation tables.

mod ablation;
mod pipeline;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::numerics::{dot, Matrix};
use crate::router::Domain;

pub use ablation::{ablation_report, median, AblationRow, AblationTable, NamedReport};
pub use pipeline::{
    build_router, evaluate, evaluate_branch, pedestrian_gallery, retrieve, vehicle_gallery, Branch, Evaluation,
    QueryOutcome, RetrievalReport, SliceMetrics, REPORT_FORMAT,
};

/// Encoded gallery of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub domain: Domain,
    pub ids: Vec<String>,
    /// `N × d`, unit-norm rows in `ids` order.
    pub embeddings: Matrix,
    /// Whether images were color-patched before encoding.
    pub augmented: bool,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encodes `(id, features)` pairs into an index.
pub fn build_gallery(
    domain: Domain,
    items: &[(String, Vec<f64>)],
    encoder: &DualEncoder,
    augmented: bool,
) -> Result<GalleryIndex> {
    if items.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut seen = BTreeSet::new();
    for (id, _) in items {
        if !seen.insert(id.as_str()) {
            return Err(Error::Malformed(format!("duplicate gallery id {id}")));
        }
    }
    let feats: Vec<&[f64]> = items.iter().map(|(_, f)| f.as_slice()).collect();
    let batch = encoder.encode_images(&feats)?;
    Ok(GalleryIndex {
        domain,
        ids: items.iter().map(|(id, _)| id.clone()).collect(),
        embeddings: batch.embeddings,
        augmented,
    })
}

/// Gallery ids by descending cosine score, ties by ascending id, truncated to `k`.
pub fn rank(query: &[f64], index: &GalleryIndex, k: usize) -> Result<Vec<(String, f64)>> {
    if query.len() != index.embeddings.cols() {
        return Err(Error::dims(index.embeddings.cols(), query.len()));
    }
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| (i, dot(query, index.embeddings.row(i))))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(i, s)| (index.ids[i].clone(), s)).collect())
}

fn check_ground_truth(rankings: &[Vec<String>], truth: &[Vec<String>]) -> Result<()> {
    if rankings.len() != truth.len() {
        return Err(Error::dims(truth.len(), rankings.len()));
    }
    if let Some(i) = truth.iter().position(Vec::is_empty) {
        return Err(Error::MissingGroundTruth(format!("query {i}")));
    }
    Ok(())
}

/// Fraction of queries with at least one relevant id in the top `k`.
pub fn recall_at_k(rankings: &[Vec<String>], truth: &[Vec<String>], k: usize) -> Result<f64> {
    check_ground_truth(rankings, truth)?;
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|id| t.contains(id)))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Average precision truncated at `k`, normalized by `min(|relevant|, k)`.
pub fn average_precision(ranking: &[String], relevant: &[String], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    let denom = relevant.len().min(k);
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

pub fn mean_ap(rankings: &[Vec<String>], truth: &[Vec<String>], k: usize) -> Result<f64> {
    check_ground_truth(rankings, truth)?;
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = rankings
        .iter()
        .zip(truth)
        .map(|(r, t)| average_precision(r, t, k))
        .sum();
    Ok(total / rankings.len() as f64)
}

/// 1-based rank of the first relevant id; `gallery_size + 1` when none is ranked.
pub fn first_hit_rank(ranking: &[String], relevant: &[String], gallery_size: usize) -> usize {
    ranking
        .iter()
        .position(|id| relevant.contains(id))
        .map_or(gallery_size + 1, |p| p + 1)
}

/// One line of the submission file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRow {
    pub query_id: String,
    pub domain: Domain,
    pub ranks: Vec<String>,
}

pub const SUBMISSION_DEPTH: usize = 10;

/// Routed query ready for fusion: `(query id, routed domain, ranked ids)`.
pub type RoutedRanking = (String, Option<Domain>, Vec<String>);

/// One row per query, in input order, keeping the top ten ids of the routed branch.
pub fn fuse_results(results: &[RoutedRanking]) -> Result<Vec<SubmissionRow>> {
    results
        .iter()
        .map(|(id, domain, ranking)| {
            let domain = domain.ok_or_else(|| Error::UnroutedQuery(id.clone()))?;
            Ok(SubmissionRow {
                query_id: id.clone(),
                domain,
                ranks: ranking.iter().take(SUBMISSION_DEPTH).cloned().collect(),
            })
        })
        .collect()
}

/// `query_id,domain,rank1..rank10`; short rows leave trailing cells empty.
pub fn submission_csv(rows: &[SubmissionRow]) -> String {
    let mut out = String::from("query_id,domain");
    for r in 1..=SUBMISSION_DEPTH {
        write!(out, ",rank{r}").expect("write to string");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.query_id);
        out.push(',');
        out.push_str(row.domain.as_str());
        for r in 0..SUBMISSION_DEPTH {
            out.push(',');
            if let Some(id) = row.ranks.get(r) {
                out.push_str(id);
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
