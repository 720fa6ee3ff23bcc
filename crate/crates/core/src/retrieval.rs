//! Leave-one-patient-out slide retrieval and majority-vote classification.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::metric::{median_of_min, MetricError};
use crate::model::{
    validate_manifest, DatasetManifest, EmbeddingSet, EvalConfig, PredictionRow, Violation,
    WsiRecord,
};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query {query} has no candidates after excluding its patient")]
    NoCandidates { query: String },
    #[error("retrieval has no candidates to vote over")]
    EmptyRetrieval,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no embedding set loaded for slide {0}")]
    MissingEmbedding(String),
    #[error("manifest is invalid ({} violations)", .0.len())]
    InvalidManifest(Vec<Violation>),
    #[error("every query failed; first: {}", .evaluation.first_failure().unwrap_or("none"))]
    AllQueriesFailed { evaluation: Box<LopoEvaluation> },
    #[error("slide {wsi_id}: {source}")]
    Metric {
        wsi_id: String,
        #[source]
        source: MetricError,
    },
}

/// A slide taking part in retrieval: manifest record plus its embedded mosaic.
#[derive(Debug, Clone, Copy)]
pub struct SlideRef<'a> {
    pub record: &'a WsiRecord,
    pub embeddings: &'a EmbeddingSet,
}

impl<'a> SlideRef<'a> {
    pub fn new(record: &'a WsiRecord, embeddings: &'a EmbeddingSet) -> Self {
        Self { record, embeddings }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: String,
    pub distance: f64,
}

/// Candidates for one query, ascending by distance with ties ordered by wsi_id.
/// Never contains a slide of the query's patient.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    pub query_wsi_id: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteResult {
    pub k: usize,
    pub predicted_label: String,
    pub vote_counts: BTreeMap<String, usize>,
    /// Set when several labels shared the top count.
    pub tie_broken: bool,
}

/// Ranks the corpus against `query` with an arbitrary set distance.
///
/// Slides sharing the query's patient are excluded before ranking.
pub fn retrieve_by<F>(
    query: SlideRef<'_>,
    corpus: &[SlideRef<'_>],
    distance: F,
) -> Result<RankedRetrieval, RetrievalError>
where
    F: Fn(&EmbeddingSet, &EmbeddingSet) -> Result<f64, MetricError>,
{
    let mut candidates = Vec::new();
    for slide in corpus {
        if slide.record.patient_id == query.record.patient_id {
            continue;
        }
        let d = distance(query.embeddings, slide.embeddings).map_err(|source| {
            RetrievalError::Metric {
                wsi_id: slide.record.wsi_id.clone(),
                source,
            }
        })?;
        candidates.push(Candidate {
            wsi_id: slide.record.wsi_id.clone(),
            patient_id: slide.record.patient_id.clone(),
            label: slide.record.label.clone(),
            distance: d,
        });
    }
    if candidates.is_empty() {
        return Err(RetrievalError::NoCandidates {
            query: query.record.wsi_id.clone(),
        });
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.wsi_id.cmp(&b.wsi_id))
    });
    Ok(RankedRetrieval {
        query_wsi_id: query.record.wsi_id.clone(),
        candidates,
    })
}

/// Ranks the corpus by median-of-minimum distance to `query`.
pub fn retrieve(
    query: SlideRef<'_>,
    corpus: &[SlideRef<'_>],
    config: &EvalConfig,
) -> Result<RankedRetrieval, RetrievalError> {
    retrieve_by(query, corpus, |q, t| {
        median_of_min(q, t, config.metric, config.median_rule)
    })
}

/// Majority vote over the first `min(k, #candidates)` candidates.
///
/// When labels tie on count, the label whose best-ranked candidate comes first
/// wins and `tie_broken` is set.
pub fn majority_vote(retrieval: &RankedRetrieval, k: usize) -> Result<VoteResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if retrieval.candidates.is_empty() {
        return Err(RetrievalError::EmptyRetrieval);
    }
    let mut vote_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut best_rank: HashMap<&str, usize> = HashMap::new();
    for (rank, c) in retrieval.candidates.iter().take(k).enumerate() {
        *vote_counts.entry(c.label.clone()).or_default() += 1;
        best_rank.entry(c.label.as_str()).or_insert(rank);
    }
    let top = *vote_counts.values().max().expect("at least one vote");
    let tied: Vec<&str> = vote_counts
        .iter()
        .filter(|(_, &n)| n == top)
        .map(|(label, _)| label.as_str())
        .collect();
    let predicted = *tied
        .iter()
        .min_by_key(|label| best_rank[*label])
        .expect("non-empty tie set");
    Ok(VoteResult {
        k,
        predicted_label: predicted.to_owned(),
        tie_broken: tied.len() > 1,
        vote_counts,
    })
}

/// Outcome of one query in a leave-one-patient-out run.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub wsi_id: String,
    pub patient_id: String,
    pub true_label: String,
    /// `None` when the query had no candidates after patient exclusion.
    pub retrieval: Option<RankedRetrieval>,
    /// One vote per configured k, in ascending k order. Empty when skipped.
    pub votes: Vec<VoteResult>,
}

impl QueryOutcome {
    pub fn is_scored(&self) -> bool {
        self.retrieval.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LopoEvaluation {
    pub k_values: Vec<usize>,
    /// Sorted by wsi_id.
    pub queries: Vec<QueryOutcome>,
}

impl LopoEvaluation {
    pub fn n_scored(&self) -> usize {
        self.queries.iter().filter(|q| q.is_scored()).count()
    }

    pub fn n_skipped(&self) -> usize {
        self.queries.len() - self.n_scored()
    }

    pub fn first_failure(&self) -> Option<&str> {
        self.queries
            .iter()
            .find(|q| !q.is_scored())
            .map(|q| q.wsi_id.as_str())
    }

    /// Flattened prediction table: one row per (query, k), ordered by wsi_id then k.
    /// Skipped queries produce rows with no prediction and zero candidates.
    pub fn prediction_rows(&self) -> Vec<PredictionRow> {
        let mut rows = Vec::with_capacity(self.queries.len() * self.k_values.len());
        for q in &self.queries {
            let n_candidates = q.retrieval.as_ref().map_or(0, |r| r.candidates.len());
            for (idx, &k) in self.k_values.iter().enumerate() {
                let vote = q.votes.get(idx);
                rows.push(PredictionRow {
                    query_wsi_id: q.wsi_id.clone(),
                    k,
                    true_label: q.true_label.clone(),
                    predicted_label: vote.map(|v| v.predicted_label.clone()),
                    n_candidates,
                    tie_broken: vote.is_some_and(|v| v.tie_broken),
                });
            }
        }
        rows
    }
}

/// Leave-one-patient-out evaluation with an arbitrary set distance.
///
/// Queries run in parallel; the result is assembled in wsi_id order and does
/// not depend on the thread count. Queries without candidates are recorded as
/// skipped; the run fails only if every query is skipped.
pub fn evaluate_lopo_by<F>(
    manifest: &DatasetManifest,
    embeddings: &HashMap<String, EmbeddingSet>,
    k_values: &[usize],
    distance: F,
) -> Result<LopoEvaluation, RetrievalError>
where
    F: Fn(&EmbeddingSet, &EmbeddingSet) -> Result<f64, MetricError> + Sync,
{
    let violations = validate_manifest(manifest);
    if !violations.is_empty() {
        return Err(RetrievalError::InvalidManifest(violations));
    }
    if k_values.contains(&0) {
        return Err(RetrievalError::ZeroK);
    }
    let mut k_values = k_values.to_vec();
    k_values.sort_unstable();
    k_values.dedup();

    let mut records: Vec<&WsiRecord> = manifest.wsis.iter().collect();
    records.sort_by(|a, b| a.wsi_id.cmp(&b.wsi_id));
    let slides = records
        .iter()
        .map(|r| {
            embeddings
                .get(&r.wsi_id)
                .map(|e| SlideRef::new(r, e))
                .ok_or_else(|| RetrievalError::MissingEmbedding(r.wsi_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let outcomes: Vec<Result<QueryOutcome, RetrievalError>> = slides
        .par_iter()
        .map(|&query| {
            let mut outcome = QueryOutcome {
                wsi_id: query.record.wsi_id.clone(),
                patient_id: query.record.patient_id.clone(),
                true_label: query.record.label.clone(),
                retrieval: None,
                votes: Vec::new(),
            };
            match retrieve_by(query, &slides, &distance) {
                Ok(ranked) => {
                    outcome.votes = k_values
                        .iter()
                        .map(|&k| majority_vote(&ranked, k))
                        .collect::<Result<_, _>>()?;
                    outcome.retrieval = Some(ranked);
                    Ok(outcome)
                }
                Err(RetrievalError::NoCandidates { .. }) => Ok(outcome),
                Err(e) => Err(e),
            }
        })
        .collect();
    let queries = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    let evaluation = LopoEvaluation { k_values, queries };
    if evaluation.n_scored() == 0 {
        return Err(RetrievalError::AllQueriesFailed {
            evaluation: Box::new(evaluation),
        });
    }
    Ok(evaluation)
}

/// Leave-one-patient-out evaluation with median-of-minimum distances.
pub fn evaluate_lopo(
    manifest: &DatasetManifest,
    embeddings: &HashMap<String, EmbeddingSet>,
    config: &EvalConfig,
) -> Result<LopoEvaluation, RetrievalError> {
    evaluate_lopo_by(manifest, embeddings, config.k_values(), |q, t| {
        median_of_min(q, t, config.metric, config.median_rule)
    })
}
