//! Candidate quality scoring and selection.
//!
//! A candidate's quality score is the weighted sum of three terms:
//! graph similarity between the available and candidate knowledge graphs,
//! and the CLIP and BLIP embedding cosines between the two payloads. The
//! graph term is on a 0-100 scale; `Normalized` mode divides it by 100 so it
//! is commensurate with the cosines, `PaperLiteral` keeps the raw scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend, EmbeddingVector, ModelTag};
use crate::kgraph::{compare_graphs, KnowledgeGraph};
use crate::types::Payload;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankingError {
    #[error("embedding unavailable: {0}")]
    EmbeddingUnavailable(BackendError),
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("every candidate failed to score")]
    RankingFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Normalized,
    PaperLiteral,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Normalized => "normalized",
            ScoreMode::PaperLiteral => "paper_literal",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(ScoreMode::Normalized),
            "paper_literal" | "paper-literal" => Ok(ScoreMode::PaperLiteral),
            other => Err(format!("unknown graph mode '{other}'")),
        }
    }
}

/// Weights of the graph, CLIP and BLIP terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub graph: f64,
    pub clip: f64,
    pub blip: f64,
}

impl Weights {
    pub const EQUAL: Weights = Weights {
        graph: 1.0,
        clip: 1.0,
        blip: 1.0,
    };
    /// Knowledge ranking only (semantic terms dropped).
    pub const GRAPH_ONLY: Weights = Weights {
        graph: 1.0,
        clip: 0.0,
        blip: 0.0,
    };
    /// Semantic ranking only (knowledge term dropped).
    pub const SEMANTIC_ONLY: Weights = Weights {
        graph: 0.0,
        clip: 1.0,
        blip: 1.0,
    };

    pub fn new(graph: f64, clip: f64, blip: f64) -> Self {
        Self { graph, clip, blip }
    }

    pub fn scaled(self, c: f64) -> Self {
        Self::new(self.graph * c, self.clip * c, self.blip * c)
    }
}

impl Default for Weights {
    fn default() -> Self {
        Self::EQUAL
    }
}

impl FromStr for Weights {
    type Err = String;

    /// Parses `wg,wc,wb`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad weight '{p}': {e}")))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            [g, c, b] if parts.iter().all(|w| w.is_finite()) => Ok(Weights::new(*g, *c, *b)),
            [_, _, _] => Err("weights must be finite".into()),
            _ => Err(format!("expected three comma-separated weights, got '{s}'")),
        }
    }
}

impl fmt::Display for Weights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.graph, self.clip, self.blip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub graph_term: f64,
    pub clip_term: f64,
    pub blip_term: f64,
    pub total: f64,
    pub mode: ScoreMode,
    pub weights: Weights,
}

impl QualityScore {
    /// Combines raw components: `graph_similarity` on the 0-100 scale and
    /// two cosines in `[-1, 1]`.
    pub fn from_components(
        graph_similarity: f64,
        clip_cosine: f64,
        blip_cosine: f64,
        weights: Weights,
        mode: ScoreMode,
    ) -> Self {
        let graph_term = match mode {
            ScoreMode::Normalized => graph_similarity / 100.0,
            ScoreMode::PaperLiteral => graph_similarity,
        };
        let total = weights.graph * graph_term + weights.clip * clip_cosine + weights.blip * blip_cosine;
        Self {
            graph_term,
            clip_term: clip_cosine,
            blip_term: blip_cosine,
            total,
            mode,
            weights,
        }
    }
}

/// One side of a comparison: a payload and its knowledge graph (absent when
/// extraction failed, which scores like an empty graph).
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub payload: &'a Payload,
    pub graph: Option<&'a KnowledgeGraph>,
}

impl<'a> Scored<'a> {
    pub fn new(payload: &'a Payload, graph: Option<&'a KnowledgeGraph>) -> Self {
        Self { payload, graph }
    }
}

fn graph_component(a: Option<&KnowledgeGraph>, b: Option<&KnowledgeGraph>) -> f64 {
    let empty = KnowledgeGraph::default();
    compare_graphs(a.unwrap_or(&empty), b.unwrap_or(&empty))
}

fn embed(
    backend: &dyn EmbeddingBackend,
    payload: &Payload,
    tag: ModelTag,
) -> Result<EmbeddingVector, RankingError> {
    backend.embed(payload, tag).map_err(RankingError::EmbeddingUnavailable)
}

fn cos(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RankingError> {
    a.cosine(b).map_err(RankingError::EmbeddingUnavailable)
}

/// Available-side embeddings, fetched once per ranking.
struct AnchorEmbeddings {
    clip: EmbeddingVector,
    blip: EmbeddingVector,
}

fn score_against(
    anchor: &AnchorEmbeddings,
    available: Scored<'_>,
    candidate: Scored<'_>,
    weights: Weights,
    mode: ScoreMode,
    backend: &dyn EmbeddingBackend,
) -> Result<QualityScore, RankingError> {
    let graph = graph_component(available.graph, candidate.graph);
    let clip = cos(&anchor.clip, &embed(backend, candidate.payload, ModelTag::Clip)?)?;
    let blip = cos(&anchor.blip, &embed(backend, candidate.payload, ModelTag::Blip)?)?;
    Ok(QualityScore::from_components(graph, clip, blip, weights, mode))
}

pub fn quality_score(
    available: Scored<'_>,
    candidate: Scored<'_>,
    weights: Weights,
    mode: ScoreMode,
    backend: &dyn EmbeddingBackend,
) -> Result<QualityScore, RankingError> {
    let anchor = AnchorEmbeddings {
        clip: embed(backend, available.payload, ModelTag::Clip)?,
        blip: embed(backend, available.payload, ModelTag::Blip)?,
    };
    score_against(&anchor, available, candidate, weights, mode, backend)
}

/// Score of one candidate; failed candidates carry `total = -inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub score: Option<QualityScore>,
    pub error: Option<String>,
}

impl CandidateScore {
    pub fn total(&self) -> f64 {
        self.score.map_or(f64::NEG_INFINITY, |s| s.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// In candidate order.
    pub scores: Vec<CandidateScore>,
    pub best_index: usize,
}

/// Index of the first maximum; `None` for an empty slice or when every
/// entry is `-inf`/NaN.
pub fn select_best(totals: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &t) in totals.iter().enumerate() {
        if t.is_nan() || t == f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some((_, b)) if t <= b => {}
            _ => best = Some((i, t)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn rank_candidates(
    available: Scored<'_>,
    candidates: &[Scored<'_>],
    weights: Weights,
    mode: ScoreMode,
    backend: &dyn EmbeddingBackend,
) -> Result<Ranking, RankingError> {
    if candidates.is_empty() {
        return Err(RankingError::NoCandidates);
    }
    let anchor = AnchorEmbeddings {
        clip: embed(backend, available.payload, ModelTag::Clip)?,
        blip: embed(backend, available.payload, ModelTag::Blip)?,
    };
    let scores: Vec<CandidateScore> = candidates
        .iter()
        .enumerate()
        .map(|(index, c)| match score_against(&anchor, available, *c, weights, mode, backend) {
            Ok(s) => CandidateScore {
                index,
                score: Some(s),
                error: None,
            },
            Err(e) => CandidateScore {
                index,
                score: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let totals: Vec<f64> = scores.iter().map(CandidateScore::total).collect();
    let best_index = select_best(&totals).ok_or(RankingError::RankingFailed)?;
    Ok(Ranking { scores, best_index })
}
