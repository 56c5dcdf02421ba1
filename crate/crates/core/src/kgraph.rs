//! Knowledge-graph model, adjacency construction and row-wise cosine graph similarity.
//!
//! Two graphs are compared over the sorted union of their node labels. Each
//! graph becomes a binary directed adjacency matrix over that vocabulary
//! (relation labels and self-loops are dropped) and the score is the mean
//! row cosine, scaled to `[0, 100]`. Rows that are zero in both matrices do
//! not take part in the mean.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::DomainTag;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KgError {
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("structured knowledge references unknown object '{0}'")]
    InconsistentStructured(String),
    #[error("node '{0}' is not in the vocabulary")]
    NodeNotInVocab(String),
    #[error("adjacency matrices are built over different vocabularies")]
    VocabMismatch,
}

/// Case-folds, trims and collapses internal whitespace.
pub fn normalize_label(raw: &str) -> Result<String, KgError> {
    let folded = raw.to_lowercase();
    let label = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    if label.is_empty() {
        Err(KgError::EmptyLabel)
    } else {
        Ok(label)
    }
}

/// A directed `(head, relation, tail)` edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    /// Builds a triplet from raw labels, normalizing all three parts.
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self, KgError> {
        Ok(Self {
            head: normalize_label(head)?,
            relation: normalize_label(relation)?,
            tail: normalize_label(tail)?,
        })
    }

    fn normalized(&self) -> Result<Self, KgError> {
        Self::new(&self.head, &self.relation, &self.tail)
    }
}

/// Entities, counts, attributes and style extracted from one modality.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructuredKnowledge {
    pub objects: Vec<String>,
    #[serde(default)]
    pub numbers: BTreeMap<String, u64>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub style: String,
    /// Diagnosis labels (medical domain only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnoses: Vec<String>,
    #[serde(skip)]
    pub domain_tag: DomainTag,
}

impl StructuredKnowledge {
    /// Checks that every counted or described key is a listed object and
    /// that objects are unique.
    pub fn validate(&self) -> Result<(), KgError> {
        let mut seen = HashSet::new();
        for obj in &self.objects {
            if obj.is_empty() {
                return Err(KgError::EmptyLabel);
            }
            if !seen.insert(obj.as_str()) {
                return Err(KgError::InconsistentStructured(obj.clone()));
            }
        }
        for key in self.numbers.keys().chain(self.attributes.keys()) {
            if !seen.contains(key.as_str()) {
                return Err(KgError::InconsistentStructured(key.clone()));
            }
        }
        Ok(())
    }
}

/// Triplets plus optional structured knowledge; `nodes` is derived.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "GraphRepr")]
pub struct KnowledgeGraph {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<StructuredKnowledge>,
    pub triplets: Vec<Triplet>,
    #[serde(skip)]
    nodes: BTreeSet<String>,
}

#[derive(Deserialize)]
struct GraphRepr {
    #[serde(default)]
    structured: Option<StructuredKnowledge>,
    triplets: Vec<Triplet>,
}

impl From<GraphRepr> for KnowledgeGraph {
    fn from(r: GraphRepr) -> Self {
        let mut g = KnowledgeGraph {
            structured: r.structured,
            triplets: r.triplets,
            nodes: BTreeSet::new(),
        };
        g.reindex();
        g
    }
}

impl KnowledgeGraph {
    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recomputes the node set, e.g. after deserialization.
    pub fn reindex(&mut self) {
        let mut nodes = BTreeSet::new();
        for t in &self.triplets {
            nodes.insert(t.head.clone());
            nodes.insert(t.tail.clone());
        }
        if let Some(s) = &self.structured {
            nodes.extend(s.objects.iter().cloned());
        }
        self.nodes = nodes;
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Out-degree plus in-degree of every node, excluding self-loops.
    pub fn degrees(&self) -> BTreeMap<&str, usize> {
        let mut deg: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.as_str(), 0)).collect();
        for t in &self.triplets {
            if t.head != t.tail {
                *deg.entry(t.head.as_str()).or_default() += 1;
                *deg.entry(t.tail.as_str()).or_default() += 1;
            }
        }
        deg
    }
}

/// Normalizes and deduplicates triplets and reconciles the structured record.
pub fn build_graph(
    triplets: &[Triplet],
    structured: Option<StructuredKnowledge>,
) -> Result<KnowledgeGraph, KgError> {
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(triplets.len());
    for t in triplets {
        let t = t.normalized()?;
        if seen.insert(t.clone()) {
            kept.push(t);
        }
    }
    if let Some(s) = &structured {
        s.validate()?;
    }
    let mut graph = KnowledgeGraph {
        structured,
        triplets: kept,
        nodes: BTreeSet::new(),
    };
    graph.reindex();
    Ok(graph)
}

/// Sorted union of both node sets.
pub fn union_vocab(g1: &KnowledgeGraph, g2: &KnowledgeGraph) -> Vec<String> {
    g1.nodes.union(&g2.nodes).cloned().collect()
}

/// Square binary adjacency matrix over an explicit vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    vocab: Vec<String>,
    rows: Vec<Vec<u8>>,
}

impl AdjacencyMatrix {
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }
}

pub fn adjacency(g: &KnowledgeGraph, vocab: &[String]) -> Result<AdjacencyMatrix, KgError> {
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    for node in &g.nodes {
        if !index.contains_key(node.as_str()) {
            return Err(KgError::NodeNotInVocab(node.clone()));
        }
    }
    let n = vocab.len();
    let mut rows = vec![vec![0u8; n]; n];
    for t in &g.triplets {
        if t.head == t.tail {
            continue;
        }
        rows[index[t.head.as_str()]][index[t.tail.as_str()]] = 1;
    }
    Ok(AdjacencyMatrix {
        vocab: vocab.to_vec(),
        rows,
    })
}

/// Mean row-wise cosine of two aligned adjacency matrices, in `[0, 100]`.
pub fn graph_similarity(a: &AdjacencyMatrix, b: &AdjacencyMatrix) -> Result<f64, KgError> {
    if a.vocab != b.vocab {
        return Err(KgError::VocabMismatch);
    }
    let mut total = 0.0;
    let mut qualifying = 0usize;
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        let (mut dot, mut na, mut nb) = (0u64, 0u64, 0u64);
        for (&x, &y) in ra.iter().zip(rb) {
            dot += u64::from(x & y);
            na += u64::from(x);
            nb += u64::from(y);
        }
        if na == 0 && nb == 0 {
            continue;
        }
        qualifying += 1;
        if na > 0 && nb > 0 {
            // One square root of the integer product keeps identical rows at exactly 1.
            total += dot as f64 / ((na * nb) as f64).sqrt();
        }
    }
    if qualifying == 0 {
        return Ok(0.0);
    }
    Ok((total / qualifying as f64 * 100.0).clamp(0.0, 100.0))
}

/// Aligns two graphs over their union vocabulary and scores them.
pub fn compare_graphs(g1: &KnowledgeGraph, g2: &KnowledgeGraph) -> f64 {
    let vocab = union_vocab(g1, g2);
    // Both graphs' nodes are in the union, so neither step can fail.
    let a = adjacency(g1, &vocab).expect("union vocab covers g1");
    let b = adjacency(g2, &vocab).expect("union vocab covers g2");
    graph_similarity(&a, &b).expect("same vocab")
}
