//! Missing-modality simulation and the evaluation metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend, ModelTag};
use crate::types::{Modality, Payload};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("missing rate {0} is outside [0, 1]")]
    EtaOutOfRange(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no label has a positive instance")]
    NoPositiveLabels,
    #[error("embedding unavailable: {0}")]
    EmbeddingUnavailable(BackendError),
    #[error("similarity needs at least one pair")]
    EmptyPairs,
    #[error("pair {0} mixes modalities")]
    ModalityMismatch(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Which modality is withheld per sample, with the inputs that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingMask {
    pub eta: f64,
    pub seed: u64,
    pub entries: BTreeMap<String, Modality>,
}

impl MissingMask {
    pub fn missing(&self, sample_id: &str) -> Option<Modality> {
        self.entries.get(sample_id).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let m: MissingMask = serde_json::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))?;
        if !(0.0..=1.0).contains(&m.eta) {
            return Err(EvalError::EtaOutOfRange(m.eta));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Withholds one modality from `round(eta * N)` samples. Samples are drawn
/// without replacement from a ChaCha8 stream seeded with `seed`; each drawn
/// sample then flips a fair coin for image versus text, in draw order.
pub fn simulate_missing(sample_ids: &[String], eta: f64, seed: u64) -> Result<MissingMask, EvalError> {
    if !(0.0..=1.0).contains(&eta) || eta.is_nan() {
        return Err(EvalError::EtaOutOfRange(eta));
    }
    let n = sample_ids.len();
    let k = ((eta * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, n, k);
    let mut entries = BTreeMap::new();
    for i in picked.iter() {
        let m = if rng.random_bool(0.5) {
            Modality::Image
        } else {
            Modality::Text
        };
        entries.insert(sample_ids[i].clone(), m);
    }
    Ok(MissingMask { eta, seed, entries })
}

/// Sample ids by label scores. Used both for predictions (scores in [0, 1])
/// and gold labels (0/1 entries).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub label_names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub type PredictionTable = LabelTable;

impl LabelTable {
    pub fn new(label_names: Vec<String>, rows: Vec<(String, Vec<f64>)>) -> Result<Self, EvalError> {
        let t = Self { label_names, rows };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), EvalError> {
        let width = self.label_names.len();
        let mut seen = HashMap::new();
        for (i, (id, scores)) in self.rows.iter().enumerate() {
            if scores.len() != width {
                return Err(EvalError::ShapeMismatch(format!(
                    "row {id} has {} scores, expected {width}",
                    scores.len()
                )));
            }
            if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
                return Err(EvalError::Parse(format!("row {id} has non-finite score {s}")));
            }
            if seen.insert(id.as_str(), i).is_some() {
                return Err(EvalError::Parse(format!("duplicate sample id {id}")));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    /// Checks that every entry is 0 or 1.
    pub fn validate_binary(&self) -> Result<(), EvalError> {
        for (id, scores) in &self.rows {
            if scores.iter().any(|&s| s != 0.0 && s != 1.0) {
                return Err(EvalError::Parse(format!("gold row {id} has a non 0/1 entry")));
            }
        }
        Ok(())
    }

    /// Header `sample_id,<labels...>`, then one row per sample.
    pub fn read_csv(reader: impl Read) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| EvalError::Parse(e.to_string()))?.clone();
        let label_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| EvalError::Parse(e.to_string()))?;
            let id = rec.get(0).unwrap_or_default().to_string();
            let scores = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| EvalError::Parse(format!("row {id}: {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((id, scores));
        }
        Self::new(label_names, rows)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let f = std::fs::File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(f)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| EvalError::Io(e.to_string());
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.label_names.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for (id, scores) in &self.rows {
            let mut rec = vec![id.clone()];
            rec.extend(scores.iter().map(|s| s.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| EvalError::Io(e.to_string()))
    }
}

/// Gold entries aligned to the prediction rows and label order.
fn align(pred: &LabelTable, gold: &LabelTable) -> Result<Vec<Vec<bool>>, EvalError> {
    gold.validate_binary()?;
    if pred.rows.len() != gold.rows.len() || pred.label_names.len() != gold.label_names.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "prediction is {}x{}, gold is {}x{}",
            pred.rows.len(),
            pred.label_names.len(),
            gold.rows.len(),
            gold.label_names.len()
        )));
    }
    let col: HashMap<&str, usize> = gold.label_names.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let cols = pred
        .label_names
        .iter()
        .map(|l| col.get(l.as_str()).copied().ok_or_else(|| EvalError::ShapeMismatch(format!("label {l} not in gold"))))
        .collect::<Result<Vec<_>, _>>()?;
    let row: HashMap<&str, &Vec<f64>> = gold.rows.iter().map(|(id, s)| (id.as_str(), s)).collect();
    pred.rows
        .iter()
        .map(|(id, _)| {
            let g = row
                .get(id.as_str())
                .ok_or_else(|| EvalError::ShapeMismatch(format!("sample {id} not in gold")))?;
            Ok(cols.iter().map(|&c| g[c] == 1.0).collect())
        })
        .collect()
}

/// Per-label F1 with scores binarized at `score >= threshold`, averaged
/// over labels, times 100. A label with no predicted and no actual
/// positives is skipped; if every label is skipped the score is 100.
pub fn macro_f1(pred: &PredictionTable, gold: &LabelTable, threshold: f64) -> Result<f64, EvalError> {
    let gold = align(pred, gold)?;
    let mut sum = 0.0;
    let mut counted = 0usize;
    for l in 0..pred.label_names.len() {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (r, (_, scores)) in pred.rows.iter().enumerate() {
            match (scores[l] >= threshold, gold[r][l]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue;
        }
        counted += 1;
        sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    if counted == 0 {
        return Ok(100.0);
    }
    Ok(sum / counted as f64 * 100.0)
}

/// Mean over labels with at least one positive of the non-interpolated
/// average precision, times 100. Samples are ranked by descending score
/// with ties broken by row order.
#[allow(clippy::needless_range_loop)]
pub fn mean_ap(pred: &PredictionTable, gold: &LabelTable) -> Result<f64, EvalError> {
    let gold = align(pred, gold)?;
    let n = pred.rows.len();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for l in 0..pred.label_names.len() {
        let positives = (0..n).filter(|&r| gold[r][l]).count();
        if positives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| pred.rows[b].1[l].total_cmp(&pred.rows[a].1[l]).then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &r) in order.iter().enumerate() {
            if gold[r][l] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        sum += ap / positives as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(EvalError::NoPositiveLabels);
    }
    Ok(sum / counted as f64 * 100.0)
}

/// Mean same-modality CLIP cosine between ground truth and generated
/// payloads, negatives clamped to 0, times 100.
pub fn similarity_score(pairs: &[(Payload, Payload)], backend: &dyn EmbeddingBackend) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let mut sum = 0.0;
    for (i, (truth, generated)) in pairs.iter().enumerate() {
        if truth.modality() != generated.modality() {
            return Err(EvalError::ModalityMismatch(i));
        }
        let a = backend.embed(truth, ModelTag::Clip).map_err(EvalError::EmbeddingUnavailable)?;
        let b = backend.embed(generated, ModelTag::Clip).map_err(EvalError::EmbeddingUnavailable)?;
        sum += a.cosine(&b).map_err(EvalError::EmbeddingUnavailable)?.max(0.0);
    }
    Ok(sum / pairs.len() as f64 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::FixedEmbedding;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    fn table(labels: &[&str], rows: &[&[f64]]) -> LabelTable {
        LabelTable::new(
            labels.iter().map(|s| s.to_string()).collect(),
            rows.iter().enumerate().map(|(i, r)| (format!("s{i}"), r.to_vec())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mask_counts_and_edges() {
        for (eta, k) in [(0.0, 0), (0.3, 30), (0.5, 50), (0.7, 70), (1.0, 100)] {
            let m = simulate_missing(&ids(100), eta, 7).unwrap();
            assert_eq!(m.entries.len(), k);
        }
        assert_eq!(simulate_missing(&ids(100), 0.5, 7), simulate_missing(&ids(100), 0.5, 7));
        assert_eq!(simulate_missing(&ids(3), 1.5, 0), Err(EvalError::EtaOutOfRange(1.5)));
        assert!(simulate_missing(&ids(3), -0.1, 0).is_err());
    }

    #[test]
    fn mask_json_roundtrip() {
        let m = simulate_missing(&ids(10), 0.5, 1).unwrap();
        let text = m.to_json();
        assert!(text.contains("\"image\"") || text.contains("\"text\""));
        assert_eq!(MissingMask::from_json(&text).unwrap(), m);
    }

    #[test]
    fn f1_hand_value() {
        // label a: tp=1 fp=1 fn=0 -> 2/3; label b: tp=1 fp=0 fn=1 -> 2/3.
        let pred = table(&["a", "b"], &[&[0.9, 0.8], &[0.7, 0.1], &[0.2, 0.4]]);
        let gold = table(&["a", "b"], &[&[1.0, 1.0], &[0.0, 0.0], &[0.0, 1.0]]);
        let f1 = macro_f1(&pred, &gold, 0.5).unwrap();
        assert!((f1 - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn f1_perfect_and_wrong() {
        let gold = table(&["a", "b"], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(macro_f1(&gold, &gold, 0.5).unwrap(), 100.0);
        let wrong = table(&["a", "b"], &[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(macro_f1(&wrong, &gold, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn f1_skips_silent_labels() {
        let pred = table(&["a", "b"], &[&[0.9, 0.1], &[0.1, 0.2]]);
        let gold = table(&["a", "b"], &[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(macro_f1(&pred, &gold, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn ap_single_positive_second() {
        let pred = table(&["a"], &[&[0.9], &[0.5], &[0.1]]);
        let gold = table(&["a"], &[&[0.0], &[1.0], &[0.0]]);
        assert!((mean_ap(&pred, &gold).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn ap_ties_by_row_order() {
        let pred = table(&["a"], &[&[0.5], &[0.5]]);
        let gold = table(&["a"], &[&[0.0], &[1.0]]);
        assert!((mean_ap(&pred, &gold).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn ap_errors() {
        let pred = table(&["a"], &[&[0.5], &[0.1]]);
        let gold = table(&["a"], &[&[0.0], &[0.0]]);
        assert_eq!(mean_ap(&pred, &gold), Err(EvalError::NoPositiveLabels));
        let other = table(&["b"], &[&[1.0], &[0.0]]);
        assert!(matches!(mean_ap(&pred, &other), Err(EvalError::ShapeMismatch(_))));
        let short = table(&["a"], &[&[1.0]]);
        assert!(matches!(macro_f1(&pred, &short, 0.5), Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn gold_must_be_binary() {
        let pred = table(&["a"], &[&[0.5]]);
        let gold = table(&["a"], &[&[0.5]]);
        assert!(matches!(mean_ap(&pred, &gold), Err(EvalError::Parse(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let t = table(&["a", "b"], &[&[0.25, 1.0], &[0.0, 0.125]]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("sample_id,a,b\n"));
        assert_eq!(LabelTable::read_csv(buf.as_slice()).unwrap(), t);
        assert!(LabelTable::read_csv("sample_id,a\nx,nan\n".as_bytes()).is_err());
        assert!(LabelTable::read_csv("sample_id,a\nx,1\nx,0\n".as_bytes()).is_err());
    }

    #[test]
    fn ss_examples() {
        let t = |s: &str| Payload::Text(s.into());
        let emb = FixedEmbedding::new()
            .with(ModelTag::Clip, &t("a"), vec![1.0, 0.0])
            .with(ModelTag::Clip, &t("b"), vec![0.6, 0.8])
            .with(ModelTag::Clip, &t("c"), vec![0.8, 0.6])
            .with(ModelTag::Clip, &t("d"), vec![0.0, 1.0])
            .with(ModelTag::Clip, &t("neg"), vec![-1.0, 0.0]);
        assert!((similarity_score(&[(t("a"), t("a"))], &emb).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(similarity_score(&[(t("a"), t("d"))], &emb).unwrap(), 0.0);
        assert_eq!(similarity_score(&[(t("a"), t("neg"))], &emb).unwrap(), 0.0);
        let ss = similarity_score(&[(t("a"), t("b")), (t("a"), t("c"))], &emb).unwrap();
        assert!((ss - 70.0).abs() < 1e-9);
        assert_eq!(similarity_score(&[], &emb), Err(EvalError::EmptyPairs));
        assert!(matches!(
            similarity_score(&[(t("a"), t("zzz"))], &emb),
            Err(EvalError::EmbeddingUnavailable(_))
        ));
    }
}
