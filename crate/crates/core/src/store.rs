//! Dataset manifests, run directories and reports.
//!
//! A run directory holds `config.json`, `transcripts/`, `graphs/`,
//! `candidates/`, `scores.csv`, `chosen/` and `report.md`. Per-sample
//! entries are only ever added; payloads live in their own files and are
//! referenced by relative path.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::EmbeddingBackend;
use crate::completion::{
    rank_set, Candidate, CandidateMeta, CandidateSet, Descriptions, Extraction, FewShotExample,
    GenerationFailure, RankingConfig, Sample, SampleOutcome, Transcript,
};
use crate::kgraph::KnowledgeGraph;
use crate::ranking::{select_best, Ranking};
use crate::types::{DomainTag, ImageData, ImageFormat, Modality, Payload};

pub const RUN_LAYOUT: [&str; 7] = [
    "config.json",
    "transcripts",
    "graphs",
    "candidates",
    "scores.csv",
    "chosen",
    "report.md",
];

pub const SCORES_HEADER: &str = "sample_id,candidate_index,graph_term,clip_term,blip_term,total,chosen";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("sample {sample_id}: missing file {path}")]
    MissingFile { sample_id: String, path: String },
    #[error("run {0} already exists")]
    RunExists(String),
    #[error("i/o error: {0}")]
    Io(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Io(format!("{}: {e}", path.display()))
}

/// Rounds to 9 significant digits and prints the shortest form of the
/// rounded value.
pub fn fmt_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    sample_id: String,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    text_path: Option<String>,
    #[serde(default)]
    labels: Option<Vec<u8>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FewShotEntry {
    image: String,
    report: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    dataset_id: String,
    #[serde(default)]
    domain_tag: DomainTag,
    #[serde(default)]
    label_names: Vec<String>,
    samples: Vec<SampleEntry>,
    #[serde(default)]
    few_shot: Vec<FewShotEntry>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub dataset_id: String,
    pub domain_tag: DomainTag,
    pub label_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub few_shot: Vec<FewShotExample>,
}

impl Manifest {
    pub fn sample_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.sample_id.clone()).collect()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }
}

fn read_image(base: &Path, rel: &str, sample_id: &str) -> Result<ImageData, StoreError> {
    let path = base.join(rel);
    let bytes = fs::read(&path).map_err(|_| StoreError::MissingFile {
        sample_id: sample_id.to_string(),
        path: rel.to_string(),
    })?;
    let format = ImageFormat::sniff(&bytes)
        .or_else(|| path.extension().and_then(|e| e.to_str()).and_then(ImageFormat::from_extension))
        .ok_or_else(|| StoreError::Parse(format!("sample {sample_id}: {rel} is not a png or jpeg")))?;
    Ok(ImageData::new(bytes, format))
}

/// Loads a JSON manifest; paths are relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| StoreError::Parse(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(file.samples.len());
    for entry in file.samples {
        let id = entry.sample_id;
        if id.is_empty() {
            return Err(StoreError::Parse("empty sample id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(StoreError::Parse(format!("duplicate sample id {id}")));
        }
        let image = entry.image.map(|rel| read_image(base, &rel, &id)).transpose()?;
        let text = match (entry.text, entry.text_path) {
            (Some(_), Some(_)) => {
                return Err(StoreError::Parse(format!("sample {id}: both text and text_path")))
            }
            (Some(t), None) => Some(t),
            (None, Some(rel)) => Some(fs::read_to_string(base.join(&rel)).map_err(|_| {
                StoreError::MissingFile {
                    sample_id: id.clone(),
                    path: rel.clone(),
                }
            })?),
            (None, None) => None,
        };
        if image.is_none() && text.is_none() {
            return Err(StoreError::Parse(format!("sample {id} has no modality")));
        }
        let labels = match entry.labels {
            Some(ls) => {
                if ls.len() != file.label_names.len() {
                    return Err(StoreError::Parse(format!(
                        "sample {id} has {} labels, expected {}",
                        ls.len(),
                        file.label_names.len()
                    )));
                }
                if ls.iter().any(|&l| l > 1) {
                    return Err(StoreError::Parse(format!("sample {id}: labels must be 0 or 1")));
                }
                Some(ls.into_iter().map(|l| l == 1).collect())
            }
            None => None,
        };
        samples.push(Sample {
            sample_id: id,
            image,
            text,
            labels,
            domain_tag: file.domain_tag,
        });
    }
    let few_shot = file
        .few_shot
        .into_iter()
        .map(|ex| {
            Ok(FewShotExample {
                image: read_image(base, &ex.image, "few_shot")?,
                report: ex.report,
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    Ok(Manifest {
        dataset_id: file.dataset_id,
        domain_tag: file.domain_tag,
        label_names: file.label_names,
        samples,
        few_shot,
    })
}

/// File-name-safe form of a sample id.
pub fn file_stem(sample_id: &str) -> String {
    sample_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn payload_ext(p: &Payload) -> &'static str {
    match p {
        Payload::Image(img) => img.format.extension(),
        Payload::Text(_) => "txt",
    }
}

fn read_payload(path: &Path) -> Result<Payload, StoreError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") => String::from_utf8(bytes)
            .map(Payload::Text)
            .map_err(|e| StoreError::Parse(format!("{}: {e}", path.display()))),
        Some(ext) => {
            let format = ImageFormat::from_extension(ext)
                .ok_or_else(|| StoreError::Parse(format!("unknown payload type {}", path.display())))?;
            Ok(Payload::Image(ImageData::new(bytes, format)))
        }
        None => Err(StoreError::Parse(format!("payload without extension {}", path.display()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredCandidate {
    #[serde(flatten)]
    pub meta: CandidateMeta,
    /// Relative to the run directory.
    pub payload_path: String,
}

/// Everything needed to re-rank one sample offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSet {
    pub sample_id: String,
    pub missing: Modality,
    pub available_path: String,
    pub available_graph: KnowledgeGraph,
    pub descriptions: Descriptions,
    pub candidates: Vec<StoredCandidate>,
    pub failures: Vec<GenerationFailure>,
    pub ranking_config: RankingConfig,
    pub ranking: Ranking,
    pub chosen_index: usize,
    pub chosen_path: String,
    pub elapsed_ms: u64,
}

/// Per-sample status line kept in the event log and report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStatus {
    pub sample_id: String,
    pub missing: Modality,
    pub chosen_index: Option<usize>,
    pub total: Option<f64>,
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

/// Append-only writer for one run directory. Callers serialize access.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    run_id: String,
    statuses: Vec<SampleStatus>,
    finished: bool,
}

const EVENTS: &str = "transcripts/events.jsonl";

impl RunWriter {
    /// Creates `root/run_id` with the full layout. Fails if it exists.
    pub fn create(root: &Path, run_id: &str, config: &serde_json::Value) -> Result<Self, StoreError> {
        if run_id.is_empty() || file_stem(run_id) != run_id {
            return Err(StoreError::Parse(format!("invalid run id {run_id:?}")));
        }
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let dir = root.join(run_id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(StoreError::RunExists(run_id.to_string()))
            }
            Err(e) => return Err(io_err(&dir, e)),
        }
        for sub in ["transcripts", "graphs", "candidates", "chosen"] {
            fs::create_dir(dir.join(sub)).map_err(|e| io_err(&dir, e))?;
        }
        let cfg = serde_json::to_string_pretty(config).expect("config serializes") + "\n";
        write_new(&dir.join("config.json"), cfg.as_bytes())?;
        write_new(&dir.join("scores.csv"), format!("{SCORES_HEADER}\n").as_bytes())?;
        write_new(&dir.join(EVENTS), b"")?;
        let writer = Self {
            dir,
            run_id: run_id.to_string(),
            statuses: Vec::new(),
            finished: false,
        };
        writer.write_report()?;
        Ok(writer)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn statuses(&self) -> &[SampleStatus] {
        &self.statuses
    }

    fn rel(&self, parts: &[&str]) -> (String, PathBuf) {
        let rel = parts.join("/");
        let abs = self.dir.join(&rel);
        (rel, abs)
    }

    fn append(&self, rel: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.dir.join(rel);
        let mut f = OpenOptions::new().append(true).open(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(bytes).map_err(|e| io_err(&path, e))
    }

    fn log(&mut self, status: SampleStatus) -> Result<(), StoreError> {
        let line = serde_json::to_string(&status).expect("status serializes") + "\n";
        self.append(EVENTS, line.as_bytes())?;
        self.statuses.push(status);
        Ok(())
    }

    fn write_transcript(&self, stem: &str, transcript: &Transcript) -> Result<(), StoreError> {
        let (_, path) = self.rel(&["transcripts", &format!("{stem}.json")]);
        write_json_new(&path, transcript)
    }

    pub fn record_sample(&mut self, outcome: &SampleOutcome, ranking_config: RankingConfig, elapsed_ms: u64) -> Result<(), StoreError> {
        let id = &outcome.sample_id;
        let stem = file_stem(id);
        self.write_transcript(&stem, &outcome.transcript)?;

        let cand_dir = self.dir.join("candidates").join(&stem);
        fs::create_dir(&cand_dir).map_err(|e| io_err(&cand_dir, e))?;
        let (available_path, abs) = self.rel(&["candidates", &stem, &format!("available.{}", payload_ext(&outcome.available))]);
        write_new(&abs, outcome.available.as_bytes())?;

        let mut stored = Vec::new();
        for c in &outcome.candidates.candidates {
            let (rel, abs) = self.rel(&[
                "candidates",
                &stem,
                &format!("candidate_{}.{}", c.meta.index, payload_ext(&c.payload)),
            ]);
            write_new(&abs, c.payload.as_bytes())?;
            stored.push(StoredCandidate {
                meta: c.meta.clone(),
                payload_path: rel,
            });
        }

        let chosen = outcome.chosen();
        let (chosen_path, abs) = self.rel(&["chosen", &format!("{stem}.{}", payload_ext(&chosen.payload))]);
        write_new(&abs, chosen.payload.as_bytes())?;

        let graphs = GraphsRecord {
            extraction: &outcome.extraction,
            candidates: outcome
                .candidates
                .candidates
                .iter()
                .map(|c| (c.meta.index, c.meta.graph.as_ref()))
                .collect(),
        };
        let (_, abs) = self.rel(&["graphs", &format!("{stem}.json")]);
        write_json_new(&abs, &graphs)?;

        let set = StoredSet {
            sample_id: id.clone(),
            missing: outcome.missing,
            available_path,
            available_graph: outcome.extraction.graph.clone(),
            descriptions: outcome.candidates.descriptions.clone(),
            candidates: stored,
            failures: outcome.candidates.failures.clone(),
            ranking_config,
            ranking: outcome.ranking.clone(),
            chosen_index: chosen.meta.index,
            chosen_path,
            elapsed_ms,
        };
        let (_, abs) = self.rel(&["candidates", &stem, "set.json"]);
        write_json_new(&abs, &set)?;

        self.append("scores.csv", score_rows(&set).as_bytes())?;
        let total = outcome.ranking.scores[outcome.ranking.best_index].total();
        self.log(SampleStatus {
            sample_id: id.clone(),
            missing: outcome.missing,
            chosen_index: Some(chosen.meta.index),
            total: Some(total),
            error: None,
            elapsed_ms,
        })
    }

    pub fn record_failure(
        &mut self,
        sample_id: &str,
        missing: Modality,
        error: &str,
        transcript: &Transcript,
        elapsed_ms: u64,
    ) -> Result<(), StoreError> {
        self.write_transcript(&file_stem(sample_id), transcript)?;
        self.log(SampleStatus {
            sample_id: sample_id.to_string(),
            missing,
            chosen_index: None,
            total: None,
            error: Some(error.to_string()),
            elapsed_ms,
        })
    }

    fn write_report(&self) -> Result<(), StoreError> {
        let path = self.dir.join("report.md");
        let text = render_run_report(&self.run_id, &self.statuses, !self.finished);
        atomic_write(&path, text.as_bytes())
    }

    /// Writes the final report. Safe to call more than once.
    pub fn finish(&mut self) -> Result<PathBuf, StoreError> {
        self.finished = true;
        self.write_report()?;
        Ok(self.dir.clone())
    }

    /// Rewrites the report from what has been recorded so far, e.g. on
    /// interrupt.
    pub fn flush(&self) -> Result<(), StoreError> {
        self.write_report()
    }
}

#[derive(Serialize)]
struct GraphsRecord<'a> {
    extraction: &'a Extraction,
    candidates: BTreeMap<usize, Option<&'a KnowledgeGraph>>,
}

fn score_rows(set: &StoredSet) -> String {
    let mut out = String::new();
    for (c, s) in set.candidates.iter().zip(&set.ranking.scores) {
        let chosen = u8::from(c.meta.index == set.chosen_index);
        let (g, cl, b) = match &s.score {
            Some(q) => (fmt_float(q.graph_term), fmt_float(q.clip_term), fmt_float(q.blip_term)),
            None => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{g},{cl},{b},{},{chosen}",
            csv_field(&set.sample_id),
            c.meta.index,
            fmt_float(s.total())
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

fn write_json_new<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let text = serde_json::to_string_pretty(value).expect("record serializes") + "\n";
    write_new(path, text.as_bytes())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().expect("file has a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn render_run_report(run_id: &str, statuses: &[SampleStatus], in_progress: bool) -> String {
    let mut out = format!("# Run {run_id}\n\n");
    if in_progress {
        out.push_str("Status: in progress\n\n");
    }
    let done = statuses.iter().filter(|s| s.error.is_none()).count();
    let _ = writeln!(out, "Completed {done} of {} samples.\n", statuses.len());
    if statuses.is_empty() {
        return out;
    }
    out.push_str("| sample | missing | chosen | total | ms |\n|---|---|---|---|---|\n");
    for s in statuses.iter().filter(|s| s.error.is_none()) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            s.sample_id,
            s.missing,
            s.chosen_index.map_or(String::new(), |i| i.to_string()),
            s.total.map_or(String::new(), fmt_float),
            s.elapsed_ms
        );
    }
    let failed: Vec<_> = statuses.iter().filter(|s| s.error.is_some()).collect();
    if !failed.is_empty() {
        out.push_str("\n## Errors\n\n| sample | missing | error |\n|---|---|---|\n");
        for s in failed {
            let err = s.error.as_deref().unwrap_or_default().replace('|', "\\|").replace('\n', " ");
            let _ = writeln!(out, "| {} | {} | {err} |", s.sample_id, s.missing);
        }
    }
    out
}

/// A stored run read back from disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: serde_json::Value,
    pub sets: Vec<StoredSet>,
    pub statuses: Vec<SampleStatus>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        for entry in RUN_LAYOUT {
            if !dir.join(entry).exists() {
                return Err(StoreError::Parse(format!("{} is missing {entry}", dir.display())));
            }
        }
        let cfg_path = dir.join("config.json");
        let config = serde_json::from_str(&fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?)
            .map_err(|e| StoreError::Parse(format!("config.json: {e}")))?;
        let ev_path = dir.join(EVENTS);
        let statuses = fs::read_to_string(&ev_path)
            .map_err(|e| io_err(&ev_path, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| StoreError::Parse(format!("events: {e}"))))
            .collect::<Result<Vec<SampleStatus>, _>>()?;
        let mut sets = Vec::new();
        for s in statuses.iter().filter(|s| s.error.is_none()) {
            let path = dir.join("candidates").join(file_stem(&s.sample_id)).join("set.json");
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            sets.push(serde_json::from_str(&text).map_err(|e| StoreError::Parse(format!("{}: {e}", path.display())))?);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            sets,
            statuses,
        })
    }

    pub fn set(&self, sample_id: &str) -> Option<&StoredSet> {
        self.sets.iter().find(|s| s.sample_id == sample_id)
    }

    /// Rebuilds the in-memory candidate set with payloads from disk.
    pub fn candidate_set(&self, set: &StoredSet) -> Result<(Payload, CandidateSet), StoreError> {
        let available = read_payload(&self.dir.join(&set.available_path))?;
        let candidates = set
            .candidates
            .iter()
            .map(|c| {
                Ok(Candidate {
                    meta: c.meta.clone(),
                    payload: read_payload(&self.dir.join(&c.payload_path))?,
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        Ok((
            available,
            CandidateSet {
                target_modality: set.missing,
                candidates,
                source_graph: set.available_graph.clone(),
                descriptions: set.descriptions.clone(),
                failures: set.failures.clone(),
            },
        ))
    }

    pub fn scores_csv(&self) -> Result<String, StoreError> {
        let path = self.dir.join("scores.csv");
        fs::read_to_string(&path).map_err(|e| io_err(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub sample_id: String,
    pub candidate_index: usize,
    pub stored: f64,
    pub recomputed: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayReport {
    pub samples: usize,
    pub scores_checked: usize,
    pub mismatches: Vec<ReplayMismatch>,
    /// Sample ids whose recomputed best index differs from the stored one.
    pub selection_changes: Vec<String>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty() && self.selection_changes.is_empty()
    }
}

/// Re-ranks every stored set from its stored payloads and graphs and
/// compares totals bit for bit.
pub fn replay_run(record: &RunRecord, embed: &dyn EmbeddingBackend) -> Result<ReplayReport, StoreError> {
    let mut report = ReplayReport::default();
    for set in &record.sets {
        let (available, cset) = record.candidate_set(set)?;
        let ranking = rank_set(&available, &set.available_graph, &cset, set.ranking_config, embed)
            .map_err(|e| StoreError::Parse(format!("sample {}: {e}", set.sample_id)))?;
        report.samples += 1;
        for (stored, fresh) in set.ranking.scores.iter().zip(&ranking.scores) {
            report.scores_checked += 1;
            let (a, b) = (stored.total(), fresh.total());
            if a.to_bits() != b.to_bits() {
                report.mismatches.push(ReplayMismatch {
                    sample_id: set.sample_id.clone(),
                    candidate_index: set.candidates[stored.index].meta.index,
                    stored: a,
                    recomputed: b,
                });
            }
        }
        let totals: Vec<f64> = ranking.scores.iter().map(|s| s.total()).collect();
        if select_best(&totals) != Some(set.ranking.best_index) {
            report.selection_changes.push(set.sample_id.clone());
        }
    }
    Ok(report)
}

/// One evaluation result for the report tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub eta: f64,
    pub seed: u64,
    pub f1: Option<f64>,
    pub map: Option<f64>,
    pub ss: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.1}"))
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Markdown with one table per missing rate: a row per seed plus the mean.
pub fn render_eval_report(title: &str, rows: &[EvalRow]) -> String {
    let mut out = format!("# {title}\n");
    let mut etas: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    for eta in etas {
        let mut group: Vec<&EvalRow> = rows.iter().filter(|r| r.eta == eta).collect();
        group.sort_by_key(|r| r.seed);
        let _ = write!(out, "\n## eta = {eta}\n\n| seed | F1 | mAP | SS |\n|---|---|---|---|\n");
        for r in &group {
            let _ = writeln!(out, "| {} | {} | {} | {} |", r.seed, cell(r.f1), cell(r.map), cell(r.ss));
        }
        if group.len() > 1 {
            let _ = writeln!(
                out,
                "| mean | {} | {} | {} |",
                cell(mean(group.iter().map(|r| r.f1))),
                cell(mean(group.iter().map(|r| r.map))),
                cell(mean(group.iter().map(|r| r.ss)))
            );
        }
    }
    out
}
