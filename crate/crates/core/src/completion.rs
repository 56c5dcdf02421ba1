//! Per-sample orchestration: staged knowledge extraction, description
//! expansion and candidate generation for the missing modality.
//!
//! Extraction is a three-stage dialogue. The domain prompt asks for
//! per-rule answers over the available modalities, the integration prompt
//! turns those answers into the structured return format, and a fresh
//! build-graph prompt turns the structured record into triplets. Every
//! parsed stage gets at most `repair_attempts` re-asks before failing.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use crate::backends::{BackendError, Backends, ChatBackend, ChatRequest, EmbeddingBackend, ImageBackend};
use crate::kgraph::{build_graph, KnowledgeGraph, StructuredKnowledge};
use crate::prompting::{
    parse_description_list, parse_structured_extraction, parse_triplets, return_format, values,
    ChatMessage, ContentPart, DescriptionList, ParseError, PromptError, Role, TemplateId,
    TemplateSet, DEFAULT_OBJECT_COUNT,
};
use crate::ranking::{rank_candidates, Ranking, RankingError, ScoreMode, Scored, Weights};
use crate::types::{DomainTag, ImageData, Modality, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Integrate,
    BuildKg,
    Expand,
    Refine,
    Generate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Extract => "extract",
            Stage::Integrate => "integrate",
            Stage::BuildKg => "build_kg",
            Stage::Expand => "expand",
            Stage::Refine => "refine",
            Stage::Generate => "generate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompletionError {
    #[error("sample has no available modality")]
    NoAvailableModality,
    #[error("sample already has the {0} modality")]
    TargetPresent(Modality),
    #[error("knowledge graph is empty")]
    EmptyGraph,
    #[error("extraction failed at stage {stage}: {last_error}")]
    ExtractionFailed { stage: Stage, last_error: String },
    #[error("description expansion failed: {0}")]
    ExpansionFailed(String),
    #[error("all {} candidates failed to generate", .0.len())]
    GenerationFailed(Vec<GenerationFailure>),
    #[error("backend error at stage {stage}: {error}")]
    Backend { stage: Stage, error: BackendError },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
}

/// One multimodal sample. At least one modality is present.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: Option<ImageData>,
    pub text: Option<String>,
    pub labels: Option<Vec<bool>>,
    pub domain_tag: DomainTag,
}

impl Sample {
    pub fn available(&self) -> Vec<Modality> {
        let mut out = Vec::new();
        if self.image.is_some() {
            out.push(Modality::Image);
        }
        if self.text.is_some() {
            out.push(Modality::Text);
        }
        out
    }

    pub fn payload(&self, m: Modality) -> Option<Payload> {
        match m {
            Modality::Image => self.image.clone().map(Payload::Image),
            Modality::Text => self.text.clone().map(Payload::Text),
        }
    }

    /// The sample with one modality withheld.
    pub fn without(&self, m: Modality) -> Sample {
        let mut s = self.clone();
        match m {
            Modality::Image => s.image = None,
            Modality::Text => s.text = None,
        }
        s
    }

    /// A sample carrying only `payload`, used to extract candidate graphs.
    pub fn from_payload(sample_id: impl Into<String>, payload: &Payload, domain_tag: DomainTag) -> Sample {
        let (image, text) = match payload {
            Payload::Image(img) => (Some(img.clone()), None),
            Payload::Text(t) => (None, Some(t.clone())),
        };
        Sample {
            sample_id: sample_id.into(),
            image,
            text,
            labels: None,
            domain_tag,
        }
    }
}

/// Image/report pair shown to the medical extraction prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    pub image: ImageData,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_candidates: usize,
    pub object_count: usize,
    pub kg_relationship_count: usize,
    pub repair_attempts: usize,
    pub base_seed: u64,
    pub chat_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub general_generator: String,
    pub medical_generator: String,
    /// Concurrent candidate workers within one sample.
    pub workers: usize,
    #[serde(skip)]
    pub few_shot: Vec<FewShotExample>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_candidates: 5,
            object_count: DEFAULT_OBJECT_COUNT,
            kg_relationship_count: 7,
            repair_attempts: 2,
            base_seed: 0,
            chat_model: "Qwen2-VL-7B-Instruct".into(),
            temperature: crate::backends::DEFAULT_TEMPERATURE,
            max_tokens: crate::backends::DEFAULT_MAX_TOKENS,
            general_generator: "sdxl-1.0".into(),
            medical_generator: "cheff".into(),
            workers: 1,
            few_shot: Vec::new(),
        }
    }
}

impl GenerationConfig {
    fn request(&self, messages: Vec<ChatMessage>, seed: u64) -> ChatRequest {
        let mut r = ChatRequest::new(self.chat_model.clone(), messages).with_seed(seed);
        r.temperature = self.temperature;
        r.max_tokens = self.max_tokens;
        r
    }

    fn generator(&self, domain: DomainTag) -> &str {
        match domain {
            DomainTag::General => &self.general_generator,
            DomainTag::Medical => &self.medical_generator,
        }
    }
}

/// One request/response pair. Inline images are replaced by a SHA-256
/// reference to keep transcripts small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: Stage,
    pub attempt: usize,
    pub messages: Vec<ChatMessage>,
    pub response: Option<String>,
    pub error: Option<String>,
}

fn redact(messages: &[ChatMessage]) -> Vec<ChatMessage> {
    messages
        .iter()
        .map(|m| ChatMessage {
            role: m.role,
            parts: m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Image { data, .. } => ContentPart::ImageRef {
                        url: format!("sha256:{}", hex::encode(Sha256::digest(data.as_bytes()))),
                    },
                    other => other.clone(),
                })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub exchanges: Vec<Exchange>,
}

impl Transcript {
    fn record(&mut self, stage: Stage, attempt: usize, messages: &[ChatMessage], result: &Result<String, BackendError>) {
        self.exchanges.push(Exchange {
            stage,
            attempt,
            messages: redact(messages),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
        });
    }

    pub fn extend(&mut self, other: Transcript) {
        self.exchanges.extend(other.exchanges);
    }
}

/// Everything the pipeline needs to talk to a chat model.
#[derive(Clone, Copy)]
pub struct ChatContext<'a> {
    pub chat: &'a dyn ChatBackend,
    pub templates: &'a TemplateSet,
    pub config: &'a GenerationConfig,
}

impl<'a> ChatContext<'a> {
    fn send(
        &self,
        stage: Stage,
        attempt: usize,
        messages: &[ChatMessage],
        seed: u64,
        transcript: &mut Transcript,
    ) -> Result<String, CompletionError> {
        let req = self.config.request(messages.to_vec(), seed);
        let result = self.chat.chat(&req).map(|r| r.text);
        transcript.record(stage, attempt, messages, &result);
        result.map_err(|error| CompletionError::Backend { stage, error })
    }

    /// Sends `messages`; on parse failure appends the bad answer and the
    /// repair instruction and asks again, at most `repair_attempts` times.
    fn ask_parsed<T>(
        &self,
        stage: Stage,
        mut messages: Vec<ChatMessage>,
        seed: u64,
        transcript: &mut Transcript,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<(T, usize), (CompletionError, usize)> {
        let attempts = self.config.repair_attempts + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            let text = self
                .send(stage, attempt, &messages, seed, transcript)
                .map_err(|e| (e, attempt))?;
            match parse(&text) {
                Ok(v) => return Ok((v, attempt)),
                Err(e) => {
                    debug!(%stage, attempt, error = %e, "unparseable answer");
                    last_error = e.to_string();
                    if attempt + 1 == attempts {
                        break;
                    }
                    let repair = self
                        .templates
                        .render(TemplateId::Repair, &values([("parse-error", last_error.as_str())]), &[])
                        .map_err(|e| (e.into(), attempt))?;
                    messages.push(ChatMessage::text(Role::Assistant, text));
                    messages.extend(repair);
                }
            }
        }
        Err((
            CompletionError::ExtractionFailed { stage, last_error },
            attempts - 1,
        ))
    }
}

/// Result of the staged extraction for one set of available modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub structured: StructuredKnowledge,
    pub graph: KnowledgeGraph,
    /// Repairs used per parsed stage.
    pub repairs: BTreeMap<Stage, usize>,
    pub transcript: Transcript,
}

fn input_format(sample: &Sample) -> &'static str {
    match (sample.image.is_some(), sample.text.is_some()) {
        (true, true) => "image and text",
        (true, false) => "image",
        _ => "text",
    }
}

fn extraction_prompt(
    sample: &Sample,
    ctx: &ChatContext<'_>,
) -> Result<Vec<ChatMessage>, CompletionError> {
    let mut attachments = Vec::new();
    let mut map = BTreeMap::new();
    let template = match sample.domain_tag {
        DomainTag::General => {
            map.insert("input-format".to_string(), input_format(sample).to_string());
            map.insert("object-numbers".to_string(), ctx.config.object_count.to_string());
            TemplateId::ExtractionGeneral
        }
        DomainTag::Medical => {
            for k in 1..=2 {
                let (image, report) = match ctx.config.few_shot.get(k - 1) {
                    Some(ex) => {
                        attachments.push(ContentPart::inline_image(&ex.image));
                        (format!("<image {}>", attachments.len()), ex.report.clone())
                    }
                    None => ("(not provided)".to_string(), "(not provided)".to_string()),
                };
                map.insert(format!("example-image-{k}"), image);
                map.insert(format!("example-report-{k}"), report);
            }
            if sample.image.is_some() {
                TemplateId::ExtractionMedicalXray
            } else {
                TemplateId::ExtractionMedicalReport
            }
        }
    };
    let mut input = Vec::new();
    if let Some(img) = &sample.image {
        attachments.push(ContentPart::inline_image(img));
        input.push(format!("Image: <image {}>", attachments.len()));
    }
    if let Some(text) = &sample.text {
        input.push(format!("Text: {text}"));
    }
    map.insert("user-input".to_string(), input.join("\n"));
    Ok(ctx.templates.render(template, &map, &attachments)?)
}

/// Runs the three extraction stages over the sample's available modalities.
pub fn extract_knowledge(sample: &Sample, ctx: &ChatContext<'_>) -> Result<Extraction, CompletionError> {
    let mut transcript = Transcript::default();
    extract_into(sample, ctx, &mut transcript).map(|(structured, graph, repairs)| Extraction {
        structured,
        graph,
        repairs,
        transcript,
    })
}

type Extracted = (StructuredKnowledge, KnowledgeGraph, BTreeMap<Stage, usize>);

fn extract_into(
    sample: &Sample,
    ctx: &ChatContext<'_>,
    transcript: &mut Transcript,
) -> Result<Extracted, CompletionError> {
    if sample.available().is_empty() {
        return Err(CompletionError::NoAvailableModality);
    }
    let seed = ctx.config.base_seed;
    let domain = sample.domain_tag;
    let mut repairs = BTreeMap::new();

    let mut messages = extraction_prompt(sample, ctx)?;
    let analysis = ctx.send(Stage::Extract, 0, &messages, seed, transcript)?;

    messages.push(ChatMessage::text(Role::Assistant, analysis));
    messages.extend(ctx.templates.render(
        TemplateId::IntegrateCot,
        &values([("return-format", return_format(domain))]),
        &[],
    )?);
    let (structured, used) = ctx
        .ask_parsed(Stage::Integrate, messages, seed, transcript, |t| {
            parse_structured_extraction(t, domain)
        })
        .map_err(|(e, _)| e)?;
    repairs.insert(Stage::Integrate, used);

    let record = serde_json::to_string_pretty(&structured).expect("structured serializes");
    let kg_prompt = ctx.templates.render(
        TemplateId::BuildKg,
        &values([
            ("input-type", "structured knowledge".to_string()),
            (
                "numbers-of-relationships",
                ctx.config.kg_relationship_count.to_string(),
            ),
            ("user-input", record),
        ]),
        &[],
    )?;
    let (triplets, used) = ctx
        .ask_parsed(Stage::BuildKg, kg_prompt, seed, transcript, parse_triplets)
        .map_err(|(e, _)| e)?;
    repairs.insert(Stage::BuildKg, used);

    let graph = build_graph(&triplets, Some(structured.clone())).map_err(|e| {
        CompletionError::ExtractionFailed {
            stage: Stage::BuildKg,
            last_error: e.to_string(),
        }
    })?;
    Ok((structured, graph, repairs))
}

/// Subjects for the multi-view descriptions: nodes by descending degree,
/// ties by label, cycled to `n`.
pub fn alternation_subjects(graph: &KnowledgeGraph, n: usize) -> Vec<String> {
    let mut nodes: Vec<(&str, usize)> = graph.degrees().into_iter().collect();
    nodes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if nodes.is_empty() {
        return Vec::new();
    }
    (0..n).map(|i| nodes[i % nodes.len()].0.to_string()).collect()
}

/// Plain-text rendering of a graph for prompt context.
pub fn graph_context(graph: &KnowledgeGraph, subjects: &[String]) -> String {
    let mut out = String::from("# Knowledge Graph\n");
    let nodes: Vec<&str> = graph.nodes().iter().map(String::as_str).collect();
    out.push_str(&format!("Nodes: {}\n", nodes.join("; ")));
    if !graph.triplets.is_empty() {
        out.push_str("Relationships:\n");
        for t in &graph.triplets {
            out.push_str(&format!("- ({}, {}, {})\n", t.head, t.relation, t.tail));
        }
    }
    if let Some(s) = &graph.structured {
        if !s.attributes.is_empty() {
            out.push_str("Attributes:\n");
            for (k, v) in &s.attributes {
                out.push_str(&format!("- {k}: {v}\n"));
            }
        }
        if !s.numbers.is_empty() {
            let counts: Vec<String> = s.numbers.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("Counts: {}\n", counts.join(", ")));
        }
        if !s.style.is_empty() {
            out.push_str(&format!("Style: {}\n", s.style));
        }
        if !s.diagnoses.is_empty() {
            out.push_str(&format!("Diagnoses: {}\n", s.diagnoses.join(", ")));
        }
    }
    if !subjects.is_empty() {
        out.push_str(
            "Each description must take its listed subject as the main subject while covering all nodes and attributes above.\n",
        );
        out.push_str(&format!("Subjects (one per description, in order): {}", subjects.join("; ")));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptions {
    pub list: DescriptionList,
    /// Subject assigned to each entry.
    pub subjects: Vec<String>,
    pub repairs: usize,
}

/// Asks for exactly `n_candidates` descriptions; a short answer is padded by
/// cycling the parsed entries and flagged.
pub fn expand_descriptions(
    graph: &KnowledgeGraph,
    basic_sentence: Option<&str>,
    domain: DomainTag,
    ctx: &ChatContext<'_>,
    transcript: &mut Transcript,
) -> Result<Descriptions, CompletionError> {
    if graph.is_empty() {
        return Err(CompletionError::EmptyGraph);
    }
    let n = ctx.config.n_candidates;
    let subjects = alternation_subjects(graph, n);
    let context = graph_context(graph, &subjects);
    let sentence = basic_sentence.unwrap_or("(not available)").to_string();
    let (template, map) = match domain {
        DomainTag::General => (
            TemplateId::ExpandDescriptionsGeneral,
            values([
                ("num-prompts", n.to_string()),
                ("text-content", sentence),
                ("knowledge-graphs", context),
            ]),
        ),
        DomainTag::Medical => (
            TemplateId::ExpandDescriptionsMedical,
            values([
                ("num-prompts", n.to_string()),
                ("knowledge-graphs", context),
                ("user-input", format!("Clinical report: {sentence}")),
            ]),
        ),
    };
    let messages = ctx.templates.render(template, &map, &[])?;
    let (mut list, repairs) = ctx
        .ask_parsed(Stage::Expand, messages, ctx.config.base_seed, transcript, |t| {
            parse_description_list(t, n)
        })
        .map_err(|(e, _)| match e {
            CompletionError::ExtractionFailed { last_error, .. } => CompletionError::ExpansionFailed(last_error),
            other => other,
        })?;
    if list.short_list {
        let parsed = list.descriptions.clone();
        list.descriptions = (0..n).map(|i| parsed[i % parsed.len()].clone()).collect();
    }
    Ok(Descriptions {
        list,
        subjects,
        repairs,
    })
}

/// Serializable provenance of one candidate; the payload is kept beside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMeta {
    pub index: usize,
    pub description_used: String,
    pub seed: u64,
    pub producer: String,
    pub graph: Option<KnowledgeGraph>,
    pub graph_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub meta: CandidateMeta,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub target_modality: Modality,
    pub candidates: Vec<Candidate>,
    pub source_graph: KnowledgeGraph,
    pub descriptions: Descriptions,
    pub failures: Vec<GenerationFailure>,
}

struct Generated {
    candidate: Candidate,
    transcript: Transcript,
}

fn target_format(domain: DomainTag) -> &'static str {
    match domain {
        DomainTag::General => "caption",
        DomainTag::Medical => "clinical report",
    }
}

#[allow(clippy::too_many_arguments)]
fn generate_one(
    index: usize,
    description: &str,
    target: Modality,
    domain: DomainTag,
    source_graph: &KnowledgeGraph,
    ctx: &ChatContext<'_>,
    image: &dyn ImageBackend,
    sample_id: &str,
) -> Result<Generated, String> {
    let seed = ctx.config.base_seed + index as u64;
    let mut transcript = Transcript::default();
    let (payload, producer) = match target {
        Modality::Image => {
            let generator = ctx.config.generator(domain);
            let art = image
                .generate_image(description, generator, seed)
                .map_err(|e| e.to_string())?;
            (Payload::Image(ImageData::new(art.bytes, art.format)), art.generator_id)
        }
        Modality::Text => {
            let messages = ctx
                .templates
                .render(
                    TemplateId::RefineText,
                    &values([
                        ("target-format", target_format(domain).to_string()),
                        ("description", description.to_string()),
                        ("knowledge-graphs", graph_context(source_graph, &[])),
                    ]),
                    &[],
                )
                .map_err(|e| e.to_string())?;
            let text = ctx
                .send(Stage::Refine, 0, &messages, seed, &mut transcript)
                .map_err(|e| e.to_string())?;
            let text = text.trim().to_string();
            if text.is_empty() {
                return Err("refined text is empty".into());
            }
            (Payload::Text(text), ctx.config.chat_model.clone())
        }
    };
    let candidate_sample = Sample::from_payload(format!("{sample_id}#{index}"), &payload, domain);
    let (graph, graph_error) = match extract_into(&candidate_sample, ctx, &mut transcript) {
        Ok((_, g, _)) => (Some(g), None),
        Err(e) => {
            warn!(sample_id, index, error = %e, "candidate extraction failed");
            (None, Some(e.to_string()))
        }
    };
    Ok(Generated {
        candidate: Candidate {
            meta: CandidateMeta {
                index,
                description_used: description.to_string(),
                seed,
                producer,
                graph,
                graph_error,
            },
            payload,
        },
        transcript,
    })
}

/// Generates candidates for `target` from the extracted source knowledge.
/// `sample` must already have the target modality withheld.
pub fn generate_candidates(
    sample: &Sample,
    target: Modality,
    source: &Extraction,
    ctx: &ChatContext<'_>,
    image: &dyn ImageBackend,
    transcript: &mut Transcript,
) -> Result<CandidateSet, CompletionError> {
    if sample.available().contains(&target) {
        return Err(CompletionError::TargetPresent(target));
    }
    let basic = match target {
        Modality::Image => sample.text.as_deref(),
        Modality::Text => None,
    };
    let descriptions = expand_descriptions(&source.graph, basic, sample.domain_tag, ctx, transcript)?;
    let n = descriptions.list.descriptions.len();

    let slots: Vec<Mutex<Option<Result<Generated, String>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = ctx.config.workers.clamp(1, n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let result = generate_one(
                    i,
                    &descriptions.list.descriptions[i],
                    target,
                    sample.domain_tag,
                    &source.graph,
                    ctx,
                    image,
                    &sample.sample_id,
                );
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    for (index, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().unwrap().expect("every slot is filled") {
            Ok(g) => {
                transcript.extend(g.transcript);
                candidates.push(g.candidate);
            }
            Err(error) => failures.push(GenerationFailure { index, error }),
        }
    }
    if candidates.is_empty() {
        return Err(CompletionError::GenerationFailed(failures));
    }
    Ok(CandidateSet {
        target_modality: target,
        candidates,
        source_graph: source.graph.clone(),
        descriptions,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub weights: Weights,
    pub mode: ScoreMode,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            weights: Weights::EQUAL,
            mode: ScoreMode::Normalized,
        }
    }
}

/// Full result for one sample with a withheld modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub missing: Modality,
    pub available: Payload,
    pub extraction: Extraction,
    pub candidates: CandidateSet,
    pub ranking: Ranking,
    pub transcript: Transcript,
}

impl SampleOutcome {
    pub fn chosen(&self) -> &Candidate {
        &self.candidates.candidates[self.ranking.best_index]
    }
}

/// Ranks a candidate set against the available payload and its graph.
pub fn rank_set(
    available: &Payload,
    available_graph: &KnowledgeGraph,
    set: &CandidateSet,
    ranking: RankingConfig,
    embed: &dyn EmbeddingBackend,
) -> Result<Ranking, RankingError> {
    let scored: Vec<Scored<'_>> = set
        .candidates
        .iter()
        .map(|c| Scored::new(&c.payload, c.meta.graph.as_ref()))
        .collect();
    rank_candidates(
        Scored::new(available, Some(available_graph)),
        &scored,
        ranking.weights,
        ranking.mode,
        embed,
    )
}

/// Extract, generate and rank for one sample whose `missing` modality is
/// withheld. The available side must be a single modality.
pub fn complete_sample(
    sample: &Sample,
    missing: Modality,
    templates: &TemplateSet,
    config: &GenerationConfig,
    ranking: RankingConfig,
    backends: &Backends,
) -> Result<SampleOutcome, (CompletionError, Transcript)> {
    let masked = sample.without(missing);
    let available = masked
        .payload(missing.other())
        .ok_or((CompletionError::NoAvailableModality, Transcript::default()))?;
    let ctx = ChatContext {
        chat: backends.chat.as_ref(),
        templates,
        config,
    };
    let mut transcript = Transcript::default();
    let extraction = match extract_into(&masked, &ctx, &mut transcript) {
        Ok((structured, graph, repairs)) => Extraction {
            structured,
            graph,
            repairs,
            transcript: Transcript::default(),
        },
        Err(e) => return Err((e, transcript)),
    };
    let candidates = match generate_candidates(&masked, missing, &extraction, &ctx, backends.image.as_ref(), &mut transcript) {
        Ok(c) => c,
        Err(e) => return Err((e, transcript)),
    };
    let ranked = match rank_set(&available, &extraction.graph, &candidates, ranking, backends.embed.as_ref()) {
        Ok(r) => r,
        Err(e) => return Err((e.into(), transcript)),
    };
    Ok(SampleOutcome {
        sample_id: sample.sample_id.clone(),
        missing,
        available,
        extraction,
        candidates,
        ranking: ranked,
        transcript,
    })
}
