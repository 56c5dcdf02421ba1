//! Deterministic in-process backends for tests and offline runs.
//!
//! - [`MockEmbedding`]: seeded hash of the payload projected to 64 dims.
//! - [`MockImageGenerator`]: 64x64 solid-color PNG whose color hashes
//!   `(prompt, seed)`; the prompt is stored in an iTXt chunk so downstream
//!   mocks can "see" what was drawn.
//! - [`ScriptedChat`]: canned answers keyed by message hash or substring.
//! - [`SyntheticChat`]: derives well-formed answers from the prompt itself,
//!   enough to drive the whole pipeline end to end.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, EmbeddingBackend, EmbeddingVector,
    ImageArtifact, ImageBackend, ModelTag, Usage,
};
use crate::prompting::{extract_json_block, BlockKind, ChatMessage, ContentPart, Role};
use crate::types::{ImageFormat, Payload};

pub const MOCK_EMBEDDING_DIM: usize = 64;
pub const MOCK_IMAGE_SIZE: u32 = 64;
const PROMPT_KEY: &str = "prompt";

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Hex SHA-256 of the canonical JSON of a message list.
pub fn message_hash(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(sha256(&[&bytes]))
}

/// Unit-norm pseudo-random vector seeded by `(model_tag, modality, payload)`.
pub fn hash_embedding(payload: &Payload, model_tag: ModelTag) -> EmbeddingVector {
    let seed = sha256(&[
        b"kbridge-mock-embedding",
        model_tag.as_str().as_bytes(),
        payload.modality().as_str().as_bytes(),
        payload.as_bytes(),
    ]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let values: Vec<f64> = (0..MOCK_EMBEDDING_DIM)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    EmbeddingVector::normalized(model_tag, payload.modality(), values)
        .expect("gaussian sample is finite and nonzero")
}

#[derive(Debug, Default, Clone)]
pub struct MockEmbedding;

impl EmbeddingBackend for MockEmbedding {
    fn backend_id(&self) -> &str {
        "mock-embedding"
    }

    fn embed(&self, payload: &Payload, model_tag: ModelTag) -> Result<EmbeddingVector, BackendError> {
        if payload.is_empty() {
            return Err(BackendError::InvalidRequest("empty payload".into()));
        }
        Ok(hash_embedding(payload, model_tag))
    }
}

/// Explicit payload-to-vector table; unknown payloads fail with a transport
/// error, which lets tests exercise embedding outages.
#[derive(Debug, Default)]
pub struct FixedEmbedding {
    table: HashMap<(ModelTag, Vec<u8>), Vec<f64>>,
    calls: AtomicUsize,
}

impl FixedEmbedding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, model_tag: ModelTag, payload: &Payload, values: Vec<f64>) -> Self {
        self.table.insert((model_tag, payload.as_bytes().to_vec()), values);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EmbeddingBackend for FixedEmbedding {
    fn backend_id(&self) -> &str {
        "fixed-embedding"
    }

    fn embed(&self, payload: &Payload, model_tag: ModelTag) -> Result<EmbeddingVector, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let values = self
            .table
            .get(&(model_tag, payload.as_bytes().to_vec()))
            .ok_or_else(|| BackendError::transport("no fixed embedding for payload"))?;
        EmbeddingVector::normalized(model_tag, payload.modality(), values.clone())
    }
}

/// Encodes a 64x64 solid-color RGB PNG carrying `prompt` as text metadata.
pub fn solid_png(rgb: [u8; 3], prompt: &str) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, MOCK_IMAGE_SIZE, MOCK_IMAGE_SIZE);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_itxt_chunk(PROMPT_KEY.to_string(), prompt.to_string())
            .expect("itxt chunk");
        let mut writer = enc.write_header().expect("png header");
        let data: Vec<u8> = std::iter::repeat_n(rgb, (MOCK_IMAGE_SIZE * MOCK_IMAGE_SIZE) as usize)
            .flatten()
            .collect();
        writer.write_image_data(&data).expect("png data");
    }
    out
}

/// Reads back the prompt stored by [`solid_png`], if any.
pub fn png_prompt(bytes: &[u8]) -> Option<String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = decoder.read_info().ok()?;
    reader
        .info()
        .utf8_text
        .iter()
        .find(|c| c.keyword == PROMPT_KEY)
        .and_then(|c| c.get_text().ok())
}

#[derive(Debug, Clone)]
pub struct MockImageGenerator {
    generators: BTreeSet<String>,
    calls: Arc<AtomicUsize>,
}

impl MockImageGenerator {
    pub fn new<I, S>(generators: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            generators: generators.into_iter().map(Into::into).collect(),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for MockImageGenerator {
    fn default() -> Self {
        Self::new(["sdxl-1.0", "cheff"])
    }
}

impl ImageBackend for MockImageGenerator {
    fn backend_id(&self) -> &str {
        "mock-image"
    }

    fn generate_image(&self, prompt: &str, generator_id: &str, seed: u64) -> Result<ImageArtifact, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if !self.generators.contains(generator_id) {
            return Err(BackendError::GeneratorUnavailable(generator_id.to_string()));
        }
        let h = sha256(&[prompt.as_bytes(), &seed.to_le_bytes()]);
        Ok(ImageArtifact {
            bytes: solid_png([h[0], h[1], h[2]], prompt),
            format: ImageFormat::Png,
            prompt_used: prompt.to_string(),
            generator_id: generator_id.to_string(),
            seed,
        })
    }
}

struct Rule {
    needle: String,
    responses: Vec<String>,
    next: AtomicUsize,
}

/// Canned chat responses.
///
/// Exact-hash entries win; otherwise the first substring rule matching the
/// last user message answers, walking its response list in order and
/// repeating the final entry. Unmatched requests go to the fallback, or fail.
#[derive(Default)]
pub struct ScriptedChat {
    by_hash: HashMap<String, String>,
    rules: Vec<Rule>,
    fallback: Option<Box<dyn ChatBackend>>,
    calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_hash(mut self, hash: impl Into<String>, response: impl Into<String>) -> Self {
        self.by_hash.insert(hash.into(), response.into());
        self
    }

    pub fn on_contains<S: Into<String>>(mut self, needle: impl Into<String>, responses: Vec<S>) -> Self {
        let responses: Vec<String> = responses.into_iter().map(Into::into).collect();
        assert!(!responses.is_empty(), "rule needs at least one response");
        self.rules.push(Rule {
            needle: needle.into(),
            responses,
            next: AtomicUsize::new(0),
        });
        self
    }

    pub fn with_fallback(mut self, fallback: impl ChatBackend + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

fn last_user_text(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(ChatMessage::text_content)
        .unwrap_or_default()
}

fn reply(text: String) -> ChatResponse {
    let completion_tokens = text.len().div_ceil(4) as u64;
    ChatResponse {
        text,
        usage: Usage {
            prompt_tokens: 0,
            completion_tokens,
        },
    }
}

impl ChatBackend for ScriptedChat {
    fn backend_id(&self) -> &str {
        "scripted-chat"
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        if let Some(r) = self.by_hash.get(&message_hash(&request.messages)) {
            return Ok(reply(r.clone()));
        }
        let last = last_user_text(&request.messages);
        for rule in &self.rules {
            if last.contains(&rule.needle) {
                let i = rule.next.fetch_add(1, Ordering::SeqCst);
                let text = rule.responses[i.min(rule.responses.len() - 1)].clone();
                return Ok(reply(text));
            }
        }
        match &self.fallback {
            Some(f) => f.chat(request),
            None => Err(BackendError::transport("no scripted response for request")),
        }
    }
}

const STOPWORDS: &[&str] = &[
    "the", "and", "with", "are", "for", "that", "this", "from", "has", "have", "was", "were", "its",
    "his", "her", "their", "there", "into", "onto", "over", "under", "while", "which", "some", "two",
    "three", "one", "four", "five", "six", "seven", "photo", "image", "picture", "text", "together",
    "featuring", "near", "next", "very", "also", "shows", "showing", "seen", "view", "not", "any",
    "all", "out", "off", "down", "around", "about", "other", "each", "being", "than", "then",
];

const VOCAB: &[&str] = &[
    "dog", "cat", "bicycle", "car", "tree", "bench", "umbrella", "person", "horse", "boat", "kite",
    "clock", "pizza", "laptop", "train", "bird", "bus", "chair", "sheep", "giraffe", "surfboard",
    "table", "cake", "bottle",
];

const ABNORMALITIES: &[(&str, &str)] = &[
    ("opacity", "Lung Opacity"),
    ("nodule", "Lung Lesion"),
    ("lesion", "Lung Lesion"),
    ("effusion", "Pleural Effusion"),
    ("cardiomegaly", "Cardiomegaly"),
    ("edema", "Edema"),
    ("consolidation", "Consolidation"),
    ("pneumonia", "Pneumonia"),
    ("atelectasis", "Atelectasis"),
    ("pneumothorax", "Pneumothorax"),
    ("fracture", "Fracture"),
];

const RELATIONS: &[&str] = &["next to", "holds", "is part of", "faces", "describes", "supports"];

/// Chat double that answers every pipeline stage with a well-formed payload
/// derived from the request content. Pure function of the request.
#[derive(Debug, Default, Clone)]
pub struct SyntheticChat {
    calls: Arc<AtomicUsize>,
}

impl SyntheticChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Extract,
    Integrate,
    BuildKg,
    Expand,
    Refine,
}

fn stage_of(text: &str) -> Option<Stage> {
    if text.contains("integrate the previous result") {
        Some(Stage::Integrate)
    } else if text.contains("distinct relationships") {
        Some(Stage::BuildKg)
    } else if text.contains("high-quality description") || text.contains("meaningful clinical description") {
        Some(Stage::Expand)
    } else if text.contains("Write the missing") {
        Some(Stage::Refine)
    } else if text.contains("# Instruction") {
        Some(Stage::Extract)
    } else {
        None
    }
}

fn content_words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in text
        .to_lowercase()
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| w.len() >= 3 && !STOPWORDS.contains(w))
    {
        if !out.iter().any(|o| o == w) {
            out.push(w.to_string());
        }
    }
    out
}

fn capture_usize(re: &str, text: &str) -> Option<usize> {
    Regex::new(re).ok()?.captures(text)?.get(1)?.as_str().parse().ok()
}

/// Words describing the sample under analysis: the `Text:` input and any
/// attached images (their embedded prompt, or a hash-picked vocabulary).
fn observed_words(messages: &[ChatMessage]) -> Vec<String> {
    let mut words = Vec::new();
    let first_user = messages.iter().find(|m| m.role == Role::User);
    let Some(first_user) = first_user else {
        return words;
    };
    let text = first_user.text_content();
    if let Some(start) = text.find("Text: ") {
        let rest = &text[start + 6..];
        let end = rest.find("\nPlease process each point").unwrap_or(rest.len());
        words.extend(content_words(&rest[..end]));
    }
    for part in &first_user.parts {
        if let ContentPart::Image { data, .. } = part {
            let Ok(bytes) = base64::engine::general_purpose::STANDARD.decode(data) else {
                continue;
            };
            match png_prompt(&bytes) {
                Some(prompt) => words.extend(content_words(&prompt)),
                None => {
                    let h = sha256(&[&bytes]);
                    words.extend(h.iter().take(5).map(|b| VOCAB[*b as usize % VOCAB.len()].to_string()));
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    words.retain(|w| seen.insert(w.clone()));
    words
}

fn digest_u64(parts: &[&[u8]]) -> u64 {
    let h = sha256(parts);
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

impl SyntheticChat {
    fn answer(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let user_texts: Vec<String> = req
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(ChatMessage::text_content)
            .collect();
        let stage = user_texts
            .iter()
            .rev()
            .find_map(|t| stage_of(t))
            .ok_or_else(|| BackendError::transport("synthetic chat: unrecognized prompt"))?;
        let last = user_texts.last().cloned().unwrap_or_default();
        let first = user_texts.first().cloned().unwrap_or_default();
        let medical = first.contains("radiologist") || req.messages.iter().any(|m| m.text_content().contains("radiologist"));
        match stage {
            Stage::Extract => Ok(self.extract(req, &first, medical)),
            Stage::Integrate => Ok(self.integrate(req, &first, &last)),
            Stage::BuildKg => Ok(self.build_kg(&last)),
            Stage::Expand => Ok(self.expand(&last)),
            Stage::Refine => Ok(self.refine(&last)),
        }
    }

    fn objects(&self, req: &ChatRequest, first: &str) -> Vec<String> {
        let n = capture_usize(r"Identify the top (\d+) objects", first).unwrap_or(5);
        let mut words = observed_words(&req.messages);
        words.truncate(n.max(1));
        if words.is_empty() {
            words.push("scene".into());
        }
        words
    }

    fn extract(&self, req: &ChatRequest, first: &str, medical: bool) -> String {
        if medical {
            let words = observed_words(&req.messages);
            return format!(
                "1. The lungs, heart and trachea are visible.\n2. Findings: {}.\n3. Significance depends on the findings.\n4. Report drafted.",
                words.join(", ")
            );
        }
        let objects = self.objects(req, first);
        format!(
            "1. Objects: {}.\n2. Each object appears once or twice.\n3. Attributes follow the input.\n4. Style: plain.",
            objects.join(", ")
        )
    }

    fn integrate(&self, req: &ChatRequest, first: &str, last: &str) -> String {
        if last.contains("Structured Analysis") {
            return self.integrate_medical(req);
        }
        let objects = self.objects(req, first);
        let mut numbers = serde_json::Map::new();
        let mut attributes = serde_json::Map::new();
        for o in &objects {
            let h = digest_u64(&[o.as_bytes()]);
            numbers.insert(o.clone(), json!(1 + h % 3));
            attributes.insert(o.clone(), json!(format!("{o} as described in the input")));
        }
        let style = if first.contains("Text: ") { "descriptive caption" } else { "photograph" };
        let body = json!({"objects": objects, "numbers": numbers, "attributes": attributes, "style": style});
        format!(
            "Here is the structured result:\n```json\n{}\n```",
            serde_json::to_string_pretty(&body).unwrap()
        )
    }

    fn integrate_medical(&self, req: &ChatRequest) -> String {
        let words = observed_words(&req.messages);
        let found: Vec<(&str, &str)> = ABNORMALITIES
            .iter()
            .filter(|(k, _)| words.iter().any(|w| w.starts_with(k)))
            .copied()
            .collect();
        let (abnormality, diagnoses) = if found.is_empty() {
            ("None".to_string(), "'No Finding'".to_string())
        } else {
            let names: Vec<&str> = found.iter().map(|(k, _)| *k).collect();
            let mut diags: Vec<String> = Vec::new();
            for (_, d) in &found {
                let quoted = format!("'{d}'");
                if !diags.contains(&quoted) {
                    diags.push(quoted);
                }
            }
            (names.join(", "), diags.join(", "))
        };
        let lung = if found.is_empty() { "Normal" } else { "Abnormal" };
        format!(
            "# Structured Analysis\n1. **Anatomical Structures**:\n   - Lungs: [Left Upper Lobe: Normal], [Right Lower Lobe: {lung}]\n   - Heart: [Normal]\n   - Trachea: [Normal]\n\n2. **Type of Abnormality**:\n   - Identified Abnormality: {abnormality}\n   - Characteristics: [size: 2 cm, shape: round]\n\n3. **Distribution and Location**:\n   - Side: [Unilateral]\n   - Location: [Lower lobe]\n   - Extent: [Localized]\n\n4. **Clinical Implication**:\n   - Possible Diagnosis: [{diagnoses}]\n   - Recommended Action: [Clinical follow-up]\n"
        )
    }

    fn build_kg(&self, last: &str) -> String {
        let n = capture_usize(r"exactly (\d+) distinct relationships", last).unwrap_or(5);
        let objects: Vec<String> = extract_json_block(last, Some(BlockKind::Object))
            .and_then(|v| v.get("objects").cloned())
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        let mut triplets = Vec::new();
        'outer: for gap in 1..objects.len().max(1) {
            for i in 0..objects.len().saturating_sub(gap) {
                if triplets.len() >= n {
                    break 'outer;
                }
                let (h, t) = (&objects[i], &objects[i + gap]);
                let rel = RELATIONS[(digest_u64(&[h.as_bytes(), t.as_bytes()]) % RELATIONS.len() as u64) as usize];
                triplets.push(json!({"head": h, "relation": rel, "tail": t}));
            }
        }
        format!("```json\n{}\n```", serde_json::to_string_pretty(&Value::Array(triplets)).unwrap())
    }

    fn expand(&self, last: &str) -> String {
        let n = capture_usize(r"(?:to|generate) (\d+) (?:high-quality|meaningful)", last).unwrap_or(1);
        let subjects: Vec<String> = last
            .lines()
            .find_map(|l| l.strip_prefix("Subjects (one per description, in order): "))
            .map(|s| s.split("; ").map(str::to_string).collect())
            .unwrap_or_else(|| vec!["scene".into()]);
        let nodes: Vec<String> = last
            .lines()
            .find_map(|l| l.strip_prefix("Nodes: "))
            .map(|s| s.split("; ").map(str::to_string).collect())
            .unwrap_or_default();
        let descriptions: Vec<String> = (0..n)
            .map(|i| {
                let subject = &subjects[i % subjects.len()];
                let others: Vec<&str> = nodes
                    .iter()
                    .filter(|o| *o != subject)
                    .filter(|o| !digest_u64(&[o.as_bytes(), &(i as u64).to_le_bytes()]).is_multiple_of(4))
                    .map(String::as_str)
                    .collect();
                if others.is_empty() {
                    format!("A detailed view of {subject}")
                } else {
                    format!("A detailed view of {subject} with {}", others.join(", "))
                }
            })
            .collect();
        serde_json::to_string_pretty(&descriptions).unwrap()
    }

    fn refine(&self, last: &str) -> String {
        let description = last
            .lines()
            .find_map(|l| l.strip_prefix("- **Description**: "))
            .unwrap_or("an empty scene");
        format!("{}.", description.trim_end_matches('.'))
    }
}

impl ChatBackend for SyntheticChat {
    fn backend_id(&self) -> &str {
        "synthetic-chat"
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.answer(request).map(reply)
    }
}
