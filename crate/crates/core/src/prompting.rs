//! Prompt templates and model-response parsing.
//!
//! Templates live as text files under `prompts/v1/`. A file is a sequence of
//! messages, each introduced by a `=== <role>` line; `[placeholder-name]`
//! tokens are substituted in a single pass at render time.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::kgraph::{normalize_label, StructuredKnowledge, Triplet};
use crate::types::{DomainTag, ImageData};

/// Default number of objects the extraction prompt asks for.
pub const DEFAULT_OBJECT_COUNT: usize = 6;

/// The fourteen diagnosis labels accepted in medical extractions.
pub const DIAGNOSIS_LABELS: [&str; 14] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
    #[error("missing placeholder '{0}'")]
    MissingPlaceholder(String),
    #[error("malformed template file '{0}': {1}")]
    MalformedTemplate(String, String),
    #[error("i/o error loading templates: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no structured block found in response")]
    NoStructuredBlock,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown diagnosis label '{0}'")]
    UnknownDiagnosisLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ExtractionGeneral,
    ExtractionMedicalXray,
    ExtractionMedicalReport,
    IntegrateCot,
    BuildKg,
    ExpandDescriptionsGeneral,
    ExpandDescriptionsMedical,
    RefineText,
    Repair,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::ExtractionGeneral,
        TemplateId::ExtractionMedicalXray,
        TemplateId::ExtractionMedicalReport,
        TemplateId::IntegrateCot,
        TemplateId::BuildKg,
        TemplateId::ExpandDescriptionsGeneral,
        TemplateId::ExpandDescriptionsMedical,
        TemplateId::RefineText,
        TemplateId::Repair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ExtractionGeneral => "extraction_general",
            TemplateId::ExtractionMedicalXray => "extraction_medical_xray",
            TemplateId::ExtractionMedicalReport => "extraction_medical_report",
            TemplateId::IntegrateCot => "integrate_cot",
            TemplateId::BuildKg => "build_kg",
            TemplateId::ExpandDescriptionsGeneral => "expand_descriptions_general",
            TemplateId::ExpandDescriptionsMedical => "expand_descriptions_medical",
            TemplateId::RefineText => "refine_text",
            TemplateId::Repair => "repair",
        }
    }

    fn builtin_source(self) -> &'static str {
        match self {
            TemplateId::ExtractionGeneral => include_str!("../prompts/v1/extraction_general.txt"),
            TemplateId::ExtractionMedicalXray => {
                include_str!("../prompts/v1/extraction_medical_xray.txt")
            }
            TemplateId::ExtractionMedicalReport => {
                include_str!("../prompts/v1/extraction_medical_report.txt")
            }
            TemplateId::IntegrateCot => include_str!("../prompts/v1/integrate_cot.txt"),
            TemplateId::BuildKg => include_str!("../prompts/v1/build_kg.txt"),
            TemplateId::ExpandDescriptionsGeneral => {
                include_str!("../prompts/v1/expand_descriptions_general.txt")
            }
            TemplateId::ExpandDescriptionsMedical => {
                include_str!("../prompts/v1/expand_descriptions_medical.txt")
            }
            TemplateId::RefineText => include_str!("../prompts/v1/refine_text.txt"),
            TemplateId::Repair => include_str!("../prompts/v1/repair.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

/// Return-format block inserted into the integration prompt.
pub fn return_format(domain: DomainTag) -> &'static str {
    match domain {
        DomainTag::General => include_str!("../prompts/v1/return_format_general.txt"),
        DomainTag::Medical => include_str!("../prompts/v1/return_format_medical.txt"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(format!("unknown role '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    /// Inline image, base64 encoded.
    Image { mime: String, data: String },
    /// Image by reference (URL or path understood by the backend).
    ImageRef { url: String },
}

impl ContentPart {
    pub fn text(text: impl Into<String>) -> Self {
        ContentPart::Text { text: text.into() }
    }

    pub fn inline_image(img: &ImageData) -> Self {
        ContentPart::Image {
            mime: img.format.mime().to_string(),
            data: base64::engine::general_purpose::STANDARD.encode(&img.bytes),
        }
    }

    pub fn is_image(&self) -> bool {
        !matches!(self, ContentPart::Text { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![ContentPart::text(text)],
        }
    }

    /// Concatenation of the text parts.
    pub fn text_content(&self) -> String {
        let mut out = String::new();
        for p in &self.parts {
            if let ContentPart::Text { text } = p {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(text);
            }
        }
        out
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| p.is_image()).count()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.parts.is_empty() {
            return Err("message has no parts".into());
        }
        if self.role != Role::User && self.image_count() > 0 {
            return Err("image parts are only allowed in user messages".into());
        }
        Ok(())
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([a-z][a-z0-9]*(?:-[a-z0-9]+)*)\]").unwrap())
}

/// A parsed template: ordered `(role, content)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub messages: Vec<(Role, String)>,
    pub placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn parse(id: TemplateId, source: &str) -> Result<Self, PromptError> {
        let mut messages: Vec<(Role, Vec<&str>)> = Vec::new();
        for line in source.lines() {
            if let Some(role) = line.strip_prefix("=== ") {
                let role = role
                    .parse()
                    .map_err(|e| PromptError::MalformedTemplate(id.to_string(), e))?;
                messages.push((role, Vec::new()));
            } else if let Some((_, body)) = messages.last_mut() {
                body.push(line);
            }
        }
        if messages.is_empty() {
            return Err(PromptError::MalformedTemplate(
                id.to_string(),
                "no messages".into(),
            ));
        }
        let messages: Vec<(Role, String)> = messages
            .into_iter()
            .map(|(r, lines)| (r, lines.join("\n").trim_end().to_string()))
            .collect();
        let placeholders = messages
            .iter()
            .flat_map(|(_, c)| placeholder_re().captures_iter(c).map(|m| m[1].to_string()))
            .collect();
        Ok(Self {
            id,
            messages,
            placeholders,
        })
    }

    /// Substitutes placeholders and appends `attachments` to the last user message.
    pub fn render(
        &self,
        values: &BTreeMap<String, String>,
        attachments: &[ContentPart],
    ) -> Result<Vec<ChatMessage>, PromptError> {
        if let Some(missing) = self.placeholders.iter().find(|p| !values.contains_key(*p)) {
            return Err(PromptError::MissingPlaceholder(missing.clone()));
        }
        let mut out: Vec<ChatMessage> = self
            .messages
            .iter()
            .map(|(role, content)| {
                let text = placeholder_re().replace_all(content, |caps: &regex::Captures| {
                    values[&caps[1]].clone()
                });
                ChatMessage::text(*role, text.into_owned())
            })
            .collect();
        if !attachments.is_empty() {
            let last_user = out
                .iter_mut()
                .rev()
                .find(|m| m.role == Role::User)
                .ok_or_else(|| {
                    PromptError::MalformedTemplate(self.id.to_string(), "no user message".into())
                })?;
            last_user.parts.extend(attachments.iter().cloned());
        }
        Ok(out)
    }
}

/// The full set of templates, built-in or loaded from a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| {
                let t = PromptTemplate::parse(id, id.builtin_source())
                    .expect("built-in templates are well formed");
                (id, t)
            })
            .collect();
        Self { templates }
    }

    /// Loads `<id>.txt` files from `dir`; ids without a file are absent and
    /// fail with `UnknownTemplate` at render time.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{id}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(src) => {
                    templates.insert(id, PromptTemplate::parse(id, &src)?);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(PromptError::Io(format!("{}: {e}", path.display()))),
            }
        }
        Ok(Self { templates })
    }

    pub fn get(&self, id: TemplateId) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn render(
        &self,
        id: TemplateId,
        values: &BTreeMap<String, String>,
        attachments: &[ContentPart],
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.get(id)?.render(values, attachments)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Renders a built-in template by its string id.
pub fn render(
    template_id: &str,
    values: &BTreeMap<String, String>,
    attachments: &[ContentPart],
) -> Result<Vec<ChatMessage>, PromptError> {
    let id: TemplateId = template_id.parse()?;
    TemplateSet::builtin().render(id, values, attachments)
}

/// Convenience for building placeholder maps in call sites and tests.
pub fn values<K: Into<String>, V: Into<String>>(
    pairs: impl IntoIterator<Item = (K, V)>,
) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.into(), v.into()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Object,
    Array,
}

/// Finds the first `{`/`[` whose balanced close delimits a valid JSON
/// document. Brackets inside JSON strings are ignored.
pub fn extract_json_block(text: &str, kind: Option<BlockKind>) -> Option<Value> {
    let bytes = text.as_bytes();
    for (start, &b) in bytes.iter().enumerate() {
        let wanted = matches!(
            (b, kind),
            (b'{', None | Some(BlockKind::Object)) | (b'[', None | Some(BlockKind::Array))
        );
        if !wanted {
            continue;
        }
        if let Some(end) = matching_close(bytes, start) {
            if let Ok(v) = serde_json::from_str::<Value>(&text[start..=end]) {
                return Some(v);
            }
        }
    }
    None
}

fn matching_close(bytes: &[u8], start: usize) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn schema(msg: impl Into<String>) -> ParseError {
    ParseError::SchemaViolation(msg.into())
}

fn label(raw: &str, what: &str) -> Result<String, ParseError> {
    normalize_label(raw).map_err(|_| schema(format!("empty {what}")))
}

fn text_value(v: &Value, what: &str) -> Result<String, ParseError> {
    match v {
        Value::String(s) => Ok(s.trim().to_string()),
        Value::Array(items) => {
            let parts: Result<Vec<_>, _> = items.iter().map(|i| text_value(i, what)).collect();
            Ok(parts?.join("; "))
        }
        _ => Err(schema(format!("{what} must be a string"))),
    }
}

fn count_value(v: &Value, key: &str) -> Result<u64, ParseError> {
    if let Some(n) = v.as_u64() {
        return Ok(n);
    }
    if let Some(f) = v.as_f64() {
        if f >= 0.0 && f.fract() == 0.0 && f <= u32::MAX as f64 {
            return Ok(f as u64);
        }
    }
    if let Some(s) = v.as_str() {
        if let Ok(n) = s.trim().parse::<u64>() {
            return Ok(n);
        }
    }
    Err(schema(format!("count for '{key}' must be a non-negative integer")))
}

/// Parses the integration-stage answer into structured knowledge.
pub fn parse_structured_extraction(
    response: &str,
    domain: DomainTag,
) -> Result<StructuredKnowledge, ParseError> {
    let mut sk = match domain {
        DomainTag::General => parse_general(response)?,
        DomainTag::Medical => parse_medical(response)?,
    };
    sk.domain_tag = domain;
    sk.validate()
        .map_err(|e| schema(e.to_string()))?;
    Ok(sk)
}

fn parse_general(response: &str) -> Result<StructuredKnowledge, ParseError> {
    let value =
        extract_json_block(response, Some(BlockKind::Object)).ok_or(ParseError::NoStructuredBlock)?;
    let obj = value.as_object().ok_or_else(|| schema("expected an object"))?;

    let raw_objects = obj
        .get("objects")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("'objects' must be an array"))?;
    let mut objects = Vec::new();
    let mut seen = HashSet::new();
    for o in raw_objects {
        let s = o.as_str().ok_or_else(|| schema("object names must be strings"))?;
        let l = label(s, "object name")?;
        if seen.insert(l.clone()) {
            objects.push(l);
        }
    }

    let mut numbers = BTreeMap::new();
    if let Some(n) = obj.get("numbers") {
        let n = n.as_object().ok_or_else(|| schema("'numbers' must be an object"))?;
        for (k, v) in n {
            let key = label(k, "numbers key")?;
            if !seen.contains(&key) {
                return Err(schema(format!("numbers key '{key}' is not a listed object")));
            }
            let c = count_value(v, &key)?;
            numbers.entry(key).or_insert(c);
        }
    }

    let mut attributes = BTreeMap::new();
    if let Some(a) = obj.get("attributes") {
        let a = a.as_object().ok_or_else(|| schema("'attributes' must be an object"))?;
        for (k, v) in a {
            let key = label(k, "attributes key")?;
            if !seen.contains(&key) {
                return Err(schema(format!("attributes key '{key}' is not a listed object")));
            }
            let text = text_value(v, "attribute")?;
            attributes.entry(key).or_insert(text);
        }
    }

    let style = match obj.get("style") {
        None | Some(Value::Null) => String::new(),
        Some(v) => text_value(v, "style")?,
    };
    let diagnoses = match obj.get("diagnoses") {
        None => Vec::new(),
        Some(v) => v
            .as_array()
            .ok_or_else(|| schema("'diagnoses' must be an array"))?
            .iter()
            .map(|d| d.as_str().ok_or_else(|| schema("diagnoses must be strings")).and_then(canonical_diagnosis))
            .collect::<Result<_, _>>()?,
    };

    Ok(StructuredKnowledge {
        objects,
        numbers,
        attributes,
        style,
        diagnoses,
        domain_tag: DomainTag::General,
    })
}

fn canonical_diagnosis(raw: &str) -> Result<String, ParseError> {
    let cleaned = raw.trim().trim_matches(|c: char| "'\"`[]. ".contains(c));
    DIAGNOSIS_LABELS
        .iter()
        .find(|l| l.eq_ignore_ascii_case(cleaned))
        .map(|l| l.to_string())
        .ok_or_else(|| ParseError::UnknownDiagnosisLabel(cleaned.to_string()))
}

fn section_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*#*\s*(\d)\.\s*\*\*([^*]+)\*\*\s*:?").unwrap())
}

/// Bullets of one section as `(key, value)` pairs; continuation lines are
/// appended to the previous value.
fn section_bullets(body: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in body.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(item) = trimmed.strip_prefix("- ").or_else(|| trimmed.strip_prefix("* ")) {
            let item = item.trim().trim_start_matches("**");
            match item.split_once(':') {
                Some((k, v)) => out.push((
                    k.trim().trim_end_matches("**").trim().to_string(),
                    v.trim().trim_start_matches("**").trim().to_string(),
                )),
                None => out.push((String::new(), item.to_string())),
            }
        } else if let Some(last) = out.last_mut() {
            last.1.push(' ');
            last.1.push_str(trimmed);
        }
    }
    out
}

fn strip_brackets(s: &str) -> String {
    s.replace(['[', ']'], "").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_none_finding(s: &str) -> bool {
    let s = s.trim().trim_end_matches('.').to_ascii_lowercase();
    matches!(s.as_str(), "" | "none" | "n/a" | "no abnormality" | "no abnormalities" | "no finding" | "normal")
}

/// Sectioned radiology answer: numbered `**Header**:` sections with
/// `- Key: value` bullets.
fn parse_medical(response: &str) -> Result<StructuredKnowledge, ParseError> {
    let headers: Vec<(usize, usize, String)> = section_re()
        .captures_iter(response)
        .map(|c| {
            let m = c.get(0).unwrap();
            (m.start(), m.end(), c[2].trim().to_ascii_lowercase())
        })
        .collect();
    if headers.is_empty() {
        return Err(ParseError::NoStructuredBlock);
    }
    let mut sections: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for (i, (_, end, name)) in headers.iter().enumerate() {
        let stop = headers.get(i + 1).map_or(response.len(), |h| h.0);
        sections
            .entry(name.clone())
            .or_insert_with(|| section_bullets(&response[*end..stop]));
    }
    let take = |name: &str| {
        sections
            .get(name)
            .ok_or_else(|| schema(format!("missing section '{name}'")))
    };
    let anatomy = take("anatomical structures")?;
    let abnormality = take("type of abnormality")?;
    let distribution = take("distribution and location")?;
    let implication = take("clinical implication")?;

    let mut objects = Vec::new();
    let mut attributes = BTreeMap::new();
    let mut push = |name: &str, attr: String, objects: &mut Vec<String>| -> Result<(), ParseError> {
        let l = label(name, "anatomical structure")?;
        if !objects.contains(&l) {
            objects.push(l.clone());
            if !attr.is_empty() {
                attributes.insert(l, attr);
            }
        }
        Ok(())
    };
    for (k, v) in anatomy {
        if k.is_empty() {
            continue;
        }
        push(k, strip_brackets(v), &mut objects)?;
    }
    if objects.is_empty() {
        return Err(schema("no anatomical structures listed"));
    }

    let find = |items: &[(String, String)], key: &str| {
        items
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| strip_brackets(v))
    };
    let location: Vec<String> = distribution
        .iter()
        .filter(|(k, _)| !k.is_empty())
        .map(|(k, v)| format!("{}: {}", k.to_ascii_lowercase(), strip_brackets(v)))
        .collect();
    let mut abnormal_attr = find(abnormality, "characteristics").unwrap_or_default();
    if !location.is_empty() {
        if !abnormal_attr.is_empty() {
            abnormal_attr.push_str("; ");
        }
        abnormal_attr.push_str(&location.join("; "));
    }
    if let Some(found) = find(abnormality, "identified abnormality") {
        for name in found.split(',') {
            if !is_none_finding(name) {
                push(name, abnormal_attr.clone(), &mut objects)?;
            }
        }
    }

    let diagnosis_raw = find(implication, "possible diagnosis")
        .ok_or_else(|| schema("missing 'Possible Diagnosis'"))?;
    let mut diagnoses = Vec::new();
    for d in diagnosis_raw.split(',') {
        if d.trim().is_empty() {
            continue;
        }
        let c = canonical_diagnosis(d)?;
        if !diagnoses.contains(&c) {
            diagnoses.push(c);
        }
    }
    if diagnoses.is_empty() {
        return Err(schema("no diagnosis given"));
    }
    let style = implication
        .iter()
        .map(|(k, v)| {
            if k.is_empty() {
                strip_brackets(v)
            } else if k.eq_ignore_ascii_case("possible diagnosis") {
                format!("{k}: {}", diagnoses.join(", "))
            } else {
                format!("{k}: {}", strip_brackets(v))
            }
        })
        .collect::<Vec<_>>()
        .join("; ");

    Ok(StructuredKnowledge {
        objects,
        numbers: BTreeMap::new(),
        attributes,
        style,
        diagnoses,
        domain_tag: DomainTag::Medical,
    })
}

/// Parses a `[{"head", "relation", "tail"}, ...]` array; drops duplicates.
pub fn parse_triplets(response: &str) -> Result<Vec<Triplet>, ParseError> {
    let value =
        extract_json_block(response, Some(BlockKind::Array)).ok_or(ParseError::NoStructuredBlock)?;
    let items = value.as_array().expect("array block");
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| schema(format!("relationship {i} is not an object")))?;
        let field = |name: &str| -> Result<String, ParseError> {
            let raw = obj
                .get(name)
                .and_then(Value::as_str)
                .ok_or_else(|| schema(format!("relationship {i} lacks string '{name}'")))?;
            label(raw, name)
        };
        let t = Triplet {
            head: field("head")?,
            relation: field("relation")?,
            tail: field("tail")?,
        };
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Non-empty ordered list of generation prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionList {
    pub descriptions: Vec<String>,
    /// Set when the model returned fewer entries than requested.
    #[serde(default)]
    pub short_list: bool,
}

pub fn parse_description_list(response: &str, expected_n: usize) -> Result<DescriptionList, ParseError> {
    assert!(expected_n >= 1, "expected_n must be at least 1");
    let value =
        extract_json_block(response, Some(BlockKind::Array)).ok_or(ParseError::NoStructuredBlock)?;
    let mut descriptions = Vec::new();
    for item in value.as_array().expect("array block") {
        let s = item
            .as_str()
            .ok_or_else(|| schema("descriptions must be strings"))?
            .trim();
        if !s.is_empty() {
            descriptions.push(s.to_string());
        }
    }
    if descriptions.is_empty() {
        return Err(schema("description list is empty"));
    }
    let short_list = descriptions.len() < expected_n;
    descriptions.truncate(expected_n);
    Ok(DescriptionList {
        descriptions,
        short_list,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GENERAL: &str = r#"{"objects":["dog"],"numbers":{"dog":2},"attributes":{"dog":"brown"},"style":"photo"}"#;

    #[test]
    fn builtin_templates_parse() {
        let set = TemplateSet::builtin();
        for id in TemplateId::ALL {
            assert!(!set.get(id).unwrap().messages.is_empty(), "{id}");
        }
        let g = set.get(TemplateId::ExtractionGeneral).unwrap();
        assert_eq!(g.messages[0].0, Role::System);
        assert_eq!(
            g.placeholders.iter().cloned().collect::<Vec<_>>(),
            ["input-format", "object-numbers", "user-input"]
        );
        assert_eq!(set.get(TemplateId::BuildKg).unwrap().messages.len(), 1);
    }

    #[test]
    fn render_general_extraction() {
        let msgs = render(
            "extraction_general",
            &values([("input-format", "image"), ("object-numbers", "5"), ("user-input", "")]),
            &[],
        )
        .unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        assert!(msgs[1].text_content().contains("Identify the top 5 objects"));
        assert!(msgs[1].text_content().contains("Summarize the style of the image."));
    }

    #[test]
    fn render_build_kg() {
        let msgs = render(
            "build_kg",
            &values([("input-type", "text"), ("numbers-of-relationships", "7"), ("user-input", "x")]),
            &[],
        )
        .unwrap();
        assert!(msgs[0].text_content().contains("exactly 7 distinct relationships"));
        assert!(msgs.iter().all(|m| m.role != Role::System));
    }

    #[test]
    fn render_missing_placeholder_and_unknown() {
        assert!(matches!(
            render("extraction_general", &BTreeMap::new(), &[]),
            Err(PromptError::MissingPlaceholder(_))
        ));
        assert_eq!(
            render("nope", &BTreeMap::new(), &[]),
            Err(PromptError::UnknownTemplate("nope".into()))
        );
    }

    #[test]
    fn render_is_single_pass_and_attaches_images() {
        let img = ImageData::new(vec![1, 2, 3], crate::types::ImageFormat::Png);
        let msgs = render(
            "build_kg",
            &values([("input-type", "[user-input]"), ("numbers-of-relationships", "3"), ("user-input", "u")]),
            &[ContentPart::inline_image(&img)],
        )
        .unwrap();
        assert!(msgs[0].text_content().contains("provided [user-input]"));
        assert_eq!(msgs[0].image_count(), 1);
        assert!(msgs[0].validate().is_ok());
    }

    #[test]
    fn json_block_extraction() {
        let fenced = format!("Sure! Here it is:\n```json\n{GENERAL}\n```\nHope this helps.");
        assert_eq!(
            extract_json_block(&fenced, Some(BlockKind::Object)),
            serde_json::from_str(GENERAL).ok()
        );
        // Brackets in strings and an invalid earlier candidate.
        let tricky = r#"note {not json} then {"a": "x}]{", "b": [1, 2]}"#;
        let v = extract_json_block(tricky, None).unwrap();
        assert_eq!(v["a"], "x}]{");
        assert!(extract_json_block("no payload here", None).is_none());
        assert!(extract_json_block("{\"a\": [1, 2}", None).is_none());
    }

    #[test]
    fn structured_general_examples() {
        let sk = parse_structured_extraction(&format!("```\n{GENERAL}\n```"), DomainTag::General).unwrap();
        assert_eq!(sk.objects, ["dog"]);
        assert_eq!(sk.numbers["dog"], 2);
        assert_eq!(sk.attributes["dog"], "brown");
        assert_eq!(sk.style, "photo");

        let wrapped = format!("The analysis is below.\n{GENERAL}\nThat is all.");
        assert_eq!(parse_structured_extraction(&wrapped, DomainTag::General).unwrap(), sk);

        let bad = r#"{"objects":["dog"],"numbers":{"cat":1},"attributes":{},"style":""}"#;
        assert!(matches!(
            parse_structured_extraction(bad, DomainTag::General),
            Err(ParseError::SchemaViolation(_))
        ));
        assert_eq!(
            parse_structured_extraction("nothing", DomainTag::General),
            Err(ParseError::NoStructuredBlock)
        );
    }

    #[test]
    fn structured_general_normalizes_and_merges() {
        let raw = r#"{"objects":["Brown Dog","brown  dog","Cat"],"numbers":{"CAT":"3"},"attributes":{"cat":["small","grey"]},"style":"x"}"#;
        let sk = parse_structured_extraction(raw, DomainTag::General).unwrap();
        assert_eq!(sk.objects, ["brown dog", "cat"]);
        assert_eq!(sk.numbers["cat"], 3);
        assert_eq!(sk.attributes["cat"], "small; grey");
        let neg = r#"{"objects":["a"],"numbers":{"a":-1}}"#;
        assert!(parse_structured_extraction(neg, DomainTag::General).is_err());
    }

    const MEDICAL: &str = "# Structured Analysis
1. **Anatomical Structures**:
   - Lungs: [Left Upper Lobe: Normal], [Right Lower Lobe: Abnormal]
   - Heart: [Normal]
   - Trachea: [Normal]

2. **Type of Abnormality**:
   - Identified Abnormality: opacity
   - Characteristics: size: 2 cm, shape: round

3. **Distribution and Location**:
   - Side: Unilateral
   - Location: Lower lobe
   - Extent: Localized

4. **Clinical Implication**:
   - Possible Diagnosis: ['Lung Opacity', 'Pneumonia']
   - Recommended Action: Further imaging
";

    #[test]
    fn structured_medical_sections() {
        let sk = parse_structured_extraction(MEDICAL, DomainTag::Medical).unwrap();
        assert_eq!(sk.objects, ["lungs", "heart", "trachea", "opacity"]);
        assert_eq!(sk.attributes["heart"], "Normal");
        assert!(sk.attributes["opacity"].contains("location: Lower lobe"));
        assert_eq!(sk.diagnoses, ["Lung Opacity", "Pneumonia"]);
        assert!(sk.style.contains("Recommended Action: Further imaging"));
        assert_eq!(sk.domain_tag, DomainTag::Medical);
    }

    #[test]
    fn structured_medical_errors() {
        let unknown = MEDICAL.replace("'Pneumonia'", "'Flu'");
        assert_eq!(
            parse_structured_extraction(&unknown, DomainTag::Medical),
            Err(ParseError::UnknownDiagnosisLabel("Flu".into()))
        );
        let missing = MEDICAL.replace("4. **Clinical Implication**:", "Clinical stuff:");
        assert!(matches!(
            parse_structured_extraction(&missing, DomainTag::Medical),
            Err(ParseError::SchemaViolation(_))
        ));
        assert_eq!(
            parse_structured_extraction("the lungs look fine", DomainTag::Medical),
            Err(ParseError::NoStructuredBlock)
        );
    }

    #[test]
    fn triplet_examples() {
        let one = r#"[{"head":"man","relation":"holds","tail":"umbrella"}]"#;
        assert_eq!(parse_triplets(one).unwrap().len(), 1);
        let dup = r#"[{"head":"Man","relation":"holds","tail":"umbrella"},{"head":"man","relation":"holds","tail":"umbrella"},{"head":"man","relation":"wears","tail":"hat"}]"#;
        let ts = parse_triplets(dup).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[1].relation, "wears");
        assert!(matches!(
            parse_triplets(r#"[{"head":"","relation":"r","tail":"x"}]"#),
            Err(ParseError::SchemaViolation(_))
        ));
        assert!(matches!(parse_triplets(r#"[{"head":"a","relation":"r"}]"#), Err(ParseError::SchemaViolation(_))));
        assert_eq!(parse_triplets("{}"), Err(ParseError::NoStructuredBlock));
    }

    #[test]
    fn description_examples() {
        let d = parse_description_list(r#"["a","b","c"]"#, 3).unwrap();
        assert_eq!(d.descriptions, ["a", "b", "c"]);
        assert!(!d.short_list);
        let d = parse_description_list(r#"["a"]"#, 5).unwrap();
        assert_eq!(d.descriptions.len(), 1);
        assert!(d.short_list);
        let d = parse_description_list(r#"["a","b","c"]"#, 2).unwrap();
        assert_eq!(d.descriptions, ["a", "b"]);
        assert_eq!(parse_description_list("just prose", 2), Err(ParseError::NoStructuredBlock));
    }
}
