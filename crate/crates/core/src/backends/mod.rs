//! Model-service clients: chat completions, embeddings and image generation.
//!
//! Each service is a trait so the pipeline can run against the HTTP clients
//! in [`http`], the deterministic doubles in [`mock`], or either of those
//! wrapped in the content-addressed [`cache`].

pub mod cache;
pub mod http;
pub mod mock;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::ChatMessage;
use crate::types::{ImageFormat, Modality, Payload};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_CONTEXT_WINDOW: usize = 8192;
pub const MAX_IMAGE_PARTS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure (status {status:?}): {detail}")]
    Transport { status: Option<u16>, detail: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("request needs ~{estimated} tokens, context window is {window}")]
    ContextOverflow { estimated: usize, window: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unsupported modality: {0}")]
    UnsupportedModality(String),
    #[error("generator '{0}' is unavailable")]
    GeneratorUnavailable(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    pub fn transport(detail: impl Into<String>) -> Self {
        BackendError::Transport {
            status: None,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Conservative prompt size: one token per four characters of text.
    pub fn estimated_prompt_tokens(&self) -> usize {
        let chars: usize = self
            .messages
            .iter()
            .map(|m| m.text_content().chars().count())
            .sum();
        chars.div_ceil(4)
    }

    pub fn validate(&self, context_window: usize) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        for m in &self.messages {
            m.validate().map_err(BackendError::InvalidRequest)?;
        }
        let images: usize = self.messages.iter().map(ChatMessage::image_count).sum();
        if images > MAX_IMAGE_PARTS {
            return Err(BackendError::InvalidRequest(format!(
                "{images} image parts, at most {MAX_IMAGE_PARTS} allowed"
            )));
        }
        let estimated = self.estimated_prompt_tokens() + self.max_tokens as usize;
        if estimated > context_window {
            return Err(BackendError::ContextOverflow {
                estimated,
                window: context_window,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

pub trait ChatBackend: Send + Sync {
    /// Stable identifier used in cache keys and run records.
    fn backend_id(&self) -> &str;
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Clip,
    Blip,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Clip => "clip",
            ModelTag::Blip => "blip",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clip" => Ok(ModelTag::Clip),
            "blip" => Ok(ModelTag::Blip),
            other => Err(format!("unknown model tag '{other}'")),
        }
    }
}

/// Unit-norm embedding of one payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_tag: ModelTag,
    pub modality_tag: Modality,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    /// Validates and L2-normalizes raw values.
    pub fn normalized(
        model_tag: ModelTag,
        modality_tag: Modality,
        mut values: Vec<f64>,
    ) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::InvalidResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::InvalidResponse("non-finite embedding".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BackendError::InvalidResponse("zero embedding".into()));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            model_tag,
            modality_tag,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity; vectors are unit norm but the division is kept
    /// so hand-built vectors also work.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, BackendError> {
        if self.dim() != other.dim() {
            return Err(BackendError::InvalidResponse(format!(
                "dimension mismatch {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(cosine(&self.values, &other.values))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub trait EmbeddingBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    /// Embeds `payload` with the given model; the modality tag follows the payload.
    fn embed(&self, payload: &Payload, model_tag: ModelTag) -> Result<EmbeddingVector, BackendError>;
}

/// A generated image plus its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageArtifact {
    pub bytes: Vec<u8>,
    pub format: ImageFormat,
    pub prompt_used: String,
    pub generator_id: String,
    pub seed: u64,
}

pub trait ImageBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn generate_image(
        &self,
        prompt: &str,
        generator_id: &str,
        seed: u64,
    ) -> Result<ImageArtifact, BackendError>;
}

/// Checks that bytes decode as the claimed image format.
pub fn check_decodable(bytes: &[u8], format: ImageFormat) -> Result<(), BackendError> {
    if bytes.is_empty() {
        return Err(BackendError::InvalidResponse("empty image".into()));
    }
    let fmt = match format {
        ImageFormat::Png => image::ImageFormat::Png,
        ImageFormat::Jpeg => image::ImageFormat::Jpeg,
    };
    image::load_from_memory_with_format(bytes, fmt)
        .map(|_| ())
        .map_err(|e| BackendError::InvalidResponse(format!("undecodable image: {e}")))
}

/// The three services bundled for the pipeline.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbeddingBackend>,
    pub image: Arc<dyn ImageBackend>,
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn embed(&self, payload: &Payload, model_tag: ModelTag) -> Result<EmbeddingVector, BackendError> {
        (**self).embed(payload, model_tag)
    }
}

impl<T: ImageBackend + ?Sized> ImageBackend for Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn generate_image(&self, prompt: &str, generator_id: &str, seed: u64) -> Result<ImageArtifact, BackendError> {
        (**self).generate_image(prompt, generator_id, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{ChatMessage, ContentPart, Role};
    use crate::types::ImageData;

    #[test]
    fn request_defaults_and_validation() {
        let req = ChatRequest::new("m", vec![ChatMessage::text(Role::User, "hi")]);
        assert_eq!(req.temperature, 0.1);
        assert_eq!(req.max_tokens, 512);
        assert!(req.validate(DEFAULT_CONTEXT_WINDOW).is_ok());

        let mut hot = req.clone();
        hot.temperature = 2.5;
        assert!(matches!(hot.validate(8192), Err(BackendError::InvalidRequest(_))));

        let mut zero = req.clone();
        zero.max_tokens = 0;
        assert!(zero.validate(8192).is_err());
    }

    #[test]
    fn request_limits_images_and_context() {
        let img = ContentPart::inline_image(&ImageData::new(vec![1], ImageFormat::Png));
        let mut msg = ChatMessage::text(Role::User, "x");
        msg.parts.extend(std::iter::repeat_n(img, 5));
        let req = ChatRequest::new("m", vec![msg]);
        assert!(matches!(req.validate(8192), Err(BackendError::InvalidRequest(_))));

        let long = ChatRequest::new("m", vec![ChatMessage::text(Role::User, "a".repeat(32_000))]);
        assert_eq!(
            long.validate(8192),
            Err(BackendError::ContextOverflow {
                estimated: 8000 + 512,
                window: 8192
            })
        );
    }

    #[test]
    fn embedding_normalization() {
        let e = EmbeddingVector::normalized(ModelTag::Clip, Modality::Text, vec![3.0, 4.0]).unwrap();
        assert!((e.values[0] - 0.6).abs() < 1e-12);
        assert!((e.cosine(&e).unwrap() - 1.0).abs() < 1e-12);
        assert!(EmbeddingVector::normalized(ModelTag::Clip, Modality::Text, vec![]).is_err());
        assert!(EmbeddingVector::normalized(ModelTag::Clip, Modality::Text, vec![f64::NAN]).is_err());
        assert!(EmbeddingVector::normalized(ModelTag::Clip, Modality::Text, vec![0.0, 0.0]).is_err());
    }
}
