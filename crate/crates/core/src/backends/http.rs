//! HTTP clients for the chat, embedding and image-generation services.
//!
//! Wire contracts:
//! - chat: `POST {base}/v1/chat/completions`, OpenAI-compatible body, image
//!   parts as base64 data URLs;
//! - embeddings: `POST {base}/v1/embeddings` with
//!   `{model_tag, modality_tag, input}` answered by `{values, dim}`;
//! - images: `POST {base}/v1/images` with `{prompt, generator_id, seed}`
//!   answered by `{format, b64_bytes}`.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    check_decodable, BackendError, ChatBackend, ChatRequest, ChatResponse, EmbeddingBackend,
    EmbeddingVector, ImageArtifact, ImageBackend, ModelTag, Usage, DEFAULT_CONTEXT_WINDOW,
};
use crate::prompting::{ChatMessage, ContentPart};
use crate::types::{ImageFormat, Payload};

/// Status and body of one HTTP exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal JSON-over-HTTP transport; the error case is a connection-level
/// failure (no status received).
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, api_key: Option<&str>) -> Result<HttpResponse, String>;
}

/// Blocking `reqwest` transport.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, body: &Value, api_key: Option<&str>) -> Result<HttpResponse, String> {
        let mut req = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Exponential backoff for transient failures (429, 5xx, connection errors).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

fn is_transient(status: u16) -> bool {
    status == 429 || status >= 500
}

/// Shared plumbing: endpoint, credentials, transport and retries.
#[derive(Clone)]
pub struct HttpEndpoint {
    pub base_url: String,
    pub api_key: Option<String>,
    pub transport: Arc<dyn HttpTransport>,
    pub retry: RetryPolicy,
}

impl HttpEndpoint {
    pub fn new(base_url: impl Into<String>, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    /// Posts with retries; returns the body of the first 2xx response.
    fn post(&self, path: &str, body: &Value) -> Result<String, BackendError> {
        let url = self.url(path);
        let attempts = self.retry.max_attempts.max(1);
        let mut last = BackendError::transport("no attempt made");
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.transport.post_json(&url, body, self.api_key.as_deref()) {
                Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
                Ok(resp) if resp.status == 429 => {
                    debug!(%url, attempt, "rate limited");
                    last = BackendError::RateLimited { attempts: attempt + 1 };
                }
                Ok(resp) => {
                    let err = BackendError::Transport {
                        status: Some(resp.status),
                        detail: truncate(&resp.body, 300),
                    };
                    if !is_transient(resp.status) {
                        return Err(err);
                    }
                    warn!(%url, attempt, status = resp.status, "transient failure");
                    last = err;
                }
                Err(detail) => {
                    warn!(%url, attempt, %detail, "connection failure");
                    last = BackendError::transport(detail);
                }
            }
        }
        Err(last)
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn message_json(m: &ChatMessage) -> Value {
    let content = match m.parts.as_slice() {
        [ContentPart::Text { text }] => Value::String(text.clone()),
        parts => Value::Array(
            parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text { text } => json!({"type": "text", "text": text}),
                    ContentPart::Image { mime, data } => json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{mime};base64,{data}")}
                    }),
                    ContentPart::ImageRef { url } => {
                        json!({"type": "image_url", "image_url": {"url": url}})
                    }
                })
                .collect(),
        ),
    };
    json!({"role": m.role, "content": content})
}

/// OpenAI-compatible request body for a chat request.
pub fn chat_body(req: &ChatRequest) -> Value {
    let mut body = json!({
        "model": req.model_id,
        "messages": req.messages.iter().map(message_json).collect::<Vec<_>>(),
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if let Some(seed) = req.seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Client for an OpenAI-compatible chat-completions server (e.g. vLLM).
pub struct OpenAiChatClient {
    endpoint: HttpEndpoint,
    context_window: usize,
    id: String,
}

impl OpenAiChatClient {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        let id = format!("openai-chat:{}", endpoint.base_url);
        Self {
            endpoint,
            context_window: DEFAULT_CONTEXT_WINDOW,
            id,
        }
    }

    pub fn with_context_window(mut self, tokens: usize) -> Self {
        self.context_window = tokens;
        self
    }
}

impl ChatBackend for OpenAiChatClient {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate(self.context_window)?;
        let body = self.endpoint.post("/v1/chat/completions", &chat_body(request))?;
        let v: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::InvalidResponse(format!("chat body is not JSON: {e}")))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::InvalidResponse("missing choices[0].message.content".into()))?
            .to_string();
        let usage = Usage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(ChatResponse { text, usage })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingWireRequest {
    pub model_tag: ModelTag,
    pub modality_tag: crate::types::Modality,
    /// Text, or base64 image bytes.
    pub input: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingWireResponse {
    pub values: Vec<f64>,
    pub dim: usize,
}

pub fn embedding_wire_request(payload: &Payload, model_tag: ModelTag) -> EmbeddingWireRequest {
    let input = match payload {
        Payload::Text(t) => t.clone(),
        Payload::Image(img) => base64::engine::general_purpose::STANDARD.encode(&img.bytes),
    };
    EmbeddingWireRequest {
        model_tag,
        modality_tag: payload.modality(),
        input,
    }
}

pub struct HttpEmbeddingClient {
    endpoint: HttpEndpoint,
    id: String,
}

impl HttpEmbeddingClient {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        let id = format!("http-embed:{}", endpoint.base_url);
        Self { endpoint, id }
    }
}

impl EmbeddingBackend for HttpEmbeddingClient {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, payload: &Payload, model_tag: ModelTag) -> Result<EmbeddingVector, BackendError> {
        if payload.is_empty() {
            return Err(BackendError::InvalidRequest("empty payload".into()));
        }
        let body = serde_json::to_value(embedding_wire_request(payload, model_tag))
            .expect("wire request serializes");
        let text = self.endpoint.post("/v1/embeddings", &body).map_err(|e| match e {
            BackendError::Transport { status: Some(400), detail } if detail.contains("modality") => {
                BackendError::UnsupportedModality(detail)
            }
            other => other,
        })?;
        let resp: EmbeddingWireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidResponse(format!("embedding body: {e}")))?;
        if resp.dim != resp.values.len() {
            return Err(BackendError::InvalidResponse(format!(
                "dim {} does not match {} values",
                resp.dim,
                resp.values.len()
            )));
        }
        EmbeddingVector::normalized(model_tag, payload.modality(), resp.values)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageWireRequest {
    pub prompt: String,
    pub generator_id: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageWireResponse {
    pub format: ImageFormat,
    pub b64_bytes: String,
}

pub struct HttpImageClient {
    endpoint: HttpEndpoint,
    /// When non-empty, generator ids outside this set are rejected locally.
    generators: BTreeSet<String>,
    id: String,
}

impl HttpImageClient {
    pub fn new(endpoint: HttpEndpoint) -> Self {
        let id = format!("http-image:{}", endpoint.base_url);
        Self {
            endpoint,
            generators: BTreeSet::new(),
            id,
        }
    }

    pub fn with_generators<I: IntoIterator<Item = String>>(mut self, ids: I) -> Self {
        self.generators = ids.into_iter().collect();
        self
    }
}

impl ImageBackend for HttpImageClient {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate_image(&self, prompt: &str, generator_id: &str, seed: u64) -> Result<ImageArtifact, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if !self.generators.is_empty() && !self.generators.contains(generator_id) {
            return Err(BackendError::GeneratorUnavailable(generator_id.to_string()));
        }
        let body = serde_json::to_value(ImageWireRequest {
            prompt: prompt.to_string(),
            generator_id: generator_id.to_string(),
            seed,
        })
        .expect("wire request serializes");
        let text = self.endpoint.post("/v1/images", &body).map_err(|e| match e {
            BackendError::Transport { status: Some(400 | 404), detail } if detail.contains("generator") => {
                BackendError::GeneratorUnavailable(generator_id.to_string())
            }
            BackendError::Transport { status: Some(503), .. } => {
                BackendError::GeneratorUnavailable(generator_id.to_string())
            }
            other => other,
        })?;
        let resp: ImageWireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidResponse(format!("image body: {e}")))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(resp.b64_bytes.as_bytes())
            .map_err(|e| BackendError::InvalidResponse(format!("image base64: {e}")))?;
        check_decodable(&bytes, resp.format)?;
        Ok(ImageArtifact {
            bytes,
            format: resp.format,
            prompt_used: prompt.to_string(),
            generator_id: generator_id.to_string(),
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;
    use crate::prompting::Role;
    use crate::types::ImageData;

    /// Replays scripted responses and records request bodies.
    struct ScriptedTransport {
        responses: Mutex<Vec<Result<HttpResponse, String>>>,
        seen: Mutex<Vec<(String, Value, Option<String>)>>,
    }

    impl ScriptedTransport {
        fn new(mut responses: Vec<Result<HttpResponse, String>>) -> Arc<Self> {
            responses.reverse();
            Arc::new(Self {
                responses: Mutex::new(responses),
                seen: Mutex::new(Vec::new()),
            })
        }

        fn calls(&self) -> usize {
            self.seen.lock().unwrap().len()
        }
    }

    impl HttpTransport for ScriptedTransport {
        fn post_json(&self, url: &str, body: &Value, api_key: Option<&str>) -> Result<HttpResponse, String> {
            self.seen
                .lock()
                .unwrap()
                .push((url.to_string(), body.clone(), api_key.map(str::to_string)));
            self.responses.lock().unwrap().pop().unwrap_or(Err("script exhausted".into()))
        }
    }

    fn ok(body: Value) -> Result<HttpResponse, String> {
        Ok(HttpResponse {
            status: 200,
            body: body.to_string(),
        })
    }

    fn status(code: u16) -> Result<HttpResponse, String> {
        Ok(HttpResponse {
            status: code,
            body: format!("error {code}"),
        })
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn chat_client(t: Arc<ScriptedTransport>) -> OpenAiChatClient {
        OpenAiChatClient::new(
            HttpEndpoint::new("http://llm.local/", t)
                .with_retry(fast())
                .with_api_key(Some("k".into())),
        )
    }

    fn completion(text: &str) -> Value {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}],
               "usage": {"prompt_tokens": 10, "completion_tokens": 3}})
    }

    fn request() -> ChatRequest {
        ChatRequest::new("qwen2-vl-7b", vec![ChatMessage::text(Role::User, "hello")]).with_seed(9)
    }

    #[test]
    fn chat_wire_shape() {
        let t = ScriptedTransport::new(vec![ok(completion("hi there"))]);
        let resp = chat_client(t.clone()).chat(&request()).unwrap();
        assert_eq!(resp.text, "hi there");
        assert_eq!(resp.usage.completion_tokens, 3);
        let seen = t.seen.lock().unwrap();
        let (url, body, key) = &seen[0];
        assert_eq!(url, "http://llm.local/v1/chat/completions");
        assert_eq!(key.as_deref(), Some("k"));
        assert_eq!(body["model"], "qwen2-vl-7b");
        assert_eq!(body["messages"][0]["content"], "hello");
        assert_eq!(body["temperature"], 0.1);
        assert_eq!(body["max_tokens"], 512);
        assert_eq!(body["seed"], 9);
    }

    #[test]
    fn chat_images_as_data_urls() {
        let img = ImageData::new(vec![1, 2, 3], ImageFormat::Png);
        let mut msg = ChatMessage::text(Role::User, "look");
        msg.parts.push(ContentPart::inline_image(&img));
        let body = chat_body(&ChatRequest::new("m", vec![msg]));
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,AQID");
    }

    #[test]
    fn rate_limited_after_three_attempts() {
        let t = ScriptedTransport::new(vec![status(429), status(429), status(429)]);
        let err = chat_client(t.clone()).chat(&request()).unwrap_err();
        assert_eq!(err, BackendError::RateLimited { attempts: 3 });
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn transient_then_success() {
        let t = ScriptedTransport::new(vec![status(503), Err("reset".into()), ok(completion("ok"))]);
        assert_eq!(chat_client(t.clone()).chat(&request()).unwrap().text, "ok");
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = ScriptedTransport::new(vec![status(400), ok(completion("never"))]);
        let err = chat_client(t.clone()).chat(&request()).unwrap_err();
        assert!(matches!(err, BackendError::Transport { status: Some(400), .. }));
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn context_overflow_checked_before_sending() {
        let t = ScriptedTransport::new(vec![]);
        let big = ChatRequest::new("m", vec![ChatMessage::text(Role::User, "x".repeat(40_000))]);
        assert!(matches!(
            chat_client(t.clone()).chat(&big),
            Err(BackendError::ContextOverflow { .. })
        ));
        assert_eq!(t.calls(), 0);
    }

    #[test]
    fn malformed_chat_body() {
        let t = ScriptedTransport::new(vec![ok(json!({"choices": []}))]);
        assert!(matches!(chat_client(t).chat(&request()), Err(BackendError::InvalidResponse(_))));
    }

    #[test]
    fn embedding_wire_and_normalization() {
        let t = ScriptedTransport::new(vec![ok(json!({"values": [3.0, 0.0, 4.0], "dim": 3}))]);
        let client = HttpEmbeddingClient::new(HttpEndpoint::new("http://emb", t.clone()).with_retry(fast()));
        let e = client.embed(&Payload::Text("a dog".into()), ModelTag::Blip).unwrap();
        assert_eq!(e.values, vec![0.6, 0.0, 0.8]);
        let seen = t.seen.lock().unwrap();
        assert_eq!(seen[0].0, "http://emb/v1/embeddings");
        assert_eq!(seen[0].1, json!({"model_tag": "blip", "modality_tag": "text", "input": "a dog"}));
    }

    #[test]
    fn embedding_errors() {
        let t = ScriptedTransport::new(vec![ok(json!({"values": [1.0], "dim": 2}))]);
        let client = HttpEmbeddingClient::new(HttpEndpoint::new("http://emb", t).with_retry(fast()));
        assert!(matches!(
            client.embed(&Payload::Text("x".into()), ModelTag::Clip),
            Err(BackendError::InvalidResponse(_))
        ));
        assert!(matches!(
            client.embed(&Payload::Text(String::new()), ModelTag::Clip),
            Err(BackendError::InvalidRequest(_))
        ));
        let t = ScriptedTransport::new(vec![Ok(HttpResponse {
            status: 400,
            body: "unsupported modality_tag".into(),
        })]);
        let client = HttpEmbeddingClient::new(HttpEndpoint::new("http://emb", t).with_retry(fast()));
        assert!(matches!(
            client.embed(&Payload::Text("x".into()), ModelTag::Clip),
            Err(BackendError::UnsupportedModality(_))
        ));
    }

    #[test]
    fn image_generation_wire() {
        let png = super::super::mock::solid_png([10, 20, 30], "p");
        let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
        let t = ScriptedTransport::new(vec![ok(json!({"format": "png", "b64_bytes": b64}))]);
        let client = HttpImageClient::new(HttpEndpoint::new("http://img", t.clone()).with_retry(fast()))
            .with_generators(["sdxl-1.0".to_string()]);
        let art = client.generate_image("a red car", "sdxl-1.0", 4).unwrap();
        assert_eq!(art.bytes, png);
        assert_eq!(art.seed, 4);
        assert_eq!(
            t.seen.lock().unwrap()[0].1,
            json!({"prompt": "a red car", "generator_id": "sdxl-1.0", "seed": 4})
        );
        assert_eq!(
            client.generate_image("a red car", "dalle", 4),
            Err(BackendError::GeneratorUnavailable("dalle".into()))
        );
    }

    #[test]
    fn image_generation_rejects_garbage() {
        let t = ScriptedTransport::new(vec![ok(json!({"format": "png", "b64_bytes": "AAAA"}))]);
        let client = HttpImageClient::new(HttpEndpoint::new("http://img", t).with_retry(fast()));
        assert!(matches!(
            client.generate_image("x", "g", 1),
            Err(BackendError::InvalidResponse(_))
        ));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_millis(500));
        assert_eq!(p.delay(1), Duration::from_millis(1000));
        assert_eq!(p.delay(10), Duration::from_millis(8000));
    }
}
