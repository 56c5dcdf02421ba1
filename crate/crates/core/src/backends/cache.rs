//! Content-addressed response cache.
//!
//! Keys are SHA-256 over `(backend id, model id, canonical request bytes)`,
//! each part length-prefixed. The filesystem store fans out on the first two
//! byte pairs of the hex key: `root/ab/cd/abcd....json`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, EmbeddingBackend, EmbeddingVector,
    ImageArtifact, ImageBackend, ModelTag,
};
use crate::types::{ImageFormat, Payload};

pub fn cache_key(backend_id: &str, model_id: &str, canonical_request: &[u8]) -> String {
    let mut h = Sha256::new();
    for part in [backend_id.as_bytes(), model_id.as_bytes(), canonical_request] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

pub trait CacheStore: Send + Sync {
    fn get(&self, key: &str) -> Option<Vec<u8>>;
    fn put(&self, key: &str, value: &[u8]) -> Result<(), BackendError>;
}

#[derive(Debug, Default)]
pub struct MemoryCache {
    entries: Mutex<HashMap<String, Vec<u8>>>,
}

impl MemoryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CacheStore for MemoryCache {
    fn get(&self, key: &str) -> Option<Vec<u8>> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn put(&self, key: &str, value: &[u8]) -> Result<(), BackendError> {
        self.entries
            .lock()
            .unwrap()
            .insert(key.to_string(), value.to_vec());
        Ok(())
    }
}

/// On-disk store; entries are written to a temp file and renamed into place,
/// so readers never observe partial writes and concurrent writers of one key
/// leave one complete entry.
#[derive(Debug, Clone)]
pub struct FsCache {
    root: PathBuf,
}

impl FsCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| cache_io(&root, e))?;
        Ok(Self { root })
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let (a, b) = (&key[..2.min(key.len())], &key[2.min(key.len())..4.min(key.len())]);
        self.root.join(a).join(b).join(format!("{key}.json"))
    }
}

fn cache_io(path: &Path, e: std::io::Error) -> BackendError {
    BackendError::transport(format!("cache i/o at {}: {e}", path.display()))
}

impl CacheStore for FsCache {
    fn get(&self, key: &str) -> Option<Vec<u8>> {
        fs::read(self.path_for(key)).ok()
    }

    fn put(&self, key: &str, value: &[u8]) -> Result<(), BackendError> {
        let path = self.path_for(key);
        let dir = path.parent().expect("fan-out dir");
        fs::create_dir_all(dir).map_err(|e| cache_io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| cache_io(dir, e))?;
        tmp.write_all(value).map_err(|e| cache_io(&path, e))?;
        tmp.persist(&path).map_err(|e| cache_io(&path, e.error))?;
        Ok(())
    }
}

/// Cache-through wrapper for any of the three backend kinds.
pub struct Cached<B, S> {
    inner: B,
    store: S,
    misses: AtomicUsize,
    hits: AtomicUsize,
}

impl<B, S: CacheStore> Cached<B, S> {
    pub fn new(inner: B, store: S) -> Self {
        Self {
            inner,
            store,
            misses: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    fn through<T, F>(&self, key: String, call: F) -> Result<T, BackendError>
    where
        T: Serialize + for<'de> Deserialize<'de>,
        F: FnOnce() -> Result<T, BackendError>,
    {
        if let Some(bytes) = self.store.get(&key) {
            if let Ok(v) = serde_json::from_slice(&bytes) {
                self.hits.fetch_add(1, Ordering::SeqCst);
                return Ok(v);
            }
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let value = call()?;
        let bytes = serde_json::to_vec(&value).expect("cached value serializes");
        self.store.put(&key, &bytes)?;
        Ok(value)
    }
}

pub fn chat_cache_key(backend_id: &str, request: &ChatRequest) -> String {
    let canonical = serde_json::to_vec(request).expect("request serializes");
    cache_key(backend_id, &request.model_id, &canonical)
}

impl<B: ChatBackend, S: CacheStore> ChatBackend for Cached<B, S> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = chat_cache_key(self.inner.backend_id(), request);
        self.through(key, || self.inner.chat(request))
    }
}

impl<B: EmbeddingBackend, S: CacheStore> EmbeddingBackend for Cached<B, S> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn embed(&self, payload: &Payload, model_tag: ModelTag) -> Result<EmbeddingVector, BackendError> {
        let mut canonical = payload.modality().as_str().as_bytes().to_vec();
        canonical.push(0);
        canonical.extend_from_slice(payload.as_bytes());
        let key = cache_key(self.inner.backend_id(), model_tag.as_str(), &canonical);
        self.through(key, || self.inner.embed(payload, model_tag))
    }
}

#[derive(Serialize, Deserialize)]
struct StoredImage {
    format: ImageFormat,
    b64_bytes: String,
    prompt_used: String,
    generator_id: String,
    seed: u64,
}

impl<B: ImageBackend, S: CacheStore> ImageBackend for Cached<B, S> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn generate_image(&self, prompt: &str, generator_id: &str, seed: u64) -> Result<ImageArtifact, BackendError> {
        let canonical = serde_json::to_vec(&(prompt, seed)).expect("serializes");
        let key = cache_key(self.inner.backend_id(), generator_id, &canonical);
        let b64 = base64::engine::general_purpose::STANDARD;
        let stored: StoredImage = self.through(key, || {
            let art = self.inner.generate_image(prompt, generator_id, seed)?;
            Ok(StoredImage {
                format: art.format,
                b64_bytes: b64.encode(&art.bytes),
                prompt_used: art.prompt_used,
                generator_id: art.generator_id,
                seed: art.seed,
            })
        })?;
        Ok(ImageArtifact {
            bytes: b64
                .decode(stored.b64_bytes)
                .map_err(|e| BackendError::InvalidResponse(format!("cached image: {e}")))?,
            format: stored.format,
            prompt_used: stored.prompt_used,
            generator_id: stored.generator_id,
            seed: stored.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockEmbedding, MockImageGenerator, ScriptedChat};
    use crate::prompting::{ChatMessage, Role};

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("model-a", vec![ChatMessage::text(Role::User, text)])
    }

    #[test]
    fn identical_requests_hit_upstream_once() {
        let cached = Cached::new(ScriptedChat::new().on_contains("q", vec!["a1", "a2"]), MemoryCache::new());
        let first = cached.chat(&req("q")).unwrap();
        let second = cached.chat(&req("q")).unwrap();
        assert_eq!(first, second);
        assert_eq!(cached.inner().calls(), 1);
        assert_eq!((cached.hits(), cached.misses()), (1, 1));
    }

    #[test]
    fn key_covers_every_field() {
        let base = req("hello");
        let k = chat_cache_key("b", &base);
        let mut variants = Vec::new();
        let mut r = base.clone();
        r.model_id = "model-b".into();
        variants.push(r);
        let mut r = base.clone();
        r.temperature = 0.2;
        variants.push(r);
        let mut r = base.clone();
        r.max_tokens = 100;
        variants.push(r);
        variants.push(base.clone().with_seed(1));
        variants.push(req("hellp"));
        let mut r = base.clone();
        r.messages[0].role = Role::System;
        variants.push(r);
        for v in &variants {
            assert_ne!(chat_cache_key("b", v), k);
        }
        assert_ne!(chat_cache_key("other", &base), k);
    }

    #[test]
    fn errors_are_not_cached() {
        let cached = Cached::new(ScriptedChat::new(), MemoryCache::new());
        assert!(cached.chat(&req("x")).is_err());
        assert!(cached.chat(&req("x")).is_err());
        assert_eq!(cached.inner().calls(), 2);
    }

    #[test]
    fn fs_cache_fan_out_and_transparency() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsCache::new(dir.path()).unwrap();
        let key = cache_key("b", "m", b"x");
        assert!(store.path_for(&key).starts_with(dir.path().join(&key[..2]).join(&key[2..4])));

        let gen = MockImageGenerator::default();
        let direct = gen.generate_image("a cat", "sdxl-1.0", 2).unwrap();
        let cached = Cached::new(gen, FsCache::new(dir.path()).unwrap());
        assert_eq!(cached.generate_image("a cat", "sdxl-1.0", 2).unwrap(), direct);
        assert_eq!(cached.generate_image("a cat", "sdxl-1.0", 2).unwrap(), direct);
        // One direct call plus one miss.
        assert_eq!(cached.inner().calls(), 2);

        let p = Payload::Text("dog".into());
        let emb = Cached::new(MockEmbedding, FsCache::new(dir.path()).unwrap());
        let a = emb.embed(&p, ModelTag::Clip).unwrap();
        assert_eq!(a, MockEmbedding.embed(&p, ModelTag::Clip).unwrap());
        assert_eq!(emb.embed(&p, ModelTag::Clip).unwrap(), a);
        assert_eq!(emb.hits(), 1);
    }
}
