//! Run configuration: TOML file, then `KB_*` environment, then flags.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use kbridge_core::backends::cache::{Cached, FsCache};
use kbridge_core::backends::http::{
    HttpEmbeddingClient, HttpEndpoint, HttpImageClient, OpenAiChatClient, ReqwestTransport, RetryPolicy,
};
use kbridge_core::backends::mock::{MockEmbedding, MockImageGenerator, SyntheticChat};
use kbridge_core::backends::{Backends, ChatBackend, EmbeddingBackend, ImageBackend};
use kbridge_core::completion::{GenerationConfig, RankingConfig};
use kbridge_core::prompting::TemplateSet;
use kbridge_core::ranking::{ScoreMode, Weights};
use kbridge_core::DomainTag;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Endpoint value that selects the in-process deterministic backends.
pub const MOCK: &str = "mock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub image_url: Option<String>,
    /// Never written to run records.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub chat_model: String,
    /// Overrides the manifest's domain when set.
    pub domain_tag: Option<DomainTag>,
    pub eta: f64,
    pub seed: u64,
    pub n_candidates: usize,
    pub object_count: usize,
    pub kg_relationship_count: usize,
    pub repair_attempts: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub context_window: usize,
    pub weights: Weights,
    pub graph_mode: ScoreMode,
    pub workers: usize,
    pub cache: bool,
    pub cache_dir: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    /// Largest tolerated fraction of failed samples for a zero exit.
    pub failure_threshold: f64,
    pub general_generator: String,
    pub medical_generator: String,
    pub retries: u32,
    pub timeout_secs: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            chat_url: None,
            embed_url: None,
            image_url: None,
            api_key: None,
            chat_model: g.chat_model,
            domain_tag: None,
            eta: 0.5,
            seed: 0,
            n_candidates: g.n_candidates,
            object_count: g.object_count,
            kg_relationship_count: g.kg_relationship_count,
            repair_attempts: g.repair_attempts,
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            context_window: kbridge_core::backends::DEFAULT_CONTEXT_WINDOW,
            weights: Weights::EQUAL,
            graph_mode: ScoreMode::Normalized,
            workers: 1,
            cache: true,
            cache_dir: None,
            template_dir: None,
            failure_threshold: 0.0,
            general_generator: g.general_generator,
            medical_generator: g.medical_generator,
            retries: RetryPolicy::default().max_attempts,
            timeout_secs: 120,
        }
    }
}

/// Pipeline knobs shared by the subcommands. Each flag also reads a `KB_`
/// environment variable; flags win over the environment, which wins over
/// the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// TOML config file with any of the keys below (snake_case)
    #[arg(long, env = "KB_CONFIG")]
    pub config: Option<PathBuf>,
    /// Chat completions base URL, or "mock"
    #[arg(long, env = "KB_CHAT_URL")]
    pub chat_url: Option<String>,
    /// Embedding service base URL, or "mock"
    #[arg(long, env = "KB_EMBED_URL")]
    pub embed_url: Option<String>,
    /// Image generation base URL, or "mock"
    #[arg(long, env = "KB_IMAGE_URL")]
    pub image_url: Option<String>,
    /// Bearer token sent to every endpoint
    #[arg(long, env = "KB_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    /// Chat model id
    #[arg(long, env = "KB_CHAT_MODEL")]
    pub chat_model: Option<String>,
    /// Domain override: general or medical
    #[arg(long, env = "KB_DOMAIN")]
    pub domain: Option<DomainTag>,
    /// Missing rate in [0, 1]
    #[arg(long, env = "KB_ETA")]
    pub eta: Option<f64>,
    /// Base seed for masks, chat requests and generators
    #[arg(long, env = "KB_SEED")]
    pub seed: Option<u64>,
    /// Candidates per missing modality [default: 5]
    #[arg(long, env = "KB_CANDIDATES")]
    pub candidates: Option<usize>,
    /// Objects requested from the extraction prompt [default: 6]
    #[arg(long, env = "KB_OBJECT_COUNT")]
    pub object_count: Option<usize>,
    /// Relationships requested when building a graph [default: 7]
    #[arg(long, env = "KB_RELATIONSHIPS")]
    pub relationships: Option<usize>,
    /// Re-asks allowed per unparseable answer [default: 2]
    #[arg(long, env = "KB_REPAIR_ATTEMPTS")]
    pub repair_attempts: Option<usize>,
    /// Graph term scale: normalized or paper-literal
    #[arg(long, env = "KB_GRAPH_MODE")]
    pub graph_mode: Option<ScoreMode>,
    /// Ranking weights wg,wc,wb [default: 1,1,1]
    #[arg(long, env = "KB_WEIGHTS")]
    pub weights: Option<Weights>,
    /// Concurrent sample workers [default: 1]
    #[arg(long, env = "KB_WORKERS")]
    pub workers: Option<usize>,
    /// Content-addressed response cache on or off [default: true]
    #[arg(long, env = "KB_CACHE")]
    pub cache: Option<bool>,
    /// Cache root [default: <out-dir>/cache]
    #[arg(long, env = "KB_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Directory of prompt templates overriding the built-in ones
    #[arg(long, env = "KB_TEMPLATE_DIR")]
    pub template_dir: Option<PathBuf>,
    /// Tolerated fraction of failed samples [default: 0]
    #[arg(long, env = "KB_FAILURE_THRESHOLD")]
    pub failure_threshold: Option<f64>,
    /// HTTP attempts per request [default: 3]
    #[arg(long, env = "KB_RETRIES")]
    pub retries: Option<u32>,
    /// Sampling temperature [default: 0.1]
    #[arg(long, env = "KB_TEMPERATURE")]
    pub temperature: Option<f64>,
    /// Completion token limit [default: 512]
    #[arg(long, env = "KB_MAX_TOKENS")]
    pub max_tokens: Option<u32>,
}

impl PipelineArgs {
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let base = match &self.config {
            Some(path) => load_toml(path)?,
            None => PipelineConfig::default(),
        };
        self.resolve_over(base)
    }

    /// Applies the flags on top of `cfg`, e.g. a stored run's snapshot.
    pub fn resolve_over(&self, mut cfg: PipelineConfig) -> Result<PipelineConfig, CliError> {
        macro_rules! take {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$field = v;
                }
            };
            ($flag:ident => opt $field:ident) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$field = Some(v);
                }
            };
        }
        take!(chat_url => opt chat_url);
        take!(embed_url => opt embed_url);
        take!(image_url => opt image_url);
        take!(api_key => opt api_key);
        take!(chat_model => chat_model);
        take!(domain => opt domain_tag);
        take!(eta => eta);
        take!(seed => seed);
        take!(candidates => n_candidates);
        take!(object_count => object_count);
        take!(relationships => kg_relationship_count);
        take!(repair_attempts => repair_attempts);
        take!(graph_mode => graph_mode);
        take!(weights => weights);
        take!(workers => workers);
        take!(cache => cache);
        take!(cache_dir => opt cache_dir);
        take!(template_dir => opt template_dir);
        take!(failure_threshold => failure_threshold);
        take!(retries => retries);
        take!(temperature => temperature);
        take!(max_tokens => max_tokens);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_toml(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

impl PipelineConfig {
    /// Checks every knob before any network call.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} is outside [0, 1]", self.eta));
        }
        if self.n_candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if self.object_count == 0 || self.kg_relationship_count == 0 {
            return bad("object count and relationship count must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature {} is outside [0, 2]", self.temperature));
        }
        if self.max_tokens == 0 || self.max_tokens as usize >= self.context_window {
            return bad(format!("max tokens must be in [1, {})", self.context_window));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return bad(format!("failure threshold {} is outside [0, 1]", self.failure_threshold));
        }
        let w = self.weights;
        if [w.graph, w.clip, w.blip].iter().any(|x| !x.is_finite()) {
            return bad("weights must be finite".into());
        }
        if self.retries == 0 {
            return bad("retries must be at least 1".into());
        }
        for (name, url) in [("chat", &self.chat_url), ("embed", &self.embed_url), ("image", &self.image_url)] {
            if let Some(u) = url {
                if u != MOCK && !(u.starts_with("http://") || u.starts_with("https://")) {
                    return bad(format!("{name} url must be http(s) or \"{MOCK}\", got {u:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            n_candidates: self.n_candidates,
            object_count: self.object_count,
            kg_relationship_count: self.kg_relationship_count,
            repair_attempts: self.repair_attempts,
            base_seed: self.seed,
            chat_model: self.chat_model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            general_generator: self.general_generator.clone(),
            medical_generator: self.medical_generator.clone(),
            workers: 1,
            few_shot: Vec::new(),
        }
    }

    pub fn ranking(&self) -> RankingConfig {
        RankingConfig {
            weights: self.weights,
            mode: self.graph_mode,
        }
    }

    pub fn templates(&self) -> Result<TemplateSet, CliError> {
        match &self.template_dir {
            Some(dir) => TemplateSet::from_dir(dir).map_err(|e| CliError::Usage(e.to_string())),
            None => Ok(TemplateSet::builtin()),
        }
    }

    fn endpoint(&self, url: &str) -> Result<HttpEndpoint, CliError> {
        let transport = ReqwestTransport::new(Duration::from_secs(self.timeout_secs))
            .map_err(|e| CliError::Runtime(e.into()))?;
        Ok(HttpEndpoint::new(url, Arc::new(transport))
            .with_api_key(self.api_key.clone())
            .with_retry(RetryPolicy {
                max_attempts: self.retries,
                ..RetryPolicy::default()
            }))
    }

    fn store(&self, fallback: Option<&Path>) -> Result<Option<FsCache>, CliError> {
        if !self.cache {
            return Ok(None);
        }
        let Some(dir) = self.cache_dir.as_deref().or(fallback) else {
            return Ok(None);
        };
        FsCache::new(dir).map(Some).map_err(|e| CliError::Runtime(e.into()))
    }

    fn required<'a>(url: &'a Option<String>, name: &str) -> Result<&'a str, CliError> {
        url.as_deref().ok_or_else(|| {
            CliError::Usage(format!("no {name} endpoint; pass --{name}-url or set KB_{}_URL", name.to_uppercase()))
        })
    }

    pub fn chat_backend(&self, cache_root: Option<&Path>) -> Result<Arc<dyn ChatBackend>, CliError> {
        let url = Self::required(&self.chat_url, "chat")?;
        let inner: Arc<dyn ChatBackend> = if url == MOCK {
            Arc::new(SyntheticChat::new())
        } else {
            Arc::new(OpenAiChatClient::new(self.endpoint(url)?).with_context_window(self.context_window))
        };
        Ok(match self.store(cache_root)? {
            Some(s) => Arc::new(Cached::new(inner, s)),
            None => inner,
        })
    }

    pub fn embed_backend(&self, cache_root: Option<&Path>) -> Result<Arc<dyn EmbeddingBackend>, CliError> {
        let url = Self::required(&self.embed_url, "embed")?;
        let inner: Arc<dyn EmbeddingBackend> = if url == MOCK {
            Arc::new(MockEmbedding)
        } else {
            Arc::new(HttpEmbeddingClient::new(self.endpoint(url)?))
        };
        Ok(match self.store(cache_root)? {
            Some(s) => Arc::new(Cached::new(inner, s)),
            None => inner,
        })
    }

    pub fn image_backend(&self, cache_root: Option<&Path>) -> Result<Arc<dyn ImageBackend>, CliError> {
        let url = Self::required(&self.image_url, "image")?;
        let inner: Arc<dyn ImageBackend> = if url == MOCK {
            Arc::new(MockImageGenerator::default())
        } else {
            Arc::new(HttpImageClient::new(self.endpoint(url)?))
        };
        Ok(match self.store(cache_root)? {
            Some(s) => Arc::new(Cached::new(inner, s)),
            None => inner,
        })
    }

    pub fn backends(&self, cache_root: Option<&Path>) -> Result<Backends, CliError> {
        Ok(Backends {
            chat: self.chat_backend(cache_root)?,
            embed: self.embed_backend(cache_root)?,
            image: self.image_backend(cache_root)?,
        })
    }
}
