//! Chat-completion and embedding client with a response cache and an
//! offline mock backend.

mod cache;
mod mock;
mod remote;

use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numeric::Matrix;

pub use cache::{CacheEntry, ResponseCache};
pub use mock::{mock_token_vector, MockBackend};
pub use remote::RemoteBackend;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("response cache: {0}")]
    Cache(String),
}

impl GatewayError {
    /// Transport-level failures that callers may surface as "try again later".
    pub fn is_unavailable(&self) -> bool {
        matches!(self, GatewayError::Unavailable { .. })
    }
}

/// Failure from a single backend attempt.
#[derive(Debug)]
pub(crate) enum AttemptError {
    Retryable(String),
    Fatal(GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_content: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_content: impl Into<String>) -> ChatRequest {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_content: user_content.into(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user_content.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user_content is empty".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
}

/// Per-row vectors for one text, with the token (or chunk) behind each row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub tokens: Vec<String>,
    pub matrix: Matrix,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL of an OpenAI-compatible server, without the `/v1/...` suffix.
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub chat_model: Option<String>,
    pub embedding_model: Option<String>,
    pub embedding_dim: usize,
    pub mock_seed: Option<u64>,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    /// Words per embedded chunk on the remote backend.
    pub remote_chunk_words: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint_url: None,
            api_key_env: None,
            chat_model: None,
            embedding_model: None,
            embedding_dim: 64,
            mock_seed: Some(0),
            max_attempts: 3,
            backoff_ms: 200,
            timeout_secs: 60,
            parallelism: 4,
            cache_dir: None,
            remote_chunk_words: 16,
        }
    }
}

impl BackendConfig {
    pub fn mock(seed: u64, embedding_dim: usize) -> BackendConfig {
        BackendConfig {
            mock_seed: Some(seed),
            embedding_dim,
            ..BackendConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let missing = |f: &str| GatewayError::Config(format!("{f} is required for the {:?} backend", self.kind));
        if self.embedding_dim == 0 {
            return Err(GatewayError::Config("embedding_dim must be positive".into()));
        }
        if self.max_attempts == 0 || self.parallelism == 0 {
            return Err(GatewayError::Config("max_attempts and parallelism must be positive".into()));
        }
        match self.kind {
            BackendKind::Mock => {
                self.mock_seed.ok_or_else(|| missing("mock_seed"))?;
            }
            BackendKind::Remote => {
                self.endpoint_url.as_ref().ok_or_else(|| missing("endpoint_url"))?;
                self.api_key_env.as_ref().ok_or_else(|| missing("api_key_env"))?;
                self.chat_model.as_ref().ok_or_else(|| missing("chat_model"))?;
                self.embedding_model.as_ref().ok_or_else(|| missing("embedding_model"))?;
                if self.remote_chunk_words == 0 {
                    return Err(GatewayError::Config("remote_chunk_words must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Backend identity folded into cache keys.
    pub fn cache_namespace(&self) -> String {
        match self.kind {
            BackendKind::Mock => "mock".to_string(),
            BackendKind::Remote => format!(
                "remote:{}@{}",
                self.chat_model.as_deref().unwrap_or_default(),
                self.endpoint_url.as_deref().unwrap_or_default()
            ),
        }
    }
}

/// 256-bit content address of a chat request under a backend namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// Length-prefixed SHA-256 over the backend namespace and every request field.
pub fn cache_key(req: &ChatRequest, namespace: &str) -> CacheKey {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(b"chat/v1");
    field(namespace.as_bytes());
    field(req.system_prompt.as_bytes());
    field(req.user_content.as_bytes());
    field(&req.temperature.to_bits().to_le_bytes());
    field(&u64::from(req.max_tokens).to_le_bytes());
    CacheKey(h.finalize().into())
}

pub(crate) trait Backend: Send + Sync {
    fn id(&self) -> String;
    fn chat(&self, req: &ChatRequest) -> Result<String, AttemptError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingMatrix>, AttemptError>;
}

/// Shareable gateway: backend, cache and retry policy.
#[derive(Clone)]
pub struct Gateway {
    config: BackendConfig,
    backend: Arc<dyn Backend>,
    cache: Arc<ResponseCache>,
    pool: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("config", &self.config)
            .finish()
    }
}

impl Gateway {
    /// Validates the config and, for the remote backend, reads the API key
    /// from the configured environment variable. No network traffic happens here.
    pub fn new(config: BackendConfig) -> Result<Gateway, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(
                config.mock_seed.expect("validated"),
                config.embedding_dim,
            )),
            BackendKind::Remote => Arc::new(RemoteBackend::from_config(&config)?),
        };
        let cache = Arc::new(ResponseCache::new(config.cache_dir.clone())?);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .thread_name(|i| format!("gateway-{i}"))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Gateway {
            config,
            backend,
            cache,
            pool: Arc::new(pool),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn cache_key(&self, req: &ChatRequest) -> CacheKey {
        cache_key(req, &self.config.cache_namespace())
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let key = self.cache_key(req);
        let backend_id = self.backend.id();
        if let Some(text) = self.cache.get(&key)? {
            return Ok(ChatResponse {
                text,
                backend_id,
                cached: true,
            });
        }
        let raw = self.with_retries(|| self.backend.chat(req))?;
        let text = raw.trim_end().to_string();
        self.cache.put(&key, req, &text, &backend_id)?;
        Ok(ChatResponse {
            text,
            backend_id,
            cached: false,
        })
    }

    /// Drops a cached response, e.g. after it failed to parse.
    pub fn invalidate(&self, req: &ChatRequest) -> Result<(), GatewayError> {
        self.cache.remove(&self.cache_key(req))
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingMatrix>, GatewayError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.with_retries(|| self.backend.embed(texts))?;
        if out.len() != texts.len() {
            return Err(GatewayError::Protocol(format!(
                "{} texts embedded into {} matrices",
                texts.len(),
                out.len()
            )));
        }
        for e in &out {
            if e.dim() != self.config.embedding_dim {
                return Err(GatewayError::Dimension {
                    expected: self.config.embedding_dim,
                    actual: e.dim(),
                });
            }
            if !e.matrix.is_finite() {
                return Err(GatewayError::Protocol("embedding contains non-finite values".into()));
            }
        }
        Ok(out)
    }

    /// Runs `f` over `items` on the gateway's bounded pool, preserving order.
    pub fn map_bounded<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        use rayon::prelude::*;
        self.pool.install(|| items.par_iter().map(&f).collect())
    }

    fn with_retries<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, AttemptError>,
    ) -> Result<T, GatewayError> {
        let mut last = String::new();
        for n in 0..self.config.max_attempts {
            if n > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (n - 1).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            match attempt() {
                Ok(v) => return Ok(v),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable(msg)) => {
                    tracing::warn!(attempt = n + 1, error = %msg, "gateway call failed");
                    last = msg;
                }
            }
        }
        Err(GatewayError::Unavailable {
            attempts: self.config.max_attempts,
            last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_request() -> ChatRequest {
        ChatRequest {
            system_prompt: "You extract interview themes.".into(),
            user_content: "INTERVIEWER: How are you?\nPARTICIPANT: I have had a low mood.".into(),
            temperature: 0.0,
            max_tokens: 512,
        }
    }

    #[test]
    fn cache_key_is_stable_and_field_sensitive() {
        let r = fixture_request();
        assert_eq!(cache_key(&r, "mock"), cache_key(&r.clone(), "mock"));
        let warmer = ChatRequest { temperature: 0.1, ..r.clone() };
        assert_ne!(cache_key(&r, "mock"), cache_key(&warmer, "mock"));
        let longer = ChatRequest { max_tokens: 513, ..r.clone() };
        assert_ne!(cache_key(&r, "mock"), cache_key(&longer, "mock"));
        assert_ne!(cache_key(&r, "mock"), cache_key(&r, "remote:m@http://x"));
        // field boundaries are length-prefixed
        let a = ChatRequest { system_prompt: "ab".into(), user_content: "c".into(), ..r.clone() };
        let b = ChatRequest { system_prompt: "a".into(), user_content: "bc".into(), ..r };
        assert_ne!(cache_key(&a, "mock"), cache_key(&b, "mock"));
    }

    #[test]
    fn cache_key_golden() {
        assert_eq!(
            cache_key(&fixture_request(), "mock").to_hex(),
            "31f3fa4d33307d46d692ce2f8e0408088a4cd04aa2c2c6bab6cd393bbd2efa0d"
        );
    }

    #[test]
    fn remote_without_key_fails_before_network() {
        let cfg = BackendConfig {
            kind: BackendKind::Remote,
            endpoint_url: Some("http://127.0.0.1:9".into()),
            api_key_env: Some("THEMEWISE_TEST_KEY_THAT_IS_NOT_SET".into()),
            chat_model: Some("m".into()),
            embedding_model: Some("e".into()),
            ..BackendConfig::default()
        };
        match Gateway::new(cfg) {
            Err(GatewayError::Config(msg)) => assert!(msg.contains("THEMEWISE_TEST_KEY_THAT_IS_NOT_SET")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn remote_config_requires_fields() {
        let cfg = BackendConfig { kind: BackendKind::Remote, ..BackendConfig::default() };
        assert!(matches!(cfg.validate(), Err(GatewayError::Config(m)) if m.contains("endpoint_url")));
        let cfg = BackendConfig { mock_seed: None, ..BackendConfig::default() };
        assert!(matches!(cfg.validate(), Err(GatewayError::Config(m)) if m.contains("mock_seed")));
    }

    #[test]
    fn repeated_mock_chat_hits_cache() {
        let gw = Gateway::new(BackendConfig::mock(1, 16)).unwrap();
        let r = fixture_request();
        let first = gw.chat(&r).unwrap();
        let second = gw.chat(&r).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(first.backend_id, "mock");
    }

    #[test]
    fn empty_request_rejected() {
        let gw = Gateway::new(BackendConfig::mock(1, 16)).unwrap();
        assert!(matches!(
            gw.chat(&ChatRequest::new("s", "   ")),
            Err(GatewayError::InvalidRequest(_))
        ));
        assert!(gw.embed(&["".to_string()]).is_err());
    }

    #[test]
    fn mock_embedding_shape_and_norm() {
        let gw = Gateway::new(BackendConfig::mock(3, 64)).unwrap();
        let out = gw.embed(&["low mood".to_string()]).unwrap();
        assert_eq!(out[0].matrix.shape(), (2, 64));
        assert_eq!(out[0].tokens, vec!["low", "mood"]);
        for r in 0..2 {
            let norm: f64 = out[0].matrix.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_token_same_vector() {
        let gw = Gateway::new(BackendConfig::mock(3, 32)).unwrap();
        let out = gw
            .embed(&["my mood is fine".to_string(), "a low mood".to_string()])
            .unwrap();
        assert_eq!(out[0].matrix.row(1), out[1].matrix.row(2));
        assert_ne!(out[0].matrix.row(0), out[0].matrix.row(1));
        let other_seed = Gateway::new(BackendConfig::mock(4, 32)).unwrap();
        let o = other_seed.embed(&["mood".to_string()]).unwrap();
        assert_ne!(o[0].matrix.row(0), out[0].matrix.row(1));
    }
}
