//! OpenAI-compatible HTTP backend (`/v1/chat/completions`, `/v1/embeddings`).

use std::time::Duration;

use serde_json::{json, Value};

use super::{AttemptError, Backend, BackendConfig, ChatRequest, EmbeddingMatrix, GatewayError};
use crate::numeric::Matrix;

pub struct RemoteBackend {
    base_url: String,
    api_key: String,
    chat_model: String,
    embedding_model: String,
    chunk_words: usize,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base_url", &self.base_url)
            .field("chat_model", &self.chat_model)
            .field("embedding_model", &self.embedding_model)
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<RemoteBackend, GatewayError> {
        let var = cfg
            .api_key_env
            .as_deref()
            .ok_or_else(|| GatewayError::Config("api_key_env is required".into()))?;
        let api_key = std::env::var(var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                GatewayError::Config(format!("environment variable {var} is not set"))
            })?;
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build();
        Ok(RemoteBackend {
            base_url: cfg
                .endpoint_url
                .as_deref()
                .unwrap_or_default()
                .trim_end_matches('/')
                .to_string(),
            api_key,
            chat_model: cfg.chat_model.clone().unwrap_or_default(),
            embedding_model: cfg.embedding_model.clone().unwrap_or_default(),
            chunk_words: cfg.remote_chunk_words,
            agent: ureq::Agent::new_with_config(config),
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, AttemptError> {
        let url = format!("{}{path}", self.base_url);
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| AttemptError::Retryable(format!("POST {url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Retryable(format!("reading {url}: {e}")))?;
        if status == 429 || status >= 500 {
            return Err(AttemptError::Retryable(format!("HTTP {status} from {url}")));
        }
        if !(200..300).contains(&status) {
            return Err(AttemptError::Fatal(GatewayError::Http {
                status,
                body: text.chars().take(500).collect(),
            }));
        }
        serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(GatewayError::Protocol(format!("{url}: {e}"))))
    }

    /// Splits text into whitespace-word chunks of at most `chunk_words`.
    fn chunk(&self, text: &str) -> Vec<String> {
        let words: Vec<&str> = text.split_whitespace().collect();
        words.chunks(self.chunk_words).map(|c| c.join(" ")).collect()
    }
}

fn protocol(msg: impl Into<String>) -> AttemptError {
    AttemptError::Fatal(GatewayError::Protocol(msg.into()))
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.chat_model)
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, AttemptError> {
        let body = json!({
            "model": self.chat_model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let v = self.post("/v1/chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| protocol("missing choices[0].message.content"))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingMatrix>, AttemptError> {
        let chunked: Vec<Vec<String>> = texts.iter().map(|t| self.chunk(t)).collect();
        let inputs: Vec<&String> = chunked.iter().flatten().collect();
        let body = json!({ "model": self.embedding_model, "input": inputs });
        let v = self.post("/v1/embeddings", &body)?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| protocol("missing data array"))?;
        if data.len() != inputs.len() {
            return Err(protocol(format!(
                "sent {} inputs, received {} embeddings",
                inputs.len(),
                data.len()
            )));
        }
        let mut vectors: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let emb = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| protocol(format!("data[{pos}].embedding missing")))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| protocol("embedding value is not a number")))
                .collect::<Result<Vec<f64>, _>>()?;
            let slot = vectors
                .get_mut(idx)
                .ok_or_else(|| protocol(format!("embedding index {idx} out of range")))?;
            *slot = Some(emb);
        }
        let mut it = vectors.into_iter();
        let mut out = Vec::with_capacity(texts.len());
        for chunks in chunked {
            let rows: Vec<Vec<f64>> = it
                .by_ref()
                .take(chunks.len())
                .map(|v| v.ok_or_else(|| protocol("duplicate embedding index")))
                .collect::<Result<_, _>>()?;
            let dim = rows[0].len();
            if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
                return Err(AttemptError::Fatal(GatewayError::Dimension {
                    expected: dim,
                    actual: bad.len(),
                }));
            }
            let matrix = Matrix::new(rows.len(), dim, rows.concat())
                .map_err(|e| protocol(e.to_string()))?;
            out.push(EmbeddingMatrix {
                tokens: chunks,
                matrix,
            });
        }
        Ok(out)
    }
}
