use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{CacheKey, ChatRequest, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub backend_id: String,
}

/// On-disk cache record, one file per digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: ChatRequest,
    pub response: CachedResponse,
    pub created_at: String,
}

/// In-memory response cache, optionally mirrored to a directory of
/// `<digest>.json` files.
#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<CacheKey, String>>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> Result<ResponseCache, GatewayError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)
                .map_err(|e| GatewayError::Cache(format!("{}: {e}", d.display())))?;
        }
        Ok(ResponseCache {
            dir,
            memory: RwLock::new(HashMap::new()),
        })
    }

    fn path(dir: &Path, key: &CacheKey) -> PathBuf {
        dir.join(format!("{}.json", key.to_hex()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<String>, GatewayError> {
        if let Some(text) = self.memory.read().expect("cache lock").get(key) {
            return Ok(Some(text.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = Self::path(dir, key);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        self.memory
            .write()
            .expect("cache lock")
            .insert(*key, entry.response.text.clone());
        Ok(Some(entry.response.text))
    }

    pub fn put(
        &self,
        key: &CacheKey,
        request: &ChatRequest,
        text: &str,
        backend_id: &str,
    ) -> Result<(), GatewayError> {
        self.memory
            .write()
            .expect("cache lock")
            .insert(*key, text.to_string());
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let entry = CacheEntry {
            request: request.clone(),
            response: CachedResponse {
                text: text.to_string(),
                backend_id: backend_id.to_string(),
            },
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let final_path = Self::path(dir, key);
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            key.to_hex(),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let body = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
        fs::write(&tmp, body)
            .and_then(|_| fs::rename(&tmp, &final_path))
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", final_path.display())))
    }

    pub fn remove(&self, key: &CacheKey) -> Result<(), GatewayError> {
        self.memory.write().expect("cache lock").remove(key);
        if let Some(dir) = &self.dir {
            let path = Self::path(dir, key);
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::cache_key;

    #[test]
    fn disk_cache_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("sys", "hello");
        let key = cache_key(&req, "mock");
        {
            let c = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
            assert_eq!(c.get(&key).unwrap(), None);
            c.put(&key, &req, "world", "mock").unwrap();
        }
        let c = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        assert_eq!(c.get(&key).unwrap().as_deref(), Some("world"));

        let raw = fs::read_to_string(dir.path().join(format!("{}.json", key.to_hex()))).unwrap();
        let entry: CacheEntry = serde_json::from_str(&raw).unwrap();
        assert_eq!(entry.request, req);
        assert!(chrono::DateTime::parse_from_rfc3339(&entry.created_at).is_ok());

        c.remove(&key).unwrap();
        assert_eq!(c.get(&key).unwrap(), None);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert!(leftovers.is_empty());
    }
}
