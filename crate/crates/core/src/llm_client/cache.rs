//! Content-addressed response cache.
//!
//! Layout: `<dir>/<endpoint_id>/<digest>.json`. Each entry is written to a
//! temporary file and renamed into place. An in-memory index of per-key
//! cells ensures that concurrent callers with equal keys share one fetch.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tokio::sync::OnceCell;

/// Hex SHA-256 of the canonical JSON encoding of `key`.
pub fn digest(key: &Value) -> String {
    let bytes = serde_json::to_vec(key).expect("json values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn safe_component(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: Value,
    response: Value,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    index: Mutex<HashMap<String, Arc<OnceCell<Value>>>>,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            index: Mutex::new(HashMap::new()),
            tmp_counter: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, endpoint_id: &str, digest: &str) -> PathBuf {
        self.dir
            .join(safe_component(endpoint_id))
            .join(format!("{digest}.json"))
    }

    fn cell(&self, endpoint_id: &str, digest: &str) -> Arc<OnceCell<Value>> {
        let mut index = self.index.lock().expect("cache index poisoned");
        index
            .entry(format!("{endpoint_id}/{digest}"))
            .or_default()
            .clone()
    }

    /// Returns the cached response for `key`, running `fetch` at most once
    /// per key across concurrent callers. The flag is true when no fetch ran
    /// for this call.
    pub async fn get_or_fetch<F, Fut, E>(
        &self,
        endpoint_id: &str,
        key: &Value,
        fetch: F,
    ) -> Result<(Value, bool), E>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<Value, E>>,
        E: From<std::io::Error>,
    {
        let digest = digest(key);
        let path = self.entry_path(endpoint_id, &digest);
        let cell = self.cell(endpoint_id, &digest);
        let mut fetched = false;
        let value = cell
            .get_or_try_init(|| async {
                if let Some(response) = read_entry(&path).await {
                    return Ok(response);
                }
                fetched = true;
                let response = fetch().await?;
                self.write_entry(&path, key, &response).await?;
                Ok::<_, E>(response)
            })
            .await?
            .clone();
        Ok((value, !fetched))
    }

    async fn write_entry(&self, path: &Path, key: &Value, response: &Value) -> std::io::Result<()> {
        let parent = path.parent().expect("entry path has a parent");
        tokio::fs::create_dir_all(parent).await?;
        let entry = Entry {
            key: key.clone(),
            response: response.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&entry).map_err(std::io::Error::other)?;
        let tmp = parent.join(format!(
            ".{}.{}.{}.tmp",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("entry"),
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        tokio::fs::write(&tmp, bytes).await?;
        tokio::fs::rename(&tmp, path).await
    }
}

async fn read_entry(path: &Path) -> Option<Value> {
    let bytes = tokio::fs::read(path).await.ok()?;
    let entry: Entry = serde_json::from_slice(&bytes).ok()?;
    Some(entry.response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::AtomicUsize;

    #[tokio::test]
    async fn second_lookup_hits_cache_and_disk_layout_matches() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let key = json!({"endpoint": "ext", "messages": ["hi"]});
        let calls = AtomicUsize::new(0);
        let fetch = || async {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok::<_, std::io::Error>(json!("hello"))
        };
        let (v1, hit1) = cache.get_or_fetch("ext", &key, fetch).await.unwrap();
        let (v2, hit2) = cache
            .get_or_fetch("ext", &key, || async { Ok::<_, std::io::Error>(json!("other")) })
            .await
            .unwrap();
        assert_eq!((v1.clone(), hit1), (json!("hello"), false));
        assert_eq!((v2, hit2), (json!("hello"), true));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let path = dir.path().join("ext").join(format!("{}.json", digest(&key)));
        assert!(path.exists());

        // a fresh process sees the on-disk entry
        let reopened = ResponseCache::new(dir.path());
        let (v3, hit3) = reopened
            .get_or_fetch("ext", &key, || async { Ok::<_, std::io::Error>(json!("x")) })
            .await
            .unwrap();
        assert_eq!((v3, hit3), (v1, true));
    }

    #[tokio::test]
    async fn concurrent_equal_keys_fetch_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::new(dir.path()));
        let calls = Arc::new(AtomicUsize::new(0));
        let key = json!({"k": 1});
        let tasks: Vec<_> = (0..16)
            .map(|_| {
                let cache = cache.clone();
                let calls = calls.clone();
                let key = key.clone();
                tokio::spawn(async move {
                    cache
                        .get_or_fetch("e", &key, || async move {
                            calls.fetch_add(1, Ordering::SeqCst);
                            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
                            Ok::<_, std::io::Error>(json!(42))
                        })
                        .await
                        .unwrap()
                })
            })
            .collect();
        for t in tasks {
            assert_eq!(t.await.unwrap().0, json!(42));
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn failed_fetch_is_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let key = json!("k");
        let err = cache
            .get_or_fetch("e", &key, || async { Err::<Value, _>(std::io::Error::other("boom")) })
            .await;
        assert!(err.is_err());
        let (v, hit) = cache
            .get_or_fetch("e", &key, || async { Ok::<_, std::io::Error>(json!(1)) })
            .await
            .unwrap();
        assert_eq!((v, hit), (json!(1), false));
    }

    #[test]
    fn endpoint_ids_are_sanitized() {
        let cache = ResponseCache::new("/tmp/c");
        let p = cache.entry_path("../evil id", "abc");
        assert_eq!(p, PathBuf::from("/tmp/c/___evil_id/abc.json"));
    }
}
