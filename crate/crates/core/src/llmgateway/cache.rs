use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Backend, CacheKey, CompletionRequest, CompletionResponse, GatewayError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Serve hits from the cache, call the inner backend on misses and record them.
    #[default]
    Record,
    /// Serve hits only; a miss is an error.
    Replay,
    /// Bypass the cache entirely.
    Off,
}

/// What one cache file holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: CacheKey,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
}

/// Write-once store of request/response pairs, one JSON file per key.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let k = key.as_str();
        self.root.join(&k[..2]).join(format!("{k}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheRecord>, GatewayError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.path_for(key).is_file()
    }

    /// Stores `response` under the request's key and returns the stored record.
    /// Re-storing an identical response is a no-op; a different one is a conflict.
    pub fn put(
        &self,
        request: &CompletionRequest,
        response: &CompletionResponse,
    ) -> Result<CacheRecord, GatewayError> {
        let key = request.cache_key();
        let record = CacheRecord {
            key: key.clone(),
            request: request.clone(),
            response: response.clone(),
        };
        let mut bytes = serde_json::to_vec(&record).map_err(|e| io_err(&self.root, e))?;
        bytes.push(b'\n');

        let path = self.path_for(&key);
        let dir = path.parent().expect("cache paths have a shard directory");
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| io_err(tmp.path(), e))?;
        tmp.as_file()
            .sync_all()
            .map_err(|e| io_err(tmp.path(), e))?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => {}
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => {
                let existing = self.get(&key)?.ok_or_else(|| io_err(&path, "vanished"))?;
                if existing.response != record.response {
                    return Err(GatewayError::CacheConflict {
                        digest: key.to_string(),
                    });
                }
                return Ok(existing);
            }
            Err(e) => return Err(io_err(&path, e.error)),
        }
        // Hand back the decoded form so first-call and replayed responses agree bit for bit.
        serde_json::from_slice(&bytes).map_err(|e| io_err(&path, e))
    }

    /// Number of stored records.
    pub fn len(&self) -> usize {
        let Ok(shards) = fs::read_dir(&self.root) else {
            return 0;
        };
        shards
            .filter_map(Result::ok)
            .filter_map(|s| fs::read_dir(s.path()).ok())
            .flat_map(|entries| entries.filter_map(Result::ok))
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Record/replay wrapper around an optional live or scripted backend.
pub struct CachedBackend {
    inner: Option<Box<dyn Backend>>,
    cache: ResponseCache,
    mode: CacheMode,
}

impl CachedBackend {
    pub fn new(inner: Option<Box<dyn Backend>>, cache: ResponseCache, mode: CacheMode) -> Self {
        Self { inner, cache, mode }
    }

    /// Strict replay: no inner backend, every request must already be cached.
    pub fn replay(cache: ResponseCache) -> Self {
        Self::new(None, cache, CacheMode::Replay)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    fn inner(&self) -> Result<&dyn Backend, GatewayError> {
        self.inner
            .as_deref()
            .ok_or_else(|| GatewayError::Config("no backend configured behind the cache".into()))
    }
}

impl Backend for CachedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let key = req.cache_key();
        match self.mode {
            CacheMode::Off => self.inner()?.complete(req),
            CacheMode::Replay => {
                self.cache
                    .get(&key)?
                    .map(|r| r.response)
                    .ok_or(GatewayError::MissingFixture {
                        digest: key.to_string(),
                    })
            }
            CacheMode::Record => {
                if let Some(hit) = self.cache.get(&key)? {
                    return Ok(hit.response);
                }
                let response = self.inner()?.complete(req)?;
                Ok(self.cache.put(req, &response)?.response)
            }
        }
    }

    fn probe(&self) -> Result<(), GatewayError> {
        match (&self.inner, self.mode) {
            (_, CacheMode::Replay) => {
                if self.cache.root().is_dir() {
                    Ok(())
                } else {
                    Err(GatewayError::Config(format!(
                        "cache root {} does not exist",
                        self.cache.root().display()
                    )))
                }
            }
            (Some(inner), _) => inner.probe(),
            (None, _) => Err(GatewayError::Config("no backend configured".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Decoding, Matcher, MockBackend, MockRule};
    use super::*;
    use std::sync::Arc;

    fn yes_no_mock() -> MockBackend {
        MockBackend::new(vec![MockRule::new(
            Matcher::contains(["hints"]),
            CompletionResponse::with_alternatives(&[("Yes", -0.1), ("No", -2.4)]),
        )])
        .unwrap()
    }

    fn ask() -> CompletionRequest {
        CompletionRequest::new("m", "need hints?", Decoding::greedy(8)).with_logprobs(5)
    }

    #[test]
    fn record_then_hit_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(yes_no_mock());
        let backend = CachedBackend::new(
            Some(Box::new(mock.clone())),
            ResponseCache::open(dir.path()).unwrap(),
            CacheMode::Record,
        );
        let first = backend.complete(&ask()).unwrap();
        let second = backend.complete(&ask()).unwrap();
        assert_eq!(mock.calls(), 1);
        assert_eq!(
            serde_json::to_vec(&first).unwrap(),
            serde_json::to_vec(&second).unwrap()
        );
        let alts = &first.token_logprobs.as_ref().unwrap()[0].top_logprobs;
        assert_eq!(alts.len(), 2);
        assert_eq!((alts[0].token.as_str(), alts[0].logprob), ("Yes", -0.1));
        assert_eq!((alts[1].token.as_str(), alts[1].logprob), ("No", -2.4));
    }

    #[test]
    fn strict_replay_miss_names_digest() {
        let dir = tempfile::tempdir().unwrap();
        let backend = CachedBackend::replay(ResponseCache::open(dir.path()).unwrap());
        let req = ask();
        match backend.complete(&req) {
            Err(GatewayError::MissingFixture { digest }) => {
                assert_eq!(digest, req.cache_key().to_string())
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_serves_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let recorder = CachedBackend::new(
            Some(Box::new(yes_no_mock())),
            cache.clone(),
            CacheMode::Record,
        );
        let recorded = recorder.complete(&ask()).unwrap();
        let replayer = CachedBackend::replay(cache);
        assert_eq!(replayer.complete(&ask()).unwrap(), recorded);
        assert_eq!(replayer.cache().len(), 1);
    }

    #[test]
    fn write_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let req = ask();
        cache.put(&req, &CompletionResponse::text("Yes")).unwrap();
        cache.put(&req, &CompletionResponse::text("Yes")).unwrap();
        assert!(matches!(
            cache.put(&req, &CompletionResponse::text("No")),
            Err(GatewayError::CacheConflict { .. })
        ));
        assert_eq!(
            cache.get(&req.cache_key()).unwrap().unwrap().response.text,
            "Yes"
        );
    }

    #[test]
    fn concurrent_writers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let req = ask();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| cache.put(&req, &CompletionResponse::text("Yes")).unwrap());
            }
        });
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn off_mode_bypasses_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(yes_no_mock());
        let backend = CachedBackend::new(
            Some(Box::new(mock.clone())),
            ResponseCache::open(dir.path()).unwrap(),
            CacheMode::Off,
        );
        backend.complete(&ask()).unwrap();
        backend.complete(&ask()).unwrap();
        assert_eq!(mock.calls(), 2);
        assert!(backend.cache().is_empty());
    }
}
