//! Content-addressed completion cache and append-only request ledger.
//!
//! Cache entries are keyed by `sha256(model, prompt, settings)` and written
//! atomically (temp file + rename), so concurrent readers and writers never
//! observe partial entries. Every entry embeds content hashes; an entry that
//! fails its integrity check is dropped and recomputed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{GatewayError, GenSettings, LlmEndpoint, RenderedPrompt};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cache key for one (model, prompt, settings) request.
pub fn request_key(model: &str, prompt_text: &str, settings: &GenSettings) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.as_bytes());
    hasher.update([0u8]);
    hasher.update(prompt_text.as_bytes());
    hasher.update([0u8]);
    hasher.update(settings.fingerprint().as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    settings: String,
    prompt_sha256: String,
    response: String,
    response_sha256: String,
}

#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DiskCache {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    /// Look up a response. A corrupt entry (hash mismatch, unreadable JSON)
    /// is removed so the caller recomputes it.
    pub fn get(&self, model: &str, prompt_text: &str, settings: &GenSettings) -> Option<String> {
        let key = request_key(model, prompt_text, settings);
        let path = self.entry_path(&key);
        let bytes = fs::read(&path).ok()?;
        let entry: Result<CacheEntry, _> = serde_json::from_slice(&bytes);
        let valid = entry.as_ref().ok().and_then(|e| {
            let intact = e.prompt_sha256 == sha256_hex(prompt_text.as_bytes())
                && e.response_sha256 == sha256_hex(e.response.as_bytes())
                && e.model == model
                && e.settings == settings.fingerprint();
            intact.then(|| e.response.clone())
        });
        match valid {
            Some(response) => Some(response),
            None => {
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    /// Write-through after a successful completion.
    pub fn put(
        &self,
        model: &str,
        prompt_text: &str,
        settings: &GenSettings,
        response: &str,
    ) -> Result<(), GatewayError> {
        let key = request_key(model, prompt_text, settings);
        let path = self.entry_path(&key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let entry = CacheEntry {
            model: model.to_string(),
            settings: settings.fingerprint(),
            prompt_sha256: sha256_hex(prompt_text.as_bytes()),
            response: response.to_string(),
            response_sha256: sha256_hex(response.as_bytes()),
        };
        let tmp = self.dir.join(format!(
            ".tmp.{}.{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(
            &serde_json::to_vec(&entry)
                .map_err(|e| GatewayError::Transport(format!("cache entry serialization: {e}")))?,
        )?;
        file.sync_all()?;
        drop(file);
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

/// One line per completion request: hash, model, settings, time, outcome.
#[derive(Debug, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub request_hash: String,
    pub model: String,
    pub settings: String,
    pub timestamp: u64,
    pub outcome: String,
}

/// Append-only JSONL request ledger.
#[derive(Debug)]
pub struct RequestLedger {
    file: Mutex<fs::File>,
}

impl RequestLedger {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        if let Some(parent) = path.as_ref().parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(RequestLedger {
            file: Mutex::new(file),
        })
    }

    pub fn record(&self, request_hash: &str, model: &str, settings: &GenSettings, outcome: &str) {
        let entry = LedgerEntry {
            request_hash: request_hash.to_string(),
            model: model.to_string(),
            settings: settings.fingerprint(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outcome: outcome.to_string(),
        };
        if let (Ok(mut file), Ok(line)) = (self.file.lock(), serde_json::to_string(&entry)) {
            let _ = writeln!(file, "{line}");
        }
    }
}

/// Caching wrapper around any endpoint: consults the disk cache before any
/// inner call and writes through on success. `calls()` counts only inner
/// completions, so a warm cache is observable as zero new calls.
pub struct CachedEndpoint<E> {
    inner: E,
    cache: DiskCache,
    ledger: Option<RequestLedger>,
    hits: AtomicU64,
}

impl<E: LlmEndpoint> CachedEndpoint<E> {
    pub fn new(inner: E, cache: DiskCache) -> Self {
        CachedEndpoint {
            inner,
            cache,
            ledger: None,
            hits: AtomicU64::new(0),
        }
    }

    pub fn with_ledger(mut self, ledger: RequestLedger) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: LlmEndpoint> LlmEndpoint for CachedEndpoint<E> {
    fn complete_raw(
        &self,
        prompt: &RenderedPrompt,
        settings: &GenSettings,
    ) -> Result<String, GatewayError> {
        let text = prompt.full_text();
        let model = self.inner.model_id();
        let key = request_key(model, &text, settings);
        if let Some(response) = self.cache.get(model, &text, settings) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            if let Some(ledger) = &self.ledger {
                ledger.record(&key, model, settings, "cache_hit");
            }
            return Ok(response);
        }
        match self.inner.complete_raw(prompt, settings) {
            Ok(response) => {
                self.cache.put(model, &text, settings, &response)?;
                if let Some(ledger) = &self.ledger {
                    ledger.record(&key, model, settings, "ok");
                }
                Ok(response)
            }
            Err(e) => {
                if let Some(ledger) = &self.ledger {
                    ledger.record(&key, model, settings, &format!("error: {e}"));
                }
                Err(e)
            }
        }
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn calls(&self) -> u64 {
        self.inner.calls()
    }
}
