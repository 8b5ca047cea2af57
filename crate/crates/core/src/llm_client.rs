//! Classification client: free-text job descriptions to categorical
//! effort levels, one per resource channel.
//!
//! Two modes share one request/response schema:
//!
//! - **Live**: JSON over HTTP against a single endpoint taken from
//!   `CTXMPC_LLM_ENDPOINT` (credential in `CTXMPC_LLM_API_KEY`).
//!   Request body `{template_id, channels, description}`, response
//!   `{levels: {channel: word}}` with one word per channel out of
//!   `none | low | medium | high`. Every live response is appended to
//!   the fixture store for later hermetic replay.
//! - **Fixture**: deterministic replay keyed by a digest of the
//!   request; no network. Cache misses either error or fall back to
//!   all-zero levels, per configuration.
//!
//! No failure path blocks the control loop: timeouts retry a bounded
//! number of times and then degrade to all-zero levels with a warning,
//! as does an unparseable response.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Word-to-level mapping: none/low/medium/high -> 0/1/2/3.
pub fn effort_level_from_word(word: &str) -> Option<u8> {
    match word.trim().to_ascii_lowercase().as_str() {
        "none" => Some(0),
        "low" => Some(1),
        "medium" => Some(2),
        "high" => Some(3),
        _ => None,
    }
}

pub fn effort_word_from_level(level: u8) -> &'static str {
    match level {
        0 => "none",
        1 => "low",
        2 => "medium",
        _ => "high",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ClassificationRequest {
    pub template_id: String,
    pub channels: Vec<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    /// Level per channel, all channels populated, values in 0..=3.
    pub levels: BTreeMap<String, u8>,
    pub raw_response: String,
    pub latency: Duration,
}

impl ClassificationResult {
    fn all_zero(channels: &[String], raw: impl Into<String>, latency: Duration) -> Self {
        Self {
            levels: channels.iter().map(|c| (c.clone(), 0)).collect(),
            raw_response: raw.into(),
            latency,
        }
    }

    /// Levels in the request's channel order.
    pub fn level_vector(&self, channels: &[String]) -> Vec<u8> {
        channels
            .iter()
            .map(|c| self.levels.get(c).copied().unwrap_or(0))
            .collect()
    }
}

/// Wire response body.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ResponseBody {
    pub levels: BTreeMap<String, String>,
}

/// Stable digest of a request (sha256 of its canonical JSON).
pub fn request_digest(request: &ClassificationRequest) -> String {
    let canonical = serde_json::to_string(request).expect("request serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the append-only fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub digest: String,
    pub request: ClassificationRequest,
    pub response: ResponseBody,
}

/// Append-only store of recorded classifications, keyed by request
/// digest. Later records for the same digest win (replay of the most
/// recent recording).
#[derive(Debug, Default)]
pub struct FixtureStore {
    records: HashMap<String, ResponseBody>,
    path: Option<PathBuf>,
}

impl FixtureStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Load a JSONL fixture file; a missing file starts empty.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = Self {
            records: HashMap::new(),
            path: Some(path.to_path_buf()),
        };
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let record: FixtureRecord = serde_json::from_str(line)?;
                store.records.insert(record.digest, record.response);
            }
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, digest: &str) -> Option<&ResponseBody> {
        self.records.get(digest)
    }

    /// Record a request/response pair; appends to the backing file when
    /// one is configured.
    pub fn insert(
        &mut self,
        request: &ClassificationRequest,
        response: ResponseBody,
    ) -> Result<String> {
        let digest = request_digest(request);
        if let Some(path) = &self.path {
            let record = FixtureRecord {
                digest: digest.clone(),
                request: request.clone(),
                response: response.clone(),
            };
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
        }
        self.records.insert(digest.clone(), response);
        Ok(digest)
    }
}

/// Behavior on a fixture cache miss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissPolicy {
    #[default]
    Error,
    AllZero,
}

/// Deterministic replay of a recorded classification.
pub fn fixture_replay(
    store: &FixtureStore,
    request: &ClassificationRequest,
    miss: MissPolicy,
) -> Result<ClassificationResult> {
    let digest = request_digest(request);
    match store.lookup(&digest) {
        Some(body) => parse_levels(body, &request.channels, Duration::ZERO)
            .ok_or_else(|| Error::Service(format!("fixture {digest} has malformed levels"))),
        None => match miss {
            MissPolicy::Error => Err(Error::FixtureMiss { digest }),
            MissPolicy::AllZero => Ok(ClassificationResult::all_zero(
                &request.channels,
                "fixture-miss",
                Duration::ZERO,
            )),
        },
    }
}

fn parse_levels(
    body: &ResponseBody,
    channels: &[String],
    latency: Duration,
) -> Option<ClassificationResult> {
    let mut levels = BTreeMap::new();
    for channel in channels {
        let word = body.levels.get(channel)?;
        levels.insert(channel.clone(), effort_level_from_word(word)?);
    }
    Some(ClassificationResult {
        levels,
        raw_response: serde_json::to_string(body).unwrap_or_default(),
        latency,
    })
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    /// Per-attempt deadline; backoff between retries is capped by it.
    pub deadline: Duration,
    pub retries: usize,
}

enum ClientMode {
    Live {
        config: LiveConfig,
        http: reqwest::blocking::Client,
        store: Option<Arc<Mutex<FixtureStore>>>,
    },
    Fixture {
        store: Arc<Mutex<FixtureStore>>,
        miss: MissPolicy,
    },
}

/// Shareable classification client.
pub struct LlmClient {
    mode: ClientMode,
}

impl LlmClient {
    /// Hermetic client over a fixture store.
    pub fn fixture(store: FixtureStore, miss: MissPolicy) -> Self {
        Self {
            mode: ClientMode::Fixture {
                store: Arc::new(Mutex::new(store)),
                miss,
            },
        }
    }

    pub fn fixture_shared(store: Arc<Mutex<FixtureStore>>, miss: MissPolicy) -> Self {
        Self {
            mode: ClientMode::Fixture { store, miss },
        }
    }

    /// Live client; the endpoint comes from `CTXMPC_LLM_ENDPOINT` and
    /// the optional credential from `CTXMPC_LLM_API_KEY`. Responses are
    /// recorded into `record_to` when given.
    pub fn live_from_env(record_to: Option<&Path>) -> Result<Self> {
        let endpoint = std::env::var("CTXMPC_LLM_ENDPOINT")
            .map_err(|_| Error::Config("CTXMPC_LLM_ENDPOINT is not set".into()))?;
        let api_key = std::env::var("CTXMPC_LLM_API_KEY").ok();
        let store = match record_to {
            Some(path) => Some(Arc::new(Mutex::new(FixtureStore::open(path)?))),
            None => None,
        };
        Self::live(
            LiveConfig {
                endpoint,
                api_key,
                deadline: Duration::from_secs(10),
                retries: 2,
            },
            store,
        )
    }

    pub fn live(config: LiveConfig, store: Option<Arc<Mutex<FixtureStore>>>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.deadline)
            .build()
            .map_err(|e| Error::Service(format!("http client: {e}")))?;
        Ok(Self {
            mode: ClientMode::Live {
                config,
                http,
                store,
            },
        })
    }

    /// Classify one job description into per-channel effort levels.
    ///
    /// Never aborts the loop: service failures and malformed responses
    /// degrade to all-zero levels with a warning. An empty description
    /// is the "no context" case and short-circuits to level zero on
    /// every channel.
    pub fn classify_job(&self, request: &ClassificationRequest) -> Result<ClassificationResult> {
        if request.channels.is_empty() {
            return Err(Error::Config("classification needs at least one channel".into()));
        }
        if request.description.trim().is_empty() {
            return Ok(ClassificationResult::all_zero(
                &request.channels,
                "empty-context",
                Duration::ZERO,
            ));
        }
        match &self.mode {
            ClientMode::Fixture { store, miss } => {
                let store = store.lock().expect("fixture store lock");
                fixture_replay(&store, request, *miss)
            }
            ClientMode::Live {
                config,
                http,
                store,
            } => Ok(self.classify_live(config, http, store.as_ref(), request)),
        }
    }

    fn classify_live(
        &self,
        config: &LiveConfig,
        http: &reqwest::blocking::Client,
        store: Option<&Arc<Mutex<FixtureStore>>>,
        request: &ClassificationRequest,
    ) -> ClassificationResult {
        let start = Instant::now();
        let mut backoff = Duration::from_millis(250);
        for attempt in 0..=config.retries {
            if attempt > 0 {
                std::thread::sleep(backoff.min(config.deadline));
                backoff *= 2;
            }
            let mut call = http.post(&config.endpoint).json(request);
            if let Some(key) = &config.api_key {
                call = call.bearer_auth(key);
            }
            let response = match call.send().and_then(|r| r.error_for_status()) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("classification attempt {attempt} failed: {e}");
                    continue;
                }
            };
            let body: ResponseBody = match response.json() {
                Ok(b) => b,
                Err(e) => {
                    log::warn!("classification response unparseable: {e}");
                    return ClassificationResult::all_zero(
                        &request.channels,
                        format!("unparseable: {e}"),
                        start.elapsed(),
                    );
                }
            };
            match parse_levels(&body, &request.channels, start.elapsed()) {
                Some(result) => {
                    if let Some(store) = store {
                        let mut store = store.lock().expect("fixture store lock");
                        if let Err(e) = store.insert(request, body) {
                            log::warn!("failed to persist fixture record: {e}");
                        }
                    }
                    return result;
                }
                None => {
                    log::warn!("classification levels incomplete or unknown words; using zeros");
                    return ClassificationResult::all_zero(
                        &request.channels,
                        serde_json::to_string(&body).unwrap_or_default(),
                        start.elapsed(),
                    );
                }
            }
        }
        log::warn!("classification service unreachable; using all-zero levels");
        ClassificationResult::all_zero(&request.channels, "transport-failure", start.elapsed())
    }
}
