//! Sessions, the content-addressed result store and background jobs.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::http::StatusCode;
use lakechart_core::ingest::{AlignmentOrigin, LakeSource, LoadOptions};
use lakechart_core::pipeline::{recommend, Prepared, RecommendationPayload, RunOptions};
use lakechart_core::{EngineConfig, Lake, Strategy};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::task::JoinHandle;

use crate::error::ApiError;

fn default_delimiter() -> String {
    ",".into()
}

fn default_header() -> bool {
    true
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    #[serde(flatten)]
    pub source: LakeSource,
    /// Overrides on top of the engine defaults.
    #[serde(default)]
    pub config: EngineConfig,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_header")]
    pub header: bool,
}

impl SessionRequest {
    pub fn load_options(&self) -> Result<LoadOptions, ApiError> {
        match self.delimiter.as_bytes() {
            [b] => Ok(LoadOptions {
                delimiter: *b,
                has_header: self.header,
            }),
            _ => Err(ApiError::bad_request(format!(
                "delimiter must be one ASCII character, got `{}`",
                self.delimiter
            ))),
        }
    }
}

/// Per-call options for a recommendation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunRequest {
    pub n: usize,
    pub strategy: Strategy,
    pub prune: bool,
}

pub struct Session {
    pub id: String,
    pub request: SessionRequest,
    pub lake: Arc<Lake>,
    pub origin: AlignmentOrigin,
    /// Hash of the input bytes and load options.
    pub input_key: String,
    prepared: Mutex<HashMap<Strategy, Arc<OnceLock<Arc<Prepared>>>>>,
}

impl Session {
    /// Reads and aligns the lake. Blocking.
    pub fn open(id: String, request: SessionRequest) -> Result<Self, ApiError> {
        let opts = request.load_options()?;
        let bad = |e| ApiError::engine(e, StatusCode::BAD_REQUEST);
        let input_key = input_key(&request.source, &opts).map_err(bad)?;
        let (lake, origin) = request.source.load(&opts, &request.config).map_err(bad)?;
        Ok(Self {
            id,
            request,
            lake: Arc::new(lake),
            origin,
            input_key,
            prepared: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.request.config
    }

    pub fn run_defaults(&self) -> RunRequest {
        let c = self.config();
        RunRequest {
            n: c.n,
            strategy: c.strategy,
            prune: c.prune,
        }
    }

    /// The effective configuration of a run; part of its cache key.
    pub fn effective_config(&self, run: RunRequest) -> EngineConfig {
        EngineConfig {
            n: run.n,
            strategy: run.strategy,
            prune: run.prune,
            ..self.config().clone()
        }
    }

    /// Prepared lake for a strategy, built once. Blocking.
    pub fn prepared(&self, strategy: Strategy) -> Arc<Prepared> {
        let cell = Arc::clone(self.prepared.lock().entry(strategy).or_default());
        Arc::clone(cell.get_or_init(|| {
            let config = EngineConfig {
                strategy,
                ..self.config().clone()
            };
            Arc::new(Prepared::new(Arc::clone(&self.lake), config))
        }))
    }

    pub fn result_key(&self, run: RunRequest) -> String {
        let config = serde_json::to_string(&self.effective_config(run)).expect("config serializes");
        let mut h = Sha256::new();
        h.update(self.input_key.as_bytes());
        h.update([0]);
        h.update(config.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Hashes every input file (name, length, bytes) plus the load options.
pub fn input_key(source: &LakeSource, opts: &LoadOptions) -> lakechart_core::Result<String> {
    let mut h = Sha256::new();
    h.update([opts.delimiter, u8::from(opts.has_header)]);
    let files = source.files()?;
    for (i, path) in files.iter().enumerate() {
        let bytes = std::fs::read(path).map_err(|source| lakechart_core::Error::Io {
            path: path.clone(),
            source,
        })?;
        let role = if i == 0 {
            "query"
        } else if source.alignment.as_ref() == Some(path) && i + 1 == files.len() {
            "alignment"
        } else {
            "result"
        };
        let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
        h.update(role.as_bytes());
        h.update([0]);
        h.update(name.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    request: SessionRequest,
}

enum Job {
    Running(JoinHandle<()>),
    Failed(ApiError),
}

/// Outcome of an async poll.
pub enum Poll {
    Done(Arc<str>, bool),
    Running,
}

pub struct AppState {
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    results: RwLock<HashMap<String, Arc<str>>>,
    flights: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    jobs: Mutex<HashMap<String, Job>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", uuid::Uuid::new_v4()));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)
}

impl AppState {
    /// Opens the store under `data_dir`, reloading saved sessions. Sessions whose inputs
    /// can no longer be read are skipped.
    pub fn open(data_dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(data_dir.join("sessions"))?;
        std::fs::create_dir_all(data_dir.join("results"))?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(data_dir.join("sessions"))? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let record: SessionRecord = match std::fs::read(&path)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
            {
                Some(r) => r,
                None => {
                    tracing::warn!(path = %path.display(), "unreadable session record");
                    continue;
                }
            };
            match Session::open(record.id.clone(), record.request) {
                Ok(s) => {
                    sessions.insert(record.id, Arc::new(s));
                }
                Err(e) => tracing::warn!(id = %record.id, "session not restored: {e}"),
            }
        }
        Ok(Self {
            data_dir,
            sessions: RwLock::new(sessions),
            results: RwLock::new(HashMap::new()),
            flights: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn result_path(&self, key: &str) -> PathBuf {
        self.data_dir.join("results").join(format!("{key}.json"))
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    pub async fn create_session(&self, request: SessionRequest) -> Result<Arc<Session>, ApiError> {
        let id = uuid::Uuid::new_v4().to_string();
        let session = {
            let id = id.clone();
            tokio::task::spawn_blocking(move || Session::open(id, request))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))??
        };
        let record = SessionRecord {
            id: id.clone(),
            request: session.request.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&record).expect("record serializes");
        write_atomic(&self.data_dir.join("sessions").join(format!("{id}.json")), &bytes)
            .map_err(|e| ApiError::internal(format!("cannot save session: {e}")))?;
        let session = Arc::new(session);
        self.sessions.write().insert(id, Arc::clone(&session));
        Ok(session)
    }

    /// Cached payload from memory, then disk.
    fn cached(&self, key: &str) -> Option<Arc<str>> {
        if let Some(hit) = self.results.read().get(key) {
            return Some(Arc::clone(hit));
        }
        let text = std::fs::read_to_string(self.result_path(key)).ok()?;
        let text: Arc<str> = text.into();
        self.results.write().insert(key.to_string(), Arc::clone(&text));
        Some(text)
    }

    /// Returns the payload for a run and whether it came from the cache. Runs with the
    /// same key are serialized, so each payload is computed once.
    pub async fn recommendations(
        &self,
        session: &Arc<Session>,
        run: RunRequest,
    ) -> Result<(Arc<str>, bool), ApiError> {
        let key = session.result_key(run);
        if let Some(hit) = self.cached(&key) {
            return Ok((hit, true));
        }
        let flight = Arc::clone(self.flights.lock().entry(key.clone()).or_default());
        let _guard = flight.lock().await;
        if let Some(hit) = self.cached(&key) {
            return Ok((hit, true));
        }
        let s = Arc::clone(session);
        let payload = tokio::task::spawn_blocking(move || {
            let prep = s.prepared(run.strategy);
            let opts = RunOptions {
                n: run.n,
                prune: run.prune,
                ..RunOptions::from_config(&prep.config)
            };
            let rec = recommend(&prep, opts)?;
            Ok::<_, lakechart_core::Error>(RecommendationPayload::new(&prep, &rec, opts).to_json())
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::engine(e, StatusCode::INTERNAL_SERVER_ERROR))?;
        if let Err(e) = write_atomic(&self.result_path(&key), payload.as_bytes()) {
            tracing::warn!(%key, "result not persisted: {e}");
        }
        let payload: Arc<str> = payload.into();
        self.results.write().insert(key.clone(), Arc::clone(&payload));
        self.flights.lock().remove(&key);
        Ok((payload, false))
    }

    /// Starts a run in the background, or reports on one already started.
    pub fn poll(self: &Arc<Self>, session: &Arc<Session>, run: RunRequest) -> Result<Poll, ApiError> {
        let key = session.result_key(run);
        if let Some(hit) = self.cached(&key) {
            self.jobs.lock().remove(&key);
            return Ok(Poll::Done(hit, true));
        }
        let mut jobs = self.jobs.lock();
        match jobs.get(&key) {
            Some(Job::Running(handle)) if !handle.is_finished() => return Ok(Poll::Running),
            Some(Job::Failed(_)) => {
                let Some(Job::Failed(e)) = jobs.remove(&key) else {
                    unreachable!()
                };
                return Err(e);
            }
            _ => {}
        }
        let (state, s, k) = (Arc::clone(self), Arc::clone(session), key.clone());
        let handle = tokio::spawn(async move {
            match state.recommendations(&s, run).await {
                Ok(_) => {
                    state.jobs.lock().remove(&k);
                }
                Err(e) => {
                    state.jobs.lock().insert(k, Job::Failed(e));
                }
            }
        });
        jobs.insert(key, Job::Running(handle));
        Ok(Poll::Running)
    }

    /// Waits for background runs and writes every cached payload and session record.
    pub async fn flush(&self) {
        let handles: Vec<JoinHandle<()>> = {
            let mut jobs = self.jobs.lock();
            let keys: Vec<String> = jobs
                .iter()
                .filter(|(_, j)| matches!(j, Job::Running(_)))
                .map(|(k, _)| k.clone())
                .collect();
            keys.into_iter()
                .filter_map(|k| match jobs.remove(&k) {
                    Some(Job::Running(h)) => Some(h),
                    _ => None,
                })
                .collect()
        };
        for h in handles {
            let _ = h.await;
        }
        let results: Vec<(String, Arc<str>)> = self
            .results
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), Arc::clone(v)))
            .collect();
        for (key, payload) in results {
            let path = self.result_path(&key);
            if !path.exists() {
                if let Err(e) = write_atomic(&path, payload.as_bytes()) {
                    tracing::warn!(%key, "result not persisted: {e}");
                }
            }
        }
        let sessions: Vec<Arc<Session>> = self.sessions.read().values().cloned().collect();
        let mut index: Vec<&str> = sessions.iter().map(|s| s.id.as_str()).collect();
        index.sort_unstable();
        for s in &sessions {
            let record = SessionRecord {
                id: s.id.clone(),
                request: s.request.clone(),
            };
            let bytes = serde_json::to_vec_pretty(&record).expect("record serializes");
            let path = self.data_dir.join("sessions").join(format!("{}.json", s.id));
            if let Err(e) = write_atomic(&path, &bytes) {
                tracing::warn!(id = %s.id, "session not persisted: {e}");
            }
        }
        let index = serde_json::to_vec_pretty(&index).expect("index serializes");
        if let Err(e) = write_atomic(&self.data_dir.join("index.json"), &index) {
            tracing::warn!("index not persisted: {e}");
        }
        tracing::info!("store flushed");
    }
}
