//! Deterministic offline backends.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{BackendFailure, BackendReply, ChatBackend, ChatRequest, GatewayError, RequestTag, TaskKind};

/// Stable fixture key of a rendered prompt: hex SHA-256 of the user text,
/// truncated to 32 characters.
pub fn hash_key(user_text: &str) -> String {
    let digest = Sha256::digest(user_text.as_bytes());
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Produces the text of a mock chat reply.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendFailure>;
}

impl<F> Responder for F
where
    F: Fn(&ChatRequest) -> Result<String, BackendFailure> + Send + Sync,
{
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendFailure> {
        self(request)
    }
}

/// Replies looked up by [`hash_key`] of the prompt, loaded from a directory
/// of `{key}.txt` files or inserted directly.
///
/// In strict mode an unknown key is a [`GatewayError::RecordedMiss`]. Otherwise
/// the miss is recorded (and written to `misses.jsonl` when backed by a
/// directory) and the fallback responder answers.
pub struct FixtureResponder {
    entries: HashMap<String, String>,
    dir: Option<PathBuf>,
    strict: bool,
    fallback: Option<Arc<dyn Responder>>,
    misses: Mutex<Vec<String>>,
}

impl FixtureResponder {
    pub fn new(strict: bool) -> Self {
        Self {
            entries: HashMap::new(),
            dir: None,
            strict,
            fallback: None,
            misses: Mutex::new(Vec::new()),
        }
    }

    pub fn from_dir(dir: impl AsRef<Path>, strict: bool) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        let mut this = Self::new(strict);
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            if let Some(key) = path.file_stem().and_then(|s| s.to_str()) {
                this.entries.insert(key.to_string(), std::fs::read_to_string(&path)?);
            }
        }
        this.dir = Some(dir.to_path_buf());
        Ok(this)
    }

    pub fn insert(&mut self, user_text: &str, reply: impl Into<String>) {
        self.entries.insert(hash_key(user_text), reply.into());
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn Responder>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    /// Keys requested but not found, in request order.
    pub fn misses(&self) -> Vec<String> {
        self.misses.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes a reply for a prompt into the backing directory.
    pub fn record(dir: &Path, user_text: &str, reply: &str) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.txt", hash_key(user_text)));
        std::fs::write(&path, reply)?;
        Ok(path)
    }
}

impl Responder for FixtureResponder {
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendFailure> {
        let key = hash_key(&request.user_text);
        if let Some(reply) = self.entries.get(&key) {
            return Ok(reply.clone());
        }
        self.misses.lock().unwrap().push(key.clone());
        if let Some(dir) = &self.dir {
            let line = serde_json::json!({ "key": key, "prompt": request.user_text });
            let path = dir.join("misses.jsonl");
            let appended = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .and_then(|mut f| {
                    use std::io::Write;
                    writeln!(f, "{line}")
                });
            if let Err(e) = appended {
                tracing::warn!(path = %path.display(), error = %e, "could not record mock miss");
            }
        }
        match (&self.fallback, self.strict) {
            (Some(fallback), false) => fallback.respond(request),
            _ => Err(BackendFailure::Fatal(GatewayError::RecordedMiss { key })),
        }
    }
}

/// Replies keyed by the request's [`RequestTag`]. A key may hold several
/// replies; successive calls walk through them and then repeat the last one.
///
/// On-disk form is a JSON object `{task: {subject: reply | [reply, ...]}}`.
#[derive(Default)]
pub struct ScriptedResponder {
    script: HashMap<(TaskKind, String), Vec<String>>,
    cursor: Mutex<HashMap<(TaskKind, String), usize>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptEntry {
    One(String),
    Many(Vec<String>),
}

impl ScriptedResponder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task: TaskKind, subject: impl Into<String>, reply: impl Into<String>) {
        self.script.entry((task, subject.into())).or_default().push(reply.into());
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let raw: HashMap<TaskKind, HashMap<String, ScriptEntry>> = serde_json::from_str(text)?;
        let mut this = Self::new();
        for (task, subjects) in raw {
            for (subject, entry) in subjects {
                let replies = match entry {
                    ScriptEntry::One(r) => vec![r],
                    ScriptEntry::Many(rs) => rs,
                };
                this.script.insert((task, subject), replies);
            }
        }
        Ok(this)
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl Responder for ScriptedResponder {
    fn respond(&self, request: &ChatRequest) -> Result<String, BackendFailure> {
        let Some(RequestTag { task, subject }) = &request.tag else {
            return Err(BackendFailure::Fatal(GatewayError::RecordedMiss {
                key: format!("untagged:{}", hash_key(&request.user_text)),
            }));
        };
        let key = (*task, subject.clone());
        let Some(replies) = self.script.get(&key) else {
            return Err(BackendFailure::Fatal(GatewayError::RecordedMiss {
                key: format!("{task}/{subject}"),
            }));
        };
        let mut cursor = self.cursor.lock().unwrap();
        let i = cursor.entry(key).or_insert(0);
        let reply = replies[(*i).min(replies.len() - 1)].clone();
        *i += 1;
        Ok(reply)
    }
}

/// Unit-norm embeddings derived from hashed word features, so texts sharing
/// words land close together. Explicit vectors can be pinned per text.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
    pinned: HashMap<String, Vec<f64>>,
}

pub const MOCK_EMBEDDING_DIMENSION: usize = 256;

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(MOCK_EMBEDDING_DIMENSION)
    }
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0);
        Self { dimension, pinned: HashMap::new() }
    }

    pub fn with_vector(mut self, text: impl Into<String>, values: Vec<f64>) -> Self {
        self.pinned.insert(text.into(), values);
        self
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        if let Some(v) = self.pinned.get(text) {
            return v.clone();
        }
        let tokens = crate::text::tokens(text);
        let mut acc = vec![0.0; self.dimension];
        if tokens.is_empty() {
            add_feature(&mut acc, text);
        }
        for token in &tokens {
            add_feature(&mut acc, token);
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|x| *x /= norm);
        }
        acc
    }
}

fn add_feature(acc: &mut [f64], feature: &str) {
    let digest = Sha256::digest(feature.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    for x in acc.iter_mut() {
        *x += rng.random_range(-1.0..1.0);
    }
}

type Transcript = Mutex<Vec<(Option<RequestTag>, String)>>;

/// Offline backend: a [`Responder`] for chat and a [`MockEmbedder`] for
/// embeddings. Every chat request is kept in a transcript.
#[derive(Clone)]
pub struct MockBackend {
    id: String,
    responder: Arc<dyn Responder>,
    embedder: MockEmbedder,
    transcript: Arc<Transcript>,
}

impl MockBackend {
    pub fn new(responder: Arc<dyn Responder>) -> Self {
        Self {
            id: "mock".to_string(),
            responder,
            embedder: MockEmbedder::default(),
            transcript: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> String + Send + Sync + 'static,
    {
        Self::new(Arc::new(move |r: &ChatRequest| Ok::<_, BackendFailure>(f(r))))
    }

    /// Replies with the prompt text itself.
    pub fn echo() -> Self {
        Self::from_fn(|r| r.user_text.clone())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_embedder(mut self, embedder: MockEmbedder) -> Self {
        self.embedder = embedder;
        self
    }

    /// (tag, user_text) of every chat request received so far.
    pub fn transcript(&self) -> Vec<(Option<RequestTag>, String)> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn call_count(&self, task: TaskKind) -> usize {
        self.transcript
            .lock()
            .unwrap()
            .iter()
            .filter(|(tag, _)| tag.as_ref().map(|t| t.task) == Some(task))
            .count()
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn chat(&self, request: &ChatRequest) -> Result<BackendReply, BackendFailure> {
        self.transcript
            .lock()
            .unwrap()
            .push((request.tag.clone(), request.user_text.clone()));
        self.responder.respond(request).map(BackendReply::text)
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendFailure> {
        Ok(texts.iter().map(|t| self.embedder.embed_one(t)).collect())
    }
}
