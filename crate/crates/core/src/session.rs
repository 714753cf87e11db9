//! Conversation state.
//!
//! Sessions hold the learner's level, history and retrieval flag. They never
//! touch model residency: the resident model belongs to the
//! [`InferenceEngine`], and clearing or deleting a session leaves it alone.
//! Each session handles one message at a time; distinct sessions run
//! concurrently up to the engine's queue.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::inference::{GenerationMetrics, GenerationParams, InferenceEngine, InferenceError};
use crate::prompt::{default_budget, ComposeError, ComposedPrompt, LevelTemplates, ResponseLevel};
use crate::rag::{RagStore, RetrievedChunk};
use crate::telemetry::{RequestRecord, Telemetry};

pub const DEFAULT_RETRIEVAL_K: usize = 4;
pub const DEFAULT_MAX_SESSIONS: usize = 64;
pub const SNAPSHOT_FILE: &str = "sessions.jsonl";

const INTERRUPTED: &str = "(response interrupted)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    pub at: DateTime<Utc>,
    /// Present on assistant turns only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<GenerationMetrics>,
    /// False when generation stopped because the backend failed.
    #[serde(default = "yes")]
    pub complete: bool,
}

impl ChatTurn {
    fn user(text: &str) -> Self {
        Self {
            role: Role::User,
            text: text.to_string(),
            at: Utc::now(),
            metrics: None,
            complete: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub level: ResponseLevel,
    pub turns: Vec<ChatTurn>,
    pub rag_enabled: bool,
    pub last_metrics: Option<GenerationMetrics>,
    pub last_active: DateTime<Utc>,
}

impl Session {
    fn new(level: ResponseLevel, rag_enabled: bool) -> Self {
        let now = Utc::now();
        Self {
            session_id: Uuid::new_v4().to_string(),
            created_at: now,
            level,
            turns: Vec::new(),
            rag_enabled,
            last_metrics: None,
            last_active: now,
        }
    }

    /// Roles alternate starting with the user, and user turns carry no
    /// metrics.
    pub fn check_turns(&self) -> Result<(), String> {
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != expected {
                return Err(format!("turn {i} should be {expected:?}"));
            }
            if t.role == Role::User && t.metrics.is_some() {
                return Err(format!("user turn {i} carries metrics"));
            }
            if t.text.is_empty() {
                return Err(format!("turn {i} is empty"));
            }
        }
        Ok(())
    }
}

/// Inputs to one prompt composition.
#[derive(Debug, Clone, Copy)]
pub struct ComposeRequest<'a> {
    pub level: ResponseLevel,
    pub history: &'a [ChatTurn],
    pub chunks: &'a [RetrievedChunk],
    pub query: &'a str,
    pub budget_tokens: usize,
}

pub trait Composer: Send + Sync + std::fmt::Debug {
    fn compose(&self, request: &ComposeRequest<'_>) -> Result<ComposedPrompt, ComposeError>;
}

impl Composer for LevelTemplates {
    fn compose(&self, r: &ComposeRequest<'_>) -> Result<ComposedPrompt, ComposeError> {
        crate::prompt::compose_with(self, r.level, r.history, r.chunks, r.query, r.budget_tokens)
    }
}

/// Receives the progress of one submitted message.
pub trait SubmitSink {
    /// Called once the prompt is composed, before the first token.
    fn prompt_ready(&mut self, _prompt: &ComposedPrompt, _retrieved: &[RetrievedChunk]) {}
    /// Returning `false` stops the generation early.
    fn token(&mut self, token: &str) -> bool;
}

impl<F: FnMut(&str) -> bool> SubmitSink for F {
    fn token(&mut self, token: &str) -> bool {
        self(token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmitOutcome {
    pub request_id: String,
    pub session_id: String,
    pub model_id: String,
    pub assistant_turn: ChatTurn,
    pub metrics: GenerationMetrics,
    pub total_wall_ms: f64,
    pub prompt: ComposedPrompt,
    pub retrieved: Vec<RetrievedChunk>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("no model is loaded")]
    NoModelLoaded,
    #[error("message is empty")]
    EmptyMessage,
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("session snapshot {path}: {source}")]
    Snapshot {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug)]
struct Slot {
    state: Mutex<Session>,
    /// Held for the whole of a submit or clear, so messages to one session
    /// queue behind each other.
    busy: Mutex<()>,
}

impl Slot {
    fn new(session: Session) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(session),
            busy: Mutex::new(()),
        })
    }

    fn snapshot(&self) -> Session {
        self.state.lock().expect("session poisoned").clone()
    }
}

#[derive(Debug)]
pub struct SessionManager {
    engine: Arc<InferenceEngine>,
    rag: Arc<RagStore>,
    composer: Arc<dyn Composer>,
    telemetry: Arc<Telemetry>,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    max_sessions: usize,
    retrieval_k: usize,
}

impl SessionManager {
    pub fn new(
        engine: Arc<InferenceEngine>,
        rag: Arc<RagStore>,
        composer: Arc<dyn Composer>,
        telemetry: Arc<Telemetry>,
    ) -> Self {
        Self {
            engine,
            rag,
            composer,
            telemetry,
            sessions: Mutex::new(HashMap::new()),
            max_sessions: DEFAULT_MAX_SESSIONS,
            retrieval_k: DEFAULT_RETRIEVAL_K,
        }
    }

    pub fn with_limits(mut self, max_sessions: usize, retrieval_k: usize) -> Self {
        self.max_sessions = max_sessions.max(1);
        self.retrieval_k = retrieval_k;
        self
    }

    fn slot(&self, session_id: &str) -> Result<Arc<Slot>, SessionError> {
        self.sessions
            .lock()
            .expect("sessions poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }

    pub fn create(&self, level: ResponseLevel, rag_enabled: bool) -> Session {
        let session = Session::new(level, rag_enabled);
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        if sessions.len() >= self.max_sessions {
            let oldest_idle = sessions
                .iter()
                .filter(|(_, s)| s.busy.try_lock().is_ok())
                .map(|(id, s)| (s.state.lock().expect("session poisoned").last_active, id.clone()))
                .min();
            if let Some((_, id)) = oldest_idle {
                sessions.remove(&id);
                tracing::info!(session = %id, "evicted oldest idle session");
            }
        }
        sessions.insert(session.session_id.clone(), Slot::new(session.clone()));
        session
    }

    pub fn get(&self, session_id: &str) -> Result<Session, SessionError> {
        Ok(self.slot(session_id)?.snapshot())
    }

    /// All sessions, oldest first.
    pub fn list(&self) -> Vec<Session> {
        let slots: Vec<Arc<Slot>> = self.sessions.lock().expect("sessions poisoned").values().cloned().collect();
        let mut all: Vec<Session> = slots.iter().map(|s| s.snapshot()).collect();
        all.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.session_id.cmp(&b.session_id)));
        all
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("sessions poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn delete(&self, session_id: &str) -> Result<(), SessionError> {
        self.sessions
            .lock()
            .expect("sessions poisoned")
            .remove(session_id)
            .map(|_| ())
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }

    /// Empties the history. Waits for an in-progress message to finish.
    pub fn clear_history(&self, session_id: &str) -> Result<(), SessionError> {
        let slot = self.slot(session_id)?;
        let _busy = slot.busy.lock().expect("session poisoned");
        let mut s = slot.state.lock().expect("session poisoned");
        s.turns.clear();
        s.last_active = Utc::now();
        Ok(())
    }

    pub fn set_level(&self, session_id: &str, level: ResponseLevel) -> Result<(), SessionError> {
        let slot = self.slot(session_id)?;
        let mut s = slot.state.lock().expect("session poisoned");
        s.level = level;
        s.last_active = Utc::now();
        Ok(())
    }

    /// Runs one exchange: retrieve, compose, generate, record.
    ///
    /// Nothing is appended if the message is rejected before generation
    /// (empty text, no model, prompt does not fit). If the backend fails
    /// mid-stream, the user turn stays and an assistant turn marked
    /// incomplete holds whatever was produced.
    pub fn submit_message(
        &self,
        session_id: &str,
        user_text: &str,
        params: &GenerationParams,
        sink: &mut dyn SubmitSink,
    ) -> Result<SubmitOutcome, SessionError> {
        let started = Instant::now();
        let slot = self.slot(session_id)?;
        let user_text = user_text.trim();
        if user_text.is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        let handle = self.engine.current().ok_or(SessionError::NoModelLoaded)?;
        let _busy = slot.busy.lock().expect("session poisoned");

        let (level, rag_enabled, history) = {
            let s = slot.state.lock().expect("session poisoned");
            (s.level, s.rag_enabled, s.turns.clone())
        };
        let retrieved = if rag_enabled && self.retrieval_k > 0 {
            self.rag.retrieve(user_text, self.retrieval_k)
        } else {
            Vec::new()
        };
        let prompt = self.composer.compose(&ComposeRequest {
            level,
            history: &history,
            chunks: &retrieved,
            query: user_text,
            budget_tokens: default_budget(handle.manifest.context_window_tokens, params.max_new_tokens),
        })?;

        slot.state.lock().expect("session poisoned").turns.push(ChatTurn::user(user_text));
        sink.prompt_ready(&prompt, &retrieved);

        let mut output = String::new();
        let result = self.engine.generate(&handle, &prompt.text, params, &mut |t: &str| {
            output.push_str(t);
            sink.token(t)
        });
        let total_wall_ms = started.elapsed().as_secs_f64() * 1000.0;

        let mut s = slot.state.lock().expect("session poisoned");
        s.last_active = Utc::now();
        let metrics = match result {
            Ok(m) => m,
            Err(e) => {
                let text = if output.is_empty() { INTERRUPTED.to_string() } else { output };
                s.turns.push(ChatTurn {
                    role: Role::Assistant,
                    text,
                    at: Utc::now(),
                    metrics: None,
                    complete: false,
                });
                return Err(e.into());
            }
        };
        let assistant_turn = ChatTurn {
            role: Role::Assistant,
            text: if output.is_empty() { "(no output)".to_string() } else { output },
            at: Utc::now(),
            metrics: Some(metrics),
            complete: true,
        };
        s.turns.push(assistant_turn.clone());
        s.last_metrics = Some(metrics);
        drop(s);

        let request_id = Uuid::new_v4().to_string();
        let record = RequestRecord {
            request_id: request_id.clone(),
            session_id: session_id.to_string(),
            prompt_estimated_tokens: prompt.estimated_tokens as u64,
            response_tokens: metrics.tokens_generated,
            metrics,
            total_wall_ms,
            at: Utc::now(),
        };
        if let Err(e) = self.telemetry.record(record) {
            tracing::warn!("telemetry not recorded: {e}");
        }
        Ok(SubmitOutcome {
            request_id,
            session_id: session_id.to_string(),
            model_id: handle.manifest.model_id.clone(),
            assistant_turn,
            metrics,
            total_wall_ms,
            prompt,
            retrieved,
        })
    }

    /// Writes every session as one JSON line, replacing the file atomically.
    pub fn save_snapshot(&self, path: &Path) -> Result<usize, SessionError> {
        let err = |source| SessionError::Snapshot {
            path: path.display().to_string(),
            source,
        };
        let sessions = self.list();
        let mut body = Vec::new();
        for s in &sessions {
            serde_json::to_writer(&mut body, s).expect("session serializes");
            body.push(b'\n');
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(err)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut f = fs::File::create(&tmp).map_err(err)?;
        f.write_all(&body).map_err(err)?;
        f.sync_all().map_err(err)?;
        fs::rename(&tmp, path).map_err(err)?;
        Ok(sessions.len())
    }

    /// Restores sessions from a snapshot. A missing file restores nothing;
    /// unparseable lines are skipped with a warning.
    pub fn load_snapshot(&self, path: &Path) -> Result<usize, SessionError> {
        let f = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(source) => {
                return Err(SessionError::Snapshot {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let mut restored = 0;
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|source| SessionError::Snapshot {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Session>(&line) {
                Ok(s) => match s.check_turns() {
                    Ok(()) => {
                        self.sessions
                            .lock()
                            .expect("sessions poisoned")
                            .insert(s.session_id.clone(), Slot::new(s));
                        restored += 1;
                    }
                    Err(e) => tracing::warn!("{}:{}: skipping session: {e}", path.display(), n + 1),
                },
                Err(e) => tracing::warn!("{}:{}: skipping unreadable session: {e}", path.display(), n + 1),
            }
        }
        Ok(restored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{StubBackend, StubConfig};
    use crate::registry::{reference_catalog, write_model_pair};
    use tempfile::TempDir;

    fn manager(dir: &TempDir, config: StubConfig) -> SessionManager {
        let mut m = reference_catalog()[0].clone();
        write_model_pair(dir.path(), &m).unwrap();
        m.weights_path = dir.path().join(&m.weights_path);
        let engine = Arc::new(InferenceEngine::new(Arc::new(StubBackend::new(config))));
        engine.load(&m).unwrap();
        SessionManager::new(
            engine,
            Arc::new(RagStore::in_memory()),
            Arc::new(LevelTemplates::default()),
            Arc::new(Telemetry::in_memory()),
        )
    }

    fn say(m: &SessionManager, id: &str, text: &str) -> Result<SubmitOutcome, SessionError> {
        m.submit_message(id, text, &GenerationParams::default(), &mut |_: &str| true)
    }

    #[test]
    fn one_exchange_echoes_level() {
        let dir = TempDir::new().unwrap();
        let m = manager(&dir, StubConfig::default());
        let s = m.create(ResponseLevel::Technical, true);
        let out = say(&m, &s.session_id, "What is entropy?").unwrap();
        assert!(out.assistant_turn.text.contains("[[LEVEL:Technical]]"));
        let s = m.get(&s.session_id).unwrap();
        assert_eq!(s.turns.len(), 2);
        assert!(s.last_metrics.is_some());
        s.check_turns().unwrap();
    }

    #[test]
    fn unknown_and_empty() {
        let dir = TempDir::new().unwrap();
        let m = manager(&dir, StubConfig::default());
        assert!(matches!(say(&m, "nope", "hi"), Err(SessionError::UnknownSession(_))));
        let s = m.create(ResponseLevel::SimpleEnglish, false);
        assert!(matches!(say(&m, &s.session_id, "  "), Err(SessionError::EmptyMessage)));
        assert!(m.get(&s.session_id).unwrap().turns.is_empty());
    }

    #[test]
    fn crash_keeps_user_turn_and_marks_reply_incomplete() {
        let dir = TempDir::new().unwrap();
        let m = manager(
            &dir,
            StubConfig {
                crash_after_tokens: Some(2),
                ..Default::default()
            },
        );
        let s = m.create(ResponseLevel::LowerSecondary, false);
        let err = say(&m, &s.session_id, "Why is the sky blue?").unwrap_err();
        assert!(matches!(err, SessionError::Inference(InferenceError::BackendCrashed(_))));
        let s = m.get(&s.session_id).unwrap();
        assert_eq!(s.turns.len(), 2);
        assert_eq!(s.turns[0].text, "Why is the sky blue?");
        assert!(!s.turns[1].complete);
        assert_eq!(s.turns[1].text, "[stub] Answer");
        s.check_turns().unwrap();
    }

    #[test]
    fn level_change_keeps_history() {
        let dir = TempDir::new().unwrap();
        let m = manager(&dir, StubConfig::default());
        let s = m.create(ResponseLevel::Technical, false);
        say(&m, &s.session_id, "first").unwrap();
        let before = m.get(&s.session_id).unwrap().turns;
        m.set_level(&s.session_id, ResponseLevel::SimpleEnglish).unwrap();
        m.set_level(&s.session_id, ResponseLevel::SimpleEnglish).unwrap();
        let out = say(&m, &s.session_id, "second").unwrap();
        assert!(out.prompt.text.contains("[[LEVEL:SimpleEnglish]]"));
        assert!(out.assistant_turn.text.contains("[[LEVEL:SimpleEnglish]]"));
        assert_eq!(&m.get(&s.session_id).unwrap().turns[..2], &before[..]);
    }

    #[test]
    fn eviction_drops_oldest_idle() {
        let dir = TempDir::new().unwrap();
        let m = manager(&dir, StubConfig::default()).with_limits(2, 4);
        let a = m.create(ResponseLevel::Technical, false);
        std::thread::sleep(std::time::Duration::from_millis(2));
        let b = m.create(ResponseLevel::Technical, false);
        std::thread::sleep(std::time::Duration::from_millis(2));
        let c = m.create(ResponseLevel::Technical, false);
        assert_eq!(m.len(), 2);
        assert!(m.get(&a.session_id).is_err());
        assert!(m.get(&b.session_id).is_ok() && m.get(&c.session_id).is_ok());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = TempDir::new().unwrap();
        let m = manager(&dir, StubConfig::default());
        let s = m.create(ResponseLevel::UpperSecondary, true);
        say(&m, &s.session_id, "Explain osmosis").unwrap();
        let path = dir.path().join(SNAPSHOT_FILE);
        assert_eq!(m.save_snapshot(&path).unwrap(), 1);

        let other = manager(&TempDir::new().unwrap(), StubConfig::default());
        assert_eq!(other.load_snapshot(&path).unwrap(), 1);
        assert_eq!(other.get(&s.session_id).unwrap(), m.get(&s.session_id).unwrap());
        assert_eq!(other.load_snapshot(&dir.path().join("absent.jsonl")).unwrap(), 0);
    }
}
