//! Local model execution.
//!
//! A [`Backend`] knows how to load a GGUF model, stream tokens and release
//! it. The [`InferenceEngine`] wraps one backend and owns the lifecycle
//! rules shared by all of them: at most one resident model, handles that go
//! stale on unload, generation requests served one at a time in arrival
//! order, and the per-phase timing record returned with every response.

mod counting;
mod external;
mod stub;

pub use counting::CountingBackend;
pub use external::{ExternalConfig, ExternalRuntimeBackend};
pub use stub::{StubBackend, StubConfig};

use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::registry::ModelManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_new_tokens: u32,
    pub temperature: f32,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 256,
            temperature: 0.7,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.max_new_tokens == 0 {
            return Err(InferenceError::InvalidParams("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(InferenceError::InvalidParams(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Timing breakdown of one load or one response, in milliseconds.
///
/// The four phase durations are disjoint, so their sum never exceeds the
/// wall time of the call that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub model_load_ms: f64,
    pub prompt_eval_ms: f64,
    pub token_sampling_ms: f64,
    pub generation_ms: f64,
    pub tokens_generated: u64,
    pub tokens_per_sec: f64,
}

impl GenerationMetrics {
    pub fn new(
        model_load_ms: f64,
        prompt_eval_ms: f64,
        token_sampling_ms: f64,
        generation_ms: f64,
        tokens_generated: u64,
    ) -> Self {
        let tokens_per_sec = if generation_ms > 0.0 {
            tokens_generated as f64 / (generation_ms / 1000.0)
        } else {
            0.0
        };
        Self {
            model_load_ms,
            prompt_eval_ms,
            token_sampling_ms,
            generation_ms,
            tokens_generated,
            tokens_per_sec,
        }
    }

    pub fn load_only(model_load_ms: f64) -> Self {
        Self::new(model_load_ms, 0.0, 0.0, 0.0, 0)
    }

    pub fn phase_total_ms(&self) -> f64 {
        self.model_load_ms + self.prompt_eval_ms + self.token_sampling_ms + self.generation_ms
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("model_load_ms", self.model_load_ms),
            ("prompt_eval_ms", self.prompt_eval_ms),
            ("token_sampling_ms", self.token_sampling_ms),
            ("generation_ms", self.generation_ms),
            ("tokens_per_sec", self.tokens_per_sec),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Phase durations reported by a backend for one generation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub prompt_eval_ms: f64,
    pub token_sampling_ms: f64,
    pub generation_ms: f64,
}

/// Receives each token; returning `false` cancels the generation.
pub type TokenSink<'a> = &'a mut dyn FnMut(&str) -> bool;

pub trait Backend: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn load(&self, manifest: &ModelManifest) -> Result<(), InferenceError>;
    fn generate(
        &self,
        manifest: &ModelManifest,
        prompt: &str,
        params: &GenerationParams,
        on_token: TokenSink<'_>,
    ) -> Result<PhaseTimings, InferenceError>;
    fn unload(&self, manifest: &ModelManifest) -> Result<(), InferenceError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("weights file {0} is missing")]
    WeightsMissing(String),
    #[error("backend reports insufficient memory: {0}")]
    InsufficientMemory(String),
    #[error("a model is already loaded ({0}); unload it first")]
    AlreadyLoaded(String),
    #[error("model handle is stale")]
    HandleStale,
    #[error("cannot unload while a generation is in flight")]
    GenerationInFlight,
    #[error("inference backend crashed: {0}")]
    BackendCrashed(String),
    #[error("model load failed: {0}")]
    LoadFailed(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

/// Token for the resident model. Cloning it does not extend its life: once
/// unloaded, every clone is stale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub handle_id: String,
    pub manifest: ModelManifest,
    pub loaded_at: DateTime<Utc>,
    pub load_metrics: GenerationMetrics,
}

#[derive(Debug, Default)]
struct EngineState {
    live: Option<ModelHandle>,
    loading: Option<String>,
    in_flight: usize,
}

/// First-come first-served gate: tickets are served in the order taken.
#[derive(Debug, Default)]
struct FifoGate {
    tickets: Mutex<(u64, u64)>,
    turn: Condvar,
}

struct GatePass<'a>(&'a FifoGate);

impl FifoGate {
    fn enter(&self) -> GatePass<'_> {
        let mut t = self.tickets.lock().expect("gate poisoned");
        let mine = t.0;
        t.0 += 1;
        while t.1 != mine {
            t = self.turn.wait(t).expect("gate poisoned");
        }
        GatePass(self)
    }
}

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        self.0.tickets.lock().expect("gate poisoned").1 += 1;
        self.0.turn.notify_all();
    }
}

#[derive(Debug)]
pub struct InferenceEngine {
    backend: Arc<dyn Backend>,
    state: Mutex<EngineState>,
    gate: FifoGate,
}

struct InFlight<'a>(&'a Mutex<EngineState>);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        if let Ok(mut s) = self.0.lock() {
            s.in_flight -= 1;
        }
    }
}

impl InferenceEngine {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            state: Mutex::new(EngineState::default()),
            gate: FifoGate::default(),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// The resident model, if any.
    pub fn current(&self) -> Option<ModelHandle> {
        self.state.lock().expect("engine poisoned").live.clone()
    }

    /// Id of the model currently being loaded, if a load is in progress.
    pub fn loading(&self) -> Option<String> {
        self.state.lock().expect("engine poisoned").loading.clone()
    }

    pub fn load(&self, manifest: &ModelManifest) -> Result<ModelHandle, InferenceError> {
        {
            let mut state = self.state.lock().expect("engine poisoned");
            if let Some(live) = &state.live {
                return Err(InferenceError::AlreadyLoaded(live.manifest.model_id.clone()));
            }
            if let Some(id) = &state.loading {
                return Err(InferenceError::AlreadyLoaded(id.clone()));
            }
            state.loading = Some(manifest.model_id.clone());
        }
        let result = self.load_unlocked(manifest);
        let mut state = self.state.lock().expect("engine poisoned");
        state.loading = None;
        if let Ok(handle) = &result {
            state.live = Some(handle.clone());
            tracing::info!(
                model = %handle.manifest.model_id,
                load_ms = handle.load_metrics.model_load_ms,
                "model loaded"
            );
        }
        result
    }

    fn load_unlocked(&self, manifest: &ModelManifest) -> Result<ModelHandle, InferenceError> {
        if !manifest.weights_path.is_file() {
            return Err(InferenceError::WeightsMissing(manifest.weights_path.display().to_string()));
        }
        let started = Instant::now();
        self.backend.load(manifest)?;
        let load_ms = started.elapsed().as_secs_f64() * 1000.0;
        Ok(ModelHandle {
            handle_id: Uuid::new_v4().to_string(),
            manifest: manifest.clone(),
            loaded_at: Utc::now(),
            load_metrics: GenerationMetrics::load_only(load_ms),
        })
    }

    /// Streams up to `params.max_new_tokens` tokens into `on_token`, then
    /// returns the response metrics. Concurrent calls queue in FIFO order.
    /// `model_load_ms` is zero here: the model is already resident.
    pub fn generate(
        &self,
        handle: &ModelHandle,
        prompt: &str,
        params: &GenerationParams,
        on_token: TokenSink<'_>,
    ) -> Result<GenerationMetrics, InferenceError> {
        params.validate()?;
        if prompt.trim().is_empty() {
            return Err(InferenceError::EmptyPrompt);
        }
        let _in_flight = {
            let mut state = self.state.lock().expect("engine poisoned");
            match &state.live {
                Some(live) if live.handle_id == handle.handle_id => {}
                _ => return Err(InferenceError::HandleStale),
            }
            state.in_flight += 1;
            InFlight(&self.state)
        };
        let _pass = self.gate.enter();

        let cap = params.max_new_tokens as u64;
        let mut emitted = 0u64;
        let mut sink = |token: &str| {
            if emitted >= cap {
                return false;
            }
            emitted += 1;
            on_token(token) && emitted < cap
        };
        let phases = self.backend.generate(&handle.manifest, prompt, params, &mut sink)?;
        Ok(GenerationMetrics::new(
            0.0,
            phases.prompt_eval_ms,
            phases.token_sampling_ms,
            phases.generation_ms,
            emitted,
        ))
    }

    pub fn unload(&self, handle: &ModelHandle) -> Result<(), InferenceError> {
        let mut state = self.state.lock().expect("engine poisoned");
        match &state.live {
            Some(live) if live.handle_id == handle.handle_id => {}
            _ => return Err(InferenceError::HandleStale),
        }
        if state.in_flight > 0 {
            return Err(InferenceError::GenerationInFlight);
        }
        self.backend.unload(&handle.manifest)?;
        state.live = None;
        tracing::info!(model = %handle.manifest.model_id, "model unloaded");
        Ok(())
    }
}
