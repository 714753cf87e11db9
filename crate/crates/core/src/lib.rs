//! Core engine for an offline, locally hosted tutoring assistant.
//!
//! The crate is organised along the request path: the host is probed
//! ([`hardware`]), locally stored quantized models are discovered
//! ([`registry`]) and the most capable feasible one is chosen
//! ([`selector`]). The chosen model is kept resident by the
//! [`inference`] engine while [`session`]s compose level-adapted prompts
//! ([`prompt`]) grounded in retrieved document chunks ([`rag`]). Every
//! response is timed and logged by [`telemetry`].
//!
//! Nothing in this crate opens a socket on its own: all network access
//! goes through the injectable [`net::NetworkLayer`].

pub mod app;
pub mod bench;
pub mod config;
pub mod hardware;
pub mod inference;
pub mod net;
pub mod prompt;
pub mod rag;
pub mod registry;
pub mod selector;
pub mod session;
pub mod telemetry;

pub use app::{ActiveSelection, RescanOutcome, Tutor, TutorError};
pub use config::AppConfig;
pub use hardware::{probe_hardware, HardwareProfile, ProbeSource};
pub use inference::{
    GenerationMetrics, GenerationParams, InferenceEngine, InferenceError, ModelHandle,
};
pub use prompt::{compose, ComposedPrompt, ResponseLevel};
pub use rag::{RagStore, RetrievedChunk};
pub use registry::{ModelManifest, ModelRegistry, RegistrySnapshot};
pub use selector::{pin_model, select_model, SelectionPolicy, TierSelection};
pub use session::{ChatTurn, Role, Session, SessionManager};
pub use telemetry::{LatencyReport, RequestRecord, Telemetry};

pub const GIB: u64 = 1024 * 1024 * 1024;
