//! The assembled tutor: registry, selection, resident model, documents,
//! sessions and telemetry over one data directory.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::config::{AppConfig, ConfigError, DataLayout};
use crate::hardware::{probe_hardware, HardwareProfile, ProbeError};
use crate::inference::{Backend, InferenceEngine, InferenceError, ModelHandle};
use crate::net::NetworkLayer;
use crate::prompt::LevelTemplates;
use crate::rag::{RagError, RagStore};
use crate::registry::{ModelRegistry, RegistryError, RegistrySnapshot};
use crate::selector::{pin_model, select_model, SelectionError, TierSelection};
use crate::session::{SessionError, SessionManager};
use crate::telemetry::{Telemetry, TelemetryError};

/// How long a reselect waits for in-flight generations before giving up.
const DRAIN_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum TutorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Rag(#[from] RagError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// The selection in force and the profile it was made against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveSelection {
    pub selection: TierSelection,
    pub profile: HardwareProfile,
}

#[derive(Debug, Clone, Serialize)]
pub struct RescanOutcome {
    pub snapshot: Arc<RegistrySnapshot>,
    /// Present when a reselect was requested.
    pub selection: Option<ActiveSelection>,
    pub model_changed: bool,
}

#[derive(Debug)]
pub struct Tutor {
    config: AppConfig,
    layout: DataLayout,
    registry: ModelRegistry,
    engine: Arc<InferenceEngine>,
    rag: Arc<RagStore>,
    telemetry: Arc<Telemetry>,
    sessions: SessionManager,
    net: Arc<dyn NetworkLayer>,
    active: Mutex<Option<ActiveSelection>>,
    hardware_override: Mutex<Option<HardwareProfile>>,
    reselect: Mutex<()>,
    warnings: Vec<String>,
}

impl Tutor {
    /// Opens every store under `data_dir` with the given backend. Does not
    /// load a model; see [`Tutor::select_and_load`].
    pub fn open(
        data_dir: impl Into<PathBuf>,
        config: AppConfig,
        backend: Arc<dyn Backend>,
        net: Arc<dyn NetworkLayer>,
    ) -> Result<Self, TutorError> {
        config.validate()?;
        let layout = DataLayout::new(data_dir);
        std::fs::create_dir_all(layout.models_dir()).map_err(|source| RegistryError::DirectoryUnreadable {
            path: layout.models_dir(),
            source,
        })?;
        let registry = ModelRegistry::open(layout.models_dir())?;
        let engine = Arc::new(InferenceEngine::new(backend));
        let rag = Arc::new(RagStore::open(&layout.root)?);
        let telemetry = Arc::new(Telemetry::open(&layout.root)?);
        let (templates, mut warnings) = LevelTemplates::load(&layout.levels_dir());
        warnings.extend(registry.snapshot().scan_warnings.iter().cloned());
        let sessions = SessionManager::new(engine.clone(), rag.clone(), Arc::new(templates), telemetry.clone())
            .with_limits(config.max_sessions, config.retrieval_k);
        let restored = sessions.load_snapshot(&layout.sessions_snapshot())?;
        if restored > 0 {
            tracing::info!(restored, "sessions restored from snapshot");
        }
        Ok(Self {
            hardware_override: Mutex::new(config.hardware_override.clone()),
            config,
            layout,
            registry,
            engine,
            rag,
            telemetry,
            sessions,
            net,
            active: Mutex::new(None),
            reselect: Mutex::new(()),
            warnings,
        })
    }

    /// Opens with the backend named in the config.
    pub fn from_config(data_dir: impl Into<PathBuf>, config: AppConfig, net: Arc<dyn NetworkLayer>) -> Result<Self, TutorError> {
        let backend = config.build_backend(net.clone())?;
        Self::open(data_dir, config, backend, net)
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    pub fn data_dir(&self) -> &Path {
        &self.layout.root
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn engine(&self) -> &Arc<InferenceEngine> {
        &self.engine
    }

    pub fn rag(&self) -> &Arc<RagStore> {
        &self.rag
    }

    pub fn telemetry(&self) -> &Arc<Telemetry> {
        &self.telemetry
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.sessions
    }

    pub fn net(&self) -> &Arc<dyn NetworkLayer> {
        &self.net
    }

    /// Startup warnings: level template problems and registry scan issues.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn active(&self) -> Option<ActiveSelection> {
        self.active.lock().expect("tutor poisoned").clone()
    }

    pub fn hardware_override(&self) -> Option<HardwareProfile> {
        self.hardware_override.lock().expect("tutor poisoned").clone()
    }

    /// Probes (or takes the override) and selects against the current
    /// registry snapshot, honoring a configured pin. Loads nothing.
    pub fn plan(&self) -> Result<ActiveSelection, TutorError> {
        let profile = probe_hardware(self.hardware_override().as_ref())?;
        let snapshot = self.registry.snapshot();
        let policy = self.config.policy()?;
        let selection = match &self.config.pinned_model {
            Some(id) => pin_model(&snapshot, id, &profile, &policy)?,
            None => select_model(&profile, &snapshot, &policy)?,
        };
        if let Some(w) = &selection.warning {
            tracing::warn!("{w}");
        }
        Ok(ActiveSelection { selection, profile })
    }

    /// Selects a model and makes it resident. A no-op when the selected
    /// model is already loaded.
    pub fn select_and_load(&self) -> Result<ActiveSelection, TutorError> {
        let _guard = self.reselect.lock().expect("tutor poisoned");
        self.apply(self.plan()?).map(|(active, _)| active)
    }

    fn apply(&self, plan: ActiveSelection) -> Result<(ActiveSelection, bool), TutorError> {
        let wanted = &plan.selection.chosen;
        let current = self.engine.current();
        let changed = match &current {
            Some(h) if h.manifest == *wanted => false,
            Some(h) => {
                self.unload_when_idle(h)?;
                true
            }
            None => true,
        };
        if changed {
            self.engine.load(wanted)?;
        }
        *self.active.lock().expect("tutor poisoned") = Some(plan.clone());
        Ok((plan, changed))
    }

    fn unload_when_idle(&self, handle: &ModelHandle) -> Result<(), TutorError> {
        let deadline = Instant::now() + DRAIN_TIMEOUT;
        loop {
            match self.engine.unload(handle) {
                Err(InferenceError::GenerationInFlight) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(20));
                }
                other => return Ok(other?),
            }
        }
    }

    /// Rescans the models directory. With `reselect`, selects again (using
    /// `hardware_override` when given, which then stays in force) and swaps
    /// the resident model only if the choice changed.
    pub fn rescan(&self, reselect: bool, hardware_override: Option<HardwareProfile>) -> Result<RescanOutcome, TutorError> {
        let _guard = self.reselect.lock().expect("tutor poisoned");
        let snapshot = self.registry.rescan()?;
        if !reselect {
            return Ok(RescanOutcome {
                snapshot,
                selection: None,
                model_changed: false,
            });
        }
        if let Some(hw) = hardware_override {
            hw.validate().map_err(ProbeError::InvalidOverride)?;
            *self.hardware_override.lock().expect("tutor poisoned") = Some(hw);
        }
        let (active, model_changed) = self.apply(self.plan()?)?;
        Ok(RescanOutcome {
            snapshot,
            selection: Some(active),
            model_changed,
        })
    }

    /// Persists sessions and releases the model.
    pub fn shutdown(&self) -> Result<(), TutorError> {
        let saved = self.sessions.save_snapshot(&self.layout.sessions_snapshot())?;
        tracing::info!(saved, "sessions saved");
        if let Some(h) = self.engine.current() {
            self.unload_when_idle(&h)?;
        }
        Ok(())
    }
}
