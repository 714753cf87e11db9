use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Backend, GenerationParams, InferenceError, PhaseTimings, TokenSink};
use crate::registry::ModelManifest;

/// Delegating backend that counts lifecycle calls. Used to check that
/// conversation operations never reload the model.
#[derive(Debug)]
pub struct CountingBackend {
    inner: Arc<dyn Backend>,
    loads: AtomicU64,
    unloads: AtomicU64,
    generations: AtomicU64,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            loads: AtomicU64::new(0),
            unloads: AtomicU64::new(0),
            generations: AtomicU64::new(0),
        }
    }

    /// Successful loads.
    pub fn load_count(&self) -> u64 {
        self.loads.load(Ordering::SeqCst)
    }

    pub fn unload_count(&self) -> u64 {
        self.unloads.load(Ordering::SeqCst)
    }

    pub fn generate_count(&self) -> u64 {
        self.generations.load(Ordering::SeqCst)
    }
}

impl Backend for CountingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn load(&self, manifest: &ModelManifest) -> Result<(), InferenceError> {
        self.inner.load(manifest)?;
        self.loads.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn generate(
        &self,
        manifest: &ModelManifest,
        prompt: &str,
        params: &GenerationParams,
        on_token: TokenSink<'_>,
    ) -> Result<PhaseTimings, InferenceError> {
        self.generations.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(manifest, prompt, params, on_token)
    }

    fn unload(&self, manifest: &ModelManifest) -> Result<(), InferenceError> {
        self.inner.unload(manifest)?;
        self.unloads.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
}
