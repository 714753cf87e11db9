//! Deterministic stand-in for a real model.
//!
//! Output is a fixed preamble, the first level marker found in the prompt,
//! and a truncated SHA-256 digest of (prompt, seed). Optional delays make
//! latency proportional to prompt length for benchmarking, and
//! `crash_after_tokens` simulates a runtime dying mid-stream.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, GenerationParams, InferenceError, PhaseTimings, TokenSink};
use crate::prompt::{estimate_tokens, MARKER_OPEN};
use crate::registry::ModelManifest;

const PREAMBLE: [&str; 3] = ["[stub]", " Answer", " at level "];
const DIGEST_GROUPS: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    #[serde(with = "millis")]
    pub load_delay: Duration,
    /// Slept once per estimated prompt token during prompt evaluation.
    #[serde(with = "micros")]
    pub prompt_token_delay: Duration,
    #[serde(with = "millis")]
    pub token_delay: Duration,
    pub crash_after_tokens: Option<usize>,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

mod micros {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_micros() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_micros)
    }
}

#[derive(Debug, Default)]
pub struct StubBackend {
    config: StubConfig,
    loaded: Mutex<Option<String>>,
}

impl StubBackend {
    pub fn new(config: StubConfig) -> Self {
        Self {
            config,
            loaded: Mutex::new(None),
        }
    }

    /// The token sequence for a prompt, before any cap or stop sequence.
    pub fn planned_tokens(prompt: &str, seed: Option<u64>) -> Vec<String> {
        let level = find_level_marker(prompt).unwrap_or("[[LEVEL:none]]");
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        hasher.update(seed.unwrap_or(0).to_le_bytes());
        let digest = hex::encode(hasher.finalize());

        let mut tokens: Vec<String> = PREAMBLE.iter().map(|s| s.to_string()).collect();
        tokens.push(level.to_string());
        tokens.push(". Digest:".to_string());
        tokens.extend(
            digest
                .as_bytes()
                .chunks(4)
                .take(DIGEST_GROUPS)
                .map(|g| format!(" {}", std::str::from_utf8(g).unwrap())),
        );
        tokens
    }
}

fn find_level_marker(prompt: &str) -> Option<&str> {
    let start = prompt.find(MARKER_OPEN)?;
    let end = prompt[start..].find("]]")? + start + 2;
    Some(&prompt[start..end])
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

impl Backend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn load(&self, manifest: &ModelManifest) -> Result<(), InferenceError> {
        if !self.config.load_delay.is_zero() {
            std::thread::sleep(self.config.load_delay);
        }
        *self.loaded.lock().expect("stub poisoned") = Some(manifest.model_id.clone());
        Ok(())
    }

    fn generate(
        &self,
        _manifest: &ModelManifest,
        prompt: &str,
        params: &GenerationParams,
        on_token: TokenSink<'_>,
    ) -> Result<PhaseTimings, InferenceError> {
        let eval_start = Instant::now();
        let plan = Self::planned_tokens(prompt, params.seed);
        let delay = self.config.prompt_token_delay * estimate_tokens(prompt) as u32;
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        let prompt_eval = eval_start.elapsed();

        let mut sampling = Duration::ZERO;
        let mut generation = Duration::ZERO;
        let mut output = String::new();
        for (i, token) in plan.iter().enumerate() {
            if self.config.crash_after_tokens == Some(i) {
                return Err(InferenceError::BackendCrashed(format!(
                    "stub runtime terminated after {i} tokens"
                )));
            }
            let t = Instant::now();
            let candidate = format!("{output}{token}");
            let stop = params.stop_sequences.iter().any(|s| !s.is_empty() && candidate.contains(s.as_str()));
            sampling += t.elapsed();
            if stop {
                break;
            }

            let t = Instant::now();
            if !self.config.token_delay.is_zero() {
                std::thread::sleep(self.config.token_delay);
            }
            output = candidate;
            let keep_going = on_token(token);
            generation += t.elapsed();
            if !keep_going {
                break;
            }
        }
        Ok(PhaseTimings {
            prompt_eval_ms: ms(prompt_eval),
            token_sampling_ms: ms(sampling),
            generation_ms: ms(generation),
        })
    }

    fn unload(&self, _manifest: &ModelManifest) -> Result<(), InferenceError> {
        *self.loaded.lock().expect("stub poisoned") = None;
        Ok(())
    }
}
