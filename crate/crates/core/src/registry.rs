//! Discovery of locally stored quantized models.
//!
//! Each weights file `X.gguf` in the models directory pairs with a sidecar
//! `X.manifest.json` describing it. Dropping a new pair into the directory
//! and calling [`ModelRegistry::rescan`] makes it available without a
//! restart. Invalid entries turn into warnings and never abort a scan.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const WEIGHTS_EXTENSION: &str = "gguf";
const GGUF_MAGIC: [u8; 4] = *b"GGUF";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionDepth {
    Basic,
    Structured,
    Advanced,
}

/// One registered quantized model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_id: String,
    pub display_name: String,
    pub tier: u8,
    pub parameter_count: u64,
    pub quant_format: String,
    pub required_ram_bytes: u64,
    pub weights_path: PathBuf,
    pub context_window_tokens: u32,
    pub instruction_depth: InstructionDepth,
}

/// On-disk sidecar. `weights_path` may be omitted (the sibling `X.gguf` is
/// used) or relative (resolved against the models directory).
#[derive(Debug, Deserialize)]
struct ManifestFile {
    model_id: String,
    display_name: String,
    tier: u8,
    parameter_count: u64,
    quant_format: String,
    required_ram_bytes: u64,
    #[serde(default)]
    weights_path: Option<PathBuf>,
    context_window_tokens: u32,
    instruction_depth: InstructionDepth,
}

const MANIFEST_KEYS: &[&str] = &[
    "model_id",
    "display_name",
    "tier",
    "parameter_count",
    "quant_format",
    "required_ram_bytes",
    "weights_path",
    "context_window_tokens",
    "instruction_depth",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub manifests: Vec<ModelManifest>,
    pub scanned_at: DateTime<Utc>,
    pub scan_warnings: Vec<String>,
}

impl RegistrySnapshot {
    pub fn empty() -> Self {
        Self {
            manifests: Vec::new(),
            scanned_at: Utc::now(),
            scan_warnings: Vec::new(),
        }
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelManifest> {
        self.manifests.iter().find(|m| m.model_id == model_id)
    }

    pub fn is_empty(&self) -> bool {
        self.manifests.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("models directory {path} is unreadable: {source}")]
    DirectoryUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read weights file {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// True iff the file starts with the ASCII bytes `GGUF`.
pub fn validate_weights_magic(weights_path: &Path) -> Result<bool, RegistryError> {
    let unreadable = |source| RegistryError::FileUnreadable {
        path: weights_path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(weights_path).map_err(unreadable)?;
    let mut head = [0u8; 4];
    let mut filled = 0;
    while filled < head.len() {
        match file.read(&mut head[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(unreadable(e)),
        }
    }
    Ok(head == GGUF_MAGIC)
}

/// Scans `models_dir` and returns a snapshot ordered by
/// (tier desc, required_ram_bytes asc, model_id asc).
pub fn scan_models(models_dir: &Path) -> Result<RegistrySnapshot, RegistryError> {
    let unreadable = |source| RegistryError::DirectoryUnreadable {
        path: models_dir.to_path_buf(),
        source,
    };
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(models_dir).map_err(unreadable)? {
        let entry = entry.map_err(unreadable)?;
        if !entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            continue;
        }
        if let Some(name) = entry.file_name().to_str() {
            names.push(name.to_string());
        }
    }
    names.sort();

    let mut warnings = Vec::new();
    let mut manifests: Vec<ModelManifest> = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut claimed_weights = HashSet::new();

    for name in names.iter().filter(|n| n.ends_with(MANIFEST_SUFFIX)) {
        let stem = &name[..name.len() - MANIFEST_SUFFIX.len()];
        let manifest_path = models_dir.join(name);
        claimed_weights.insert(format!("{stem}.{WEIGHTS_EXTENSION}"));
        match load_manifest(models_dir, stem, &manifest_path, &mut warnings) {
            Ok(manifest) => {
                if !seen_ids.insert(manifest.model_id.clone()) {
                    warnings.push(format!(
                        "{}: duplicate model_id '{}' ignored",
                        manifest_path.display(),
                        manifest.model_id
                    ));
                    continue;
                }
                manifests.push(manifest);
            }
            Err(warning) => warnings.push(warning),
        }
    }

    for name in &names {
        let is_weights = Path::new(name)
            .extension()
            .is_some_and(|ext| ext == WEIGHTS_EXTENSION);
        if is_weights && !claimed_weights.contains(name) {
            warnings.push(format!(
                "{}: weights file has no {MANIFEST_SUFFIX} sidecar",
                models_dir.join(name).display()
            ));
        }
    }

    manifests.sort_by(|a, b| {
        b.tier
            .cmp(&a.tier)
            .then(a.required_ram_bytes.cmp(&b.required_ram_bytes))
            .then_with(|| a.model_id.cmp(&b.model_id))
    });

    Ok(RegistrySnapshot {
        manifests,
        scanned_at: Utc::now(),
        scan_warnings: warnings,
    })
}

/// Parses and validates one sidecar. Non-fatal notes (unknown keys) are
/// pushed to `warnings`; a fatal problem is returned as the error string.
fn load_manifest(
    models_dir: &Path,
    stem: &str,
    manifest_path: &Path,
    warnings: &mut Vec<String>,
) -> Result<ModelManifest, String> {
    let shown = manifest_path.display();
    let raw = fs::read_to_string(manifest_path).map_err(|e| format!("{shown}: unreadable: {e}"))?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| format!("{shown}: malformed JSON: {e}"))?;
    if let Some(obj) = value.as_object() {
        let mut unknown: Vec<&str> = obj
            .keys()
            .map(String::as_str)
            .filter(|k| !MANIFEST_KEYS.contains(k))
            .collect();
        unknown.sort_unstable();
        if !unknown.is_empty() {
            warnings.push(format!("{shown}: unknown keys ignored: {}", unknown.join(", ")));
        }
    }
    let file: ManifestFile =
        serde_json::from_value(value).map_err(|e| format!("{shown}: invalid manifest: {e}"))?;

    if !(1..=3).contains(&file.tier) {
        return Err(format!("{shown}: tier {} is outside 1..=3", file.tier));
    }
    if file.required_ram_bytes == 0 {
        return Err(format!("{shown}: required_ram_bytes must be positive"));
    }
    if file.context_window_tokens == 0 {
        return Err(format!("{shown}: context_window_tokens must be positive"));
    }
    if file.model_id.trim().is_empty() {
        return Err(format!("{shown}: model_id is empty"));
    }

    let weights_path = match file.weights_path {
        Some(p) if p.is_absolute() => p,
        Some(p) => models_dir.join(p),
        None => models_dir.join(format!("{stem}.{WEIGHTS_EXTENSION}")),
    };
    if !weights_path.is_file() {
        return Err(format!(
            "{shown}: weights file {} is missing",
            weights_path.display()
        ));
    }
    match validate_weights_magic(&weights_path) {
        Ok(true) => {}
        Ok(false) => {
            return Err(format!(
                "{shown}: weights file {} lacks the GGUF magic",
                weights_path.display()
            ))
        }
        Err(e) => return Err(format!("{shown}: {e}")),
    }

    Ok(ModelManifest {
        model_id: file.model_id,
        display_name: file.display_name,
        tier: file.tier,
        parameter_count: file.parameter_count,
        quant_format: file.quant_format,
        required_ram_bytes: file.required_ram_bytes,
        weights_path,
        context_window_tokens: file.context_window_tokens,
        instruction_depth: file.instruction_depth,
    })
}

/// Holds the models directory and the latest snapshot. Rescans are
/// serialized; readers keep whatever `Arc<RegistrySnapshot>` they were given.
#[derive(Debug)]
pub struct ModelRegistry {
    models_dir: PathBuf,
    current: RwLock<Arc<RegistrySnapshot>>,
    rescan_lock: Mutex<()>,
}

impl ModelRegistry {
    pub fn open(models_dir: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let models_dir = models_dir.into();
        let snapshot = scan_models(&models_dir)?;
        for w in &snapshot.scan_warnings {
            tracing::warn!("{w}");
        }
        Ok(Self {
            models_dir,
            current: RwLock::new(Arc::new(snapshot)),
            rescan_lock: Mutex::new(()),
        })
    }

    pub fn models_dir(&self) -> &Path {
        &self.models_dir
    }

    pub fn snapshot(&self) -> Arc<RegistrySnapshot> {
        self.current.read().expect("registry lock poisoned").clone()
    }

    pub fn rescan(&self) -> Result<Arc<RegistrySnapshot>, RegistryError> {
        let _one_at_a_time = self.rescan_lock.lock().expect("registry lock poisoned");
        let snapshot = Arc::new(scan_models(&self.models_dir)?);
        for w in &snapshot.scan_warnings {
            tracing::warn!("{w}");
        }
        *self.current.write().expect("registry lock poisoned") = snapshot.clone();
        Ok(snapshot)
    }
}

/// The three reference tiers, requiring 3, 6 and 12 GiB of free RAM.
/// Used for demos and tests.
pub fn reference_catalog() -> Vec<ModelManifest> {
    use crate::GIB;
    vec![
        ModelManifest {
            model_id: "tinyllama-1.1b-chat-q4".into(),
            display_name: "TinyLlama-1.1B-Chat".into(),
            tier: 1,
            parameter_count: 1_100_000_000,
            quant_format: "gguf-q4".into(),
            required_ram_bytes: 3 * GIB,
            weights_path: "tinyllama-1.1b-chat-q4.gguf".into(),
            context_window_tokens: 2048,
            instruction_depth: InstructionDepth::Basic,
        },
        ModelManifest {
            model_id: "qwen2.5-3b-instruct-q4".into(),
            display_name: "Qwen2.5-3B-Instruct".into(),
            tier: 2,
            parameter_count: 3_000_000_000,
            quant_format: "gguf-q4".into(),
            required_ram_bytes: 6 * GIB,
            weights_path: "qwen2.5-3b-instruct-q4.gguf".into(),
            context_window_tokens: 4096,
            instruction_depth: InstructionDepth::Structured,
        },
        ModelManifest {
            model_id: "mistral-7b-instruct-q4".into(),
            display_name: "Mistral-7B-Instruct".into(),
            tier: 3,
            parameter_count: 7_000_000_000,
            quant_format: "gguf-q4".into(),
            required_ram_bytes: 12 * GIB,
            weights_path: "mistral-7b-instruct-q4.gguf".into(),
            context_window_tokens: 8192,
            instruction_depth: InstructionDepth::Advanced,
        },
    ]
}

/// Writes a sidecar + placeholder weights pair into `models_dir`. The
/// placeholder carries only the GGUF magic, which is all the registry
/// checks; real deployments drop actual weights in its place.
pub fn write_model_pair(models_dir: &Path, manifest: &ModelManifest) -> std::io::Result<()> {
    let stem = &manifest.model_id;
    let weights_name = format!("{stem}.{WEIGHTS_EXTENSION}");
    let weights = models_dir.join(&weights_name);
    if !weights.exists() {
        fs::write(&weights, b"GGUF\x03\x00\x00\x00")?;
    }
    let mut json = serde_json::to_value(manifest)?;
    json["weights_path"] = serde_json::Value::String(weights_name);
    let body = serde_json::to_string_pretty(&json)?;
    fs::write(models_dir.join(format!("{stem}{MANIFEST_SUFFIX}")), body)
}
