//! Host capacity probe feeding model tier selection.
//!
//! Only RAM and logical core count are measured. "Available" memory is what
//! the OS reports as free plus reclaimable (`MemAvailable` on Linux), not
//! total minus our own resident set.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeSource {
    Measured,
    ConfigOverride,
}

/// Snapshot of host RAM/CPU capacity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub total_ram_bytes: u64,
    pub available_ram_bytes: u64,
    pub logical_cpu_cores: u32,
    #[serde(default = "default_os_label")]
    pub os_label: String,
    #[serde(default = "epoch")]
    pub probed_at: DateTime<Utc>,
    #[serde(default = "override_source")]
    pub source: ProbeSource,
}

fn default_os_label() -> String {
    std::env::consts::OS.to_string()
}

fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

fn override_source() -> ProbeSource {
    ProbeSource::ConfigOverride
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProbeError {
    #[error("hardware probe failed: {0}")]
    ProbeFailed(String),
    #[error("invalid hardware override: {0}")]
    InvalidOverride(String),
}

impl HardwareProfile {
    /// Builds an override profile with the given RAM figures, as used by
    /// dry-run selection (`models select --ram`).
    pub fn hypothetical(available_ram_bytes: u64, total_ram_bytes: u64, cores: u32) -> Self {
        Self {
            total_ram_bytes,
            available_ram_bytes,
            logical_cpu_cores: cores.max(1),
            os_label: default_os_label(),
            probed_at: epoch(),
            source: ProbeSource::ConfigOverride,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.available_ram_bytes > self.total_ram_bytes {
            return Err(format!(
                "available_ram_bytes ({}) exceeds total_ram_bytes ({})",
                self.available_ram_bytes, self.total_ram_bytes
            ));
        }
        if self.logical_cpu_cores == 0 {
            return Err("logical_cpu_cores must be at least 1".into());
        }
        Ok(())
    }
}

/// Probes the host, or passes a configured override through unchanged
/// (apart from stamping `source = ConfigOverride`).
pub fn probe_hardware(override_profile: Option<&HardwareProfile>) -> Result<HardwareProfile, ProbeError> {
    if let Some(profile) = override_profile {
        profile.validate().map_err(ProbeError::InvalidOverride)?;
        return Ok(HardwareProfile {
            source: ProbeSource::ConfigOverride,
            ..profile.clone()
        });
    }
    measure()
}

fn measure() -> Result<HardwareProfile, ProbeError> {
    let mut sys = sysinfo::System::new();
    sys.refresh_memory();
    let total = sys.total_memory();
    if total == 0 {
        return Err(ProbeError::ProbeFailed("OS reported zero total memory".into()));
    }
    // Some kernels report MemAvailable slightly above MemTotal right after
    // ballooning; clamp rather than violate the invariant.
    let available = sys.available_memory().min(total);
    let cores = std::thread::available_parallelism()
        .map(|n| n.get() as u32)
        .map_err(|e| ProbeError::ProbeFailed(format!("core count unavailable: {e}")))?;
    if cores == 0 {
        return Err(ProbeError::ProbeFailed("OS reported zero CPU cores".into()));
    }
    let os_label = sysinfo::System::long_os_version()
        .unwrap_or_else(|| std::env::consts::OS.to_string());
    Ok(HardwareProfile {
        total_ram_bytes: total,
        available_ram_bytes: available,
        logical_cpu_cores: cores,
        os_label,
        probed_at: Utc::now(),
        source: ProbeSource::Measured,
    })
}
