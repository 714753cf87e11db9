//! Hardware-aware model tier selection.
//!
//! The budget is `floor(available_ram × headroom_factor)`. Every model whose
//! requirement fits the budget (inclusive) is feasible; the highest tier
//! wins, then the smallest requirement, then the lexicographically smallest
//! id.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::HardwareProfile;
use crate::registry::{ModelManifest, RegistrySnapshot};

pub const DEFAULT_HEADROOM: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub headroom_factor: f64,
    pub allow_manual_pin: bool,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            headroom_factor: DEFAULT_HEADROOM,
            allow_manual_pin: true,
        }
    }
}

impl SelectionPolicy {
    pub fn new(headroom_factor: f64, allow_manual_pin: bool) -> Result<Self, SelectionError> {
        let policy = Self {
            headroom_factor,
            allow_manual_pin,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.headroom_factor > 0.0 && self.headroom_factor <= 1.0 {
            Ok(())
        } else {
            Err(SelectionError::InvalidPolicy(self.headroom_factor))
        }
    }

    pub fn budget_bytes(&self, profile: &HardwareProfile) -> u64 {
        (profile.available_ram_bytes as f64 * self.headroom_factor).floor() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSelection {
    pub chosen: ModelManifest,
    pub feasible_set: Vec<String>,
    pub budget_bytes: u64,
    pub reason: String,
    /// Set only by [`pin_model`] when the pinned model exceeds the budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("registry has no models")]
    EmptyRegistry,
    #[error(
        "no model fits the RAM budget of {budget_bytes} bytes (smallest requirement is {smallest_required_bytes} bytes)"
    )]
    NoFeasibleModel {
        budget_bytes: u64,
        smallest_required_bytes: u64,
    },
    #[error("model '{0}' is not in the registry")]
    UnknownModel(String),
    #[error("manual model pinning is disabled by policy")]
    PinDisabled,
    #[error("headroom_factor must be in (0, 1], got {0}")]
    InvalidPolicy(f64),
}

fn gib(bytes: u64) -> String {
    format!("{:.2} GiB", bytes as f64 / crate::GIB as f64)
}

pub fn select_model(
    profile: &HardwareProfile,
    snapshot: &RegistrySnapshot,
    policy: &SelectionPolicy,
) -> Result<TierSelection, SelectionError> {
    policy.validate()?;
    if snapshot.manifests.is_empty() {
        return Err(SelectionError::EmptyRegistry);
    }
    let budget = policy.budget_bytes(profile);
    let feasible: Vec<&ModelManifest> = snapshot
        .manifests
        .iter()
        .filter(|m| m.required_ram_bytes <= budget)
        .collect();

    let chosen = feasible
        .iter()
        .copied()
        .min_by(|a, b| {
            b.tier
                .cmp(&a.tier)
                .then(a.required_ram_bytes.cmp(&b.required_ram_bytes))
                .then_with(|| a.model_id.cmp(&b.model_id))
        })
        .ok_or_else(|| SelectionError::NoFeasibleModel {
            budget_bytes: budget,
            smallest_required_bytes: snapshot
                .manifests
                .iter()
                .map(|m| m.required_ram_bytes)
                .min()
                .unwrap_or(0),
        })?;

    let reason = format!(
        "Selected tier {} model {} because it is the most capable of {} feasible model(s) within the {} budget ({:.0}% of {} available RAM), requiring {}.",
        chosen.tier,
        chosen.model_id,
        feasible.len(),
        gib(budget),
        policy.headroom_factor * 100.0,
        gib(profile.available_ram_bytes),
        gib(chosen.required_ram_bytes),
    );

    Ok(TierSelection {
        chosen: chosen.clone(),
        feasible_set: feasible.iter().map(|m| m.model_id.clone()).collect(),
        budget_bytes: budget,
        reason,
        warning: None,
    })
}

/// Operator override: always honors the pin, flagging (not refusing) a
/// model that exceeds the budget.
pub fn pin_model(
    snapshot: &RegistrySnapshot,
    model_id: &str,
    profile: &HardwareProfile,
    policy: &SelectionPolicy,
) -> Result<TierSelection, SelectionError> {
    if !policy.allow_manual_pin {
        return Err(SelectionError::PinDisabled);
    }
    policy.validate()?;
    let chosen = snapshot
        .get(model_id)
        .ok_or_else(|| SelectionError::UnknownModel(model_id.to_string()))?;
    let budget = policy.budget_bytes(profile);
    let warning = (chosen.required_ram_bytes > budget).then(|| {
        format!(
            "pinned model {} requires {} but the RAM budget is {}",
            chosen.model_id,
            gib(chosen.required_ram_bytes),
            gib(budget)
        )
    });
    if let Some(w) = &warning {
        tracing::warn!("{w}");
    }
    Ok(TierSelection {
        chosen: chosen.clone(),
        feasible_set: vec![chosen.model_id.clone()],
        budget_bytes: budget,
        reason: "manually pinned".into(),
        warning,
    })
}
