//! Per-request timing records and latency reports.
//!
//! Records go to a bounded in-memory ring and, when opened on a data
//! directory, to an append-only `telemetry.jsonl`. Reports use exact
//! nearest-rank percentiles and group mean wall time by prompt length.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::GenerationMetrics;

pub const RING_CAPACITY: usize = 10_000;
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";

/// Lower edges of the prompt-length buckets, in estimated tokens. The last
/// bucket is open-ended.
pub const BUCKET_EDGES: [u64; 5] = [0, 32, 128, 512, 2048];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: String,
    pub session_id: String,
    pub prompt_estimated_tokens: u64,
    pub response_tokens: u64,
    pub metrics: GenerationMetrics,
    pub total_wall_ms: f64,
    pub at: DateTime<Utc>,
}

impl RequestRecord {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        let invalid = |m: String| Err(TelemetryError::InvalidRecord(m));
        if !(self.total_wall_ms.is_finite() && self.total_wall_ms >= 0.0) {
            return invalid(format!("total_wall_ms must be non-negative, got {}", self.total_wall_ms));
        }
        self.metrics.validate().map_err(TelemetryError::InvalidRecord)?;
        if self.total_wall_ms < self.metrics.generation_ms {
            return invalid(format!(
                "total_wall_ms {} is less than generation_ms {}",
                self.total_wall_ms, self.metrics.generation_ms
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("telemetry log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Inclusive start, exclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
}

impl TimeWindow {
    /// The window ending now and reaching back `span`.
    pub fn last(span: Duration) -> Self {
        let to = Utc::now() + chrono::Duration::milliseconds(1);
        let from = to - chrono::Duration::from_std(span).unwrap_or(chrono::Duration::MAX);
        Self { from, to }
    }

    pub fn contains(&self, at: DateTime<Utc>) -> bool {
        self.from <= at && at < self.to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBucket {
    pub min_prompt_tokens: u64,
    /// Exclusive; `None` for the open-ended top bucket.
    pub max_prompt_tokens: Option<u64>,
    pub count: usize,
    pub mean_wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub count: usize,
    pub p50_wall_ms: Option<f64>,
    pub p90_wall_ms: Option<f64>,
    pub p99_wall_ms: Option<f64>,
    pub max_wall_ms: Option<f64>,
    pub buckets: Vec<LatencyBucket>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], percent: usize) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (percent * sorted.len()).div_ceil(100).max(1);
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn bucket_of(tokens: u64) -> usize {
    BUCKET_EDGES.iter().rposition(|&edge| tokens >= edge).unwrap_or(0)
}

impl LatencyReport {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RequestRecord>) -> Self {
        let mut walls = Vec::new();
        let mut sums = [(0usize, 0.0f64); BUCKET_EDGES.len()];
        for r in records {
            walls.push(r.total_wall_ms);
            let b = &mut sums[bucket_of(r.prompt_estimated_tokens)];
            b.0 += 1;
            b.1 += r.total_wall_ms;
        }
        walls.sort_by(f64::total_cmp);
        let buckets = sums
            .iter()
            .enumerate()
            .map(|(i, &(count, sum))| LatencyBucket {
                min_prompt_tokens: BUCKET_EDGES[i],
                max_prompt_tokens: BUCKET_EDGES.get(i + 1).copied(),
                count,
                mean_wall_ms: (count > 0).then(|| sum / count as f64),
            })
            .collect();
        Self {
            count: walls.len(),
            p50_wall_ms: nearest_rank(&walls, 50),
            p90_wall_ms: nearest_rank(&walls, 90),
            p99_wall_ms: nearest_rank(&walls, 99),
            max_wall_ms: walls.last().copied(),
            buckets,
        }
    }
}

#[derive(Debug)]
struct Inner {
    ring: VecDeque<RequestRecord>,
    file: Option<File>,
}

#[derive(Debug)]
pub struct Telemetry {
    capacity: usize,
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl Default for Telemetry {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Telemetry {
    pub fn in_memory() -> Self {
        Self::with_capacity(RING_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            path: None,
            inner: Mutex::new(Inner {
                ring: VecDeque::new(),
                file: None,
            }),
        }
    }

    /// Opens `<data_dir>/telemetry.jsonl`, loading its most recent records
    /// into the ring. Unparseable lines are skipped.
    pub fn open(data_dir: &Path) -> Result<Self, TelemetryError> {
        Self::open_with_capacity(data_dir, RING_CAPACITY)
    }

    pub fn open_with_capacity(data_dir: &Path, capacity: usize) -> Result<Self, TelemetryError> {
        let path = data_dir.join(TELEMETRY_FILE);
        let io_err = |source| TelemetryError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(data_dir).map_err(io_err)?;
        let mut telemetry = Self::with_capacity(capacity);
        let mut ring = VecDeque::new();
        match File::open(&path) {
            Ok(f) => {
                for line in BufReader::new(f).lines() {
                    let line = line.map_err(io_err)?;
                    match serde_json::from_str::<RequestRecord>(&line) {
                        Ok(r) => {
                            if ring.len() == telemetry.capacity {
                                ring.pop_front();
                            }
                            ring.push_back(r);
                        }
                        Err(e) if !line.trim().is_empty() => {
                            tracing::warn!("skipping unreadable telemetry line: {e}");
                        }
                        Err(_) => {}
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(e)),
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err)?;
        telemetry.inner = Mutex::new(Inner {
            ring,
            file: Some(file),
        });
        telemetry.path = Some(path);
        Ok(telemetry)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record(&self, record: RequestRecord) -> Result<(), TelemetryError> {
        record.validate()?;
        let mut inner = self.inner.lock().expect("telemetry poisoned");
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|source| TelemetryError::Io {
                path: self.path.clone().unwrap_or_default(),
                source,
            })?;
        }
        if inner.ring.len() == self.capacity {
            inner.ring.pop_front();
        }
        inner.ring.push_back(record);
        Ok(())
    }

    /// Records currently held in memory, oldest first.
    pub fn records(&self) -> Vec<RequestRecord> {
        self.inner.lock().expect("telemetry poisoned").ring.iter().cloned().collect()
    }

    pub fn report(&self, window: Option<TimeWindow>) -> LatencyReport {
        let inner = self.inner.lock().expect("telemetry poisoned");
        LatencyReport::from_records(inner.ring.iter().filter(|r| window.is_none_or(|w| w.contains(r.at))))
    }
}
