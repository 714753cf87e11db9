//! Latency benchmark over a fixed ladder of synthetic prompt lengths.

use std::io::Write;
use std::time::Instant;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::inference::{GenerationParams, InferenceEngine, InferenceError, ModelHandle};
use crate::prompt::estimate_tokens;
use crate::telemetry::{LatencyReport, RequestRecord, Telemetry, TelemetryError};

/// Prompt lengths in estimated tokens.
pub const LADDER: [usize; 4] = [16, 64, 256, 1024];
pub const REPETITIONS: usize = 10;

const FILLER: &str = "Plants convert light energy into chemical energy stored in glucose. ";

/// A prompt whose token estimate is exactly `tokens`.
pub fn synthetic_prompt(tokens: usize) -> String {
    FILLER.chars().cycle().take(tokens * 4).collect()
}

/// One benchmark request; serialized as one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    pub wall_ms: f64,
    pub prompt_eval_ms: f64,
    pub generation_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOutcome {
    pub model_id: String,
    pub rows: Vec<BenchRow>,
    pub report: LatencyReport,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// Runs each ladder length `repetitions` times through the engine,
/// recording every request into `telemetry`. The report covers only the
/// benchmark's own requests.
pub fn run_bench(
    engine: &InferenceEngine,
    handle: &ModelHandle,
    params: &GenerationParams,
    ladder: &[usize],
    repetitions: usize,
    telemetry: &Telemetry,
) -> Result<BenchOutcome, BenchError> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &tokens in ladder {
        let prompt = synthetic_prompt(tokens);
        for _ in 0..repetitions {
            let started = Instant::now();
            let metrics = engine.generate(handle, &prompt, params, &mut |_: &str| true)?;
            let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
            let record = RequestRecord {
                request_id: Uuid::new_v4().to_string(),
                session_id: "bench".into(),
                prompt_estimated_tokens: estimate_tokens(&prompt) as u64,
                response_tokens: metrics.tokens_generated,
                metrics,
                total_wall_ms: wall_ms,
                at: Utc::now(),
            };
            telemetry.record(record.clone())?;
            rows.push(BenchRow {
                prompt_tokens: record.prompt_estimated_tokens,
                response_tokens: metrics.tokens_generated,
                wall_ms,
                prompt_eval_ms: metrics.prompt_eval_ms,
                generation_ms: metrics.generation_ms,
            });
            records.push(record);
        }
    }
    Ok(BenchOutcome {
        model_id: handle.manifest.model_id.clone(),
        rows,
        report: LatencyReport::from_records(&records),
    })
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
