use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use serde::Serialize;
use serde_json::json;
use tutor_core::bench::{run_bench, write_csv, LADDER};
use tutor_core::config::DataLayout;
use tutor_core::net::SystemNetwork;
use tutor_core::registry::{reference_catalog, scan_models, write_model_pair, MANIFEST_SUFFIX};
use tutor_core::session::SubmitSink;
use tutor_core::telemetry::LatencyReport;
use tutor_core::{
    pin_model, probe_hardware, select_model, AppConfig, ComposedPrompt, HardwareProfile, RagStore, ResponseLevel,
    RetrievedChunk, Tutor, GIB,
};
use tutor_server::{start, AppState, ServiceConfig};

pub struct Context {
    pub data_dir: PathBuf,
    pub config: AppConfig,
    pub json: bool,
}

impl Context {
    fn layout(&self) -> DataLayout {
        DataLayout::new(&self.data_dir)
    }

    fn tutor(&self) -> anyhow::Result<Tutor> {
        let tutor = Tutor::from_config(&self.data_dir, self.config.clone(), Arc::new(SystemNetwork))?;
        for w in tutor.warnings() {
            eprintln!("warning: {w}");
        }
        Ok(tutor)
    }

    /// Prints `value` as JSON in `--json` mode, otherwise the text form.
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce(&T) -> String) -> anyhow::Result<()> {
        let out = if self.json {
            serde_json::to_string(value)?
        } else {
            text(value)
        };
        let mut stdout = io::stdout().lock();
        writeln!(stdout, "{out}")?;
        Ok(())
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn gib(bytes: u64) -> String {
    format!("{:.1}", bytes as f64 / GIB as f64)
}

pub fn probe(ctx: &Context) -> anyhow::Result<()> {
    let profile = probe_hardware(ctx.config.hardware_override.as_ref())?;
    ctx.emit(&profile, pretty)
}

pub fn models_list(ctx: &Context) -> anyhow::Result<()> {
    let snapshot = scan_models(&ctx.layout().models_dir())?;
    if !ctx.json {
        for w in &snapshot.scan_warnings {
            eprintln!("warning: {w}");
        }
    }
    ctx.emit(&snapshot, |s| {
        if s.manifests.is_empty() {
            return format!("no models in {}", ctx.layout().models_dir().display());
        }
        let mut lines = vec![format!("{:<4} {:<32} {:>8} {:>8}  {}", "TIER", "MODEL", "RAM GiB", "CONTEXT", "NAME")];
        for m in &s.manifests {
            lines.push(format!(
                "{:<4} {:<32} {:>8} {:>8}  {}",
                m.tier,
                m.model_id,
                gib(m.required_ram_bytes),
                m.context_window_tokens,
                m.display_name
            ));
        }
        lines.join("\n")
    })
}

/// Leaves any existing manifest of the same id untouched.
pub fn models_demo(ctx: &Context) -> anyhow::Result<()> {
    let dir = ctx.layout().models_dir();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = Vec::new();
    for m in reference_catalog() {
        if dir.join(format!("{}{MANIFEST_SUFFIX}", m.model_id)).exists() {
            continue;
        }
        write_model_pair(&dir, &m).with_context(|| format!("writing {}", m.model_id))?;
        written.push(m.model_id);
    }
    ctx.emit(&json!({ "models_dir": dir, "written": written }), |_| {
        if written.is_empty() {
            format!("demo models already present in {}", dir.display())
        } else {
            format!("wrote {} to {}", written.join(", "), dir.display())
        }
    })
}

fn gib_to_bytes(v: f64, flag: &str) -> anyhow::Result<u64> {
    if !(v.is_finite() && v > 0.0) {
        return Err(anyhow!("{flag} must be a positive number of GiB"));
    }
    Ok((v * GIB as f64).round() as u64)
}

pub fn models_select(ctx: &Context, ram: Option<f64>, total_ram: Option<f64>, cores: Option<u32>) -> anyhow::Result<()> {
    let profile = match ram {
        Some(ram) => {
            let available = gib_to_bytes(ram, "--ram")?;
            let total = match total_ram {
                Some(t) => gib_to_bytes(t, "--total-ram")?,
                None => available,
            };
            let cores = cores.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get() as u32));
            let profile = HardwareProfile::hypothetical(available, total, cores);
            profile.validate().map_err(|e| anyhow!("invalid hypothetical machine: {e}"))?;
            profile
        }
        None => probe_hardware(ctx.config.hardware_override.as_ref())?,
    };
    let snapshot = scan_models(&ctx.layout().models_dir())?;
    let policy = ctx.config.policy()?;
    let selection = match &ctx.config.pinned_model {
        Some(id) => pin_model(&snapshot, id, &profile, &policy)?,
        None => select_model(&profile, &snapshot, &policy)?,
    };
    if let Some(w) = &selection.warning {
        eprintln!("warning: {w}");
    }
    ctx.emit(&selection, pretty)
}

pub fn serve(ctx: Context) -> anyhow::Result<()> {
    let service = ServiceConfig::from(ctx.config.server.clone());
    service.validate()?;
    let tutor = Arc::new(ctx.tutor()?);
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async {
        let stop = shutdown_signal()?;
        let state = AppState::new(tutor.clone());
        let server = start(state.clone(), &service, &SystemNetwork).await?;
        state.spawn_model_load();
        let url = format!("http://{}", server.addr);
        ctx.emit(&json!({ "url": url, "data_dir": ctx.data_dir }), |_| url.clone())?;
        stop.await;
        tracing::info!("shutting down");
        server.stop().await?;
        anyhow::Ok(())
    })?;
    tutor.shutdown()?;
    Ok(())
}

/// Registers the handlers immediately; the returned future resolves on
/// Ctrl-C or SIGTERM.
fn shutdown_signal() -> anyhow::Result<impl std::future::Future<Output = ()>> {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).context("installing SIGTERM handler")?;
        let mut int = signal(SignalKind::interrupt()).context("installing SIGINT handler")?;
        Ok(async move {
            tokio::select! {
                _ = int.recv() => {}
                _ = term.recv() => {}
            }
        })
    }
    #[cfg(not(unix))]
    {
        Ok(async {
            let _ = tokio::signal::ctrl_c().await;
        })
    }
}

pub fn ingest(ctx: &Context, file: &Path, name: &str) -> anyhow::Result<()> {
    let bytes = fs::read(file).with_context(|| format!("cannot read {}", file.display()))?;
    let content = String::from_utf8(bytes)
        .map_err(|_| anyhow!("{} is not UTF-8 text; convert it to plain text or markdown first", file.display()))?;
    let store = RagStore::open(&ctx.data_dir)?;
    let outcome = store.ingest_document(name, &content)?;
    ctx.emit(&outcome, |o| {
        if o.already_present {
            format!("{} already present ({name})", o.doc_id)
        } else {
            format!("{} added ({name}, {} chunks)", o.doc_id, o.chunk_count)
        }
    })
}

pub fn docs_list(ctx: &Context) -> anyhow::Result<()> {
    let store = RagStore::open(&ctx.data_dir)?;
    ctx.emit(&store.list_documents(), |docs| {
        if docs.is_empty() {
            return "no documents".into();
        }
        docs.iter()
            .map(|d| format!("{}  {:>5} chunks  {}", d.doc_id, d.chunk_count, d.source_name))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

pub fn docs_remove(ctx: &Context, doc_id: &str) -> anyhow::Result<()> {
    let store = RagStore::open(&ctx.data_dir)?;
    store.remove_document(doc_id)?;
    ctx.emit(&json!({ "removed": doc_id }), |_| format!("{doc_id} removed"))
}

/// Streams tokens to standard output as they arrive (text mode only).
struct Printer {
    stream: bool,
}

impl SubmitSink for Printer {
    fn prompt_ready(&mut self, prompt: &ComposedPrompt, _retrieved: &[RetrievedChunk]) {
        if prompt.dropped_turns + prompt.dropped_chunks > 0 {
            tracing::info!(
                dropped_turns = prompt.dropped_turns,
                dropped_chunks = prompt.dropped_chunks,
                "prompt trimmed to fit the context window"
            );
        }
    }

    fn token(&mut self, token: &str) -> bool {
        if self.stream {
            let mut out = io::stdout().lock();
            // A closed pipe stops generation.
            return out.write_all(token.as_bytes()).and_then(|_| out.flush()).is_ok();
        }
        true
    }
}

#[derive(Serialize)]
struct Source<'a> {
    rank: usize,
    source_name: &'a str,
    doc_id: &'a str,
    chunk_index: usize,
    score: f64,
}

pub fn ask(ctx: &Context, query: &str, level: ResponseLevel, rag: bool) -> anyhow::Result<()> {
    let tutor = ctx.tutor()?;
    let active = tutor.select_and_load()?;
    let session = tutor.sessions().create(level, rag);
    let mut printer = Printer { stream: !ctx.json };
    let result = tutor
        .sessions()
        .submit_message(&session.session_id, query, &ctx.config.generation, &mut printer);
    let _ = tutor.sessions().delete(&session.session_id);
    if let Some(h) = tutor.engine().current() {
        let _ = tutor.engine().unload(&h);
    }
    let outcome = result?;
    let sources: Vec<Source> = outcome
        .retrieved
        .iter()
        .map(|r| Source {
            rank: r.rank,
            source_name: &r.chunk.source_name,
            doc_id: &r.chunk.doc_id,
            chunk_index: r.chunk.chunk_index,
            score: r.score,
        })
        .collect();
    if ctx.json {
        return ctx.emit(
            &json!({
                "model_id": outcome.model_id,
                "tier": active.selection.chosen.tier,
                "level": level,
                "text": outcome.assistant_turn.text,
                "metrics": outcome.metrics,
                "total_wall_ms": outcome.total_wall_ms,
                "prompt_estimated_tokens": outcome.prompt.estimated_tokens,
                "sources": sources,
            }),
            |_| String::new(),
        );
    }
    let mut out = io::stdout().lock();
    writeln!(out)?;
    if !sources.is_empty() {
        writeln!(out, "\nSources:")?;
        for s in &sources {
            writeln!(out, "  [{}] {} (chunk {}, score {:.3})", s.rank, s.source_name, s.chunk_index, s.score)?;
        }
    }
    eprintln!(
        "{} | {:.0} ms | {} tokens at {:.1} tok/s",
        outcome.model_id, outcome.total_wall_ms, outcome.metrics.tokens_generated, outcome.metrics.tokens_per_sec
    );
    Ok(())
}

fn format_ms(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

fn report_table(model_id: &str, r: &LatencyReport) -> String {
    let mut lines = vec![
        format!("model {model_id}: {} requests", r.count),
        format!(
            "wall ms  p50 {}  p90 {}  p99 {}  max {}",
            format_ms(r.p50_wall_ms),
            format_ms(r.p90_wall_ms),
            format_ms(r.p99_wall_ms),
            format_ms(r.max_wall_ms)
        ),
        format!("{:<16} {:>6} {:>12}", "prompt tokens", "count", "mean ms"),
    ];
    for b in &r.buckets {
        let range = match b.max_prompt_tokens {
            Some(max) => format!("{}-{}", b.min_prompt_tokens, max - 1),
            None => format!("{}+", b.min_prompt_tokens),
        };
        lines.push(format!("{range:<16} {:>6} {:>12}", b.count, format_ms(b.mean_wall_ms)));
    }
    lines.join("\n")
}

pub fn bench(ctx: &Context, out: Option<&Path>, repetitions: usize) -> anyhow::Result<()> {
    if repetitions == 0 {
        return Err(anyhow!("--repetitions must be at least 1"));
    }
    let tutor = ctx.tutor()?;
    tutor.select_and_load()?;
    let handle = tutor.engine().current().context("model unloaded during benchmark")?;
    let outcome = run_bench(
        tutor.engine(),
        &handle,
        &ctx.config.generation,
        &LADDER,
        repetitions,
        tutor.telemetry(),
    );
    let _ = tutor.engine().unload(&handle);
    let outcome = outcome?;
    if let Some(path) = out {
        let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        write_csv(&outcome.rows, io::BufWriter::new(file))?;
        if !ctx.json {
            eprintln!("wrote {} rows to {}", outcome.rows.len(), path.display());
        }
    }
    ctx.emit(
        &json!({ "model_id": outcome.model_id, "rows": outcome.rows.len(), "csv": out, "report": outcome.report }),
        |_| report_table(&outcome.model_id, &outcome.report),
    )
}
