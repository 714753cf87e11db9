//! Adapter for a separately installed GGUF runtime (for example a
//! llama.cpp-style server).
//!
//! `load` spawns the runtime from a command template and waits for its
//! health endpoint; `generate` posts a completion request built from a body
//! template and reads the streamed reply. Field names for content, stop flag
//! and timings are configuration, so different runtimes can be plugged in
//! without code changes. All connections go through the injected
//! [`NetworkLayer`] and the endpoint must be loopback.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, GenerationParams, InferenceError, PhaseTimings, TokenSink};
use crate::net::{is_loopback, NetworkLayer};
use crate::registry::ModelManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalConfig {
    /// Whitespace-separated argv. Placeholders: `{weights_path}`,
    /// `{model_id}`, `{context_window}`, `{host}`, `{port}`.
    pub command_template: String,
    /// Base URL of the runtime, e.g. `http://127.0.0.1:8081`.
    pub endpoint: String,
    pub completion_path: String,
    pub health_path: String,
    pub startup_timeout_secs: u64,
    pub request_timeout_secs: u64,
    /// JSON request body. Placeholders are replaced by JSON values:
    /// `{prompt}`, `{max_new_tokens}`, `{temperature}`, `{seed}`, `{stop}`.
    pub body_template: String,
    /// Chat-template wrapper applied to the composed prompt; `{prompt}` is
    /// replaced by the prompt text.
    pub prompt_wrapper: String,
    /// Dotted paths into each streamed JSON event.
    pub content_field: String,
    pub stop_field: String,
    pub prompt_ms_field: String,
    pub generation_ms_field: String,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            command_template: "llama-server -m {weights_path} -c {context_window} --host {host} --port {port}".into(),
            endpoint: "http://127.0.0.1:8081".into(),
            completion_path: "/completion".into(),
            health_path: "/health".into(),
            startup_timeout_secs: 120,
            request_timeout_secs: 600,
            body_template: r#"{"prompt": {prompt}, "n_predict": {max_new_tokens}, "temperature": {temperature}, "seed": {seed}, "stop": {stop}, "stream": true}"#.into(),
            prompt_wrapper: "{prompt}".into(),
            content_field: "content".into(),
            stop_field: "stop".into(),
            prompt_ms_field: "timings.prompt_ms".into(),
            generation_ms_field: "timings.predicted_ms".into(),
        }
    }
}

#[derive(Debug)]
struct Runtime {
    child: Child,
    stderr_tail: Arc<Mutex<String>>,
}

impl Runtime {
    fn exit_status(&mut self) -> Option<String> {
        match self.child.try_wait() {
            Ok(Some(status)) => Some(status.to_string()),
            Ok(None) => None,
            Err(e) => Some(format!("unknown ({e})")),
        }
    }

    fn stderr(&self) -> String {
        self.stderr_tail.lock().map(|s| s.clone()).unwrap_or_default()
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug)]
pub struct ExternalRuntimeBackend {
    config: ExternalConfig,
    net: Arc<dyn NetworkLayer>,
    addr: SocketAddr,
    host: String,
    runtime: Mutex<Option<Runtime>>,
}

impl ExternalRuntimeBackend {
    pub fn new(config: ExternalConfig, net: Arc<dyn NetworkLayer>) -> Result<Self, String> {
        let url = url::Url::parse(&config.endpoint).map_err(|e| format!("invalid endpoint {}: {e}", config.endpoint))?;
        if url.scheme() != "http" {
            return Err(format!("endpoint must use http://, got {}", url.scheme()));
        }
        let host = url.host_str().ok_or("endpoint has no host")?.trim_matches(['[', ']']).to_string();
        let port = url.port_or_known_default().unwrap_or(80);
        let addr = (host.as_str(), port)
            .to_socket_addrs()
            .map_err(|e| format!("cannot resolve endpoint host {host}: {e}"))?
            .find(|a| is_loopback(a.ip()))
            .ok_or_else(|| format!("endpoint {} is not a loopback address", config.endpoint))?;
        if config.command_template.split_whitespace().next().is_none() {
            return Err("command_template is empty".into());
        }
        Ok(Self {
            config,
            net,
            addr,
            host,
            runtime: Mutex::new(None),
        })
    }

    fn command_for(&self, manifest: &ModelManifest) -> Command {
        let subst = |arg: &str| {
            arg.replace("{weights_path}", &manifest.weights_path.display().to_string())
                .replace("{model_id}", &manifest.model_id)
                .replace("{context_window}", &manifest.context_window_tokens.to_string())
                .replace("{host}", &self.addr.ip().to_string())
                .replace("{port}", &self.addr.port().to_string())
        };
        let mut argv = self.config.command_template.split_whitespace().map(subst);
        let mut cmd = Command::new(argv.next().expect("validated non-empty"));
        cmd.args(argv).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::piped());
        cmd
    }

    fn request(&self, method: &str, path: &str, body: Option<&[u8]>, timeout: Duration) -> io::Result<HttpResponse> {
        let stream = self.net.connect(self.addr, Duration::from_secs(5))?;
        stream.set_read_timeout(Some(timeout))?;
        http_request(stream, &self.host, method, path, body)
    }

    fn render_body(&self, prompt: &str, params: &GenerationParams) -> String {
        let wrapped = self.config.prompt_wrapper.replace("{prompt}", prompt);
        let seed = params.seed.map(Value::from).unwrap_or(Value::Null);
        self.config
            .body_template
            .replace("{max_new_tokens}", &params.max_new_tokens.to_string())
            .replace("{temperature}", &Value::from(params.temperature as f64).to_string())
            .replace("{seed}", &seed.to_string())
            .replace("{stop}", &Value::from(params.stop_sequences.clone()).to_string())
            // Last, so placeholder-like text inside the prompt is left alone.
            .replace("{prompt}", &Value::from(wrapped).to_string())
    }

    fn crashed(&self, context: &str) -> InferenceError {
        let mut guard = self.runtime.lock().expect("runtime poisoned");
        let detail = match guard.as_mut().and_then(|r| r.exit_status()) {
            Some(status) => format!("{context}; runtime exited with {status}"),
            None => context.to_string(),
        };
        InferenceError::BackendCrashed(detail)
    }
}

fn field<'a>(value: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(value, |v, key| v.get(key))
}

impl Backend for ExternalRuntimeBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn load(&self, manifest: &ModelManifest) -> Result<(), InferenceError> {
        let mut cmd = self.command_for(manifest);
        let mut child = cmd
            .spawn()
            .map_err(|e| InferenceError::LoadFailed(format!("cannot start runtime: {e}")))?;
        let stderr_tail = Arc::new(Mutex::new(String::new()));
        if let Some(stderr) = child.stderr.take() {
            let tail = stderr_tail.clone();
            std::thread::spawn(move || {
                for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                    let mut t = tail.lock().expect("tail poisoned");
                    t.push_str(&line);
                    t.push('\n');
                    if t.len() > 8192 {
                        let cut = t.len() - 8192;
                        let cut = (cut..t.len()).find(|&i| t.is_char_boundary(i)).unwrap_or(t.len());
                        t.drain(..cut);
                    }
                }
            });
        }
        let mut runtime = Runtime { child, stderr_tail };

        let deadline = Instant::now() + Duration::from_secs(self.config.startup_timeout_secs);
        loop {
            if let Some(status) = runtime.exit_status() {
                // Give the stderr reader a moment to drain.
                std::thread::sleep(Duration::from_millis(50));
                let stderr = runtime.stderr();
                let lower = stderr.to_lowercase();
                if lower.contains("out of memory") || lower.contains("failed to allocate") {
                    return Err(InferenceError::InsufficientMemory(stderr.trim().to_string()));
                }
                return Err(InferenceError::LoadFailed(format!(
                    "runtime exited with {status} during startup: {}",
                    stderr.trim()
                )));
            }
            if let Ok(resp) = self.request("GET", &self.config.health_path, None, Duration::from_secs(2)) {
                if resp.status == 200 {
                    break;
                }
            }
            if Instant::now() >= deadline {
                return Err(InferenceError::LoadFailed(format!(
                    "runtime did not become healthy within {} s",
                    self.config.startup_timeout_secs
                )));
            }
            std::thread::sleep(Duration::from_millis(100));
        }
        *self.runtime.lock().expect("runtime poisoned") = Some(runtime);
        Ok(())
    }

    fn generate(
        &self,
        _manifest: &ModelManifest,
        prompt: &str,
        params: &GenerationParams,
        on_token: TokenSink<'_>,
    ) -> Result<PhaseTimings, InferenceError> {
        {
            let mut guard = self.runtime.lock().expect("runtime poisoned");
            let runtime = guard
                .as_mut()
                .ok_or_else(|| InferenceError::BackendCrashed("runtime is not running".into()))?;
            if let Some(status) = runtime.exit_status() {
                return Err(InferenceError::BackendCrashed(format!("runtime exited with {status}")));
            }
        }
        let body = self.render_body(prompt, params);
        let started = Instant::now();
        let timeout = Duration::from_secs(self.config.request_timeout_secs);
        let resp = self
            .request("POST", &self.config.completion_path, Some(body.as_bytes()), timeout)
            .map_err(|e| self.crashed(&format!("request failed: {e}")))?;
        if resp.status != 200 {
            return Err(InferenceError::BackendCrashed(format!("runtime answered HTTP {}", resp.status)));
        }

        let mut first_token_at: Option<Instant> = None;
        let mut reported: Option<(f64, f64)> = None;
        let mut finished = false;
        let mut cancelled = false;
        let mut handle_event = |event: &Value| -> bool {
            if let Some(text) = field(event, &self.config.content_field).and_then(Value::as_str) {
                if !text.is_empty() {
                    first_token_at.get_or_insert_with(Instant::now);
                    if !on_token(text) {
                        cancelled = true;
                        return false;
                    }
                }
            }
            let stop = field(event, &self.config.stop_field).and_then(Value::as_bool).unwrap_or(false);
            if stop {
                let prompt_ms = field(event, &self.config.prompt_ms_field).and_then(Value::as_f64);
                let gen_ms = field(event, &self.config.generation_ms_field).and_then(Value::as_f64);
                if let (Some(p), Some(g)) = (prompt_ms, gen_ms) {
                    reported = Some((p, g));
                }
                finished = true;
                return false;
            }
            true
        };

        if resp.is_event_stream() {
            for line in resp.body.lines() {
                let line = line.map_err(|e| self.crashed(&format!("stream broken: {e}")))?;
                let Some(payload) = line.strip_prefix("data:") else {
                    continue;
                };
                let payload = payload.trim();
                if payload == "[DONE]" {
                    finished = true;
                    break;
                }
                let event: Value = serde_json::from_str(payload)
                    .map_err(|e| InferenceError::BackendCrashed(format!("unparseable event: {e}")))?;
                if !handle_event(&event) {
                    break;
                }
            }
        } else {
            let mut raw = String::new();
            let mut body = resp.body;
            body.read_to_string(&mut raw)
                .map_err(|e| self.crashed(&format!("response broken: {e}")))?;
            let event: Value = serde_json::from_str(&raw)
                .map_err(|e| InferenceError::BackendCrashed(format!("unparseable response: {e}")))?;
            handle_event(&event);
            finished = true;
        }
        let done_at = Instant::now();
        // A stream that ends without a stop event, and was not cancelled by
        // the caller, means the runtime went away mid-generation.
        if !finished && !cancelled {
            return Err(self.crashed("stream ended before completion"));
        }

        let ms = |d: Duration| d.as_secs_f64() * 1000.0;
        let (prompt_eval_ms, generation_ms) = reported.unwrap_or_else(|| {
            let first = first_token_at.unwrap_or(done_at);
            (ms(first - started), ms(done_at - first))
        });
        Ok(PhaseTimings {
            prompt_eval_ms,
            token_sampling_ms: 0.0,
            generation_ms,
        })
    }

    fn unload(&self, _manifest: &ModelManifest) -> Result<(), InferenceError> {
        // Dropping the runtime kills the process.
        self.runtime.lock().expect("runtime poisoned").take();
        Ok(())
    }
}

struct HttpResponse {
    status: u16,
    content_type: String,
    body: Box<dyn BufRead + Send>,
}

impl HttpResponse {
    fn is_event_stream(&self) -> bool {
        self.content_type.starts_with("text/event-stream")
    }
}

fn http_request(mut stream: TcpStream, host: &str, method: &str, path: &str, body: Option<&[u8]>) -> io::Result<HttpResponse> {
    let body = body.unwrap_or_default();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\nAccept: text/event-stream, application/json\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    stream.flush()?;

    let mut reader = BufReader::new(stream);
    let mut status_line = String::new();
    reader.read_line(&mut status_line)?;
    let status = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad status line {status_line:?}")))?;

    let mut chunked = false;
    let mut length: Option<u64> = None;
    let mut content_type = String::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "headers truncated"));
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let value = value.trim();
            match name.trim().to_ascii_lowercase().as_str() {
                "transfer-encoding" => chunked = value.to_ascii_lowercase().contains("chunked"),
                "content-length" => length = value.parse().ok(),
                "content-type" => content_type = value.to_ascii_lowercase(),
                _ => {}
            }
        }
    }
    let body: Box<dyn BufRead + Send> = if chunked {
        Box::new(BufReader::new(ChunkedDecoder::new(reader)))
    } else if let Some(n) = length {
        Box::new(reader.take(n))
    } else {
        Box::new(reader)
    };
    Ok(HttpResponse {
        status,
        content_type,
        body,
    })
}

/// Decodes an HTTP/1.1 chunked body.
struct ChunkedDecoder<R> {
    inner: R,
    remaining: u64,
    done: bool,
}

impl<R: BufRead> ChunkedDecoder<R> {
    fn new(inner: R) -> Self {
        Self {
            inner,
            remaining: 0,
            done: false,
        }
    }

    fn next_chunk(&mut self) -> io::Result<()> {
        let mut line = String::new();
        if self.inner.read_line(&mut line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "chunked body truncated"));
        }
        let size = line.trim().split(';').next().unwrap_or("");
        self.remaining = u64::from_str_radix(size, 16)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, format!("bad chunk size {size:?}")))?;
        if self.remaining == 0 {
            loop {
                let mut trailer = String::new();
                if self.inner.read_line(&mut trailer)? == 0 || trailer.trim().is_empty() {
                    break;
                }
            }
            self.done = true;
        }
        Ok(())
    }
}

impl<R: BufRead> Read for ChunkedDecoder<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.done || buf.is_empty() {
            return Ok(0);
        }
        if self.remaining == 0 {
            self.next_chunk()?;
            if self.done {
                return Ok(0);
            }
        }
        let want = buf.len().min(self.remaining as usize);
        let n = self.inner.read(&mut buf[..want])?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "chunk truncated"));
        }
        self.remaining -= n as u64;
        if self.remaining == 0 {
            let mut crlf = [0u8; 2];
            self.inner.read_exact(&mut crlf)?;
        }
        Ok(n)
    }
}
