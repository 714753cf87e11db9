use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;
use tutor_core::registry::{reference_catalog, write_model_pair};

struct DataDir {
    dir: tempfile::TempDir,
}

impl DataDir {
    fn with_reference_models() -> Self {
        let dir = tempfile::TempDir::new().unwrap();
        let models = dir.path().join("models");
        std::fs::create_dir_all(&models).unwrap();
        for m in reference_catalog() {
            write_model_pair(&models, &m).unwrap();
        }
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn config(&self, text: &str) {
        std::fs::write(self.path().join("config"), text).unwrap();
    }

    fn file(&self, name: &str, content: &[u8]) -> PathBuf {
        let p = self.path().join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    fn command(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_tutor"));
        c.arg("--data-dir").arg(self.path()).env_remove("RUST_LOG");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.command().args(args).output().unwrap()
    }

    /// Runs with `--json` and parses stdout as exactly one JSON document.
    fn json(&self, args: &[&str]) -> Value {
        let mut all = vec!["--json"];
        all.extend_from_slice(args);
        let out = self.run(&all);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
        serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?}: {e}: {}", stdout(&out)))
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn dry_run_selection_for_8_gib_is_tier_2() {
    let d = DataDir::with_reference_models();
    let out = d.run(&["models", "select", "--ram", "8"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let sel: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(sel["chosen"]["tier"], 2);
    assert_eq!(sel["budget_bytes"], 6 * 1024 * 1024 * 1024u64);

    let none = d.run(&["models", "select", "--ram", "1"]);
    assert_eq!(none.status.code(), Some(1));
    assert!(none.stdout.is_empty());
    assert!(stderr(&none).contains("error"));
}

#[test]
fn ask_echoes_the_level_marker() {
    let d = DataDir::with_reference_models();
    let out = d.run(&["ask", "hello", "--level", "Technical"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("[[LEVEL:Technical]]"));
}

#[test]
fn missing_file_is_an_operational_error() {
    let d = DataDir::with_reference_models();
    let out = d.run(&["ingest", "missing.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(stderr(&out).contains("missing.txt"));

    let binary = d.file("photo.bin", &[0xff, 0xd8, 0xff, 0x00]);
    let out = d.run(&["ingest", binary.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not UTF-8"));
}

#[test]
fn usage_errors_exit_2() {
    let d = DataDir::with_reference_models();
    for args in [
        vec!["frobnicate"],
        vec!["ask"],
        vec!["ask", "hi", "--level", "Expert"],
        vec!["models", "select", "--ram", "lots"],
        vec!["--backend", "gpu", "probe"],
        vec!["models", "select", "--cores", "4"],
    ] {
        let out = d.run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty(), "{args:?}");
    }
    assert_eq!(d.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn documents_round_trip_and_ground_answers() {
    let d = DataDir::with_reference_models();
    let notes = d.file(
        "photosynthesis.md",
        b"# Photosynthesis\n\nChlorophyll absorbs light. Plants turn carbon dioxide and water into glucose.",
    );
    let added = d.json(&["ingest", notes.to_str().unwrap()]);
    assert_eq!(added["already_present"], false);
    let again = d.json(&["ingest", notes.to_str().unwrap()]);
    assert_eq!(again["already_present"], true);
    assert_eq!(again["doc_id"], added["doc_id"]);

    let docs = d.json(&["docs", "list"]);
    assert_eq!(docs.as_array().unwrap().len(), 1);
    assert_eq!(docs[0]["source_name"], "photosynthesis.md");

    let answer = d.json(&["ask", "What does chlorophyll absorb?", "--level", "LowerSecondary"]);
    assert_eq!(answer["sources"][0]["source_name"], "photosynthesis.md");
    assert!(answer["text"].as_str().unwrap().contains("[[LEVEL:LowerSecondary]]"));

    let plain = d.run(&["ask", "What does chlorophyll absorb?", "--no-rag"]);
    assert!(!stdout(&plain).contains("Sources:"));

    let id = added["doc_id"].as_str().unwrap();
    d.json(&["docs", "remove", id]);
    assert_eq!(d.json(&["docs", "list"]), Value::Array(vec![]));
    assert_eq!(d.run(&["docs", "remove", id]).status.code(), Some(1));
}

#[test]
fn bench_writes_csv_and_report() {
    let d = DataDir::with_reference_models();
    let csv = d.path().join("bench.csv");
    let out = d.json(&["bench", "--repetitions", "2", "--out", csv.to_str().unwrap()]);
    assert_eq!(out["rows"], 8);
    assert_eq!(out["report"]["count"], 8);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("prompt_tokens,response_tokens,wall_ms,prompt_eval_ms,generation_ms")
    );
    let prompts: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(prompts, [16, 16, 64, 64, 256, 256, 1024, 1024]);
}

#[test]
fn every_subcommand_has_a_json_mode() {
    let d = DataDir::with_reference_models();
    let notes = d.file("n.txt", b"Rivers erode valleys.");
    assert!(d.json(&["probe"])["available_ram_bytes"].is_u64());
    assert_eq!(d.json(&["models", "list"])["manifests"].as_array().unwrap().len(), 3);
    assert!(d.json(&["models", "select"])["chosen"].is_object());
    let doc = d.json(&["ingest", notes.to_str().unwrap(), "--name", "rivers"]);
    assert!(d.json(&["docs", "list"]).is_array());
    assert!(d.json(&["ask", "rivers?"])["metrics"].is_object());
    assert!(d.json(&["bench", "--repetitions", "1"])["report"].is_object());
    assert!(d.json(&["docs", "remove", doc["doc_id"].as_str().unwrap()])["removed"].is_string());
}

#[test]
fn config_file_sits_under_flags() {
    let d = DataDir::with_reference_models();
    d.config(
        r#"
backend = "external"
hardware_override = { total_ram_bytes = 34359738368, available_ram_bytes = 4294967296, logical_cpu_cores = 4, os_label = "lab" }

[external]
endpoint = "http://10.0.0.5:8081"
"#,
    );
    let probe = d.json(&["probe"]);
    assert_eq!(probe["available_ram_bytes"], 4u64 << 30);
    assert_eq!(probe["source"], "ConfigOverride");
    assert_eq!(d.json(&["models", "select"])["chosen"]["tier"], 1);

    // The configured backend points off-host and is refused.
    let refused = d.run(&["ask", "hi"]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(stderr(&refused).contains("loopback"), "{}", stderr(&refused));

    let flagged = d.run(&["--backend", "stub", "ask", "hi"]);
    assert_eq!(flagged.status.code(), Some(0), "{}", stderr(&flagged));

    d.config("colour = \"blue\"\n");
    let bad = d.run(&["probe"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("colour"));
}

fn http_get(addr: &str, path: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    body
}

#[cfg(unix)]
#[test]
fn serve_answers_and_saves_sessions_on_sigterm() {
    let d = DataDir::with_reference_models();
    let mut child = d
        .command()
        .args(["--json", "serve", "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let started: Value = serde_json::from_str(&line).unwrap();
    let url = started["url"].as_str().unwrap();
    let addr = url.trim_start_matches("http://").to_string();
    assert!(addr.starts_with("127.0.0.1:"));

    let health = http_get(&addr, "/health");
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");

    let status = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let exit = child.wait().unwrap();
    assert_eq!(exit.code(), Some(0));
    assert!(d.path().join("sessions.jsonl").exists());
}

#[test]
fn serve_refuses_a_public_bind() {
    let d = DataDir::with_reference_models();
    let out = d.run(&["serve", "--bind", "0.0.0.0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("loopback"));
    let out = d.run(&["serve", "--bind", "0.0.0.0", "--allow-lan"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("private"));
}

#[test]
fn demo_models_populate_an_empty_directory_once() {
    let dir = tempfile::TempDir::new().unwrap();
    let d = DataDir { dir };
    let first = d.json(&["models", "demo"]);
    assert_eq!(first["written"].as_array().unwrap().len(), 3);
    let second = d.json(&["models", "demo"]);
    assert_eq!(second["written"], Value::Array(vec![]));
    assert_eq!(d.json(&["models", "list"])["manifests"].as_array().unwrap().len(), 3);
}
