//! Chat-completion client for query generation and listwise reranking:
//! versioned prompt templates, total-function ranking repair, a pure
//! deterministic mock, and a minimal HTTP client plus loopback server.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub temperature: f64,
    /// Drives the mock only; the HTTP path ignores it.
    #[serde(default)]
    pub seed: u64,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> usize {
    2
}

impl ClientConfig {
    pub fn mock(seed: u64) -> Self {
        ClientConfig {
            endpoint: "mock".into(),
            model: "mock".into(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs <= 0.0 {
            return Err(Error::Config("client timeout must be > 0".into()));
        }
        Ok(())
    }
}

/// One prompt in, one reply out. Implementations must be immutable and
/// callable concurrently.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

// ---------------------------------------------------------------------
// Templates

pub const TPL_QUERY_GEN: &str = include_str!("../assets/templates/query_gen.txt");
pub const TPL_RERANK: &str = include_str!("../assets/templates/rerank.txt");
pub const TPL_TRIPLET_TASK: &str = include_str!("../assets/templates/triplet_task.txt");
pub const TPL_TRIPLET_GEN: &str = include_str!("../assets/templates/triplet_gen.txt");

pub fn template_hash(template: &str) -> String {
    let mut h = Sha256::new();
    h.update(template.as_bytes());
    format!("{:x}", h.finalize())
}

/// All shipped templates with their content hashes, for manifests.
pub fn template_hashes() -> Vec<(&'static str, String)> {
    vec![
        ("query_gen", template_hash(TPL_QUERY_GEN)),
        ("rerank", template_hash(TPL_RERANK)),
        ("triplet_task", template_hash(TPL_TRIPLET_TASK)),
        ("triplet_gen", template_hash(TPL_TRIPLET_GEN)),
    ]
}

/// Substitute every "{{key}}" placeholder. Unfilled placeholders are a
/// caller bug and rejected.
pub fn render(template: &str, fields: &[(&str, &str)]) -> Result<String> {
    let mut out = template.to_string();
    for (key, value) in fields {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    if out.contains("{{") {
        return Err(Error::invalid(format!(
            "template has unfilled placeholders: {}",
            out.split("{{").nth(1).and_then(|s| s.split("}}").next()).unwrap_or("?")
        )));
    }
    Ok(out)
}

/// Candidate block of the rerank prompt: "[1] text" per line.
pub fn format_candidates(candidates: &[String]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[{}] {}", i + 1, c.replace('\n', " ")))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------
// Ranking parse + repair

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankParse {
    /// 1-based candidate indices; always a permutation of 1..=k.
    pub order: Vec<usize>,
    pub repairs: Vec<String>,
    /// No recognizable index at all: the caller should treat the reply
    /// as a failure even though a default order is provided.
    pub unrepairable: bool,
}

/// Extract bracketed integers in order, drop out-of-range and duplicate
/// indices (keep-first), then append whatever is missing in ascending
/// order. Total: every input yields a permutation of 1..=k.
pub fn parse_ranking(reply: &str, k: usize) -> RankParse {
    let mut raw: Vec<usize> = Vec::new();
    let bytes = reply.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b']' {
                if let Ok(v) = reply[i + 1..j].parse::<usize>() {
                    raw.push(v);
                }
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }

    let mut repairs = Vec::new();
    let unrepairable = raw.is_empty();
    if unrepairable {
        repairs.push("no recognizable indices; default order used".into());
    }
    let mut seen = vec![false; k + 1];
    let mut order = Vec::with_capacity(k);
    for v in raw {
        if v < 1 || v > k {
            repairs.push(format!("{v} out of range 1..{k}, dropped"));
            continue;
        }
        if seen[v] {
            repairs.push(format!("duplicate {v} dropped (keep-first)"));
            continue;
        }
        seen[v] = true;
        order.push(v);
    }
    let missing: Vec<usize> = (1..=k).filter(|&v| !seen[v]).collect();
    if !missing.is_empty() && !unrepairable {
        repairs.push(format!("appended {} missing indices", missing.len()));
    }
    order.extend(missing);
    RankParse {
        order,
        repairs,
        unrepairable,
    }
}

// ---------------------------------------------------------------------
// High-level operations over any ChatClient

/// Ask for one search query for a document. Multi-line replies keep the
/// first nonempty line; an empty generation is a failure.
pub fn generate_query(client: &dyn ChatClient, document: &str) -> Result<String> {
    if document.trim().is_empty() {
        return Err(Error::invalid("generate_query: empty document"));
    }
    let prompt = render(TPL_QUERY_GEN, &[("document", document)])?;
    let reply = client.complete(&prompt)?;
    reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::Client("query generation returned empty text".into()))
}

/// Listwise rerank of 2..=20 candidates. The reply is parsed and
/// repaired; a reply with zero recognizable indices is surfaced as an
/// error so the caller can drop the example.
pub fn listwise_rerank(
    client: &dyn ChatClient,
    query: &str,
    candidates: &[String],
) -> Result<RankParse> {
    let k = candidates.len();
    if !(2..=20).contains(&k) {
        return Err(Error::invalid(format!(
            "rerank needs 2..=20 candidates, got {k}"
        )));
    }
    let block = format_candidates(candidates);
    let prompt = render(TPL_RERANK, &[("query", query), ("candidates", &block)])?;
    let reply = client.complete(&prompt)?;
    let parsed = parse_ranking(&reply, k);
    if parsed.unrepairable {
        return Err(Error::Client(format!(
            "unrepairable rerank reply: {reply:?}"
        )));
    }
    Ok(parsed)
}

// ---------------------------------------------------------------------
// Deterministic mock

/// Pure mock: the reply is a function of (prompt, seed) only. It
/// recognizes each shipped template by its marker lines.
pub struct MockClient {
    pub seed: u64,
}

fn extract_between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text[s..].find(end)? + s;
    Some(text[s..e].trim())
}

fn extract_line<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(str::trim)
}

fn token_overlap(query: &str, candidate: &str) -> usize {
    let qset: std::collections::BTreeSet<String> = query
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect();
    let cset: std::collections::BTreeSet<String> = candidate
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect();
    qset.intersection(&cset).count()
}

impl MockClient {
    fn mock_query(document: &str) -> String {
        let first = crate::augment::split_sentences(document)
            .into_iter()
            .next()
            .unwrap_or_else(|| document.to_string());
        first
            .split_whitespace()
            .take(6)
            .map(|w| {
                w.trim_matches(|c: char| c.is_ascii_punctuation())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn mock_rerank(prompt: &str) -> Result<String> {
        let query = extract_line(prompt, "QUERY:")
            .ok_or_else(|| Error::Client("mock: rerank prompt without QUERY line".into()))?;
        let block = extract_between(prompt, "CANDIDATES START", "CANDIDATES END")
            .ok_or_else(|| Error::Client("mock: rerank prompt without candidate block".into()))?;
        let mut entries: Vec<(usize, usize)> = Vec::new(); // (index, overlap)
        for line in block.lines() {
            let line = line.trim();
            let Some(rest) = line.strip_prefix('[') else { continue };
            let Some((num, text)) = rest.split_once(']') else { continue };
            let Ok(idx) = num.parse::<usize>() else { continue };
            entries.push((idx, token_overlap(query, text)));
        }
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(entries
            .iter()
            .map(|(i, _)| format!("[{i}]"))
            .collect::<Vec<_>>()
            .join(" > "))
    }

    fn mock_triplet_task(&self, prompt: &str) -> Result<String> {
        let task_seed: u64 = extract_line(prompt, "TASK SEED:")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Client("mock: task prompt without TASK SEED".into()))?;
        let mut rng = rng_for(self.seed, &format!("mock/triplet-task/{task_seed}"));
        let subject = rng.gen_range(0..1000u32);
        let aspect = rng.gen_range(0..100u32);
        Ok(format!(
            "task: find passages that explain subject{subject} with respect to aspect{aspect}\n\
             query: subject{subject} aspect{aspect} explanation"
        ))
    }

    fn mock_triplet_gen(&self, prompt: &str) -> Result<String> {
        let query = extract_line(prompt, "QUERY:")
            .ok_or_else(|| Error::Client("mock: generation prompt without QUERY line".into()))?;
        let mut rng = rng_for(self.seed, &format!("mock/triplet-gen/{query}"));
        let detail = rng.gen_range(0..1000u32);
        let first = query.split_whitespace().next().unwrap_or("topic");
        Ok(format!(
            "positive: {query} is covered here in depth, including detail{detail} and a worked example.\n\
             negative: {first} is mentioned in passing, but this passage is about something else entirely."
        ))
    }
}

impl ChatClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.contains("DOCUMENT START") {
            let doc = extract_between(prompt, "DOCUMENT START", "DOCUMENT END")
                .ok_or_else(|| Error::Client("mock: malformed query-gen prompt".into()))?;
            Ok(Self::mock_query(doc))
        } else if prompt.contains("CANDIDATES START") {
            Self::mock_rerank(prompt)
        } else if prompt.contains("TASK SEED:") {
            self.mock_triplet_task(prompt)
        } else if prompt.contains("QUERY:") {
            self.mock_triplet_gen(prompt)
        } else {
            Err(Error::Client("mock: unrecognized prompt".into()))
        }
    }
}

// ---------------------------------------------------------------------
// Minimal HTTP client

/// POSTs {endpoint}/chat/completions with a JSON chat body and reads the
/// first choice's message content. Plain HTTP only.
pub struct HttpClient {
    pub cfg: ClientConfig,
}

fn parse_host(endpoint: &str) -> Result<(String, String)> {
    let rest = endpoint
        .strip_prefix("http://")
        .ok_or_else(|| Error::Config(format!("endpoint {endpoint:?} must be http://")))?;
    let (host, path) = match rest.find('/') {
        Some(i) => (&rest[..i], rest[i..].trim_end_matches('/')),
        None => (rest, ""),
    };
    Ok((host.to_string(), format!("{path}/chat/completions")))
}

impl HttpClient {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        cfg.validate()?;
        parse_host(&cfg.endpoint)?;
        Ok(HttpClient { cfg })
    }

    fn attempt(&self, prompt: &str) -> Result<String> {
        let (host, path) = parse_host(&self.cfg.endpoint)?;
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
        })
        .to_string();
        let timeout = Duration::from_secs_f64(self.cfg.timeout_secs);
        let stream = TcpStream::connect(&host)
            .map_err(|e| Error::Client(format!("connect {host}: {e}")))?;
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_write_timeout(Some(timeout)))
            .map_err(|e| Error::Client(format!("socket setup: {e}")))?;
        let mut stream = stream;
        let request = format!(
            "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| Error::Client(format!("send: {e}")))?;
        let mut response = Vec::new();
        stream
            .read_to_end(&mut response)
            .map_err(|e| Error::Client(format!("receive: {e}")))?;
        let response = String::from_utf8_lossy(&response);
        let (head, resp_body) = response
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::Client("malformed HTTP response".into()))?;
        let status = head
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap_or("");
        if status != "200" {
            return Err(Error::Client(format!("HTTP status {status}")));
        }
        let parsed: serde_json::Value = serde_json::from_str(resp_body.trim())
            .map_err(|e| Error::Client(format!("response body is not JSON: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Client("response has no choices[0].message.content".into()))
    }

    /// One call with retries: exactly max_retries + 1 attempts on
    /// persistent failure, with the timestamp of each attempt.
    pub fn complete_logged(&self, prompt: &str) -> (Vec<SystemTime>, Result<String>) {
        let mut attempts = Vec::new();
        let mut last_err = None;
        for _ in 0..=self.cfg.max_retries {
            attempts.push(SystemTime::now());
            match self.attempt(prompt) {
                Ok(reply) => return (attempts, Ok(reply)),
                Err(e) => last_err = Some(e),
            }
        }
        let n = attempts.len();
        let e = last_err.expect("at least one attempt");
        (attempts, Err(Error::Client(format!("{e} (after {n} attempts)"))))
    }
}

impl ChatClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.complete_logged(prompt).1
    }
}

// ---------------------------------------------------------------------
// Loopback mock server

/// In-process HTTP server that answers chat completions with the mock
/// client's reply. For integration tests and offline pipelines.
pub struct MockServer {
    pub addr: String,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl MockServer {
    pub fn spawn(seed: u64) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")
            .map_err(|e| Error::Client(format!("bind loopback: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::Client(format!("local addr: {e}")))?
            .to_string();
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Client(format!("nonblocking: {e}")))?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let handle = std::thread::spawn(move || {
            let mock = MockClient { seed };
            while !stop2.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = serve_one(stream, &mock);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(MockServer {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(mut stream: TcpStream, mock: &MockClient) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let (head_end, content_length) = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            let head = String::from_utf8_lossy(&buf[..pos]);
            let len = head
                .lines()
                .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().ok()))
                .flatten()
                .unwrap_or(0);
            break (pos + 4, len);
        }
    };
    while buf.len() < head_end + content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body = String::from_utf8_lossy(&buf[head_end..]);
    let reply_body = match serde_json::from_str::<serde_json::Value>(&body)
        .ok()
        .and_then(|v| {
            v["messages"][0]["content"]
                .as_str()
                .map(|p| mock.complete(p))
        }) {
        Some(Ok(content)) => (
            "200 OK",
            json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
                .to_string(),
        ),
        Some(Err(e)) => ("400 Bad Request", json!({"error": e.to_string()}).to_string()),
        None => ("400 Bad Request", json!({"error": "bad request"}).to_string()),
    };
    let response = format!(
        "HTTP/1.1 {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply_body.0,
        reply_body.1.len(),
        reply_body.1
    );
    stream.write_all(response.as_bytes())
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}
