//! Uniform chat-completion access for model-backed components, with
//! deterministic record/replay cassettes and prompt-template rendering.
//!
//! A cassette maps a request digest to the response text. In `Replay` mode
//! no transport is ever touched, which makes model-backed runs hermetic;
//! `Record` mode captures live responses for later replay.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variables configuring the HTTP transport.
pub const ENV_API_BASE: &str = "EVOLOOP_API_BASE";
pub const ENV_API_KEY: &str = "EVOLOOP_API_KEY";
pub const ENV_MODEL: &str = "EVOLOOP_MODEL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Message {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Message {
        Message { role: Role::User, content: content.into() }
    }
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_chars: usize,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_output_chars: 16_000,
        }
    }

    /// Content digest over (model_id, messages, temperature). The output
    /// budget does not participate.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(format!("{:?}", self.temperature).as_bytes());
        for message in &self.messages {
            hasher.update([0u8]);
            hasher.update(match message.role {
                Role::System => b"s",
                Role::User => b"u",
                Role::Assistant => b"a",
            });
            hasher.update((message.content.len() as u64).to_be_bytes());
            hasher.update(message.content.as_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{:02x}", b));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    Record,
    Replay,
    Passthrough,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("CassetteMiss: no recorded response for digest {0}")]
    CassetteMiss(String),
    #[error("TransportError: {0}")]
    Transport(String),
    #[error("BudgetExceeded: response of {len} chars exceeds max_output_chars {max}")]
    BudgetExceeded { len: usize, max: usize },
    #[error("UnboundSlot: template slot {{{{{0}}}}} has no binding")]
    UnboundSlot(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("ParseError: cassette line {0}: {1}")]
    CassetteParse(usize, String),
}

/// Something that can carry a chat request to a live backend.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

/// Transport used in replay mode: any call is a hermeticity violation.
#[derive(Debug, Default)]
pub struct NullTransport;

impl Transport for NullTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        Err(GatewayError::Transport(format!(
            "replay mode attempted a live call (digest {})",
            request.digest()
        )))
    }
}

/// HTTP chat-completion transport configured from environment variables.
pub struct HttpTransport {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn from_env() -> Result<HttpTransport, GatewayError> {
        let base_url = std::env::var(ENV_API_BASE).map_err(|_| {
            GatewayError::Transport(format!("{ENV_API_BASE} is not set"))
        })?;
        Ok(HttpTransport {
            base_url,
            api_key: std::env::var(ENV_API_KEY).ok(),
            client: reqwest::blocking::Client::new(),
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        #[derive(Serialize)]
        struct WireMessage<'a> {
            role: &'a str,
            content: &'a str,
        }
        #[derive(Serialize)]
        struct WireRequest<'a> {
            model: &'a str,
            messages: Vec<WireMessage<'a>>,
            temperature: f64,
        }
        let body = WireRequest {
            model: &request.model_id,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        Role::System => "system",
                        Role::User => "user",
                        Role::Assistant => "assistant",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
        };
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let response = req
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(GatewayError::Transport(format!(
                "HTTP {status} from {url}"
            )));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                GatewayError::Transport("response missing choices[0].message.content".to_string())
            })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteLine {
    digest: String,
    request: ChatRequest,
    response: String,
}

/// A content-addressed store of request/response pairs.
pub struct Cassette {
    mode: CassetteMode,
    entries: Mutex<BTreeMap<String, String>>,
    // Record mode appends each new entry to this file as it is captured.
    record_path: Option<PathBuf>,
}

impl Cassette {
    pub fn in_memory(mode: CassetteMode) -> Cassette {
        Cassette {
            mode,
            entries: Mutex::new(BTreeMap::new()),
            record_path: None,
        }
    }

    /// Opens a cassette backed by a JSONL file. In `Record` mode new
    /// entries are appended to the file; in `Replay` mode the file must
    /// already exist.
    pub fn open(path: &Path, mode: CassetteMode) -> Result<Cassette, GatewayError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let raw = std::fs::read_to_string(path)?;
            for (lineno, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: CassetteLine = serde_json::from_str(line)
                    .map_err(|e| GatewayError::CassetteParse(lineno + 1, e.to_string()))?;
                entries.insert(parsed.digest, parsed.response);
            }
        } else if mode == CassetteMode::Replay {
            return Err(GatewayError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("cassette {} not found", path.display()),
            )));
        }
        Ok(Cassette {
            mode,
            entries: Mutex::new(entries),
            record_path: (mode == CassetteMode::Record).then(|| path.to_path_buf()),
        })
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn store(&self, request: &ChatRequest, digest: &str, response: &str) -> Result<(), GatewayError> {
        let mut entries = self.entries.lock().unwrap();
        let fresh = entries
            .insert(digest.to_string(), response.to_string())
            .is_none();
        if fresh {
            if let Some(path) = &self.record_path {
                let line = CassetteLine {
                    digest: digest.to_string(),
                    request: request.clone(),
                    response: response.to_string(),
                };
                let mut file = OpenOptions::new().create(true).append(true).open(path)?;
                serde_json::to_writer(&mut file, &line)
                    .map_err(|e| GatewayError::Transport(e.to_string()))?;
                file.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Completes a chat request through the cassette.
///
/// `Record` calls the transport and stores the response; `Replay` serves
/// only stored responses and never touches the transport; `Passthrough`
/// calls the transport without storing anything.
pub fn complete(
    request: &ChatRequest,
    cassette: &Cassette,
    transport: &dyn Transport,
) -> Result<String, GatewayError> {
    let digest = request.digest();
    let response = match cassette.mode {
        CassetteMode::Replay => {
            let entries = cassette.entries.lock().unwrap();
            entries
                .get(&digest)
                .cloned()
                .ok_or(GatewayError::CassetteMiss(digest))?
        }
        CassetteMode::Record => {
            let cached = cassette.entries.lock().unwrap().get(&digest).cloned();
            match cached {
                Some(response) => response,
                None => {
                    let response = transport.send(request)?;
                    cassette.store(request, &digest, &response)?;
                    response
                }
            }
        }
        CassetteMode::Passthrough => transport.send(request)?,
    };
    if response.len() > request.max_output_chars {
        return Err(GatewayError::BudgetExceeded {
            len: response.len(),
            max: request.max_output_chars,
        });
    }
    Ok(response)
}

/// A rendered template plus any bindings that were never used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub unused_bindings: Vec<String>,
}

/// Substitutes `{{slot}}` markers with their bindings in a single pass.
///
/// Markers introduced by a binding's own content are inserted literally and
/// never re-expanded. Unbound slots are an error; unused bindings are only
/// reported back.
pub fn render_template(
    template: &str,
    bindings: &BTreeMap<String, String>,
) -> Result<Rendered, GatewayError> {
    let mut out = String::with_capacity(template.len());
    let mut used: Vec<&str> = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let slot = &after[..end];
                let value = bindings
                    .get(slot)
                    .ok_or_else(|| GatewayError::UnboundSlot(slot.to_string()))?;
                out.push_str(value);
                used.push(slot);
                rest = &after[end + 2..];
            }
            None => {
                // Unterminated marker: treat the remainder as literal text.
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    let unused_bindings = bindings
        .keys()
        .filter(|k| !used.contains(&k.as_str()))
        .cloned()
        .collect();
    Ok(Rendered {
        text: out,
        unused_bindings,
    })
}

impl fmt::Display for CassetteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CassetteMode::Record => "record",
            CassetteMode::Replay => "replay",
            CassetteMode::Passthrough => "passthrough",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct CountingTransport {
        calls: AtomicUsize,
        reply: String,
    }

    impl CountingTransport {
        fn new(reply: &str) -> CountingTransport {
            CountingTransport {
                calls: AtomicUsize::new(0),
                reply: reply.to_string(),
            }
        }
    }

    impl Transport for CountingTransport {
        fn send(&self, _request: &ChatRequest) -> Result<String, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.reply.clone())
        }
    }

    fn request(content: &str) -> ChatRequest {
        ChatRequest::new(
            "test-model",
            vec![Message::system("spec"), Message::user(content)],
        )
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let transport = CountingTransport::new("recorded response");

        let recorder = Cassette::open(&path, CassetteMode::Record).unwrap();
        let first = complete(&request("q1"), &recorder, &transport).unwrap();
        assert_eq!(first, "recorded response");
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);

        let replayer = Cassette::open(&path, CassetteMode::Replay).unwrap();
        let replayed = complete(&request("q1"), &replayer, &transport).unwrap();
        assert_eq!(replayed, first);
        // Replay never touched the transport again.
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn replay_miss_is_typed() {
        let cassette = Cassette::in_memory(CassetteMode::Replay);
        let transport = CountingTransport::new("x");
        match complete(&request("unseen"), &cassette, &transport) {
            Err(GatewayError::CassetteMiss(_)) => {}
            other => panic!("expected CassetteMiss, got {other:?}"),
        }
        assert_eq!(transport.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn record_mode_reuses_cached_entries() {
        let cassette = Cassette::in_memory(CassetteMode::Record);
        let transport = CountingTransport::new("r");
        complete(&request("q"), &cassette, &transport).unwrap();
        complete(&request("q"), &cassette, &transport).unwrap();
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn digest_sensitive_to_every_field() {
        let base = request("hello");
        let mut other_model = base.clone();
        other_model.model_id = "other".to_string();
        let mut other_temp = base.clone();
        other_temp.temperature = 0.7;
        let mut other_msg = base.clone();
        other_msg.messages[1].content = "hello!".to_string();
        let mut other_budget = base.clone();
        other_budget.max_output_chars = 1;

        assert_ne!(base.digest(), other_model.digest());
        assert_ne!(base.digest(), other_temp.digest());
        assert_ne!(base.digest(), other_msg.digest());
        // The output budget is not part of the digest.
        assert_eq!(base.digest(), other_budget.digest());
        assert_eq!(base.digest(), base.clone().digest());
    }

    #[test]
    fn budget_exceeded() {
        let cassette = Cassette::in_memory(CassetteMode::Passthrough);
        let transport = CountingTransport::new("a very long response");
        let mut req = request("q");
        req.max_output_chars = 4;
        assert!(matches!(
            complete(&req, &cassette, &transport),
            Err(GatewayError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn template_substitution() {
        let bindings = BTreeMap::from([
            ("task".to_string(), "T".to_string()),
            ("trajectory".to_string(), "TRACE".to_string()),
        ]);
        let rendered =
            render_template("task={{task}} trace={{trajectory}}", &bindings).unwrap();
        assert_eq!(rendered.text, "task=T trace=TRACE");
        assert!(rendered.unused_bindings.is_empty());
    }

    #[test]
    fn unbound_slot_rejected() {
        let rendered = render_template("{{missing}}", &BTreeMap::new());
        assert!(matches!(rendered, Err(GatewayError::UnboundSlot(s)) if s == "missing"));
    }

    #[test]
    fn unused_binding_reported() {
        let bindings = BTreeMap::from([
            ("a".to_string(), "1".to_string()),
            ("b".to_string(), "2".to_string()),
        ]);
        let rendered = render_template("{{a}}", &bindings).unwrap();
        assert_eq!(rendered.unused_bindings, vec!["b".to_string()]);
    }

    #[test]
    fn bindings_are_not_re_expanded() {
        let bindings = BTreeMap::from([
            ("a".to_string(), "{{b}}".to_string()),
            ("b".to_string(), "2".to_string()),
        ]);
        let rendered = render_template("{{a}} {{b}}", &bindings).unwrap();
        assert_eq!(rendered.text, "{{b}} 2");
    }
}
