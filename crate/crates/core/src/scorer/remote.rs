use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::corpus::{Conditioning, TokenId, Vocabulary};

use super::wire::{to_line, Hello, Reply, Request, WireHead, PROTOCOL_VERSION};
use super::{check_prefix, LanguageModel, LogProbVector, Scorer, ScorerError};

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("protocol version mismatch: {0}")]
    Version(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("connection closed by the server")]
    Closed,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error for request {req_id}: {message}")]
    Server { req_id: u64, message: String },
    #[error("io: {0}")]
    Io(#[source] std::io::Error),
}

impl From<std::io::Error> for RemoteError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => RemoteError::Timeout,
            _ => RemoteError::Io(e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// Connections opened up front; decode workers pick one by thread index.
    pub connections: usize,
    pub timeout: Duration,
    /// Local vocabulary to check the handshake against. Without one, a
    /// placeholder vocabulary (`<id>` tokens) is built from the handshake.
    pub vocab: Option<Vocabulary>,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self { connections: 1, timeout: Duration::from_secs(10), vocab: None }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn open(addr: &str, timeout: Duration) -> Result<(Self, Hello), RemoteError> {
        let sock =
            addr.to_socket_addrs()?.next().ok_or_else(|| RemoteError::Protocol(format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let mut conn = Connection { reader: BufReader::new(stream), writer };
        let line = conn.read_line()?;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| RemoteError::Version(format!("unreadable handshake: {e}")))?;
        if value.get("op").and_then(|v| v.as_str()) != Some("hello") {
            return Err(RemoteError::Version(format!("expected a hello handshake, got {}", line.trim_end())));
        }
        let hello: Hello =
            serde_json::from_value(value).map_err(|e| RemoteError::Version(format!("bad handshake: {e}")))?;
        if hello.protocol != PROTOCOL_VERSION {
            return Err(RemoteError::Version(format!(
                "server speaks protocol {}, client speaks {PROTOCOL_VERSION}",
                hello.protocol
            )));
        }
        Ok((conn, hello))
    }

    fn read_line(&mut self) -> Result<String, RemoteError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(RemoteError::Closed);
        }
        Ok(line)
    }

    fn exchange(&mut self, request: &Request, vocab_size: usize) -> Result<Vec<f64>, RemoteError> {
        self.writer.write_all(to_line(request).as_bytes())?;
        let line = self.read_line()?;
        let reply: Reply =
            serde_json::from_str(&line).map_err(|e| RemoteError::Protocol(format!("unreadable response: {e}")))?;
        match reply {
            Reply::Error(e) if e.req_id == request.req_id => {
                Err(RemoteError::Server { req_id: e.req_id, message: e.error })
            }
            Reply::Error(e) => Err(RemoteError::Protocol(format!(
                "response req_id {} does not match request {}",
                e.req_id, request.req_id
            ))),
            Reply::Logprobs(r) if r.req_id != request.req_id => Err(RemoteError::Protocol(format!(
                "response req_id {} does not match request {}",
                r.req_id, request.req_id
            ))),
            Reply::Logprobs(r) if r.logprobs.len() != vocab_size => {
                Err(RemoteError::Protocol(format!("expected {vocab_size} log-probabilities, got {}", r.logprobs.len())))
            }
            Reply::Logprobs(r) => Ok(r.logprobs.into_iter().map(|w| w.0).collect()),
        }
    }
}

/// Scorer and language model served over the wire protocol.
pub struct RemoteScorer {
    vocab: Vocabulary,
    hello: Hello,
    connections: Vec<Mutex<Connection>>,
    next_id: AtomicU64,
}

impl RemoteScorer {
    /// Connects, reads the handshake and checks it against `options.vocab`.
    pub fn handshake(addr: &str, options: RemoteOptions) -> Result<Self, RemoteError> {
        let count = options.connections.max(1);
        let mut connections = Vec::with_capacity(count);
        let mut first: Option<Hello> = None;
        for _ in 0..count {
            let (conn, hello) = Connection::open(addr, options.timeout)?;
            if let Some(f) = &first {
                if *f != hello {
                    return Err(RemoteError::Protocol("connections disagree on the handshake".into()));
                }
            }
            first = Some(hello);
            connections.push(Mutex::new(conn));
        }
        let hello = first.expect("at least one connection");
        let vocab = match options.vocab {
            Some(v) => {
                if v.size() != hello.vocab_size {
                    return Err(RemoteError::VocabMismatch(format!(
                        "server vocab_size {} but local vocabulary has {}",
                        hello.vocab_size,
                        v.size()
                    )));
                }
                if (v.bos_id(), v.eos_id(), v.newline_id()) != (hello.bos_id, hello.eos_id, hello.newline_id) {
                    return Err(RemoteError::VocabMismatch("special token ids differ".into()));
                }
                v
            }
            None => {
                let tokens = (0..hello.vocab_size).map(|i| format!("<{i}>")).collect();
                Vocabulary::new(tokens, hello.bos_id, hello.eos_id, hello.newline_id)
                    .map_err(|e| RemoteError::VocabMismatch(e.to_string()))?
            }
        };
        Ok(Self { vocab, hello, connections, next_id: AtomicU64::new(1) })
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    fn request(
        &self,
        head: WireHead,
        prefix: &[TokenId],
        conditioning: Option<&Conditioning>,
    ) -> Result<LogProbVector, ScorerError> {
        let req_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request = Request {
            op: "logprobs".into(),
            req_id,
            head,
            prefix: prefix.iter().map(|&t| t as u64).collect(),
            conditioning: conditioning.map(|c| c.vector().to_vec()),
        };
        let slot = rayon::current_thread_index().unwrap_or(0) % self.connections.len();
        let mut conn = self.connections[slot].lock().unwrap_or_else(|p| p.into_inner());
        let values = conn.exchange(&request, self.vocab.size())?;
        LogProbVector::new(values).map_err(|e| RemoteError::Protocol(e.to_string()).into())
    }
}

impl Scorer for RemoteScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn conditional_logprobs(
        &self,
        prefix: &[TokenId],
        conditioning: &Conditioning,
    ) -> Result<LogProbVector, ScorerError> {
        check_prefix(prefix, &self.vocab)?;
        self.request(WireHead::Cond, prefix, Some(conditioning))
    }

    fn unconditional_logprobs(&self, prefix: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        check_prefix(prefix, &self.vocab)?;
        self.request(WireHead::Uncond, prefix, None)
    }
}

impl LanguageModel for RemoteScorer {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn lm_logprobs(&self, context: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        self.request(WireHead::Lm, context, None)
    }
}
