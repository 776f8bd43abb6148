//! Newline-delimited JSON protocol for remote scorers.
//!
//! ```text
//! server -> client  {"op":"hello","protocol":1,"vocab_size":V,"bos_id":b,"eos_id":e,"newline_id":n}
//! client -> server  {"op":"logprobs","req_id":7,"head":"cond","prefix":[0,5],"conditioning":[0.0,1.0]}
//! server -> client  {"req_id":7,"logprobs":[-0.1,"-inf",...]}
//!                   {"req_id":7,"error":"..."}
//! ```
//!
//! Doubles are written with shortest round-trip formatting; `-inf` travels as
//! the string `"-inf"`. One request is in flight per connection.
//!
//! [`LoopbackServer`] serves any in-process [`Scorer`] over this protocol. It
//! exists for tests and demos; production servers wrap real models.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Conditioning, TokenId, Vocabulary};

use super::{LanguageModel, LogProbVector, Scorer};

pub const PROTOCOL_VERSION: u32 = 1;

/// A log-probability on the wire: a JSON number, or `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireF64(pub f64);

impl Serialize for WireF64 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for WireF64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = WireF64;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<WireF64, E> {
                Ok(WireF64(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<WireF64, E> {
                Ok(WireF64(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<WireF64, E> {
                Ok(WireF64(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<WireF64, E> {
                if v == "-inf" {
                    Ok(WireF64(f64::NEG_INFINITY))
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub op: String,
    pub protocol: u32,
    pub vocab_size: usize,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub newline_id: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_connections: Option<u32>,
}

impl Hello {
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        Self {
            op: "hello".into(),
            protocol: PROTOCOL_VERSION,
            vocab_size: vocab.size(),
            bos_id: vocab.bos_id(),
            eos_id: vocab.eos_id(),
            newline_id: vocab.newline_id(),
            max_connections: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireHead {
    Cond,
    Uncond,
    Lm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    pub req_id: u64,
    pub head: WireHead,
    pub prefix: Vec<u64>,
    pub conditioning: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub req_id: u64,
    pub logprobs: Vec<WireF64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub req_id: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Logprobs(Response),
    Error(ErrorResponse),
}

impl Response {
    pub fn new(req_id: u64, logprobs: &LogProbVector) -> Self {
        Self { req_id, logprobs: logprobs.values().iter().map(|&v| WireF64(v)).collect() }
    }
}

/// Serializes a message as one protocol line (newline included).
pub fn to_line<T: Serialize>(msg: &T) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol messages serialize");
    s.push('\n');
    s
}

/// What a server needs to answer requests.
#[derive(Clone)]
pub struct Backend {
    pub scorer: Arc<dyn Scorer>,
    pub lm: Option<Arc<dyn LanguageModel>>,
}

impl Backend {
    pub fn new(scorer: Arc<dyn Scorer>) -> Self {
        Self { scorer, lm: None }
    }

    pub fn with_lm(mut self, lm: Arc<dyn LanguageModel>) -> Self {
        self.lm = Some(lm);
        self
    }

    /// Answers one request line. `None` means the line was unparseable and
    /// the connection should close.
    pub fn answer(&self, line: &str) -> Option<String> {
        let value: serde_json::Value = serde_json::from_str(line).ok()?;
        let req_id = value.get("req_id")?.as_u64()?;
        let fail = |msg: String| Some(to_line(&ErrorResponse { req_id, error: msg }));
        match value.get("head").and_then(|h| h.as_str()) {
            Some("cond" | "uncond" | "lm") => {}
            Some(_) => return fail("unsupported head".into()),
            None => return fail("missing head".into()),
        }
        let request: Request = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => return fail(format!("malformed request: {e}")),
        };
        if request.op != "logprobs" {
            return fail(format!("unsupported op {:?}", request.op));
        }
        let prefix: Vec<TokenId> = match request.prefix.iter().map(|&t| TokenId::try_from(t)).collect() {
            Ok(p) => p,
            Err(_) => return fail("token id out of range".into()),
        };
        let result = match request.head {
            WireHead::Cond => match request.conditioning.map(Conditioning::from_vector) {
                Some(Ok(c)) => self.scorer.conditional_logprobs(&prefix, &c),
                Some(Err(e)) => return fail(e.to_string()),
                None => return fail("cond head requires conditioning".into()),
            },
            WireHead::Uncond => self.scorer.unconditional_logprobs(&prefix),
            WireHead::Lm => match &self.lm {
                Some(lm) => lm.lm_logprobs(&prefix),
                None => return fail("no language model behind this server".into()),
            },
        };
        match result {
            Ok(lp) => Some(to_line(&Response::new(req_id, &lp))),
            Err(e) => fail(e.to_string()),
        }
    }
}

/// Runs one connection: handshake, then request/response until EOF.
pub fn serve_connection(backend: &Backend, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    writer.write_all(to_line(&Hello::for_vocab(backend.scorer.vocab())).as_bytes())?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        match backend.answer(line.trim_end()) {
            Some(reply) => writer.write_all(reply.as_bytes())?,
            None => return Ok(()),
        }
    }
}

/// Threaded in-process server on a local port.
pub struct LoopbackServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl LoopbackServer {
    pub fn spawn(backend: Backend) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", backend)
    }

    pub fn bind(addr: &str, backend: Backend) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let backend = backend.clone();
                std::thread::spawn(move || {
                    let _ = serve_connection(&backend, stream);
                });
            }
        });
        Ok(Self { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits (it only exits after drop).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
