//! Line-delimited JSON query service over TCP.
//!
//! Each request line is `{"id", "tokens", "mode"}`; each response line is
//! `{"id", "tokens", "topk", "logprob"}` or `{"id", "error"}`. Connections are
//! served on their own threads, and the n-th accepted connection draws from
//! the victim's session-`n` generator, so a remote session reproduces the
//! in-process [`VictimModel::session`] with the same index.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AccessMode, QueryRecord, VictimError, VictimModel, VictimOracle};
use crate::lm::Token;

/// Lines longer than this are rejected without being parsed.
pub const MAX_LINE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: Value,
    pub tokens: Vec<Token>,
    #[serde(default)]
    pub mode: AccessMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Error {
        id: Value,
        error: String,
    },
    Record {
        id: Value,
        tokens: Vec<Token>,
        topk: Option<Vec<Vec<(Token, f64)>>>,
        logprob: Option<f64>,
    },
}

impl WireResponse {
    pub fn from_record(id: Value, rec: &QueryRecord) -> Self {
        Self::Record {
            id,
            tokens: rec.response.clone(),
            topk: rec.topk.clone(),
            logprob: rec.logprob,
        }
    }

    pub fn id(&self) -> &Value {
        match self {
            Self::Error { id, .. } | Self::Record { id, .. } => id,
        }
    }

    /// Rebuilds the record for `query`, or the remote error message.
    pub fn into_record(self, query: &[Token]) -> Result<QueryRecord, VictimError> {
        match self {
            Self::Error { error, .. } => Err(VictimError::Remote(error)),
            Self::Record {
                tokens,
                topk,
                logprob,
                ..
            } => Ok(QueryRecord {
                query: query.to_vec(),
                response: tokens,
                topk,
                logprob,
            }),
        }
    }
}

/// Parses one request line. On failure returns the error response to send,
/// echoing the request id when one could be recovered.
pub fn decode_request(line: &[u8]) -> Result<WireRequest, WireResponse> {
    let value: Value = serde_json::from_slice(line).map_err(|e| WireResponse::Error {
        id: Value::Null,
        error: format!("malformed JSON: {e}"),
    })?;
    let id = value.get("id").cloned().unwrap_or(Value::Null);
    serde_json::from_value(value).map_err(|e| WireResponse::Error {
        id,
        error: format!("invalid request: {e}"),
    })
}

/// Serializes a response as a single line, without the trailing newline.
pub fn encode_response(resp: &WireResponse) -> String {
    serde_json::to_string(resp).expect("wire responses always serialize")
}

/// Handle to a running server. Dropping it stops accepting connections.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the accept loop and waits for it. Open connections finish on
    /// their own when clients disconnect.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    fn stop_accepting(&mut self) {
        if let Some(h) = self.acceptor.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept call.
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

/// Binds `addr` and serves `victim` until the handle is shut down.
pub fn serve<A: ToSocketAddrs>(victim: Arc<VictimModel>, addr: A) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let acceptor = std::thread::spawn(move || {
        let mut session = 0u64;
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let victim = Arc::clone(&victim);
            let id = session;
            session += 1;
            std::thread::spawn(move || {
                if let Err(e) = handle_connection(&victim, stream, id) {
                    log::debug!("session {id} closed: {e}");
                }
            });
        }
    });
    log::info!("victim listening on {local}");
    Ok(ServerHandle {
        addr: local,
        stop,
        acceptor: Some(acceptor),
    })
}

fn handle_connection(victim: &VictimModel, stream: TcpStream, session: u64) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut oracle = victim.session(session);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = (&mut reader)
            .take(MAX_LINE_BYTES as u64 + 1)
            .read_until(b'\n', &mut buf)?;
        if n == 0 {
            return Ok(());
        }
        let resp = if buf.last() != Some(&b'\n') && buf.len() > MAX_LINE_BYTES {
            skip_line(&mut reader)?;
            WireResponse::Error {
                id: Value::Null,
                error: format!("line exceeds {MAX_LINE_BYTES} bytes"),
            }
        } else {
            let line = trim_line(&buf);
            if line.is_empty() {
                continue;
            }
            match decode_request(line) {
                Ok(req) => match oracle.query(&req.tokens, req.mode) {
                    Ok(rec) => WireResponse::from_record(req.id, &rec),
                    Err(e) => WireResponse::Error {
                        id: req.id,
                        error: e.to_string(),
                    },
                },
                Err(resp) => resp,
            }
        };
        let mut line = encode_response(&resp);
        line.push('\n');
        writer.write_all(line.as_bytes())?;
        writer.flush()?;
    }
}

fn trim_line(buf: &[u8]) -> &[u8] {
    let mut end = buf.len();
    while end > 0 && matches!(buf[end - 1], b'\n' | b'\r') {
        end -= 1;
    }
    &buf[..end]
}

fn skip_line<R: BufRead>(reader: &mut R) -> io::Result<()> {
    let mut sink = Vec::new();
    loop {
        sink.clear();
        let n = reader
            .take(MAX_LINE_BYTES as u64)
            .read_until(b'\n', &mut sink)?;
        if n == 0 || sink.last() == Some(&b'\n') {
            return Ok(());
        }
    }
}

/// Client side of the socket protocol.
pub struct RemoteVictim {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl RemoteVictim {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, VictimError> {
        let stream = TcpStream::connect(addr).map_err(|e| VictimError::Transport(e.to_string()))?;
        let writer = stream
            .try_clone()
            .map_err(|e| VictimError::Transport(e.to_string()))?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
            next_id: 0,
        })
    }

    /// Sends a raw line and reads one response line.
    pub fn round_trip(&mut self, line: &str) -> Result<WireResponse, VictimError> {
        let transport = |e: io::Error| VictimError::Transport(e.to_string());
        self.writer.write_all(line.as_bytes()).map_err(transport)?;
        self.writer.write_all(b"\n").map_err(transport)?;
        self.writer.flush().map_err(transport)?;
        let mut buf = String::new();
        let n = self.reader.read_line(&mut buf).map_err(transport)?;
        if n == 0 {
            return Err(VictimError::Transport("connection closed by victim".into()));
        }
        serde_json::from_str(buf.trim_end()).map_err(|e| VictimError::Protocol(e.to_string()))
    }
}

impl VictimOracle for RemoteVictim {
    fn query(&mut self, query: &[Token], mode: AccessMode) -> Result<QueryRecord, VictimError> {
        let id = self.next_id;
        self.next_id += 1;
        let req = WireRequest {
            id: Value::from(id),
            tokens: query.to_vec(),
            mode,
        };
        let line = serde_json::to_string(&req).map_err(|e| VictimError::Protocol(e.to_string()))?;
        let resp = self.round_trip(&line)?;
        if resp.id() != &req.id {
            return Err(VictimError::Protocol(format!(
                "response id {} does not match request id {id}",
                resp.id()
            )));
        }
        resp.into_record(query)
    }
}
