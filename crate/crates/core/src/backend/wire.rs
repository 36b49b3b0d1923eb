//! Newline-delimited JSON protocol for out-of-process segmentation servers.
//!
//! Request:  `{"id": str, "image": str, "points": [[u, v, 1|0], ...]}`
//! Response: `{"id": str, "masks": [rle, ...], "scores": [f, ...]}`, or
//! `{"id": str, "error": str}` when the server rejects a request.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::rle::Rle;
use super::{BackendError, PromptPoint, SegmentationBackend, SegmentationRequest, SegmentationResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub id: String,
    pub image: String,
    pub points: Vec<[i64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<Rle>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireRequest {
    pub fn from_request(req: &SegmentationRequest) -> Self {
        Self {
            id: req.request_id.clone(),
            image: req.image_ref.clone(),
            points: req.points.iter().map(|p| [p.u, p.v, p.positive as i64]).collect(),
        }
    }

    pub fn into_request(self, size: (usize, usize)) -> Result<SegmentationRequest, BackendError> {
        let points = self
            .points
            .iter()
            .map(|&[u, v, flag]| match flag {
                0 | 1 => Ok(PromptPoint { u, v, positive: flag == 1 }),
                _ => Err(BackendError::Protocol(format!("point polarity must be 0 or 1, got {flag}"))),
            })
            .collect::<Result<_, _>>()?;
        Ok(SegmentationRequest { request_id: self.id, image_ref: self.image, size, points })
    }
}

impl WireResponse {
    pub fn from_result(id: &str, result: &SegmentationResult) -> Self {
        Self {
            id: id.to_string(),
            masks: Some(result.masks.iter().map(Rle::encode).collect()),
            scores: Some(result.scores.clone()),
            error: None,
        }
    }

    pub fn error(id: &str, msg: impl Into<String>) -> Self {
        Self { id: id.to_string(), masks: None, scores: None, error: Some(msg.into()) }
    }

    /// Decodes and validates against the requested image size.
    pub fn into_result(self, size: (usize, usize)) -> Result<SegmentationResult, BackendError> {
        if let Some(e) = self.error {
            return Err(BackendError::Protocol(format!("server rejected {}: {e}", self.id)));
        }
        let (Some(rles), Some(scores)) = (self.masks, self.scores) else {
            return Err(BackendError::Protocol(format!("response {} lacks masks or scores", self.id)));
        };
        let masks = rles
            .iter()
            .map(|r| {
                if r.size != [size.1, size.0] {
                    return Err(BackendError::Protocol(format!(
                        "mask size {:?} does not match image [{}, {}]",
                        r.size, size.1, size.0
                    )));
                }
                r.decode()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let result = SegmentationResult { masks, scores };
        result.validate(size)?;
        Ok(result)
    }
}

/// Parses one response line; any malformation is a protocol error.
pub fn parse_response(line: &str) -> Result<WireResponse, BackendError> {
    serde_json::from_str(line.trim_end()).map_err(|e| BackendError::Protocol(format!("malformed response: {e}")))
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    pending: HashMap<String, WireResponse>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client side of the wire protocol. Calls are serialized over one
/// connection; responses are matched to requests by id.
pub struct WireClient {
    conn: Mutex<Connection>,
}

impl WireClient {
    pub fn from_streams(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self {
            conn: Mutex::new(Connection {
                reader: Box::new(reader),
                writer: Box::new(writer),
                pending: HashMap::new(),
                child: None,
            }),
        }
    }

    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, BackendError> {
        let stream = TcpStream::connect(addr).map_err(|e| BackendError::Unavailable(format!("{addr}: {e}")))?;
        stream.set_read_timeout(Some(timeout)).map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let reader = stream.try_clone().map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self::from_streams(BufReader::new(reader), stream))
    }

    /// Spawns `program args...` and speaks the protocol over its stdio.
    pub fn spawn(program: &str, args: &[&str]) -> Result<Self, BackendError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::Unavailable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::from_streams(BufReader::new(stdout), stdin);
        client.conn.lock().expect("fresh mutex").child = Some(child);
        Ok(client)
    }

    /// `stdio:<command line>`, `tcp://host:port` or bare `host:port`.
    pub fn from_endpoint(endpoint: &str, timeout: Duration) -> Result<Self, BackendError> {
        if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace();
            let program = parts.next().ok_or_else(|| BackendError::Unavailable("empty stdio command".into()))?;
            let args: Vec<&str> = parts.collect();
            Self::spawn(program, &args)
        } else {
            Self::connect_tcp(endpoint.strip_prefix("tcp://").unwrap_or(endpoint), timeout)
        }
    }
}

impl SegmentationBackend for WireClient {
    fn segment(&self, req: &SegmentationRequest) -> Result<SegmentationResult, BackendError> {
        req.validate()?;
        let mut conn = self.conn.lock().map_err(|_| BackendError::Unavailable("connection poisoned".into()))?;
        if let Some(resp) = conn.pending.remove(&req.request_id) {
            return resp.into_result(req.size);
        }
        let mut line = serde_json::to_string(&WireRequest::from_request(req))
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| BackendError::Unavailable(format!("write failed: {e}")))?;
        loop {
            let mut buf = String::new();
            let n =
                conn.reader.read_line(&mut buf).map_err(|e| BackendError::Unavailable(format!("read failed: {e}")))?;
            if n == 0 {
                return Err(BackendError::Unavailable("connection closed".into()));
            }
            if buf.trim().is_empty() {
                continue;
            }
            let resp = parse_response(&buf)?;
            if resp.id == req.request_id {
                return resp.into_result(req.size);
            }
            conn.pending.insert(resp.id.clone(), resp);
        }
    }
}

/// Serves the protocol on one connection with any backend until EOF.
/// `size_of` resolves an image reference to its `(width, height)`.
pub fn serve<B: SegmentationBackend + ?Sized>(
    backend: &B,
    reader: impl BufRead,
    mut writer: impl Write,
    size_of: impl Fn(&str) -> Option<(usize, usize)>,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<WireRequest>(&line) {
            Err(e) => WireResponse::error("", format!("malformed request: {e}")),
            Ok(wreq) => {
                let id = wreq.id.clone();
                match size_of(&wreq.image) {
                    None => WireResponse::error(&id, format!("unknown image {}", wreq.image)),
                    Some(size) => match wreq.into_request(size).and_then(|r| backend.segment(&r)) {
                        Ok(res) => WireResponse::from_result(&id, &res),
                        Err(e) => WireResponse::error(&id, e.to_string()),
                    },
                }
            }
        };
        let mut out = serde_json::to_string(&resp).map_err(std::io::Error::other)?;
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}
