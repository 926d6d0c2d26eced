//! Where detections come from: a file-driven fixture detector, or an external
//! inference process reached over line-delimited JSON (wire protocol v1).
//!
//! Request and response are single JSON objects, each terminated by `\n`:
//!
//! ```text
//! {"v":1,"type":"detect","request_id":"..","camera_id":"..","image_b64":"..","taxonomy_version":".."}
//! {"v":1,"type":"detections","request_id":"..","model_id":"..","latency_ms":12.5,"detections":[{"category":"banana","confidence":0.91,"box":[x1,y1,x2,y2]}]}
//! {"v":1,"type":"error","request_id":"..","message":".."}
//! ```

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, BufReader, Cursor, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nms, BBox, Category, Detection};
use crate::metrics::{parse_detections_csv, DetectionRecord, MetricsError};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.25;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("protocol violation: {message}")]
    Protocol { message: String, payload: String },
    #[error("detector reported an error: {0}")]
    Remote(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid endpoint `{0}`: expected tcp://HOST:PORT or cmd:PROGRAM [ARGS..]")]
    Endpoint(String),
    #[error("fixture: {0}")]
    Fixture(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl DetectorError {
    /// Timeouts and transport failures may succeed on a fresh attempt;
    /// malformed or mismatched responses will not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Timeout(_) | Self::Io(_))
    }

    fn protocol(message: impl Into<String>, payload: &str) -> Self {
        let message = message.into();
        warn!("detector protocol violation: {message}; payload: {payload}");
        Self::Protocol {
            message,
            payload: payload.to_string(),
        }
    }
}

/// Recorded detections keyed by image name, in file order.
#[derive(Debug, Clone, Default)]
pub struct DetectionFixture {
    by_image: HashMap<String, Vec<Detection>>,
}

impl DetectionFixture {
    pub fn from_records(records: Vec<DetectionRecord>) -> Self {
        let mut by_image: HashMap<String, Vec<Detection>> = HashMap::new();
        for r in records {
            by_image.entry(r.image_name).or_default().push(r.detection);
        }
        Self { by_image }
    }

    /// Parse the detections CSV (`image_name,x1,y1,x2,y2,category,confidence`).
    pub fn from_csv(bytes: &[u8]) -> Result<Self, DetectorError> {
        Ok(Self::from_records(parse_detections_csv(bytes)?))
    }

    pub fn contains(&self, image_name: &str) -> bool {
        self.by_image.contains_key(image_name)
    }
}

/// Detections recorded for `image_name`; an image the fixture does not cover
/// yields an empty list and a warning.
pub fn fixture_detect(fixture: &DetectionFixture, image_name: &str) -> Vec<Detection> {
    match fixture.by_image.get(image_name) {
        Some(dets) => dets.clone(),
        None => {
            warn!("fixture has no detections for `{image_name}`");
            Vec::new()
        }
    }
}

/// Drop detections under `min_confidence`, then per-category NMS.
pub fn postprocess(raw: &[Detection], min_confidence: f64, nms_threshold: f64) -> Vec<Detection> {
    let confident: Vec<Detection> = raw
        .iter()
        .filter(|d| d.confidence() >= min_confidence)
        .cloned()
        .collect();
    nms(&confident, nms_threshold)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Bytes(Vec<u8>),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectRequest {
    pub request_id: String,
    pub camera_id: String,
    pub image: ImageSource,
    pub taxonomy_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectResponse {
    pub request_id: String,
    pub detections: Vec<Detection>,
    pub model_id: String,
    pub latency_ms: f64,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    v: u32,
    #[serde(rename = "type")]
    kind: &'a str,
    request_id: &'a str,
    camera_id: &'a str,
    image_b64: String,
    taxonomy_version: &'a str,
}

#[derive(Deserialize)]
struct WireDetection {
    category: String,
    confidence: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
enum WireResponse {
    #[serde(rename = "detections")]
    Detections {
        v: u32,
        request_id: String,
        model_id: String,
        latency_ms: f64,
        detections: Vec<WireDetection>,
    },
    #[serde(rename = "error")]
    Error {
        v: u32,
        request_id: String,
        message: String,
    },
}

/// Encode a request as one protocol line, including the trailing newline.
pub fn encode_request(req: &DetectRequest, image_bytes: &[u8]) -> String {
    let wire = WireRequest {
        v: PROTOCOL_VERSION,
        kind: "detect",
        request_id: &req.request_id,
        camera_id: &req.camera_id,
        image_b64: base64::engine::general_purpose::STANDARD.encode(image_bytes),
        taxonomy_version: &req.taxonomy_version,
    };
    let mut line = serde_json::to_string(&wire).expect("request is always serializable");
    line.push('\n');
    line
}

/// Validate one response line against the request it answers.
///
/// `bounds` is the submitted image size when known; boxes must lie inside it.
pub fn decode_response(
    line: &str,
    request: &DetectRequest,
    bounds: Option<(u32, u32)>,
) -> Result<DetectResponse, DetectorError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let parsed: WireResponse =
        serde_json::from_str(line).map_err(|e| DetectorError::protocol(format!("schema: {e}"), line))?;
    let (v, request_id) = match &parsed {
        WireResponse::Detections { v, request_id, .. } | WireResponse::Error { v, request_id, .. } => {
            (*v, request_id.clone())
        }
    };
    if v != PROTOCOL_VERSION {
        return Err(DetectorError::protocol(format!("unsupported protocol version {v}"), line));
    }
    if request_id != request.request_id {
        return Err(DetectorError::protocol(
            format!("response for `{request_id}` while awaiting `{}`", request.request_id),
            line,
        ));
    }
    match parsed {
        WireResponse::Error { message, .. } => Err(DetectorError::Remote(message)),
        WireResponse::Detections {
            model_id,
            latency_ms,
            detections,
            ..
        } => {
            if !(latency_ms.is_finite() && latency_ms >= 0.0) {
                return Err(DetectorError::protocol(format!("latency_ms {latency_ms} is invalid"), line));
            }
            let mut out = Vec::with_capacity(detections.len());
            for (i, wd) in detections.into_iter().enumerate() {
                let [x1, y1, x2, y2] = wd.bbox;
                let bbox = BBox::new(x1, y1, x2, y2)
                    .map_err(|e| DetectorError::protocol(format!("detection {i}: {e}"), line))?;
                if let Some((w, h)) = bounds {
                    if x1 < 0.0 || y1 < 0.0 || x2 > w as f64 || y2 > h as f64 {
                        return Err(DetectorError::protocol(
                            format!("detection {i}: box {bbox} exceeds the {w}x{h} image"),
                            line,
                        ));
                    }
                }
                let category = Category::new(wd.category)
                    .map_err(|e| DetectorError::protocol(format!("detection {i}: {e}"), line))?;
                let det = Detection::new(bbox, category, wd.confidence)
                    .map_err(|e| DetectorError::protocol(format!("detection {i}: {e}"), line))?
                    .with_camera(request.camera_id.clone());
                out.push(det);
            }
            Ok(DetectResponse {
                request_id,
                detections: out,
                model_id,
                latency_ms,
            })
        }
    }
}

/// How to reach the inference process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// A local socket, `tcp://127.0.0.1:7070`.
    Tcp(String),
    /// A managed subprocess speaking the protocol on stdio, `cmd:python3 sidecar.py`.
    Subprocess { program: String, args: Vec<String> },
}

impl std::str::FromStr for Endpoint {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(DetectorError::Endpoint(s.to_string()));
            }
            return Ok(Self::Tcp(addr.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or_else(|| DetectorError::Endpoint(s.to_string()))?;
            return Ok(Self::Subprocess {
                program,
                args: parts.collect(),
            });
        }
        Err(DetectorError::Endpoint(s.to_string()))
    }
}

enum Connection {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
    },
    Child {
        child: Child,
        stdin: ChildStdin,
        lines: mpsc::Receiver<io::Result<String>>,
    },
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Connection::Child { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> Result<Self, DetectorError> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .parse()
                    .map_err(|_| DetectorError::Endpoint(format!("tcp://{addr}")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout)?;
                stream.set_nodelay(true)?;
                Ok(Connection::Tcp {
                    reader: BufReader::new(stream.try_clone()?),
                    writer: stream,
                })
            }
            Endpoint::Subprocess { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().ok_or_else(|| io::Error::other("child stdin unavailable"))?;
                let stdout = child.stdout.take().ok_or_else(|| io::Error::other("child stdout unavailable"))?;
                let (tx, rx) = mpsc::channel();
                thread::spawn(move || {
                    let mut reader = BufReader::new(stdout);
                    loop {
                        let mut line = String::new();
                        match reader.read_line(&mut line) {
                            Ok(0) => break,
                            Ok(_) => {
                                if tx.send(Ok(line)).is_err() {
                                    break;
                                }
                            }
                            Err(e) => {
                                let _ = tx.send(Err(e));
                                break;
                            }
                        }
                    }
                });
                Ok(Connection::Child {
                    child,
                    stdin,
                    lines: rx,
                })
            }
        }
    }

    fn send(&mut self, line: &str, deadline: Instant) -> Result<(), DetectorError> {
        match self {
            Connection::Tcp { writer, .. } => {
                writer.set_write_timeout(Some(remaining(deadline)?))?;
                writer.write_all(line.as_bytes()).map_err(timeout_or_io)?;
                writer.flush()?;
            }
            Connection::Child { stdin, .. } => {
                stdin.write_all(line.as_bytes())?;
                stdin.flush()?;
            }
        }
        Ok(())
    }

    fn receive(&mut self, deadline: Instant) -> Result<String, DetectorError> {
        match self {
            Connection::Tcp { reader, .. } => {
                reader.get_ref().set_read_timeout(Some(remaining(deadline)?))?;
                let mut line = String::new();
                let n = reader.read_line(&mut line).map_err(timeout_or_io)?;
                if n == 0 || !line.ends_with('\n') {
                    return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "detector closed the connection").into());
                }
                Ok(line)
            }
            Connection::Child { lines, .. } => match lines.recv_timeout(remaining(deadline)?) {
                Ok(line) => {
                    let line = line?;
                    if !line.ends_with('\n') {
                        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "detector exited mid-line").into());
                    }
                    Ok(line)
                }
                Err(mpsc::RecvTimeoutError::Timeout) => Err(DetectorError::Timeout(Duration::ZERO)),
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    Err(io::Error::new(io::ErrorKind::UnexpectedEof, "detector process exited").into())
                }
            },
        }
    }
}

fn remaining(deadline: Instant) -> Result<Duration, DetectorError> {
    let left = deadline.saturating_duration_since(Instant::now());
    if left.is_zero() {
        Err(DetectorError::Timeout(Duration::ZERO))
    } else {
        Ok(left)
    }
}

fn timeout_or_io(e: io::Error) -> DetectorError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => DetectorError::Timeout(Duration::ZERO),
        _ => DetectorError::Io(e),
    }
}

fn image_bounds(bytes: &[u8]) -> Option<(u32, u32)> {
    image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .ok()?
        .into_dimensions()
        .ok()
}

/// One connection to an inference process, one request in flight at a time.
///
/// Any failed call drops the connection, so a late reply to a timed-out
/// request can never be read as the answer to the next one.
pub struct DetectorClient {
    endpoint: Endpoint,
    conn: Option<Connection>,
    issued: HashSet<String>,
}

impl DetectorClient {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            conn: None,
            issued: HashSet::new(),
        }
    }

    pub fn detect(&mut self, req: &DetectRequest, timeout: Duration) -> Result<DetectResponse, DetectorError> {
        if timeout.is_zero() {
            return Err(DetectorError::InvalidRequest("timeout must be positive".into()));
        }
        if self.issued.contains(&req.request_id) {
            return Err(DetectorError::InvalidRequest(format!(
                "request_id `{}` was already used in this session",
                req.request_id
            )));
        }
        let image_bytes = match &req.image {
            ImageSource::Bytes(b) => b.clone(),
            ImageSource::Path(p) => std::fs::read(p)?,
        };
        let line = encode_request(req, &image_bytes);
        let bounds = image_bounds(&image_bytes);

        let deadline = Instant::now() + timeout;
        let result = self.exchange(&line, deadline).and_then(|reply| decode_response(&reply, req, bounds));
        self.issued.insert(req.request_id.clone());
        match result {
            Ok(resp) => Ok(resp),
            Err(DetectorError::Timeout(_)) => {
                self.conn = None;
                Err(DetectorError::Timeout(timeout))
            }
            Err(e) => {
                if !matches!(e, DetectorError::Remote(_)) {
                    self.conn = None;
                }
                Err(e)
            }
        }
    }

    fn exchange(&mut self, line: &str, deadline: Instant) -> Result<String, DetectorError> {
        if self.conn.is_none() {
            self.conn = Some(Connection::open(&self.endpoint, remaining(deadline)?)?);
        }
        let conn = self.conn.as_mut().expect("opened above");
        conn.send(line, deadline)?;
        conn.receive(deadline)
    }
}

/// Send a single request over a fresh connection.
pub fn remote_detect(endpoint: &Endpoint, req: &DetectRequest, timeout: Duration) -> Result<DetectResponse, DetectorError> {
    DetectorClient::new(endpoint.clone()).detect(req, timeout)
}
