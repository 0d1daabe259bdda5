//! JSON wire protocol for external semantics/mask/advisor services.
//!
//! Transport is plain HTTP/1.1 POST with JSON bodies over TCP. Three
//! endpoints make up the protocol (schema version 1):
//!
//! * `POST /semantics`  request `{"image": <base64 PNG>, "prompt": <string>}`
//!   response `{"phrases": [<string>, ...]}`
//! * `POST /mask`       request `{"image": <base64 PNG>, "phrase": <string>}`
//!   response `{"logits": [<f64> row-major], "height": <u32>, "width": <u32>}`
//! * `POST /advisor`    request `{"image": <base64 PNG>, "action": [steer, accel]}`
//!   response `{"verdict": "reasonable" | "unreasonable"}`
//!
//! Failures are reported as a non-200 status with `{"error": <string>}`.
//! [`StubServer`] serves the protocol from the deterministic ground-truth
//! backend so the wire format can be exercised without any model weights.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::{AdvisorVerdict, GroundTruthBackend, OracleBackend, OracleError, Verdict};
use crate::worldsim::{Action, Frame};

#[derive(Serialize, Deserialize)]
pub struct SemanticsRequest {
    pub image: String,
    pub prompt: String,
}

#[derive(Serialize, Deserialize)]
pub struct SemanticsResponse {
    pub phrases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct MaskRequest {
    pub image: String,
    pub phrase: String,
}

#[derive(Serialize, Deserialize)]
pub struct MaskResponse {
    pub logits: Vec<f64>,
    pub height: u32,
    pub width: u32,
}

#[derive(Serialize, Deserialize)]
pub struct AdvisorRequest {
    pub image: String,
    pub action: [f64; 2],
}

#[derive(Serialize, Deserialize)]
pub struct AdvisorResponse {
    pub verdict: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Encode a frame as base64 PNG (lossless, so both sides see identical
/// pixels).
pub fn encode_frame(frame: &Frame) -> String {
    let res = frame.resolution as u32;
    let img = image::RgbImage::from_raw(res, res, frame.data.as_ref().clone())
        .expect("frame buffer matches resolution");
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("png encode");
    BASE64.encode(bytes)
}

/// Decode a base64 PNG into a square frame.
pub fn decode_frame(b64: &str) -> Result<Frame, OracleError> {
    let bytes = BASE64
        .decode(b64)
        .map_err(|e| OracleError::MalformedResponse(format!("bad base64 image: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| OracleError::MalformedResponse(format!("bad png image: {e}")))?
        .to_rgb8();
    if img.width() != img.height() {
        return Err(OracleError::MalformedResponse(format!(
            "image must be square, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(Frame {
        resolution: img.width() as usize,
        data: Arc::new(img.into_raw()),
    })
}

/// Backend that forwards every call to an external service speaking the wire
/// protocol above.
pub struct ExternalBackend {
    pub addr: String,
    pub timeout: Duration,
}

impl ExternalBackend {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        req: &Req,
    ) -> Result<Resp, OracleError> {
        let body = serde_json::to_vec(req).expect("request serialization");
        let (status, resp_body) = http_post(&self.addr, path, &body, self.timeout)?;
        if status != 200 {
            let message = serde_json::from_slice::<ErrorResponse>(&resp_body)
                .map(|e| e.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&resp_body).into_owned());
            return Err(OracleError::Backend { status, message });
        }
        serde_json::from_slice(&resp_body).map_err(|e| {
            OracleError::MalformedResponse(format!(
                "response did not parse: {e}; body: {}",
                String::from_utf8_lossy(&resp_body[..resp_body.len().min(200)])
            ))
        })
    }
}

impl OracleBackend for ExternalBackend {
    fn retrieve_semantics(&self, frame: &Frame, prompt: &str) -> Result<Vec<String>, OracleError> {
        let resp: SemanticsResponse = self.post(
            "/semantics",
            &SemanticsRequest {
                image: encode_frame(frame),
                prompt: prompt.to_string(),
            },
        )?;
        Ok(resp.phrases)
    }

    fn mask_logits(&self, frame: &Frame, phrase: &str) -> Result<Array2<f64>, OracleError> {
        let resp: MaskResponse = self.post(
            "/mask",
            &MaskRequest {
                image: encode_frame(frame),
                phrase: phrase.to_string(),
            },
        )?;
        let (h, w) = (resp.height as usize, resp.width as usize);
        if resp.logits.len() != h * w {
            return Err(OracleError::MalformedResponse(format!(
                "logits length {} does not match {h}x{w}",
                resp.logits.len()
            )));
        }
        if resp.logits.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::MalformedResponse(
                "logits contain non-finite values".into(),
            ));
        }
        Ok(Array2::from_shape_vec((h, w), resp.logits).expect("shape checked"))
    }

    fn advisor_judge(&self, frame: &Frame, action: Action) -> Result<AdvisorVerdict, OracleError> {
        let resp: AdvisorResponse = self.post(
            "/advisor",
            &AdvisorRequest {
                image: encode_frame(frame),
                action: [action.steer, action.accel],
            },
        )?;
        let verdict = match resp.verdict.as_str() {
            "reasonable" => Verdict::Reasonable,
            "unreasonable" => Verdict::Unreasonable,
            other => {
                return Err(OracleError::MalformedResponse(format!(
                    "unknown verdict: {other:?}"
                )))
            }
        };
        Ok(AdvisorVerdict {
            verdict,
            rationale: None,
        })
    }
}

/// Minimal HTTP/1.1 POST. Returns (status, body).
fn http_post(
    addr: &str,
    path: &str,
    body: &[u8],
    timeout: Duration,
) -> Result<(u16, Vec<u8>), OracleError> {
    let sock: SocketAddr = addr
        .parse()
        .map_err(|e| OracleError::MalformedResponse(format!("bad address {addr}: {e}")))?;
    let mut stream = TcpStream::connect_timeout(&sock, timeout).map_err(map_timeout(timeout))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let header = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(header.as_bytes()).map_err(map_timeout(timeout))?;
    stream.write_all(body).map_err(map_timeout(timeout))?;

    let mut reader = BufReader::new(stream);
    let mut status_line = String::new();
    reader
        .read_line(&mut status_line)
        .map_err(map_timeout(timeout))?;
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| OracleError::MalformedResponse(format!("bad status line: {status_line:?}")))?;
    let mut content_length: Option<usize> = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(map_timeout(timeout))?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().ok();
        }
    }
    let mut resp_body = Vec::new();
    match content_length {
        Some(n) => {
            resp_body.resize(n, 0);
            reader
                .read_exact(&mut resp_body)
                .map_err(map_timeout(timeout))?;
        }
        None => {
            reader
                .read_to_end(&mut resp_body)
                .map_err(map_timeout(timeout))?;
        }
    }
    Ok((status, resp_body))
}

fn map_timeout(timeout: Duration) -> impl Fn(std::io::Error) -> OracleError {
    move |e| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
            OracleError::Timeout(timeout.as_millis() as u64)
        }
        _ => OracleError::Io(e),
    }
}

/// Protocol server answering from the ground-truth backend. Intended for
/// wire-format testing and as a template for wrapping real models.
pub struct StubServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    /// Bind and serve on a background thread. Use port 0 for an ephemeral
    /// port; the bound address is available from [`StubServer::addr`].
    pub fn start(bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        stream.set_nonblocking(false).ok();
                        if let Err(e) = handle_connection(stream) {
                            eprintln!("oracle-serve: connection error: {e}");
                        }
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => {
                        eprintln!("oracle-serve: accept error: {e}");
                        break;
                    }
                }
            }
        });
        Ok(Self {
            addr,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.join().ok();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.join().ok();
        }
    }
}

fn handle_connection(stream: TcpStream) -> std::io::Result<()> {
    let mut stream = stream;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = v.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let (status, payload) = if method != "POST" {
        error_payload(405, "only POST is supported")
    } else {
        dispatch(&path, &body)
    };
    let reply = format!(
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        if status == 200 { "OK" } else { "Error" },
        payload.len()
    );
    stream.write_all(reply.as_bytes())?;
    stream.write_all(&payload)?;
    Ok(())
}

fn dispatch(path: &str, body: &[u8]) -> (u16, Vec<u8>) {
    let backend = GroundTruthBackend;
    match path {
        "/semantics" => {
            let req: SemanticsRequest = match serde_json::from_slice(body) {
                Ok(r) => r,
                Err(e) => return error_payload(400, &format!("bad request: {e}")),
            };
            match decode_frame(&req.image)
                .and_then(|f| backend.retrieve_semantics(&f, &req.prompt))
            {
                Ok(phrases) => ok_payload(&SemanticsResponse { phrases }),
                Err(e) => error_payload(400, &e.to_string()),
            }
        }
        "/mask" => {
            let req: MaskRequest = match serde_json::from_slice(body) {
                Ok(r) => r,
                Err(e) => return error_payload(400, &format!("bad request: {e}")),
            };
            match decode_frame(&req.image).and_then(|f| backend.mask_logits(&f, &req.phrase)) {
                Ok(logits) => {
                    let (h, w) = logits.dim();
                    ok_payload(&MaskResponse {
                        logits: logits.into_raw_vec_and_offset().0,
                        height: h as u32,
                        width: w as u32,
                    })
                }
                Err(e) => error_payload(400, &e.to_string()),
            }
        }
        "/advisor" => {
            let req: AdvisorRequest = match serde_json::from_slice(body) {
                Ok(r) => r,
                Err(e) => return error_payload(400, &format!("bad request: {e}")),
            };
            match decode_frame(&req.image).and_then(|f| {
                backend.advisor_judge(&f, Action::new(req.action[0], req.action[1]))
            }) {
                Ok(v) => ok_payload(&AdvisorResponse {
                    verdict: match v.verdict {
                        Verdict::Reasonable => "reasonable".to_string(),
                        Verdict::Unreasonable => "unreasonable".to_string(),
                    },
                }),
                Err(e) => error_payload(400, &e.to_string()),
            }
        }
        other => error_payload(404, &format!("unknown endpoint: {other}")),
    }
}

fn ok_payload<T: Serialize>(value: &T) -> (u16, Vec<u8>) {
    (200, serde_json::to_vec(value).expect("response serialization"))
}

fn error_payload(status: u16, message: &str) -> (u16, Vec<u8>) {
    (
        status,
        serde_json::to_vec(&ErrorResponse {
            error: message.to_string(),
        })
        .expect("error serialization"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask_oracle::MaskOracle;
    use crate::worldsim::{EnvConfig, World};

    fn test_world() -> World {
        World::new(EnvConfig {
            resolution: 32,
            ..EnvConfig::default()
        })
    }

    #[test]
    fn frame_roundtrips_through_png_base64() {
        let mut w = test_world();
        let obs = w.reset(3);
        let encoded = encode_frame(obs.latest());
        let decoded = decode_frame(&encoded).unwrap();
        assert_eq!(decoded.resolution, obs.latest().resolution);
        assert_eq!(decoded.data, obs.latest().data);
    }

    #[test]
    fn stub_server_matches_direct_backend() {
        let server = StubServer::start("127.0.0.1:0").unwrap();
        let external = ExternalBackend::new(server.addr().to_string(), Duration::from_secs(5));
        let direct = MaskOracle::new(GroundTruthBackend);
        let remote = MaskOracle::new(external);

        let mut w = test_world();
        w.reset(4);
        for _ in 0..40 {
            let obs = w.step(Action::new(0.0, 0.5)).unwrap().0;
            let direct_phrases = direct.retrieve_semantics(&obs, "objects").unwrap();
            if !direct_phrases.is_empty() {
                let remote_phrases = remote.retrieve_semantics(&obs, "objects").unwrap();
                assert_eq!(direct_phrases, remote_phrases);
                let dm = direct.knowledge_mask(&obs, &direct_phrases).unwrap();
                let rm = remote.knowledge_mask(&obs, &remote_phrases).unwrap();
                assert_eq!(dm.aggregate, rm.aggregate);
                let dv = direct.advisor_judge(&obs, Action::new(0.0, 1.0)).unwrap();
                let rv = remote.advisor_judge(&obs, Action::new(0.0, 1.0)).unwrap();
                assert_eq!(dv.verdict, rv.verdict);
                server.stop();
                return;
            }
        }
        panic!("no objects appeared");
    }

    #[test]
    fn backend_error_carries_status_and_message() {
        let server = StubServer::start("127.0.0.1:0").unwrap();
        let external = ExternalBackend::new(server.addr().to_string(), Duration::from_secs(5));
        let mut w = test_world();
        let obs = w.reset(1);
        let err = external
            .mask_logits(obs.latest(), "sasquatch")
            .unwrap_err();
        match err {
            OracleError::Backend { status, message } => {
                assert_eq!(status, 400);
                assert!(message.contains("sasquatch"));
            }
            other => panic!("expected Backend error, got {other:?}"),
        }
        server.stop();
    }

    #[test]
    fn garbage_response_is_malformed_not_empty() {
        // A server that replies with non-JSON text.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            if let Ok((mut s, _)) = listener.accept() {
                let mut drain = [0u8; 4096];
                let _ = s.read(&mut drain);
                let body = b"definitely not json";
                let head = format!(
                    "HTTP/1.1 200 OK\r\nContent-Length: {}\r\n\r\n",
                    body.len()
                );
                s.write_all(head.as_bytes()).unwrap();
                s.write_all(body).unwrap();
            }
        });
        let external = ExternalBackend::new(addr.to_string(), Duration::from_secs(5));
        let mut w = test_world();
        let obs = w.reset(1);
        let err = external
            .retrieve_semantics(obs.latest(), "objects")
            .unwrap_err();
        assert!(matches!(err, OracleError::MalformedResponse(_)), "{err:?}");
        t.join().unwrap();
    }

    #[test]
    fn dead_endpoint_is_io_or_timeout() {
        // Port 1 on localhost is essentially guaranteed closed.
        let external = ExternalBackend::new("127.0.0.1:1", Duration::from_millis(200));
        let mut w = test_world();
        let obs = w.reset(1);
        let err = external.advisor_judge(obs.latest(), Action::new(0.0, 0.0));
        assert!(matches!(
            err,
            Err(OracleError::Io(_)) | Err(OracleError::Timeout(_))
        ));
    }
}
