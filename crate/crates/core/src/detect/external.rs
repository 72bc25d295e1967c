//! Adapter for detectors running in a child process.
//!
//! Requests and responses are single-line UTF-8 JSON documents on the
//! child's stdin/stdout:
//!
//! ```text
//! -> {"id":17,"width":200,"height":200,"png_b64":"<base64 PNG>"}
//! <- {"id":17,"detections":[{"x":12,"y":40,"w":9,"h":21,"score":0.83,"class":"person"}]}
//! <- {"id":17,"error":"<message>"}
//! ```
//!
//! Responses may arrive in any order and are matched to requests by id only.
//! The child's stderr is inherited.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::model::{clip_box, BBox, Detection, ImageBuffer, DEFAULT_CLASS};

use super::{DetectError, Detector};

pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExternalSpec {
    /// Command line, split with POSIX shell quoting rules.
    pub command: String,
    pub timeout_ms: u64,
}

impl ExternalSpec {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

/// Wire types, shared with protocol implementations.
pub mod wire {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Request {
        pub id: u64,
        pub width: u32,
        pub height: u32,
        pub png_b64: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireDetection {
        pub x: i64,
        pub y: i64,
        pub w: i64,
        pub h: i64,
        pub score: f64,
        #[serde(default = "default_class")]
        pub class: String,
    }

    fn default_class() -> String {
        DEFAULT_CLASS.to_string()
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Response {
        pub id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub detections: Option<Vec<WireDetection>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub error: Option<String>,
    }

    impl Request {
        pub fn decode_patch(&self) -> Result<ImageBuffer, String> {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(&self.png_b64)
                .map_err(|e| format!("bad base64: {e}"))?;
            ImageBuffer::decode_png(&bytes).map_err(|e| format!("bad png: {e}"))
        }
    }

    impl WireDetection {
        pub fn from_detection(d: &Detection) -> Self {
            Self {
                x: d.bbox.x() as i64,
                y: d.bbox.y() as i64,
                w: d.bbox.w() as i64,
                h: d.bbox.h() as i64,
                score: d.score,
                class: d.class_label.clone(),
            }
        }
    }
}

use wire::{Request, Response, WireDetection};

type Reply = Result<Vec<Detection>, DetectError>;

struct Pending {
    width: u32,
    height: u32,
    reply: Sender<Reply>,
}

#[derive(Default)]
struct Inflight {
    pending: HashMap<u64, Pending>,
    /// Set once stdout reaches EOF or the stream becomes unreadable.
    closed: Option<DetectError>,
}

/// Owns the child process. `detect` may be called from many threads; writes
/// are serialized and a reader thread routes each response by id.
pub struct ExternalDetector {
    command: String,
    timeout: Duration,
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
    inflight: Arc<Mutex<Inflight>>,
    next_id: AtomicU64,
    reader: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for ExternalDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDetector")
            .field("command", &self.command)
            .field("timeout", &self.timeout)
            .finish()
    }
}

/// Converts one wire detection into a patch-local detection clipped to the
/// patch. Boxes entirely outside the patch are dropped.
fn convert(det: &WireDetection, width: u32, height: u32) -> Result<Option<Detection>, String> {
    if det.w <= 0 || det.h <= 0 {
        return Err(format!("non-positive box size {}x{}", det.w, det.h));
    }
    if !(0.0..=1.0).contains(&det.score) {
        return Err(format!("score {} outside [0, 1]", det.score));
    }
    let x0 = det.x.clamp(0, width as i64);
    let y0 = det.y.clamp(0, height as i64);
    let x1 = (det.x + det.w).clamp(0, width as i64);
    let y1 = (det.y + det.h).clamp(0, height as i64);
    let Some(bbox) = BBox::from_corners(x0 as u32, y0 as u32, x1 as u32, y1 as u32) else {
        return Ok(None);
    };
    let bbox = clip_box(&bbox, width, height).expect("already clamped to the patch");
    Ok(Some(Detection::new(bbox, det.score, det.class.clone())))
}

fn route(inflight: &Mutex<Inflight>, line: &str) {
    let response: Response = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            // Without a readable id the stream can no longer be trusted.
            let err = DetectError::Protocol {
                line: line.to_string(),
                reason: e.to_string(),
            };
            fail_all(inflight, err);
            return;
        }
    };
    let mut guard = inflight.lock().expect("inflight lock poisoned");
    let Some(pending) = guard.pending.remove(&response.id) else {
        log::warn!("ignoring response for unknown or expired request {}", response.id);
        return;
    };
    drop(guard);
    let reply = match (response.error, response.detections) {
        (Some(message), _) => Err(DetectError::Remote {
            id: response.id,
            message,
        }),
        (None, Some(dets)) => dets
            .iter()
            .map(|d| convert(d, pending.width, pending.height))
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().flatten().collect())
            .map_err(|reason| DetectError::Protocol {
                line: line.to_string(),
                reason,
            }),
        (None, None) => Err(DetectError::Protocol {
            line: line.to_string(),
            reason: "response has neither detections nor error".into(),
        }),
    };
    let _ = pending.reply.send(reply);
}

fn fail_all(inflight: &Mutex<Inflight>, err: DetectError) {
    let mut guard = inflight.lock().expect("inflight lock poisoned");
    if guard.closed.is_none() {
        guard.closed = Some(err.clone());
    }
    for (id, p) in guard.pending.drain() {
        let e = match &err {
            DetectError::ProcessExited { .. } => DetectError::ProcessExited { id },
            other => other.clone(),
        };
        let _ = p.reply.send(Err(e));
    }
}

impl ExternalDetector {
    pub fn spawn(spec: &ExternalSpec) -> Result<Self, DetectError> {
        let spawn_err = |reason: String| DetectError::Spawn {
            command: spec.command.clone(),
            reason,
        };
        let argv = shlex::split(&spec.command).ok_or_else(|| spawn_err("unbalanced quoting".into()))?;
        let (program, args) = argv.split_first().ok_or_else(|| spawn_err("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| spawn_err(e.to_string()))?;
        let stdin = child.stdin.take().ok_or_else(|| spawn_err("stdin unavailable".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| spawn_err("stdout unavailable".into()))?;

        let inflight = Arc::new(Mutex::new(Inflight::default()));
        let reader_state = Arc::clone(&inflight);
        let reader = std::thread::Builder::new()
            .name("external-detector-reader".into())
            .spawn(move || {
                let mut lines = BufReader::new(stdout);
                let mut line = String::new();
                loop {
                    line.clear();
                    match lines.read_line(&mut line) {
                        Ok(0) => break,
                        Ok(_) => {
                            let trimmed = line.trim();
                            if !trimmed.is_empty() {
                                route(&reader_state, trimmed);
                            }
                        }
                        Err(e) => {
                            log::warn!("detector stdout unreadable: {e}");
                            break;
                        }
                    }
                }
                fail_all(&reader_state, DetectError::ProcessExited { id: 0 });
            })
            .map_err(|e| spawn_err(e.to_string()))?;

        Ok(Self {
            command: spec.command.clone(),
            timeout: Duration::from_millis(spec.timeout_ms),
            child: Mutex::new(child),
            stdin: Mutex::new(Some(stdin)),
            inflight,
            next_id: AtomicU64::new(1),
            reader: Some(reader),
        })
    }

    fn submit(&self, patch: &ImageBuffer) -> Result<(u64, Receiver<Reply>), DetectError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let png = patch.encode_png().map_err(|e| DetectError::Io(e.to_string()))?;
        let request = Request {
            id,
            width: patch.width(),
            height: patch.height(),
            png_b64: base64::engine::general_purpose::STANDARD.encode(png),
        };
        let mut line = serde_json::to_vec(&request).expect("request serialization is infallible");
        line.push(b'\n');

        let (tx, rx) = mpsc::channel();
        {
            let mut guard = self.inflight.lock().expect("inflight lock poisoned");
            if let Some(err) = &guard.closed {
                return Err(match err {
                    DetectError::ProcessExited { .. } => DetectError::ProcessExited { id },
                    other => other.clone(),
                });
            }
            guard.pending.insert(
                id,
                Pending {
                    width: patch.width(),
                    height: patch.height(),
                    reply: tx,
                },
            );
        }

        let mut stdin = self.stdin.lock().expect("stdin lock poisoned");
        let written = match stdin.as_mut() {
            Some(pipe) => pipe.write_all(&line).and_then(|_| pipe.flush()),
            None => Err(std::io::Error::other("stdin closed")),
        };
        if written.is_err() {
            self.inflight.lock().expect("inflight lock poisoned").pending.remove(&id);
            return Err(DetectError::ProcessExited { id });
        }
        Ok((id, rx))
    }

    fn wait(&self, id: u64, rx: Receiver<Reply>, deadline: Instant) -> Reply {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(remaining) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => {
                self.inflight.lock().expect("inflight lock poisoned").pending.remove(&id);
                // A reply may have raced the removal.
                rx.try_recv().unwrap_or(Err(DetectError::Timeout {
                    id,
                    timeout_ms: self.timeout.as_millis() as u64,
                }))
            }
            Err(RecvTimeoutError::Disconnected) => Err(DetectError::ProcessExited { id }),
        }
    }

    /// Sends every patch before waiting on any reply. Results come back in
    /// request order keyed by the caller's ids; if any patch failed, the
    /// error lists every failed id.
    pub fn external_detect(
        &self,
        batch: &[(u64, ImageBuffer)],
    ) -> Result<Vec<(u64, Vec<Detection>)>, BatchError> {
        let mut submitted = Vec::with_capacity(batch.len());
        for (caller_id, patch) in batch {
            submitted.push((*caller_id, self.submit(patch)));
        }
        let deadline = Instant::now() + self.timeout;
        let mut ok = Vec::with_capacity(batch.len());
        let mut failures = Vec::new();
        for (caller_id, sub) in submitted {
            let reply = sub.and_then(|(id, rx)| self.wait(id, rx, deadline));
            match reply {
                Ok(dets) => ok.push((caller_id, dets)),
                Err(e) => failures.push((caller_id, e)),
            }
        }
        if failures.is_empty() {
            Ok(ok)
        } else {
            Err(BatchError { failures })
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{} patch(es) failed: {}", failures.len(), ids(failures))]
pub struct BatchError {
    pub failures: Vec<(u64, DetectError)>,
}

fn ids(failures: &[(u64, DetectError)]) -> String {
    failures
        .iter()
        .map(|(id, _)| id.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Detector for ExternalDetector {
    fn detect(&self, patch: &ImageBuffer) -> Result<Vec<Detection>, DetectError> {
        let (id, rx) = self.submit(patch)?;
        self.wait(id, rx, Instant::now() + self.timeout)
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved child exit on EOF.
        if let Ok(mut stdin) = self.stdin.lock() {
            stdin.take();
        }
        if let Ok(mut child) = self.child.lock() {
            let deadline = Instant::now() + Duration::from_millis(500);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(5))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wd(x: i64, y: i64, w: i64, h: i64, score: f64) -> WireDetection {
        WireDetection {
            x,
            y,
            w,
            h,
            score,
            class: "person".into(),
        }
    }

    #[test]
    fn request_wire_format() {
        let r = Request {
            id: 17,
            width: 200,
            height: 200,
            png_b64: "AAAA".into(),
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"id":17,"width":200,"height":200,"png_b64":"AAAA"}"#
        );
    }

    #[test]
    fn response_parsing() {
        let r: Response = serde_json::from_str(
            r#"{"id":17,"detections":[{"x":12,"y":40,"w":9,"h":21,"score":0.83,"class":"person"}]}"#,
        )
        .unwrap();
        assert_eq!(r.id, 17);
        assert_eq!(r.detections.unwrap()[0], wd(12, 40, 9, 21, 0.83));
        let e: Response = serde_json::from_str(r#"{"id":3,"error":"boom"}"#).unwrap();
        assert_eq!(e.error.as_deref(), Some("boom"));
    }

    #[test]
    fn conversion_clips_and_validates() {
        let d = convert(&wd(190, -5, 20, 10, 0.5), 200, 200).unwrap().unwrap();
        assert_eq!(d.bbox, BBox::new(190, 0, 10, 5).unwrap());
        assert_eq!(convert(&wd(300, 0, 5, 5, 0.5), 200, 200).unwrap(), None);
        assert!(convert(&wd(0, 0, 0, 5, 0.5), 200, 200).is_err());
        assert!(convert(&wd(0, 0, 5, 5, 1.5), 200, 200).is_err());
    }

    #[test]
    fn spawn_failures_are_reported() {
        let err = ExternalDetector::spawn(&ExternalSpec::new("")).unwrap_err();
        assert!(matches!(err, DetectError::Spawn { .. }));
        let err = ExternalDetector::spawn(&ExternalSpec::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, DetectError::Spawn { .. }));
    }
}
