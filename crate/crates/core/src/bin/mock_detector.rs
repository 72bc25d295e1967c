//! Stand-in external detector speaking the line-delimited JSON protocol,
//! used to exercise the adapter. The first argument picks the behaviour:
//!
//! - `null`: no detections for any patch
//! - `fixed`: one 5×5 box at (1, 1) per patch
//! - `baseline`: the built-in baseline detector
//! - `shuffle`: baseline results, answered in reverse order of arrival in
//!   batches, flushed whenever input goes idle
//! - `die-after=N`: baseline results for N requests, then exit
//! - `error`: a per-patch error for every request
//! - `garbage`: a line that is not JSON
//! - `hang`: read requests, never answer

use std::io::{self, BufRead, Write};
use std::sync::mpsc;
use std::time::Duration;

use sartile::detect::external::wire::{Request, Response, WireDetection};
use sartile::detect::{baseline_detect, BaselineParams};

fn answer(req: &Request, mode: &str) -> Response {
    let detections = match mode {
        "null" => Vec::new(),
        "fixed" => vec![WireDetection { x: 1, y: 1, w: 5, h: 5, score: 0.9, class: "person".into() }],
        "error" => {
            return Response { id: req.id, detections: None, error: Some("mock failure".into()) };
        }
        _ => match req.decode_patch() {
            Ok(patch) => baseline_detect(&patch, &BaselineParams::default())
                .iter()
                .map(WireDetection::from_detection)
                .collect(),
            Err(e) => return Response { id: req.id, detections: None, error: Some(e) },
        },
    };
    Response { id: req.id, detections: Some(detections), error: None }
}

fn send(out: &mut impl Write, resp: &Response) -> io::Result<()> {
    serde_json::to_writer(&mut *out, resp)?;
    out.write_all(b"\n")?;
    out.flush()
}

fn main() -> io::Result<()> {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "baseline".into());
    let die_after: Option<usize> = mode.strip_prefix("die-after=").and_then(|n| n.parse().ok());

    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let mut out = io::stdout().lock();
    let mut held: Vec<Response> = Vec::new();
    let mut answered = 0usize;
    loop {
        let line = match rx.recv_timeout(Duration::from_millis(30)) {
            Ok(line) => line,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                while let Some(r) = held.pop() {
                    send(&mut out, &r)?;
                }
                continue;
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        };
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("mock-detector: bad request: {e}");
                continue;
            }
        };
        match mode.as_str() {
            "hang" => continue,
            "garbage" => {
                writeln!(out, "this is not json")?;
                out.flush()?;
            }
            "shuffle" => {
                held.push(answer(&req, "baseline"));
                if held.len() >= 4 {
                    while let Some(r) = held.pop() {
                        send(&mut out, &r)?;
                    }
                }
            }
            _ if die_after.is_some() => {
                if Some(answered) == die_after {
                    eprintln!("mock-detector: exiting after {answered} answers");
                    std::process::exit(1);
                }
                send(&mut out, &answer(&req, "baseline"))?;
                answered += 1;
            }
            m => send(&mut out, &answer(&req, m))?,
        }
    }
    while let Some(r) = held.pop() {
        send(&mut out, &r)?;
    }
    Ok(())
}
