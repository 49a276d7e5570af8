//! Child-process providers speaking newline-delimited JSON over stdio.
//!
//! Each request is one line `{"id": u64, "kind": ..., "payload": ...}` (plus
//! kind-specific fields); each response is one line carrying the same `id`
//! and either the result fields or `"error"`.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::signal::{write_wav, WavEncoding, Waveform};

const STDERR_EXCERPT: usize = 2000;

pub struct ProcessClient {
    program: String,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    stderr: Arc<Mutex<Vec<u8>>>,
    stderr_thread: Option<JoinHandle<()>>,
    next_id: u64,
}

impl ProcessClient {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Provider {
                message: format!("cannot start {program}: {e}"),
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&stderr);
        let stderr_thread = std::thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = err_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                sink.lock().expect("stderr buffer").extend_from_slice(&buf[..n]);
            }
        });
        Ok(ProcessClient {
            program: program.to_string(),
            child,
            stdin,
            stdout,
            stderr,
            stderr_thread: Some(stderr_thread),
            next_id: 0,
        })
    }

    fn stderr_excerpt(&mut self) -> String {
        if let Some(t) = self.stderr_thread.take() {
            let _ = t.join();
        }
        let buf = self.stderr.lock().expect("stderr buffer");
        let text = String::from_utf8_lossy(&buf);
        let text = text.trim();
        let start = text.len().saturating_sub(STDERR_EXCERPT);
        let start = (start..text.len()).find(|&i| text.is_char_boundary(i)).unwrap_or(text.len());
        text[start..].to_string()
    }

    fn failure(&mut self, what: &str) -> Error {
        self.stdin.take();
        let status = match self.child.wait() {
            Ok(s) => s.to_string(),
            Err(e) => format!("unknown status ({e})"),
        };
        let excerpt = self.stderr_excerpt();
        Error::Provider {
            message: format!("{} {what}; {status}; stderr: {excerpt}", self.program),
        }
    }

    /// Sends one request and returns the response object with `id` checked.
    pub fn request(&mut self, kind: &str, payload: &str, extra: Map<String, Value>) -> Result<Map<String, Value>> {
        let id = self.next_id;
        self.next_id += 1;
        let mut req = json!({ "id": id, "kind": kind, "payload": payload });
        req.as_object_mut().expect("object").extend(extra);
        let line = format!("{req}\n");
        let wrote = match self.stdin.as_mut() {
            Some(w) => w.write_all(line.as_bytes()).and_then(|_| w.flush()).is_ok(),
            None => false,
        };
        if !wrote {
            return Err(self.failure("closed its input"));
        }
        let mut resp = String::new();
        match self.stdout.read_line(&mut resp) {
            Ok(0) | Err(_) => return Err(self.failure("exited without responding")),
            Ok(_) => {}
        }
        let value: Value = serde_json::from_str(resp.trim()).map_err(|e| Error::Provider {
            message: format!("{}: malformed response {resp:?}: {e}", self.program),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Provider {
                message: format!("{}: response is not an object", self.program),
            });
        };
        if obj.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(Error::Provider {
                message: format!("{}: response id mismatch, expected {id}", self.program),
            });
        }
        if let Some(e) = obj.get("error") {
            return Err(Error::Provider {
                message: format!("{}: {}", self.program, e.as_str().unwrap_or(&e.to_string())),
            });
        }
        Ok(obj)
    }
}

impl Drop for ProcessClient {
    fn drop(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Writes `w` to a temporary float WAV file for a provider to read.
pub(crate) fn temp_wav(w: &Waveform) -> Result<tempfile::NamedTempFile> {
    let file = tempfile::Builder::new()
        .suffix(".wav")
        .tempfile()
        .map_err(|e| Error::io(std::env::temp_dir(), e))?;
    write_wav(file.path(), w, WavEncoding::Float32)?;
    Ok(file)
}

/// `"vector"` of an embedding response, checked against `dim`.
pub fn parse_vector(obj: &Map<String, Value>, dim: usize) -> Result<Vec<f32>> {
    let bad = |m: String| Error::Provider { message: m };
    let declared = obj.get("dim").and_then(Value::as_u64);
    let v = obj
        .get("vector")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("response has no vector".into()))?;
    let v: Vec<f32> = v
        .iter()
        .map(|x| x.as_f64().map(|f| f as f32))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("vector has non-numeric entries".into()))?;
    if declared != Some(v.len() as u64) || v.len() != dim {
        return Err(bad(format!(
            "vector length {} (declared {declared:?}), expected {dim}",
            v.len()
        )));
    }
    Ok(v)
}
