//! Newline-delimited JSON scoring protocol for out-of-process oracles.
//!
//! The engine writes `{"op":"hello","version":1}` and expects
//! `{"version":1,"classes":K,"map_shape":[C,h,w]}`. Each score request is
//! `{"id":N,"op":"score","class":c,"map":{"shape":[..],"data":[..]}}` and is
//! answered by `{"id":N,"prob":p}` or `{"id":N,"error":"..."}`. Requests may
//! be pipelined and responses may arrive in any order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::worth::ScoreOracle;

pub const PROTOCOL_VERSION: u32 = 1;

/// Requests in flight before the client starts draining responses.
const PIPELINE_WINDOW: usize = 64;

/// Tensor on the wire, and the on-disk feature-map file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMap {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for WireMap {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl TryFrom<WireMap> for Tensor {
    type Error = Error;

    fn try_from(m: WireMap) -> Result<Tensor> {
        Tensor::new(m.shape, m.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello {
        version: u32,
    },
    Score {
        id: u64,
        class: usize,
        map: WireMap,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloReply {
    pub version: u32,
    pub classes: usize,
    pub map_shape: Vec<usize>,
    /// Adapter-chosen split point, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_layer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn read_feature_map(text: &str) -> Result<Tensor> {
    let wire: WireMap = serde_json::from_str(text).map_err(|e| Error::parse("feature map", e))?;
    wire.try_into()
}

pub fn feature_map_json(t: &Tensor) -> String {
    serde_json::to_string(&WireMap::from(t)).expect("tensor serializes")
}

// A broken pipe to the adapter is an oracle failure, not a local I/O one.
fn pipe_error(e: std::io::Error) -> Error {
    Error::Oracle(format!("adapter pipe: {e}"))
}

struct Channel {
    writer: Box<dyn Write + Send>,
    reader: Box<dyn BufRead + Send>,
    next_id: u64,
}

impl Channel {
    fn send(&mut self, line: &str) -> Result<()> {
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .map_err(pipe_error)
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(pipe_error)
    }

    fn receive(&mut self) -> Result<String> {
        let mut line = String::new();
        if self.reader.read_line(&mut line).map_err(pipe_error)? == 0 {
            return Err(Error::Oracle("adapter closed its output".into()));
        }
        Ok(line)
    }
}

/// Client side of the protocol: an oracle backed by an adapter process (or
/// any pair of byte streams).
///
/// Calls from several threads serialize on one channel; each call pipelines
/// its own batch.
pub struct ExternalOracle {
    hello: HelloReply,
    channel: Mutex<Channel>,
    child: Option<Child>,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle").field("hello", &self.hello).finish()
    }
}

impl ExternalOracle {
    /// Spawns `command` through `sh -c` and performs the handshake.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Oracle(format!("cannot start `{command}`: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().unwrap();
        let stdout: ChildStdout = child.stdout.take().unwrap();
        let mut oracle = Self::connect(Box::new(BufReader::new(stdout)), Box::new(BufWriter::new(stdin)))?;
        oracle.child = Some(child);
        Ok(oracle)
    }

    pub fn connect(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>) -> Result<Self> {
        let mut channel = Channel {
            writer,
            reader,
            next_id: 0,
        };
        let hello = serde_json::to_string(&Request::Hello {
            version: PROTOCOL_VERSION,
        })
        .unwrap();
        channel.send(&hello)?;
        channel.flush()?;
        let line = channel.receive()?;
        let reply: HelloReply = serde_json::from_str(&line)
            .map_err(|e| Error::Oracle(format!("bad handshake reply `{}`: {e}", line.trim())))?;
        if reply.version != PROTOCOL_VERSION {
            return Err(Error::Oracle(format!("adapter speaks protocol version {}", reply.version)));
        }
        if reply.map_shape.len() != 3 || reply.classes == 0 {
            return Err(Error::Oracle(format!("unusable handshake {reply:?}")));
        }
        Ok(Self {
            hello: reply,
            channel: Mutex::new(channel),
            child: None,
        })
    }

    pub fn hello(&self) -> &HelloReply {
        &self.hello
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin lets a well-behaved adapter exit on EOF.
            if let Ok(mut ch) = self.channel.lock() {
                ch.writer = Box::new(std::io::sink());
            }
            let _ = child.wait();
        }
    }
}

impl ScoreOracle for ExternalOracle {
    fn num_classes(&self) -> usize {
        self.hello.classes
    }

    fn input_shape(&self) -> Vec<usize> {
        self.hello.map_shape.clone()
    }

    fn score(&self, input: &Tensor, class: usize) -> Result<f64> {
        let mut out = self.score_batch(std::slice::from_ref(input), class)?;
        Ok(out.pop().unwrap())
    }

    fn score_batch(&self, inputs: &[Tensor], class: usize) -> Result<Vec<f64>> {
        if class >= self.hello.classes {
            return Err(Error::ClassOutOfRange {
                class,
                classes: self.hello.classes,
            });
        }
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| Error::Oracle("oracle channel poisoned".into()))?;
        let first_id = ch.next_id;
        ch.next_id += inputs.len() as u64;

        let mut results: Vec<Option<f64>> = vec![None; inputs.len()];
        let mut pending: HashMap<u64, usize> = HashMap::new();
        let mut sent = 0usize;
        let mut received = 0usize;
        let mut failure: Option<(usize, Error)> = None;
        // After a failure, drain what is in flight but send nothing new.
        while !pending.is_empty() || (failure.is_none() && received < inputs.len()) {
            while failure.is_none() && sent < inputs.len() && pending.len() < PIPELINE_WINDOW {
                let id = first_id + sent as u64;
                let req = Request::Score {
                    id,
                    class,
                    map: WireMap::from(&inputs[sent]),
                };
                let line = serde_json::to_string(&req).expect("request serializes");
                ch.send(&line)?;
                pending.insert(id, sent);
                sent += 1;
            }
            ch.flush()?;

            let line = ch.receive()?;
            let resp: Response = serde_json::from_str(&line)
                .map_err(|e| Error::Oracle(format!("malformed response `{}`: {e}", line.trim())))?;
            let id = resp.id.ok_or_else(|| {
                Error::Oracle(format!(
                    "protocol error from adapter: {}",
                    resp.error.as_deref().unwrap_or("response without id")
                ))
            })?;
            let index = pending
                .remove(&id)
                .ok_or_else(|| Error::Oracle(format!("unexpected response id {id}")))?;
            match (resp.prob, resp.error) {
                (_, Some(msg)) => {
                    failure.get_or_insert((index, Error::Oracle(msg)));
                }
                (Some(p), None) if p.is_finite() => results[index] = Some(p),
                _ => {
                    failure.get_or_insert((index, Error::Oracle(format!("response {id} has no valid prob"))));
                }
            }
            received += 1;
        }
        if let Some((index, source)) = failure {
            return Err(Error::Batch {
                index,
                source: Box::new(source),
            });
        }
        Ok(results.into_iter().map(Option::unwrap).collect())
    }
}

/// Adapter side of the protocol: answers requests from `reader` until EOF.
///
/// `score` receives a tensor already checked against `hello.map_shape`.
/// Malformed lines get an error response (carrying the id when one can be
/// recovered) and the loop continues.
pub fn serve<R, W, F>(reader: R, mut writer: W, hello: &HelloReply, score: F) -> std::io::Result<()>
where
    R: BufRead,
    W: Write,
    F: Fn(&Tensor, usize) -> std::result::Result<f64, String>,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(Request::Hello { .. }) => serde_json::to_string(hello).unwrap(),
            Ok(Request::Score { id, class, map }) => {
                let outcome = if class >= hello.classes {
                    Err(format!("class {class} out of range for {} classes", hello.classes))
                } else if map.shape != hello.map_shape {
                    Err(format!("map shape {:?} != {:?}", map.shape, hello.map_shape))
                } else {
                    Tensor::try_from(map)
                        .map_err(|e| e.to_string())
                        .and_then(|t| score(&t, class))
                };
                let resp = match outcome {
                    Ok(p) => Response {
                        id: Some(id),
                        prob: Some(p),
                        error: None,
                    },
                    Err(e) => Response {
                        id: Some(id),
                        prob: None,
                        error: Some(e),
                    },
                };
                serde_json::to_string(&resp).unwrap()
            }
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
                serde_json::to_string(&Response {
                    id,
                    prob: None,
                    error: Some(format!("malformed request: {e}")),
                })
                .unwrap()
            }
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
