//! External-predictor bridge.
//!
//! Attaches any external model as a [`PredictionModel`] by talking
//! line-delimited JSON to a child process on its standard streams:
//!
//! ```text
//! -> {"cmd":"predict","dt":0.5,"X":[[[x,y],...],...]}
//! <- {"modes":[[[[x,y],...],...],...],"probs":[...]}
//! -> {"cmd":"grad","X":...,"dY":[[[[x,y],...],...],...]}
//! <- {"dX":[[[x,y],...],...]}
//! -> {"cmd":"shutdown"}
//! ```
//!
//! A malformed or missing reply after the configured timeout is a bridge
//! error. `advdo-cvbridge` ships as a reference implementation of the
//! child side.

use super::{PredCotangent, Prediction, PredictionModel};
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::vec2::Vec2;
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{channel, Receiver};
use std::sync::Mutex;
use std::time::Duration;

/// Bridge connection settings.
#[derive(Debug, Clone)]
pub struct BridgeConfig {
    /// Command line of the child process (argv style).
    pub cmd: Vec<String>,
    /// History steps the external model consumes.
    pub history_len: usize,
    /// Future steps the external model emits.
    pub horizon: usize,
    /// Reply timeout.
    pub timeout: Duration,
    /// Whether the child implements the `grad` command.
    pub grad_supported: bool,
}

impl BridgeConfig {
    pub fn new(cmd: Vec<String>, history_len: usize, horizon: usize) -> Self {
        BridgeConfig {
            cmd,
            history_len,
            horizon,
            timeout: Duration::from_secs(30),
            grad_supported: false,
        }
    }
}

struct BridgeIo {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<std::io::Result<String>>,
}

/// A prediction model served by a child process.
pub struct BridgeModel {
    cfg: BridgeConfig,
    io: Mutex<BridgeIo>,
}

impl BridgeModel {
    /// Spawn the child and wire up its streams.
    pub fn spawn(cfg: BridgeConfig) -> Result<Self> {
        if cfg.cmd.is_empty() {
            return Err(Error::Config("bridge command must be nonempty".into()));
        }
        let mut child = Command::new(&cfg.cmd[0])
            .args(&cfg.cmd[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Bridge(format!("failed to spawn {:?}: {e}", cfg.cmd)))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::Bridge("bridge child has no stdin".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Bridge("bridge child has no stdout".into()))?;
        let (tx, rx) = channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(BridgeModel {
            cfg,
            io: Mutex::new(BridgeIo {
                child,
                stdin,
                replies: rx,
            }),
        })
    }

    fn request(&self, payload: Value) -> Result<Value> {
        let mut io = self.io.lock().expect("bridge mutex poisoned");
        let line = serde_json::to_string(&payload)?;
        writeln!(io.stdin, "{line}").map_err(|e| Error::Bridge(format!("write failed: {e}")))?;
        io.stdin
            .flush()
            .map_err(|e| Error::Bridge(format!("flush failed: {e}")))?;
        let reply = io
            .replies
            .recv_timeout(self.cfg.timeout)
            .map_err(|_| Error::Bridge(format!("no reply within {:?}", self.cfg.timeout)))?
            .map_err(|e| Error::Bridge(format!("read failed: {e}")))?;
        let value: Value = serde_json::from_str(&reply)
            .map_err(|e| Error::Bridge(format!("malformed reply {reply:?}: {e}")))?;
        if let Some(err) = value.get("error") {
            return Err(Error::Bridge(format!("bridge reported: {err}")));
        }
        Ok(value)
    }

    fn histories_json(scene: &Scene) -> Value {
        Value::Array(
            scene
                .agents
                .iter()
                .map(|a| {
                    Value::Array(
                        a.history
                            .iter()
                            .map(|p| json!([p.x, p.y]))
                            .collect(),
                    )
                })
                .collect(),
        )
    }

    fn parse_point(v: &Value) -> Result<Vec2> {
        let arr = v
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| Error::Bridge(format!("expected [x,y], got {v}")))?;
        let x = arr[0]
            .as_f64()
            .ok_or_else(|| Error::Bridge("non-numeric coordinate".into()))?;
        let y = arr[1]
            .as_f64()
            .ok_or_else(|| Error::Bridge("non-numeric coordinate".into()))?;
        Ok(Vec2::new(x, y))
    }
}

impl PredictionModel for BridgeModel {
    fn name(&self) -> String {
        format!("bridge:{}", self.cfg.cmd.join(" "))
    }

    fn history_len(&self) -> usize {
        self.cfg.history_len
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let window = scene.with_history_tail(self.cfg.history_len);
        let reply = self.request(json!({
            "cmd": "predict",
            "dt": window.dt,
            "X": Self::histories_json(&window),
        }))?;
        let modes_v = reply
            .get("modes")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Bridge("reply missing modes".into()))?;
        let probs: Vec<f64> = reply
            .get("probs")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Bridge("reply missing probs".into()))?
            .iter()
            .map(|p| p.as_f64().unwrap_or(f64::NAN))
            .collect();
        let mut modes = Vec::with_capacity(modes_v.len());
        for mode in modes_v {
            let agents_v = mode
                .as_array()
                .ok_or_else(|| Error::Bridge("mode is not an array".into()))?;
            let mut agents = Vec::with_capacity(agents_v.len());
            for agent in agents_v {
                let steps = agent
                    .as_array()
                    .ok_or_else(|| Error::Bridge("agent trajectory is not an array".into()))?
                    .iter()
                    .map(Self::parse_point)
                    .collect::<Result<Vec<Vec2>>>()?;
                agents.push(steps);
            }
            modes.push(agents);
        }
        let pred = Prediction { modes, probs };
        pred.validate()
            .map_err(|e| Error::Bridge(format!("invalid prediction from bridge: {e}")))?;
        Ok(pred)
    }

    fn has_exact_gradient(&self) -> bool {
        self.cfg.grad_supported
    }

    fn pullback(&self, scene: &Scene, cotangent: &PredCotangent) -> Result<Vec<Vec<Vec2>>> {
        if !self.cfg.grad_supported {
            return Err(Error::Capability(
                "bridge model does not support gradients".into(),
            ));
        }
        let window = scene.with_history_tail(self.cfg.history_len);
        let dy = Value::Array(
            cotangent
                .iter()
                .map(|mode| {
                    Value::Array(
                        mode.iter()
                            .map(|agent| {
                                Value::Array(agent.iter().map(|c| json!([c.x, c.y])).collect())
                            })
                            .collect(),
                    )
                })
                .collect(),
        );
        let reply = self.request(json!({
            "cmd": "grad",
            "dt": window.dt,
            "X": Self::histories_json(&window),
            "dY": dy,
        }))?;
        let dx = reply
            .get("dX")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Bridge("reply missing dX".into()))?;
        let mut grad = Vec::with_capacity(dx.len());
        for agent in dx {
            let row = agent
                .as_array()
                .ok_or_else(|| Error::Bridge("dX row is not an array".into()))?
                .iter()
                .map(Self::parse_point)
                .collect::<Result<Vec<Vec2>>>()?;
            grad.push(row);
        }
        Ok(grad)
    }
}

impl Drop for BridgeModel {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = writeln!(io.stdin, "{}", json!({"cmd": "shutdown"}));
            let _ = io.stdin.flush();
            std::thread::sleep(Duration::from_millis(20));
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}
