//! Reference implementation of the external-predictor bridge protocol.
//!
//! Speaks line-delimited JSON on stdin/stdout and answers with a
//! constant-velocity prediction, matching the built-in surrogate:
//!
//! ```text
//! {"cmd":"predict","dt":0.5,"X":[[[x,y],...],...]}
//!   -> {"modes":[[[[x,y],...],...]],"probs":[1.0]}
//! {"cmd":"grad","X":...,"dY":[[[[x,y],...],...]]}
//!   -> {"dX":[[[x,y],...],...]}
//! {"cmd":"shutdown"} -> exits
//! ```
//!
//! Useful both for bridge integration tests and as a template for
//! attaching real models in other languages.

use serde_json::{json, Value};
use std::io::{BufRead, Write};

const HORIZON: usize = 12;

fn parse_histories(v: &Value) -> Option<Vec<Vec<(f64, f64)>>> {
    let mut out = Vec::new();
    for agent in v.as_array()? {
        let mut hist = Vec::new();
        for p in agent.as_array()? {
            let xy = p.as_array()?;
            hist.push((xy[0].as_f64()?, xy[1].as_f64()?));
        }
        if hist.len() < 2 {
            return None;
        }
        out.push(hist);
    }
    Some(out)
}

fn predict(histories: &[Vec<(f64, f64)>]) -> Value {
    let mut agents = Vec::new();
    for hist in histories {
        let (x0, y0) = hist[hist.len() - 1];
        let (xm, ym) = hist[hist.len() - 2];
        let (dx, dy) = (x0 - xm, y0 - ym);
        let traj: Vec<Value> = (1..=HORIZON)
            .map(|t| json!([x0 + dx * t as f64, y0 + dy * t as f64]))
            .collect();
        agents.push(Value::Array(traj));
    }
    json!({"modes": [agents], "probs": [1.0]})
}

fn grad(histories: &[Vec<(f64, f64)>], dy: &Value) -> Option<Value> {
    // y_t = (1 + t) x0 - t x_{-1}; the gradient lands on the last two
    // history steps only.
    let modes = dy.as_array()?;
    let mut dx: Vec<Vec<(f64, f64)>> = histories
        .iter()
        .map(|h| vec![(0.0, 0.0); h.len()])
        .collect();
    for mode in modes {
        for (i, agent) in mode.as_array()?.iter().enumerate() {
            let h = histories[i].len();
            for (ti, c) in agent.as_array()?.iter().enumerate() {
                let xy = c.as_array()?;
                let (cx, cy) = (xy[0].as_f64()?, xy[1].as_f64()?);
                let t = (ti + 1) as f64;
                dx[i][h - 1].0 += cx * (1.0 + t);
                dx[i][h - 1].1 += cy * (1.0 + t);
                dx[i][h - 2].0 -= cx * t;
                dx[i][h - 2].1 -= cy * t;
            }
        }
    }
    Some(json!({
        "dX": dx
            .iter()
            .map(|agent| {
                Value::Array(agent.iter().map(|(x, y)| json!([x, y])).collect())
            })
            .collect::<Vec<Value>>()
    }))
}

fn main() {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(req) => match req.get("cmd").and_then(Value::as_str) {
                Some("shutdown") => break,
                Some("predict") => match req.get("X").and_then(parse_histories) {
                    Some(h) => predict(&h),
                    None => json!({"error": "malformed X"}),
                },
                Some("grad") => {
                    match (req.get("X").and_then(parse_histories), req.get("dY")) {
                        (Some(h), Some(dy)) => {
                            grad(&h, dy).unwrap_or_else(|| json!({"error": "malformed dY"}))
                        }
                        _ => json!({"error": "malformed grad request"}),
                    }
                }
                _ => json!({"error": "unknown cmd"}),
            },
            Err(e) => json!({"error": format!("bad json: {e}")}),
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}
