//! Multi-agent scene containers and history/future windowing.

use crate::error::{Error, Result};
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};

/// Oriented-rectangle footprint of a vehicle, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Footprint {
            length: 4.0,
            width: 1.8,
        }
    }
}

/// One agent's logged track: observed history plus ground-truth future.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    /// Observed positions, oldest first; the last entry is "now".
    pub history: Vec<Vec2>,
    /// Ground-truth future positions, earliest first.
    pub future: Vec<Vec2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<Footprint>,
}

impl AgentTrack {
    /// History and future concatenated into one timeline.
    pub fn track(&self) -> Vec<Vec2> {
        let mut t = self.history.clone();
        t.extend_from_slice(&self.future);
        t
    }

    pub fn footprint_or_default(&self) -> Footprint {
        self.footprint.unwrap_or_default()
    }
}

/// A prediction scene: `N` agents with `H`-step histories and `T`-step
/// futures at a fixed sampling interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    /// Sampling interval, seconds.
    pub dt: f64,
    pub agents: Vec<AgentTrack>,
    /// Index of the adversarial agent.
    pub adv: usize,
    /// Index of the ego (attacked) agent.
    pub ego: usize,
    /// Name of the map this scene references, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_ref: Option<String>,
}

impl Scene {
    /// Number of agents.
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Observed history length (uniform across agents).
    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    /// Future length (uniform across agents).
    pub fn future_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    /// Enforce the scene invariants.
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::invalid(format!("scene {}: no agents", self.id)));
        }
        let h = self.history_len();
        let t = self.future_len();
        if h < 2 {
            return Err(Error::invalid(format!(
                "scene {}: history length {h} < 2",
                self.id
            )));
        }
        if t < 1 {
            return Err(Error::invalid(format!(
                "scene {}: future length {t} < 1",
                self.id
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid(format!("scene {}: dt must be > 0", self.id)));
        }
        if self.adv >= self.agents.len() || self.ego >= self.agents.len() {
            return Err(Error::invalid(format!(
                "scene {}: adv/ego index out of range",
                self.id
            )));
        }
        if self.adv == self.ego {
            return Err(Error::invalid(format!(
                "scene {}: adv and ego must differ",
                self.id
            )));
        }
        let mut ids: Vec<&str> = self.agents.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.agents.len() {
            return Err(Error::invalid(format!(
                "scene {}: duplicate agent ids",
                self.id
            )));
        }
        for a in &self.agents {
            if a.history.len() != h {
                return Err(Error::invalid(format!(
                    "scene {}: agent {} history length {} != {h}",
                    self.id,
                    a.id,
                    a.history.len()
                )));
            }
            if a.future.len() != t {
                return Err(Error::invalid(format!(
                    "scene {}: agent {} future length {} != {t}",
                    self.id,
                    a.id,
                    a.future.len()
                )));
            }
            if a.history.iter().chain(&a.future).any(|p| !p.is_finite()) {
                return Err(Error::invalid(format!(
                    "scene {}: agent {} has non-finite position",
                    self.id, a.id
                )));
            }
        }
        Ok(())
    }

    /// All histories as an `N x H` matrix.
    pub fn histories(&self) -> Vec<Vec<Vec2>> {
        self.agents.iter().map(|a| a.history.clone()).collect()
    }

    /// All futures as an `N x T` matrix.
    pub fn futures(&self) -> Vec<Vec<Vec2>> {
        self.agents.iter().map(|a| a.future.clone()).collect()
    }

    /// Clone the scene with the adversarial agent's history replaced.
    pub fn with_adv_history(&self, history: Vec<Vec2>) -> Scene {
        let mut s = self.clone();
        s.agents[self.adv].history = history;
        s
    }

    /// Clone the scene with every history truncated to its last `h` steps.
    pub fn with_history_tail(&self, h: usize) -> Scene {
        let mut s = self.clone();
        for a in s.agents.iter_mut() {
            let start = a.history.len().saturating_sub(h);
            a.history = a.history[start..].to_vec();
        }
        s
    }

    /// Extract the prediction window whose "now" is track index `end`
    /// (indices count from the start of the observed history), with an
    /// `h`-step history and a `t`-step future.
    pub fn window(&self, end: usize, h: usize, t: usize) -> Result<Scene> {
        if end + 1 < h {
            return Err(Error::invalid(format!(
                "window ending at {end} cannot reach back {h} steps"
            )));
        }
        let mut agents = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            let track = a.track();
            if end + t >= track.len() {
                return Err(Error::invalid(format!(
                    "window [{}..={}] with {t}-step future exceeds track length {}",
                    end + 1 - h,
                    end,
                    track.len()
                )));
            }
            agents.push(AgentTrack {
                id: a.id.clone(),
                history: track[end + 1 - h..=end].to_vec(),
                future: track[end + 1..=end + t].to_vec(),
                footprint: a.footprint,
            });
        }
        Ok(Scene {
            id: format!("{}@{end}", self.id),
            dt: self.dt,
            agents,
            adv: self.adv,
            ego: self.ego,
            map_ref: self.map_ref.clone(),
        })
    }

    /// Translate every position by `c` (testing aid; metrics are expected
    /// to be invariant when map and plans move along).
    pub fn translated(&self, c: Vec2) -> Scene {
        let mut s = self.clone();
        for a in s.agents.iter_mut() {
            for p in a.history.iter_mut() {
                *p += c;
            }
            for p in a.future.iter_mut() {
                *p += c;
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_agent_scene() -> Scene {
        let mk = |x0: f64, y: f64| AgentTrack {
            id: format!("a{x0}-{y}"),
            history: (0..4).map(|t| Vec2::new(x0 + t as f64, y)).collect(),
            future: (4..8).map(|t| Vec2::new(x0 + t as f64, y)).collect(),
            footprint: None,
        };
        Scene {
            id: "s0".into(),
            dt: 0.5,
            agents: vec![mk(0.0, 0.0), mk(0.0, 3.5)],
            adv: 1,
            ego: 0,
            map_ref: None,
        }
    }

    #[test]
    fn validate_accepts_well_formed_scene() {
        two_agent_scene().validate().unwrap();
    }

    #[test]
    fn validate_rejects_short_history() {
        let mut s = two_agent_scene();
        for a in s.agents.iter_mut() {
            a.history.truncate(1);
        }
        assert!(s.validate().is_err());
    }

    #[test]
    fn validate_rejects_adv_equals_ego() {
        let mut s = two_agent_scene();
        s.adv = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn window_slices_track_correctly() {
        let s = two_agent_scene();
        // Track indices 0..7; window ending at index 4 with h=4, t=3.
        let w = s.window(4, 4, 3).unwrap();
        assert_eq!(w.history_len(), 4);
        assert_eq!(w.future_len(), 3);
        assert_eq!(w.agents[0].history[0], Vec2::new(1.0, 0.0));
        assert_eq!(w.agents[0].history[3], Vec2::new(4.0, 0.0));
        assert_eq!(w.agents[0].future[0], Vec2::new(5.0, 0.0));
        assert!(s.window(2, 4, 3).is_err());
        assert!(s.window(5, 4, 3).is_err());
    }
}
