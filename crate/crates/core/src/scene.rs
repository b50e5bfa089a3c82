//! Multi-agent scenes on a uniform time grid, their JSON-lines file format,
//! canonical agent ordering and finite-difference kinematics.
//!
//! Time indices `0..=obs_len` are observed (index `obs_len` is the current
//! position); the `pred_len` indices after that are the future.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    EgoVehicle,
    Pedestrian,
    Bicyclist,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::EgoVehicle, AgentKind::Pedestrian, AgentKind::Bicyclist];

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self as usize] = 1.0;
        v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::EgoVehicle => "ego_vehicle",
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Bicyclist => "bicyclist",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub id: u64,
    pub kind: AgentKind,
    pub positions: Vec<Point>,
}

impl Agent {
    pub fn is_ego(&self) -> bool {
        self.kind == AgentKind::EgoVehicle
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub dt: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub agents: Vec<Agent>,
}

impl Scene {
    /// Index of the current (last observed) time step.
    pub fn current_index(&self) -> usize {
        self.obs_len
    }

    /// Number of grid points the model uses per agent.
    pub fn window_len(&self) -> usize {
        self.obs_len + 1 + self.pred_len
    }

    pub fn past<'a>(&self, agent: &'a Agent) -> &'a [Point] {
        &agent.positions[..=self.obs_len]
    }

    pub fn future<'a>(&self, agent: &'a Agent) -> &'a [Point] {
        &agent.positions[self.obs_len + 1..self.window_len()]
    }

    pub fn ego(&self) -> Option<&Agent> {
        self.agents.iter().find(|a| a.is_ego())
    }

    pub fn agent(&self, id: u64) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Checks the scene invariants, returning the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(format!("dt must be positive, got {}", self.dt));
        }
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err("obs_len and pred_len must be at least 1".into());
        }
        if self.agents.is_empty() {
            return Err("scene has no agents".into());
        }
        match self.agents.iter().filter(|a| a.is_ego()).count() {
            0 => return Err("missing ego".into()),
            1 => {}
            _ => return Err("multiple ego".into()),
        }
        let mut ids = HashSet::new();
        for a in &self.agents {
            if !ids.insert(a.id) {
                return Err(format!("duplicate agent id {}", a.id));
            }
            if a.positions.len() < self.window_len() {
                return Err(format!(
                    "agent {} has {} positions, needs at least {}",
                    a.id,
                    a.positions.len(),
                    self.window_len()
                ));
            }
            if a.positions.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("agent {} has a non-finite position", a.id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl SplitDataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Scene> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &Scene)> {
        let train = self.train.iter().map(|s| (Split::Train, s));
        let val = self.val.iter().map(|s| (Split::Val, s));
        let test = self.test.iter().map(|s| (Split::Test, s));
        train.chain(val).chain(test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: scene {scene_id}: {reason}")]
    Invalid { line: usize, scene_id: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("kinematics need at least 3 positions, got {0}")]
    TooShort(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: u64,
    kind: AgentKind,
    xy: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: String,
    split: Split,
    dt: f64,
    obs_len: usize,
    pred_len: usize,
    agents: Vec<AgentRecord>,
}

/// Serializes one scene as a single JSON line (no trailing newline).
pub fn scene_to_json(scene: &Scene, split: Split) -> String {
    let rec = SceneRecord {
        scene_id: scene.scene_id.clone(),
        split,
        dt: scene.dt,
        obs_len: scene.obs_len,
        pred_len: scene.pred_len,
        agents: scene
            .agents
            .iter()
            .map(|a| AgentRecord { id: a.id, kind: a.kind, xy: a.positions.clone() })
            .collect(),
    };
    serde_json::to_string(&rec).expect("scene records always serialize")
}

pub fn parse_scenes(reader: impl BufRead) -> Result<SplitDataset, SceneError> {
    let mut out = SplitDataset::default();
    let mut seen_ids = HashSet::new();
    let mut grid: Option<(f64, usize, usize)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| SceneError::Malformed { line: line_no, message: e.to_string() })?;
        let invalid = |reason: String| SceneError::Invalid { line: line_no, scene_id: rec.scene_id.clone(), reason };
        let this_grid = (rec.dt, rec.obs_len, rec.pred_len);
        match grid {
            None => grid = Some(this_grid),
            Some(g) if g.0 != this_grid.0 => {
                return Err(invalid(format!("inconsistent dt: {} vs {} in earlier scenes", rec.dt, g.0)))
            }
            Some(g) if g != this_grid => {
                return Err(invalid(format!(
                    "inconsistent horizon: obs_len/pred_len {}/{} vs {}/{}",
                    rec.obs_len, rec.pred_len, g.1, g.2
                )))
            }
            Some(_) => {}
        }
        if !seen_ids.insert(rec.scene_id.clone()) {
            return Err(invalid("scene id appears more than once".into()));
        }
        let scene = Scene {
            scene_id: rec.scene_id.clone(),
            dt: rec.dt,
            obs_len: rec.obs_len,
            pred_len: rec.pred_len,
            agents: rec
                .agents
                .iter()
                .map(|a| Agent { id: a.id, kind: a.kind, positions: a.xy.clone() })
                .collect(),
        };
        scene.validate().map_err(invalid)?;
        out.split_mut(rec.split).push(scene);
    }
    Ok(out)
}

pub fn load_scenes(path: &Path) -> Result<SplitDataset, SceneError> {
    let file = std::fs::File::open(path)?;
    parse_scenes(std::io::BufReader::new(file))
}

/// Writes train, then val, then test scenes, one per line.
pub fn write_scenes(data: &SplitDataset, mut w: impl Write) -> std::io::Result<()> {
    for (split, scene) in data.iter() {
        writeln!(w, "{}", scene_to_json(scene, split))?;
    }
    Ok(())
}

pub fn save_scenes(data: &SplitDataset, path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_scenes(data, &mut w)?;
    w.flush()
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Canonical processing order: ego first, then by ascending distance to the
/// ego at the current step, ties broken by ascending id.
pub fn order_agents(scene: &Scene) -> Scene {
    let mut out = scene.clone();
    let t = scene.current_index();
    let ego_pos = scene.ego().map(|e| e.positions[t]).unwrap_or([0.0, 0.0]);
    out.agents.sort_by(|a, b| {
        b.is_ego()
            .cmp(&a.is_ego())
            .then_with(|| {
                distance(a.positions[t], ego_pos)
                    .partial_cmp(&distance(b.positions[t], ego_pos))
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| a.id.cmp(&b.id))
    });
    out
}

/// Velocity and acceleration per grid point.
///
/// Central differences in the interior, one-sided differences at both ends.
pub fn kinematics(positions: &[Point], dt: f64) -> Result<(Vec<Point>, Vec<Point>), SceneError> {
    let n = positions.len();
    if n < 3 {
        return Err(SceneError::TooShort(n));
    }
    let p = positions;
    let sub = |a: Point, b: Point, s: f64| [(a[0] - b[0]) * s, (a[1] - b[1]) * s];
    let second = |a: Point, b: Point, c: Point| {
        let s = 1.0 / (dt * dt);
        [(a[0] - 2.0 * b[0] + c[0]) * s, (a[1] - 2.0 * b[1] + c[1]) * s]
    };
    let mut vel = Vec::with_capacity(n);
    let mut acc = Vec::with_capacity(n);
    for k in 0..n {
        let v = if k == 0 {
            sub(p[1], p[0], 1.0 / dt)
        } else if k == n - 1 {
            sub(p[n - 1], p[n - 2], 1.0 / dt)
        } else {
            sub(p[k + 1], p[k - 1], 0.5 / dt)
        };
        let a = if k == 0 {
            second(p[2], p[1], p[0])
        } else if k == n - 1 {
            second(p[n - 1], p[n - 2], p[n - 3])
        } else {
            second(p[k + 1], p[k], p[k - 1])
        };
        vel.push(v);
        acc.push(a);
    }
    Ok((vel, acc))
}

/// Rigidly maps a scene into the frame where the ego's current position is
/// the origin and its current heading is +x. A stationary ego only
/// translates.
pub fn to_ego_frame(scene: &Scene) -> Scene {
    let Some(ego) = scene.ego() else { return scene.clone() };
    let t = scene.current_index();
    let origin = ego.positions[t];
    let prev = ego.positions[t - 1];
    let (dx, dy) = (origin[0] - prev[0], origin[1] - prev[1]);
    let norm = dx.hypot(dy);
    let (c, s) = if norm > 1e-9 { (dx / norm, dy / norm) } else { (1.0, 0.0) };
    let mut out = scene.clone();
    for agent in &mut out.agents {
        for p in &mut agent.positions {
            let (x, y) = (p[0] - origin[0], p[1] - origin[1]);
            *p = [c * x + s * y, -s * x + c * y];
        }
    }
    out
}
