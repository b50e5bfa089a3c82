//! Social-forces style generator of ego-vehicle / pedestrian scenes.
//!
//! In `dense` mode most non-ego agents cross the ego's path on a collision
//! course and react to it with a latent decision (cross before the vehicle or
//! yield to it). The decision probability depends on the ego's speed, which
//! is only observable through the ego's own past. In `sparse` mode every agent
//! stays at least 20 m away from the ego's path and never reacts.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{to_ego_frame, Agent, AgentKind, Point, Scene, SplitDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    Dense,
    Sparse,
}

impl fmt::Display for InteractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InteractionMode::Dense => "dense",
            InteractionMode::Sparse => "sparse",
        })
    }
}

/// Social-force constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsParams {
    /// goal attraction gain (1/s)
    pub k_goal: f64,
    /// peak ego repulsion (m/s²)
    pub k_repulse: f64,
    /// reaction horizon (s)
    pub ttc0: f64,
    pub a_max: f64,
    /// speed-up factor of agents crossing before the vehicle
    pub speedup: f64,
    /// closest-approach distance under which two paths conflict (m)
    pub conflict_radius: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self { k_goal: 2.0, k_repulse: 4.0, ttc0: 3.0, a_max: 4.0, speedup: 1.5, conflict_radius: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_scenes: usize,
    /// inclusive range of non-ego agents per scene
    pub agents_per_scene: (usize, usize),
    pub mode: InteractionMode,
    pub yield_prob: f64,
    /// std of the goal perturbation applied when the future starts (m)
    pub decision_noise: f64,
    pub ego_speed: f64,
    pub ped_speed: f64,
    pub dt: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub dynamics: DynamicsParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_scenes: 100,
            agents_per_scene: (2, 4),
            mode: InteractionMode::Dense,
            yield_prob: 0.3,
            decision_noise: 1.0,
            ego_speed: 6.0,
            ped_speed: 1.4,
            dt: 0.5,
            obs_len: 1,
            pred_len: 6,
            val_fraction: 0.1,
            test_fraction: 0.2,
            dynamics: DynamicsParams::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidConfig(m.to_string()));
        if self.n_scenes == 0 {
            return bad("n_scenes must be positive");
        }
        let (lo, hi) = self.agents_per_scene;
        if lo == 0 || lo > hi || hi > 15 {
            return bad("agents_per_scene must be a range within 1..=15");
        }
        if !(0.0..=1.0).contains(&self.yield_prob) {
            return bad("yield_prob must lie in [0, 1]");
        }
        for (name, f) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return bad("val_fraction + test_fraction must leave room for training scenes");
        }
        if !(self.ego_speed > 0.0 && self.ped_speed > 0.0) {
            return bad("speeds must be positive");
        }
        if !(self.decision_noise >= 0.0) {
            return bad("decision_noise must be non-negative");
        }
        if !(self.dt > 0.0) || self.obs_len == 0 || self.pred_len == 0 {
            return bad("dt, obs_len and pred_len must be positive");
        }
        if self.obs_len + 1 + self.pred_len < 3 {
            return bad("scenes need at least 3 grid points");
        }
        let d = &self.dynamics;
        if !(d.k_goal > 0.0 && d.k_repulse >= 0.0 && d.ttc0 > 0.0 && d.a_max > 0.0 && d.speedup > 1.0) {
            return bad("dynamics constants out of range");
        }
        Ok(())
    }

    /// Upper bound on any agent speed.
    pub fn speed_limit(&self) -> f64 {
        1.5 * self.ego_speed.max(self.ped_speed)
    }

    fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.n_scenes;
        let test = (n as f64 * self.test_fraction).round() as usize;
        let val = (n as f64 * self.val_fraction).round() as usize;
        (n - test - val, val, test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    CrossBefore,
    YieldToVehicle,
    Continue,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::CrossBefore => "cross_before",
            Decision::YieldToVehicle => "yield_to_vehicle",
            Decision::Continue => "continue",
        }
    }
}

/// Ground-truth decision of one non-ego agent.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionRecord {
    pub scene_id: String,
    pub agent_id: u64,
    pub label: Decision,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub pos: Point,
    pub vel: Point,
    pub goal: Point,
    /// preferred walking speed
    pub speed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub pos: Point,
    pub vel: Point,
    pub cruise_speed: f64,
    /// whether the vehicle slows down for conflicting agents
    pub yields: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub ego: EgoState,
    pub agents: Vec<AgentState>,
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn clamp_norm(a: Point, max: f64) -> Point {
    let n = norm(a);
    if n > max {
        scale(a, max / n)
    } else {
        a
    }
}

impl AgentState {
    /// Velocity toward the goal at the preferred speed.
    pub fn goal_velocity(&self) -> Point {
        let d = sub(self.goal, self.pos);
        let n = norm(d);
        if n < 1e-9 {
            [0.0, 0.0]
        } else {
            scale(d, self.speed.min(n) / n)
        }
    }
}

/// Time until the closest approach between an agent moving at its intended
/// velocity and the ego, if that approach is a conflict.
pub fn time_to_conflict(agent: &AgentState, ego: &EgoState, radius: f64) -> Option<f64> {
    let r = sub(agent.pos, ego.pos);
    let u = sub(agent.goal_velocity(), ego.vel);
    let uu = dot(u, u);
    if uu < 1e-12 {
        return None;
    }
    let t = -dot(r, u) / uu;
    if t <= 0.0 {
        return None;
    }
    let miss = norm(add(r, scale(u, t)));
    (miss < radius).then_some(t)
}

/// Unit vector pushing an agent away from the ego's line of travel; agents
/// standing on that line are pushed straight away from the ego.
fn away_from_path(pos: Point, ego: &EgoState) -> Point {
    let rel = sub(pos, ego.pos);
    let speed = norm(ego.vel);
    if speed > 1e-9 {
        let heading = scale(ego.vel, 1.0 / speed);
        let lateral = sub(rel, scale(heading, dot(rel, heading)));
        let n = norm(lateral);
        if n > 0.5 {
            return scale(lateral, 1.0 / n);
        }
    }
    scale(rel, 1.0 / norm(rel).max(1e-9))
}

/// Advances every agent by one Euler step of length `dt`. Reactions to the
/// ego only happen when `react` is set.
pub fn step_dynamics(
    state: &SimState,
    decisions: &[Decision],
    params: &DynamicsParams,
    dt: f64,
    speed_limit: f64,
    react: bool,
) -> SimState {
    let ego = &state.ego;
    let mut any_conflict = false;
    let agents = state
        .agents
        .iter()
        .zip(decisions)
        .map(|(a, &decision)| {
            let v_goal = a.goal_velocity();
            let ttc = time_to_conflict(a, ego, params.conflict_radius).filter(|&t| t < params.ttc0);
            any_conflict |= ttc.is_some();
            let mut acc = scale(sub(v_goal, a.vel), params.k_goal);
            if let (true, Some(ttc)) = (react, ttc) {
                match decision {
                    Decision::YieldToVehicle => {
                        let away = away_from_path(a.pos, ego);
                        let mag = params.k_repulse * (1.0 - ttc / params.ttc0).max(0.0);
                        acc = add(acc, scale(away, mag));
                    }
                    Decision::CrossBefore => {
                        acc = scale(sub(scale(v_goal, params.speedup), a.vel), params.k_goal);
                    }
                    Decision::Continue => {}
                }
            }
            let acc = clamp_norm(acc, params.a_max);
            let vel = clamp_norm(add(a.vel, scale(acc, dt)), speed_limit);
            AgentState { pos: add(a.pos, scale(vel, dt)), vel, ..*a }
        })
        .collect();

    let target = if react && ego.yields && any_conflict { 0.4 * ego.cruise_speed } else { ego.cruise_speed };
    let speed = norm(ego.vel);
    let heading = if speed > 1e-9 { scale(ego.vel, 1.0 / speed) } else { [1.0, 0.0] };
    let acc = (params.k_goal * (target - speed)).clamp(-params.a_max, params.a_max);
    let new_speed = (speed + acc * dt).clamp(0.0, speed_limit);
    let vel = scale(heading, new_speed);
    let ego = EgoState { pos: add(ego.pos, scale(vel, dt)), vel, ..*ego };
    SimState { ego, agents }
}

/// Generated corpus plus the per-agent decisions that produced it.
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub data: SplitDataset,
    pub decisions: Vec<DecisionRecord>,
}

fn scene_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 8) | stream);
    rng
}

struct Layout {
    state: SimState,
    kinds: Vec<AgentKind>,
    interacting: Vec<bool>,
    /// goal perturbation applied when the future begins
    goal_shift: Vec<Point>,
    /// ego speed relative to the configured mean, in [0.5, 1.5]
    ego_factor: f64,
}

fn layout(config: &GenConfig, rng: &mut ChaCha8Rng) -> Layout {
    let t_now = config.obs_len as f64 * config.dt;
    let ego_factor = rng.random_range(0.5..1.5);
    let v_e = config.ego_speed * ego_factor;
    let ego = EgoState { pos: [0.0, 0.0], vel: [v_e, 0.0], cruise_speed: v_e, yields: false };
    let (lo, hi) = config.agents_per_scene;
    let count = rng.random_range(lo..=hi);
    let noise = Normal::new(0.0, config.decision_noise.max(1e-12)).expect("valid std");
    let mut agents = Vec::with_capacity(count);
    let mut kinds = Vec::with_capacity(count);
    let mut interacting = Vec::with_capacity(count);
    let mut goal_shift = Vec::with_capacity(count);
    for k in 0..count {
        let is_bike = rng.random_bool(0.2);
        let kind = if is_bike { AgentKind::Bicyclist } else { AgentKind::Pedestrian };
        let speed = config.ped_speed * if is_bike { 2.5 } else { 1.0 } * rng.random_range(0.8..1.2);
        let crossing = config.mode == InteractionMode::Dense && (k == 0 || rng.random_bool(0.75));
        let (pos, goal) = if crossing {
            // a vehicle at the nominal speed would reach the crossing point
            // `arrive` seconds after the current step; the actual speed shifts
            // that, and only the vehicle's own past reveals it
            let arrive = t_now + rng.random_range(1.0..2.5);
            let x_cross = config.ego_speed * arrive + rng.random_range(-1.0..1.0);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = speed * (arrive + rng.random_range(-0.8..0.8));
            ([x_cross, side * lateral], [x_cross, -side * 25.0])
        } else {
            let band = match config.mode {
                InteractionMode::Dense => rng.random_range(6.0..12.0),
                InteractionMode::Sparse => rng.random_range(22.0..45.0),
            };
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let x = rng.random_range(-20.0..60.0);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let drift = rng.random_range(-0.2..0.2);
            ([x, side * band], [x + dir * 15.0, side * band + 15.0 * drift])
        };
        let mut a = AgentState { pos, vel: [0.0, 0.0], goal, speed };
        a.vel = a.goal_velocity();
        agents.push(a);
        kinds.push(kind);
        interacting.push(crossing);
        goal_shift.push([noise.sample(rng), noise.sample(rng)]);
    }
    Layout { state: SimState { ego, agents }, kinds, interacting, goal_shift, ego_factor }
}

fn draw_decisions(config: &GenConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> (Vec<Decision>, bool) {
    // fast vehicles are yielded to more often
    let p_yield = (0.1 + 0.8 * (layout.ego_factor - 0.5)).clamp(0.0, 1.0);
    let decisions = layout
        .interacting
        .iter()
        .map(|&crossing| {
            if !crossing {
                Decision::Continue
            } else if rng.random_bool(p_yield) {
                Decision::YieldToVehicle
            } else {
                Decision::CrossBefore
            }
        })
        .collect();
    let ego_yields = config.mode == InteractionMode::Dense && rng.random_bool(config.yield_prob);
    (decisions, ego_yields)
}

/// Simulates scene `index`. `decision_stream` 0 reproduces the corpus; other
/// values redraw the latent decisions while keeping the layout (and so the
/// observed past) fixed.
pub fn simulate_scene(config: &GenConfig, index: usize, decision_stream: u64) -> (Scene, Vec<DecisionRecord>) {
    let mut layout_rng = scene_rng(config.seed, index, 0);
    let mut lay = layout(config, &mut layout_rng);
    let mut decision_rng = scene_rng(config.seed, index, 1 + decision_stream);
    let (decisions, ego_yields) = draw_decisions(config, &lay, &mut decision_rng);
    lay.state.ego.yields = ego_yields;

    let steps = config.obs_len + 1 + config.pred_len;
    let limit = config.speed_limit();
    let mut state = lay.state.clone();
    let mut ego_track = vec![state.ego.pos];
    let mut tracks: Vec<Vec<Point>> = state.agents.iter().map(|a| vec![a.pos]).collect();
    for t in 1..steps {
        if t == config.obs_len + 1 {
            for (a, shift) in state.agents.iter_mut().zip(&lay.goal_shift) {
                a.goal = add(a.goal, *shift);
            }
        }
        let react = t > config.obs_len;
        state = step_dynamics(&state, &decisions, &config.dynamics, config.dt, limit, react);
        ego_track.push(state.ego.pos);
        for (track, a) in tracks.iter_mut().zip(&state.agents) {
            track.push(a.pos);
        }
    }

    let scene_id = format!("{}-{}-{:05}", config.mode, config.seed, index);
    let base_id = index as u64 * 16;
    let mut agents = vec![Agent { id: base_id, kind: AgentKind::EgoVehicle, positions: ego_track }];
    let mut records = Vec::new();
    for (k, (track, kind)) in tracks.into_iter().zip(&lay.kinds).enumerate() {
        let id = base_id + 1 + k as u64;
        agents.push(Agent { id, kind: *kind, positions: track });
        records.push(DecisionRecord { scene_id: scene_id.clone(), agent_id: id, label: decisions[k] });
    }
    let scene = Scene { scene_id, dt: config.dt, obs_len: config.obs_len, pred_len: config.pred_len, agents };
    (to_ego_frame(&scene), records)
}

pub fn generate(config: &GenConfig) -> Result<GeneratedCorpus, GenError> {
    config.validate()?;
    let (n_train, n_val, _) = config.split_counts();
    let mut data = SplitDataset::default();
    let mut decisions = Vec::new();
    for index in 0..config.n_scenes {
        let (scene, recs) = simulate_scene(config, index, 0);
        decisions.extend(recs);
        if index < n_train {
            data.train.push(scene);
        } else if index < n_train + n_val {
            data.val.push(scene);
        } else {
            data.test.push(scene);
        }
    }
    Ok(GeneratedCorpus { data, decisions })
}

pub fn write_decisions(decisions: &[DecisionRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "scene_id,agent_id,label")?;
    for d in decisions {
        writeln!(w, "{},{},{}", d.scene_id, d.agent_id, d.label.as_str())?;
    }
    Ok(())
}

pub fn save_decisions(decisions: &[DecisionRecord], path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_decisions(decisions, &mut w)?;
    w.flush()
}

/// Counts how many distinct endpoint modes (clusters at least `separation`
/// metres apart, single linkage) each non-ego agent shows when scene `index`
/// is re-simulated with `draws` different decision streams. Returns the
/// largest count over the scene's agents.
pub fn endpoint_modes(config: &GenConfig, index: usize, draws: u64, separation: f64) -> usize {
    let runs: Vec<Scene> = (0..draws).map(|s| simulate_scene(config, index, s).0).collect();
    let n_agents = runs[0].agents.len();
    (1..n_agents)
        .map(|k| {
            let ends: Vec<Point> = runs.iter().map(|s| *s.agents[k].positions.last().expect("non-empty")).collect();
            count_clusters(&ends, separation)
        })
        .max()
        .unwrap_or(0)
}

fn count_clusters(points: &[Point], separation: f64) -> usize {
    let n = points.len();
    let mut label: Vec<usize> = (0..n).collect();
    fn find(label: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while label[r] != r {
            r = label[r];
        }
        label[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if norm(sub(points[i], points[j])) < separation {
                let (a, b) = (find(&mut label, i), find(&mut label, j));
                label[a] = b;
            }
        }
    }
    (0..n).filter(|&i| find(&mut label, i) == i).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walker(pos: Point, goal: Point, speed: f64) -> AgentState {
        let mut a = AgentState { pos, vel: [0.0, 0.0], goal, speed };
        a.vel = a.goal_velocity();
        a
    }

    fn far_ego() -> EgoState {
        EgoState { pos: [-500.0, 0.0], vel: [6.0, 0.0], cruise_speed: 6.0, yields: false }
    }

    #[test]
    fn equilibrium_walker_advances_v_dt() {
        let a = walker([0.0, 10.0], [0.0, 100.0], 1.4);
        let state = SimState { ego: far_ego(), agents: vec![a] };
        let next = step_dynamics(&state, &[Decision::YieldToVehicle], &DynamicsParams::default(), 0.5, 9.0, true);
        let p = next.agents[0].pos;
        assert!(p[0].abs() < 1e-12);
        assert!((p[1] - (10.0 + 1.4 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn yielding_to_head_on_ego_slows_down() {
        // pedestrian walking along the road straight at the vehicle
        let a = walker([12.0, 0.0], [-50.0, 0.0], 1.4);
        let ego = EgoState { pos: [0.0, 0.0], vel: [6.0, 0.0], cruise_speed: 6.0, yields: false };
        let state = SimState { ego, agents: vec![a] };
        assert!(time_to_conflict(&a, &ego, 4.0).unwrap() < 3.0);
        let next = step_dynamics(&state, &[Decision::YieldToVehicle], &DynamicsParams::default(), 0.5, 9.0, true);
        assert!(norm(next.agents[0].vel) < norm(a.vel));
    }

    #[test]
    fn crossing_before_speeds_up() {
        let a = walker([12.0, 0.0], [-50.0, 0.0], 1.4);
        let ego = EgoState { pos: [0.0, 0.0], vel: [6.0, 0.0], cruise_speed: 6.0, yields: false };
        let state = SimState { ego, agents: vec![a] };
        let next = step_dynamics(&state, &[Decision::CrossBefore], &DynamicsParams::default(), 0.5, 9.0, true);
        assert!(norm(next.agents[0].vel) > norm(a.vel));
    }

    #[test]
    fn zero_repulsion_matches_goal_only_motion() {
        let cfg = GenConfig { n_scenes: 5, ..GenConfig::default() };
        let params = DynamicsParams { k_repulse: 0.0, ..DynamicsParams::default() };
        let mut rng = scene_rng(3, 0, 0);
        let lay = layout(&cfg, &mut rng);
        let yields = vec![Decision::YieldToVehicle; lay.state.agents.len()];
        let goal_only = vec![Decision::Continue; lay.state.agents.len()];
        let (mut a, mut b) = (lay.state.clone(), lay.state.clone());
        for _ in 0..8 {
            a = step_dynamics(&a, &yields, &params, 0.5, 9.0, true);
            b = step_dynamics(&b, &goal_only, &params, 0.5, 9.0, true);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig { n_scenes: 0, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { yield_prob: 1.5, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { ped_speed: 0.0, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
        assert!(generate(&GenConfig { n_scenes: 0, ..GenConfig::default() }).is_err());
    }

    #[test]
    fn split_counts_cover_all_scenes() {
        let cfg = GenConfig { n_scenes: 10, ..GenConfig::default() };
        let corpus = generate(&cfg).unwrap();
        assert_eq!(corpus.data.train.len(), 7);
        assert_eq!(corpus.data.val.len(), 1);
        assert_eq!(corpus.data.test.len(), 2);
    }

    #[test]
    fn clusters_are_single_linkage() {
        assert_eq!(count_clusters(&[[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]], 1.0), 1);
        assert_eq!(count_clusters(&[[0.0, 0.0], [2.0, 0.0]], 1.0), 2);
    }
}
