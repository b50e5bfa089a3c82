//! Interaction-density diagnostics: closest approach to the ego, maximum
//! acceleration by distance, interaction tagging and error by proximity.

use std::collections::HashMap;
use std::io::Write;

use crate::metrics::AgentMetrics;
use crate::scene::{distance, kinematics, Scene};

/// Observable surrogate of an interaction: an acceleration of at least
/// `a_min` while within `d_max` of the ego.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractionThresholds {
    pub a_min: f64,
    pub d_max: f64,
}

impl Default for InteractionThresholds {
    fn default() -> Self {
        Self { a_min: 1.0, d_max: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionTag {
    pub scene_id: String,
    pub agent_id: u64,
    pub interacting: bool,
    pub closest_approach: f64,
    pub max_accel_near: f64,
}

/// Distance to the ego at every shared grid point.
fn ego_distances(scene: &Scene, agent_index: usize) -> Vec<f64> {
    let Some(ego) = scene.ego() else { return Vec::new() };
    scene.agents[agent_index]
        .positions
        .iter()
        .zip(&ego.positions)
        .map(|(p, e)| distance(*p, *e))
        .collect()
}

pub fn closest_approach(scene: &Scene, agent_index: usize) -> f64 {
    ego_distances(scene, agent_index).into_iter().fold(f64::INFINITY, f64::min)
}

fn accel_magnitudes(scene: &Scene, agent_index: usize) -> Vec<f64> {
    match kinematics(&scene.agents[agent_index].positions, scene.dt) {
        Ok((_, acc)) => acc.iter().map(|a| a[0].hypot(a[1])).collect(),
        Err(_) => Vec::new(),
    }
}

pub fn tag_agent(scene: &Scene, agent_index: usize, th: &InteractionThresholds) -> InteractionTag {
    let dists = ego_distances(scene, agent_index);
    let accs = accel_magnitudes(scene, agent_index);
    let max_accel_near = dists
        .iter()
        .zip(&accs)
        .filter(|(d, _)| **d <= th.d_max)
        .map(|(_, a)| *a)
        .fold(0.0, f64::max);
    let interacting = dists.iter().zip(&accs).any(|(d, a)| *d <= th.d_max && *a >= th.a_min);
    InteractionTag {
        scene_id: scene.scene_id.clone(),
        agent_id: scene.agents[agent_index].id,
        interacting,
        closest_approach: dists.into_iter().fold(f64::INFINITY, f64::min),
        max_accel_near,
    }
}

/// Tags every non-ego agent, sorted by (scene, agent id) so the output does
/// not depend on agent order.
pub fn tag_interactions<'a>(
    scenes: impl IntoIterator<Item = &'a Scene>,
    th: &InteractionThresholds,
) -> Vec<InteractionTag> {
    let mut tags: Vec<InteractionTag> = scenes
        .into_iter()
        .flat_map(|s| (0..s.agents.len()).filter(|&i| !s.agents[i].is_ego()).map(move |i| tag_agent(s, i, th)))
        .collect();
    tags.sort_by(|a, b| a.scene_id.cmp(&b.scene_id).then(a.agent_id.cmp(&b.agent_id)));
    tags
}

pub fn scene_has_interaction(scene: &Scene, th: &InteractionThresholds) -> bool {
    (0..scene.agents.len()).any(|i| !scene.agents[i].is_ego() && tag_agent(scene, i, th).interacting)
}

/// Default analysis bins: 0–50 m in 2.5 m steps.
pub fn default_edges() -> Vec<f64> {
    (0..=20).map(|k| k as f64 * 2.5).collect()
}

fn bin_of(edges: &[f64], d: f64) -> Option<usize> {
    if d < edges[0] {
        return None;
    }
    edges.windows(2).position(|w| d >= w[0] && d < w[1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveBin {
    pub low: f64,
    pub high: f64,
    /// `None` when no sample fell in the bin
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub bins: Vec<CurveBin>,
}

impl Curve {
    fn from_groups(edges: &[f64], groups: &[Vec<f64>]) -> Self {
        let bins = edges
            .windows(2)
            .zip(groups)
            .map(|(w, g)| CurveBin {
                low: w[0],
                high: w[1],
                value: (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64),
                count: g.len(),
            })
            .collect();
        Curve { bins }
    }

    /// Bin containing distance `d`.
    pub fn bin_at(&self, d: f64) -> Option<&CurveBin> {
        self.bins.iter().find(|b| d >= b.low && d < b.high)
    }

    pub fn occupied(&self) -> impl Iterator<Item = &CurveBin> {
        self.bins.iter().filter(|b| b.value.is_some())
    }

    /// Occupied bin with the largest value.
    pub fn peak(&self) -> Option<&CurveBin> {
        self.occupied().max_by(|a, b| a.value.partial_cmp(&b.value).expect("finite values"))
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "bin_low,bin_high,value,count")?;
        for b in &self.bins {
            let value = b.value.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", b.low, b.high, value, b.count)?;
        }
        Ok(())
    }
}

/// Empirical distribution of per-agent closest approach to the ego.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosestApproachCdf {
    /// ascending closest-approach distances, one per non-ego agent
    pub distances: Vec<f64>,
}

impl ClosestApproachCdf {
    /// Fraction of agents whose closest approach is at most `d`.
    pub fn fraction_within(&self, d: f64) -> f64 {
        if self.distances.is_empty() {
            return 0.0;
        }
        let k = self.distances.partition_point(|&x| x <= d);
        k as f64 / self.distances.len() as f64
    }

    /// Cumulative fraction at each bin's upper edge; `count` is the number of
    /// agents whose closest approach falls in the bin.
    pub fn to_curve(&self, edges: &[f64]) -> Curve {
        let bins = edges
            .windows(2)
            .map(|w| CurveBin {
                low: w[0],
                high: w[1],
                value: Some(self.fraction_within(w[1])),
                count: self.distances.iter().filter(|&&d| d >= w[0] && d < w[1]).count(),
            })
            .collect();
        Curve { bins }
    }
}

pub fn closest_approach_cdf<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> ClosestApproachCdf {
    let mut distances: Vec<f64> = scenes
        .into_iter()
        .flat_map(|s| (0..s.agents.len()).filter(|&i| !s.agents[i].is_ego()).map(move |i| closest_approach(s, i)))
        .collect();
    distances.sort_by(f64::total_cmp);
    ClosestApproachCdf { distances }
}

/// Mean over agents of the agent's maximum acceleration magnitude while it is
/// within each distance bin of the ego.
pub fn accel_vs_distance<'a>(scenes: impl IntoIterator<Item = &'a Scene>, edges: &[f64]) -> Curve {
    let mut groups = vec![Vec::new(); edges.len() - 1];
    for s in scenes {
        for i in (0..s.agents.len()).filter(|&i| !s.agents[i].is_ego()) {
            let accs = accel_magnitudes(s, i);
            let mut per_bin: HashMap<usize, f64> = HashMap::new();
            for (d, a) in ego_distances(s, i).into_iter().zip(accs) {
                if let Some(b) = bin_of(edges, d) {
                    let e = per_bin.entry(b).or_insert(0.0);
                    *e = e.max(a);
                }
            }
            let mut visited: Vec<_> = per_bin.into_iter().collect();
            visited.sort_by_key(|(b, _)| *b);
            for (b, a) in visited {
                groups[b].push(a);
            }
        }
    }
    Curve::from_groups(edges, &groups)
}

/// Mean best-of-N FDE (at horizon index `horizon`) binned by each agent's
/// closest approach to the ego.
pub fn error_vs_proximity(records: &[AgentMetrics], tags: &[InteractionTag], edges: &[f64], horizon: usize) -> Curve {
    let closest: HashMap<(&str, u64), f64> =
        tags.iter().map(|t| ((t.scene_id.as_str(), t.agent_id), t.closest_approach)).collect();
    let mut groups = vec![Vec::new(); edges.len() - 1];
    for r in records {
        let Some(&d) = closest.get(&(r.scene_id.as_str(), r.agent_id)) else { continue };
        if let Some(b) = bin_of(edges, d) {
            groups[b].push(r.fde[horizon]);
        }
    }
    Curve::from_groups(edges, &groups)
}
