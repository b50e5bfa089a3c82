//! Best-of-N displacement errors and kernel-density negative log-likelihood.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use thiserror::Error;

use crate::inference::PredictionSet;
use crate::scene::{distance, AgentKind, Point, Scene};

/// Isotropic bandwidth (m) used when the sample covariance is unusable.
pub const FALLBACK_BANDWIDTH: f64 = 1e-3;
/// Ridge added to the sample covariance before scaling.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("horizon {horizon} s is not a whole number of {dt} s steps")]
    NonIntegralHorizon { horizon: f64, dt: f64 },
    #[error("horizon {horizon} s needs {steps} future steps but only {pred_len} are available")]
    HorizonTooLong { horizon: f64, steps: usize, pred_len: usize },
    #[error("no samples for agent {agent_id} in scene {scene_id}")]
    MissingSamples { scene_id: String, agent_id: u64 },
    #[error("no predictions for scene {0}")]
    MissingScene(String),
}

/// Zero-based future step index for each horizon in seconds.
pub fn horizon_steps(horizons: &[f64], dt: f64, pred_len: usize) -> Result<Vec<usize>, MetricError> {
    horizons
        .iter()
        .map(|&h| {
            let ratio = h / dt;
            let steps = ratio.round();
            if steps < 1.0 || (ratio - steps).abs() > 1e-9 {
                return Err(MetricError::NonIntegralHorizon { horizon: h, dt });
            }
            let steps = steps as usize;
            if steps > pred_len {
                return Err(MetricError::HorizonTooLong { horizon: h, steps, pred_len });
            }
            Ok(steps - 1)
        })
        .collect()
}

/// Smallest displacement error at `step` over all samples.
pub fn fde_best_of_n(samples: &[Vec<Point>], gt: &[Point], step: usize) -> f64 {
    samples.iter().map(|s| distance(s[step], gt[step])).fold(f64::INFINITY, f64::min)
}

/// Smallest average displacement error over steps `0..=step`; each sample is
/// ranked by its own average.
pub fn ade_best_of_n(samples: &[Vec<Point>], gt: &[Point], step: usize) -> f64 {
    samples
        .iter()
        .map(|s| (0..=step).map(|t| distance(s[t], gt[t])).sum::<f64>() / (step + 1) as f64)
        .fold(f64::INFINITY, f64::min)
}

/// 2-D Gaussian kernel bandwidth matrix (row-major 2×2) for a set of points.
///
/// Scott's factor `N^(-1/6)` squared times the unbiased sample covariance
/// plus a small ridge. Falls back to an isotropic 1 mm bandwidth for fewer
/// than two points, identical points, or a non-positive-definite result.
pub fn kde_bandwidth(points: &[Point]) -> [f64; 4] {
    let fallback = [FALLBACK_BANDWIDTH.powi(2), 0.0, 0.0, FALLBACK_BANDWIDTH.powi(2)];
    let n = points.len();
    if n < 2 || points.iter().all(|p| p == &points[0]) {
        return fallback;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / nf;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let f2 = nf.powf(-1.0 / 3.0);
    let h = [
        f2 * (sxx / (nf - 1.0) + COVARIANCE_RIDGE),
        f2 * sxy / (nf - 1.0),
        f2 * sxy / (nf - 1.0),
        f2 * (syy / (nf - 1.0) + COVARIANCE_RIDGE),
    ];
    let det = h[0] * h[3] - h[1] * h[2];
    if !(det.is_finite() && det > 0.0 && h[0] > 0.0) {
        return fallback;
    }
    h
}

/// Negative log-density of `x` under the kernel density of `points`.
pub fn kde_nll_point(points: &[Point], x: Point) -> f64 {
    let h = kde_bandwidth(points);
    let det = h[0] * h[3] - h[1] * h[2];
    let inv = [h[3] / det, -h[1] / det, -h[2] / det, h[0] / det];
    let log_norm = -(2.0 * PI).ln() - 0.5 * det.ln();
    let exps: Vec<f64> = points
        .iter()
        .map(|p| {
            let (dx, dy) = (x[0] - p[0], x[1] - p[1]);
            let q = dx * (inv[0] * dx + inv[1] * dy) + dy * (inv[2] * dx + inv[3] * dy);
            log_norm - 0.5 * q
        })
        .collect();
    let max = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
    -(lse - (points.len() as f64).ln())
}

/// Kernel-density NLL of the ground truth, averaged over steps `0..=step`.
pub fn kde_nll(samples: &[Vec<Point>], gt: &[Point], step: usize) -> f64 {
    let total: f64 = (0..=step)
        .map(|t| {
            let pts: Vec<Point> = samples.iter().map(|s| s[t]).collect();
            kde_nll_point(&pts, gt[t])
        })
        .sum();
    total / (step + 1) as f64
}

/// Metrics of one scored agent, one entry per horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentMetrics {
    pub scene_id: String,
    pub agent_id: u64,
    pub kind: AgentKind,
    pub fde: Vec<f64>,
    pub ade: Vec<f64>,
    pub kde_nll: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub horizon: f64,
    pub fde: f64,
    pub ade: f64,
    pub kde_nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n_samples: usize,
    pub n_agents: usize,
    pub horizons: Vec<HorizonMetrics>,
    pub agents: Vec<AgentMetrics>,
}

pub fn agent_metrics(scene_id: &str, agent_id: u64, kind: AgentKind, samples: &[Vec<Point>], gt: &[Point], steps: &[usize]) -> AgentMetrics {
    AgentMetrics {
        scene_id: scene_id.to_string(),
        agent_id,
        kind,
        fde: steps.iter().map(|&s| fde_best_of_n(samples, gt, s)).collect(),
        ade: steps.iter().map(|&s| ade_best_of_n(samples, gt, s)).collect(),
        kde_nll: steps.iter().map(|&s| kde_nll(samples, gt, s)).collect(),
    }
}

impl MetricReport {
    /// Pools per-agent records; each split-level value is the mean over agents.
    pub fn from_agents(horizons: &[f64], n_samples: usize, agents: Vec<AgentMetrics>) -> Self {
        let n = agents.len().max(1) as f64;
        let horizons = horizons
            .iter()
            .enumerate()
            .map(|(h, &horizon)| HorizonMetrics {
                horizon,
                fde: agents.iter().map(|a| a.fde[h]).sum::<f64>() / n,
                ade: agents.iter().map(|a| a.ade[h]).sum::<f64>() / n,
                kde_nll: agents.iter().map(|a| a.kde_nll[h]).sum::<f64>() / n,
            })
            .collect();
        MetricReport { n_samples, n_agents: agents.len(), horizons, agents }
    }

    pub fn write_table(&self, mut w: impl Write, label: &str) -> std::io::Result<()> {
        writeln!(w, "{label}  (best of N={}, agents={})", self.n_samples, self.n_agents)?;
        writeln!(w, "{:>8} {:>10} {:>10} {:>10}", "horizon", "fde_m", "ade_m", "kde_nll")?;
        for h in &self.horizons {
            writeln!(w, "{:>7}s {:>10.2} {:>10.2} {:>10.2}", h.horizon, h.fde, h.ade, h.kde_nll)?;
        }
        Ok(())
    }

    pub fn write_csv_header(mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "variant,interactions_flag,horizon,fde,ade,kde_nll,n_agents")
    }

    pub fn write_csv_rows(&self, mut w: impl Write, variant: &str, interactions_flag: &str) -> std::io::Result<()> {
        for h in &self.horizons {
            writeln!(
                w,
                "{variant},{interactions_flag},{},{},{},{},{}",
                h.horizon, h.fde, h.ade, h.kde_nll, self.n_agents
            )?;
        }
        Ok(())
    }

    pub fn write_agents_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        write!(w, "scene_id,agent_id,kind")?;
        for h in &self.horizons {
            write!(w, ",fde_{0},ade_{0},kde_nll_{0}", h.horizon)?;
        }
        writeln!(w)?;
        for a in &self.agents {
            write!(w, "{},{},{}", a.scene_id, a.agent_id, a.kind)?;
            for h in 0..self.horizons.len() {
                write!(w, ",{},{},{}", a.fde[h], a.ade[h], a.kde_nll[h])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Scores every non-ego agent of every scene against its predicted samples.
pub fn evaluate(scenes: &[Scene], predictions: &[PredictionSet], horizons: &[f64]) -> Result<MetricReport, MetricError> {
    let by_id: HashMap<&str, &PredictionSet> = predictions.iter().map(|p| (p.scene_id.as_str(), p)).collect();
    let mut agents = Vec::new();
    let mut n_samples = usize::MAX;
    for scene in scenes {
        let steps = horizon_steps(horizons, scene.dt, scene.pred_len)?;
        let pred = by_id.get(scene.scene_id.as_str()).ok_or_else(|| MetricError::MissingScene(scene.scene_id.clone()))?;
        let mut scene_agents: Vec<_> = scene.agents.iter().filter(|a| !a.is_ego()).collect();
        scene_agents.sort_by_key(|a| a.id);
        for agent in scene_agents {
            let samples = pred
                .samples_for(agent.id)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| MetricError::MissingSamples { scene_id: scene.scene_id.clone(), agent_id: agent.id })?;
            n_samples = n_samples.min(samples.len());
            agents.push(agent_metrics(&scene.scene_id, agent.id, agent.kind, samples, scene.future(agent), &steps));
        }
    }
    if n_samples == usize::MAX {
        n_samples = 0;
    }
    Ok(MetricReport::from_agents(horizons, n_samples, agents))
}
