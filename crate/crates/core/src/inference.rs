//! Forecasting by ancestral sampling through the prior and decoder.

use std::io::{BufRead, Write};
use std::path::Path;

use diffcore::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{decode, encode_past, sample_latent, AttentionChain, Bind, Model, ModelError, Net, PreparedScene};
use crate::scene::{distance, order_agents, AgentKind, Point, Scene};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("number of samples must be at least 1")]
    NoSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("line {line}: malformed prediction record: {message}")]
    Malformed { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSamples {
    pub id: u64,
    pub kind: AgentKind,
    /// observed positions up to and including the current step
    pub xy: Vec<Point>,
    /// one future trajectory per draw
    pub samples: Vec<Vec<Point>>,
    /// latent used for each draw
    pub z: Vec<Vec<f64>>,
}

/// N joint future draws for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    pub scene_id: String,
    pub dt: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub n_samples: usize,
    pub agents: Vec<AgentSamples>,
}

impl PredictionSet {
    pub fn samples_for(&self, agent_id: u64) -> Option<&Vec<Vec<Point>>> {
        self.agents.iter().find(|a| a.id == agent_id).map(|a| &a.samples)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prediction records always serialize")
    }
}

/// Knobs for the sampling path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingOptions {
    /// multiplies the standard-normal noise; 0 collapses every draw onto the prior mean
    pub noise_scale: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { noise_scale: 1.0 }
    }
}

/// Draws `n` joint futures in canonical agent order.
pub fn predict(scene: &Scene, model: &Model, n: usize, seed: u64) -> Result<PredictionSet, InferenceError> {
    let order: Vec<u64> = order_agents(scene).agents.iter().map(|a| a.id).collect();
    predict_with(scene, model, n, seed, &order, SamplingOptions::default())
}

/// Sampling with an explicit agent order.
///
/// Draw `k` uses its own random stream derived from `(seed, k)`, so a run with
/// more draws extends a run with fewer.
pub fn predict_with(
    scene: &Scene,
    model: &Model,
    n: usize,
    seed: u64,
    order: &[u64],
    options: SamplingOptions,
) -> Result<PredictionSet, InferenceError> {
    if n == 0 {
        return Err(InferenceError::NoSamples);
    }
    let prep = PreparedScene::with_order(scene, order, model.config.ego_conditioning)?.without_future();
    let agents_n = prep.n_agents();
    let latent = model.config.latent;
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, model, Bind::Frozen);
    let emb = encode_past(&mut tape, &net, &prep)?;
    let mark = tape.len();
    let mut samples = vec![Vec::with_capacity(n); agents_n];
    let mut latents = vec![Vec::with_capacity(n); agents_n];
    let rows: Vec<usize> = (0..agents_n).collect();
    for k in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut chain = AttentionChain::prior(&mut tape, &net, &emb)?;
        let mut z = Vec::with_capacity(agents_n);
        for i in 0..agents_n {
            let g = chain.step(&mut tape, &net.prior_head, i, latent)?;
            let noise: Vec<f64> =
                (0..latent).map(|_| options.noise_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let zi = sample_latent(&mut tape, &g, &noise)?;
            chain.push(&mut tape, zi)?;
            z.push(zi);
        }
        let decoded = decode(&mut tape, &net, &emb, &rows, &z, prep.pred_len)?;
        for i in 0..agents_n {
            samples[i].push(decoded.trajectory(&tape, i));
            latents[i].push(tape.value(z[i]).data().to_vec());
        }
        tape.truncate(mark);
    }
    let cur = scene.current_index();
    let agents = prep
        .ids
        .iter()
        .zip(&prep.kinds)
        .zip(samples.into_iter().zip(latents))
        .map(|((&id, &kind), (samples, z))| {
            let xy = scene.agent(id).map(|a| a.positions[..=cur].to_vec()).unwrap_or_default();
            AgentSamples { id, kind, xy, samples, z }
        })
        .collect();
    Ok(PredictionSet {
        scene_id: scene.scene_id.clone(),
        dt: scene.dt,
        obs_len: scene.obs_len,
        pred_len: scene.pred_len,
        n_samples: n,
        agents,
    })
}

/// Predicts every scene with the same seed.
pub fn predict_all(scenes: &[Scene], model: &Model, n: usize, seed: u64) -> Result<Vec<PredictionSet>, InferenceError> {
    scenes.iter().map(|s| predict(s, model, n, seed)).collect()
}

pub fn write_predictions(sets: &[PredictionSet], mut w: impl Write) -> std::io::Result<()> {
    for s in sets {
        writeln!(w, "{}", s.to_json())?;
    }
    Ok(())
}

pub fn save_predictions(sets: &[PredictionSet], path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_predictions(sets, &mut w)?;
    w.flush()
}

pub fn parse_predictions(r: impl BufRead) -> Result<Vec<PredictionSet>, InferenceError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: PredictionSet = serde_json::from_str(&line)
            .map_err(|e| InferenceError::Malformed { line: idx + 1, message: e.to_string() })?;
        if set.n_samples == 0 || set.agents.iter().any(|a| a.samples.len() != set.n_samples) {
            return Err(InferenceError::Malformed { line: idx + 1, message: "sample count mismatch".into() });
        }
        out.push(set);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionSet>, InferenceError> {
    parse_predictions(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Energy distance between two planar point sets.
pub fn energy_distance(a: &[Point], b: &[Point]) -> f64 {
    let mean_dist = |x: &[Point], y: &[Point]| {
        let mut s = 0.0;
        for p in x {
            for q in y {
                s += distance(*p, *q);
            }
        }
        s / (x.len() * y.len()) as f64
    };
    (2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderSensitivity {
    pub scene_id: String,
    pub orderings: usize,
    /// per agent id, mean endpoint energy distance to the canonical ordering
    pub per_agent: Vec<(u64, f64)>,
    pub mean_shift: f64,
}

/// Endpoint-distribution shift between the canonical order and `k` random
/// orders of the non-ego agents.
pub fn order_sensitivity(scene: &Scene, model: &Model, n: usize, seed: u64, k: usize) -> Result<OrderSensitivity, InferenceError> {
    let canonical: Vec<u64> = order_agents(scene).agents.iter().map(|a| a.id).collect();
    let base = predict_with(scene, model, n, seed, &canonical, SamplingOptions::default())?;
    let endpoints = |set: &PredictionSet, id: u64| -> Vec<Point> {
        set.samples_for(id).map(|s| s.iter().filter_map(|t| t.last().copied()).collect()).unwrap_or_default()
    };
    let (ego, others): (Vec<u64>, Vec<u64>) =
        canonical.iter().partition(|&&id| scene.agent(id).is_some_and(|a| a.is_ego()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let ids: Vec<u64> = base.agents.iter().map(|a| a.id).collect();
    let mut totals = vec![0.0; ids.len()];
    let runs = if others.len() < 2 { 0 } else { k };
    for _ in 0..runs {
        let mut shuffled = others.clone();
        shuffled.shuffle(&mut rng);
        let order: Vec<u64> = ego.iter().chain(&shuffled).copied().collect();
        let alt = predict_with(scene, model, n, seed, &order, SamplingOptions::default())?;
        for (t, &id) in totals.iter_mut().zip(&ids) {
            *t += energy_distance(&endpoints(&base, id), &endpoints(&alt, id));
        }
    }
    let per_agent: Vec<(u64, f64)> =
        ids.iter().zip(&totals).map(|(&id, &t)| (id, if runs == 0 { 0.0 } else { t / runs as f64 })).collect();
    let scored: Vec<f64> = per_agent
        .iter()
        .filter(|(id, _)| !ego.contains(id))
        .map(|(_, s)| *s)
        .collect();
    let mean_shift = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    Ok(OrderSensitivity { scene_id: scene.scene_id.clone(), orderings: runs, per_agent, mean_shift })
}
