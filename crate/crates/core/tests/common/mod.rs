#![allow(dead_code)]

use diffcore::Array;
use jointcvae::model::{Model, ModelConfig, Variant};
use jointcvae::scene::{Agent, AgentKind, Scene};
use jointcvae::synthgen::{simulate_scene, GenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ego_conditioning: true,
        hidden: 8,
        decoder_hidden: 9,
        latent: 4,
        context: 6,
        attn_hidden: 5,
        head_hidden: 7,
    }
}

/// Model whose every parameter (including the zero-initialized heads) holds
/// small random values, so no output is trivially constant.
pub fn random_model(variant: Variant, seed: u64) -> Model {
    let mut model = Model::new(tiny_config(variant), seed).unwrap();
    randomize(&mut model, seed);
    model
}

pub fn randomize(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = model.params.names().to_vec();
    for name in names {
        let cur = model.params.get(&name).unwrap();
        let shape = cur.shape().to_vec();
        let data: Vec<f64> = if name == "log_sigma2" {
            (0..cur.len()).map(|_| rng.random_range(-2.0..-0.5)).collect()
        } else {
            (0..cur.len()).map(|_| rng.random_range(-0.4..0.4)).collect()
        };
        model.params.set(&name, Array::new(shape, data).unwrap()).unwrap();
    }
}

/// A generated dense scene with 1 ego and `peds` other agents.
pub fn dense_scene(index: usize, peds: usize) -> Scene {
    let cfg = GenConfig { agents_per_scene: (peds, peds), ..GenConfig::default() };
    simulate_scene(&cfg, index, 0).0
}

pub fn straight_agent(id: u64, kind: AgentKind, start: [f64; 2], vel: [f64; 2], len: usize, dt: f64) -> Agent {
    Agent {
        id,
        kind,
        positions: (0..len).map(|t| [start[0] + vel[0] * t as f64 * dt, start[1] + vel[1] * t as f64 * dt]).collect(),
    }
}

pub fn scene_of(agents: Vec<Agent>) -> Scene {
    Scene { scene_id: "fixture".into(), dt: 0.5, obs_len: 1, pred_len: 6, agents }
}

pub fn noise(seed: u64, n: usize, latent: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jointcvae::training::draw_noise(&mut rng, n, latent)
}

/// Relative error with a floor that keeps near-zero gradients from
/// amplifying finite-difference round-off.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central-difference check: the relative error must be below `rtol`, unless
/// the absolute gap is under the round-off resolution of the difference
/// quotient itself (|f| times machine epsilon over the step).
pub fn fd_agrees(analytic: f64, numeric: f64, f: f64, eps: f64, rtol: f64) -> bool {
    let resolution = f.abs().max(1.0) * f64::EPSILON / eps;
    rel_err(analytic, numeric) < rtol || (analytic - numeric).abs() < resolution
}
