mod common;

use common::*;
use jointcvae::inference::*;
use jointcvae::model::*;
use jointcvae::scene::{order_agents, AgentKind, Scene};
use jointcvae::synthgen::{generate, GenConfig};
use jointcvae::training::{train, TrainConfig};

fn canonical(scene: &Scene) -> Vec<u64> {
    order_agents(scene).agents.iter().map(|a| a.id).collect()
}

#[test]
fn fresh_model_predicts_standing_still() {
    let scene = dense_scene(1, 3);
    let model = Model::new(tiny_config(Variant::JointBetaCvae), 4).unwrap();
    let set = predict(&scene, &model, 7, 1).unwrap();
    assert_eq!(set.n_samples, 7);
    assert_eq!(set.agents.len(), 4);
    for a in &set.agents {
        let here = *a.xy.last().unwrap();
        assert_eq!(a.samples.len(), 7);
        assert!(a.samples.iter().all(|s| s.len() == scene.pred_len && s.iter().all(|p| *p == here)));
    }
}

#[test]
fn same_seed_same_predictions() {
    let scene = dense_scene(2, 3);
    let model = random_model(Variant::JointBetaCvae, 5);
    assert_eq!(predict(&scene, &model, 10, 9).unwrap(), predict(&scene, &model, 10, 9).unwrap());
    assert_ne!(predict(&scene, &model, 10, 9).unwrap(), predict(&scene, &model, 10, 10).unwrap());
}

#[test]
fn zero_noise_collapses_every_draw() {
    let scene = dense_scene(3, 2);
    let model = random_model(Variant::JointBetaCvae, 6);
    let set = predict_with(&scene, &model, 6, 1, &canonical(&scene), SamplingOptions { noise_scale: 0.0 }).unwrap();
    for a in &set.agents {
        assert!(a.samples.iter().all(|s| *s == a.samples[0]));
        assert!(a.z.iter().all(|z| *z == a.z[0]));
    }
    let noisy = predict(&scene, &model, 6, 1).unwrap();
    assert!(noisy.agents.iter().all(|a| a.samples[0] != a.samples[1]));
}

#[test]
fn zero_samples_is_an_error() {
    let scene = dense_scene(4, 2);
    let model = random_model(Variant::BetaCvae, 7);
    assert!(matches!(predict(&scene, &model, 0, 1), Err(InferenceError::NoSamples)));
}

#[test]
fn more_draws_extend_fewer() {
    let scene = dense_scene(5, 3);
    let model = random_model(Variant::JointBetaCvae, 8);
    let few = predict(&scene, &model, 5, 21).unwrap();
    let many = predict(&scene, &model, 12, 21).unwrap();
    for (a, b) in few.agents.iter().zip(&many.agents) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.samples[..], b.samples[..5]);
        assert_eq!(a.z[..], b.z[..5]);
    }
}

#[test]
fn futures_are_never_read() {
    let scene = dense_scene(6, 3);
    let mut scrambled = scene.clone();
    let cur = scene.current_index();
    for a in &mut scrambled.agents {
        for p in a.positions.iter_mut().skip(cur + 1) {
            *p = [1e3, -1e3];
        }
    }
    for v in Variant::ALL {
        let model = random_model(v, 9);
        assert_eq!(predict(&scene, &model, 4, 2).unwrap(), predict(&scene.clone(), &model, 4, 2).unwrap());
        assert_eq!(predict(&scene, &model, 4, 2).unwrap(), predict(&scrambled, &model, 4, 2).unwrap());
    }
}

#[test]
fn ego_is_sampled_first() {
    let scene = dense_scene(7, 2);
    let model = random_model(Variant::JointBetaCvae, 10);
    let set = predict(&scene, &model, 3, 1).unwrap();
    assert_eq!(set.agents[0].kind, AgentKind::EgoVehicle);
    assert_eq!(set.agents[0].samples.len(), 3);
    let mut no_ego = model.clone();
    no_ego.config.ego_conditioning = false;
    let set = predict(&scene, &no_ego, 3, 1).unwrap();
    assert!(set.agents.iter().all(|a| a.kind != AgentKind::EgoVehicle));
}

#[test]
fn prediction_json_round_trips() {
    let scene = dense_scene(8, 2);
    let model = random_model(Variant::JointBetaCvae, 11);
    let sets = vec![predict(&scene, &model, 3, 1).unwrap(), predict(&dense_scene(9, 1), &model, 3, 1).unwrap()];
    let mut buf = Vec::new();
    write_predictions(&sets, &mut buf).unwrap();
    let back = parse_predictions(buf.as_slice()).unwrap();
    assert_eq!(back, sets);
    let text = String::from_utf8(buf).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["scene_id", "dt", "obs_len", "pred_len", "n_samples", "agents"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let bad = text.replacen("\"n_samples\":3", "\"n_samples\":4", 1);
    assert!(matches!(parse_predictions(bad.as_bytes()), Err(InferenceError::Malformed { line: 1, .. })));
}

#[test]
fn single_agent_scene_has_no_order_shift() {
    let scene = dense_scene(10, 1);
    let model = random_model(Variant::JointBetaCvae, 12);
    let r = order_sensitivity(&scene, &model, 10, 1, 5).unwrap();
    assert_eq!(r.mean_shift, 0.0);
    assert_eq!(r.orderings, 0);
}

#[test]
fn fresh_model_has_no_order_shift() {
    let scene = dense_scene(11, 4);
    let model = Model::new(tiny_config(Variant::JointBetaCvae), 1).unwrap();
    let r = order_sensitivity(&scene, &model, 10, 1, 5).unwrap();
    assert_eq!(r.orderings, 5);
    assert_eq!(r.mean_shift, 0.0);
}

#[test]
fn trained_model_order_report_is_finite() {
    let cfg = GenConfig { n_scenes: 20, seed: 3, agents_per_scene: (2, 3), ..GenConfig::default() };
    let data = generate(&cfg).unwrap().data;
    let config = TrainConfig { model: tiny_config(Variant::JointBetaCvae), steps: 30, batch_scenes: 4, eval_every: 0, ..TrainConfig::default() };
    let model = train(&data, &config).unwrap().model;
    let scene = data.train.iter().find(|s| s.agents.len() >= 4).unwrap();
    let r = order_sensitivity(scene, &model, 10, 1, 3).unwrap();
    assert_eq!(r.orderings, 3);
    assert!(r.mean_shift.is_finite() && r.mean_shift >= 0.0);
    assert!(r.per_agent.iter().all(|(_, s)| s.is_finite()));
}

#[test]
fn energy_distance_fixtures() {
    let a = [[0.0, 0.0], [1.0, 0.0]];
    assert_eq!(energy_distance(&a, &a), 0.0);
    // single points: 2|a-b|
    assert!((energy_distance(&[[0.0, 0.0]], &[[3.0, 4.0]]) - 10.0).abs() < 1e-12);
    let shifted: Vec<_> = a.iter().map(|p| [p[0] + 5.0, p[1]]).collect();
    assert!(energy_distance(&a, &shifted) > energy_distance(&a, &[[0.5, 0.0]]));
}
