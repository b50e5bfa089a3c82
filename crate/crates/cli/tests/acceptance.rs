//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-3 and 7-9 are exact properties and fail the test when violated.
//! Criteria 4-6 are empirical reproduction targets on synthetic corpora; they
//! are reported, and only fail the test when `ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use jointcvae::analysis::{accel_vs_distance, closest_approach_cdf, default_edges};
use jointcvae::inference::{predict_with, SamplingOptions};
use jointcvae::metrics::{ade_best_of_n, fde_best_of_n, kde_nll_point};
use jointcvae::model::{Model, ModelConfig, ParamGroup, PreparedScene, Variant};
use jointcvae::scene::{order_agents, Point, Scene, Split};
use jointcvae::synthgen::{generate, simulate_scene, GenConfig, InteractionMode};
use jointcvae::training::{draw_noise, elbo_prepared, importance_weighted_bound, loss_gradient, train_from, TrainConfig};
use jointcvae_cli::config::RunConfig;
use jointcvae_cli::experiment::{run_grid, Cell, CellResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-6;
const GRAD_RTOL: f64 = 1e-3;
const KDE_TOL: f64 = 1e-9;
const ORDER_MARGIN: f64 = 0.05;
const GAP_RATIO: f64 = 3.0;
const SPARSE_NOISE: f64 = 0.01;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    empirical: bool,
}

fn report(o: &Outcome) {
    println!("{} criterion {} ({}): {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
}

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig { variant, ego_conditioning: true, hidden: 12, decoder_hidden: 10, latent: 4, context: 8, attn_hidden: 6, head_hidden: 8 }
}

/// Every parameter drawn from U(-0.3, 0.3); observation noise inside its range.
fn random_model(variant: Variant, seed: u64) -> Model {
    let mut model = Model::new(small_model(variant), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    for name in model.params.names().to_vec() {
        let mut v = model.params.get(&name).unwrap().as_ref().clone();
        for x in v.data_mut() {
            *x = if name == "log_sigma2" { rng.random_range(-2.0..-0.5) } else { rng.random_range(-0.3..0.3) };
        }
        model.params.set(&name, v).unwrap();
    }
    model
}

fn dense_scene(index: usize, agents: usize, seed: u64) -> Scene {
    let cfg = GenConfig { seed, agents_per_scene: (agents, agents), ..GenConfig::default() };
    simulate_scene(&cfg, index, 0).0
}

// ---------------------------------------------------------------- criterion 1

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut failures, mut checked) = (0.0f64, 0, 0);
    for trial in 0..10u64 {
        let variant = Variant::ALL[trial as usize % 3];
        let model = random_model(variant, 200 + trial);
        let scene = dense_scene(trial as usize, rng.random_range(1..4), 7);
        let prep = PreparedScene::new(&scene, true).unwrap();
        let noise = draw_noise(&mut rng, prep.n_agents(), model.config.latent);
        let beta = if variant == Variant::Cvae { 1.0 } else { 0.1 };
        let (loss, grads) = loss_gradient(&model, &prep, &noise, beta).unwrap();
        // round-off floor of the central difference itself
        let resolution = loss.abs().max(1.0) * f64::EPSILON / FD_STEP;
        for _ in 0..20 {
            let p = rng.random_range(0..model.params.len());
            let k = rng.random_range(0..model.params.value(p).len());
            let name = model.params.names()[p].clone();
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut v = m.params.value(p).as_ref().clone();
                v.data_mut()[k] += delta;
                m.params.set(&name, v).unwrap();
                elbo_prepared(&m, &prep, &noise, beta).unwrap().loss
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            let analytic = grads[p].data()[k];
            let gap = (analytic - numeric).abs();
            let rel = gap / analytic.abs().max(numeric.abs()).max(1e-12);
            checked += 1;
            if gap >= resolution {
                worst = worst.max(rel);
            }
            if rel >= GRAD_RTOL && gap >= resolution {
                failures += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "gradient correctness",
        pass: failures == 0 && secs < 60.0,
        detail: format!("{checked} checks, {failures} over rel {GRAD_RTOL}, worst rel {worst:.2e}, {secs:.1}s"),
        empirical: false,
    }
}

// ---------------------------------------------------------------- criterion 2

fn elbo_validity(model: &Model, probes: &[Scene]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut below, mut negative_kl, mut min_gap) = (0, 0, f64::INFINITY);
    let mut single_over = 0;
    for scene in probes {
        let r = importance_weighted_bound(model, scene, 50, &mut rng).unwrap();
        let gap = r.iw_bound - r.mean_elbo;
        min_gap = min_gap.min(gap);
        if gap < 0.0 {
            below += 1;
        }
        // an independent single-sample estimate for reference
        let single = jointcvae::training::elbo(model, scene, &mut rng, 1.0).unwrap();
        if single.elbo() > r.iw_bound {
            single_over += 1;
        }
        negative_kl += r.kl_per_agent.iter().flatten().filter(|&&k| k < 0.0).count();
        negative_kl += single.kl_per_agent.iter().filter(|&&k| k < 0.0).count();
    }
    Outcome {
        id: 2,
        name: "ELBO validity",
        pass: below == 0 && negative_kl == 0 && probes.len() == 20,
        detail: format!(
            "{} probes, IW(K=50) below mean single-draw bound on {below}, min gap {min_gap:.3}, \
             independent draws above IW {single_over}/20, negative per-agent KL {negative_kl}",
            probes.len()
        ),
        empirical: false,
    }
}

// ---------------------------------------------------------------- criterion 3

/// Direct mixture density with covariance N^(-1/3)(S + 1e-6 I).
fn mixture_nll(points: &[Point], x: Point) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        sxx += (p[0] - mx) * (p[0] - mx) / (n - 1.0);
        sxy += (p[0] - mx) * (p[1] - my) / (n - 1.0);
        syy += (p[1] - my) * (p[1] - my) / (n - 1.0);
    }
    let f2 = n.powf(-1.0 / 3.0);
    let (a, b, c) = (f2 * (sxx + 1e-6), f2 * sxy, f2 * (syy + 1e-6));
    let det = a * c - b * b;
    let logs: Vec<f64> = points
        .iter()
        .map(|p| {
            let (dx, dy) = (x[0] - p[0], x[1] - p[1]);
            let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
            -0.5 * q - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln()
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(top + (logs.iter().map(|l| (l - top).exp()).sum::<f64>() / n).ln())
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let pt = |s: f64, rng: &mut ChaCha8Rng| -> Point { [rng.random_range(-s..s), rng.random_range(-s..s)] };
    let mut kde_worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..30);
        let pts: Vec<Point> = (0..n).map(|_| pt(3.0, &mut rng)).collect();
        let x = pt(3.0, &mut rng);
        let want = mixture_nll(&pts, x);
        kde_worst = kde_worst.max((kde_nll_point(&pts, x) - want).abs() / want.abs().max(1.0));
    }
    let (mut brute_bad, mut monotone_bad) = (0, 0);
    for _ in 0..100 {
        let gt: Vec<Point> = (0..6).map(|_| pt(5.0, &mut rng)).collect();
        let samples: Vec<Vec<Point>> = (0..20).map(|_| (0..6).map(|_| pt(5.0, &mut rng)).collect()).collect();
        for step in 0..6 {
            let mut bf = f64::INFINITY;
            let mut ba = f64::INFINITY;
            for s in &samples {
                bf = bf.min((s[step][0] - gt[step][0]).hypot(s[step][1] - gt[step][1]));
                let tot: f64 = (0..=step).map(|t| (s[t][0] - gt[t][0]).hypot(s[t][1] - gt[t][1])).sum();
                ba = ba.min(tot / (step + 1) as f64);
            }
            if (fde_best_of_n(&samples, &gt, step) - bf).abs() > 1e-12 || (ade_best_of_n(&samples, &gt, step) - ba).abs() > 1e-12 {
                brute_bad += 1;
            }
            for n in 1..20 {
                if fde_best_of_n(&samples[..n + 1], &gt, step) > fde_best_of_n(&samples[..n], &gt, step)
                    || ade_best_of_n(&samples[..n + 1], &gt, step) > ade_best_of_n(&samples[..n], &gt, step)
                {
                    monotone_bad += 1;
                }
            }
        }
    }
    Outcome {
        id: 3,
        name: "metric oracles",
        pass: kde_worst < KDE_TOL && brute_bad == 0 && monotone_bad == 0,
        detail: format!("kde worst rel diff {kde_worst:.1e}, brute-force mismatches {brute_bad}, monotonicity violations {monotone_bad}"),
        empirical: false,
    }
}

// ---------------------------------------------------------- criteria 4, 5, 6

/// Reduced widths keep nine-run experiments within minutes on one core.
fn experiment_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train = TrainConfig {
        model: ModelConfig { hidden: 64, decoder_hidden: 64, latent: 16, context: 32, attn_hidden: 32, head_hidden: 32, ..ModelConfig::default() },
        steps: 1500,
        batch_scenes: 8,
        eval_every: 250,
        eval_scenes: 50,
        eval_samples: 20,
        ..TrainConfig::default()
    };
    // 500 train / 60 val / 100 test
    cfg.gen.val_fraction = 60.0 / 660.0;
    cfg.gen.test_fraction = 100.0 / 660.0;
    cfg.reproduce.seeds = vec![1, 2, 3];
    cfg.reproduce.dense_scenes = 660;
    cfg.reproduce.sparse_scenes = 660;
    cfg.eval.n_samples = 20;
    cfg.eval.horizons = vec![1.0, 2.0, 3.0];
    cfg.eval.split = Split::Test;
    cfg.resolve().unwrap()
}

fn experiment_cells() -> Vec<Cell> {
    let d = InteractionMode::Dense;
    let s = InteractionMode::Sparse;
    vec![
        Cell { mode: d, variant: Variant::Cvae, ego: true },
        Cell { mode: d, variant: Variant::BetaCvae, ego: true },
        Cell { mode: d, variant: Variant::JointBetaCvae, ego: true },
        Cell { mode: d, variant: Variant::JointBetaCvae, ego: false },
        Cell { mode: s, variant: Variant::JointBetaCvae, ego: true },
        Cell { mode: s, variant: Variant::JointBetaCvae, ego: false },
    ]
}

fn lookup<'a>(results: &'a [CellResult], mode: InteractionMode, variant: Variant, ego: bool) -> &'a CellResult {
    results.iter().find(|r| r.cell == Cell { mode, variant, ego }).expect("cell was run")
}

fn ablation_ordering(results: &[CellResult], secs: f64) -> Outcome {
    let d = InteractionMode::Dense;
    let per_seed = |v: Variant| -> Vec<String> {
        lookup(results, d, v, true).reports.iter().map(|r| format!("{:.3}", r.horizons.last().unwrap().fde)).collect()
    };
    let cvae = lookup(results, d, Variant::Cvae, true).final_fde();
    let beta = lookup(results, d, Variant::BetaCvae, true).final_fde();
    let joint = lookup(results, d, Variant::JointBetaCvae, true).final_fde();
    let pass = joint < beta && beta < cvae && joint <= (1.0 - ORDER_MARGIN) * beta;
    Outcome {
        id: 4,
        name: "ablation ordering",
        pass,
        detail: format!(
            "best-of-20 FDE@3s joint {joint:.3} {:?}, beta_cvae {beta:.3} {:?}, cvae {cvae:.3} {:?}; joint vs beta {:+.1}% (need <= -{:.0}%); experiments {secs:.0}s",
            per_seed(Variant::JointBetaCvae),
            per_seed(Variant::BetaCvae),
            per_seed(Variant::Cvae),
            100.0 * (joint / beta - 1.0),
            100.0 * ORDER_MARGIN
        ),
        empirical: true,
    }
}

fn interaction_gap(results: &[CellResult]) -> Outcome {
    let gain = |mode| {
        let off = lookup(results, mode, Variant::JointBetaCvae, false).final_fde();
        let on = lookup(results, mode, Variant::JointBetaCvae, true).final_fde();
        (off, on, (off - on) / off)
    };
    let (d_off, d_on, dense) = gain(InteractionMode::Dense);
    let (s_off, s_on, sparse) = gain(InteractionMode::Sparse);
    let pass = sparse.abs() <= SPARSE_NOISE && dense >= GAP_RATIO * sparse.abs() && dense > 0.0;
    Outcome {
        id: 5,
        name: "interaction-sensitivity gap",
        pass,
        detail: format!(
            "ego-conditioning gain dense {:+.2}% ({d_off:.3} -> {d_on:.3}), sparse {:+.2}% ({s_off:.3} -> {s_on:.3}); need sparse within 1% and dense >= 3x",
            100.0 * dense,
            100.0 * sparse
        ),
        empirical: true,
    }
}

fn proximity_shape(results: &[CellResult]) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for r in results.iter().filter(|r| r.cell.mode == InteractionMode::Dense) {
        let occupied: Vec<_> = r.proximity.occupied().collect();
        let (near, far) = (occupied.first().unwrap(), occupied.last().unwrap());
        let ok = near.value.unwrap() > far.value.unwrap();
        pass &= ok;
        parts.push(format!(
            "{}: [{}-{}m] {:.3} vs [{}-{}m] {:.3}",
            r.cell.label(),
            near.low,
            near.high,
            near.value.unwrap(),
            far.low,
            far.high,
            far.value.unwrap()
        ));
    }
    Outcome { id: 6, name: "error-vs-proximity shape", pass, detail: parts.join("; "), empirical: true }
}

// ---------------------------------------------------------------- criterion 7

fn corpus_diagnostics() -> Outcome {
    let edges = default_edges();
    let corpus = |mode| generate(&GenConfig { seed: 1, n_scenes: 660, mode, ..GenConfig::default() }).unwrap().data;
    let dense = corpus(InteractionMode::Dense);
    let sparse = corpus(InteractionMode::Sparse);
    let all = |d: &jointcvae::scene::SplitDataset| d.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>();
    let (dense, sparse) = (all(&dense), all(&sparse));
    let d_cdf = closest_approach_cdf(&dense).fraction_within(10.0);
    let s_cdf = closest_approach_cdf(&sparse).fraction_within(20.0);
    let d_peak = accel_vs_distance(&dense, &edges).peak().map(|b| b.high);
    let s_peak = accel_vs_distance(&sparse, &edges).peak().map(|b| b.high);
    let pass = d_cdf >= 0.5 && s_cdf <= 0.05 && d_peak.is_some_and(|h| h <= 10.0) && s_peak.is_none_or(|h| h > 10.0);
    Outcome {
        id: 7,
        name: "corpus diagnostics",
        pass,
        detail: format!(
            "dense CDF(10m) {d_cdf:.3}, sparse CDF(20m) {s_cdf:.3}, dense accel peak bin ends {d_peak:?} m, sparse accel peak bin ends {s_peak:?} m"
        ),
        empirical: false,
    }
}

// ---------------------------------------------------------------- criterion 8

fn files_of(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name != "timing.log" && name != "config.txt" {
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    out
}

fn pipeline(root: &Path) -> BTreeMap<String, BTreeMap<String, Vec<u8>>> {
    let bin = env!("CARGO_BIN_EXE_jointcvae");
    let data = root.join("data");
    let scenes = format!("paths.scenes={}", data.join("scenes.jsonl").display());
    let ckpt = format!("paths.checkpoint={}", root.join("train/model.ckpt").display());
    let preds = format!("paths.predictions={}", root.join("predict/predictions.jsonl").display());
    let steps: [(&str, Vec<String>); 4] = [
        ("generate", vec![]),
        ("train", vec![scenes.clone()]),
        ("predict", vec![scenes.clone(), ckpt]),
        ("evaluate", vec![scenes, preds]),
    ];
    let mut trees = BTreeMap::new();
    for (cmd, sets) in steps {
        let dir = if cmd == "generate" { data.clone() } else { root.join(cmd) };
        let mut c = Command::new(bin);
        c.args([cmd, "--smoke", "--seed", "5", "--out"]).arg(&dir);
        for s in &sets {
            c.args(["--set", s]);
        }
        let status = c.output().unwrap();
        assert!(status.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&status.stderr));
        trees.insert(cmd.to_string(), files_of(&dir));
    }
    trees
}

fn determinism() -> Outcome {
    let base: PathBuf = std::env::temp_dir().join(format!("acceptance-det-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    let a = pipeline(&base.join("a"));
    let b = pipeline(&base.join("b"));
    let mut differing = Vec::new();
    for (cmd, files) in &a {
        if files != &b[cmd] || files.is_empty() {
            differing.push(cmd.clone());
        }
    }
    let counted: usize = a.values().map(|f| f.len()).sum();
    let _ = std::fs::remove_dir_all(&base);
    Outcome {
        id: 8,
        name: "determinism",
        pass: differing.is_empty(),
        detail: format!("generate/train/predict/evaluate, {counted} output files compared, differing: {differing:?}"),
        empirical: false,
    }
}

// ---------------------------------------------------------------- criterion 9

fn nudge(scene: &Scene, id: u64, past: bool, future: bool) -> Scene {
    let mut s = scene.clone();
    let cur = s.current_index();
    let a = s.agents.iter_mut().find(|a| a.id == id).unwrap();
    for (t, p) in a.positions.iter_mut().enumerate() {
        if (t <= cur && past) || (t > cur && future) {
            p[0] += 0.6;
            p[1] -= 0.3 + 0.05 * t as f64;
        }
    }
    s
}

fn structure_suite() -> Outcome {
    let mut problems = Vec::new();
    let model = random_model(Variant::JointBetaCvae, 909);
    for idx in 0..5 {
        let scene = dense_scene(idx, 4, 9);
        let order: Vec<u64> = order_agents(&scene).agents.iter().map(|a| a.id).collect();
        let prep = |s: &Scene| PreparedScene::with_order(s, &order, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(idx as u64);
        let noise = draw_noise(&mut rng, order.len(), model.config.latent);
        let base_kl = elbo_prepared(&model, &prep(&scene), &noise, 0.1).unwrap().kl_per_agent;
        let sample = |s: &Scene| predict_with(s, &model, 4, 3, &order, SamplingOptions::default()).unwrap();
        let base_pred = sample(&scene);
        // agent i is blind to every later agent j, past and future
        for j in 1..order.len() {
            let moved = nudge(&scene, order[j], true, true);
            let kl = elbo_prepared(&model, &prep(&moved), &noise, 0.1).unwrap().kl_per_agent;
            let pred = sample(&moved);
            for i in 0..j {
                if kl[i] != base_kl[i] || pred.agents[i] != base_pred.agents[i] {
                    problems.push(format!("scene {idx}: agent {i} moved with agent {j}"));
                }
            }
            if kl[j] == base_kl[j] {
                problems.push(format!("scene {idx}: agent {j} ignored its own trajectory"));
            }
        }
        // futures reach the posterior only
        let mut hidden = scene.clone();
        for id in &order {
            hidden = nudge(&hidden, *id, false, true);
        }
        if sample(&hidden) != base_pred {
            problems.push(format!("scene {idx}: sampling read a future"));
        }
        if elbo_prepared(&model, &prep(&hidden), &noise, 0.1).unwrap().kl_per_agent == base_kl {
            problems.push(format!("scene {idx}: posterior ignored futures"));
        }
    }
    // the prior-only phase leaves every other parameter untouched
    let data = generate(&GenConfig { seed: 4, n_scenes: 20, ..GenConfig::default() }).unwrap().data;
    for v in Variant::ALL {
        let init = random_model(v, 77);
        let cfg = |steps| TrainConfig { model: init.config.clone(), steps, batch_scenes: 4, eval_every: 0, ..TrainConfig::default() };
        let one = train_from(init.clone(), &data, &cfg(1)).unwrap().final_model;
        let two = train_from(init.clone(), &data, &cfg(2)).unwrap().final_model;
        if two.params.checksum(ParamGroup::Main) != one.params.checksum(ParamGroup::Main) {
            problems.push(format!("{v}: prior phase changed non-prior parameters"));
        }
        if two.params.checksum(ParamGroup::Prior) == one.params.checksum(ParamGroup::Prior) {
            problems.push(format!("{v}: prior phase changed nothing"));
        }
        if one.params.checksum(ParamGroup::Prior) != init.params.checksum(ParamGroup::Prior) {
            problems.push(format!("{v}: main phase changed prior parameters"));
        }
    }
    Outcome {
        id: 9,
        name: "causality/structure",
        pass: problems.is_empty(),
        detail: if problems.is_empty() { "all invariants hold on 5 scenes and 3 variants".into() } else { problems.join("; ") },
        empirical: false,
    }
}

fn main() {
    let mut outcomes = Vec::new();
    let o = gradient_correctness();
    report(&o);
    outcomes.push(o);

    let cfg = experiment_config();
    let started = Instant::now();
    let results = run_grid(&cfg, &experiment_cells(), |m| eprintln!("acceptance: training {m}")).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let joint = {
        let data = generate(&jointcvae_cli::experiment::corpus_config(&cfg.gen, InteractionMode::Dense, 660, 1)).unwrap().data;
        let mut tc = cfg.train.clone();
        tc.seed = 1;
        let model = jointcvae::training::train(&data, &tc).unwrap().model;
        let probes: Vec<Scene> = data.test.iter().take(20).cloned().collect();
        (model, probes)
    };
    let o = elbo_validity(&joint.0, &joint.1);
    report(&o);
    outcomes.push(o);

    for o in [metric_oracles(), ablation_ordering(&results, secs), interaction_gap(&results), proximity_shape(&results), corpus_diagnostics(), determinism(), structure_suite()] {
        report(&o);
        outcomes.push(o);
    }

    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass && (strict || !o.empirical)).map(|o| o.id).collect();
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if !failed.is_empty() {
        eprintln!("acceptance: asserted criteria failing: {failed:?}");
        std::process::exit(1);
    }
}
