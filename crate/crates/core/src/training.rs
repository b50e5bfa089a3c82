//! Objective and optimization loop.

use std::io::Write;

use diffcore::{Array, DiffError, Tape, Var};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::inference::{predict, InferenceError};
use crate::metrics::fde_best_of_n;
use crate::model::{
    decode, encode_future, encode_past, gaussian_log_likelihood, kl_divergence, log_density, sample_latent, AttentionChain,
    Bind, Decoded, GaussianVar, Model, ModelConfig, ModelError, Net, ParamGroup, PreparedScene, LOG_SIGMA2_MAX,
    LOG_SIGMA2_MIN,
};
use crate::scene::{Scene, SplitDataset};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training split has no usable scenes")]
    EmptyTrain,
    #[error("non-finite value at step {step} in scene {scene_id} ({term})")]
    NonFinite { step: usize, scene_id: String, term: String },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64, last_good: Box<Model> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub beta: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub steps: usize,
    pub batch_scenes: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// validation every this many steps; 0 disables
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub eval_samples: usize,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            beta: 0.10,
            lr: 3e-3,
            lr_decay: 0.9999,
            steps: 2000,
            batch_scenes: 8,
            seed: 1,
            clip_norm: 10.0,
            eval_every: 200,
            eval_scenes: 50,
            eval_samples: 20,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.batch_scenes == 0 {
            return bad("batch_scenes must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn effective_beta(&self) -> f64 {
        self.model.variant.effective_beta(self.beta)
    }
}

/// Tape handles for one scene's objective.
pub struct SceneGraph {
    /// −(log-likelihood − β·KL)
    pub loss: Var,
    /// decoder log-likelihood of the ground truth
    pub recon: Var,
    pub kl: Var,
    pub kl_terms: Vec<Var>,
    /// Σ log q(z_i | ...)
    pub log_q: Var,
    /// Σ log p(z_i | ...)
    pub log_p: Var,
    pub posteriors: Vec<GaussianVar>,
    pub priors: Vec<GaussianVar>,
    pub z: Vec<Var>,
    pub decoded: Decoded,
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var, DiffError> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Builds the single-sample objective of one prepared scene.
///
/// `noise[i]` is the standard-normal draw for the i-th ordered agent.
pub fn build_objective(
    tape: &mut Tape,
    net: &Net,
    scene: &PreparedScene,
    noise: &[Vec<f64>],
    beta: f64,
) -> Result<SceneGraph, ModelError> {
    let n = scene.n_agents();
    let latent = net.config.latent;
    let targets = scene.targets.as_ref().ok_or(ModelError::MissingFuture)?;
    let mut emb = encode_past(tape, net, scene)?;
    encode_future(tape, net, scene, &mut emb)?;
    let mut post_chain = AttentionChain::posterior(tape, net, &emb)?;
    let mut prior_chain = AttentionChain::prior(tape, net, &emb)?;
    let (mut posteriors, mut priors, mut z, mut kl_terms) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut lq, mut lp) = (Vec::new(), Vec::new());
    for (i, eps) in noise.iter().enumerate().take(n) {
        let q = post_chain.step(tape, &net.post_head, i, latent)?;
        let p = prior_chain.step(tape, &net.prior_head, i, latent)?;
        let zi = sample_latent(tape, &q, eps)?;
        post_chain.push(tape, zi)?;
        prior_chain.push(tape, zi)?;
        kl_terms.push(kl_divergence(tape, &q, &p)?);
        lq.push(log_density(tape, &q, zi)?);
        lp.push(log_density(tape, &p, zi)?);
        posteriors.push(q);
        priors.push(p);
        z.push(zi);
    }
    let rows: Vec<usize> = (0..n).collect();
    let decoded = decode(tape, net, &emb, &rows, &z, scene.pred_len)?;
    let recon = gaussian_log_likelihood(tape, net, &decoded, targets)?;
    let kl = sum_scalars(tape, &kl_terms)?;
    let log_q = sum_scalars(tape, &lq)?;
    let log_p = sum_scalars(tape, &lp)?;
    let weighted = tape.scale(kl, beta)?;
    let loss = tape.sub(weighted, recon)?;
    Ok(SceneGraph { loss, recon, kl, kl_terms, log_q, log_p, posteriors, priors, z, decoded })
}

pub fn draw_noise(rng: &mut impl Rng, n_agents: usize, latent: usize) -> Vec<Vec<f64>> {
    (0..n_agents).map(|_| (0..latent).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Values of one scene's objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_per_agent: Vec<f64>,
    pub beta: f64,
}

impl ElboBreakdown {
    pub fn elbo(&self) -> f64 {
        self.recon - self.beta * self.kl
    }
}

fn numeric_error(e: ModelError, step: usize, scene_id: &str) -> TrainError {
    match e {
        ModelError::Numeric(DiffError::NonFinite { op }) => {
            TrainError::NonFinite { step, scene_id: scene_id.to_string(), term: format!("{op} output") }
        }
        other => TrainError::Model(other),
    }
}

/// Single-sample objective of `scene` with noise from `rng`.
pub fn elbo(model: &Model, scene: &Scene, rng: &mut impl Rng, beta: f64) -> Result<ElboBreakdown, TrainError> {
    let prep = PreparedScene::new(scene, model.config.ego_conditioning)?;
    let noise = draw_noise(rng, prep.n_agents(), model.config.latent);
    elbo_prepared(model, &prep, &noise, beta)
}

pub fn elbo_prepared(model: &Model, prep: &PreparedScene, noise: &[Vec<f64>], beta: f64) -> Result<ElboBreakdown, TrainError> {
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, model, Bind::Frozen);
    let g = build_objective(&mut tape, &net, prep, noise, beta).map_err(|e| numeric_error(e, 0, &prep.scene_id))?;
    Ok(ElboBreakdown {
        loss: tape.scalar(g.loss),
        recon: tape.scalar(g.recon),
        kl: tape.scalar(g.kl),
        kl_per_agent: g.kl_terms.iter().map(|&k| tape.scalar(k)).collect(),
        beta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    /// log of the mean importance weight
    pub iw_bound: f64,
    /// mean of the single-draw bounds over the same draws
    pub mean_elbo: f64,
    /// every single-draw bound
    pub elbos: Vec<f64>,
    /// analytic per-agent KL for every draw
    pub kl_per_agent: Vec<Vec<f64>>,
}

/// Importance-weighted bound with `k` posterior draws, with unit KL weight.
pub fn importance_weighted_bound(model: &Model, scene: &Scene, k: usize, rng: &mut impl Rng) -> Result<BoundReport, TrainError> {
    assert!(k > 0, "need at least one draw");
    let prep = PreparedScene::new(scene, model.config.ego_conditioning)?;
    let mut log_w = Vec::with_capacity(k);
    let mut kls = Vec::with_capacity(k);
    for _ in 0..k {
        let noise = draw_noise(rng, prep.n_agents(), model.config.latent);
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, model, Bind::Frozen);
        let g = build_objective(&mut tape, &net, &prep, &noise, 1.0).map_err(|e| numeric_error(e, 0, &prep.scene_id))?;
        log_w.push(tape.scalar(g.recon) + tape.scalar(g.log_p) - tape.scalar(g.log_q));
        kls.push(g.kl_terms.iter().map(|&v| tape.scalar(v)).collect());
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_w.iter().map(|w| (w - max).exp()).sum::<f64>().ln();
    Ok(BoundReport {
        iw_bound: lse - (k as f64).ln(),
        mean_elbo: log_w.iter().sum::<f64>() / k as f64,
        elbos: log_w,
        kl_per_agent: kls,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// encoders, posterior, decoder, observation noise
    A,
    /// prior
    B,
}

impl Phase {
    pub fn of_step(step: usize) -> Self {
        if step % 2 == 0 {
            Phase::A
        } else {
            Phase::B
        }
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Phase::A => ParamGroup::Main,
            Phase::B => ParamGroup::Prior,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A => "A",
            Phase::B => "B",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub phase: Phase,
    /// batch mean of −(recon − β·kl)
    pub loss: f64,
    /// batch mean log-likelihood
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub step: usize,
    pub val_fde: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub beta: f64,
    pub entries: Vec<LogEntry>,
    pub evals: Vec<EvalEntry>,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,phase,loss,recon,kl,lr")?;
        for e in &self.entries {
            writeln!(w, "{},{},{:?},{:?},{:?},{:?}", e.step, e.phase.as_str(), e.loss, e.recon, e.kl, e.lr)?;
        }
        Ok(())
    }

    pub fn write_eval_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,val_fde")?;
        for e in &self.evals {
            writeln!(w, "{},{:?}", e.step, e.val_fde)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| [e.loss, e.recon, e.kl, e.lr].iter().all(|v| v.is_finite()))
            && self.evals.iter().all(|e| e.val_fde.is_finite())
    }
}

pub struct TrainOutput {
    /// parameters with the best validation score (the final ones without validation)
    pub model: Model,
    pub final_model: Model,
    pub log: TrainLog,
}

/// Mean best-of-N final displacement over non-ego agents.
pub fn validation_fde(model: &Model, scenes: &[Scene], n: usize, seed: u64) -> Result<f64, TrainError> {
    let (mut total, mut count) = (0.0, 0usize);
    for scene in scenes {
        let pred = predict(scene, model, n, seed)?;
        let last = scene.pred_len - 1;
        for agent in scene.agents.iter().filter(|a| !a.is_ego()) {
            if let Some(samples) = pred.samples_for(agent.id) {
                total += fde_best_of_n(samples, scene.future(agent), last);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

pub fn train(data: &SplitDataset, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let model = Model::new(config.model.clone(), config.seed)?;
    train_from(model, data, config)
}

/// Continues optimization from `model`.
pub fn train_from(mut model: Model, data: &SplitDataset, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let beta = config.effective_beta();
    let mut log = TrainLog { beta, ..Default::default() };
    if config.steps == 0 {
        return Ok(TrainOutput { final_model: model.clone(), model, log });
    }
    let prepared: Vec<PreparedScene> = data
        .train
        .iter()
        .filter_map(|s| PreparedScene::new(s, model.config.ego_conditioning).ok())
        .filter(|p| p.targets.is_some())
        .collect();
    if prepared.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let val: Vec<Scene> = data.val.iter().take(config.eval_scenes).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x7472_6169_6e);
    let mut adam = crate::optim::Adam::new(&model.params);
    let sigma_index = model.params.position("log_sigma2");
    let batch = config.batch_scenes.min(prepared.len());
    let mut best: Option<(f64, Model)> = None;
    let mut lr = config.lr;
    for step in 0..config.steps {
        let phase = Phase::of_step(step);
        let picks = sample_indices(&mut rng, prepared.len(), batch).into_vec();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        let (mut loss_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for &idx in &picks {
            let prep = &prepared[idx];
            let noise = draw_noise(&mut rng, prep.n_agents(), model.config.latent);
            let mut tape = Tape::new();
            let net = Net::bind(&mut tape, &model, Bind::Group(phase.group()));
            let g = build_objective(&mut tape, &net, prep, &noise, beta).map_err(|e| numeric_error(e, step, &prep.scene_id))?;
            let loss = tape.scalar(g.loss);
            if !loss.is_finite() || loss > config.divergence_threshold {
                return Err(TrainError::Diverged { step, loss, last_good: Box::new(best.map_or(model, |b| b.1)) });
            }
            loss_sum += loss;
            recon_sum += tape.scalar(g.recon);
            kl_sum += tape.scalar(g.kl);
            let back = tape.backward(g.loss).map_err(|e| numeric_error(e.into(), step, &prep.scene_id))?;
            for (slot, &var) in grads.iter_mut().zip(&net.vars) {
                if let Some(gv) = back.get(var) {
                    let acc = slot.get_or_insert_with(|| vec![0.0; gv.len()]);
                    acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b / batch as f64);
                }
            }
        }
        let b = batch as f64;
        log.entries.push(LogEntry { step, phase, loss: loss_sum / b, recon: recon_sum / b, kl: kl_sum / b, lr });
        crate::optim::clip_global_norm(&mut grads, config.clip_norm);
        adam.step(&mut model.params, &grads, lr);
        if let Some(i) = sigma_index {
            let projected = model.params.value(i).map(|v| v.clamp(LOG_SIGMA2_MIN, LOG_SIGMA2_MAX));
            model.params.set_index(i, projected);
        }
        if !model.params.all_finite() {
            return Err(TrainError::Diverged { step, loss: f64::NAN, last_good: Box::new(best.map_or(model, |b| b.1)) });
        }
        lr *= config.lr_decay;
        let last = step + 1 == config.steps;
        if !val.is_empty() && config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last) {
            let fde = validation_fde(&model, &val, config.eval_samples, config.seed)?;
            log.evals.push(EvalEntry { step: step + 1, val_fde: fde });
            if best.as_ref().is_none_or(|(b, _)| fde < *b) {
                best = Some((fde, model.clone()));
            }
        }
    }
    let best_model = best.map_or_else(|| model.clone(), |b| b.1);
    Ok(TrainOutput { model: best_model, final_model: model, log })
}

/// Gradient of a scene's loss with every parameter differentiable, flattened
/// per parameter in store order.
pub fn loss_gradient(model: &Model, prep: &PreparedScene, noise: &[Vec<f64>], beta: f64) -> Result<(f64, Vec<Array>), TrainError> {
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, model, Bind::All);
    let g = build_objective(&mut tape, &net, prep, noise, beta).map_err(|e| numeric_error(e, 0, &prep.scene_id))?;
    let back = tape.backward(g.loss).map_err(|e| numeric_error(e.into(), 0, &prep.scene_id))?;
    Ok((tape.scalar(g.loss), net.vars.iter().map(|&v| back.wrt(v)).collect()))
}
