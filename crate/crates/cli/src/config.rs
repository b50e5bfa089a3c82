//! Run configuration: flat `key = value` text with dotted section prefixes.
//!
//! Later assignments (file, then `--set` flags, then dedicated flags)
//! override earlier ones. Unknown keys are errors.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use jointcvae::metrics::horizon_steps;
use jointcvae::model::{ModelConfig, Variant};
use jointcvae::scene::Split;
use jointcvae::synthgen::{GenConfig, InteractionMode};
use jointcvae::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// seconds after the current step
    pub horizons: Vec<f64>,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 20, horizons: vec![1.0, 2.0, 3.0], split: Split::Test }
    }
}

/// Input locations; unset paths default to files inside the output directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub scenes: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReproduceConfig {
    pub seeds: Vec<u64>,
    pub dense_scenes: usize,
    pub sparse_scenes: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], dense_scenes: 660, sparse_scenes: 660 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    pub reproduce: ReproduceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("run"),
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
            reproduce: ReproduceConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_mode(key: &str, value: &str) -> Result<InteractionMode, String> {
    match value {
        "dense" => Ok(InteractionMode::Dense),
        "sparse" => Ok(InteractionMode::Sparse),
        _ => Err(format!("bad value {value:?} for {key} (dense|sparse)")),
    }
}

fn parse_split(key: &str, value: &str) -> Result<Split, String> {
    match value {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("bad value {value:?} for {key} (train|val|test)")),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

impl RunConfig {
    /// Sizes small enough for an end-to-end pass in seconds.
    pub fn smoke(mut self) -> Self {
        self.gen.n_scenes = 40;
        self.train.steps = 20;
        self.train.batch_scenes = 4;
        self.train.eval_every = 10;
        self.train.eval_scenes = 4;
        self.train.eval_samples = 5;
        self.train.model = ModelConfig {
            hidden: 16,
            decoder_hidden: 16,
            latent: 4,
            context: 8,
            attn_hidden: 8,
            head_hidden: 8,
            ..self.train.model
        };
        self.eval.n_samples = 5;
        self.reproduce = ReproduceConfig { seeds: vec![self.seed], dense_scenes: 40, sparse_scenes: 40 };
        self
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let g = &mut self.gen;
        let d = &mut g.dynamics;
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "gen.n_scenes" => g.n_scenes = parse(key, v)?,
            "gen.mode" => g.mode = parse_mode(key, v)?,
            "gen.agents_min" => g.agents_per_scene.0 = parse(key, v)?,
            "gen.agents_max" => g.agents_per_scene.1 = parse(key, v)?,
            "gen.yield_prob" => g.yield_prob = parse(key, v)?,
            "gen.decision_noise" => g.decision_noise = parse(key, v)?,
            "gen.ego_speed" => g.ego_speed = parse(key, v)?,
            "gen.ped_speed" => g.ped_speed = parse(key, v)?,
            "gen.dt" => g.dt = parse(key, v)?,
            "gen.obs_len" => g.obs_len = parse(key, v)?,
            "gen.pred_len" => g.pred_len = parse(key, v)?,
            "gen.val_fraction" => g.val_fraction = parse(key, v)?,
            "gen.test_fraction" => g.test_fraction = parse(key, v)?,
            "gen.k_goal" => d.k_goal = parse(key, v)?,
            "gen.k_repulse" => d.k_repulse = parse(key, v)?,
            "gen.ttc0" => d.ttc0 = parse(key, v)?,
            "gen.a_max" => d.a_max = parse(key, v)?,
            "gen.speedup" => d.speedup = parse(key, v)?,
            "gen.conflict_radius" => d.conflict_radius = parse(key, v)?,
            "model.variant" => m.variant = v.parse::<Variant>().map_err(|e| e.to_string())?,
            "model.ego_conditioning" => m.ego_conditioning = parse(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.decoder_hidden" => m.decoder_hidden = parse(key, v)?,
            "model.latent" => m.latent = parse(key, v)?,
            "model.context" => m.context = parse(key, v)?,
            "model.attn_hidden" => m.attn_hidden = parse(key, v)?,
            "model.head_hidden" => m.head_hidden = parse(key, v)?,
            "train.beta" => t.beta = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lr_decay" => t.lr_decay = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_scenes" => t.batch_scenes = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.eval_scenes" => t.eval_scenes = parse(key, v)?,
            "train.eval_samples" => t.eval_samples = parse(key, v)?,
            "train.divergence_threshold" => t.divergence_threshold = parse(key, v)?,
            "eval.n_samples" => self.eval.n_samples = parse(key, v)?,
            "eval.horizons" => self.eval.horizons = parse_list(key, v)?,
            "eval.split" => self.eval.split = parse_split(key, v)?,
            "paths.scenes" => self.paths.scenes = Some(PathBuf::from(v)),
            "paths.checkpoint" => self.paths.checkpoint = Some(PathBuf::from(v)),
            "paths.predictions" => self.paths.predictions = Some(PathBuf::from(v)),
            "reproduce.seeds" => self.reproduce.seeds = parse_list(key, v)?,
            "reproduce.dense_scenes" => self.reproduce.dense_scenes = parse(key, v)?,
            "reproduce.sparse_scenes" => self.reproduce.sparse_scenes = parse(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies every assignment in `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), CliError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| CliError::Config(format!("{source}:{}: {m}", idx + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| at("expected key = value".into()))?;
            self.set(k.trim(), v).map_err(at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v).map_err(CliError::Config)
    }

    /// Pushes the shared seed into the generator and trainer.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.gen.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn Display| CliError::Config(e.to_string());
        self.gen.validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        if self.eval.n_samples == 0 {
            return Err(CliError::Config("eval.n_samples must be positive".into()));
        }
        if self.eval.horizons.is_empty() {
            return Err(CliError::Config("eval.horizons must not be empty".into()));
        }
        horizon_steps(&self.eval.horizons, self.gen.dt, self.gen.pred_len).map_err(|e| cfg(&e))?;
        if self.reproduce.seeds.is_empty() {
            return Err(CliError::Config("reproduce.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Every setting as `key = value` lines, in a fixed order.
    pub fn echo(&self) -> String {
        let g = &self.gen;
        let d = &g.dynamics;
        let t = &self.train;
        let m = &t.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("gen.n_scenes", g.n_scenes.to_string()),
            ("gen.mode", g.mode.to_string()),
            ("gen.agents_min", g.agents_per_scene.0.to_string()),
            ("gen.agents_max", g.agents_per_scene.1.to_string()),
            ("gen.yield_prob", g.yield_prob.to_string()),
            ("gen.decision_noise", g.decision_noise.to_string()),
            ("gen.ego_speed", g.ego_speed.to_string()),
            ("gen.ped_speed", g.ped_speed.to_string()),
            ("gen.dt", g.dt.to_string()),
            ("gen.obs_len", g.obs_len.to_string()),
            ("gen.pred_len", g.pred_len.to_string()),
            ("gen.val_fraction", g.val_fraction.to_string()),
            ("gen.test_fraction", g.test_fraction.to_string()),
            ("gen.k_goal", d.k_goal.to_string()),
            ("gen.k_repulse", d.k_repulse.to_string()),
            ("gen.ttc0", d.ttc0.to_string()),
            ("gen.a_max", d.a_max.to_string()),
            ("gen.speedup", d.speedup.to_string()),
            ("gen.conflict_radius", d.conflict_radius.to_string()),
            ("model.variant", m.variant.to_string()),
            ("model.ego_conditioning", m.ego_conditioning.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.decoder_hidden", m.decoder_hidden.to_string()),
            ("model.latent", m.latent.to_string()),
            ("model.context", m.context.to_string()),
            ("model.attn_hidden", m.attn_hidden.to_string()),
            ("model.head_hidden", m.head_hidden.to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_decay", t.lr_decay.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_scenes", t.batch_scenes.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_scenes", t.eval_scenes.to_string()),
            ("train.eval_samples", t.eval_samples.to_string()),
            ("train.divergence_threshold", t.divergence_threshold.to_string()),
            ("eval.n_samples", self.eval.n_samples.to_string()),
            ("eval.horizons", join(&self.eval.horizons)),
            ("eval.split", split_name(self.eval.split).to_string()),
        ];
        for (k, p) in [
            ("paths.scenes", path(&self.paths.scenes)),
            ("paths.checkpoint", path(&self.paths.checkpoint)),
            ("paths.predictions", path(&self.paths.predictions)),
        ] {
            if let Some(p) = p {
                pairs.push((k, p));
            }
        }
        pairs.push(("reproduce.seeds", join(&self.reproduce.seeds)));
        pairs.push(("reproduce.dense_scenes", self.reproduce.dense_scenes.to_string()));
        pairs.push(("reproduce.sparse_scenes", self.reproduce.sparse_scenes.to_string()));
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn scenes_path(&self) -> PathBuf {
        self.paths.scenes.clone().unwrap_or_else(|| self.out.join("scenes.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.paths.predictions.clone().unwrap_or_else(|| self.out.join("predictions.jsonl"))
    }
}
