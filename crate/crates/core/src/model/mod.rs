//! Joint latent-variable trajectory model and its independent-agent ablations.

mod network;
mod params;

use std::fmt;
use std::str::FromStr;

use diffcore::{Array, DiffError};
use thiserror::Error;

use crate::scene::{order_agents, AgentKind, Point, Scene};

pub use network::{
    decode, encode_future, encode_past, gaussian_log_likelihood, kl_divergence, log_density, posterior_step, prior_step,
    sample_latent, select_rows, AttentionChain, Bind, Decoded, Embeddings, GaussianVar, Net,
};
pub use params::{
    group_of, read_checkpoint, write_checkpoint, Init, ParamGroup, ParamStore, LOG_SIGMA2_MAX, LOG_SIGMA2_MIN,
};

pub const PAST_FEATURES: usize = 7;
pub const FUTURE_FEATURES: usize = 4;
pub const POS_SCALE: f64 = 10.0;
pub const VEL_SCALE: f64 = 5.0;
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model variant {0:?} (expected cvae, beta_cvae or joint_beta_cvae)")]
    UnknownVariant(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("future encoding requested for a scene without futures")]
    MissingFuture,
    #[error("no parameter named {0:?}")]
    UnknownParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("scene has no modeled agents")]
    EmptyScene,
    #[error(transparent)]
    Numeric(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Cvae,
    BetaCvae,
    JointBetaCvae,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cvae, Variant::BetaCvae, Variant::JointBetaCvae];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cvae => "cvae",
            Variant::BetaCvae => "beta_cvae",
            Variant::JointBetaCvae => "joint_beta_cvae",
        }
    }

    pub fn uses_attention(self) -> bool {
        self == Variant::JointBetaCvae
    }

    pub fn learns_noise(self) -> bool {
        self != Variant::Cvae
    }

    /// KL weight actually used: the plain variant always uses 1.
    pub fn effective_beta(self, beta: f64) -> f64 {
        match self {
            Variant::Cvae => 1.0,
            _ => beta,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cvae" => Ok(Variant::Cvae),
            "beta_cvae" => Ok(Variant::BetaCvae),
            "joint_beta_cvae" | "joint" => Ok(Variant::JointBetaCvae),
            _ => Err(ModelError::UnknownVariant(s.to_string())),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// when false the ego is dropped from the modeled agents
    pub ego_conditioning: bool,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub latent: usize,
    pub context: usize,
    pub attn_hidden: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::JointBetaCvae,
            ego_conditioning: true,
            hidden: 128,
            decoder_hidden: 128,
            latent: 32,
            context: 64,
            attn_hidden: 64,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("hidden", self.hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("latent", self.latent),
            ("context", self.context),
            ("attn_hidden", self.attn_hidden),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub(crate) fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("ego_conditioning", self.ego_conditioning.to_string()),
            ("hidden", self.hidden.to_string()),
            ("decoder_hidden", self.decoder_hidden.to_string()),
            ("latent", self.latent.to_string()),
            ("context", self.context.to_string()),
            ("attn_hidden", self.attn_hidden.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
        ]
    }

    pub(crate) fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ModelError> {
        let mut c = ModelConfig::default();
        let bad = |k: &str, v: &str| ModelError::Checkpoint(format!("bad value {v:?} for {k}"));
        for (k, v) in pairs {
            let dim = || v.parse::<usize>().map_err(|_| bad(k, v));
            match k.as_str() {
                "variant" => c.variant = v.parse()?,
                "ego_conditioning" => c.ego_conditioning = v.parse().map_err(|_| bad(k, v))?,
                "hidden" => c.hidden = dim()?,
                "decoder_hidden" => c.decoder_hidden = dim()?,
                "latent" => c.latent = dim()?,
                "context" => c.context = dim()?,
                "attn_hidden" => c.attn_hidden = dim()?,
                "head_hidden" => c.head_hidden = dim()?,
                _ => return Err(ModelError::Checkpoint(format!("unknown header key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// A model variant with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ParamStore::initialize(&config, seed);
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&self.config, &self.params, f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let (config, params) = read_checkpoint(std::io::BufReader::new(f))?;
        Ok(Self { config, params })
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &Model) -> Result<usize, ModelError> {
        let mut copied = 0;
        for (name, value) in other.params.iter() {
            if self.params.get(name).is_some() {
                self.params.set(name, value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Builds a freshly initialized variant by name.
pub fn build_variant(kind: &str, hyper: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    let variant: Variant = kind.parse()?;
    Model::new(hyper.clone().with_variant(variant), seed)
}

/// Numeric model inputs for one scene, agents in canonical order.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: String,
    pub ids: Vec<u64>,
    pub kinds: Vec<AgentKind>,
    /// position at the current step
    pub locations: Vec<Point>,
    pub dt: f64,
    pub pred_len: usize,
    /// per past step, `[n, PAST_FEATURES]`
    pub past: Vec<Array>,
    /// per future step, `[n, FUTURE_FEATURES]`
    pub future: Option<Vec<Array>>,
    /// per future step, ground-truth positions `[n, 2]`
    pub targets: Option<Vec<Array>>,
}

impl PreparedScene {
    /// Canonically orders the scene and extracts features, including futures.
    pub fn new(scene: &Scene, ego_conditioning: bool) -> Result<Self, ModelError> {
        let ordered = order_agents(scene);
        let order: Vec<u64> = ordered.agents.iter().map(|a| a.id).collect();
        Self::with_order(scene, &order, ego_conditioning)
    }

    /// Like [`PreparedScene::new`] with an explicit agent order.
    pub fn with_order(scene: &Scene, order: &[u64], ego_conditioning: bool) -> Result<Self, ModelError> {
        let agents: Vec<_> = order
            .iter()
            .filter_map(|&id| scene.agent(id))
            .filter(|a| ego_conditioning || !a.is_ego())
            .collect();
        if agents.is_empty() {
            return Err(ModelError::EmptyScene);
        }
        let n = agents.len();
        let cur = scene.current_index();
        let mut past = Vec::with_capacity(cur + 1);
        for t in 0..=cur {
            let mut data = Vec::with_capacity(n * PAST_FEATURES);
            for a in &agents {
                let p = a.positions[t];
                let v = if t == 0 {
                    if cur == 0 {
                        [0.0, 0.0]
                    } else {
                        step_velocity(a.positions[0], a.positions[1], scene.dt)
                    }
                } else {
                    step_velocity(a.positions[t - 1], p, scene.dt)
                };
                data.extend_from_slice(&[p[0] / POS_SCALE, p[1] / POS_SCALE, v[0] / VEL_SCALE, v[1] / VEL_SCALE]);
                data.extend_from_slice(&a.kind.one_hot());
            }
            past.push(Array::new(vec![n, PAST_FEATURES], data).expect("feature layout"));
        }
        let locations: Vec<Point> = agents.iter().map(|a| a.positions[cur]).collect();
        let has_future = agents.iter().all(|a| a.positions.len() >= cur + 1 + scene.pred_len);
        let (future, targets) = if has_future && scene.pred_len > 0 {
            let mut feats = Vec::with_capacity(scene.pred_len);
            let mut targets = Vec::with_capacity(scene.pred_len);
            for t in cur + 1..cur + 1 + scene.pred_len {
                let mut f = Vec::with_capacity(n * FUTURE_FEATURES);
                let mut y = Vec::with_capacity(n * 2);
                for (a, loc) in agents.iter().zip(&locations) {
                    let p = a.positions[t];
                    let v = step_velocity(a.positions[t - 1], p, scene.dt);
                    f.extend_from_slice(&[
                        (p[0] - loc[0]) / POS_SCALE,
                        (p[1] - loc[1]) / POS_SCALE,
                        v[0] / VEL_SCALE,
                        v[1] / VEL_SCALE,
                    ]);
                    y.extend_from_slice(&p);
                }
                feats.push(Array::new(vec![n, FUTURE_FEATURES], f).expect("feature layout"));
                targets.push(Array::new(vec![n, 2], y).expect("target layout"));
            }
            (Some(feats), Some(targets))
        } else {
            (None, None)
        };
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            ids: agents.iter().map(|a| a.id).collect(),
            kinds: agents.iter().map(|a| a.kind).collect(),
            locations,
            dt: scene.dt,
            pred_len: scene.pred_len,
            past,
            future,
            targets,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.ids.len()
    }

    /// Drops ground-truth futures so only the forecasting path is usable.
    pub fn without_future(mut self) -> Self {
        self.future = None;
        self.targets = None;
        self
    }
}

fn step_velocity(a: Point, b: Point, dt: f64) -> Point {
    [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt]
}

/// Diagonal Gaussian over the latent space, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Closed-form KL(self ‖ other).
    pub fn kl(&self, other: &GaussianLatent) -> f64 {
        assert_eq!(self.dim(), other.dim(), "latent dimensions differ");
        let mut total = 0.0;
        for k in 0..self.dim() {
            let (mq, lq, mp, lp) = (self.mean[k], self.log_var[k], other.mean[k], other.log_var[k]);
            let x = lq - lp;
            total += 0.5 * ((x.exp_m1() - x) + (mq - mp).powi(2) / lp.exp());
        }
        total
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), x)| -0.5 * (ln2pi + lv + (x - m).powi(2) / lv.exp()))
            .sum()
    }

    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.log_var).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
    }
}
