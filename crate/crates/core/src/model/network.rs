use diffcore::{gru_cell, Array, GruParams, Tape, Var};

use super::params::{group_of, ParamGroup};
use super::{GaussianLatent, Model, ModelConfig, ModelError, PreparedScene, LOG_VAR_MAX, LOG_VAR_MIN, POS_SCALE};

type Result<T> = std::result::Result<T, ModelError>;

/// Which parameters enter the tape as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Frozen,
    Group(ParamGroup),
    All,
}

pub struct Attention {
    pub w_q: Var,
    pub w_k: Var,
    pub w_rel: Var,
    pub b: Var,
    pub w_s: Var,
    pub b_s: Var,
    pub w_v: Var,
    pub b_v: Var,
}

pub struct Head {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Model parameters placed on a tape.
pub struct Net {
    pub config: ModelConfig,
    /// tape handles aligned with the store order
    pub vars: Vec<Var>,
    pub enc_past: GruParams,
    pub enc_future: GruParams,
    pub post_attn: Option<Attention>,
    pub post_null: Var,
    pub post_head: Head,
    pub prior_attn: Option<Attention>,
    pub prior_null: Var,
    pub prior_head: Head,
    pub dec_attn: Option<Attention>,
    pub dec_null: Var,
    pub dec_init_w: Var,
    pub dec_init_b: Var,
    pub dec_gru: GruParams,
    pub dec_out_w: Var,
    pub dec_out_b: Var,
    /// `None` means unit observation variance
    pub log_sigma2: Option<Var>,
    /// replace every cross-agent context with the null vector
    pub force_null_context: bool,
}

impl Net {
    pub fn bind(tape: &mut Tape, model: &Model, mode: Bind) -> Self {
        let store = &model.params;
        let vars: Vec<Var> = store
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let value = store.value(i).clone();
                let trainable = match mode {
                    Bind::Frozen => false,
                    Bind::All => true,
                    Bind::Group(g) => group_of(name) == g,
                };
                if trainable {
                    tape.shared_leaf(value)
                } else {
                    tape.shared_constant(value)
                }
            })
            .collect();
        let get = |name: &str| vars[store.position(name).unwrap_or_else(|| panic!("missing parameter {name}"))];
        let try_get = |name: &str| store.position(name).map(|i| vars[i]);
        let gru = |p: &str| GruParams {
            w_ih: get(&format!("{p}.w_ih")),
            w_hh: get(&format!("{p}.w_hh")),
            b_ih: get(&format!("{p}.b_ih")),
            b_hh: get(&format!("{p}.b_hh")),
        };
        let attn = |p: &str| {
            try_get(&format!("{p}.w_q")).map(|w_q| Attention {
                w_q,
                w_k: get(&format!("{p}.w_k")),
                w_rel: get(&format!("{p}.w_rel")),
                b: get(&format!("{p}.b")),
                w_s: get(&format!("{p}.w_s")),
                b_s: get(&format!("{p}.b_s")),
                w_v: get(&format!("{p}.w_v")),
                b_v: get(&format!("{p}.b_v")),
            })
        };
        let head = |p: &str| Head {
            w1: get(&format!("{p}.w1")),
            b1: get(&format!("{p}.b1")),
            w2: get(&format!("{p}.w2")),
            b2: get(&format!("{p}.b2")),
        };
        Net {
            config: model.config.clone(),
            enc_past: gru("enc_past"),
            enc_future: gru("enc_future"),
            post_attn: attn("post.attn"),
            post_null: get("post.null"),
            post_head: head("post.head"),
            prior_attn: attn("prior.attn"),
            prior_null: get("prior.null"),
            prior_head: head("prior.head"),
            dec_attn: attn("dec.attn"),
            dec_null: get("dec.null"),
            dec_init_w: get("dec.init.w"),
            dec_init_b: get("dec.init.b"),
            dec_gru: gru("dec.gru"),
            dec_out_w: get("dec.out.w"),
            dec_out_b: get("dec.out.b"),
            log_sigma2: try_get("log_sigma2"),
            force_null_context: false,
            vars,
        }
    }
}

/// Per-agent encodings; row i belongs to the i-th ordered agent.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// `[n, hidden]`
    pub past: Var,
    /// `[n, hidden]`, posterior side only
    pub future: Option<Var>,
    pub locations: Vec<[f64; 2]>,
}

impl Embeddings {
    pub fn n_agents(&self) -> usize {
        self.locations.len()
    }

    pub fn past_code(&self, tape: &Tape, i: usize) -> Vec<f64> {
        tape.value(self.past).row(i).to_vec()
    }
}

fn run_gru(tape: &mut Tape, p: &GruParams, inputs: &[Array], n: usize, hidden: usize) -> Result<Var> {
    let mut h = tape.constant(Array::zeros(&[n, hidden]));
    for x in inputs {
        let x = tape.constant(x.clone());
        h = gru_cell(tape, x, h, p)?;
    }
    Ok(h)
}

/// Recurrent encoding of every agent's past, shared weights across agents.
pub fn encode_past(tape: &mut Tape, net: &Net, scene: &PreparedScene) -> Result<Embeddings> {
    let past = run_gru(tape, &net.enc_past, &scene.past, scene.n_agents(), net.config.hidden)?;
    Ok(Embeddings { past, future: None, locations: scene.locations.clone() })
}

/// Adds the future encoding used by the posterior.
pub fn encode_future(tape: &mut Tape, net: &Net, scene: &PreparedScene, emb: &mut Embeddings) -> Result<()> {
    let future = scene.future.as_ref().ok_or(ModelError::MissingFuture)?;
    emb.future = Some(run_gru(tape, &net.enc_future, future, scene.n_agents(), net.config.hidden)?);
    Ok(())
}

/// Gaussian parameters living on a tape, each `[1, latent]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVar {
    pub fn value(&self, tape: &Tape) -> GaussianLatent {
        GaussianLatent { mean: tape.value(self.mean).data().to_vec(), log_var: tape.value(self.log_var).data().to_vec() }
    }
}

/// Incremental attention over already-sampled agents.
///
/// Query, key and value codes are fixed per agent; values additionally take
/// each agent's latent sample once it is pushed.
pub struct AttentionChain<'a> {
    attn: Option<&'a Attention>,
    null: Var,
    /// `[n, q]`
    query: Var,
    /// `[n, attn_hidden]`, projected key codes
    key_proj: Option<Var>,
    /// `[n, c]`, codes entering the value net
    codes: Var,
    locations: Vec<[f64; 2]>,
    values: Vec<Var>,
    /// attention weights of the latest `context` call
    pub last_weights: Option<Vec<f64>>,
}

impl<'a> AttentionChain<'a> {
    fn new(tape: &mut Tape, attn: Option<&'a Attention>, null: Var, codes: Var, locations: &[[f64; 2]], force_null: bool) -> Result<Self> {
        let attn = if force_null { None } else { attn };
        let key_proj = match attn {
            Some(a) => Some(tape.matmul(codes, a.w_k)?),
            None => None,
        };
        Ok(Self { attn, null, query: codes, key_proj, codes, locations: locations.to_vec(), values: Vec::new(), last_weights: None })
    }

    /// Chain for the posterior: codes are past and future encodings.
    pub fn posterior(tape: &mut Tape, net: &'a Net, emb: &Embeddings) -> Result<Self> {
        let future = emb.future.ok_or(ModelError::MissingFuture)?;
        let codes = tape.concat(&[emb.past, future], 1)?;
        Self::new(tape, net.post_attn.as_ref(), net.post_null, codes, &emb.locations, net.force_null_context)
    }

    /// Chain for the prior: codes are past encodings only.
    pub fn prior(tape: &mut Tape, net: &'a Net, emb: &Embeddings) -> Result<Self> {
        Self::new(tape, net.prior_attn.as_ref(), net.prior_null, emb.past, &emb.locations, net.force_null_context)
    }

    pub fn decoder(tape: &mut Tape, net: &'a Net, emb: &Embeddings) -> Result<Self> {
        Self::new(tape, net.dec_attn.as_ref(), net.dec_null, emb.past, &emb.locations, net.force_null_context)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Query codes of agent `i`, `[1, q]`.
    pub fn query(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        Ok(tape.slice(self.query, 0, i, i + 1)?)
    }

    /// Registers the next agent's latent sample.
    pub fn push(&mut self, tape: &mut Tape, z: Var) -> Result<()> {
        if let Some(a) = self.attn {
            let j = self.values.len();
            let code = tape.slice(self.codes, 0, j, j + 1)?;
            let x = tape.concat(&[z, code], 1)?;
            let v = tape.matmul(x, a.w_v)?;
            let v = tape.add(v, a.b_v)?;
            let v = tape.tanh(v)?;
            self.values.push(v);
        } else {
            // values are never read without attention
            self.values.push(z);
        }
        Ok(())
    }

    /// Context vector `[1, c]` for agent `i` from agents `0..i`.
    pub fn context(&mut self, tape: &mut Tape, i: usize) -> Result<Var> {
        assert!(self.values.len() >= i, "context for agent {i} needs {i} earlier samples");
        let (Some(a), Some(key_proj)) = (self.attn, self.key_proj) else {
            self.last_weights = None;
            let c = tape.shape(self.null)[0];
            return Ok(tape.reshape(self.null, &[1, c])?);
        };
        if i == 0 {
            self.last_weights = Some(Vec::new());
            let c = tape.shape(self.null)[0];
            return Ok(tape.reshape(self.null, &[1, c])?);
        }
        let here = self.locations[i];
        let rel: Vec<f64> = self.locations[..i]
            .iter()
            .flat_map(|l| [(l[0] - here[0]) / POS_SCALE, (l[1] - here[1]) / POS_SCALE])
            .collect();
        let rel = tape.constant(Array::new(vec![i, 2], rel).expect("relative locations"));
        let keys = tape.slice(key_proj, 0, 0, i)?;
        let rel = tape.matmul(rel, a.w_rel)?;
        let keys = tape.add(keys, rel)?;
        let q = self.query(tape, i)?;
        let q = tape.matmul(q, a.w_q)?;
        let width = tape.shape(q)[1];
        let q = tape.reshape(q, &[width])?;
        let q = tape.add(q, a.b)?;
        let hid = tape.add(keys, q)?;
        let hid = tape.tanh(hid)?;
        let scores = tape.matmul(hid, a.w_s)?;
        let scores = tape.add(scores, a.b_s)?;
        let scores = tape.reshape(scores, &[1, i])?;
        let weights = tape.softmax(scores)?;
        self.last_weights = Some(tape.value(weights).data().to_vec());
        let values = tape.concat(&self.values[..i], 0)?;
        Ok(tape.matmul(weights, values)?)
    }
}

fn head_forward(tape: &mut Tape, head: &Head, input: Var, latent: usize) -> Result<GaussianVar> {
    let h = tape.matmul(input, head.w1)?;
    let h = tape.add(h, head.b1)?;
    let h = tape.tanh(h)?;
    let out = tape.matmul(h, head.w2)?;
    let out = tape.add(out, head.b2)?;
    let mean = tape.slice(out, 1, 0, latent)?;
    let log_var = tape.slice(out, 1, latent, 2 * latent)?;
    let log_var = tape.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok(GaussianVar { mean, log_var })
}

impl AttentionChain<'_> {
    /// Posterior or prior Gaussian for agent `i` (whichever side built the chain).
    pub fn step(&mut self, tape: &mut Tape, head: &Head, i: usize, latent: usize) -> Result<GaussianVar> {
        let ctx = self.context(tape, i)?;
        let q = self.query(tape, i)?;
        let input = tape.concat(&[q, ctx], 1)?;
        head_forward(tape, head, input, latent)
    }
}

/// q(z_i | Z_<i, X, Y) for agent `i` given earlier samples.
pub fn posterior_step(tape: &mut Tape, net: &Net, emb: &Embeddings, i: usize, z_lt_i: &[Var]) -> Result<GaussianVar> {
    let mut chain = AttentionChain::posterior(tape, net, emb)?;
    for &z in &z_lt_i[..i] {
        chain.push(tape, z)?;
    }
    chain.step(tape, &net.post_head, i, net.config.latent)
}

/// p(z_i | Z_<i, X) for agent `i` given earlier samples.
pub fn prior_step(tape: &mut Tape, net: &Net, emb: &Embeddings, i: usize, z_lt_i: &[Var]) -> Result<GaussianVar> {
    let mut chain = AttentionChain::prior(tape, net, emb)?;
    for &z in &z_lt_i[..i] {
        chain.push(tape, z)?;
    }
    chain.step(tape, &net.prior_head, i, net.config.latent)
}

/// Reparameterized draw `mean + exp(log_var / 2) * noise`.
pub fn sample_latent(tape: &mut Tape, g: &GaussianVar, noise: &[f64]) -> Result<Var> {
    let dim = tape.shape(g.mean)[1];
    assert_eq!(noise.len(), dim, "noise dimension must match the latent");
    let half = tape.scale(g.log_var, 0.5)?;
    let std = tape.exp(half)?;
    let eps = tape.constant(Array::new(vec![1, dim], noise.to_vec()).expect("noise layout"));
    let dev = tape.mul(std, eps)?;
    Ok(tape.add(g.mean, dev)?)
}

/// Closed-form KL between diagonal Gaussians, as a scalar on the tape.
pub fn kl_divergence(tape: &mut Tape, q: &GaussianVar, p: &GaussianVar) -> Result<Var> {
    // per coordinate: (r - 1 - ln r) + (mq - mp)^2 / vp with r = vq / vp
    let log_ratio = tape.sub(q.log_var, p.log_var)?;
    let spread = tape.exp_excess(log_ratio)?;
    let diff = tape.sub(q.mean, p.mean)?;
    let diff2 = tape.square(diff)?;
    let neg_lp = tape.neg(p.log_var)?;
    let inv_p = tape.exp(neg_lp)?;
    let shift = tape.mul(diff2, inv_p)?;
    let inner = tape.add(spread, shift)?;
    let total = tape.sum(inner)?;
    Ok(tape.scale(total, 0.5)?)
}

/// log N(z; mean, diag exp(log_var)) as a scalar on the tape.
pub fn log_density(tape: &mut Tape, g: &GaussianVar, z: Var) -> Result<Var> {
    let dim = tape.shape(g.mean)[1];
    let diff = tape.sub(z, g.mean)?;
    let diff2 = tape.square(diff)?;
    let neg_lv = tape.neg(g.log_var)?;
    let inv = tape.exp(neg_lv)?;
    let quad = tape.mul(diff2, inv)?;
    let inner = tape.add(quad, g.log_var)?;
    let total = tape.sum(inner)?;
    let total = tape.offset(total, dim as f64 * (2.0 * std::f64::consts::PI).ln())?;
    Ok(tape.scale(total, -0.5)?)
}

/// Decoder output for a set of agents (rows in the order requested).
pub struct Decoded {
    pub rows: Vec<usize>,
    /// per step `[m, 2]`
    pub displacements: Vec<Var>,
    /// per step `[m, 2]`, absolute positions
    pub positions: Vec<Var>,
}

impl Decoded {
    /// Predicted positions of the `r`-th decoded agent.
    pub fn trajectory(&self, tape: &Tape, r: usize) -> Vec<[f64; 2]> {
        self.positions.iter().map(|p| {
            let row = tape.value(*p).row(r);
            [row[0], row[1]]
        }).collect()
    }
}

/// Decodes the agents in `rows`; each needs `z[0..=row]`.
pub fn decode(tape: &mut Tape, net: &Net, emb: &Embeddings, rows: &[usize], z: &[Var], pred_len: usize) -> Result<Decoded> {
    let mut chain = AttentionChain::decoder(tape, net, emb)?;
    let needed = rows.iter().map(|r| r + 1).max().unwrap_or(0);
    assert!(z.len() >= needed, "decoding row {} needs its own and all earlier samples", needed.saturating_sub(1));
    let mut inputs = Vec::with_capacity(rows.len());
    let mut latents = Vec::with_capacity(rows.len());
    let mut start = Vec::with_capacity(rows.len() * 2);
    for &i in rows {
        while chain.len() < i {
            let next = z[chain.len()];
            chain.push(tape, next)?;
        }
        let ctx = chain.context(tape, i)?;
        let past = tape.slice(emb.past, 0, i, i + 1)?;
        inputs.push(tape.concat(&[past, z[i], ctx], 1)?);
        latents.push(z[i]);
        start.extend_from_slice(&emb.locations[i]);
    }
    let m = rows.len();
    let x = tape.concat(&inputs, 0)?;
    let zs = tape.concat(&latents, 0)?;
    let h0 = tape.matmul(x, net.dec_init_w)?;
    let h0 = tape.add(h0, net.dec_init_b)?;
    let mut h = tape.tanh(h0)?;
    let mut prev = tape.constant(Array::zeros(&[m, 2]));
    let mut pos = tape.constant(Array::new(vec![m, 2], start).expect("start layout"));
    let mut displacements = Vec::with_capacity(pred_len);
    let mut positions = Vec::with_capacity(pred_len);
    for _ in 0..pred_len {
        let input = tape.concat(&[zs, prev], 1)?;
        h = gru_cell(tape, input, h, &net.dec_gru)?;
        let d = tape.matmul(h, net.dec_out_w)?;
        let d = tape.add(d, net.dec_out_b)?;
        pos = tape.add(pos, d)?;
        prev = tape.scale(d, 0.5)?;
        displacements.push(d);
        positions.push(pos);
    }
    Ok(Decoded { rows: rows.to_vec(), displacements, positions })
}

/// Gaussian log-likelihood of ground-truth positions under the decoder.
///
/// `targets[t]` holds rows for the decoded agents in order.
pub fn gaussian_log_likelihood(tape: &mut Tape, net: &Net, decoded: &Decoded, targets: &[Array]) -> Result<Var> {
    let m = decoded.rows.len();
    let steps = decoded.positions.len();
    let mut quad_terms = Vec::with_capacity(steps);
    for (pos, y) in decoded.positions.iter().zip(targets) {
        let y = tape.constant(y.clone());
        let r = tape.sub(y, *pos)?;
        quad_terms.push(tape.square(r)?);
    }
    let stacked = tape.concat(&quad_terms, 0)?;
    let count = (m * steps) as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let total = match net.log_sigma2 {
        Some(ls) => {
            let neg = tape.neg(ls)?;
            let inv = tape.exp(neg)?;
            let weighted = tape.mul(stacked, inv)?;
            let quad = tape.sum(weighted)?;
            let ls_sum = tape.sum(ls)?;
            let ls_total = tape.scale(ls_sum, count)?;
            tape.add(quad, ls_total)?
        }
        None => tape.sum(stacked)?,
    };
    let total = tape.offset(total, 2.0 * count * ln2pi)?;
    Ok(tape.scale(total, -0.5)?)
}

/// Rows of `targets` restricted to `rows`.
pub fn select_rows(targets: &[Array], rows: &[usize]) -> Vec<Array> {
    targets
        .iter()
        .map(|t| {
            let data: Vec<f64> = rows.iter().flat_map(|&r| t.row(r).to_vec()).collect();
            Array::new(vec![rows.len(), 2], data).expect("target layout")
        })
        .collect()
}
