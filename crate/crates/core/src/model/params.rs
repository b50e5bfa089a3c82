use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use diffcore::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, ModelError};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// uniform in ±1/√fan_in
    Dense,
    /// stacked orthogonal square blocks
    Orthogonal,
    Zeros,
}

/// Which optimization phase updates a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// encoders, posterior, decoder and observation noise
    Main,
    /// prior head and prior attention
    Prior,
}

pub const LOG_SIGMA2_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
pub const LOG_SIGMA2_MAX: f64 = 0.0;

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: &str, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec { name: name.to_string(), shape: shape.to_vec(), init }
}

fn gru_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize) {
    out.push(spec(&format!("{prefix}.w_ih"), &[input, 3 * hidden], Init::Dense));
    out.push(spec(&format!("{prefix}.w_hh"), &[hidden, 3 * hidden], Init::Orthogonal));
    out.push(spec(&format!("{prefix}.b_ih"), &[3 * hidden], Init::Zeros));
    out.push(spec(&format!("{prefix}.b_hh"), &[3 * hidden], Init::Zeros));
}

fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, query: usize, key_code: usize, value_in: usize, c: &ModelConfig) {
    let a = c.attn_hidden;
    out.push(spec(&format!("{prefix}.w_q"), &[query, a], Init::Dense));
    out.push(spec(&format!("{prefix}.w_k"), &[key_code, a], Init::Dense));
    out.push(spec(&format!("{prefix}.w_rel"), &[2, a], Init::Dense));
    out.push(spec(&format!("{prefix}.b"), &[a], Init::Zeros));
    out.push(spec(&format!("{prefix}.w_s"), &[a, 1], Init::Dense));
    out.push(spec(&format!("{prefix}.b_s"), &[1], Init::Zeros));
    out.push(spec(&format!("{prefix}.w_v"), &[value_in, c.context], Init::Dense));
    out.push(spec(&format!("{prefix}.b_v"), &[c.context], Init::Zeros));
}

fn head_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, c: &ModelConfig) {
    out.push(spec(&format!("{prefix}.w1"), &[input, c.head_hidden], Init::Dense));
    out.push(spec(&format!("{prefix}.b1"), &[c.head_hidden], Init::Zeros));
    out.push(spec(&format!("{prefix}.w2"), &[c.head_hidden, 2 * c.latent], Init::Zeros));
    out.push(spec(&format!("{prefix}.b2"), &[2 * c.latent], Init::Zeros));
}

/// Every parameter of a variant, in canonical order.
pub(crate) fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let (h, l, ctx) = (c.hidden, c.latent, c.context);
    let mut out = Vec::new();
    gru_specs(&mut out, "enc_past", super::PAST_FEATURES, h);
    gru_specs(&mut out, "enc_future", super::FUTURE_FEATURES, h);
    if c.variant.uses_attention() {
        attention_specs(&mut out, "post.attn", 2 * h, 2 * h, l + 2 * h, c);
    }
    out.push(spec("post.null", &[ctx], Init::Zeros));
    head_specs(&mut out, "post.head", 2 * h + ctx, c);
    if c.variant.uses_attention() {
        attention_specs(&mut out, "prior.attn", h, h, l + h, c);
    }
    out.push(spec("prior.null", &[ctx], Init::Zeros));
    head_specs(&mut out, "prior.head", h + ctx, c);
    if c.variant.uses_attention() {
        attention_specs(&mut out, "dec.attn", h, h, l + h, c);
    }
    out.push(spec("dec.null", &[ctx], Init::Zeros));
    out.push(spec("dec.init.w", &[h + l + ctx, c.decoder_hidden], Init::Dense));
    out.push(spec("dec.init.b", &[c.decoder_hidden], Init::Zeros));
    gru_specs(&mut out, "dec.gru", l + 2, c.decoder_hidden);
    out.push(spec("dec.out.w", &[c.decoder_hidden, 2], Init::Zeros));
    out.push(spec("dec.out.b", &[2], Init::Zeros));
    if c.variant.learns_noise() {
        out.push(spec("log_sigma2", &[2], Init::Zeros));
    }
    out
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("prior.") {
        ParamGroup::Prior
    } else {
        ParamGroup::Main
    }
}

/// Orthonormal columns via modified Gram–Schmidt on a Gaussian matrix.
fn orthogonal_block(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    // row-major n×n with cols[j] as column j
    let mut out = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            out[i * n + j] = c[i];
        }
    }
    out
}

fn init_array(s: &ParamSpec, rng: &mut ChaCha8Rng) -> Array {
    match s.init {
        Init::Zeros => Array::zeros(&s.shape),
        Init::Dense => {
            let bound = 1.0 / (s.shape[0] as f64).sqrt();
            let n = s.shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Array::new(s.shape.clone(), data).expect("spec shapes are valid")
        }
        Init::Orthogonal => {
            // hidden × k·hidden, one orthogonal block per gate
            let (rows, cols) = (s.shape[0], s.shape[1]);
            let blocks: Vec<Vec<f64>> = (0..cols / rows).map(|_| orthogonal_block(rows, rng)).collect();
            let mut data = vec![0.0; rows * cols];
            for (b, block) in blocks.iter().enumerate() {
                for i in 0..rows {
                    for j in 0..rows {
                        data[i * cols + b * rows + j] = block[i * rows + j];
                    }
                }
            }
            Array::new(s.shape.clone(), data).expect("spec shapes are valid")
        }
    }
}

/// Named parameter arrays in canonical order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Array>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub(crate) fn initialize(config: &ModelConfig, seed: u64) -> Self {
        let specs = param_specs(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut values = Vec::with_capacity(specs.len());
        for s in &specs {
            // each parameter draws from its own stream so variants that share
            // a parameter name share its initial value
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&s.name));
            values.push(Arc::new(init_array(s, &mut rng)));
            names.push(s.name.clone());
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, values, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Array>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn value(&self, i: usize) -> &Arc<Array> {
        &self.values[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn set(&mut self, name: &str, value: Array) -> Result<(), ModelError> {
        let i = *self.index.get(name).ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if self.values[i].shape() != value.shape() {
            return Err(ModelError::ShapeMismatch {
                name: name.to_string(),
                expected: self.values[i].shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    pub(crate) fn set_index(&mut self, i: usize, value: Array) {
        debug_assert_eq!(self.values[i].shape(), value.shape());
        self.values[i] = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive hash of the bit patterns of every parameter in `group`.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, value) in self.iter().filter(|(n, _)| group_of(n) == group) {
            h = (h ^ fnv1a(name)).wrapping_mul(0x100_0000_01b3);
            for v in value.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

const MAGIC: &str = "jointcvae-checkpoint 1";

/// Writes a text checkpoint: a header of `key value` lines, then one
/// `param <name> <extents..>` line followed by a line of values for each
/// parameter.
pub fn write_checkpoint(config: &ModelConfig, params: &ParamStore, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    for (k, v) in config.to_pairs() {
        writeln!(w, "{k} {v}")?;
    }
    for (name, value) in params.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "param {name} {}", dims.join(" "))?;
        let vals: Vec<String> = value.data().iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl BufRead) -> Result<(ModelConfig, ParamStore), ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut lines = r.lines();
    let mut next = || -> Result<Option<String>, ModelError> {
        lines.next().transpose().map_err(|e| ModelError::Checkpoint(e.to_string()))
    };
    if next()?.as_deref() != Some(MAGIC) {
        return Err(bad("missing checkpoint header".into()));
    }
    let mut pairs = Vec::new();
    let mut pending = None;
    while let Some(line) = next()? {
        if line.starts_with("param ") {
            pending = Some(line);
            break;
        }
        let (k, v) = line.split_once(' ').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let config = ModelConfig::from_pairs(&pairs)?;
    let mut params = ParamStore::initialize(&config, 0);
    let mut seen = 0;
    while let Some(header) = pending.take() {
        let mut parts = header.split_whitespace().skip(1);
        let name = parts.next().ok_or_else(|| bad("param line without name".into()))?.to_string();
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| bad(format!("bad extent in {header:?}"))))
            .collect::<Result<_, _>>()?;
        let data_line = next()?.ok_or_else(|| bad(format!("missing values for {name}")))?;
        let data: Vec<f64> = data_line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("bad value in {name}"))))
            .collect::<Result<_, _>>()?;
        let array = Array::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        if !array.is_finite() {
            return Err(bad(format!("{name} has non-finite values")));
        }
        params.set(&name, array)?;
        seen += 1;
        pending = next()?;
        if let Some(l) = &pending {
            if !l.starts_with("param ") {
                return Err(bad(format!("unexpected line {l:?}")));
            }
        }
    }
    if seen != params.len() {
        return Err(bad(format!("expected {} parameters, found {seen}", params.len())));
    }
    if let Some(ls) = params.get("log_sigma2") {
        if ls.data().iter().any(|&v| !(LOG_SIGMA2_MIN..=LOG_SIGMA2_MAX).contains(&v)) {
            return Err(bad("log_sigma2 outside its allowed range".into()));
        }
    }
    Ok((config, params))
}
