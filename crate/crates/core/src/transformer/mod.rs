//! Pre-norm encoder-decoder transformer shared by the ASR, ST and MT roles.
//!
//! A [`Seq2SeqModel`] is a description (configuration plus a name scope); its
//! weights live in a [`ParamStore`] under `"{scope}{name}"`, so several models
//! can share one store, one graph and one optimizer.

mod beam;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

pub use beam::{beam_search, greedy_search, length_penalty, BeamConfig, Hypothesis, LengthPenalty, StepScorer};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} positions exceeds the learned positional table of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty encoder states")]
    EmptyMemory,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("every target position is padding")]
    AllPad,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("input width {got}, expected {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("role {role} expects {expected} input")]
    WrongInput { role: Role, expected: &'static str },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{targets} targets for {rows} logit rows")]
    TargetCount { targets: usize, rows: usize },
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Asr,
    St,
    Mt,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Asr => "asr",
            Role::St => "st",
            Role::Mt => "mt",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asr" => Ok(Role::Asr),
            "st" => Ok(Role::St),
            "mt" => Ok(Role::Mt),
            other => Err(ModelError::InvalidConfig(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub role: Role,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub attention_dropout: f64,
    pub residual_dropout: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
    /// Target vocabulary, special ids included.
    pub vocab_size: usize,
    /// Width of the encoder's feature input (asr and st roles).
    pub input_dim: usize,
    /// Adds `-ln(1 + |i - j|)` to encoder self-attention logits.
    pub log_distance_penalty: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for `role`.
    pub fn desk(role: Role, vocab_size: usize, input_dim: usize) -> Self {
        Self {
            role,
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            attention_dropout: 0.1,
            residual_dropout: 0.2,
            label_smoothing: 0.1,
            max_positions: 2048,
            vocab_size,
            input_dim: if role == Role::St { 64 } else { input_dim },
            log_distance_penalty: role == Role::Asr,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// An encoder with zero layers is accepted as an identity over the
    /// embedded input.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.decoder_layers == 0 {
            return bad("decoder needs at least one layer".into());
        }
        if self.d_ff == 0 {
            return bad("feedforward size must be positive".into());
        }
        for (name, p) in [
            ("attention_dropout", self.attention_dropout),
            ("residual_dropout", self.residual_dropout),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.vocab_size <= FIRST_CONTENT {
            return bad(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        match self.role {
            Role::Asr if self.input_dim == 0 || self.max_positions == 0 => {
                bad("asr role needs an input width and a positional table".into())
            }
            Role::St if self.input_dim != self.d_model => bad(format!(
                "st role consumes d_model-wide features, got input_dim {}",
                self.input_dim
            )),
            _ => Ok(()),
        }
    }

    /// Architecture fields as `key = value` lines in a fixed order.
    pub fn canonical_text(&self) -> String {
        format!(
            "role = {}\nencoder_layers = {}\ndecoder_layers = {}\nd_model = {}\nheads = {}\nd_ff = {}\n\
             max_positions = {}\nvocab_size = {}\ninput_dim = {}\nlog_distance_penalty = {}\n",
            self.role,
            self.encoder_layers,
            self.decoder_layers,
            self.d_model,
            self.heads,
            self.d_ff,
            self.max_positions,
            self.vocab_size,
            self.input_dim,
            self.log_distance_penalty,
        )
    }
}

/// Additive pre-softmax bias `-ln(1 + |i - j|)`.
pub fn log_distance_bias(n: usize) -> Tensor {
    let data = (0..n * n)
        .map(|k| -(1.0 + (k / n).abs_diff(k % n) as f64).ln())
        .collect();
    Tensor::new(vec![n, n], data).expect("n*n entries")
}

/// `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(...)`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in (0..d).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / d as f64);
            data[p * d + i] = angle.sin();
            if i + 1 < d {
                data[p * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![n, d], data).expect("n*d entries")
}

fn causal_bias(n: usize) -> Tensor {
    let data = (0..n * n)
        .map(|k| if k % n > k / n { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    Tensor::new(vec![n, n], data).expect("n*n entries")
}

/// Row of `0` for valid keys and `-inf` for masked ones.
fn key_mask_row(valid: &[bool]) -> Tensor {
    Tensor::vector(valid.iter().map(|&v| if v { 0.0 } else { f64::NEG_INFINITY }).collect())
}

/// Dropout switch threaded through a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var, ModelError> {
        let Mode::Train(rng) = self else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(g.dropout(x, Arc::new(mask))?)
    }
}

/// What the encoder consumes.
#[derive(Clone, Copy, Debug)]
pub enum SourceInput<'a> {
    /// `n x input_dim` features (asr and st roles).
    Features(Var),
    /// Token ids (mt role).
    Tokens(&'a [usize]),
}

/// Decoder output for a full prefix.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub logits: Var,
    /// Cross-attention weights averaged over heads and layers, `prefix x memory`.
    pub cross_attention: Option<Tensor>,
}

/// Cross-attention keys and values precomputed for incremental decoding.
#[derive(Clone, Debug)]
pub struct Memory {
    layers: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    bias: Option<Arc<Tensor>>,
    len: usize,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Per-layer self-attention keys and values of a decoded prefix.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    cache: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    position: usize,
}

impl DecoderState {
    /// Number of tokens fed so far, BOS included.
    pub fn position(&self) -> usize {
        self.position
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    scope: String,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, scope: impl Into<String>) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            config,
            scope: scope.into(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    fn key(&self, name: &str) -> String {
        format!("{}{}", self.scope, name)
    }

    /// Every parameter name (scope included) with its shape.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let c = &self.config;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut s = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            s.insert(self.key(&name), shape);
        };
        let attention = |put: &mut dyn FnMut(String, Vec<usize>), pre: &str| {
            for p in ["q", "k", "v", "o"] {
                put(format!("{pre}.w{p}"), vec![d, d]);
                put(format!("{pre}.b{p}"), vec![d]);
            }
        };
        let norm = |put: &mut dyn FnMut(String, Vec<usize>), pre: &str| {
            put(format!("{pre}.g"), vec![d]);
            put(format!("{pre}.b"), vec![d]);
        };
        let ff = |put: &mut dyn FnMut(String, Vec<usize>), pre: &str| {
            put(format!("{pre}.w1"), vec![d, f]);
            put(format!("{pre}.b1"), vec![f]);
            put(format!("{pre}.w2"), vec![f, d]);
            put(format!("{pre}.b2"), vec![d]);
        };
        match c.role {
            Role::Asr => {
                put("enc.in.w".into(), vec![c.input_dim, d]);
                put("enc.in.b".into(), vec![d]);
                put("enc.pos".into(), vec![c.max_positions, d]);
                put("ctc.w".into(), vec![d, v + 1]);
                put("ctc.b".into(), vec![v + 1]);
            }
            Role::Mt => put("enc.embed".into(), vec![v, d]),
            Role::St => {}
        }
        for l in 0..c.encoder_layers {
            norm(&mut put, &format!("enc.l{l}.ln1"));
            attention(&mut put, &format!("enc.l{l}.attn"));
            norm(&mut put, &format!("enc.l{l}.ln2"));
            ff(&mut put, &format!("enc.l{l}.ff"));
        }
        if c.encoder_layers > 0 {
            norm(&mut put, "enc.ln");
        }
        put("dec.embed".into(), vec![v, d]);
        for l in 0..c.decoder_layers {
            norm(&mut put, &format!("dec.l{l}.ln1"));
            attention(&mut put, &format!("dec.l{l}.self"));
            norm(&mut put, &format!("dec.l{l}.ln2"));
            attention(&mut put, &format!("dec.l{l}.cross"));
            norm(&mut put, &format!("dec.l{l}.ln3"));
            ff(&mut put, &format!("dec.l{l}.ff"));
        }
        norm(&mut put, "dec.ln");
        put("dec.out.w".into(), vec![d, v]);
        put("dec.out.b".into(), vec![v]);
        s
    }

    pub fn num_parameters(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Fresh parameters: Xavier-uniform matrices, zero biases, unit norm
    /// gains, `N(0, d^-1/2)` embeddings, and learned positions starting at
    /// the sinusoidal table plus `N(0, 0.02)` noise.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let d = self.config.d_model as f64;
        let emb = Normal::new(0.0, d.powf(-0.5)).expect("positive std");
        let pos = Normal::new(0.0, 0.02).expect("positive std");
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let local = &name[self.scope.len()..];
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if local.ends_with(".g") {
                vec![1.0; len]
            } else if local.ends_with("embed") {
                (0..len).map(|_| emb.sample(rng)).collect()
            } else if local == "enc.pos" {
                let table = sinusoidal_positions(shape[0], shape[1]);
                table.data().iter().map(|&x| x + pos.sample(rng)).collect()
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..len).map(|_| rng.random_range(-limit..limit)).collect()
            } else {
                vec![0.0; len]
            };
            store.insert(name, Tensor::new(shape, data).expect("shape matches data"));
        }
        store
    }

    /// Checks that `params` holds every parameter with the expected shape.
    pub fn check_params(&self, params: &ParamStore) -> Result<(), ModelError> {
        for (name, shape) in self.param_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParameterShape {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, params: &ParamStore, name: &str) -> Result<Var, ModelError> {
        let key = self.key(name);
        match params.get(&key) {
            Some(_) => Ok(g.param(params, &key)?),
            None => Err(ModelError::MissingParameter(key)),
        }
    }

    fn linear(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        pre: &str,
        w: &str,
        b: &str,
        x: Var,
    ) -> Result<Var, ModelError> {
        let w = self.p(g, params, &format!("{pre}.{w}"))?;
        let b = self.p(g, params, &format!("{pre}.{b}"))?;
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn norm(&self, g: &mut Graph, params: &ParamStore, pre: &str, x: Var) -> Result<Var, ModelError> {
        let gain = self.p(g, params, &format!("{pre}.g"))?;
        let bias = self.p(g, params, &format!("{pre}.b"))?;
        Ok(g.layer_norm(x, gain, bias, 1e-6)?)
    }

    fn feedforward(&self, g: &mut Graph, params: &ParamStore, pre: &str, x: Var) -> Result<Var, ModelError> {
        let h = self.linear(g, params, pre, "w1", "b1", x)?;
        let h = g.relu(h)?;
        self.linear(g, params, pre, "w2", "b2", h)
    }

    /// Scaled dot-product attention of projected queries against projected
    /// keys and values, split over heads. Head-averaged probabilities are
    /// appended to `capture` when given.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mode: &mut Mode<'_>,
        capture: Option<&mut Vec<Tensor>>,
    ) -> Result<Var, ModelError> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
        let mut outs = Vec::with_capacity(heads);
        let mut probs_sum: Option<Vec<f64>> = None;
        let mut shape = Vec::new();
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * dh, dh)?,
                    g.slice(k, 1, h * dh, dh)?,
                    g.slice(v, 1, h * dh, dh)?,
                )
            };
            let mut s = g.matmul_nt(qh, kh)?;
            if let Some(b) = bias {
                s = g.add(s, b)?;
            }
            let p = g.softmax(s)?;
            if capture.is_some() {
                let pv = g.value(p);
                shape = pv.shape().to_vec();
                let acc = probs_sum.get_or_insert_with(|| vec![0.0; pv.len()]);
                for (a, &x) in acc.iter_mut().zip(pv.data()) {
                    *a += x / heads as f64;
                }
            }
            let p = mode.dropout(g, p, self.config.attention_dropout)?;
            outs.push(g.matmul(p, vh)?);
        }
        if let (Some(c), Some(sum)) = (capture, probs_sum) {
            c.push(Tensor::new(shape, sum)?);
        }
        Ok(if heads == 1 { outs[0] } else { g.concat(&outs, 1)? })
    }

    fn residual(&self, g: &mut Graph, x: Var, sub: Var, mode: &mut Mode<'_>) -> Result<Var, ModelError> {
        let sub = mode.dropout(g, sub, self.config.residual_dropout)?;
        Ok(g.add(x, sub)?)
    }

    /// Embedded encoder input (positions included), `n x d`.
    pub fn embed_source(&self, g: &mut Graph, params: &ParamStore, input: SourceInput<'_>) -> Result<Var, ModelError> {
        let c = &self.config;
        let d = c.d_model;
        match (c.role, input) {
            (Role::Asr, SourceInput::Features(x)) => {
                let (n, w) = (g.value(x).rows(), g.value(x).cols());
                if n == 0 {
                    return Err(ModelError::EmptyInput);
                }
                if w != c.input_dim {
                    return Err(ModelError::InputWidth {
                        expected: c.input_dim,
                        got: w,
                    });
                }
                if n > c.max_positions {
                    return Err(ModelError::SequenceTooLong {
                        len: n,
                        max: c.max_positions,
                    });
                }
                let h = self.linear(g, params, "enc.in", "w", "b", x)?;
                let pos = self.p(g, params, "enc.pos")?;
                let pos = g.slice(pos, 0, 0, n)?;
                Ok(g.add(h, pos)?)
            }
            (Role::St, SourceInput::Features(x)) => {
                let (n, w) = (g.value(x).rows(), g.value(x).cols());
                if n == 0 {
                    return Err(ModelError::EmptyInput);
                }
                if w != d {
                    return Err(ModelError::InputWidth { expected: d, got: w });
                }
                let pe = g.constant(sinusoidal_positions(n, d));
                Ok(g.add(x, pe)?)
            }
            (Role::Mt, SourceInput::Tokens(tokens)) => self.embed_tokens(g, params, "enc.embed", tokens, 0),
            (role, _) => Err(ModelError::WrongInput {
                role,
                expected: if role == Role::Mt { "token" } else { "feature" },
            }),
        }
    }

    fn embed_tokens(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        table: &str,
        tokens: &[usize],
        offset: usize,
    ) -> Result<Var, ModelError> {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= v) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: v });
        }
        let e = self.p(g, params, table)?;
        let rows = g.gather_rows(e, tokens.to_vec())?;
        let rows = g.scale(rows, (d as f64).sqrt())?;
        let pe = sinusoidal_positions(offset + tokens.len(), d);
        let pe = if offset == 0 {
            pe
        } else {
            pe.select_rows(&(offset..offset + tokens.len()).collect::<Vec<_>>())
        };
        let pe = g.constant(pe);
        Ok(g.add(rows, pe)?)
    }

    /// Runs the encoder stack over `input`. `valid` marks non-padding
    /// positions; padded keys are masked from self-attention.
    pub fn encode(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        input: SourceInput<'_>,
        valid: Option<&[bool]>,
        mode: &mut Mode<'_>,
    ) -> Result<Var, ModelError> {
        let x = self.embed_source(g, params, input)?;
        let n = g.value(x).rows();
        if let Some(v) = valid {
            if v.len() != n {
                return Err(ModelError::TargetCount {
                    targets: v.len(),
                    rows: n,
                });
            }
            if !v.iter().any(|&b| b) {
                return Err(ModelError::EmptyInput);
            }
        }
        let mut x = mode.dropout(g, x, self.config.residual_dropout)?;
        if self.config.encoder_layers == 0 {
            return Ok(x);
        }
        let bias = {
            let mut b = if self.config.log_distance_penalty {
                Some(log_distance_bias(n))
            } else {
                None
            };
            if let Some(v) = valid.filter(|v| v.iter().any(|&b| !b)) {
                let row = key_mask_row(v);
                let mut full = b.unwrap_or_else(|| Tensor::zeros(&[n, n]));
                for (k, x) in full.data_mut().iter_mut().enumerate() {
                    *x += row.data()[k % n];
                }
                b = Some(full);
            }
            b.map(|b| g.constant(b))
        };
        for l in 0..self.config.encoder_layers {
            let pre = format!("enc.l{l}");
            let h = self.norm(g, params, &format!("{pre}.ln1"), x)?;
            let ap = format!("{pre}.attn");
            let q = self.linear(g, params, &ap, "wq", "bq", h)?;
            let k = self.linear(g, params, &ap, "wk", "bk", h)?;
            let v = self.linear(g, params, &ap, "wv", "bv", h)?;
            let a = self.attend(g, q, k, v, bias, mode, None)?;
            let a = self.linear(g, params, &ap, "wo", "bo", a)?;
            x = self.residual(g, x, a, mode)?;
            let h = self.norm(g, params, &format!("{pre}.ln2"), x)?;
            let f = self.feedforward(g, params, &format!("{pre}.ff"), h)?;
            x = self.residual(g, x, f, mode)?;
        }
        self.norm(g, params, "enc.ln", x)
    }

    /// Frame log-probabilities over the vocabulary plus the blank (last id),
    /// for the asr role.
    pub fn ctc_log_probs(&self, g: &mut Graph, params: &ParamStore, encoded: Var) -> Result<Var, ModelError> {
        if self.config.role != Role::Asr {
            return Err(ModelError::WrongInput {
                role: self.config.role,
                expected: "a CTC head, which only the asr",
            });
        }
        let z = self.linear(g, params, "ctc", "w", "b", encoded)?;
        Ok(g.log_softmax(z)?)
    }

    fn memory_bias(&self, g: &mut Graph, m: usize, valid: Option<&[bool]>) -> Result<Option<Var>, ModelError> {
        match valid {
            None => Ok(None),
            Some(v) if v.len() != m => Err(ModelError::TargetCount {
                targets: v.len(),
                rows: m,
            }),
            Some(v) if v.iter().all(|&b| b) => Ok(None),
            Some(v) if !v.iter().any(|&b| b) => Err(ModelError::EmptyMemory),
            Some(v) => Ok(Some(g.constant(key_mask_row(v)))),
        }
    }

    /// Logits for every position of `prefix` (which starts with BOS) under
    /// a causal mask, attending to `memory` rows marked valid.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        memory: Var,
        memory_valid: Option<&[bool]>,
        prefix: &[usize],
        mode: &mut Mode<'_>,
        capture_attention: bool,
    ) -> Result<DecoderOutput, ModelError> {
        let m = g.value(memory).rows();
        if m == 0 || g.value(memory).is_empty() {
            return Err(ModelError::EmptyMemory);
        }
        let d = self.config.d_model;
        if g.value(memory).cols() != d {
            return Err(ModelError::InputWidth {
                expected: d,
                got: g.value(memory).cols(),
            });
        }
        let mbias = self.memory_bias(g, m, memory_valid)?;
        let t = prefix.len();
        let x = self.embed_tokens(g, params, "dec.embed", prefix, 0)?;
        let mut x = mode.dropout(g, x, self.config.residual_dropout)?;
        let causal = if t > 1 { Some(g.constant(causal_bias(t))) } else { None };
        let mut captured = if capture_attention { Some(Vec::new()) } else { None };
        for l in 0..self.config.decoder_layers {
            let pre = format!("dec.l{l}");
            let h = self.norm(g, params, &format!("{pre}.ln1"), x)?;
            let sp = format!("{pre}.self");
            let q = self.linear(g, params, &sp, "wq", "bq", h)?;
            let k = self.linear(g, params, &sp, "wk", "bk", h)?;
            let v = self.linear(g, params, &sp, "wv", "bv", h)?;
            let a = self.attend(g, q, k, v, causal, mode, None)?;
            let a = self.linear(g, params, &sp, "wo", "bo", a)?;
            x = self.residual(g, x, a, mode)?;

            let h = self.norm(g, params, &format!("{pre}.ln2"), x)?;
            let cp = format!("{pre}.cross");
            let q = self.linear(g, params, &cp, "wq", "bq", h)?;
            let k = self.linear(g, params, &cp, "wk", "bk", memory)?;
            let v = self.linear(g, params, &cp, "wv", "bv", memory)?;
            let a = self.attend(g, q, k, v, mbias, mode, captured.as_mut())?;
            let a = self.linear(g, params, &cp, "wo", "bo", a)?;
            x = self.residual(g, x, a, mode)?;

            let h = self.norm(g, params, &format!("{pre}.ln3"), x)?;
            let f = self.feedforward(g, params, &format!("{pre}.ff"), h)?;
            x = self.residual(g, x, f, mode)?;
        }
        let h = self.norm(g, params, "dec.ln", x)?;
        let logits = self.linear(g, params, "dec.out", "w", "b", h)?;
        let cross_attention = captured.map(|layers| {
            let mut sum = vec![0.0; t * m];
            for p in &layers {
                for (a, &x) in sum.iter_mut().zip(p.data()) {
                    *a += x / layers.len() as f64;
                }
            }
            Tensor::new(vec![t, m], sum).expect("t*m entries")
        });
        Ok(DecoderOutput {
            logits,
            cross_attention,
        })
    }

    /// Cross-attention keys and values of `encoded` for every decoder layer.
    pub fn memory(&self, params: &ParamStore, encoded: &Tensor, valid: Option<&[bool]>) -> Result<Memory, ModelError> {
        let m = encoded.rows();
        if m == 0 || encoded.is_empty() {
            return Err(ModelError::EmptyMemory);
        }
        let mut g = Graph::inference();
        let bias = self.memory_bias(&mut g, m, valid)?.map(|b| g.value_arc(b));
        let mem = g.constant(encoded.clone());
        let mut layers = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let cp = format!("dec.l{l}.cross");
            let k = self.linear(&mut g, params, &cp, "wk", "bk", mem)?;
            let v = self.linear(&mut g, params, &cp, "wv", "bv", mem)?;
            layers.push((g.value_arc(k), g.value_arc(v)));
        }
        Ok(Memory { layers, bias, len: m })
    }

    /// Feeds one token at `state.position()` and returns the next-token
    /// log-probabilities with the extended state.
    pub fn decode_step(
        &self,
        params: &ParamStore,
        memory: &Memory,
        state: &DecoderState,
        token: usize,
    ) -> Result<(DecoderState, Vec<f64>), ModelError> {
        let mut g = Graph::inference();
        let mut mode = Mode::Eval;
        let mut x = self.embed_tokens(&mut g, params, "dec.embed", &[token], state.position)?;
        let mbias = memory.bias.as_ref().map(|b| g.constant_arc(Arc::clone(b)));
        let mut cache = Vec::with_capacity(self.config.decoder_layers);
        for l in 0..self.config.decoder_layers {
            let pre = format!("dec.l{l}");
            let h = self.norm(&mut g, params, &format!("{pre}.ln1"), x)?;
            let sp = format!("{pre}.self");
            let q = self.linear(&mut g, params, &sp, "wq", "bq", h)?;
            let mut k = self.linear(&mut g, params, &sp, "wk", "bk", h)?;
            let mut v = self.linear(&mut g, params, &sp, "wv", "bv", h)?;
            if let Some((pk, pv)) = state.cache.get(l) {
                let pk = g.constant_arc(Arc::clone(pk));
                let pv = g.constant_arc(Arc::clone(pv));
                k = g.concat(&[pk, k], 0)?;
                v = g.concat(&[pv, v], 0)?;
            }
            cache.push((g.value_arc(k), g.value_arc(v)));
            let a = self.attend(&mut g, q, k, v, None, &mut mode, None)?;
            let a = self.linear(&mut g, params, &sp, "wo", "bo", a)?;
            x = g.add(x, a)?;

            let h = self.norm(&mut g, params, &format!("{pre}.ln2"), x)?;
            let cp = format!("{pre}.cross");
            let q = self.linear(&mut g, params, &cp, "wq", "bq", h)?;
            let (mk, mv) = &memory.layers[l];
            let k = g.constant_arc(Arc::clone(mk));
            let v = g.constant_arc(Arc::clone(mv));
            let a = self.attend(&mut g, q, k, v, mbias, &mut mode, None)?;
            let a = self.linear(&mut g, params, &cp, "wo", "bo", a)?;
            x = g.add(x, a)?;

            let h = self.norm(&mut g, params, &format!("{pre}.ln3"), x)?;
            let f = self.feedforward(&mut g, params, &format!("{pre}.ff"), h)?;
            x = g.add(x, f)?;
        }
        let h = self.norm(&mut g, params, "dec.ln", x)?;
        let logits = self.linear(&mut g, params, "dec.out", "w", "b", h)?;
        let lp = g.log_softmax(logits)?;
        let next = DecoderState {
            cache,
            position: state.position + 1,
        };
        Ok((next, g.value(lp).data().to_vec()))
    }

    /// A [`StepScorer`] over this model and a precomputed memory.
    pub fn scorer<'a>(&'a self, params: &'a ParamStore, memory: &'a Memory) -> ModelScorer<'a> {
        ModelScorer {
            model: self,
            params,
            memory,
        }
    }

    /// Encodes `input` in evaluation mode and beam-decodes it.
    pub fn translate(
        &self,
        params: &ParamStore,
        input: SourceInput<'_>,
        g: &mut Graph,
        config: &BeamConfig,
    ) -> Result<Hypothesis, ModelError> {
        let enc = self.encode(g, params, input, None, &mut Mode::Eval)?;
        let memory = self.memory(params, g.value(enc), None)?;
        beam_search(&mut self.scorer(params, &memory), config)
    }
}

/// Incremental decoder bound to one utterance.
pub struct ModelScorer<'a> {
    model: &'a Seq2SeqModel,
    params: &'a ParamStore,
    memory: &'a Memory,
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn start(&mut self) -> Result<(DecoderState, Vec<f64>), ModelError> {
        self.model
            .decode_step(self.params, self.memory, &DecoderState::default(), BOS)
    }

    fn extend(&mut self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>), ModelError> {
        self.model.decode_step(self.params, self.memory, state, token)
    }
}

/// Sum over non-pad positions of the cross-entropy against
/// `(1 - eps) * onehot + eps / V`, with the number of positions counted.
pub fn label_smoothed_nll_sum(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
    pad: Option<usize>,
) -> Result<(Var, usize), ModelError> {
    let (rows, v) = (g.value(logits).rows(), g.value(logits).cols());
    if targets.len() != rows {
        return Err(ModelError::TargetCount {
            targets: targets.len(),
            rows,
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(ModelError::TokenOutOfRange { token: t, vocab: v });
    }
    let mut q = vec![0.0; rows * v];
    let mut count = 0;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == pad {
            continue;
        }
        count += 1;
        let row = &mut q[r * v..(r + 1) * v];
        row.iter_mut().for_each(|x| *x = smoothing / v as f64);
        row[t] += 1.0 - smoothing;
    }
    if count == 0 {
        return Err(ModelError::AllPad);
    }
    let lp = g.log_softmax(logits)?;
    let q = g.constant(Tensor::new(vec![rows, v], q)?);
    let prod = g.mul(lp, q)?;
    let s = g.sum(prod)?;
    Ok((g.scale(s, -1.0)?, count))
}

/// Mean label-smoothed cross-entropy over non-pad positions.
pub fn label_smoothed_nll(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
    pad: Option<usize>,
) -> Result<Var, ModelError> {
    let (sum, count) = label_smoothed_nll_sum(g, logits, targets, smoothing, pad)?;
    Ok(g.scale(sum, 1.0 / count as f64)?)
}

/// Lowest value the smoothed loss can reach: the entropy of the smoothed
/// target, attained when the model predicts it exactly.
pub fn smoothing_floor(smoothing: f64, vocab: usize) -> f64 {
    let off = smoothing / vocab as f64;
    let on = 1.0 - smoothing + off;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(on) + (vocab - 1) as f64 * term(off)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[allow(clippy::approx_constant)]
    fn log_distance_bias_values() {
        let b = log_distance_bias(4);
        assert_eq!(b.get(2, 2), 0.0);
        assert!((b.get(1, 2) + 2f64.ln()).abs() < 1e-15);
        assert!((b.get(1, 2) - (-0.6931)).abs() < 1e-4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(b.get(i, j), b.get(j, i));
            }
        }
    }

    #[test]
    fn causal_bias_masks_the_future() {
        let b = causal_bias(3);
        assert_eq!(b.get(0, 0), 0.0);
        assert_eq!(b.get(0, 1), f64::NEG_INFINITY);
        assert_eq!(b.get(2, 1), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(Role::Mt, 10, 0);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(Role::St, 10, 0);
        c.input_dim = 7;
        assert!(c.validate().is_err());
        assert_eq!("asr".parse::<Role>().unwrap(), Role::Asr);
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let c = ModelConfig::desk(Role::Asr, 20, 360);
        let a = Seq2SeqModel::new(c.clone(), "a.").unwrap();
        let b = Seq2SeqModel::new(c, "b.").unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = a.init_params(&mut rng);
        assert_eq!(p.num_scalars(), a.num_parameters());
        a.check_params(&p).unwrap();
        assert!(b.check_params(&p).is_err());
    }

    #[test]
    fn smoothing_floor_without_smoothing_is_zero() {
        assert_eq!(smoothing_floor(0.0, 5), 0.0);
        assert!(smoothing_floor(0.1, 5) > 0.0);
    }

    use rand::SeedableRng;
}
