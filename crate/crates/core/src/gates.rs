//! Hard-concrete stochastic gates, the expected-L0 penalty, and the temporal
//! (`t`) and temporal+feature (`tf`) feature-selection layers built on them.
//!
//! A gate is sampled by pushing logistic noise through a tempered sigmoid,
//! stretching the result to `(eps, 1 - eps)` and clamping back to `[0, 1]`.
//! The stretch leaves finite probability mass at exactly 0 and exactly 1, so
//! the probability of a gate being non-zero has a closed form that can be
//! penalised directly.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("uniform noise {0} is outside the open interval (0, 1)")]
    NoiseOutOfRange(f64),
    #[error("gating weights have width {weights} but states have width {states}")]
    WidthMismatch { states: usize, weights: usize },
    #[error("temporal+feature gating requires feature weights")]
    MissingFeatureWeights,
    #[error("empty selection: every temporal gate is closed")]
    EmptySelection,
    #[error("selection requires gates in expected mode")]
    NotExpectedMode,
    #[error("noise length {got} does not match {expected} gates")]
    NoiseLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardConcrete {
    /// Temperature of the relaxed Bernoulli.
    pub beta: f64,
    /// Lower end of the stretch interval; the upper end is `1 - eps`.
    pub eps: f64,
    /// Noise is drawn from `(delta, 1 - delta)`.
    pub delta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            eps: -0.1,
            delta: 1e-6,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(self.eps < 0.0 && self.eps.is_finite()) {
            return Err(format!("eps must be negative, got {}", self.eps));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(format!("delta must lie in (0, 0.5), got {}", self.delta));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.eps
    }

    pub fn upper(&self) -> f64 {
        1.0 - self.eps
    }

    /// `upper - lower`, written so that the midpoint maps to exactly 0.5.
    fn width(&self) -> f64 {
        1.0 - 2.0 * self.eps
    }

    /// `beta * ln(-eps / (1 - eps))`: the log-alpha shift at which half of the
    /// probability mass sits at exactly zero.
    fn zero_shift(&self) -> f64 {
        self.beta * (-self.eps / (1.0 - self.eps)).ln()
    }

    pub fn sample_gate(&self, log_alpha: f64, u: f64) -> Result<f64, GateError> {
        if !(u > 0.0 && u < 1.0) {
            return Err(GateError::NoiseOutOfRange(u));
        }
        let s = sigmoid((u.ln() - (1.0 - u).ln() + log_alpha) / self.beta);
        let stretched = s * self.width() + self.lower();
        Ok(stretched.clamp(0.0, 1.0))
    }

    /// Closed-form `p(g = 0 | alpha)`.
    pub fn prob_zero(&self, log_alpha: f64) -> f64 {
        sigmoid(self.zero_shift() - log_alpha)
    }

    /// Deterministic inference-time estimate of the gate.
    pub fn expected_gate(&self, log_alpha: f64) -> f64 {
        (sigmoid(log_alpha) * self.width() + self.lower()).clamp(0.0, 1.0)
    }

    /// Expected number of non-zero gates, `sum_i 1 - p(g_i = 0)`.
    pub fn l0_penalty(&self, log_alphas: &[f64]) -> f64 {
        log_alphas.iter().map(|&a| 1.0 - self.prob_zero(a)).sum()
    }

    /// Uniform noise in `(delta, 1 - delta)`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| self.delta + (1.0 - 2.0 * self.delta) * rng.random::<f64>())
            .collect()
    }

    /// Reparameterised gate samples, differentiable in `log_alpha`.
    pub fn sample_gates_var(&self, g: &mut Graph, log_alpha: Var, noise: &[f64]) -> Result<Var, GateError> {
        let shape = g.value(log_alpha).shape().to_vec();
        if noise.len() != g.value(log_alpha).len() {
            return Err(GateError::NoiseLength {
                expected: g.value(log_alpha).len(),
                got: noise.len(),
            });
        }
        let mut logistic = Vec::with_capacity(noise.len());
        for &u in noise {
            if !(u > 0.0 && u < 1.0) {
                return Err(GateError::NoiseOutOfRange(u));
            }
            logistic.push(u.ln() - (1.0 - u).ln());
        }
        let l = g.constant(Tensor::new(shape, logistic)?);
        let z = g.add(log_alpha, l)?;
        let z = g.scale(z, 1.0 / self.beta)?;
        self.stretch_and_clamp(g, z)
    }

    pub fn expected_gates_var(&self, g: &mut Graph, log_alpha: Var) -> Result<Var, GateError> {
        self.stretch_and_clamp(g, log_alpha)
    }

    fn stretch_and_clamp(&self, g: &mut Graph, pre: Var) -> Result<Var, GateError> {
        let s = g.sigmoid(pre)?;
        let s = g.scale(s, self.width())?;
        let s = g.add_scalar(s, self.lower())?;
        Ok(g.clamp(s, 0.0, 1.0)?)
    }

    /// Differentiable L0 penalty over every entry of `log_alpha`.
    pub fn l0_penalty_var(&self, g: &mut Graph, log_alpha: Var) -> Result<Var, GateError> {
        let shifted = g.add_scalar(log_alpha, -self.zero_shift())?;
        let open = g.sigmoid(shifted)?;
        Ok(g.sum(open)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AfsVariant {
    /// Temporal gates only.
    T,
    /// Temporal gates plus one feature gate per hidden dimension.
    TF,
}

impl AfsVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AfsVariant::T => "t",
            AfsVariant::TF => "tf",
        }
    }
}

/// Gating weights: `w_t` scores each position, `w_f` holds the feature log-alphas.
#[derive(Clone, Debug, PartialEq)]
pub struct AfsLayerParams {
    pub w_t: Tensor,
    pub w_f: Option<Tensor>,
}

pub const W_T: &str = "w_t";
pub const W_F: &str = "w_f";

impl AfsLayerParams {
    /// Zero temporal weights (every gate starts at log-alpha 0) and, for the
    /// `tf` variant, feature log-alphas initialised to `feature_init`.
    pub fn new(d_model: usize, variant: AfsVariant, feature_init: f64) -> Self {
        Self {
            w_t: Tensor::zeros(&[d_model]),
            w_f: match variant {
                AfsVariant::T => None,
                AfsVariant::TF => Some(Tensor::filled(&[d_model], feature_init)),
            },
        }
    }

    pub fn variant(&self) -> AfsVariant {
        if self.w_f.is_some() {
            AfsVariant::TF
        } else {
            AfsVariant::T
        }
    }

    pub fn width(&self) -> usize {
        self.w_t.len()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(W_T, self.w_t.clone());
        if let Some(w) = &self.w_f {
            s.insert(W_F, w.clone());
        }
        s
    }

    pub fn from_store(store: &ParamStore) -> Option<Self> {
        Some(Self {
            w_t: store.get(W_T)?.clone(),
            w_f: store.get(W_F).cloned(),
        })
    }

    /// Expected-mode gates for one utterance, computed without a graph.
    pub fn expected_gates(&self, hc: &HardConcrete, states: &Tensor) -> Result<GateSet, GateError> {
        if states.cols() != self.w_t.len() {
            return Err(GateError::WidthMismatch {
                states: states.cols(),
                weights: self.w_t.len(),
            });
        }
        let temporal_log_alpha: Vec<f64> = (0..states.rows())
            .map(|i| states.row(i).iter().zip(self.w_t.data()).map(|(a, b)| a * b).sum())
            .collect();
        let temporal_gates = temporal_log_alpha.iter().map(|&a| hc.expected_gate(a)).collect();
        let feature_log_alpha = self.w_f.as_ref().map(|w| w.data().to_vec());
        let feature_gates = feature_log_alpha
            .as_ref()
            .map(|f| f.iter().map(|&a| hc.expected_gate(a)).collect());
        Ok(GateSet {
            temporal_log_alpha,
            feature_log_alpha,
            temporal_gates,
            feature_gates,
            mode: GateMode::Expected,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Sampled,
    Expected,
}

/// Gate values for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet {
    pub temporal_log_alpha: Vec<f64>,
    pub feature_log_alpha: Option<Vec<f64>>,
    pub temporal_gates: Vec<f64>,
    pub feature_gates: Option<Vec<f64>>,
    pub mode: GateMode,
}

impl GateSet {
    /// Fraction of temporal gates that are exactly zero.
    pub fn temporal_sparsity(&self) -> f64 {
        zero_fraction(&self.temporal_gates)
    }

    pub fn feature_sparsity(&self) -> Option<f64> {
        self.feature_gates.as_deref().map(zero_fraction)
    }
}

fn zero_fraction(g: &[f64]) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.iter().filter(|&&x| x == 0.0).count() as f64 / g.len() as f64
}

/// How gates are produced inside a graph.
#[derive(Clone, Copy, Debug)]
pub enum GateNoise<'a> {
    Sampled {
        temporal: &'a [f64],
        feature: Option<&'a [f64]>,
    },
    Expected,
}

/// Graph handles produced by a gating layer.
#[derive(Clone, Debug)]
pub struct AfsOutput {
    pub gated: Var,
    pub temporal_log_alpha: Var,
    pub temporal_gates: Var,
    pub feature_log_alpha: Option<Var>,
    pub feature_gates: Option<Var>,
    /// `sum_i 1 - p(g^t_i = 0)`
    pub temporal_penalty: Var,
    /// `sum_j 1 - p(g^f_j = 0)`
    pub feature_penalty: Option<Var>,
    /// Temporal plus feature penalty.
    pub penalty: Var,
}

impl AfsOutput {
    pub fn gate_set(&self, g: &Graph, mode: GateMode) -> GateSet {
        GateSet {
            temporal_log_alpha: g.value(self.temporal_log_alpha).data().to_vec(),
            feature_log_alpha: self.feature_log_alpha.map(|v| g.value(v).data().to_vec()),
            temporal_gates: g.value(self.temporal_gates).data().to_vec(),
            feature_gates: self.feature_gates.map(|v| g.value(v).data().to_vec()),
            mode,
        }
    }
}

/// Temporal gating: row `i` of the output is `g^t_i * x_i` with
/// `log alpha^t_i = <x_i, w_t>`.
pub fn afs_t_apply(
    g: &mut Graph,
    hc: &HardConcrete,
    states: Var,
    w_t: Var,
    noise: GateNoise<'_>,
) -> Result<AfsOutput, GateError> {
    let (n, d) = {
        let s = g.value(states);
        (s.rows(), s.cols())
    };
    let wl = g.value(w_t).len();
    if wl != d || g.value(states).rank() != 2 {
        return Err(GateError::WidthMismatch { states: d, weights: wl });
    }
    let w_col = g.reshape(w_t, vec![d, 1])?;
    let la = g.matmul(states, w_col)?;
    let la = g.reshape(la, vec![n])?;
    let gates = match noise {
        GateNoise::Sampled { temporal, .. } => hc.sample_gates_var(g, la, temporal)?,
        GateNoise::Expected => hc.expected_gates_var(g, la)?,
    };
    let gcol = g.reshape(gates, vec![n, 1])?;
    let gated = g.mul(states, gcol)?;
    let penalty = hc.l0_penalty_var(g, la)?;
    Ok(AfsOutput {
        gated,
        temporal_log_alpha: la,
        temporal_gates: gates,
        feature_log_alpha: None,
        feature_gates: None,
        temporal_penalty: penalty,
        feature_penalty: None,
        penalty,
    })
}

/// Temporal and feature gating: row `i` is `g^t_i * (x_i ⊙ g^f)` where the
/// feature gates are shared by every position and `log alpha^f = w_f`.
pub fn afs_tf_apply(
    g: &mut Graph,
    hc: &HardConcrete,
    states: Var,
    w_t: Var,
    w_f: Option<Var>,
    noise: GateNoise<'_>,
) -> Result<AfsOutput, GateError> {
    let w_f = w_f.ok_or(GateError::MissingFeatureWeights)?;
    let d = g.value(states).cols();
    let fl = g.value(w_f).len();
    if fl != d {
        return Err(GateError::WidthMismatch { states: d, weights: fl });
    }
    let mut out = afs_t_apply(g, hc, states, w_t, noise)?;
    let la_f = g.reshape(w_f, vec![d])?;
    let fgates = match noise {
        GateNoise::Sampled { feature, .. } => {
            let feature = feature.ok_or(GateError::NoiseLength { expected: d, got: 0 })?;
            hc.sample_gates_var(g, la_f, feature)?
        }
        GateNoise::Expected => hc.expected_gates_var(g, la_f)?,
    };
    out.gated = g.mul(out.gated, fgates)?;
    let fpen = hc.l0_penalty_var(g, la_f)?;
    out.penalty = g.add(out.temporal_penalty, fpen)?;
    out.feature_log_alpha = Some(la_f);
    out.feature_gates = Some(fgates);
    out.feature_penalty = Some(fpen);
    Ok(out)
}

/// Output of [`select_open`].
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Gated rows that survived, `m x d`.
    pub features: Tensor,
    /// Original positions of the kept rows, increasing.
    pub kept: Vec<usize>,
}

/// Keeps the positions whose expected temporal gate exceeds `threshold`
/// (strictly), in their original order, carrying their gated values.
pub fn select_open(states: &Tensor, gates: &GateSet, threshold: f64) -> Result<Selection, GateError> {
    if gates.mode != GateMode::Expected {
        return Err(GateError::NotExpectedMode);
    }
    if states.rows() != gates.temporal_gates.len() || states.rank() != 2 {
        return Err(GateError::WidthMismatch {
            states: states.rows(),
            weights: gates.temporal_gates.len(),
        });
    }
    let d = states.cols();
    if let Some(f) = &gates.feature_gates {
        if f.len() != d {
            return Err(GateError::WidthMismatch {
                states: d,
                weights: f.len(),
            });
        }
    }
    let kept: Vec<usize> = gates
        .temporal_gates
        .iter()
        .enumerate()
        .filter(|(_, &gt)| gt > threshold)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(GateError::EmptySelection);
    }
    let mut data = Vec::with_capacity(kept.len() * d);
    for &i in &kept {
        let gt = gates.temporal_gates[i];
        match &gates.feature_gates {
            Some(f) => data.extend(states.row(i).iter().zip(f).map(|(x, gf)| x * gt * gf)),
            None => data.extend(states.row(i).iter().map(|x| x * gt)),
        }
    }
    Ok(Selection {
        features: Tensor::matrix(kept.len(), d, data)?,
        kept,
    })
}
