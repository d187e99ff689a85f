use std::sync::Arc;

use super::select::{cnn_select, fixed_rate_indices, CnnShape};
use super::{Checkpoint, Fingerprint, PipelineError, RunConfig, SelectionKind};
use crate::gates::{
    afs_t_apply, afs_tf_apply, AfsOutput, AfsVariant, GateMode, GateNoise, GateSet, HardConcrete, W_F, W_T,
};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::transformer::{
    beam_search, BeamConfig, Hypothesis, Mode, ModelConfig, Role, Seq2SeqModel, SourceInput, BOS,
};

pub const ASR_SCOPE: &str = "asr.";
pub const AFS_SCOPE: &str = "afs.";
pub const ST_SCOPE: &str = "st.";
pub const MT_SCOPE: &str = "mt.";
pub const CNN_SCOPE: &str = "cnn.";

/// Encoder states, the kept-position mask and the gates that produced it.
type AsrMemory = (Var, Option<Vec<bool>>, Option<GateSet>);

/// Shapes shared by every component of one experiment. Checkpoints are
/// fingerprinted by its canonical text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub vocab_size: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub st_encoder_layers: usize,
    pub max_positions: usize,
}

impl Architecture {
    pub fn from_run(run: &RunConfig, vocab_size: usize, input_dim: usize) -> Self {
        Self {
            vocab_size,
            input_dim,
            d_model: run.d_model,
            heads: run.heads,
            d_ff: run.d_ff,
            encoder_layers: run.encoder_layers,
            decoder_layers: run.decoder_layers,
            st_encoder_layers: run.st_encoder_layers,
            max_positions: run.max_positions,
        }
    }

    fn fields(&self) -> [(&'static str, usize); 9] {
        [
            ("vocab_size", self.vocab_size),
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("st_encoder_layers", self.st_encoder_layers),
            ("max_positions", self.max_positions),
        ]
    }

    pub fn canonical_text(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut a = Self {
            vocab_size: 0,
            input_dim: 0,
            d_model: 0,
            heads: 0,
            d_ff: 0,
            encoder_layers: 0,
            decoder_layers: 0,
            st_encoder_layers: 0,
            max_positions: 0,
        };
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Corrupt(format!("architecture line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let v: usize = v.parse().map_err(|_| PipelineError::InvalidValue {
                key: k.to_string(),
                value: v.to_string(),
            })?;
            let slot = match k {
                "vocab_size" => &mut a.vocab_size,
                "input_dim" => &mut a.input_dim,
                "d_model" => &mut a.d_model,
                "heads" => &mut a.heads,
                "d_ff" => &mut a.d_ff,
                "encoder_layers" => &mut a.encoder_layers,
                "decoder_layers" => &mut a.decoder_layers,
                "st_encoder_layers" => &mut a.st_encoder_layers,
                "max_positions" => &mut a.max_positions,
                _ => return Err(PipelineError::UnknownKey(k.to_string())),
            };
            *slot = v;
            seen += 1;
        }
        if seen != a.fields().len() {
            return Err(PipelineError::Corrupt("incomplete architecture".into()));
        }
        Ok(a)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&self.canonical_text())
    }

    /// Evaluation-time config of the model playing `role`.
    pub fn model_config(&self, role: Role) -> ModelConfig {
        ModelConfig {
            role,
            encoder_layers: match role {
                Role::St => self.st_encoder_layers,
                _ => self.encoder_layers,
            },
            decoder_layers: self.decoder_layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            attention_dropout: 0.0,
            residual_dropout: 0.0,
            label_smoothing: 0.0,
            max_positions: self.max_positions,
            vocab_size: self.vocab_size,
            input_dim: match role {
                Role::Asr => self.input_dim,
                Role::St => self.d_model,
                Role::Mt => 0,
            },
            log_distance_penalty: role == Role::Asr,
        }
    }
}

/// How asr encoder outputs become st encoder inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionMode {
    /// Positions whose expected temporal gate exceeds the threshold.
    Afs {
        threshold: f64,
    },
    FixedRate(usize),
    Cnn(CnnShape),
    /// Every position, ungated.
    All,
}

impl SelectionMode {
    pub fn from_run(run: &RunConfig) -> Self {
        match run.selection {
            SelectionKind::Afs => SelectionMode::Afs {
                threshold: run.gate_threshold,
            },
            SelectionKind::FixedRate => SelectionMode::FixedRate(run.fixed_rate_k),
            SelectionKind::Cnn => SelectionMode::Cnn(CnnShape {
                kernel: run.cnn_kernel,
                stride: run.cnn_stride,
                padding: run.cnn_padding,
            }),
            SelectionKind::All => SelectionMode::All,
        }
    }
}

/// The components of one experiment. Parameters live outside, in one store
/// keyed by component scope.
#[derive(Clone, Debug)]
pub struct System {
    arch: Architecture,
    asr: Seq2SeqModel,
    st: Seq2SeqModel,
    mt: Seq2SeqModel,
    afs: Option<AfsVariant>,
    selection: SelectionMode,
    hc: HardConcrete,
}

/// Per-utterance dump of gates, kept positions and cross-attention.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub gates: Option<GateSet>,
    /// Original positions of the encoder outputs the decoder attended to.
    pub kept: Vec<usize>,
    pub hypothesis: Hypothesis,
    /// Decoding steps by attended positions, averaged over heads and layers.
    pub attention: Tensor,
    /// Per attended position, the attention weight averaged over steps.
    pub mean_attention: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput {
    pub transcript: Vec<usize>,
    pub translation: Vec<usize>,
    pub warning: Option<String>,
}

impl System {
    pub fn new(arch: Architecture, afs: Option<AfsVariant>, selection: SelectionMode) -> Result<Self, PipelineError> {
        Ok(Self {
            asr: Seq2SeqModel::new(arch.model_config(Role::Asr), ASR_SCOPE)?,
            st: Seq2SeqModel::new(arch.model_config(Role::St), ST_SCOPE)?,
            mt: Seq2SeqModel::new(arch.model_config(Role::Mt), MT_SCOPE)?,
            arch,
            afs,
            selection,
            hc: HardConcrete::default(),
        })
    }

    /// The gate variant is read off the stored parameters, the selection
    /// mode off the run text.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PipelineError> {
        let arch = Architecture::parse(&ckpt.architecture)?;
        let run = ckpt.run_config()?;
        Self::new(arch, afs_variant_of(&ckpt.params), SelectionMode::from_run(&run))
    }

    pub(crate) fn set_models(&mut self, asr: Seq2SeqModel, st: Seq2SeqModel, mt: Seq2SeqModel) {
        self.asr = asr;
        self.st = st;
        self.mt = mt;
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn asr(&self) -> &Seq2SeqModel {
        &self.asr
    }

    pub fn st(&self) -> &Seq2SeqModel {
        &self.st
    }

    pub fn mt(&self) -> &Seq2SeqModel {
        &self.mt
    }

    pub fn afs_variant(&self) -> Option<AfsVariant> {
        self.afs
    }

    pub fn selection(&self) -> SelectionMode {
        self.selection
    }

    pub fn hard_concrete(&self) -> &HardConcrete {
        &self.hc
    }

    /// Evaluation-mode asr encoder output, `n x d`.
    pub fn speech_states(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor, PipelineError> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let enc = self
            .asr
            .encode(&mut g, params, SourceInput::Features(xv), None, &mut Mode::Eval)?;
        Ok(g.value(enc).clone())
    }

    /// Applies the gating layer to `states` inside `g`.
    pub fn apply_gates(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        states: Var,
        noise: GateNoise<'_>,
    ) -> Result<AfsOutput, PipelineError> {
        let variant = self.afs.ok_or(PipelineError::MissingComponent("afs"))?;
        let w_t = g.param(params, &format!("{AFS_SCOPE}{W_T}"))?;
        Ok(match variant {
            AfsVariant::T => afs_t_apply(g, &self.hc, states, w_t, noise)?,
            AfsVariant::TF => {
                let w_f = g.param(params, &format!("{AFS_SCOPE}{W_F}"))?;
                afs_tf_apply(g, &self.hc, states, w_t, Some(w_f), noise)?
            }
        })
    }

    /// Expected-mode gates for one utterance's encoder states.
    pub fn gates(&self, params: &ParamStore, states: &Tensor) -> Result<GateSet, PipelineError> {
        let mut g = Graph::inference();
        let s = g.constant(states.clone());
        let out = self.apply_gates(&mut g, params, s, GateNoise::Expected)?;
        Ok(out.gate_set(&g, GateMode::Expected))
    }

    /// St encoder input built from asr encoder states under the configured
    /// selection, with the original positions it covers.
    pub fn st_source(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        states: Var,
        id: u64,
    ) -> Result<(Var, Vec<usize>), PipelineError> {
        let n = g.value(states).rows();
        match self.selection {
            SelectionMode::All => Ok((states, (0..n).collect())),
            SelectionMode::FixedRate(k) => {
                let kept = fixed_rate_indices(n, k)?;
                if kept.is_empty() {
                    return Err(PipelineError::EmptySelection { id });
                }
                Ok((g.gather_rows(states, kept.clone())?, kept))
            }
            SelectionMode::Cnn(shape) => {
                let out = cnn_select(g, params, CNN_SCOPE, states, shape)?;
                let m = g.value(out).rows();
                Ok((out, (0..m).collect()))
            }
            SelectionMode::Afs { threshold } => {
                let out = self.apply_gates(g, params, states, GateNoise::Expected)?;
                let kept: Vec<usize> = g
                    .value(out.temporal_gates)
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > threshold)
                    .map(|(i, _)| i)
                    .collect();
                if kept.is_empty() {
                    return Err(PipelineError::EmptySelection { id });
                }
                Ok((g.gather_rows(out.gated, kept.clone())?, kept))
            }
        }
    }

    /// Asr decoder memory: plain encoder states, or gated states with
    /// closed positions masked when gates are present.
    fn asr_memory(&self, g: &mut Graph, params: &ParamStore, x: &Tensor) -> Result<AsrMemory, PipelineError> {
        let xv = g.constant(x.clone());
        let enc = self
            .asr
            .encode(g, params, SourceInput::Features(xv), None, &mut Mode::Eval)?;
        if self.afs.is_none() {
            return Ok((enc, None, None));
        }
        let out = self.apply_gates(g, params, enc, GateNoise::Expected)?;
        let gates = out.gate_set(g, GateMode::Expected);
        let valid = open_mask(&gates.temporal_gates);
        Ok((out.gated, valid, Some(gates)))
    }

    /// Beam-decodes a transcript, through the gates when present.
    pub fn transcribe(&self, params: &ParamStore, x: &Tensor, beam: &BeamConfig) -> Result<Hypothesis, PipelineError> {
        let mut g = Graph::inference();
        let (mem, valid, _) = self.asr_memory(&mut g, params, x)?;
        let memory = self.asr.memory(params, g.value(mem), valid.as_deref())?;
        Ok(beam_search(&mut self.asr.scorer(params, &memory), beam)?)
    }

    /// Encodes speech with the st model and beam-decodes a translation.
    pub fn translate(
        &self,
        params: &ParamStore,
        x: &Tensor,
        id: u64,
        beam: &BeamConfig,
    ) -> Result<Hypothesis, PipelineError> {
        let mut g = Graph::inference();
        let enc = self.st_encode(&mut g, params, x, id)?.0;
        let memory = self.st.memory(params, g.value(enc), None)?;
        Ok(beam_search(&mut self.st.scorer(params, &memory), beam)?)
    }

    fn st_encode(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: &Tensor,
        id: u64,
    ) -> Result<(Var, Vec<usize>), PipelineError> {
        let xv = g.constant(x.clone());
        let states = self
            .asr
            .encode(g, params, SourceInput::Features(xv), None, &mut Mode::Eval)?;
        let (src, kept) = self.st_source(g, params, states, id)?;
        let enc = self
            .st
            .encode(g, params, SourceInput::Features(src), None, &mut Mode::Eval)?;
        Ok((enc, kept))
    }

    /// Text-to-text translation with the mt model.
    pub fn translate_tokens(
        &self,
        params: &ParamStore,
        tokens: &[usize],
        beam: &BeamConfig,
    ) -> Result<Hypothesis, PipelineError> {
        let mut g = Graph::inference();
        Ok(self.mt.translate(params, SourceInput::Tokens(tokens), &mut g, beam)?)
    }

    /// Decodes one utterance and records gates and cross-attention. Uses
    /// the st model when its parameters are present, else the asr decoder.
    pub fn inspect(
        &self,
        params: &ParamStore,
        x: &Tensor,
        id: u64,
        beam: &BeamConfig,
    ) -> Result<Inspection, PipelineError> {
        let mut g = Graph::inference();
        let states = self.speech_states(params, x)?;
        let gates = match self.afs {
            Some(_) => Some(self.gates(params, &states)?),
            None => None,
        };
        let use_st = params.names().any(|n| n.starts_with(ST_SCOPE));
        let (model, mem, valid, kept) = if use_st {
            let (enc, kept) = self.st_encode(&mut g, params, x, id)?;
            (&self.st, enc, None, kept)
        } else {
            let (mem, valid, _) = self.asr_memory(&mut g, params, x)?;
            let kept = match &valid {
                Some(v) => (0..v.len()).filter(|&i| v[i]).collect(),
                None => (0..states.rows()).collect(),
            };
            (&self.asr, mem, valid, kept)
        };
        let memory = model.memory(params, g.value(mem), valid.as_deref())?;
        let hypothesis = beam_search(&mut model.scorer(params, &memory), beam)?;
        let mut prefix = vec![BOS];
        prefix.extend(&hypothesis.tokens);
        let out = model.decode_logits(&mut g, params, mem, valid.as_deref(), &prefix, &mut Mode::Eval, true)?;
        let full = out.cross_attention.expect("attention was captured");
        let cols: Vec<usize> = match &valid {
            Some(_) => kept.clone(),
            None => (0..full.cols()).collect(),
        };
        let steps = full.rows();
        let mut data = Vec::with_capacity(steps * cols.len());
        for r in 0..steps {
            data.extend(cols.iter().map(|&c| full.get(r, c)));
        }
        let attention = Tensor::matrix(steps, cols.len(), data)?;
        let mean_attention = (0..cols.len())
            .map(|c| (0..steps).map(|r| attention.get(r, c)).sum::<f64>() / steps as f64)
            .collect();
        Ok(Inspection {
            gates,
            kept,
            hypothesis,
            attention,
            mean_attention,
        })
    }
}

/// Open positions, or `None` (attend everywhere) when nothing is closed or
/// everything is.
pub(crate) fn open_mask(gates: &[f64]) -> Option<Vec<bool>> {
    let valid: Vec<bool> = gates.iter().map(|&v| v != 0.0).collect();
    (valid.iter().any(|&b| b) && valid.iter().any(|&b| !b)).then_some(valid)
}

pub(crate) fn afs_variant_of(params: &ParamStore) -> Option<AfsVariant> {
    if !params.contains(&format!("{AFS_SCOPE}{W_T}")) {
        None
    } else if params.contains(&format!("{AFS_SCOPE}{W_F}")) {
        Some(AfsVariant::TF)
    } else {
        Some(AfsVariant::T)
    }
}

/// Transcribes with `asr` and translates the transcript with `mt`. An empty
/// transcript yields an empty translation and a warning.
pub fn cascade_translate(
    asr: (&System, &ParamStore),
    mt: (&System, &ParamStore),
    x: &Tensor,
    beam: &BeamConfig,
) -> Result<CascadeOutput, PipelineError> {
    let transcript = asr.0.transcribe(asr.1, x, beam)?.tokens;
    if transcript.is_empty() {
        return Ok(CascadeOutput {
            transcript,
            translation: Vec::new(),
            warning: Some("empty transcript; translation skipped".into()),
        });
    }
    let translation = mt.0.translate_tokens(mt.1, &transcript, beam)?.tokens;
    Ok(CascadeOutput {
        transcript,
        translation,
        warning: None,
    })
}

/// Shares a tensor with a graph without copying it again per step.
pub(crate) fn shared(t: &Arc<Tensor>, g: &mut Graph) -> Var {
    g.constant_arc(Arc::clone(t))
}
