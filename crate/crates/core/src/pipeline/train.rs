use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::select::cnn_select;
use super::system::{afs_variant_of, open_mask, shared, AFS_SCOPE, ASR_SCOPE, CNN_SCOPE, MT_SCOPE, ST_SCOPE};
use super::{Architecture, Checkpoint, PipelineError, RunConfig, SelectionMode, System};
use crate::ctc::{ctc_loss_var, CtcError};
use crate::frontend::Corpus;
use crate::gates::{AfsLayerParams, GateMode, GateNoise, GateSet};
use crate::tensor::{
    adam_step, noam_rate, AdamConfig, GradStore, Graph, OptimizerState, ParamStore, Tensor, TensorError, Var,
};
use crate::transformer::{label_smoothed_nll_sum, Mode, ModelConfig, Role, Seq2SeqModel, SourceInput, BOS, EOS};

/// One optimizer step of a training curve. Losses are per target token;
/// `l0` is the normalised penalty averaged over utterances; sparsities
/// are over the sampled gates of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub mle: f64,
    pub ctc: Option<f64>,
    pub l0: Option<f64>,
    pub temporal_sparsity: Option<f64>,
    pub feature_sparsity: Option<f64>,
    pub lr: f64,
}

/// Header line, then one tab-separated record per step; `-` marks a term
/// the stage does not have.
pub fn format_curve(points: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    let mut s = String::from("step\tloss\tmle\tctc\tl0\ttemporal_sparsity\tfeature_sparsity\tlr\n");
    for p in points {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{:.6e}",
            p.step,
            p.loss,
            p.mle,
            opt(p.ctc),
            opt(p.l0),
            opt(p.temporal_sparsity),
            opt(p.feature_sparsity),
            p.lr
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Parameter snapshots every `checkpoint_every` steps.
    pub snapshots: Vec<Checkpoint>,
}

/// Graph handles of the asr objective for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct AsrTerms {
    /// Label-smoothed NLL summed over target tokens.
    pub mle_sum: Var,
    pub tokens: usize,
    /// CTC negative log-likelihood; `None` when not requested or when the
    /// utterance has too few frames for its transcript.
    pub ctc: Option<Var>,
}

/// Decoder and CTC terms for transcript `y` given features `x`.
pub fn asr_utterance_terms(
    g: &mut Graph,
    model: &Seq2SeqModel,
    params: &ParamStore,
    x: Var,
    y: &[usize],
    with_ctc: bool,
    mode: &mut Mode<'_>,
) -> Result<AsrTerms, PipelineError> {
    let enc = model.encode(g, params, SourceInput::Features(x), None, mode)?;
    let (prefix, targets) = teacher_forcing(y);
    let out = model.decode_logits(g, params, enc, None, &prefix, mode, false)?;
    let (mle_sum, tokens) = label_smoothed_nll_sum(g, out.logits, &targets, model.config().label_smoothing, None)?;
    let ctc = if with_ctc {
        let lp = model.ctc_log_probs(g, params, enc)?;
        match ctc_loss_var(g, lp, y, model.config().vocab_size) {
            Ok(v) => Some(v),
            Err(CtcError::TargetUnalignable { .. }) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    Ok(AsrTerms { mle_sum, tokens, ctc })
}

/// Graph handles of the gate-finetuning objective for one utterance.
#[derive(Clone, Debug)]
pub struct AfsTerms {
    pub mle_sum: Var,
    pub tokens: usize,
    /// `L0^t / n + L0^f / d` (the feature term only for the `tf` variant).
    pub penalty: Var,
    pub gates: GateSet,
}

/// Gates `states`, masks closed positions out of cross-attention (all are
/// attended if every gate is closed) and scores transcript `y`.
pub fn afs_utterance_terms(
    g: &mut Graph,
    system: &System,
    params: &ParamStore,
    states: Var,
    y: &[usize],
    noise: GateNoise<'_>,
    mode: &mut Mode<'_>,
) -> Result<AfsTerms, PipelineError> {
    let (n, d) = (g.value(states).rows(), g.value(states).cols());
    let out = system.apply_gates(g, params, states, noise)?;
    let gate_mode = match noise {
        GateNoise::Expected => GateMode::Expected,
        GateNoise::Sampled { .. } => GateMode::Sampled,
    };
    let gates = out.gate_set(g, gate_mode);
    let valid = open_mask(&gates.temporal_gates);
    let (prefix, targets) = teacher_forcing(y);
    let asr = system.asr();
    let dec = asr.decode_logits(g, params, out.gated, valid.as_deref(), &prefix, mode, false)?;
    let (mle_sum, tokens) = label_smoothed_nll_sum(g, dec.logits, &targets, asr.config().label_smoothing, None)?;
    let mut penalty = g.scale(out.temporal_penalty, 1.0 / n as f64)?;
    if let Some(f) = out.feature_penalty {
        let f = g.scale(f, 1.0 / d as f64)?;
        penalty = g.add(penalty, f)?;
    }
    Ok(AfsTerms {
        mle_sum,
        tokens,
        penalty,
        gates,
    })
}

fn teacher_forcing(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut prefix = Vec::with_capacity(y.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(y);
    let mut targets = y.to_vec();
    targets.push(EOS);
    (prefix, targets)
}

pub(crate) fn training_config(run: &RunConfig, arch: &Architecture, role: Role) -> ModelConfig {
    ModelConfig {
        attention_dropout: run.attention_dropout,
        residual_dropout: run.residual_dropout,
        label_smoothing: run.label_smoothing,
        ..arch.model_config(role)
    }
}

impl System {
    /// The same system with dropout and label smoothing taken from `run`.
    pub fn with_training(self, run: &RunConfig) -> Result<Self, PipelineError> {
        let arch = self.architecture().clone();
        let mut s = System::new(arch.clone(), self.afs_variant(), self.selection())?;
        s.set_models(
            Seq2SeqModel::new(training_config(run, &arch, Role::Asr), ASR_SCOPE)?,
            Seq2SeqModel::new(training_config(run, &arch, Role::St), ST_SCOPE)?,
            Seq2SeqModel::new(training_config(run, &arch, Role::Mt), MT_SCOPE)?,
        );
        Ok(s)
    }
}

const STAGE_ASR: u64 = 0;
const STAGE_AFS: u64 = 1;
const STAGE_ST: u64 = 2;
const STAGE_MT: u64 = 3;

/// Independent generators for initialisation, batch order and training
/// noise (dropout and gate samples) of one stage.
fn stage_rngs(seed: u64, stage: u64) -> [ChaCha8Rng; 3] {
    std::array::from_fn(|k| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stage * 3 + k as u64);
        r
    })
}

/// Shuffled batches filled up to a target-token budget. Order depends only
/// on the generator.
struct Batcher {
    lens: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    budget: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(lens: Vec<usize>, budget: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: Vec::new(),
            pos: 0,
            lens,
            budget,
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < self.budget {
            if self.pos == self.order.len() {
                if !batch.is_empty() {
                    break;
                }
                self.order = (0..self.lens.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            tokens += self.lens[i];
            batch.push(i);
        }
        batch
    }
}

#[derive(Default)]
struct StepStats {
    loss: f64,
    mle: f64,
    ctc: Option<f64>,
    l0: Option<f64>,
    zeros_t: usize,
    gates_t: usize,
    zeros_f: usize,
    gates_f: usize,
}

impl StepStats {
    fn add_gates(&mut self, gates: &GateSet) {
        self.gates_t += gates.temporal_gates.len();
        self.zeros_t += gates.temporal_gates.iter().filter(|&&v| v == 0.0).count();
        if let Some(f) = &gates.feature_gates {
            self.gates_f += f.len();
            self.zeros_f += f.iter().filter(|&&v| v == 0.0).count();
        }
    }
}

struct Trainer {
    stage: &'static str,
    params: ParamStore,
    opt: OptimizerState,
    frozen: Vec<String>,
    d_model: usize,
    warmup: u64,
    lr_scale: f64,
    schedule_offset: u64,
    local_step: u64,
    checkpoint_every: u64,
    curve: Vec<CurvePoint>,
    snapshots: Vec<ParamStore>,
}

impl Trainer {
    fn new(
        stage: &'static str,
        params: ParamStore,
        run: &RunConfig,
        schedule_offset: u64,
        frozen: Vec<String>,
    ) -> Self {
        Self {
            stage,
            params,
            opt: OptimizerState::new(AdamConfig::default()),
            frozen,
            d_model: run.d_model,
            warmup: run.warmup,
            lr_scale: run.lr_scale,
            schedule_offset,
            local_step: 0,
            checkpoint_every: run.checkpoint_every,
            curve: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    /// Builds one graph per utterance with `utt`, sums the gradients of the
    /// returned losses and applies one Adam update.
    fn step<F>(&mut self, batch: &[usize], mut utt: F) -> Result<(), PipelineError>
    where
        F: FnMut(&mut Graph, &ParamStore, usize, &mut StepStats) -> Result<Var, PipelineError>,
    {
        self.local_step += 1;
        let diverged = PipelineError::Diverged {
            stage: self.stage,
            step: self.local_step,
        };
        let mut grads = GradStore::new();
        let mut stats = StepStats::default();
        for &i in batch {
            let mut g = Graph::new();
            g.freeze_prefixes(self.frozen.iter().cloned());
            let loss = utt(&mut g, &self.params, i, &mut stats)?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(diverged);
            }
            stats.loss += v;
            let back = g.backward(loss)?;
            g.accumulate_param_grads(&back, &mut grads, 1.0);
        }
        let lr = noam_rate(self.schedule_offset + self.local_step, self.d_model, self.warmup)? * self.lr_scale;
        match adam_step(&mut self.params, &grads, &mut self.opt, lr) {
            Err(TensorError::NonFiniteGradient(_)) => return Err(diverged),
            other => other?,
        }
        let rate = |z: usize, n: usize| (n > 0).then(|| z as f64 / n as f64);
        self.curve.push(CurvePoint {
            step: self.local_step,
            loss: stats.loss,
            mle: stats.mle,
            ctc: stats.ctc,
            l0: stats.l0,
            temporal_sparsity: rate(stats.zeros_t, stats.gates_t),
            feature_sparsity: rate(stats.zeros_f, stats.gates_f),
            lr,
        });
        if self.checkpoint_every > 0 && self.local_step.is_multiple_of(self.checkpoint_every) {
            self.snapshots.push(self.params.clone());
        }
        Ok(())
    }

    fn finish(self, arch: &Architecture, run: &RunConfig) -> StageOutput {
        let checkpoint = |params: ParamStore, optimizer: Option<OptimizerState>, step: u64| Checkpoint {
            architecture: arch.canonical_text(),
            run: run.to_text(),
            step,
            params,
            optimizer,
        };
        let every = self.checkpoint_every;
        let offset = self.schedule_offset;
        StageOutput {
            snapshots: self
                .snapshots
                .into_iter()
                .enumerate()
                .map(|(k, p)| checkpoint(p, None, offset + (k as u64 + 1) * every))
                .collect(),
            checkpoint: checkpoint(self.params, Some(self.opt), offset + self.local_step),
            curve: self.curve,
        }
    }
}

fn nonempty(corpus: &Corpus) -> Result<(), PipelineError> {
    if corpus.is_empty() {
        Err(PipelineError::EmptyCorpus)
    } else {
        Ok(())
    }
}

fn frames(corpus: &Corpus) -> Vec<Arc<Tensor>> {
    corpus.records.iter().map(|r| Arc::new(r.x.clone())).collect()
}

fn compatible(arch: &Architecture, corpus: &Corpus) -> Result<(), PipelineError> {
    if arch.vocab_size != corpus.vocab_size || arch.input_dim != corpus.dim {
        return Err(PipelineError::InvalidConfig(format!(
            "checkpoint expects vocabulary {} and {}-dim frames, corpus has {} and {}",
            arch.vocab_size, arch.input_dim, corpus.vocab_size, corpus.dim
        )));
    }
    Ok(())
}

fn scoped(params: &ParamStore, scopes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        if scopes.iter().any(|s| name.starts_with(s)) {
            out.insert(name, t.clone());
        }
    }
    out
}

/// Stage 1: `(1 - gamma) * MLE + gamma * CTC`, both summed over the batch
/// and divided by its target-token count.
pub fn train_asr(corpus: &Corpus, run: &RunConfig) -> Result<StageOutput, PipelineError> {
    run.validate()?;
    nonempty(corpus)?;
    let arch = Architecture::from_run(run, corpus.vocab_size, corpus.dim);
    let model = Seq2SeqModel::new(training_config(run, &arch, Role::Asr), ASR_SCOPE)?;
    let [mut init_rng, batch_rng, mut noise_rng] = stage_rngs(run.seed, STAGE_ASR);
    let xs = frames(corpus);
    let lens = corpus.records.iter().map(|r| r.y.len() + 1).collect();
    let mut batcher = Batcher::new(lens, run.batch_tokens, batch_rng);
    let mut tr = Trainer::new("asr", model.init_params(&mut init_rng), run, 0, Vec::new());
    let (eta, gamma) = (run.eta(), run.gamma);
    for _ in 0..run.asr_steps {
        let batch = batcher.next_batch();
        let total: usize = batch.iter().map(|&i| corpus.records[i].y.len() + 1).sum();
        let norm = 1.0 / total as f64;
        tr.step(&batch, |g, params, i, stats| {
            let x = shared(&xs[i], g);
            let mut mode = Mode::Train(&mut noise_rng);
            let t = asr_utterance_terms(g, &model, params, x, &corpus.records[i].y, gamma > 0.0, &mut mode)?;
            stats.mle += g.value(t.mle_sum).item() * norm;
            let mut loss = g.scale(t.mle_sum, eta * norm)?;
            if let Some(c) = t.ctc {
                *stats.ctc.get_or_insert(0.0) += g.value(c).item() * norm;
                let c = g.scale(c, gamma * norm)?;
                loss = g.add(loss, c)?;
            } else if gamma > 0.0 {
                stats.ctc.get_or_insert(0.0);
            }
            Ok(loss)
        })?;
    }
    Ok(tr.finish(&arch, run))
}

/// Stage 2: inserts the gates between the asr encoder and decoder and
/// optimizes `MLE + lambda * L0` without CTC. The MLE term is per target
/// token of the batch; the penalty is averaged over its utterances.
pub fn finetune_afs(asr: &Checkpoint, corpus: &Corpus, run: &RunConfig) -> Result<StageOutput, PipelineError> {
    run.validate()?;
    nonempty(corpus)?;
    let variant = run.afs_variant.ok_or(PipelineError::NoAfsVariant)?;
    let arch = Architecture::parse(&asr.architecture)?;
    compatible(&arch, corpus)?;
    let system = System::new(arch.clone(), Some(variant), SelectionMode::All)?.with_training(run)?;
    let mut params = scoped(&asr.params, &[ASR_SCOPE]);
    system.asr().check_params(&params)?;
    params.extend_prefixed(
        AFS_SCOPE,
        &AfsLayerParams::new(arch.d_model, variant, run.feature_init).to_store(),
    );

    let [_, batch_rng, mut noise_rng] = stage_rngs(run.seed, STAGE_AFS);
    let xs = frames(corpus);
    let lens = corpus.records.iter().map(|r| r.y.len() + 1).collect();
    let mut batcher = Batcher::new(lens, run.batch_tokens, batch_rng);
    let offset = if run.reset_lr { 0 } else { asr.step };
    let frozen = if run.gates_only {
        vec![ASR_SCOPE.to_string()]
    } else {
        Vec::new()
    };
    let mut tr = Trainer::new("afs", params, run, offset, frozen);
    let lambda = run.lambda;
    let hc = *system.hard_concrete();
    for _ in 0..run.afs_steps {
        let batch = batcher.next_batch();
        let total: usize = batch.iter().map(|&i| corpus.records[i].y.len() + 1).sum();
        let (norm, per_utt) = (1.0 / total as f64, 1.0 / batch.len() as f64);
        tr.step(&batch, |g, params, i, stats| {
            let x = shared(&xs[i], g);
            let enc = system.asr().encode(
                g,
                params,
                SourceInput::Features(x),
                None,
                &mut Mode::Train(&mut noise_rng),
            )?;
            let (n, d) = (g.value(enc).rows(), g.value(enc).cols());
            let temporal = hc.draw_noise(&mut noise_rng, n);
            let feature = system
                .afs_variant()
                .filter(|v| *v == crate::gates::AfsVariant::TF)
                .map(|_| hc.draw_noise(&mut noise_rng, d));
            let noise = GateNoise::Sampled {
                temporal: &temporal,
                feature: feature.as_deref(),
            };
            let y = &corpus.records[i].y;
            let t = afs_utterance_terms(g, &system, params, enc, y, noise, &mut Mode::Train(&mut noise_rng))?;
            stats.mle += g.value(t.mle_sum).item() * norm;
            *stats.l0.get_or_insert(0.0) += g.value(t.penalty).item() * per_utt;
            stats.add_gates(&t.gates);
            let mut loss = g.scale(t.mle_sum, norm)?;
            if lambda > 0.0 {
                let p = g.scale(t.penalty, lambda * per_utt)?;
                loss = g.add(loss, p)?;
            }
            Ok(loss)
        })?;
    }
    Ok(tr.finish(&arch, run))
}

/// Stage 3: trains the st model on selected asr encoder outputs. The asr
/// encoder and gates are frozen unless `unfreeze_asr` is set, in which
/// case their outputs are recomputed (with dropout) at every step instead
/// of cached.
pub fn train_st(source: &Checkpoint, corpus: &Corpus, run: &RunConfig) -> Result<StageOutput, PipelineError> {
    run.validate()?;
    nonempty(corpus)?;
    let arch = Architecture::parse(&source.architecture)?;
    compatible(&arch, corpus)?;
    let selection = SelectionMode::from_run(run);
    let afs = afs_variant_of(&source.params);
    if matches!(selection, SelectionMode::Afs { .. }) && afs.is_none() {
        return Err(PipelineError::MissingComponent("afs"));
    }
    let system = System::new(arch.clone(), afs, selection)?.with_training(run)?;
    let mut params = scoped(&source.params, &[ASR_SCOPE, AFS_SCOPE]);
    system.asr().check_params(&params)?;
    let [mut init_rng, batch_rng, mut noise_rng] = stage_rngs(run.seed, STAGE_ST);
    let st_params = system.st().init_params(&mut init_rng);
    params.extend_prefixed("", &st_params);
    if let SelectionMode::Cnn(shape) = selection {
        params.extend_prefixed(
            "",
            &shape.init_params(arch.d_model, arch.d_model, CNN_SCOPE, &mut init_rng),
        );
    }

    // frozen front end: asr states for the convolution, selected features otherwise
    let cached: Option<Vec<Arc<Tensor>>> = if run.unfreeze_asr {
        None
    } else {
        let eval = System::new(arch.clone(), afs, selection)?;
        let mut out = Vec::with_capacity(corpus.len());
        for r in &corpus.records {
            let states = eval.speech_states(&params, &r.x)?;
            let t = if matches!(selection, SelectionMode::Cnn(_)) {
                states
            } else {
                let mut g = Graph::inference();
                let s = g.constant(states);
                let (src, _) = eval.st_source(&mut g, &params, s, r.id)?;
                g.value(src).clone()
            };
            out.push(Arc::new(t));
        }
        Some(out)
    };
    let xs = if run.unfreeze_asr { frames(corpus) } else { Vec::new() };
    let lens = corpus.records.iter().map(|r| r.z.len() + 1).collect();
    let mut batcher = Batcher::new(lens, run.batch_tokens, batch_rng);
    let frozen = if run.unfreeze_asr {
        Vec::new()
    } else {
        vec![ASR_SCOPE.to_string(), AFS_SCOPE.to_string()]
    };
    let mut tr = Trainer::new("st", params, run, 0, frozen);
    for _ in 0..run.st_steps {
        let batch = batcher.next_batch();
        let total: usize = batch.iter().map(|&i| corpus.records[i].z.len() + 1).sum();
        let norm = 1.0 / total as f64;
        tr.step(&batch, |g, params, i, stats| {
            let rec = &corpus.records[i];
            let src = match &cached {
                Some(c) => {
                    let v = shared(&c[i], g);
                    match selection {
                        SelectionMode::Cnn(shape) => cnn_select(g, params, CNN_SCOPE, v, shape)?,
                        _ => v,
                    }
                }
                None => {
                    let x = shared(&xs[i], g);
                    let mut mode = Mode::Train(&mut noise_rng);
                    let states = system
                        .asr()
                        .encode(g, params, SourceInput::Features(x), None, &mut mode)?;
                    system.st_source(g, params, states, rec.id)?.0
                }
            };
            let mut mode = Mode::Train(&mut noise_rng);
            let enc = system
                .st()
                .encode(g, params, SourceInput::Features(src), None, &mut mode)?;
            let (prefix, targets) = teacher_forcing(&rec.z);
            let out = system
                .st()
                .decode_logits(g, params, enc, None, &prefix, &mut mode, false)?;
            let (sum, _) = label_smoothed_nll_sum(g, out.logits, &targets, system.st().config().label_smoothing, None)?;
            stats.mle += g.value(sum).item() * norm;
            Ok(g.scale(sum, norm)?)
        })?;
    }
    Ok(tr.finish(&arch, run))
}

/// Text-to-text model for the cascade: transcript `y` to translation `z`.
pub fn train_mt(corpus: &Corpus, run: &RunConfig) -> Result<StageOutput, PipelineError> {
    run.validate()?;
    nonempty(corpus)?;
    let arch = Architecture::from_run(run, corpus.vocab_size, corpus.dim);
    let model = Seq2SeqModel::new(training_config(run, &arch, Role::Mt), MT_SCOPE)?;
    let [mut init_rng, batch_rng, mut noise_rng] = stage_rngs(run.seed, STAGE_MT);
    let lens = corpus.records.iter().map(|r| r.z.len() + 1).collect();
    let mut batcher = Batcher::new(lens, run.batch_tokens, batch_rng);
    let mut tr = Trainer::new("mt", model.init_params(&mut init_rng), run, 0, Vec::new());
    for _ in 0..run.mt_steps {
        let batch = batcher.next_batch();
        let total: usize = batch.iter().map(|&i| corpus.records[i].z.len() + 1).sum();
        let norm = 1.0 / total as f64;
        tr.step(&batch, |g, params, i, stats| {
            let rec = &corpus.records[i];
            let mut mode = Mode::Train(&mut noise_rng);
            let enc = model.encode(g, params, SourceInput::Tokens(&rec.y), None, &mut mode)?;
            let (prefix, targets) = teacher_forcing(&rec.z);
            let out = model.decode_logits(g, params, enc, None, &prefix, &mut mode, false)?;
            let (sum, _) = label_smoothed_nll_sum(g, out.logits, &targets, model.config().label_smoothing, None)?;
            stats.mle += g.value(sum).item() * norm;
            Ok(g.scale(sum, norm)?)
        })?;
    }
    Ok(tr.finish(&arch, run))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_fill_the_budget_and_cover_an_epoch() {
        let mut b = Batcher::new(vec![3, 4, 5, 6, 7], 8, ChaCha8Rng::seed_from_u64(1));
        let mut seen = Vec::new();
        while seen.len() < 5 {
            let batch = b.next_batch();
            let tokens: usize = batch.iter().map(|&i| b.lens[i]).sum();
            assert!(tokens >= 8 || seen.len() + batch.len() == 5);
            seen.extend(batch);
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stage_generators_are_distinct_streams() {
        use rand::Rng;
        let [mut a, mut b, _] = stage_rngs(1, STAGE_ASR);
        let [mut c, ..] = stage_rngs(1, STAGE_AFS);
        let (x, y, z): (u64, u64, u64) = (a.random(), b.random(), c.random());
        assert!(x != y && y != z && x != z);
    }
}
