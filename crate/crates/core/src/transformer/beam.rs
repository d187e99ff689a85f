use std::cmp::Ordering;

use super::{ModelError, BOS, EOS, PAD};

/// Supplies next-token log-probabilities for growing prefixes.
pub trait StepScorer {
    type State: Clone;

    /// State after BOS and the log-probabilities of the first token.
    fn start(&mut self) -> Result<(Self::State, Vec<f64>), ModelError>;

    /// Appends `token` to the prefix behind `state`.
    fn extend(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>), ModelError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthPenalty {
    /// `((5 + len) / 6)^alpha`
    Gnmt,
    /// `len^alpha`
    Power,
}

/// Divisor applied to a hypothesis' log-probability; `len` counts EOS.
pub fn length_penalty(len: usize, alpha: f64, kind: LengthPenalty) -> f64 {
    match kind {
        LengthPenalty::Gnmt => ((5.0 + len as f64) / 6.0).powf(alpha),
        LengthPenalty::Power => (len as f64).powf(alpha),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub alpha: f64,
    pub penalty: LengthPenalty,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub eos: usize,
    /// Ids never generated.
    pub excluded: Vec<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            alpha: 0.6,
            penalty: LengthPenalty::Gnmt,
            max_len: 100,
            eos: EOS,
            excluded: vec![PAD, BOS],
        }
    }
}

impl BeamConfig {
    pub fn score(&self, log_prob: f64, len: usize) -> f64 {
        log_prob / length_penalty(len, self.alpha, self.penalty)
    }

    /// Generable ids ordered by log-probability, ties by id.
    fn ranked(&self, lp: &[f64]) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..lp.len()).filter(|k| !self.excluded.contains(k)).collect();
        ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        ids
    }
}

/// A decoded sequence. `tokens` never includes EOS; `finished` is false when
/// decoding hit `max_len` without producing one.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Length used for normalisation.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }
}

/// Best first by score, then the lexicographically smaller sequence.
fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

struct Alive<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    next: Vec<f64>,
}

/// Beam search with length-normalised final ranking.
///
/// Each step expands every alive prefix with its `beam` most likely tokens.
/// EOS expansions among those become finished hypotheses; the remaining
/// expansions, ranked by cumulative log-probability (ties by parent rank then
/// token id), refill the beam. Decoding stops once `beam` hypotheses have
/// finished, the beam empties, or `max_len` tokens have been generated.
pub fn beam_search<S: StepScorer>(scorer: &mut S, config: &BeamConfig) -> Result<Hypothesis, ModelError> {
    if config.beam == 0 {
        return Err(ModelError::ZeroBeam);
    }
    let (state, next) = scorer.start()?;
    let mut alive = vec![Alive {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut unfinished: Vec<Hypothesis> = Vec::new();

    for step in 1..=config.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (rank, h) in alive.iter().enumerate() {
            for &k in config.ranked(&h.next).iter().take(config.beam) {
                cands.push((h.log_prob + h.next[k], rank, k));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let last = step == config.max_len;
        let mut next_alive = Vec::with_capacity(config.beam);
        for (lp, rank, k) in cands {
            let parent = &alive[rank];
            if k == config.eos {
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob: lp,
                    score: config.score(lp, parent.tokens.len() + 1),
                    finished: true,
                });
                continue;
            }
            if next_alive.len() == config.beam {
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(k);
            if last {
                unfinished.push(Hypothesis {
                    score: config.score(lp, tokens.len()),
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
                next_alive.push(None);
            } else {
                let (state, next) = scorer.extend(&parent.state, k)?;
                next_alive.push(Some(Alive {
                    tokens,
                    log_prob: lp,
                    state,
                    next,
                }));
            }
        }
        alive = next_alive.into_iter().flatten().collect();
        if finished.len() >= config.beam || alive.is_empty() {
            break;
        }
    }

    if let Some(best) = finished.into_iter().min_by(better) {
        return Ok(best);
    }
    let fallback = unfinished.into_iter().chain(alive.into_iter().map(|h| Hypothesis {
        score: config.score(h.log_prob, h.tokens.len()),
        tokens: h.tokens,
        log_prob: h.log_prob,
        finished: false,
    }));
    fallback.min_by(better).ok_or(ModelError::EmptyInput)
}

/// Takes the most likely generable token at every step until EOS or
/// `config.max_len`.
pub fn greedy_search<S: StepScorer>(scorer: &mut S, config: &BeamConfig) -> Result<Hypothesis, ModelError> {
    let (mut state, mut next) = scorer.start()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..config.max_len {
        let k = *config.ranked(&next).first().ok_or(ModelError::EmptyInput)?;
        log_prob += next[k];
        if k == config.eos {
            return Ok(Hypothesis {
                score: config.score(log_prob, tokens.len() + 1),
                tokens,
                log_prob,
                finished: true,
            });
        }
        tokens.push(k);
        if tokens.len() == config.max_len {
            break;
        }
        (state, next) = scorer.extend(&state, k)?;
    }
    Ok(Hypothesis {
        score: config.score(log_prob, tokens.len()),
        tokens,
        log_prob,
        finished: false,
    })
}
