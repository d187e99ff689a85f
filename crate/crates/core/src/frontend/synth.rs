use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::corpus::{Corpus, CorpusRecord, FrameLabel};
use super::FrontendError;
use crate::tensor::Tensor;
use crate::transformer::FIRST_CONTENT;

/// Parameters of the synthetic speech corpus. Every content token is
/// rendered as a fixed sequence of phone patterns; pauses are pure noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Number of content tokens; ids run from 3 upwards.
    pub vocab: usize,
    pub phones_per_token: usize,
    /// Inclusive range of frames each phone occupies.
    pub frames_per_phone: (usize, usize),
    /// Target fraction of silence frames in each utterance.
    pub silence_prob: f64,
    /// Inclusive range of frames per silence span.
    pub silence_len: (usize, usize),
    pub noise: f64,
    /// Fraction of adjacent token pairs the translation swaps.
    pub reorder_prob: f64,
    /// Inclusive range of transcript lengths.
    pub sentence_len: (usize, usize),
    pub dim: usize,
    pub records: usize,
    /// Drives record sampling.
    pub seed: u64,
    /// Drives the phone patterns and the translation mapping, so corpora
    /// with different `seed` but equal `inventory_seed` share a language.
    pub inventory_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab: 16,
            phones_per_token: 2,
            frames_per_phone: (2, 3),
            silence_prob: 0.3,
            silence_len: (2, 5),
            noise: 0.3,
            reorder_prob: 0.3,
            sentence_len: (3, 7),
            dim: 360,
            records: 200,
            seed: 1,
            inventory_seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Model vocabulary size: specials plus content tokens.
    pub fn vocab_size(&self) -> usize {
        FIRST_CONTENT + self.vocab
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |m: &str| Err(FrontendError::InvalidSpec(m.to_string()));
        if self.vocab == 0 || self.phones_per_token == 0 || self.dim == 0 {
            return bad("vocab, phones_per_token and dim must be positive");
        }
        if !(0.0..1.0).contains(&self.silence_prob) {
            return bad("silence_prob must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.reorder_prob) {
            return bad("reorder_prob must lie in [0, 1]");
        }
        for (name, (lo, hi)) in [
            ("frames_per_phone", self.frames_per_phone),
            ("silence_len", self.silence_len),
            ("sentence_len", self.sentence_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(&format!("{name} must be a non-empty positive range"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// The language shared by corpora with one inventory seed.
struct Inventory {
    /// Phone patterns per content token.
    patterns: Vec<Vec<Vec<f64>>>,
    /// Translation of each content token (index by `id - FIRST_CONTENT`).
    translation: Vec<usize>,
    /// `swap[a][b]`: the translation emits the pair `(a, b)` reversed.
    swap: Vec<Vec<bool>>,
}

impl Inventory {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.inventory_seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let patterns = (0..spec.vocab)
            .map(|_| {
                (0..spec.phones_per_token)
                    .map(|_| (0..spec.dim).map(|_| unit.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        let mut translation: Vec<usize> = (FIRST_CONTENT..FIRST_CONTENT + spec.vocab).collect();
        translation.shuffle(&mut rng);
        let swap = (0..spec.vocab)
            .map(|_| {
                (0..spec.vocab)
                    .map(|_| rng.random::<f64>() < spec.reorder_prob)
                    .collect()
            })
            .collect();
        Self {
            patterns,
            translation,
            swap,
        }
    }

    /// Token-wise mapping, then a left-to-right pass swapping marked pairs
    /// without overlap.
    fn translate(&self, y: &[usize]) -> Vec<usize> {
        let mut z: Vec<usize> = y.iter().map(|&t| self.translation[t - FIRST_CONTENT]).collect();
        let mut i = 0;
        while i + 1 < y.len() {
            if self.swap[y[i] - FIRST_CONTENT][y[i + 1] - FIRST_CONTENT] {
                z.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        z
    }
}

/// Generates `spec.records` utterances. Record `i` draws from its own stream
/// of the seeded generator, so records are independent of generation order.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Corpus, FrontendError> {
    spec.validate()?;
    let inv = Inventory::new(spec);
    let records = (0..spec.records)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            render(spec, &inv, i as u64, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    Ok(Corpus {
        vocab_size: spec.vocab_size(),
        dim: spec.dim,
        records,
    })
}

fn render(spec: &SyntheticSpec, inv: &Inventory, id: u64, rng: &mut ChaCha8Rng) -> Result<CorpusRecord, FrontendError> {
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("positive std");
    let len = rng.random_range(spec.sentence_len.0..=spec.sentence_len.1);
    let y: Vec<usize> = (0..len)
        .map(|_| FIRST_CONTENT + rng.random_range(0..spec.vocab))
        .collect();

    let mut token_frames = Vec::with_capacity(len);
    let mut informative = 0;
    for &t in &y {
        let mut frames = Vec::new();
        for phone in &inv.patterns[t - FIRST_CONTENT] {
            let reps = rng.random_range(spec.frames_per_phone.0..=spec.frames_per_phone.1);
            frames.extend(std::iter::repeat_n(phone, reps));
        }
        informative += frames.len();
        token_frames.push(frames);
    }

    // silence spans sized to hit the target fraction, dropped into the
    // len + 1 gaps around tokens
    let p = spec.silence_prob;
    let mut remaining = (informative as f64 * p / (1.0 - p)).round() as usize;
    let mut gaps = vec![0usize; len + 1];
    while remaining > 0 {
        let span = rng.random_range(spec.silence_len.0..=spec.silence_len.1).min(remaining);
        gaps[rng.random_range(0..=len)] += span;
        remaining -= span;
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut push = |pattern: Option<&Vec<f64>>, label: FrameLabel, rng: &mut ChaCha8Rng| {
        for j in 0..spec.dim {
            let base = pattern.map_or(0.0, |p| p[j]);
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(base + n);
        }
        labels.push(label);
    };
    for (k, frames) in token_frames.iter().enumerate() {
        for _ in 0..gaps[k] {
            push(None, FrameLabel::Silence, rng);
        }
        for phone in frames {
            push(Some(phone), FrameLabel::Token(y[k]), rng);
        }
    }
    for _ in 0..gaps[len] {
        push(None, FrameLabel::Silence, rng);
    }
    let n = labels.len();
    Ok(CorpusRecord {
        id,
        x: Tensor::matrix(n, spec.dim, data)?,
        z: inv.translate(&y),
        y,
        labels: Some(labels),
    })
}
