//! Word error rate, corpus BLEU, gate sparsity reports, decoding benchmarks
//! and corpus-level evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::time::Instant;

use thiserror::Error;

use crate::frontend::{Corpus, CorpusRecord};
use crate::pipeline::{PipelineError, System};
use crate::tensor::ParamStore;
use crate::transformer::BeamConfig;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty reference")]
    EmptyReference,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses for {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("benchmark needs at least 3 runs, got {0}")]
    TooFewRuns(usize),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + usize::from(x != y));
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over the reference length.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Total edits over total reference tokens.
pub fn corpus_wer<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64, MetricsError> {
    check_sizes(hyps.len(), refs.len())?;
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(MetricsError::EmptyReference);
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(h, r)).sum();
    Ok(edits as f64 / total as f64)
}

fn check_sizes(hyps: usize, refs: usize) -> Result<(), MetricsError> {
    if hyps != refs {
        return Err(MetricsError::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(())
}

/// Treatment of n-gram orders with no matches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BleuSmoothing {
    /// Any zero precision makes the score 0.
    #[default]
    None,
    /// The k-th zero precision becomes `1 / (2^k * total n-grams)`.
    Exp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    /// Clipped matches and totals per order.
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with one reference per segment: the geometric mean of
/// clipped n-gram precisions up to `max_n`, times the brevity penalty.
pub fn bleu<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
    smoothing: BleuSmoothing,
) -> Result<BleuScore, MetricsError> {
    check_sizes(hyps.len(), refs.len())?;
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    let mut zero = false;
    let mut k = 0;
    for n in 0..max_n {
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else {
            match smoothing {
                BleuSmoothing::Exp if totals[n] > 0 => {
                    k += 1;
                    1.0 / (2f64.powi(k) * totals[n] as f64)
                }
                _ => {
                    zero = true;
                    break;
                }
            }
        };
        log_sum += p.ln() / max_n as f64;
    }
    let score = if zero || hyp_len == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * log_sum.exp()
    };
    Ok(BleuScore {
        score,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Runs `f` over `records` on worker threads and returns the results in
/// record order.
pub fn map_records<R, F>(records: &[CorpusRecord], f: F) -> Result<Vec<R>, MetricsError>
where
    R: Send,
    F: Fn(&CorpusRecord) -> Result<R, PipelineError> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(records.len().max(1));
    if workers <= 1 {
        return Ok(records.iter().map(&f).collect::<Result<_, _>>()?);
    }
    let chunk = records.len().div_ceil(workers);
    let parts: Vec<Result<Vec<R>, PipelineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<_>, _>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Beam transcripts of every record and their word error rate.
pub fn evaluate_asr(
    system: &System,
    params: &ParamStore,
    corpus: &Corpus,
    beam: &BeamConfig,
) -> Result<(f64, Vec<Vec<usize>>), MetricsError> {
    let hyps = map_records(&corpus.records, |r| Ok(system.transcribe(params, &r.x, beam)?.tokens))?;
    let refs: Vec<Vec<usize>> = corpus.records.iter().map(|r| r.y.clone()).collect();
    Ok((corpus_wer(&hyps, &refs)?, hyps))
}

/// Beam translations of every record and their BLEU against `z`.
pub fn evaluate_st(
    system: &System,
    params: &ParamStore,
    corpus: &Corpus,
    beam: &BeamConfig,
    smoothing: BleuSmoothing,
) -> Result<(BleuScore, Vec<Vec<usize>>), MetricsError> {
    let hyps = map_records(&corpus.records, |r| {
        Ok(system.translate(params, &r.x, r.id, beam)?.tokens)
    })?;
    let refs: Vec<Vec<usize>> = corpus.records.iter().map(|r| r.z.clone()).collect();
    Ok((bleu(&hyps, &refs, 4, smoothing)?, hyps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceSparsity {
    pub id: u64,
    pub frames: usize,
    pub temporal_rate: f64,
    pub kept: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub utterances: Vec<UtteranceSparsity>,
    /// Closed gates over all positions of the corpus.
    pub temporal_rate: f64,
    /// Absent for temporal-only gating.
    pub feature_rate: Option<f64>,
    pub feature_gates: Option<Vec<f64>>,
    /// Counts of feature gate values in ten equal bins over `[0, 1]`.
    pub feature_histogram: Option<Vec<usize>>,
}

/// Fraction of exact zeros.
pub fn zero_rate(gates: &[f64]) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    gates.iter().filter(|&&g| g == 0.0).count() as f64 / gates.len() as f64
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

/// Expected-mode gates of every record.
pub fn sparsity_report(system: &System, params: &ParamStore, corpus: &Corpus) -> Result<SparsityReport, MetricsError> {
    if system.afs_variant().is_none() {
        return Err(PipelineError::MissingComponent("afs").into());
    }
    let sets = map_records(&corpus.records, |r| {
        let states = system.speech_states(params, &r.x)?;
        system.gates(params, &states)
    })?;
    let mut utterances = Vec::with_capacity(sets.len());
    let (mut zeros, mut total) = (0, 0);
    for (r, gs) in corpus.records.iter().zip(&sets) {
        let n = gs.temporal_gates.len();
        let z = gs.temporal_gates.iter().filter(|&&g| g == 0.0).count();
        zeros += z;
        total += n;
        utterances.push(UtteranceSparsity {
            id: r.id,
            frames: n,
            temporal_rate: zero_rate(&gs.temporal_gates),
            kept: (0..n).filter(|&i| gs.temporal_gates[i] != 0.0).collect(),
        });
    }
    let feature_gates = sets.first().and_then(|g| g.feature_gates.clone());
    Ok(SparsityReport {
        utterances,
        temporal_rate: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        feature_rate: feature_gates.as_deref().map(zero_rate),
        feature_histogram: feature_gates.as_deref().map(|f| histogram(f, 10)),
        feature_gates,
    })
}

impl SparsityReport {
    /// Sections introduced by `# name` lines, each a header line followed
    /// by tab-separated records.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# summary\nmetric\tvalue\n");
        let _ = writeln!(s, "temporal_rate\t{:.6}", self.temporal_rate);
        if let Some(f) = self.feature_rate {
            let _ = writeln!(s, "feature_rate\t{f:.6}");
        }
        s.push_str("# temporal\nid\tframes\ttemporal_rate\tkept\n");
        for u in &self.utterances {
            let kept: Vec<String> = u.kept.iter().map(ToString::to_string).collect();
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{}", u.id, u.frames, u.temporal_rate, kept.join(","));
        }
        if let (Some(gates), Some(hist)) = (&self.feature_gates, &self.feature_histogram) {
            s.push_str("# feature\ndim\tgate\n");
            for (j, g) in gates.iter().enumerate() {
                let _ = writeln!(s, "{j}\t{g:.6}");
            }
            s.push_str("# feature_histogram\nbin_lo\tbin_hi\tcount\n");
            let bins = hist.len() as f64;
            for (b, c) in hist.iter().enumerate() {
                let _ = writeln!(s, "{:.1}\t{:.1}\t{c}", b as f64 / bins, (b + 1) as f64 / bins);
            }
        }
        s
    }
}

/// Wall-clock decode timings of a candidate against a baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    /// Mean and standard deviation over runs of the mean time per batch, seconds.
    pub candidate_mean: f64,
    pub candidate_std: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    /// `baseline_mean / candidate_mean`.
    pub speedup: f64,
    pub batch_size: usize,
    pub runs: usize,
}

impl BenchResult {
    pub fn to_text(&self) -> String {
        format!(
            "system\tmean_batch_secs\tstd_secs\tbatch_size\truns\tspeedup\n\
             candidate\t{:.6}\t{:.6}\t{}\t{}\t{:.4}\nbaseline\t{:.6}\t{:.6}\t{}\t{}\t1.0000\n",
            self.candidate_mean,
            self.candidate_std,
            self.batch_size,
            self.runs,
            self.speedup,
            self.baseline_mean,
            self.baseline_std,
            self.batch_size,
            self.runs,
        )
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// A system and its parameters.
pub type Decoder<'a> = (&'a System, &'a ParamStore);

/// Times single-threaded beam translation of `records` in batches of
/// `batch_size`, alternating candidate and baseline within each run. Only
/// decoding is timed.
pub fn speedup_bench(
    candidate: Decoder<'_>,
    baseline: Decoder<'_>,
    records: &[CorpusRecord],
    batch_size: usize,
    runs: usize,
    beam: &BeamConfig,
) -> Result<BenchResult, MetricsError> {
    if runs < 3 {
        return Err(MetricsError::TooFewRuns(runs));
    }
    if batch_size == 0 {
        return Err(MetricsError::ZeroBatch);
    }
    if records.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let batches = records.len().div_ceil(batch_size) as f64;
    let time = |(system, params): Decoder<'_>| -> Result<f64, MetricsError> {
        let start = Instant::now();
        for batch in records.chunks(batch_size) {
            for r in batch {
                system.translate(params, &r.x, r.id, beam)?;
            }
        }
        Ok(start.elapsed().as_secs_f64() / batches)
    };
    let mut cand = Vec::with_capacity(runs);
    let mut base = Vec::with_capacity(runs);
    for _ in 0..runs {
        cand.push(time(candidate)?);
        base.push(time(baseline)?);
    }
    let (candidate_mean, candidate_std) = mean_std(&cand);
    let (baseline_mean, baseline_std) = mean_std(&base);
    Ok(BenchResult {
        candidate_mean,
        candidate_std,
        baseline_mean,
        baseline_std,
        speedup: baseline_mean / candidate_mean,
        batch_size,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 9, 3], &[1, 2, 3]), 1);
        assert_eq!(edit_distance::<u8>(&[], &[1, 2, 3]), 3);
        assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert!((wer(&["a", "x", "c"], &["a", "b", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer::<&str>(&[], &["a", "b", "c"]).unwrap(), 1.0);
        assert!(matches!(wer(&["a"], &[]), Err(MetricsError::EmptyReference)));
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(
            histogram(&[0.0, 0.05, 0.5, 1.0, 0.99], 10),
            vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 2]
        );
    }
}
