use afs_core::frontend::{synth_generate, Corpus, SyntheticSpec};
use afs_core::gates::AfsVariant;
use afs_core::metrics::{
    bleu, corpus_wer, edit_distance, evaluate_asr, histogram, sparsity_report, speedup_bench, wer, zero_rate,
    BleuSmoothing, MetricsError,
};
use afs_core::pipeline::{finetune_afs, train_asr, train_st, Checkpoint, RunConfig, SelectionKind, System};
use afs_core::tensor::Tensor;
use proptest::prelude::*;

fn tiny_corpus(records: usize) -> Corpus {
    synth_generate(&SyntheticSpec {
        vocab: 5,
        dim: 12,
        records,
        seed: 3,
        sentence_len: (2, 4),
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn tiny_run() -> RunConfig {
    RunConfig::parse(
        "d_model = 8\nheads = 2\nd_ff = 16\nencoder_layers = 1\ndecoder_layers = 1\nst_encoder_layers = 1\n\
         max_positions = 128\nasr_steps = 6\nafs_steps = 4\nst_steps = 6\nwarmup = 2\nlr_scale = 0.2\n\
         batch_tokens = 12\nbeam = 2\nmax_decode_len = 8\nlambda = 0.05\n",
    )
    .unwrap()
}

fn afs_checkpoint(corpus: &Corpus, variant: AfsVariant) -> Checkpoint {
    let run = RunConfig {
        afs_variant: Some(variant),
        ..tiny_run()
    };
    let asr = train_asr(corpus, &run).unwrap().checkpoint;
    finetune_afs(&asr, corpus, &run).unwrap().checkpoint
}

#[test]
fn bleu_matches_hand_counts() {
    let hyps = vec![vec!["a", "b", "c", "d"], vec!["e", "e"]];
    let refs = vec![vec!["a", "b", "d", "c"], vec!["e", "f", "g"]];
    // unigrams: 4 + min(2, 1); bigrams: `a b` only; no trigram or 4-gram matches
    let s = bleu(&hyps, &refs, 4, BleuSmoothing::None).unwrap();
    assert_eq!(s.matches, vec![5, 1, 0, 0]);
    assert_eq!(s.totals, vec![6, 4, 2, 1]);
    assert_eq!((s.hyp_len, s.ref_len), (6, 7));
    assert_eq!(s.score, 0.0);

    let bp = (1.0f64 - 7.0 / 6.0).exp();
    assert!((s.brevity_penalty - bp).abs() < 1e-15);
    let smoothed = bleu(&hyps, &refs, 4, BleuSmoothing::Exp).unwrap();
    // third order: 1 / (2 * 2), fourth: 1 / (4 * 1)
    let want = 100.0 * bp * (5.0 / 6.0 * 1.0 / 4.0 * 1.0 / 4.0 * 1.0 / 4.0f64).powf(0.25);
    assert!((smoothed.score - want).abs() < 1e-10, "{} vs {want}", smoothed.score);

    let bigram = bleu(&hyps, &refs, 2, BleuSmoothing::None).unwrap();
    let want = 100.0 * bp * (5.0 / 6.0 * 1.0 / 4.0f64).sqrt();
    assert!((bigram.score - want).abs() < 1e-10);
}

#[test]
fn bleu_of_the_reference_is_100() {
    let refs = vec![vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]];
    let s = bleu(&refs, &refs, 4, BleuSmoothing::None).unwrap();
    assert!((s.score - 100.0).abs() < 1e-12);
    assert_eq!(format!("{:.2}", s.score), "100.00");
}

#[test]
fn no_four_gram_match_scores_zero() {
    let hyps = vec![vec![1, 2, 3, 4, 5]];
    let refs = vec![vec![1, 2, 3, 5, 4]];
    let s = bleu(&hyps, &refs, 4, BleuSmoothing::None).unwrap();
    assert_eq!(s.matches[3], 0);
    assert_eq!(s.score, 0.0);
    assert!(bleu(&hyps, &refs, 4, BleuSmoothing::Exp).unwrap().score > 0.0);
}

#[test]
fn metric_inputs_are_validated() {
    let one = vec![vec![1]];
    let none: Vec<Vec<i32>> = Vec::new();
    assert!(matches!(
        bleu(&none, &none, 4, BleuSmoothing::None),
        Err(MetricsError::EmptyCorpus)
    ));
    assert!(matches!(
        bleu(&one, &none, 4, BleuSmoothing::None),
        Err(MetricsError::LengthMismatch { hyps: 1, refs: 0 })
    ));
    assert!(matches!(corpus_wer(&one, &[vec![]]), Err(MetricsError::EmptyReference)));
}

#[test]
fn corpus_wer_pools_edits() {
    let hyps = vec![vec![1, 2, 3], vec![4]];
    let refs = vec![vec![1, 9, 3], vec![4, 5, 6]];
    assert!((corpus_wer(&hyps, &refs).unwrap() - 3.0 / 6.0).abs() < 1e-15);
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..8)
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in seq(), b in seq(), c in seq()) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        prop_assert!(edit_distance(&a, &b) >= a.len().abs_diff(b.len()));
        if a != b {
            prop_assert!(edit_distance(&a, &b) > 0);
        }
    }

    #[test]
    fn wer_of_identity_is_zero(a in prop::collection::vec(0u8..4, 1..8)) {
        prop_assert_eq!(wer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn bleu_ignores_corpus_order(
        pairs in prop::collection::vec((seq(), seq()), 1..6),
        rot in 0usize..6,
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let mut hp = h.clone();
        hp.rotate_left(k);
        let mut rp = r.clone();
        rp.rotate_left(k);
        hp.reverse();
        rp.reverse();
        for smoothing in [BleuSmoothing::None, BleuSmoothing::Exp] {
            let a = bleu(&h, &r, 4, smoothing).unwrap();
            let b = bleu(&hp, &rp, 4, smoothing).unwrap();
            prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
            prop_assert!((0.0..=100.0).contains(&a.score));
        }
    }
}

#[test]
fn zero_rate_counts_exact_zeros() {
    assert_eq!(zero_rate(&[0.0, 0.7, 0.0, 0.9]), 0.5);
    assert_eq!(zero_rate(&[]), 0.0);
    assert_eq!(histogram(&[0.0, 0.7, 0.0, 0.9], 2), vec![2, 2]);
}

#[test]
fn temporal_only_report_has_no_feature_section() {
    let corpus = tiny_corpus(8);
    let ckpt = afs_checkpoint(&corpus, AfsVariant::T);
    let system = System::from_checkpoint(&ckpt).unwrap();
    let report = sparsity_report(&system, &ckpt.params, &corpus).unwrap();
    assert!(report.feature_rate.is_none() && report.feature_histogram.is_none());
    let text = report.to_text();
    assert!(text.contains("# summary") && text.contains("# temporal"));
    assert!(!text.contains("# feature"));
    assert_eq!(report.utterances.len(), corpus.len());
}

#[test]
fn report_rates_are_consistent() {
    let corpus = tiny_corpus(8);
    let ckpt = afs_checkpoint(&corpus, AfsVariant::TF);
    let system = System::from_checkpoint(&ckpt).unwrap();
    let report = sparsity_report(&system, &ckpt.params, &corpus).unwrap();
    let text = report.to_text();
    assert!(text.contains("# feature\n") && text.contains("# feature_histogram\n"));
    let frames: usize = report.utterances.iter().map(|u| u.frames).sum();
    let weighted: f64 = report
        .utterances
        .iter()
        .map(|u| u.temporal_rate * u.frames as f64)
        .sum::<f64>()
        / frames as f64;
    assert!((report.temporal_rate - weighted).abs() < 1e-12);
    for u in &report.utterances {
        assert!((0.0..=1.0).contains(&u.temporal_rate));
        assert_eq!(u.kept.len() as f64, u.frames as f64 * (1.0 - u.temporal_rate));
    }
    assert_eq!(report.feature_histogram.unwrap().iter().sum::<usize>(), 8);
}

#[test]
fn report_needs_gates() {
    let corpus = tiny_corpus(4);
    let asr = train_asr(&corpus, &tiny_run()).unwrap().checkpoint;
    let system = System::from_checkpoint(&asr).unwrap();
    assert!(sparsity_report(&system, &asr.params, &corpus).is_err());
}

#[test]
fn parallel_evaluation_keeps_record_order() {
    let corpus = tiny_corpus(9);
    let run = tiny_run();
    let asr = train_asr(&corpus, &run).unwrap().checkpoint;
    let system = System::from_checkpoint(&asr).unwrap();
    let beam = run.beam_config();
    let (rate, hyps) = evaluate_asr(&system, &asr.params, &corpus, &beam).unwrap();
    let serial: Vec<Vec<usize>> = corpus
        .records
        .iter()
        .map(|r| system.transcribe(&asr.params, &r.x, &beam).unwrap().tokens)
        .collect();
    assert_eq!(hyps, serial);
    let refs: Vec<Vec<usize>> = corpus.records.iter().map(|r| r.y.clone()).collect();
    assert_eq!(rate, corpus_wer(&serial, &refs).unwrap());
}

#[test]
fn inspection_attention_rows_are_distributions() {
    let corpus = tiny_corpus(6);
    let run = tiny_run();
    let ckpt = afs_checkpoint(&corpus, AfsVariant::T);
    let system = System::from_checkpoint(&ckpt).unwrap();
    let beam = run.beam_config();
    for r in &corpus.records[..3] {
        let ins = system.inspect(&ckpt.params, &r.x, r.id, &beam).unwrap();
        let gates = ins.gates.as_ref().unwrap();
        assert!(gates.feature_gates.is_none());
        assert_eq!(gates.temporal_gates.len(), r.frames());
        assert_eq!(ins.attention.rows(), ins.hypothesis.tokens.len() + 1);
        assert_eq!(ins.attention.cols(), ins.kept.len());
        for s in 0..ins.attention.rows() {
            let sum: f64 = ins.attention.row(s).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "{sum}");
        }
    }

    let st_run = RunConfig {
        selection: SelectionKind::All,
        ..run
    };
    let st = train_st(&ckpt, &corpus, &st_run).unwrap().checkpoint;
    let system = System::from_checkpoint(&st).unwrap();
    let r = &corpus.records[0];
    let ins = system.inspect(&st.params, &r.x, r.id, &beam).unwrap();
    assert_eq!(ins.kept.len(), r.frames());
    for s in 0..ins.attention.rows() {
        assert!((ins.attention.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

fn doubled(corpus: &Corpus) -> Corpus {
    let mut c = corpus.clone();
    for r in &mut c.records {
        let (n, d) = (r.x.rows(), r.x.cols());
        let mut data = r.x.data().to_vec();
        data.extend_from_slice(r.x.data());
        r.x = Tensor::matrix(2 * n, d, data).unwrap();
    }
    c
}

#[test]
fn bench_is_symmetric_and_tracks_length() {
    let corpus = tiny_corpus(48);
    let run = RunConfig {
        selection: SelectionKind::All,
        ..tiny_run()
    };
    let asr = train_asr(&corpus, &run).unwrap().checkpoint;
    let st = train_st(&asr, &corpus, &run).unwrap().checkpoint;
    let system = System::from_checkpoint(&st).unwrap();
    let beam = run.beam_config();
    let me = (&system, &st.params);
    assert!(matches!(
        speedup_bench(me, me, &corpus.records, 16, 2, &beam),
        Err(MetricsError::TooFewRuns(2))
    ));
    let same = speedup_bench(me, me, &corpus.records, 16, 5, &beam).unwrap();
    assert!((0.9..=1.1).contains(&same.speedup), "{}", same.speedup);
    assert_eq!((same.batch_size, same.runs), (16, 5));
    assert!(same.to_text().starts_with("system\tmean_batch_secs"));

    let long = doubled(&corpus);
    let base = speedup_bench(me, me, &corpus.records, 16, 3, &beam).unwrap();
    let slow = speedup_bench(me, me, &long.records, 16, 3, &beam).unwrap();
    assert!(
        slow.baseline_mean > base.baseline_mean,
        "{} vs {}",
        slow.baseline_mean,
        base.baseline_mean
    );
}
