use std::io::Write;

use afs_core::frontend::{
    cmvn, frame_count, load_corpus, logmel, manifest_path, read_wav, save_corpus, speech_features, synth_generate,
    write_manifest, Corpus, FeatureConfig, FrameLabel, FrontendError, SyntheticSpec, WaveForm,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tone(rate: u32, n: usize, hz: f64, amp: f64) -> WaveForm {
    let s = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / f64::from(rate)).sin())
        .collect();
    WaveForm::new(rate, s).unwrap()
}

fn broadband(rate: u32, n: usize, amp: f64) -> WaveForm {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    WaveForm::new(rate, (0..n).map(|_| amp * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn doubling_amplitude_shifts_log_mel_by_ln_4() {
    let cfg = FeatureConfig::default();
    let a = logmel(&broadband(16000, 4000, 0.2), &cfg).unwrap();
    let b = logmel(&broadband(16000, 4000, 0.4), &cfg).unwrap();
    for (x, y) in a.data.data().iter().zip(b.data.data()) {
        assert!((y - x - 4f64.ln()).abs() < 1e-6, "{x} -> {y}");
    }
    // a tone leaves far-away bands on the floor; every band above it shifts
    let a = logmel(&tone(16000, 4000, 1000.0, 0.2), &cfg).unwrap();
    let b = logmel(&tone(16000, 4000, 1000.0, 0.4), &cfg).unwrap();
    let floor = cfg.log_floor.ln();
    let mut shifted = 0;
    for (x, y) in a.data.data().iter().zip(b.data.data()) {
        if *x > floor + 1.0 {
            assert!((y - x - 4f64.ln()).abs() < 1e-6);
            shifted += 1;
        }
    }
    assert!(shifted >= a.frames() * 10, "{shifted}");
}

#[test]
fn one_second_chain_gives_32_stacked_frames() {
    let f = speech_features(&broadband(16000, 16000, 0.5), &FeatureConfig::default()).unwrap();
    assert_eq!((f.frames(), f.dim()), (32, 360));
    assert!(f.data.all_finite());
}

#[test]
fn cmvn_statistics_on_real_features() {
    let m = logmel(&broadband(16000, 8000, 0.3), &FeatureConfig::default()).unwrap();
    let raw = afs_core::frontend::add_deltas(&m).unwrap();
    let n = cmvn(&raw).unwrap();
    let (t, d) = (n.frames(), n.dim());
    let stats = |x: &afs_core::tensor::Tensor, j: usize| {
        let col: Vec<f64> = (0..t).map(|i| x.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        (mean, col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64)
    };
    for j in 0..d {
        let (mean, var) = stats(&n.data, j);
        assert!(mean.abs() < 1e-10);
        // the 1e-8 guard on the std is negligible once the raw std is well above it
        if stats(&raw.data, j).1.sqrt() > 1e-2 {
            assert!((var - 1.0).abs() < 1e-6, "dim {j}: {var}");
        }
    }
}

#[test]
fn wav_ingestion_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    for i in 0..1600 {
        w.write_sample(((i % 100) as i16 - 50) * 300).unwrap();
    }
    w.finalize().unwrap();
    let wave = read_wav(&path).unwrap();
    assert_eq!(wave.sample_rate, 16000);
    assert_eq!(wave.samples.len(), 1600);
    assert_eq!(wave.samples[0], -15000.0 / 32768.0);
    assert!(matches!(
        read_wav(dir.path().join("missing.wav")),
        Err(FrontendError::Wav(_))
    ));
}

fn small_spec(records: usize, silence: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        records,
        silence_prob: silence,
        seed,
        dim: 24,
        ..SyntheticSpec::default()
    }
}

#[test]
fn zero_silence_labels_every_frame_informative() {
    let c = synth_generate(&small_spec(30, 0.0, 1)).unwrap();
    for r in &c.records {
        assert!(r.labels.as_ref().unwrap().iter().all(|l| !l.is_silence()));
    }
}

#[test]
fn generator_is_deterministic() {
    let a = synth_generate(&small_spec(20, 0.3, 5)).unwrap();
    let b = synth_generate(&small_spec(20, 0.3, 5)).unwrap();
    assert_eq!(a, b);
    let c = synth_generate(&small_spec(20, 0.3, 6)).unwrap();
    assert_ne!(a, c);
    // record i is independent of how many records are generated
    let d = synth_generate(&small_spec(5, 0.3, 5)).unwrap();
    assert_eq!(&a.records[..5], &d.records[..]);
}

#[test]
fn silence_fraction_tracks_the_target() {
    let spec = small_spec(400, 0.3, 2);
    let c = synth_generate(&spec).unwrap();
    let frames: usize = c.records.iter().map(|r| r.frames()).sum();
    assert!(frames >= 10_000, "{frames}");
    let frac = c.silence_fraction().unwrap();
    assert!((frac - 0.3).abs() <= 0.02, "{frac}");
}

/// Nearest-centroid classifier fitted on one corpus and scored on another
/// from the same inventory: token identity is linearly recoverable from
/// informative frames and not from silence frames, which are scored
/// against the token that follows them.
#[test]
fn linear_classifier_sanity_oracle() {
    let spec = SyntheticSpec {
        records: 150,
        ..SyntheticSpec::default()
    };
    let train = synth_generate(&spec).unwrap();
    let test = synth_generate(&SyntheticSpec {
        seed: 99,
        ..spec.clone()
    })
    .unwrap();
    let v = spec.vocab_size();
    let mut sums = vec![vec![0.0; spec.dim]; v];
    let mut counts = vec![0usize; v];
    for r in &train.records {
        for (i, l) in r.labels.as_ref().unwrap().iter().enumerate() {
            if let FrameLabel::Token(t) = l {
                counts[*t] += 1;
                for (s, x) in sums[*t].iter_mut().zip(r.x.row(i)) {
                    *s += x;
                }
            }
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.iter().map(|x| x / c as f64).collect()))
        .collect();
    // argmax of w_t . x + b_t with w_t = mu_t, b_t = -|mu_t|^2 / 2
    let predict = |x: &[f64]| {
        centroids
            .iter()
            .enumerate()
            .filter_map(|(t, c)| {
                c.as_ref().map(|mu| {
                    let dot: f64 = mu.iter().zip(x).map(|(a, b)| a * b).sum();
                    let norm: f64 = mu.iter().map(|a| a * a).sum();
                    (t, dot - norm / 2.0)
                })
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    };
    let (mut inf_ok, mut inf_n, mut sil_ok, mut sil_n) = (0, 0, 0, 0);
    for r in &test.records {
        let labels = r.labels.as_ref().unwrap();
        for (i, l) in labels.iter().enumerate() {
            let guess = predict(r.x.row(i));
            match l {
                FrameLabel::Token(t) => {
                    inf_n += 1;
                    inf_ok += usize::from(guess == *t);
                }
                FrameLabel::Silence => {
                    let next = labels[i..].iter().find_map(|l| match l {
                        FrameLabel::Token(t) => Some(*t),
                        FrameLabel::Silence => None,
                    });
                    if let Some(t) = next {
                        sil_n += 1;
                        sil_ok += usize::from(guess == t);
                    }
                }
            }
        }
    }
    let inf_acc = inf_ok as f64 / inf_n as f64;
    let sil_acc = sil_ok as f64 / sil_n as f64;
    let chance = 1.0 / spec.vocab as f64;
    assert!(inf_acc > 0.9, "informative accuracy {inf_acc}");
    assert!(sil_acc < 2.0 * chance, "silence accuracy {sil_acc} vs chance {chance}");
}

#[test]
fn corpus_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.afsc");
    let c = synth_generate(&small_spec(3, 0.3, 4)).unwrap();
    save_corpus(&c, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), c);
    write_manifest(&c, manifest_path(&path)).unwrap();
    let text = std::fs::read_to_string(dir.path().join("c.afsc.manifest")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn empty_corpus_is_a_valid_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.afsc");
    let c = Corpus {
        vocab_size: 10,
        dim: 360,
        records: Vec::new(),
    };
    save_corpus(&c, &path).unwrap();
    let back = load_corpus(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!(back, c);
}

#[test]
fn damaged_files_give_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.afsc");
    save_corpus(&synth_generate(&small_spec(2, 0.3, 4)).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let write = |b: &[u8]| {
        let p = dir.path().join("bad.afsc");
        std::fs::File::create(&p).unwrap().write_all(b).unwrap();
        load_corpus(&p)
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(write(&bad), Err(FrontendError::BadMagic)));
    assert!(write(&bad).unwrap_err().to_string().contains("bad magic"));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(write(&bad), Err(FrontendError::UnsupportedVersion(9))));
    assert!(matches!(
        write(&bytes[..bytes.len() - 3]),
        Err(FrontendError::Truncated)
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(write(&long), Err(FrontendError::Corrupt(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frame_count_formula_is_exact(rate in prop::sample::select(vec![8000u32, 11025, 16000, 22050, 44100]), extra in 0usize..6000) {
        let cfg = FeatureConfig::default();
        let win = cfg.window_len(rate);
        let hop = cfg.hop_len(rate);
        let n = win + extra;
        let m = logmel(&broadband(rate, n, 0.1), &cfg).unwrap();
        prop_assert_eq!(m.frames(), (n - win) / hop + 1);
        prop_assert_eq!(m.frames(), frame_count(n, win, hop));
    }

    #[test]
    fn full_chain_is_finite_with_derived_length(extra in 0usize..8000) {
        let n = 400 + 160 + extra;
        let f = speech_features(&broadband(16000, n, 0.3), &FeatureConfig::default()).unwrap();
        prop_assert_eq!(f.frames(), frame_count(n, 400, 160) / 3);
        prop_assert_eq!(f.dim(), 360);
        prop_assert!(f.data.all_finite());
    }
}
