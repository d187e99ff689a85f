use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn afs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afs"))
        .args(args)
        .env_remove("AFS_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = afs(args);
    assert!(
        out.status.success(),
        "afs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_RUN: &[&str] = &[
    "--set",
    "d_model=8",
    "--set",
    "heads=2",
    "--set",
    "d_ff=16",
    "--set",
    "encoder_layers=1",
    "--set",
    "decoder_layers=1",
    "--set",
    "st_encoder_layers=1",
    "--set",
    "max_positions=128",
    "--set",
    "asr_steps=3",
    "--set",
    "afs_steps=3",
    "--set",
    "st_steps=3",
    "--set",
    "mt_steps=3",
    "--set",
    "warmup=2",
    "--set",
    "batch_tokens=12",
    "--set",
    "beam=2",
    "--set",
    "max_decode_len=6",
];

fn small_corpus(dir: &Path) -> PathBuf {
    let c = dir.join("c.afsc");
    ok(&[
        "gen-data",
        "--seed",
        "7",
        "--out",
        s(&c),
        "--records",
        "6",
        "--vocab",
        "4",
        "--dim",
        "12",
    ]);
    c
}

fn with_run<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL_RUN.iter().copied()).collect()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.afsc"), dir.path().join("b.afsc"));
    ok(&["gen-data", "--seed", "7", "--out", s(&a), "--records", "8"]);
    ok(&["gen-data", "--seed", "7", "--out", s(&b), "--records", "8"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.afsc");
    ok(&["gen-data", "--seed", "8", "--out", s(&c), "--records", "8"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert!(dir.path().join("a.afsc.manifest").exists());
    let run = fs::read_to_string(dir.path().join("a.afsc.run-manifest")).unwrap();
    assert!(run.starts_with("command\tgen-data\nseed\t7\n"));
    assert!(run.contains("config\trecords = 8"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.afsc"), dir.path().join("b.afsc"));
    ok(&["gen-data", "--seed", "11", "--out", s(&a), "--records", "4"]);
    let out = Command::new(env!("CARGO_BIN_EXE_afs"))
        .args(["gen-data", "--out", s(&b), "--records", "4"])
        .env("AFS_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn bleu_of_a_file_against_itself_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h");
    fs::write(&h, "0\t3 4 5 6 7\n1\t8 9 10 11\n").unwrap();
    let out = ok(&["eval", "--metric", "bleu", "--hyp", s(&h), "--ref", s(&h)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "100.00\n");
    let out = ok(&["eval", "--metric", "wer", "--hyp", s(&h), "--ref", s(&h)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "0.00\n");
}

#[test]
fn exit_codes() {
    assert_eq!(afs(&["--help"]).status.code(), Some(0));
    assert_eq!(afs(&["--version"]).status.code(), Some(0));
    let unknown = afs(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(afs(&["eval", "--metric", "bleu", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        afs(&[
            "eval",
            "--metric",
            "bleu",
            "--hyp",
            "/nonexistent/h",
            "--ref",
            "/nonexistent/r"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn gated_finetuning_reports_both_gate_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let asr = dir.path().join("asr.ckpt");
    ok(&with_run(&["train-asr", "--corpus", s(&c), "--out", s(&asr)]));
    let gated = dir.path().join("afs.ckpt");
    ok(&[
        "finetune-afs",
        "--asr",
        s(&asr),
        "--corpus",
        s(&c),
        "--out",
        s(&gated),
        "--lambda",
        "0.5",
        "--variant",
        "tf",
    ]);
    let report = String::from_utf8(ok(&["sparsity", "--ckpt", s(&gated), "--corpus", s(&c)]).stdout).unwrap();
    assert!(report.contains("# temporal\n"));
    assert!(report.contains("# feature\n"));
    assert!(report.contains("feature_rate\t"));

    let t_only = dir.path().join("afs_t.ckpt");
    ok(&[
        "finetune-afs",
        "--asr",
        s(&asr),
        "--corpus",
        s(&c),
        "--out",
        s(&t_only),
        "--variant",
        "t",
    ]);
    let report = String::from_utf8(ok(&["sparsity", "--ckpt", s(&t_only), "--corpus", s(&c)]).stdout).unwrap();
    assert!(report.contains("# temporal\n"));
    assert!(!report.contains("# feature\n"));

    let manifest = fs::read_to_string(dir.path().join("afs.ckpt.run-manifest")).unwrap();
    assert!(manifest.contains("config\tlambda = 0.5\n"));
    assert!(manifest.contains("config\tafs_variant = tf\n"));
    assert_eq!(manifest.lines().filter(|l| l.starts_with("input\t")).count(), 2);
}

#[test]
fn a_changed_architecture_is_refused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_corpus(dir.path());
    let asr = dir.path().join("asr.ckpt");
    ok(&with_run(&["train-asr", "--corpus", s(&c), "--out", s(&asr)]));
    let out = dir.path().join("afs.ckpt");
    let base = [
        "finetune-afs",
        "--asr",
        s(&asr),
        "--corpus",
        s(&c),
        "--out",
        s(&out),
        "--set",
        "d_ff=32",
    ];
    let refused = afs(&base);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("fingerprint"));
    let mut forced = base.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn full_pipeline_round_trip_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = small_corpus(d);
    let p = |n: &str| d.join(n);
    ok(&with_run(&[
        "train-asr",
        "--corpus",
        s(&c),
        "--out",
        s(&p("asr")),
        "--curve",
        s(&p("asr.curve")),
    ]));
    assert!(fs::read_to_string(p("asr.curve"))
        .unwrap()
        .starts_with("step\tloss\tmle\tctc"));
    ok(&[
        "finetune-afs",
        "--asr",
        s(&p("asr")),
        "--corpus",
        s(&c),
        "--out",
        s(&p("afs")),
    ]);
    // The tiny model closes every gate; a negative threshold keeps them all.
    for out in ["st1", "st2"] {
        ok(&[
            "--seed",
            "5",
            "train-st",
            "--source",
            s(&p("afs")),
            "--corpus",
            s(&c),
            "--out",
            s(&p(out)),
            "--set",
            "gate_threshold=-1",
        ]);
    }
    assert_eq!(fs::read(p("st1")).unwrap(), fs::read(p("st2")).unwrap());
    ok(&[
        "train-st",
        "--source",
        s(&p("asr")),
        "--corpus",
        s(&c),
        "--out",
        s(&p("base")),
        "--selection",
        "all",
    ]);
    ok(&with_run(&["train-mt", "--corpus", s(&c), "--out", s(&p("mt"))]));

    ok(&[
        "translate",
        "--ckpt",
        s(&p("st1")),
        "--corpus",
        s(&c),
        "--out",
        s(&p("hyp")),
        "--refs",
        s(&p("ref")),
    ]);
    let hyp = fs::read_to_string(p("hyp")).unwrap();
    assert_eq!(hyp.lines().count(), 6);
    assert!(hyp.lines().all(|l| l.contains('\t')));
    let bleu = ok(&[
        "eval",
        "--metric",
        "bleu",
        "--smooth",
        "--hyp",
        s(&p("hyp")),
        "--ref",
        s(&p("ref")),
    ]);
    let score: f64 = String::from_utf8(bleu.stdout).unwrap().trim().parse().unwrap();
    assert!((0.0..=100.0).contains(&score));

    let stdout = ok(&["transcribe", "--ckpt", s(&p("afs")), "--corpus", s(&c), "--beam", "1"]).stdout;
    assert_eq!(String::from_utf8(stdout).unwrap().lines().count(), 6);
    ok(&[
        "cascade",
        "--asr",
        s(&p("asr")),
        "--mt",
        s(&p("mt")),
        "--corpus",
        s(&c),
        "--out",
        s(&p("casc")),
    ]);
    assert_eq!(fs::read_to_string(p("casc")).unwrap().lines().count(), 6);

    let bench = ok(&[
        "bench",
        "--candidate",
        s(&p("st1")),
        "--baseline",
        s(&p("base")),
        "--corpus",
        s(&c),
        "--batch",
        "2",
        "--limit",
        "2",
    ]);
    let text = String::from_utf8(bench.stdout).unwrap();
    assert!(text.starts_with("system\tmean_batch_secs"));
    assert_eq!(
        afs(&[
            "bench",
            "--candidate",
            s(&p("st1")),
            "--baseline",
            s(&p("base")),
            "--corpus",
            s(&c),
            "--runs",
            "2"
        ])
        .status
        .code(),
        Some(2)
    );

    let inspect =
        String::from_utf8(ok(&["inspect", "--ckpt", s(&p("st1")), "--corpus", s(&c), "--id", "0"]).stdout).unwrap();
    for section in ["# hypothesis", "# temporal", "# feature", "# attention"] {
        assert!(inspect.contains(section), "missing {section}");
    }
    assert_eq!(
        afs(&["inspect", "--ckpt", s(&p("st1")), "--corpus", s(&c), "--id", "999"])
            .status
            .code(),
        Some(2)
    );

    ok(&["avg-ckpt", "--out", s(&p("avg")), s(&p("st1")), s(&p("st2"))]);
    ok(&[
        "translate",
        "--ckpt",
        s(&p("avg")),
        "--corpus",
        s(&c),
        "--out",
        s(&p("hyp_avg")),
    ]);
    assert_eq!(fs::read_to_string(p("hyp_avg")).unwrap(), hyp);
}
