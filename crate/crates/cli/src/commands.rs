use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use afs_core::frontend::{
    load_corpus, save_corpus, synth_generate, write_manifest, Corpus, FrontendError, SyntheticSpec,
};
use afs_core::gates::AfsVariant;
use afs_core::metrics::{bleu, corpus_wer, map_records, sparsity_report, speedup_bench, BleuSmoothing, MetricsError};
use afs_core::pipeline::{
    average_checkpoints, cascade_translate, finetune_afs, format_curve, load_checkpoint, save_checkpoint, train_asr,
    train_mt, train_st, Architecture, Checkpoint, PipelineError, RunConfig, SelectionKind, StageOutput, System,
};
use afs_core::transformer::BeamConfig;
use thiserror::Error;

use crate::manifest::RunManifest;
use crate::{Cli, Command, DecodeArgs, Metric, RunArgs, Selection, Variant};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad --set `{0}`: expected KEY=VALUE")]
    BadOverride(String),
    #[error("no record with id {0}")]
    UnknownRecord(u64),
    #[error("{path} line {line}: {message}")]
    BadTokens {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData {
            out,
            records,
            vocab,
            dim,
            silence_prob,
            noise,
            reorder_prob,
            inventory_seed,
        } => {
            let spec = SyntheticSpec {
                records,
                vocab,
                dim,
                silence_prob,
                noise,
                reorder_prob,
                inventory_seed,
                seed: seed.unwrap_or(SyntheticSpec::default().seed),
                ..SyntheticSpec::default()
            };
            let corpus = synth_generate(&spec)?;
            save_corpus(&corpus, &out)?;
            let listing = afs_core::frontend::manifest_path(&out);
            write_manifest(&corpus, &listing)?;
            let mut m = RunManifest::new("gen-data", Some(spec.seed));
            m.output(&out).output(&listing);
            m.config = format!(
                "records = {records}\nvocab = {vocab}\ndim = {dim}\nsilence_prob = {silence_prob}\nnoise = {noise}\n\
                 reorder_prob = {reorder_prob}\ninventory_seed = {inventory_seed}\n"
            );
            m.write(None)
        }
        Command::TrainAsr { corpus, out, run } => {
            let data = load_corpus(&corpus)?;
            let cfg = merged_run(RunConfig::default(), &run, seed, |_| Ok(()))?;
            let output = train_asr(&data, &cfg)?;
            finish_stage("train-asr", &output, &cfg, &[&corpus], &out, &run)
        }
        Command::FinetuneAfs {
            asr,
            corpus,
            out,
            lambda,
            variant,
            run,
        } => {
            let data = load_corpus(&corpus)?;
            let source = load_checkpoint(&asr, None, true)?;
            let cfg = merged_run(source.run_config()?, &run, seed, |c| {
                if let Some(l) = lambda {
                    c.lambda = l;
                }
                if let Some(v) = variant {
                    c.afs_variant = match v {
                        Variant::T => Some(AfsVariant::T),
                        Variant::Tf => Some(AfsVariant::TF),
                        Variant::None => None,
                    };
                }
                Ok(())
            })?;
            check_architecture(&source, &cfg, &data, run.force)?;
            let output = finetune_afs(&source, &data, &cfg)?;
            finish_stage("finetune-afs", &output, &cfg, &[&asr, &corpus], &out, &run)
        }
        Command::TrainSt {
            source,
            corpus,
            out,
            selection,
            run,
        } => {
            let data = load_corpus(&corpus)?;
            let src = load_checkpoint(&source, None, true)?;
            let cfg = merged_run(src.run_config()?, &run, seed, |c| {
                if let Some(s) = selection {
                    c.selection = match s {
                        Selection::Afs => SelectionKind::Afs,
                        Selection::FixedRate => SelectionKind::FixedRate,
                        Selection::Cnn => SelectionKind::Cnn,
                        Selection::All => SelectionKind::All,
                    };
                }
                Ok(())
            })?;
            check_architecture(&src, &cfg, &data, run.force)?;
            let output = train_st(&src, &data, &cfg)?;
            finish_stage("train-st", &output, &cfg, &[&source, &corpus], &out, &run)
        }
        Command::TrainMt { corpus, out, run } => {
            let data = load_corpus(&corpus)?;
            let cfg = merged_run(RunConfig::default(), &run, seed, |_| Ok(()))?;
            let output = train_mt(&data, &cfg)?;
            finish_stage("train-mt", &output, &cfg, &[&corpus], &out, &run)
        }
        Command::Translate { ckpt, decode } => {
            let (system, model, cfg) = open_model(&ckpt)?;
            let data = load_corpus(&decode.corpus)?;
            let beam = beam_of(&cfg, &decode);
            let hyps = map_records(&data.records, |r| {
                Ok(system.translate(&model.params, &r.x, r.id, &beam)?.tokens)
            })?;
            finish_decode("translate", seed, &[&ckpt], &decode, &data, &hyps, |r| &r.z, &beam)
        }
        Command::Transcribe { ckpt, decode } => {
            let (system, model, cfg) = open_model(&ckpt)?;
            let data = load_corpus(&decode.corpus)?;
            let beam = beam_of(&cfg, &decode);
            let hyps = map_records(&data.records, |r| {
                Ok(system.transcribe(&model.params, &r.x, &beam)?.tokens)
            })?;
            finish_decode("transcribe", seed, &[&ckpt], &decode, &data, &hyps, |r| &r.y, &beam)
        }
        Command::Cascade { asr, mt, decode } => {
            let (asr_sys, asr_ckpt, cfg) = open_model(&asr)?;
            let (mt_sys, mt_ckpt, _) = open_model(&mt)?;
            let data = load_corpus(&decode.corpus)?;
            let beam = beam_of(&cfg, &decode);
            let outs = map_records(&data.records, |r| {
                cascade_translate((&asr_sys, &asr_ckpt.params), (&mt_sys, &mt_ckpt.params), &r.x, &beam)
            })?;
            for (r, o) in data.records.iter().zip(&outs) {
                if let Some(w) = &o.warning {
                    eprintln!("warning: record {}: {w}", r.id);
                }
            }
            let hyps: Vec<Vec<usize>> = outs.into_iter().map(|o| o.translation).collect();
            finish_decode("cascade", seed, &[&asr, &mt], &decode, &data, &hyps, |r| &r.z, &beam)
        }
        Command::Eval {
            metric,
            hyp,
            reference,
            smooth,
            manifest,
        } => {
            let hyps = read_token_lines(&hyp)?;
            let refs = read_token_lines(&reference)?;
            let score = match metric {
                Metric::Bleu => {
                    let smoothing = if smooth {
                        BleuSmoothing::Exp
                    } else {
                        BleuSmoothing::None
                    };
                    bleu(&hyps, &refs, 4, smoothing)?.score
                }
                Metric::Wer => 100.0 * corpus_wer(&hyps, &refs)?,
            };
            println!("{score:.2}");
            let mut m = RunManifest::new("eval", seed);
            m.input(&hyp).input(&reference);
            m.config = format!(
                "metric = {}\nsmooth = {smooth}\n",
                if metric == Metric::Bleu { "bleu" } else { "wer" }
            );
            m.write(manifest.as_deref())
        }
        Command::Sparsity { ckpt, corpus, out } => {
            let (system, model, _) = open_model(&ckpt)?;
            let data = load_corpus(&corpus)?;
            let report = sparsity_report(&system, &model.params, &data)?;
            emit(
                "sparsity",
                seed,
                &[&ckpt, &corpus],
                out.as_deref(),
                &report.to_text(),
                String::new(),
            )
        }
        Command::Bench {
            candidate,
            baseline,
            corpus,
            batch,
            runs,
            limit,
            out,
        } => {
            let (cand_sys, cand, cfg) = open_model(&candidate)?;
            let (base_sys, base, _) = open_model(&baseline)?;
            let data = load_corpus(&corpus)?;
            let n = limit.unwrap_or(data.len()).min(data.len());
            let beam = cfg.beam_config();
            let result = speedup_bench(
                (&cand_sys, &cand.params),
                (&base_sys, &base.params),
                &data.records[..n],
                batch,
                runs,
                &beam,
            )?;
            let config = format!("batch = {batch}\nruns = {runs}\nrecords = {n}\nbeam = {}\n", beam.beam);
            emit(
                "bench",
                seed,
                &[&candidate, &baseline, &corpus],
                out.as_deref(),
                &result.to_text(),
                config,
            )
        }
        Command::Inspect { ckpt, corpus, id, out } => {
            let (system, model, cfg) = open_model(&ckpt)?;
            let data = load_corpus(&corpus)?;
            let rec = data
                .records
                .iter()
                .find(|r| r.id == id)
                .ok_or(CliError::UnknownRecord(id))?;
            let ins = system.inspect(&model.params, &rec.x, rec.id, &cfg.beam_config())?;
            let mut s = format!("# hypothesis\ntokens\n{}\n", join(&ins.hypothesis.tokens));
            if let Some(g) = &ins.gates {
                s.push_str("# temporal\nposition\tlog_alpha\tgate\n");
                for (t, (a, v)) in g.temporal_log_alpha.iter().zip(&g.temporal_gates).enumerate() {
                    let _ = writeln!(s, "{t}\t{a:.6}\t{v:.6}");
                }
                if let (Some(la), Some(fg)) = (&g.feature_log_alpha, &g.feature_gates) {
                    s.push_str("# feature\ndim\tlog_alpha\tgate\n");
                    for (j, (a, v)) in la.iter().zip(fg).enumerate() {
                        let _ = writeln!(s, "{j}\t{a:.6}\t{v:.6}");
                    }
                }
            }
            s.push_str("# attention\nposition\tmean_weight\n");
            for (p, w) in ins.kept.iter().zip(&ins.mean_attention) {
                let _ = writeln!(s, "{p}\t{w:.6}");
            }
            emit(
                "inspect",
                seed,
                &[&ckpt, &corpus],
                out.as_deref(),
                &s,
                format!("id = {id}\n"),
            )
        }
        Command::AvgCkpt { out, inputs } => {
            let ckpts = inputs
                .iter()
                .map(|p| load_checkpoint(p, None, false))
                .collect::<Result<Vec<_>, _>>()?;
            let avg = average_checkpoints(&ckpts)?;
            save_checkpoint(&avg, &out)?;
            let mut m = RunManifest::new("avg-ckpt", seed);
            for p in &inputs {
                m.input(p);
            }
            m.output(&out);
            m.write(None)
        }
    }
}

/// Base run, then `--config`, then `--set` overrides, then command flags
/// and the seed.
fn merged_run(
    mut cfg: RunConfig,
    args: &RunArgs,
    seed: Option<u64>,
    flags: impl FnOnce(&mut RunConfig) -> Result<(), CliError>,
) -> Result<RunConfig, CliError> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.apply(&text)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::BadOverride(kv.clone()))?;
        cfg.set(k.trim(), v.trim())?;
    }
    flags(&mut cfg)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_architecture(ckpt: &Checkpoint, cfg: &RunConfig, corpus: &Corpus, force: bool) -> Result<(), CliError> {
    let expected = Architecture::from_run(cfg, corpus.vocab_size, corpus.dim).fingerprint();
    let found = ckpt.fingerprint();
    if expected != found && !force {
        return Err(PipelineError::FingerprintMismatch { expected, found }.into());
    }
    Ok(())
}

fn finish_stage(
    command: &str,
    output: &StageOutput,
    cfg: &RunConfig,
    inputs: &[&Path],
    out: &Path,
    args: &RunArgs,
) -> Result<(), CliError> {
    save_checkpoint(&output.checkpoint, out)?;
    let mut m = RunManifest::new(command, Some(cfg.seed));
    inputs.iter().for_each(|p| {
        m.input(p);
    });
    if let Some(path) = &args.config {
        m.input(path);
    }
    m.output(out);
    for snap in &output.snapshots {
        let path = PathBuf::from(format!("{}.step{}", out.display(), snap.step));
        save_checkpoint(snap, &path)?;
        m.output(&path);
    }
    if let Some(path) = &args.curve {
        fs::write(path, format_curve(&output.curve)).map_err(|e| CliError::io(path, e))?;
        m.output(path);
    }
    m.config = cfg.to_text();
    m.write(None)
}

fn open_model(path: &Path) -> Result<(System, Checkpoint, RunConfig), CliError> {
    let ckpt = load_checkpoint(path, None, false)?;
    let system = System::from_checkpoint(&ckpt)?;
    let cfg = ckpt.run_config()?;
    Ok((system, ckpt, cfg))
}

fn beam_of(cfg: &RunConfig, args: &DecodeArgs) -> BeamConfig {
    let mut beam = cfg.beam_config();
    if let Some(b) = args.beam {
        beam.beam = b;
    }
    beam
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn id_lines<'a>(ids: impl Iterator<Item = u64>, seqs: impl Iterator<Item = &'a Vec<usize>>) -> String {
    ids.zip(seqs).fold(String::new(), |mut s, (id, t)| {
        let _ = writeln!(s, "{id}\t{}", join(t));
        s
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_decode(
    command: &str,
    seed: Option<u64>,
    models: &[&Path],
    args: &DecodeArgs,
    corpus: &Corpus,
    hyps: &[Vec<usize>],
    reference: impl Fn(&afs_core::frontend::CorpusRecord) -> &Vec<usize>,
    beam: &BeamConfig,
) -> Result<(), CliError> {
    let ids = || corpus.records.iter().map(|r| r.id);
    let mut inputs = models.to_vec();
    inputs.push(&args.corpus);
    let mut m = RunManifest::new(command, seed);
    inputs.iter().for_each(|p| {
        m.input(p);
    });
    if let Some(path) = &args.refs {
        let text = id_lines(ids(), corpus.records.iter().map(&reference));
        fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    write_or_print(args.out.as_deref(), &id_lines(ids(), hyps.iter()))?;
    if let Some(p) = &args.out {
        m.output(p);
    }
    if let Some(p) = &args.refs {
        m.output(p);
    }
    m.config = format!("beam = {}\n", beam.beam);
    m.write(None)
}

fn emit(
    command: &str,
    seed: Option<u64>,
    inputs: &[&Path],
    out: Option<&Path>,
    text: &str,
    config: String,
) -> Result<(), CliError> {
    write_or_print(out, text)?;
    let mut m = RunManifest::new(command, seed);
    inputs.iter().for_each(|p| {
        m.input(p);
    });
    if let Some(p) = out {
        m.output(p);
    }
    m.config = config;
    m.write(None)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

/// Token sequences, one per line; anything up to the last tab (an id
/// column) is ignored.
fn read_token_lines(path: &Path) -> Result<Vec<Vec<usize>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let body = line.rsplit_once('\t').map_or(line, |(_, b)| b);
            body.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| CliError::BadTokens {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("`{t}` is not a token id"),
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_lines_drop_the_id_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h");
        fs::write(&p, "4\t3 5 6\n9\t\n7 8\n").unwrap();
        assert_eq!(read_token_lines(&p).unwrap(), vec![vec![3, 5, 6], vec![], vec![7, 8]]);
        fs::write(&p, "1\t3 x\n").unwrap();
        assert!(matches!(read_token_lines(&p), Err(CliError::BadTokens { line: 1, .. })));
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "lambda = 0.1\nbeam = 2\n").unwrap();
        let args = RunArgs {
            config: Some(p),
            set: vec!["beam=3".into()],
            ..RunArgs::default()
        };
        let cfg = merged_run(RunConfig::default(), &args, Some(9), |c| {
            c.lambda = 0.4;
            Ok(())
        })
        .unwrap();
        assert_eq!((cfg.lambda, cfg.beam, cfg.seed), (0.4, 3, 9));
        let bad = RunArgs {
            set: vec!["beam".into()],
            ..RunArgs::default()
        };
        assert!(matches!(
            merged_run(RunConfig::default(), &bad, None, |_| Ok(())),
            Err(CliError::BadOverride(_))
        ));
    }
}
