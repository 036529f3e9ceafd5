//! `sonotext`: command-line driver for the audio-token pipeline.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors. Errors are
//! also written to stderr as one JSON object per line.

mod config;
mod sidecar;
mod verify;

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sonotext::audio::{extract_features, FrameFeatureSequence, Waveform};
use sonotext::experiments::{run_suite_with, Suite};
use sonotext::metrics::{asr_bleu, evaluate, read_eval_jsonl, EvalCorpus, Metric};
use sonotext::mixture::{build_stream, load_manifest, mixture_stats, save_manifest, MixtureSpec, RecordStore};
use sonotext::model::{decode, surgery, train, Checkpoint, Model, ModelConfig, TrainConfig};
use sonotext::quantizer::{
    read_token_file, tokenize, train_codebook_traced, write_token_file, AudioTokenSeq, Codebook, KMeansParams,
};
use sonotext::synth::{generate_corpus, oracle_transcriber, SynthLanguageSpec};
use sonotext::tasks::{parse_stages, prompt_ids, TagStyle, Task, TaskTag};
use sonotext::vocab::{JointVocabulary, DEFAULT_MERGES, MIN_TEXT_VOCAB};

use crate::config::RunConfig;
use crate::sidecar::Sidecar;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] sonotext::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            _ => "data",
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "sonotext",
    version,
    about = "Audio tokens, joint vocabularies and toy speech-text models"
)]
struct Cli {
    /// Run configuration (TOML). Without it, defaults are used with `--seed`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed used when no configuration file is given.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,

    /// Re-validate an artifact and exit.
    #[arg(long, value_name = "PATH")]
    verify: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// WAV to log-mel features.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Codebook operations.
    #[command(subcommand)]
    Codebook(CodebookCmd),
    /// WAV or features to audio tokens.
    Tokenize {
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        wav: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Vocabulary operations.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Expand a text checkpoint with zero rows for audio tokens.
    Surgery {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        audio_vocab: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic corpora.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Training mixtures.
    #[command(subcommand)]
    Mix(MixCmd),
    /// Train a checkpoint on a mixture.
    Train(TrainArgs),
    /// Greedy or sampled decoding from a record's prompt.
    Decode(DecodeArgs),
    /// Metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Paired toy-scale comparisons.
    Ablate {
        #[arg(long)]
        suite: String,
        /// Override the number of seeds (1, 2, 3, ...).
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum CodebookCmd {
    /// k-means over feature files.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum VocabCmd {
    /// Write a vocabulary manifest for a codebook.
    Build {
        #[arg(long)]
        codebook: PathBuf,
        /// Extra whole-word tokens, one per line.
        #[arg(long)]
        words: Option<PathBuf>,
        /// Text vocabulary size; defaults to bytes, EOS and all word tokens.
        #[arg(long)]
        text_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum SynthCmd {
    /// Language pair, codebook, vocabulary and manifest in one directory.
    Generate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        max_words: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum MixCmd {
    /// Mixture spec from a manifest and the configured task chains.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component probabilities and empirical draw counts.
    Stats {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        draws: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Starting checkpoint; a fresh joint model is initialized when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Initialize a text-only model (no audio rows) when no checkpoint is given.
    #[arg(long)]
    text_only: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited step records.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Record index in the manifest.
    #[arg(long, default_value_t = 0)]
    record: usize,
    /// Task chain, e.g. "ASR" or "ASR AST".
    #[arg(long)]
    task: String,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Sampling temperature; greedy when absent.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    Bleu(EvalArgs),
    Wer(EvalArgs),
    Cer(EvalArgs),
    /// WER, or CER for Japanese and Chinese.
    ErrorRate(EvalArgs),
    /// Transcribe audio-token hypotheses with the synthetic oracle and score with BLEU.
    AsrBleu {
        /// Token file of hypotheses.
        #[arg(long)]
        hyps: PathBuf,
        /// One reference per line.
        #[arg(long)]
        refs: PathBuf,
        /// Directory written by `synth generate`.
        #[arg(long)]
        synth_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Line-delimited {"hypothesis", "reference"} records.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    language: Option<String>,
    /// Report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    json: bool,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) {
        if self.json {
            let mut v = serde_json::to_value(value).expect("report serializes");
            if let Some(obj) = v.as_object_mut() {
                obj.insert("config_hash".into(), json!(self.hash));
            }
            println!("{v}");
        } else {
            println!("{}", human());
        }
    }

    fn stamp(&self, artifact: &Path, command: &str) -> CliResult<()> {
        Sidecar::write(artifact, &self.hash, command)?;
        Ok(())
    }
}

fn parse_chain(text: &str) -> CliResult<Vec<Task>> {
    text.split_whitespace()
        .map(|t| t.parse::<Task>().map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn read_wave(path: &Path) -> CliResult<Waveform> {
    Waveform::read_wav(path).map_err(CliError::from)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::with_seed(cli.seed),
    };
    let mut ctx = Ctx {
        hash: cfg.hash(),
        cfg,
        json: cli.json,
    };
    if let Some(path) = &cli.verify {
        let v = verify::verify(path)?;
        ctx.emit(&v, || {
            let hash = v.recorded_config_hash.as_deref().unwrap_or("none recorded");
            format!("ok {} ({}): {}; config {}", v.path, v.kind, v.summary, hash)
        });
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| CliError::Usage("no subcommand given (see --help)".into()))?;
    match command {
        Command::Features { wav, out } => {
            let f = extract_features(&read_wave(&wav)?, &ctx.cfg.frontend)?;
            f.save(&out)?;
            ctx.stamp(&out, "features")?;
            let r = json!({"frames": f.num_frames, "dim": f.dim, "frame_rate": f.frame_rate});
            ctx.emit(&r, || {
                format!("{} frames x {} dims at {} Hz", f.num_frames, f.dim, f.frame_rate)
            });
        }
        Command::Codebook(CodebookCmd::Train { features, k, out }) => {
            if let Some(k) = k {
                ctx.cfg.codebook.k = k;
                ctx.hash = ctx.cfg.hash();
            }
            let corpus = features
                .iter()
                .map(FrameFeatureSequence::load)
                .collect::<Result<Vec<_>, _>>()?;
            let params = KMeansParams {
                k: ctx.cfg.codebook.k,
                max_iters: ctx.cfg.codebook.max_iters,
                tol: ctx.cfg.codebook.tol,
                seed: ctx.cfg.seed,
            };
            let outcome = train_codebook_traced(&corpus, &params)?;
            outcome.codebook.save(&out)?;
            ctx.stamp(&out, "codebook train")?;
            let cb = &outcome.codebook;
            let r = json!({"k": cb.k(), "dim": cb.dim(), "id": cb.id(), "distortion": outcome.history});
            ctx.emit(&r, || {
                format!(
                    "codebook {} K={} D={} after {} iterations, distortion {:.6}",
                    cb.id(),
                    cb.k(),
                    cb.dim(),
                    outcome.history.len() - 1,
                    cb.train_distortion
                )
            });
        }
        Command::Tokenize {
            wav,
            features,
            codebook,
            out,
        } => {
            let cb = Codebook::load(&codebook)?;
            let feats = match (wav, features) {
                (Some(w), _) => extract_features(&read_wave(&w)?, &ctx.cfg.frontend)?,
                (None, Some(f)) => FrameFeatureSequence::load(f)?,
                (None, None) => unreachable!("clap requires one input"),
            };
            let seq = tokenize(&feats, &cb)?;
            if let Some(out) = &out {
                write_token_file(out, std::slice::from_ref(&seq))?;
                ctx.stamp(out, "tokenize")?;
            }
            let r = json!({"tokens": seq.tokens.len(), "token_rate": seq.token_rate, "codebook_id": seq.codebook_id});
            ctx.emit(&r, || {
                format!(
                    "{} tokens at {} Hz (codebook {})",
                    seq.tokens.len(),
                    seq.token_rate,
                    seq.codebook_id
                )
            });
        }
        Command::Vocab(VocabCmd::Build {
            codebook,
            words,
            text_size,
            out,
        }) => {
            let cb = Codebook::load(&codebook)?;
            let mut merges: Vec<String> = DEFAULT_MERGES.iter().map(|s| s.to_string()).collect();
            if let Some(w) = words {
                for line in std::io::BufReader::new(std::fs::File::open(w)?).lines() {
                    let line = line?;
                    let line = line.trim();
                    if !line.is_empty() && !merges.iter().any(|m| m == line) {
                        merges.push(line.to_string());
                    }
                }
            }
            let t = text_size.unwrap_or(MIN_TEXT_VOCAB + merges.len());
            let v = JointVocabulary::with_merges(t, cb.k(), merges)?.with_codebook(cb.id());
            v.save(&out)?;
            ctx.stamp(&out, "vocab build")?;
            let r = json!({"t": v.text_size(), "a": v.audio_size(), "total": v.total()});
            ctx.emit(&r, || {
                format!(
                    "vocabulary t={} a={} total={}",
                    v.text_size(),
                    v.audio_size(),
                    v.total()
                )
            });
        }
        Command::Surgery {
            input,
            audio_vocab,
            out,
        } => {
            let text = Checkpoint::load(&input)?;
            let joint = surgery(&text, audio_vocab)?;
            joint.save(&out)?;
            ctx.stamp(&out, "surgery")?;
            let (t, a, m) = (joint.config.text_vocab, joint.config.audio_vocab, joint.config.dim);
            let r = json!({"t": t, "a": a, "m": m});
            ctx.emit(&r, || format!("t={t} a={a} m={m}"));
        }
        Command::Synth(SynthCmd::Generate {
            out_dir,
            records,
            max_words,
            vocab_size,
        }) => {
            let s = &mut ctx.cfg.synth;
            s.train_records = records.unwrap_or(s.train_records);
            s.max_words = max_words.unwrap_or(s.max_words);
            s.vocab_size = vocab_size.unwrap_or(s.vocab_size);
            s.seed = ctx.cfg.seed;
            ctx.hash = ctx.cfg.hash();
            let s = ctx.cfg.synth.clone();
            std::fs::create_dir_all(&out_dir)?;
            let spec = SynthLanguageSpec::generate(s.vocab_size, s.seed)?;
            let cb = spec.train_codebook(s.codebook_k, s.seed)?;
            let vocab = spec.vocabulary(&cb)?;
            let recs = generate_corpus(&spec, &cb, s.train_records, s.max_words, s.seed)?;
            let paths = [
                out_dir.join("language.json"),
                out_dir.join("codebook.tfc"),
                out_dir.join("vocab.txt"),
                out_dir.join("manifest.jsonl"),
            ];
            std::fs::write(&paths[0], serde_json::to_string_pretty(&spec).unwrap() + "\n")?;
            cb.save(&paths[1])?;
            vocab.save(&paths[2])?;
            save_manifest(&paths[3], &recs)?;
            for p in &paths {
                ctx.stamp(p, "synth generate")?;
            }
            let r = json!({"records": recs.len(), "words": spec.vocab_size(), "codebook_id": cb.id(), "t": vocab.text_size(), "a": vocab.audio_size()});
            ctx.emit(&r, || {
                format!(
                    "{} records, {} words per language, codebook {} (K={}), vocabulary t={} a={} in {}",
                    recs.len(),
                    spec.vocab_size(),
                    cb.id(),
                    cb.k(),
                    vocab.text_size(),
                    vocab.audio_size(),
                    out_dir.display()
                )
            });
        }
        Command::Mix(MixCmd::Build { manifest, out }) => {
            let store = RecordStore::from_records(load_manifest(&manifest)?);
            let chains = ctx
                .cfg
                .mixture
                .chains
                .iter()
                .map(|c| parse_chain(c))
                .collect::<CliResult<Vec<_>>>()?;
            let spec = MixtureSpec::from_store(&store, &chains, ctx.cfg.mixture.alpha, ctx.cfg.seed);
            spec.validate()?;
            std::fs::write(&out, spec.to_toml())?;
            ctx.stamp(&out, "mix build")?;
            let r = json!({"components": spec.components.len()});
            ctx.emit(&r, || {
                format!("{} components written to {}", spec.components.len(), out.display())
            });
        }
        Command::Mix(MixCmd::Stats {
            mixture,
            manifest,
            vocab,
            draws,
        }) => {
            let spec = MixtureSpec::from_toml(&std::fs::read_to_string(&mixture)?)?;
            let store = RecordStore::from_records(load_manifest(&manifest)?);
            let vocab = JointVocabulary::load(&vocab)?;
            let stats = mixture_stats(&spec, &store)?;
            let mut stream = build_stream(&spec, &store, &vocab)?;
            let mut counts = vec![0u64; spec.components.len()];
            for _ in 0..draws {
                counts[stream.next_choice().1] += 1;
            }
            let r = json!({"stats": stats, "draws": draws, "counts": counts});
            ctx.emit(&r, || {
                let mut s = String::from("component                       count  prob    observed\n");
                for (c, n) in stats.components.iter().zip(&counts) {
                    s += &format!(
                        "{:<30} {:>6}  {:.4}  {:.4}\n",
                        format!("{} [{}]", c.dataset_id, c.chain),
                        c.count,
                        c.probability,
                        *n as f64 / draws.max(1) as f64
                    );
                }
                s
            });
        }
        Command::Train(args) => run_train(&mut ctx, args)?,
        Command::Decode(args) => run_decode(&mut ctx, args)?,
        Command::Eval(cmd) => run_eval(&mut ctx, cmd)?,
        Command::Ablate { suite, seeds } => {
            let suite: Suite = suite
                .parse()
                .map_err(|e: sonotext::Error| CliError::Usage(e.to_string()))?;
            let mut cfg = ctx.cfg.ablation.clone();
            if let Some(n) = seeds {
                cfg.seeds = (1..=n as u64).collect();
                ctx.cfg.ablation.seeds = cfg.seeds.clone();
                ctx.hash = ctx.cfg.hash();
            }
            let report = run_suite_with(suite, &cfg, |row| {
                if !ctx.json {
                    eprintln!("seed {} done", row.seed);
                }
            })?;
            ctx.emit(&report, || report.table());
        }
    }
    Ok(())
}

fn run_train(ctx: &mut Ctx, args: TrainArgs) -> CliResult<()> {
    if let Some(s) = args.steps {
        ctx.cfg.train.steps = s;
    }
    if let Some(lr) = args.lr {
        ctx.cfg.train.optim.lr = lr;
    }
    ctx.hash = ctx.cfg.hash();
    let vocab = JointVocabulary::load(&args.vocab)?;
    let store = RecordStore::from_records(load_manifest(&args.manifest)?);
    let spec = MixtureSpec::from_toml(&std::fs::read_to_string(&args.mixture)?)?;
    let model = match &args.checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => Model::init(
            ModelConfig {
                text_vocab: vocab.text_size(),
                audio_vocab: if args.text_only { 0 } else { vocab.audio_size() },
                ..ctx.cfg.model.clone()
            },
            ctx.cfg.seed,
        )?,
    };
    if model.config.text_vocab != vocab.text_size()
        || (model.config.audio_vocab != 0 && model.config.audio_vocab != vocab.audio_size())
    {
        return Err(CliError::Data(format!(
            "checkpoint vocabulary (t={}, a={}) does not match the vocabulary file (t={}, a={})",
            model.config.text_vocab,
            model.config.audio_vocab,
            vocab.text_size(),
            vocab.audio_size()
        )));
    }
    let stream = build_stream(&spec, &store, &vocab)?.map(|i| i.example);
    let tc = TrainConfig {
        steps: ctx.cfg.train.steps,
        batch_size: ctx.cfg.train.batch_size,
        optim: ctx.cfg.train.optim.clone(),
        seed: ctx.cfg.seed,
        checkpoint_every: ctx.cfg.train.checkpoint_every,
        checkpoint_dir: args.out.parent().map(Path::to_path_buf),
        metrics_path: args.metrics.clone(),
    };
    let json = ctx.json;
    let outcome = train(model, stream, &tc, |r| {
        if !json && (r.step % 100 == 0 || r.step == 1) {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    outcome.model.save(&args.out)?;
    ctx.stamp(&args.out, "train")?;
    if let Some(m) = &args.metrics {
        ctx.stamp(m, "train")?;
    }
    let last = outcome.log.last().map(|r| r.loss);
    let r = json!({"steps": outcome.log.len(), "final_loss": last});
    ctx.emit(&r, || {
        format!("trained {} steps, final loss {:?}", outcome.log.len(), last)
    });
    Ok(())
}

fn run_decode(ctx: &mut Ctx, args: DecodeArgs) -> CliResult<()> {
    let model = Checkpoint::load(&args.checkpoint)?;
    let vocab = JointVocabulary::load(&args.vocab)?;
    let records = load_manifest(&args.manifest)?;
    let record = records
        .get(args.record)
        .ok_or_else(|| CliError::Usage(format!("manifest has {} records", records.len())))?;
    let chain = parse_chain(&args.task)?;
    let target = chain
        .last()
        .is_some_and(|t| t.changes_language())
        .then(|| record.target_language.clone())
        .flatten();
    let tag = TaskTag::new(chain.clone(), &record.source_language, target)?;
    let prompt = prompt_ids(record, &tag, &vocab, TagStyle::Bracket)?;
    let mut dc = ctx.cfg.decode.clone();
    if let Some(n) = args.max_new_tokens {
        dc.max_new_tokens = n;
    }
    if let Some(tau) = args.temperature {
        dc.strategy = sonotext::model::Strategy::Temperature { tau };
    }
    dc.seed = ctx.cfg.seed;
    ctx.cfg.decode = dc.clone();
    ctx.hash = ctx.cfg.hash();
    let out = decode(&model, &prompt, &dc)?;
    let stages = parse_stages(&out.continuation, &vocab, &chain)?;
    let rendered: Vec<serde_json::Value> = stages
        .iter()
        .map(|s| {
            if s.stage.output() == sonotext::tasks::Modality::Audio {
                json!({"stage": s.stage.name(), "audio_tokens": s.audio_tokens(&vocab)})
            } else {
                json!({"stage": s.stage.name(), "text": s.text(&vocab)})
            }
        })
        .collect();
    let r = json!({"tag": tag.render(), "continuation": out.continuation, "stopped_at_eos": out.stopped_at_eos, "stages": rendered});
    ctx.emit(&r, || {
        let mut s = format!("{}\n", tag.render());
        for st in &rendered {
            s += &format!("{st}\n");
        }
        s
    });
    Ok(())
}

fn run_eval(ctx: &mut Ctx, cmd: EvalCmd) -> CliResult<()> {
    let (args, metric) = match cmd {
        EvalCmd::Bleu(a) => (a, Metric::Bleu),
        EvalCmd::Wer(a) => (a, Metric::Wer),
        EvalCmd::Cer(a) => (a, Metric::Cer),
        EvalCmd::ErrorRate(a) => (a, Metric::ErrorRate),
        EvalCmd::AsrBleu { hyps, refs, synth_dir } => {
            let spec: SynthLanguageSpec =
                serde_json::from_str(&std::fs::read_to_string(synth_dir.join("language.json"))?)
                    .map_err(|e| CliError::Data(format!("language.json: {e}")))?;
            let cb = Codebook::load(synth_dir.join("codebook.tfc"))?;
            let asr = oracle_transcriber(&spec, &cb)?;
            let hyps: Vec<AudioTokenSeq> = read_token_file(&hyps)?;
            let refs: Vec<String> = std::fs::read_to_string(&refs)?.lines().map(str::to_string).collect();
            let corpus = EvalCorpus::from_parallel(hyps, refs, sonotext::synth::TARGET_LANGUAGE)?;
            let report = asr_bleu(&corpus, &asr)?;
            if !report.complete() {
                eprintln!(
                    "{}",
                    json!({"warning": "coverage", "coverage": report.coverage, "failures": report.failures})
                );
            }
            ctx.emit(&report, || {
                format!("ASR-BLEU {:.2} (coverage {:.3})", report.score, report.coverage)
            });
            return Ok(());
        }
    };
    let language = args.language.clone().unwrap_or_else(|| ctx.cfg.eval.language.clone());
    let corpus = read_eval_jsonl(std::io::BufReader::new(std::fs::File::open(&args.input)?), &language)?;
    let report = evaluate(&corpus, metric)?;
    if let Some(out) = &args.out {
        let mut v = serde_json::to_value(&report).unwrap();
        v["config_hash"] = json!(ctx.hash);
        std::fs::write(out, serde_json::to_string_pretty(&v).unwrap() + "\n")?;
    }
    ctx.emit(&report, || {
        format!(
            "{:?} {:.4} over {} items ({}; {})",
            report.resolved, report.score, report.items, report.language, report.normalization
        )
    });
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(e.exit_code())
        }
    }
}
