//! Toy-scale training runs on synthetic corpora.
//!
//! A [`ToyWorld`] bundles a synthetic language pair, its codebook, the joint
//! vocabulary and disjoint train/test splits. On top of it sit text
//! pretraining, multi-task finetuning, stage-level evaluation and the
//! paired comparisons of [`run_suite`].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, EvalCorpus, Transcriber};
use crate::mixture::{build_stream, DatasetRecord, MixtureSpec, RecordStore};
use crate::model::{decode, surgery, train, Checkpoint, DecodeConfig, Model, ModelConfig, OptimConfig, TrainConfig};
use crate::quantizer::{AudioTokenSeq, Codebook};
use crate::synth::{
    generate_corpus, oracle_transcriber, OracleTranscriber, SynthLanguageSpec, SOURCE_LANGUAGE, TARGET_LANGUAGE,
};
use crate::tasks::{find_stage, parse_stages, prompt_ids, StageSegment, TagStyle, Task, TaskTag};
use crate::vocab::JointVocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub max_words: usize,
    pub train_records: usize,
    pub test_records: usize,
    pub codebook_k: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            max_words: 4,
            train_records: 1000,
            test_records: 100,
            codebook_k: 64,
            seed: 1,
        }
    }
}

pub struct ToyWorld {
    pub config: WorldConfig,
    pub spec: SynthLanguageSpec,
    pub codebook: Codebook,
    pub vocab: JointVocabulary,
    pub train: Vec<DatasetRecord>,
    /// Sentences absent from `train`.
    pub test: Vec<DatasetRecord>,
    pub target_asr: OracleTranscriber,
}

impl ToyWorld {
    pub fn build(config: &WorldConfig) -> Result<Self> {
        let spec = SynthLanguageSpec::generate(config.vocab_size, config.seed)?;
        let codebook = spec.train_codebook(config.codebook_k, config.seed)?;
        let vocab = spec.vocabulary(&codebook)?;
        let train = generate_corpus(&spec, &codebook, config.train_records, config.max_words, config.seed)?;
        let seen: HashSet<&str> = train.iter().filter_map(|r| r.transcript.as_deref()).collect();
        let mut test = Vec::with_capacity(config.test_records);
        let mut round = 1;
        while test.len() < config.test_records {
            if round > 50 {
                return Err(Error::Synth("could not find enough held-out sentences".into()));
            }
            let batch = generate_corpus(
                &spec,
                &codebook,
                config.test_records * 2,
                config.max_words,
                config.seed.wrapping_add(1_000_003 * round),
            )?;
            for r in batch {
                let t = r.transcript.as_deref().unwrap_or_default();
                if test.len() < config.test_records
                    && !seen.contains(t)
                    && !test.iter().any(|x: &DatasetRecord| x.transcript == r.transcript)
                {
                    test.push(r);
                }
            }
            round += 1;
        }
        let target_asr = oracle_transcriber(&spec, &codebook)?;
        Ok(Self {
            config: config.clone(),
            spec,
            codebook,
            vocab,
            train,
            test,
            target_asr,
        })
    }

    pub fn store(&self) -> RecordStore {
        RecordStore::from_records(self.train.iter().cloned())
    }

    /// `base` with the text vocabulary of this world and no audio rows.
    pub fn text_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            text_vocab: self.vocab.text_size(),
            audio_vocab: 0,
            ..base.clone()
        }
    }

    pub fn tag(&self, chain: &[Task]) -> Result<TaskTag> {
        let target = chain
            .last()
            .is_some_and(|t| t.changes_language())
            .then_some(TARGET_LANGUAGE);
        TaskTag::new(chain.to_vec(), SOURCE_LANGUAGE, target.map(str::to_string))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            seed: 0,
        }
    }
}

/// Trains `model` on an equal-count mixture of `chains` over the training split.
pub fn train_on(world: &ToyWorld, model: Checkpoint, chains: &[Vec<Task>], run: &RunConfig) -> Result<Checkpoint> {
    let store = world.store();
    let mix = MixtureSpec::from_store(&store, chains, 1.0, run.seed);
    let stream = build_stream(&mix, &store, &world.vocab)?.map(|i| i.example);
    let cfg = TrainConfig {
        steps: run.steps,
        batch_size: run.batch_size,
        optim: run.optim.clone(),
        seed: run.seed,
        ..TrainConfig::default()
    };
    Ok(train(model, stream, &cfg, |_| {})?.model)
}

/// A text-only model trained on text-to-text translation.
pub fn pretrain_text(world: &ToyWorld, base: &ModelConfig, run: &RunConfig) -> Result<Checkpoint> {
    let model = Model::init(world.text_config(base), run.seed)?;
    train_on(world, model, &[vec![Task::Mt]], run)
}

/// Text checkpoint expanded with zero-initialized rows for the world's audio tokens.
pub fn expand(world: &ToyWorld, text: &Checkpoint) -> Result<Checkpoint> {
    surgery(text, world.vocab.audio_size())
}

/// A randomly initialized model over the full joint vocabulary.
pub fn from_scratch(world: &ToyWorld, base: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    Model::init(
        ModelConfig {
            text_vocab: world.vocab.text_size(),
            audio_vocab: world.vocab.audio_size(),
            ..base.clone()
        },
        seed,
    )
}

/// Greedy decode of one record's prompt, split into stages.
pub fn decode_stages(
    model: &Checkpoint,
    world: &ToyWorld,
    record: &DatasetRecord,
    chain: &[Task],
) -> Result<Vec<StageSegment>> {
    let tag = world.tag(chain)?;
    let prompt = prompt_ids(record, &tag, &world.vocab, TagStyle::Bracket)?;
    let room = model.config.max_len.saturating_sub(prompt.len());
    let out = decode(
        model,
        &prompt,
        &DecodeConfig {
            max_new_tokens: room.min(256),
            ..DecodeConfig::default()
        },
    )?;
    parse_stages(&out.continuation, &world.vocab, chain).or_else(|_| Ok(Vec::new()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageScore {
    /// Fraction of items whose stage output equals the reference exactly.
    pub exact: f64,
    pub bleu: f64,
    /// Fraction of items where the stage was found with nonempty content.
    pub parseable: f64,
}

fn reference_text(record: &DatasetRecord, stage: Task) -> String {
    match stage {
        Task::Asr => record.transcript.clone(),
        _ => record.translated_transcript.clone(),
    }
    .unwrap_or_default()
}

/// Text produced for `stage`: decoded text, or the target-language
/// transcription of audio for speech output.
pub fn stage_text(world: &ToyWorld, segment: &StageSegment, stage: Task) -> Option<String> {
    if stage.output() == crate::tasks::Modality::Audio {
        let tokens = segment.audio_tokens(&world.vocab);
        if tokens.is_empty() {
            return None;
        }
        let seq = AudioTokenSeq {
            tokens,
            token_rate: 25.0,
            codebook_id: world.codebook.id().to_string(),
        };
        world.target_asr.transcribe(&seq).ok()
    } else {
        let text = segment.text(&world.vocab);
        (!text.is_empty()).then_some(text)
    }
}

/// Scores `stage` of `chain` decodes on the first `limit` test records.
pub fn evaluate_stage(
    model: &Checkpoint,
    world: &ToyWorld,
    chain: &[Task],
    stage: Task,
    limit: usize,
) -> Result<StageScore> {
    let records = &world.test[..limit.min(world.test.len())];
    let mut hyps = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    let (mut exact, mut parseable) = (0usize, 0usize);
    for r in records {
        let segs = decode_stages(model, world, r, chain)?;
        let hyp = find_stage(&segs, stage).and_then(|s| stage_text(world, s, stage));
        let reference = reference_text(r, stage);
        if hyp.is_some() {
            parseable += 1;
        }
        let hyp = hyp.unwrap_or_default();
        if hyp == reference {
            exact += 1;
        }
        hyps.push(hyp);
        refs.push(reference);
    }
    let n = records.len().max(1) as f64;
    let bleu = corpus_bleu(&EvalCorpus::from_parallel(hyps, refs, TARGET_LANGUAGE)?)?;
    Ok(StageScore {
        exact: exact as f64 / n,
        bleu,
        parseable: parseable as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// AST only vs AST plus ASR.
    Multitask,
    /// From scratch vs from a text checkpoint.
    Finetune,
    /// ASR and AST vs additionally the combined ASR-then-AST task.
    Combined,
    /// Without vs with speech-to-speech tasks.
    S2st,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Multitask, Suite::Finetune, Suite::Combined, Suite::S2st];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Multitask => "multitask",
            Suite::Finetune => "finetune",
            Suite::Combined => "combined",
            Suite::S2st => "s2st",
        }
    }

    pub fn labels(self) -> (&'static str, &'static str) {
        match self {
            Suite::Multitask => ("AST only", "AST + ASR"),
            Suite::Finetune => ("from scratch", "from text checkpoint"),
            Suite::Combined => ("direct AST", "combined ASR->AST"),
            Suite::S2st => ("ASR, AST, combined", "+ S2ST tasks"),
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub pretrain: RunConfig,
    pub finetune: RunConfig,
    pub seeds: Vec<u64>,
    pub eval_records: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelConfig {
                layers: 2,
                dim: 64,
                heads: 4,
                ffn_dim: 256,
                max_len: 256,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            pretrain: RunConfig {
                steps: 300,
                ..RunConfig::default()
            },
            finetune: RunConfig {
                steps: 300,
                ..RunConfig::default()
            },
            seeds: vec![1, 2, 3],
            eval_records: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub baseline: StageScore,
    pub variant: StageScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub baseline: String,
    pub variant: String,
    /// Field of [`StageScore`] that decides the direction.
    pub metric: String,
    pub rows: Vec<AblationRow>,
    /// Seeds where the variant scored at least the baseline.
    pub agreeing: usize,
    /// At least two thirds of seeds agree.
    pub direction_holds: bool,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "suite {}: {} vs {} ({})\nseed  baseline(exact bleu parse)  variant(exact bleu parse)\n",
            self.suite.name(),
            self.baseline,
            self.variant,
            self.metric
        );
        for r in &self.rows {
            s += &format!(
                "{:>4}  {:.3} {:6.2} {:.3}           {:.3} {:6.2} {:.3}\n",
                r.seed,
                r.baseline.exact,
                r.baseline.bleu,
                r.baseline.parseable,
                r.variant.exact,
                r.variant.bleu,
                r.variant.parseable
            );
        }
        s += &format!("agreeing seeds: {}/{}\n", self.agreeing, self.rows.len());
        s
    }
}

fn key(score: &StageScore, suite: Suite) -> f64 {
    match suite {
        Suite::S2st => score.parseable,
        _ => score.bleu,
    }
}

/// One paired comparison for one seed.
pub fn run_pair(suite: Suite, cfg: &AblationConfig, world: &ToyWorld, seed: u64) -> Result<AblationRow> {
    let with_seed = |r: &RunConfig| RunConfig { seed, ..r.clone() };
    let (pre, fine) = (with_seed(&cfg.pretrain), with_seed(&cfg.finetune));
    let text = pretrain_text(world, &cfg.model, &pre)?;
    let joint = expand(world, &text)?;
    let asr = vec![Task::Asr];
    let ast = vec![Task::Ast];
    let asr_ast = vec![Task::Asr, Task::Ast];
    let s2st = vec![Task::S2st];
    let full = vec![Task::Asr, Task::Ast, Task::S2st];
    let n = cfg.eval_records;
    let (baseline, variant) = match suite {
        Suite::Multitask => {
            let b = train_on(world, joint.clone(), &[ast.clone()], &fine)?;
            let v = train_on(world, joint, &[ast.clone(), asr], &fine)?;
            (
                evaluate_stage(&b, world, &ast, Task::Ast, n)?,
                evaluate_stage(&v, world, &ast, Task::Ast, n)?,
            )
        }
        Suite::Finetune => {
            let tasks = [ast.clone(), asr];
            let b = train_on(world, from_scratch(world, &cfg.model, seed)?, &tasks, &fine)?;
            let v = train_on(world, joint, &tasks, &fine)?;
            (
                evaluate_stage(&b, world, &ast, Task::Ast, n)?,
                evaluate_stage(&v, world, &ast, Task::Ast, n)?,
            )
        }
        Suite::Combined => {
            let b = train_on(world, joint.clone(), &[ast.clone(), asr.clone()], &fine)?;
            let v = train_on(world, joint, &[ast.clone(), asr, asr_ast.clone()], &fine)?;
            (
                evaluate_stage(&b, world, &ast, Task::Ast, n)?,
                evaluate_stage(&v, world, &asr_ast, Task::Ast, n)?,
            )
        }
        Suite::S2st => {
            let base_tasks = vec![ast.clone(), asr, asr_ast];
            let mut more = base_tasks.clone();
            more.extend([s2st, full.clone()]);
            let b = train_on(world, joint.clone(), &base_tasks, &fine)?;
            let v = train_on(world, joint, &more, &fine)?;
            (
                evaluate_stage(&b, world, &full, Task::S2st, n)?,
                evaluate_stage(&v, world, &full, Task::S2st, n)?,
            )
        }
    };
    Ok(AblationRow {
        seed,
        baseline,
        variant,
    })
}

pub fn run_suite(suite: Suite, cfg: &AblationConfig) -> Result<AblationReport> {
    run_suite_with(suite, cfg, |_| {})
}

/// Runs every seed of a suite; `on_row` sees each finished row.
pub fn run_suite_with(
    suite: Suite,
    cfg: &AblationConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let world = ToyWorld::build(&cfg.world)?;
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let row = run_pair(suite, cfg, &world, seed)?;
        on_row(&row);
        rows.push(row);
    }
    let agreeing = rows
        .iter()
        .filter(|r| key(&r.variant, suite) >= key(&r.baseline, suite))
        .count();
    let (b, v) = suite.labels();
    Ok(AblationReport {
        suite,
        baseline: b.to_string(),
        variant: v.to_string(),
        metric: match suite {
            Suite::S2st => "parseable".to_string(),
            _ => "bleu".to_string(),
        },
        direction_holds: 3 * agreeing >= 2 * rows.len(),
        agreeing,
        rows,
    })
}
