//! Task tags and serialization of records into loss-masked training examples.
//!
//! An example is laid out as
//!
//! ```text
//! tag | input | [STAGE1] target1 | [STAGE2] target2 | ... | EOS
//! ```
//!
//! where every piece is ordinary text (or audio ids for audio content).
//! The loss mask is 0 over the tag and input and 1 from the first stage
//! marker onward.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixture::DatasetRecord;
use crate::vocab::{JointVocabulary, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ASR")]
    Asr,
    #[serde(rename = "AST")]
    Ast,
    #[serde(rename = "S2ST")]
    S2st,
    #[serde(rename = "TTS")]
    Tts,
    #[serde(rename = "MT")]
    Mt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Audio,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Asr, Task::Ast, Task::S2st, Task::Tts, Task::Mt];

    pub fn name(self) -> &'static str {
        match self {
            Task::Asr => "ASR",
            Task::Ast => "AST",
            Task::S2st => "S2ST",
            Task::Tts => "TTS",
            Task::Mt => "MT",
        }
    }

    pub fn input(self) -> Modality {
        match self {
            Task::Asr | Task::Ast | Task::S2st => Modality::Audio,
            Task::Tts | Task::Mt => Modality::Text,
        }
    }

    pub fn output(self) -> Modality {
        match self {
            Task::Asr | Task::Ast | Task::Mt => Modality::Text,
            Task::S2st | Task::Tts => Modality::Audio,
        }
    }

    /// Whether the output is in a different language than the input.
    pub fn changes_language(self) -> bool {
        matches!(self, Task::Ast | Task::S2st | Task::Mt)
    }

    /// Stage marker emitted before this task's output.
    pub fn marker(self) -> String {
        format!("[{}]", self.name())
    }

    fn chain_rank(self) -> Option<u8> {
        match self {
            Task::Asr => Some(0),
            Task::Ast => Some(1),
            Task::S2st => Some(2),
            _ => None,
        }
    }

    fn verb(self) -> &'static str {
        match self {
            Task::Asr => "transcribe",
            Task::Ast | Task::Mt => "translate",
            Task::S2st => "interpret",
            Task::Tts => "read out",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidTag(format!("unknown task {s:?}")))
    }
}

/// A task chain with its languages, e.g. `[ASR AST S2ST English French]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskTag {
    chain: Vec<Task>,
    source_language: String,
    target_language: Option<String>,
}

fn valid_language(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphabetic())
}

/// Checks that a chain is a single task or an ordered run drawn from ASR, AST, S2ST.
pub fn validate_chain(chain: &[Task]) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::InvalidTag("empty task chain".into()));
    }
    if chain.len() > 1 {
        let ranks: Option<Vec<u8>> = chain.iter().map(|t| t.chain_rank()).collect();
        let ok = ranks.is_some_and(|r| r.windows(2).all(|w| w[0] < w[1]));
        if !ok {
            return Err(Error::InvalidTag(format!(
                "chain {:?} must be an ordered subset of ASR, AST, S2ST",
                chain
            )));
        }
    }
    Ok(())
}

impl TaskTag {
    pub fn new(chain: Vec<Task>, source_language: impl Into<String>, target_language: Option<String>) -> Result<Self> {
        validate_chain(&chain)?;
        let source_language = source_language.into();
        if !valid_language(&source_language) {
            return Err(Error::InvalidTag(format!("bad source language {source_language:?}")));
        }
        let needs_target = chain.last().unwrap().changes_language();
        match (&target_language, needs_target) {
            (Some(t), true) if valid_language(t) => {}
            (Some(t), true) => return Err(Error::InvalidTag(format!("bad target language {t:?}"))),
            (None, false) => {}
            (None, true) => {
                return Err(Error::InvalidTag(format!(
                    "{} needs a target language",
                    chain.last().unwrap()
                )))
            }
            (Some(_), false) => {
                return Err(Error::InvalidTag(format!(
                    "{} keeps the language; no target language allowed",
                    chain.last().unwrap()
                )))
            }
        }
        Ok(Self {
            chain,
            source_language,
            target_language,
        })
    }

    pub fn single(task: Task, source: &str, target: Option<&str>) -> Result<Self> {
        Self::new(vec![task], source, target.map(str::to_string))
    }

    pub fn chain(&self) -> &[Task] {
        &self.chain
    }

    pub fn source_language(&self) -> &str {
        &self.source_language
    }

    pub fn target_language(&self) -> Option<&str> {
        self.target_language.as_deref()
    }

    pub fn input(&self) -> Modality {
        self.chain[0].input()
    }

    /// The bracketed tag, e.g. `[S2ST English French]`.
    pub fn render(&self) -> String {
        let mut s = String::from("[");
        for t in &self.chain {
            s.push_str(t.name());
            s.push(' ');
        }
        s.push_str(&self.source_language);
        if let Some(t) = &self.target_language {
            s.push(' ');
            s.push_str(t);
        }
        s.push(']');
        s
    }

    /// Human-readable form, e.g. `transcribe the following French audio`.
    pub fn render_alias(&self) -> String {
        let verbs: Vec<&str> = self.chain.iter().map(|t| t.verb()).collect();
        let modality = match self.input() {
            Modality::Audio => "audio",
            Modality::Text => "text",
        };
        let mut s = format!(
            "{} the following {} {}",
            verbs.join(" then "),
            self.source_language,
            modality
        );
        if let Some(t) = &self.target_language {
            s.push_str(" into ");
            s.push_str(t);
        }
        s
    }

    /// Parses either the bracketed or the human-readable form.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if let Some(inner) = text.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let words: Vec<&str> = inner.split(' ').collect();
            let n_tasks = words.iter().take_while(|w| w.parse::<Task>().is_ok()).count();
            let chain: Vec<Task> = words[..n_tasks].iter().map(|w| w.parse().unwrap()).collect();
            return match &words[n_tasks..] {
                [src] => Self::new(chain, *src, None),
                [src, tgt] => Self::new(chain, *src, Some(tgt.to_string())),
                _ => Err(Error::InvalidTag(format!("cannot parse tag {text:?}"))),
            };
        }
        Self::parse_alias(text)
    }

    fn parse_alias(text: &str) -> Result<Self> {
        let bad = || Error::InvalidTag(format!("cannot parse tag {text:?}"));
        let (verbs, rest) = text.split_once(" the following ").ok_or_else(bad)?;
        let words: Vec<&str> = rest.split(' ').collect();
        let (src, modality, tgt) = match words.as_slice() {
            [src, m] => (*src, *m, None),
            [src, m, "into", tgt] => (*src, *m, Some(tgt.to_string())),
            _ => return Err(bad()),
        };
        let audio_in = match modality {
            "audio" => true,
            "text" => false,
            _ => return Err(bad()),
        };
        let chain = verbs
            .split(" then ")
            .map(|v| match (v, audio_in) {
                ("transcribe", true) => Ok(Task::Asr),
                ("translate", true) => Ok(Task::Ast),
                ("interpret", true) => Ok(Task::S2st),
                ("read out", false) => Ok(Task::Tts),
                ("translate", false) => Ok(Task::Mt),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(chain, src, tgt)
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// How the tag prefix is spelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TagStyle {
    #[default]
    Bracket,
    Alias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: Task,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<u8>,
    /// Spans over the target region, in chain order; they partition it.
    pub stage_spans: Vec<StageSpan>,
    pub task: TaskTag,
}

impl TrainingExample {
    /// Length of the tag + input prefix.
    pub fn prompt_len(&self) -> usize {
        self.loss_mask.iter().take_while(|&&m| m == 0).count()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.ids[..self.prompt_len()]
    }

    pub fn target(&self) -> &[TokenId] {
        &self.ids[self.prompt_len()..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the step-shaped mask, the id range and the span partition.
    pub fn validate(&self, vocab: &JointVocabulary) -> Result<()> {
        if self.ids.len() != self.loss_mask.len() {
            return Err(Error::InvalidRecord("mask length differs from ids".into()));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= vocab.total()) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                size: vocab.total(),
            });
        }
        let p = self.prompt_len();
        if self.loss_mask[p..].iter().any(|&m| m != 1) {
            return Err(Error::InvalidRecord("loss mask is not a 0...0 1...1 step".into()));
        }
        let mut pos = p;
        for span in &self.stage_spans {
            if span.start != pos || span.end < span.start {
                return Err(Error::InvalidRecord("stage spans do not partition the target".into()));
            }
            pos = span.end;
        }
        if pos != self.ids.len() || self.stage_spans.len() != self.task.chain().len() {
            return Err(Error::InvalidRecord("stage spans do not partition the target".into()));
        }
        Ok(())
    }

    /// Digest of ids and mask, for stream determinism checks.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.to_le_bytes());
        }
        h.update(&self.loss_mask);
        hex::encode(&h.finalize()[..8])
    }
}

fn audio_ids(seq: &crate::quantizer::AudioTokenSeq, vocab: &JointVocabulary) -> Result<Vec<TokenId>> {
    if let Some(cb) = vocab.audio_codebook() {
        if cb != seq.codebook_id {
            return Err(Error::CodebookMismatch {
                expected: cb.to_string(),
                found: seq.codebook_id.clone(),
            });
        }
    }
    seq.tokens
        .iter()
        .map(|&k| {
            if (k as usize) < vocab.audio_size() {
                Ok(vocab.audio_id(k))
            } else {
                Err(Error::TokenOutOfRange {
                    token: k,
                    size: vocab.audio_size(),
                })
            }
        })
        .collect()
}

fn missing(field: &'static str, task: &TaskTag) -> Error {
    Error::MissingField {
        field,
        task: task.render(),
    }
}

/// Input tokens of a record for a task chain.
pub fn input_ids(record: &DatasetRecord, tag: &TaskTag, vocab: &JointVocabulary) -> Result<Vec<TokenId>> {
    match tag.input() {
        Modality::Audio => audio_ids(record.audio.as_ref().ok_or_else(|| missing("audio", tag))?, vocab),
        Modality::Text => Ok(vocab.encode(record.transcript.as_deref().ok_or_else(|| missing("transcript", tag))?)),
    }
}

/// Output tokens of a record for one stage.
pub fn stage_output_ids(
    record: &DatasetRecord,
    stage: Task,
    tag: &TaskTag,
    vocab: &JointVocabulary,
) -> Result<Vec<TokenId>> {
    match stage {
        Task::Asr => Ok(vocab.encode(record.transcript.as_deref().ok_or_else(|| missing("transcript", tag))?)),
        Task::Ast | Task::Mt => Ok(vocab.encode(
            record
                .translated_transcript
                .as_deref()
                .ok_or_else(|| missing("translated_transcript", tag))?,
        )),
        Task::S2st => audio_ids(
            record
                .translated_audio
                .as_ref()
                .ok_or_else(|| missing("translated_audio", tag))?,
            vocab,
        ),
        Task::Tts => audio_ids(record.audio.as_ref().ok_or_else(|| missing("audio", tag))?, vocab),
    }
}

/// Tag + input prompt for inference.
pub fn prompt_ids(
    record: &DatasetRecord,
    tag: &TaskTag,
    vocab: &JointVocabulary,
    style: TagStyle,
) -> Result<Vec<TokenId>> {
    let tag_text = match style {
        TagStyle::Bracket => tag.render(),
        TagStyle::Alias => tag.render_alias(),
    };
    let mut ids = vocab.encode(&tag_text);
    ids.extend(input_ids(record, tag, vocab)?);
    Ok(ids)
}

/// Serializes a record for a task with the bracketed tag.
pub fn serialize_example(record: &DatasetRecord, tag: &TaskTag, vocab: &JointVocabulary) -> Result<TrainingExample> {
    serialize_example_styled(record, tag, vocab, TagStyle::Bracket)
}

pub fn serialize_example_styled(
    record: &DatasetRecord,
    tag: &TaskTag,
    vocab: &JointVocabulary,
    style: TagStyle,
) -> Result<TrainingExample> {
    let mut ids = prompt_ids(record, tag, vocab, style)?;
    let prompt_len = ids.len();
    let mut stage_spans = Vec::with_capacity(tag.chain().len());
    for &stage in tag.chain() {
        let start = ids.len();
        ids.extend(vocab.encode(&stage.marker()));
        ids.extend(stage_output_ids(record, stage, tag, vocab)?);
        stage_spans.push(StageSpan {
            stage,
            start,
            end: ids.len(),
        });
    }
    ids.push(vocab.eos());
    stage_spans.last_mut().unwrap().end = ids.len();
    let mut loss_mask = vec![0u8; prompt_len];
    loss_mask.resize(ids.len(), 1);
    Ok(TrainingExample {
        ids,
        loss_mask,
        stage_spans,
        task: tag.clone(),
    })
}

/// One stage of a decoded continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSegment {
    pub stage: Task,
    /// Marker ids as they appeared; empty for unmarked leading content.
    pub marker: Vec<TokenId>,
    pub content: Vec<TokenId>,
}

impl StageSegment {
    /// Text content with end-of-sequence and audio ids dropped, whitespace-trimmed.
    pub fn text(&self, vocab: &JointVocabulary) -> String {
        vocab.decode(&self.content).trim().to_string()
    }

    pub fn audio_tokens(&self, vocab: &JointVocabulary) -> Vec<u32> {
        vocab.audio_tokens(&self.content)
    }
}

/// Splits a continuation at stage markers.
///
/// Content before the first marker is attributed to `expected[0]`. The
/// concatenation of all markers and contents reproduces `ids`.
pub fn parse_stages(ids: &[TokenId], vocab: &JointVocabulary, expected: &[Task]) -> Result<Vec<StageSegment>> {
    let markers: Vec<(Task, Vec<TokenId>)> = Task::ALL.iter().map(|&t| (t, vocab.encode(&t.marker()))).collect();
    let mut cuts: Vec<(usize, Task, usize)> = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        match markers.iter().find(|(_, m)| ids[i..].starts_with(m)) {
            Some((task, m)) => {
                cuts.push((i, *task, m.len()));
                i += m.len();
            }
            None => i += 1,
        }
    }
    let first = *expected
        .first()
        .ok_or_else(|| Error::InvalidTag("no expected stages".into()))?;
    if cuts.is_empty() {
        if expected.len() > 1 {
            return Err(Error::NoStageMarker {
                expected: expected.len(),
            });
        }
        return Ok(vec![StageSegment {
            stage: first,
            marker: Vec::new(),
            content: ids.to_vec(),
        }]);
    }
    let mut out = Vec::with_capacity(cuts.len() + 1);
    if cuts[0].0 > 0 {
        out.push(StageSegment {
            stage: first,
            marker: Vec::new(),
            content: ids[..cuts[0].0].to_vec(),
        });
    }
    for (n, &(start, stage, mlen)) in cuts.iter().enumerate() {
        let end = cuts.get(n + 1).map_or(ids.len(), |c| c.0);
        out.push(StageSegment {
            stage,
            marker: ids[start..start + mlen].to_vec(),
            content: ids[start + mlen..end].to_vec(),
        });
    }
    Ok(out)
}

/// The last segment for `stage`, if any.
pub fn find_stage(segments: &[StageSegment], stage: Task) -> Option<&StageSegment> {
    segments.iter().rev().find(|s| s.stage == stage)
}
