//! Dataset records, task derivation and weighted multi-task streams.
//!
//! A mixture is a list of (dataset, task chain) components. Component `i`
//! is drawn with probability proportional to `count_i ^ alpha` (or an
//! explicit weight), which downweights large datasets for `alpha < 1`.
//! Within a component, examples are visited in a per-epoch shuffled order
//! keyed by the mixture seed, the component index and the epoch.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::AudioTokenSeq;
use crate::tasks::{serialize_example, validate_chain, Task, TaskTag, TrainingExample};
use crate::vocab::JointVocabulary;

/// One item of a speech-text dataset; any subset (of size >= 2) of the four fields.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub audio: Option<AudioTokenSeq>,
    pub transcript: Option<String>,
    pub translated_audio: Option<AudioTokenSeq>,
    pub translated_transcript: Option<String>,
    pub source_language: String,
    pub target_language: Option<String>,
    pub dataset_id: String,
}

/// Line format of the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    dataset_id: String,
    source_language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codebook_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    translated_audio: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    translated_transcript: Option<String>,
}

impl DatasetRecord {
    pub fn field_count(&self) -> usize {
        [
            self.audio.is_some(),
            self.transcript.is_some(),
            self.translated_audio.is_some(),
            self.translated_transcript.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_count() < 2 {
            return Err(Error::InvalidRecord(format!(
                "record in {} has fewer than two fields",
                self.dataset_id
            )));
        }
        if self.source_language.is_empty() {
            return Err(Error::InvalidRecord("empty source language".into()));
        }
        let translated = self.translated_audio.is_some() || self.translated_transcript.is_some();
        if translated && self.target_language.as_deref().is_none_or(str::is_empty) {
            return Err(Error::InvalidRecord("translated fields need a target language".into()));
        }
        if let (Some(a), Some(b)) = (&self.audio, &self.translated_audio) {
            if a.codebook_id != b.codebook_id {
                return Err(Error::InvalidRecord("audio fields use different codebooks".into()));
            }
        }
        Ok(())
    }

    fn to_line(&self) -> RecordLine {
        let audio_meta = self.audio.as_ref().or(self.translated_audio.as_ref());
        RecordLine {
            dataset_id: self.dataset_id.clone(),
            source_language: self.source_language.clone(),
            target_language: self.target_language.clone(),
            codebook_id: audio_meta.map(|a| a.codebook_id.clone()),
            token_rate: audio_meta.map(|a| a.token_rate),
            audio: self.audio.as_ref().map(|a| a.tokens.clone()),
            transcript: self.transcript.clone(),
            translated_audio: self.translated_audio.as_ref().map(|a| a.tokens.clone()),
            translated_transcript: self.translated_transcript.clone(),
        }
    }

    fn from_line(line: RecordLine) -> Result<Self> {
        let has_audio = line.audio.is_some() || line.translated_audio.is_some();
        let codebook_id = match (&line.codebook_id, has_audio) {
            (Some(c), _) => c.clone(),
            (None, true) => return Err(Error::InvalidRecord("audio without codebook_id".into())),
            (None, false) => String::new(),
        };
        let token_rate = line.token_rate.unwrap_or(25.0);
        let wrap = |tokens: Vec<u32>| AudioTokenSeq {
            tokens,
            token_rate,
            codebook_id: codebook_id.clone(),
        };
        let rec = DatasetRecord {
            audio: line.audio.map(wrap),
            transcript: line.transcript,
            translated_audio: line.translated_audio.map(wrap),
            translated_transcript: line.translated_transcript,
            source_language: line.source_language,
            target_language: line.target_language,
            dataset_id: line.dataset_id,
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// Writes records as line-delimited JSON.
pub fn write_manifest<W: Write>(w: &mut W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, &r.to_line())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(DatasetRecord::from_line(serde_json::from_str(&line)?)?);
    }
    Ok(out)
}

pub fn save_manifest<P: AsRef<Path>>(path: P, records: &[DatasetRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_manifest(&mut f, records)?;
    f.flush()?;
    Ok(())
}

pub fn load_manifest<P: AsRef<Path>>(path: P) -> Result<Vec<DatasetRecord>> {
    read_manifest(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Every task (and combined chain) the record's fields support.
pub fn derive_tasks(record: &DatasetRecord) -> Vec<TaskTag> {
    let audio = record.audio.is_some();
    let transcript = record.transcript.is_some();
    let tr_audio = record.translated_audio.is_some();
    let tr_text = record.translated_transcript.is_some();
    let src = record.source_language.as_str();
    let tgt = record.target_language.clone();

    let candidates: [(Vec<Task>, bool); 7] = [
        (vec![Task::Asr], audio && transcript),
        (vec![Task::Ast], audio && tr_text),
        (vec![Task::S2st], audio && tr_audio),
        (vec![Task::Tts], transcript && audio),
        (vec![Task::Mt], transcript && tr_text),
        (vec![Task::Asr, Task::Ast], audio && transcript && tr_text),
        (
            vec![Task::Asr, Task::Ast, Task::S2st],
            audio && transcript && tr_text && tr_audio,
        ),
    ];
    candidates
        .into_iter()
        .filter(|(_, ok)| *ok)
        .filter_map(|(chain, _)| {
            let target = if chain.last().unwrap().changes_language() {
                Some(tgt.clone()?)
            } else {
                None
            };
            TaskTag::new(chain, src, target).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub dataset_id: String,
    pub chain: Vec<Task>,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.5
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Mixture("mixture has no components".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Mixture(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        for c in &self.components {
            validate_chain(&c.chain)?;
            if c.count == 0 {
                return Err(Error::Mixture(format!("component {} has count 0", c.dataset_id)));
            }
            if let Some(w) = c.weight {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::Mixture(format!("bad weight {w}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mixture spec serializes")
    }

    /// One component per (dataset, chain) pair found in the store, counts filled in.
    pub fn from_store(store: &RecordStore, chains: &[Vec<Task>], alpha: f64, seed: u64) -> Self {
        let mut components = Vec::new();
        for (dataset_id, records) in &store.datasets {
            for chain in chains {
                let count = records
                    .iter()
                    .filter(|r| derive_tasks(r).iter().any(|t| t.chain() == chain.as_slice()))
                    .count();
                if count > 0 {
                    components.push(MixtureComponent {
                        dataset_id: dataset_id.clone(),
                        chain: chain.clone(),
                        count,
                        weight: None,
                    });
                }
            }
        }
        Self {
            components,
            alpha,
            seed,
        }
    }
}

/// Sampling probabilities, `count^alpha` unless overridden, normalized.
pub fn component_weights(spec: &MixtureSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let raw: Vec<f64> = spec
        .components
        .iter()
        .map(|c| c.weight.unwrap_or_else(|| (c.count as f64).powf(spec.alpha)))
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Mixture("all component weights are zero".into()));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Records grouped by dataset id.
#[derive(Debug, Clone, Default)]
pub struct RecordStore {
    datasets: BTreeMap<String, Vec<DatasetRecord>>,
}

impl RecordStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = DatasetRecord>) -> Self {
        let mut store = Self::new();
        for r in records {
            store.insert(r);
        }
        store
    }

    pub fn insert(&mut self, record: DatasetRecord) {
        self.datasets.entry(record.dataset_id.clone()).or_default().push(record);
    }

    pub fn get(&self, dataset_id: &str) -> Option<&[DatasetRecord]> {
        self.datasets.get(dataset_id).map(Vec::as_slice)
    }

    pub fn dataset_ids(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str)
    }
}

struct ComponentState {
    /// (record index, tag) pairs that serialize for this component.
    items: Vec<(usize, TaskTag)>,
    dataset_id: String,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

fn epoch_seed(seed: u64, component: usize, epoch: u64) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [component as u64, epoch] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

/// One draw of a [`MixtureStream`].
#[derive(Debug, Clone)]
pub struct StreamItem {
    pub draw: u64,
    pub component: usize,
    pub example: TrainingExample,
}

/// Infinite, deterministic stream of training examples.
pub struct MixtureStream<'a> {
    store: &'a RecordStore,
    vocab: &'a JointVocabulary,
    probs: Vec<f64>,
    components: Vec<ComponentState>,
    rng: ChaCha8Rng,
    seed: u64,
    draw: u64,
    shard: (u64, u64),
}

pub fn build_stream<'a>(
    spec: &MixtureSpec,
    store: &'a RecordStore,
    vocab: &'a JointVocabulary,
) -> Result<MixtureStream<'a>> {
    let probs = component_weights(spec)?;
    let mut components = Vec::with_capacity(spec.components.len());
    for (ci, comp) in spec.components.iter().enumerate() {
        let records = store
            .get(&comp.dataset_id)
            .ok_or_else(|| Error::Mixture(format!("unknown dataset {:?}", comp.dataset_id)))?;
        let mut items = Vec::new();
        for (ri, rec) in records.iter().enumerate() {
            if let Some(tag) = derive_tasks(rec)
                .into_iter()
                .find(|t| t.chain() == comp.chain.as_slice())
            {
                if serialize_example(rec, &tag, vocab).is_ok() {
                    items.push((ri, tag));
                }
            }
        }
        if items.is_empty() {
            return Err(Error::Mixture(format!(
                "component {ci} ({} {:?}) has no serializable examples",
                comp.dataset_id, comp.chain
            )));
        }
        let mut state = ComponentState {
            order: (0..items.len()).collect(),
            items,
            dataset_id: comp.dataset_id.clone(),
            pos: 0,
            epoch: 0,
        };
        state
            .order
            .shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(spec.seed, ci, 0)));
        components.push(state);
    }
    Ok(MixtureStream {
        store,
        vocab,
        probs,
        components,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        seed: spec.seed,
        draw: 0,
        shard: (0, 1),
    })
}

impl<'a> MixtureStream<'a> {
    /// Restricts this stream to draws `d` with `d % count == index`.
    ///
    /// Every shard replays the full draw sequence, so the union of all
    /// shards equals the unsharded stream.
    pub fn shard(mut self, index: u64, count: u64) -> Self {
        assert!(count > 0 && index < count);
        self.shard = (index, count);
        self
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    fn choose_component(&mut self) -> usize {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    fn advance(&mut self, ci: usize) -> usize {
        let seed = self.seed;
        let c = &mut self.components[ci];
        if c.pos == c.order.len() {
            c.epoch += 1;
            c.pos = 0;
            c.order = (0..c.items.len()).collect();
            c.order
                .shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, ci, c.epoch)));
        }
        let item = c.order[c.pos];
        c.pos += 1;
        item
    }

    /// Component and item of the next draw, without serializing it.
    pub fn next_choice(&mut self) -> (u64, usize, usize) {
        let draw = self.draw;
        self.draw += 1;
        let ci = self.choose_component();
        let item = self.advance(ci);
        (draw, ci, item)
    }
}

impl Iterator for MixtureStream<'_> {
    type Item = StreamItem;

    fn next(&mut self) -> Option<StreamItem> {
        loop {
            let (draw, ci, item) = self.next_choice();
            if draw % self.shard.1 != self.shard.0 {
                continue;
            }
            let comp = &self.components[ci];
            let (ri, tag) = &comp.items[item];
            let record = &self.store.get(&comp.dataset_id).unwrap()[*ri];
            let example =
                serialize_example(record, tag, self.vocab).expect("component items were checked to serialize");
            return Some(StreamItem {
                draw,
                component: ci,
                example,
            });
        }
    }
}

/// Per-component probabilities and per-task record counts.
#[derive(Debug, Clone, Serialize)]
pub struct MixtureStats {
    pub components: Vec<ComponentStats>,
    pub task_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentStats {
    pub dataset_id: String,
    pub chain: String,
    pub count: usize,
    pub probability: f64,
}

pub fn mixture_stats(spec: &MixtureSpec, store: &RecordStore) -> Result<MixtureStats> {
    let probs = component_weights(spec)?;
    let components = spec
        .components
        .iter()
        .zip(&probs)
        .map(|(c, &p)| ComponentStats {
            dataset_id: c.dataset_id.clone(),
            chain: c.chain.iter().map(|t| t.name()).collect::<Vec<_>>().join(" "),
            count: c.count,
            probability: p,
        })
        .collect();
    let mut task_counts: HashMap<String, usize> = HashMap::new();
    for id in store.dataset_ids() {
        for rec in store.get(id).unwrap() {
            for tag in derive_tasks(rec) {
                let key = tag.chain().iter().map(|t| t.name()).collect::<Vec<_>>().join(" ");
                *task_counts.entry(key).or_default() += 1;
            }
        }
    }
    Ok(MixtureStats {
        components,
        task_counts: task_counts.into_iter().collect(),
    })
}
