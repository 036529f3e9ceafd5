//! Deterministic synthetic speech-text corpora.
//!
//! Each word of a toy language is a motif of three 120 ms pure tones drawn
//! from a fixed set of mel-spaced pitches. At 16 kHz with a 640-sample hop
//! a word spans exactly 9 frames; the first 8 lie entirely inside the word,
//! so their tokens do not depend on the neighbouring words. The ninth frame
//! straddles the boundary. A sentence of `w` words therefore yields
//! `9w - 1` frames under the default frontend.
//!
//! A second language ("Mirror") has its own words and motifs, and a
//! bijective word-for-word table maps the source language onto it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{extract_features, hz_to_mel, mel_to_hz, FrameFeatureSequence, FrontendConfig, Waveform};
use crate::error::{Error, Result};
use crate::metrics::Transcriber;
use crate::mixture::DatasetRecord;
use crate::quantizer::{tokenize, train_codebook, AudioTokenSeq, Codebook, KMeansParams};
use crate::vocab::{JointVocabulary, DEFAULT_MERGES, MIN_TEXT_VOCAB};

pub const SOURCE_LANGUAGE: &str = "Synth";
pub const TARGET_LANGUAGE: &str = "Mirror";
pub const DATASET_ID: &str = "synth";
pub const SAMPLE_RATE: u32 = 16_000;
/// 120 ms at 16 kHz.
pub const TONE_SAMPLES: usize = 1920;
pub const TONES_PER_WORD: usize = 3;
pub const WORD_SAMPLES: usize = TONE_SAMPLES * TONES_PER_WORD;
/// Frames per word at the default hop (0.36 s at 25 Hz).
pub const FRAMES_PER_WORD: usize = 9;
/// Frames of a word that do not overlap its neighbours.
pub const CLEAN_FRAMES: usize = 8;
/// Minimum Frobenius distance between the clean log-mel frames of two motifs.
pub const MOTIF_MARGIN: f64 = 10.0;
/// Marker emitted for audio that matches no word.
pub const UNKNOWN_WORD: &str = "<unk>";

const PITCH_COUNT: usize = 12;
const LOW_HZ: f64 = 250.0;
const HIGH_HZ: f64 = 3500.0;
const AMPLITUDE: f64 = 0.5;
const SOURCE_CONSONANTS: &[u8] = b"bdgkpt";
const TARGET_CONSONANTS: &[u8] = b"lmnrsvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

/// Words, tone motifs and the translation table of a synthetic language pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLanguageSpec {
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    /// Pitch indices of each source word's three tones.
    pub source_motifs: Vec<[usize; 3]>,
    pub target_motifs: Vec<[usize; 3]>,
    /// `translation[i]` is the target word index of source word `i`.
    pub translation: Vec<usize>,
    pub pitches_hz: Vec<f64>,
    pub seed: u64,
}

fn mel_spaced_pitches() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(LOW_HZ), hz_to_mel(HIGH_HZ));
    (0..PITCH_COUNT)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (PITCH_COUNT - 1) as f64))
        .collect()
}

fn pseudo_words(consonants: &[u8], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut syllables = Vec::new();
    for &c in consonants {
        for &v in VOWELS {
            syllables.push([c, v]);
        }
    }
    let mut all: Vec<String> = Vec::new();
    for a in &syllables {
        for b in &syllables {
            all.push(String::from_utf8(vec![a[0], a[1], b[0], b[1]]).unwrap());
        }
    }
    all.shuffle(rng);
    all.truncate(n);
    all
}

impl SynthLanguageSpec {
    /// A seeded language pair with `vocab_size` words per side.
    pub fn generate(vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || vocab_size > 256 {
            return Err(Error::Synth(format!("vocabulary size {vocab_size} outside 1..=256")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source_words = pseudo_words(SOURCE_CONSONANTS, vocab_size, &mut rng);
        let target_words = pseudo_words(TARGET_CONSONANTS, vocab_size, &mut rng);
        let mut triples = Vec::new();
        for a in 0..PITCH_COUNT {
            for b in 0..PITCH_COUNT {
                for c in 0..PITCH_COUNT {
                    if a != b && b != c {
                        triples.push([a, b, c]);
                    }
                }
            }
        }
        triples.shuffle(&mut rng);
        let target_motifs = triples.split_off(vocab_size);
        let source_motifs = triples;
        let target_motifs = target_motifs[..vocab_size].to_vec();
        let mut translation: Vec<usize> = (0..vocab_size).collect();
        translation.shuffle(&mut rng);
        Self::new(
            source_words,
            target_words,
            source_motifs,
            target_motifs,
            translation,
            mel_spaced_pitches(),
            seed,
        )
    }

    /// Validates word lists, the table's bijectivity and the motif margin.
    pub fn new(
        source_words: Vec<String>,
        target_words: Vec<String>,
        source_motifs: Vec<[usize; 3]>,
        target_motifs: Vec<[usize; 3]>,
        translation: Vec<usize>,
        pitches_hz: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = source_words.len();
        if n == 0
            || target_words.len() != n
            || source_motifs.len() != n
            || target_motifs.len() != n
            || translation.len() != n
        {
            return Err(Error::Synth(
                "word lists, motifs and table must have equal, nonzero length".into(),
            ));
        }
        let mut seen = vec![false; n];
        for &t in &translation {
            if t >= n || std::mem::replace(&mut seen[t], true) {
                return Err(Error::Synth("translation table is not a bijection".into()));
            }
        }
        for words in [&source_words, &target_words] {
            let mut sorted: Vec<&String> = words.iter().collect();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != n {
                return Err(Error::Synth("duplicate word".into()));
            }
            if let Some(w) = words
                .iter()
                .find(|w| w.is_empty() || !w.bytes().all(|b| b.is_ascii_lowercase()))
            {
                return Err(Error::Synth(format!("word {w:?} is not lowercase ASCII")));
            }
        }
        if source_motifs
            .iter()
            .chain(&target_motifs)
            .flatten()
            .any(|&p| p >= pitches_hz.len())
        {
            return Err(Error::Synth("motif refers to an unknown pitch".into()));
        }
        let spec = Self {
            source_words,
            target_words,
            source_motifs,
            target_motifs,
            translation,
            pitches_hz,
            seed,
        };
        let margin = spec.motif_margin()?;
        if margin < MOTIF_MARGIN {
            return Err(Error::Synth(format!(
                "motifs are {margin:.3} apart, below the margin {MOTIF_MARGIN}"
            )));
        }
        Ok(spec)
    }

    pub fn vocab_size(&self) -> usize {
        self.source_words.len()
    }

    pub fn words(&self, side: Side) -> &[String] {
        match side {
            Side::Source => &self.source_words,
            Side::Target => &self.target_words,
        }
    }

    fn motifs(&self, side: Side) -> &[[usize; 3]] {
        match side {
            Side::Source => &self.source_motifs,
            Side::Target => &self.target_motifs,
        }
    }

    pub fn word_index(&self, side: Side, word: &str) -> Option<usize> {
        self.words(side).iter().position(|w| w == word)
    }

    /// Word-for-word translation of a source sentence.
    pub fn translate(&self, sentence: &str) -> Result<String> {
        sentence
            .split_whitespace()
            .map(|w| {
                self.word_index(Side::Source, w)
                    .map(|i| self.target_words[self.translation[i]].as_str())
                    .ok_or_else(|| Error::Synth(format!("unknown word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(|ws| ws.join(" "))
    }

    pub fn render_word(&self, side: Side, index: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(WORD_SAMPLES);
        for &p in &self.motifs(side)[index] {
            let w = 2.0 * std::f64::consts::PI * self.pitches_hz[p] / SAMPLE_RATE as f64;
            out.extend((0..TONE_SAMPLES).map(|n| (AMPLITUDE * (w * n as f64).sin()) as f32));
        }
        out
    }

    pub fn render_sentence(&self, side: Side, words: &[usize]) -> Waveform {
        let mut samples = Vec::with_capacity(words.len() * WORD_SAMPLES);
        for &w in words {
            samples.extend(self.render_word(side, w));
        }
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    fn word_features(&self, side: Side, index: usize) -> Result<FrameFeatureSequence> {
        let wave = Waveform {
            samples: self.render_word(side, index),
            sample_rate: SAMPLE_RATE,
        };
        extract_features(&wave, &FrontendConfig::default())
    }

    /// Smallest distance between the clean frames of any two motifs, over both languages.
    pub fn motif_margin(&self) -> Result<f64> {
        let mut feats = Vec::new();
        for side in [Side::Source, Side::Target] {
            for i in 0..self.vocab_size() {
                feats.push(self.word_features(side, i)?.frames);
            }
        }
        let mut margin = f64::INFINITY;
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let d: f64 = feats[i]
                    .iter()
                    .zip(&feats[j])
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                margin = margin.min(d);
            }
        }
        Ok(margin)
    }

    /// Trains a `k`-centroid codebook on isolated words of both languages
    /// plus seeded random sentences, so boundary frames are represented.
    pub fn train_codebook(&self, k: usize, seed: u64) -> Result<Codebook> {
        let mut corpus = Vec::new();
        let cfg = FrontendConfig::default();
        for side in [Side::Source, Side::Target] {
            for i in 0..self.vocab_size() {
                corpus.push(self.word_features(side, i)?);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.seed);
        for side in [Side::Source, Side::Target] {
            for _ in 0..4 * self.vocab_size() {
                let words: Vec<usize> = (0..4).map(|_| rng.random_range(0..self.vocab_size())).collect();
                corpus.push(extract_features(&self.render_sentence(side, &words), &cfg)?);
            }
        }
        train_codebook(
            &corpus,
            &KMeansParams {
                k,
                max_iters: 50,
                tol: 1e-6,
                seed,
            },
        )
    }

    /// Word tokens for a text vocabulary: the defaults plus every word of both languages.
    pub fn merges(&self) -> Vec<String> {
        DEFAULT_MERGES
            .iter()
            .map(|s| s.to_string())
            .chain(self.source_words.iter().cloned())
            .chain(self.target_words.iter().cloned())
            .collect()
    }

    /// Joint vocabulary with one text id per synthetic word.
    pub fn vocabulary(&self, codebook: &Codebook) -> Result<JointVocabulary> {
        let merges = self.merges();
        Ok(
            JointVocabulary::with_merges(MIN_TEXT_VOCAB + merges.len(), codebook.k(), merges)?
                .with_codebook(codebook.id()),
        )
    }

    pub fn tokenize_sentence(&self, side: Side, words: &[usize], codebook: &Codebook) -> Result<AudioTokenSeq> {
        let feats = extract_features(&self.render_sentence(side, words), &FrontendConfig::default())?;
        tokenize(&feats, codebook)
    }
}

/// `n` seeded records with all four fields, 1 to `max_words` words each.
pub fn generate_corpus(
    spec: &SynthLanguageSpec,
    codebook: &Codebook,
    n: usize,
    max_words: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if n == 0 || max_words == 0 {
        return Err(Error::Synth("corpus size and sentence length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ spec.seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(1..=max_words);
        let words: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size())).collect();
        out.push(record_for(spec, codebook, &words)?);
    }
    Ok(out)
}

/// The record of one source sentence given as word indices.
pub fn record_for(spec: &SynthLanguageSpec, codebook: &Codebook, words: &[usize]) -> Result<DatasetRecord> {
    let translated: Vec<usize> = words.iter().map(|&w| spec.translation[w]).collect();
    let join = |side: Side, idx: &[usize]| {
        idx.iter()
            .map(|&i| spec.words(side)[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let rec = DatasetRecord {
        audio: Some(spec.tokenize_sentence(Side::Source, words, codebook)?),
        transcript: Some(join(Side::Source, words)),
        translated_audio: Some(spec.tokenize_sentence(Side::Target, &translated, codebook)?),
        translated_transcript: Some(join(Side::Target, &translated)),
        source_language: SOURCE_LANGUAGE.to_string(),
        target_language: Some(TARGET_LANGUAGE.to_string()),
        dataset_id: DATASET_ID.to_string(),
    };
    rec.validate()?;
    Ok(rec)
}

/// Transcribes synthetic audio tokens by matching each word's clean frames
/// against the token signatures of the language's motifs.
#[derive(Debug, Clone)]
pub struct OracleTranscriber {
    words: Vec<String>,
    signatures: Vec<[u32; CLEAN_FRAMES]>,
    codebook_id: String,
    /// Largest Hamming distance still accepted as a match.
    pub max_mismatch: usize,
}

impl OracleTranscriber {
    pub fn new(spec: &SynthLanguageSpec, codebook: &Codebook, side: Side) -> Result<Self> {
        let mut signatures = Vec::with_capacity(spec.vocab_size());
        for i in 0..spec.vocab_size() {
            let toks = tokenize(&spec.word_features(side, i)?, codebook)?.tokens;
            let mut sig = [0u32; CLEAN_FRAMES];
            sig.copy_from_slice(&toks[..CLEAN_FRAMES]);
            signatures.push(sig);
        }
        for i in 0..signatures.len() {
            for j in i + 1..signatures.len() {
                if signatures[i] == signatures[j] {
                    return Err(Error::Synth(format!(
                        "words {i} and {j} share a token signature under codebook {}",
                        codebook.id()
                    )));
                }
            }
        }
        Ok(Self {
            words: spec.words(side).to_vec(),
            signatures,
            codebook_id: codebook.id().to_string(),
            max_mismatch: CLEAN_FRAMES / 2,
        })
    }

    /// Nearest word of one 8-token chunk, or `None` beyond `max_mismatch`.
    pub fn match_chunk(&self, chunk: &[u32]) -> Option<usize> {
        let mut best = (usize::MAX, 0);
        for (w, sig) in self.signatures.iter().enumerate() {
            let d =
                sig.iter().zip(chunk).filter(|(a, b)| a != b).count() + CLEAN_FRAMES - chunk.len().min(CLEAN_FRAMES);
            if d < best.0 {
                best = (d, w);
            }
        }
        (best.0 <= self.max_mismatch).then_some(best.1)
    }

    pub fn transcribe_tokens(&self, tokens: &[u32]) -> String {
        let words = (tokens.len() + 1).div_ceil(FRAMES_PER_WORD);
        (0..words)
            .map(|i| {
                let start = i * FRAMES_PER_WORD;
                let end = (start + CLEAN_FRAMES).min(tokens.len());
                match self.match_chunk(&tokens[start..end]) {
                    Some(w) => self.words[w].as_str(),
                    None => UNKNOWN_WORD,
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Transcriber for OracleTranscriber {
    fn codebook_id(&self) -> Option<&str> {
        Some(&self.codebook_id)
    }

    fn transcribe(&self, tokens: &AudioTokenSeq) -> std::result::Result<String, String> {
        if tokens.codebook_id != self.codebook_id {
            return Err(format!("tokens come from codebook {}", tokens.codebook_id));
        }
        Ok(self.transcribe_tokens(&tokens.tokens))
    }
}

/// Oracle transcriber for the target language, as used to score speech output.
pub fn oracle_transcriber(spec: &SynthLanguageSpec, codebook: &Codebook) -> Result<OracleTranscriber> {
    OracleTranscriber::new(spec, codebook, Side::Target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::derive_tasks;

    fn setup() -> (SynthLanguageSpec, Codebook) {
        let spec = SynthLanguageSpec::generate(12, 7).unwrap();
        let cb = spec.train_codebook(48, 1).unwrap();
        (spec, cb)
    }

    #[test]
    fn words_span_nine_frames() {
        let (spec, cb) = setup();
        for w in 1..=5 {
            let words: Vec<usize> = (0..w).map(|i| i % spec.vocab_size()).collect();
            let toks = spec.tokenize_sentence(Side::Source, &words, &cb).unwrap();
            // floor((5760 w - 1024) / 640) + 1
            assert_eq!(toks.tokens.len(), (5760 * w - 1024) / 640 + 1);
            assert_eq!(toks.tokens.len(), FRAMES_PER_WORD * w - 1);
        }
    }

    #[test]
    fn construction_rejects_bad_tables() {
        let spec = SynthLanguageSpec::generate(4, 1).unwrap();
        let mut t = spec.translation.clone();
        t[0] = t[1];
        assert!(SynthLanguageSpec::new(
            spec.source_words.clone(),
            spec.target_words.clone(),
            spec.source_motifs.clone(),
            spec.target_motifs.clone(),
            t,
            spec.pitches_hz.clone(),
            1
        )
        .is_err());
        let mut motifs = spec.source_motifs.clone();
        motifs[1] = motifs[0];
        assert!(SynthLanguageSpec::new(
            spec.source_words.clone(),
            spec.target_words.clone(),
            motifs,
            spec.target_motifs.clone(),
            spec.translation.clone(),
            spec.pitches_hz.clone(),
            1
        )
        .is_err());
    }

    #[test]
    fn one_word_record() {
        let (spec, cb) = setup();
        let r = record_for(&spec, &cb, &[3]).unwrap();
        assert_eq!(r.transcript.as_deref(), Some(spec.source_words[3].as_str()));
        assert_eq!(
            r.translated_transcript.as_deref(),
            Some(spec.target_words[spec.translation[3]].as_str())
        );
        assert_eq!(derive_tasks(&r).len(), 7);
    }

    #[test]
    fn corpus_is_seeded() {
        let (spec, cb) = setup();
        let a = generate_corpus(&spec, &cb, 5, 3, 2).unwrap();
        assert_eq!(a, generate_corpus(&spec, &cb, 5, 3, 2).unwrap());
        assert_ne!(a, generate_corpus(&spec, &cb, 5, 3, 3).unwrap());
    }

    #[test]
    fn transcriber_recovers_every_word_and_tolerates_one_substitution() {
        let (spec, cb) = setup();
        let asr = OracleTranscriber::new(&spec, &cb, Side::Source).unwrap();
        for w in 0..spec.vocab_size() {
            let t = spec.tokenize_sentence(Side::Source, &[w], &cb).unwrap();
            assert_eq!(asr.transcribe(&t).unwrap(), spec.source_words[w]);
        }
        let words = [0, 5, 2, 11, 7];
        let t = spec.tokenize_sentence(Side::Source, &words, &cb).unwrap();
        let reference: Vec<&str> = words.iter().map(|&w| spec.source_words[w].as_str()).collect();
        assert_eq!(asr.transcribe_tokens(&t.tokens), reference.join(" "));
        for pos in 0..t.tokens.len() {
            let mut bad = t.tokens.clone();
            bad[pos] = (bad[pos] + 1) % cb.k() as u32;
            let hyp = asr.transcribe_tokens(&bad);
            let errors = hyp.split(' ').zip(&reference).filter(|(a, b)| a != *b).count();
            assert!(errors <= 1);
        }
    }
}
