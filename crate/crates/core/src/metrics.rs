//! Corpus BLEU, word and character error rates, and ASR-BLEU.
//!
//! BLEU follows the sacreBLEU corpus defaults: 13a tokenization with case
//! preserved, clipped n-gram precisions for n = 1..4, exponential smoothing
//! of zero counts and a brevity penalty. Error rates normalize text in a
//! fixed order: case-fold, strip Unicode punctuation (categories `P*`), then
//! split on whitespace.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::AudioTokenSeq;

pub const MAX_ORDER: usize = 4;

/// Hypothesis/reference pairs in one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCorpus<H = String> {
    pub items: Vec<(H, String)>,
    pub language: String,
}

impl<H> EvalCorpus<H> {
    pub fn new(items: Vec<(H, String)>, language: impl Into<String>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            items,
            language: language.into(),
        })
    }

    pub fn from_parallel(hyps: Vec<H>, refs: Vec<String>, language: impl Into<String>) -> Result<Self> {
        if hyps.len() != refs.len() {
            return Err(Error::DimensionMismatch {
                expected: refs.len(),
                got: hyps.len(),
            });
        }
        Self::new(hyps.into_iter().zip(refs).collect(), language)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct EvalLine {
    hypothesis: String,
    reference: String,
}

/// Reads line-delimited `{"hypothesis": .., "reference": ..}` records.
pub fn read_eval_jsonl<R: BufRead>(r: R, language: &str) -> Result<EvalCorpus> {
    let mut items = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalLine = serde_json::from_str(&line)?;
        items.push((rec.hypothesis, rec.reference));
    }
    EvalCorpus::new(items, language)
}

pub fn write_eval_jsonl<W: Write>(w: &mut W, corpus: &EvalCorpus) -> Result<()> {
    for (h, r) in &corpus.items {
        let rec = EvalLine {
            hypothesis: h.clone(),
            reference: r.clone(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

static PUNCT_13A: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap());
static PERIOD_COMMA_AFTER_NONDIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([^0-9])([\.,])").unwrap());
static PERIOD_COMMA_BEFORE_NONDIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\.,])([^0-9])").unwrap());
static DASH_AFTER_DIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([0-9])(-)").unwrap());
static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());

/// The 13a tokenizer: splits off punctuation, keeps case.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let s = format!(" {s} ");
    let s = PUNCT_13A.replace_all(&s, " $1 ");
    let s = PERIOD_COMMA_AFTER_NONDIGIT.replace_all(&s, "$1 $2 ");
    let s = PERIOD_COMMA_BEFORE_NONDIGIT.replace_all(&s, " $1 $2");
    let s = DASH_AFTER_DIGIT.replace_all(&s, "$1 $2 ");
    s.split_whitespace().map(str::to_string).collect()
}

/// Sufficient statistics of corpus BLEU; additive over sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub correct: [u64; MAX_ORDER],
    pub total: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn sentence(hyp: &[String], reference: &[String]) -> Self {
        let mut st = Self {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            for g in reference.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
            for g in hyp.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            st.correct[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
            st.total[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
        }
        st
    }

    pub fn add(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Score in `[0, 100]` with exponential smoothing of zero matches.
    pub fn score(&self) -> f64 {
        if self.correct.iter().all(|&c| c == 0) {
            return 0.0;
        }
        let mut precisions = [0.0f64; MAX_ORDER];
        let mut smooth = 1.0;
        for n in 0..MAX_ORDER {
            if self.total[n] == 0 {
                break;
            }
            precisions[n] = if self.correct[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.total[n] as f64)
            } else {
                100.0 * self.correct[n] as f64 / self.total[n] as f64
            };
        }
        let bp = if self.hyp_len < self.ref_len {
            if self.hyp_len == 0 {
                0.0
            } else {
                (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
            }
        } else {
            1.0
        };
        let log_sum: f64 = precisions
            .iter()
            .map(|&p| if p == 0.0 { -9_999_999_999.0 } else { p.ln() })
            .sum();
        (bp * (log_sum / MAX_ORDER as f64).exp()).clamp(0.0, 100.0)
    }
}

pub fn bleu_stats(corpus: &EvalCorpus) -> BleuStats {
    let mut st = BleuStats::default();
    for (h, r) in &corpus.items {
        st.add(&BleuStats::sentence(&tokenize_13a(h), &tokenize_13a(r)));
    }
    st
}

/// Corpus BLEU; no normalization beyond tokenization.
pub fn corpus_bleu(corpus: &EvalCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(bleu_stats(corpus).score())
}

/// Levenshtein distance (unit-cost substitutions, insertions and deletions).
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    const STACK: usize = 64;
    if hyp.len() < STACK {
        let mut row = [0usize; STACK];
        levenshtein_row(reference, hyp, &mut row[..=hyp.len()])
    } else {
        levenshtein_row(reference, hyp, &mut vec![0; hyp.len() + 1])
    }
}

/// Single-row Levenshtein; `row` has length `hyp.len() + 1`.
fn levenshtein_row<T: PartialEq>(reference: &[T], hyp: &[T], row: &mut [usize]) -> usize {
    for (j, cell) in row.iter_mut().enumerate() {
        *cell = j;
    }
    let (first, rest) = row.split_first_mut().expect("row is non-empty");
    for (i, r) in reference.iter().enumerate() {
        let mut diag = i;
        let mut left = i + 1;
        *first = left;
        for (h, cell) in hyp.iter().zip(rest.iter_mut()) {
            let up = *cell;
            left = (diag + usize::from(r != h)).min(up + 1).min(left + 1);
            diag = up;
            *cell = left;
        }
    }
    row[hyp.len()]
}

/// Case-fold, then strip punctuation.
pub fn normalize(text: &str) -> String {
    PUNCTUATION.replace_all(&text.to_lowercase(), "").into_owned()
}

pub fn normalized_words(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

/// Languages written without spaces between words.
pub fn is_space_free(language: &str) -> bool {
    matches!(language.to_ascii_lowercase().as_str(), "japanese" | "chinese")
}

pub fn normalized_chars(text: &str, space_free: bool) -> Vec<char> {
    let words = normalized_words(text);
    let joined = if space_free { words.concat() } else { words.join(" ") };
    joined.chars().collect()
}

/// Total edits and total reference length over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub edits: u64,
    pub reference_len: u64,
}

impl ErrorCounts {
    pub fn rate(&self) -> Result<f64> {
        if self.reference_len == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(self.edits as f64 / self.reference_len as f64)
    }
}

pub fn word_errors(corpus: &EvalCorpus) -> ErrorCounts {
    let mut c = ErrorCounts::default();
    for (h, r) in &corpus.items {
        let (h, r) = (normalized_words(h), normalized_words(r));
        c.edits += edit_distance(&r, &h) as u64;
        c.reference_len += r.len() as u64;
    }
    c
}

pub fn char_errors(corpus: &EvalCorpus) -> ErrorCounts {
    let space_free = is_space_free(&corpus.language);
    let mut c = ErrorCounts::default();
    for (h, r) in &corpus.items {
        let (h, r) = (normalized_chars(h, space_free), normalized_chars(r, space_free));
        c.edits += edit_distance(&r, &h) as u64;
        c.reference_len += r.len() as u64;
    }
    c
}

/// Corpus word error rate: total word edits over total reference words.
pub fn wer(corpus: &EvalCorpus) -> Result<f64> {
    word_errors(corpus).rate()
}

/// Corpus character error rate.
pub fn cer(corpus: &EvalCorpus) -> Result<f64> {
    char_errors(corpus).rate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Bleu,
    Wer,
    Cer,
    /// WER, or CER for space-free languages.
    ErrorRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    /// The metric actually computed (resolves `ErrorRate`).
    pub resolved: Metric,
    pub score: f64,
    pub items: usize,
    pub language: String,
    pub hypothesis_units: u64,
    pub reference_units: u64,
    pub normalization: String,
}

pub fn evaluate(corpus: &EvalCorpus, metric: Metric) -> Result<EvalReport> {
    let resolved = match metric {
        Metric::ErrorRate if is_space_free(&corpus.language) => Metric::Cer,
        Metric::ErrorRate => Metric::Wer,
        m => m,
    };
    let (score, hyp_units, ref_units, normalization) = match resolved {
        Metric::Bleu => {
            let st = bleu_stats(corpus);
            (
                corpus_bleu(corpus)?,
                st.hyp_len,
                st.ref_len,
                "tokenize 13a; case kept".to_string(),
            )
        }
        Metric::Wer => {
            let c = word_errors(corpus);
            let hyp: usize = corpus.items.iter().map(|(h, _)| normalized_words(h).len()).sum();
            (
                c.rate()?,
                hyp as u64,
                c.reference_len,
                "lowercase; strip \\p{P}; split whitespace".to_string(),
            )
        }
        Metric::Cer | Metric::ErrorRate => {
            let c = char_errors(corpus);
            let sf = is_space_free(&corpus.language);
            let hyp: usize = corpus.items.iter().map(|(h, _)| normalized_chars(h, sf).len()).sum();
            let norm = if sf {
                "lowercase; strip \\p{P}; remove whitespace"
            } else {
                "lowercase; strip \\p{P}; collapse whitespace"
            };
            (c.rate()?, hyp as u64, c.reference_len, norm.to_string())
        }
    };
    Ok(EvalReport {
        metric,
        resolved,
        score,
        items: corpus.len(),
        language: corpus.language.clone(),
        hypothesis_units: hyp_units,
        reference_units: ref_units,
        normalization,
    })
}

/// Speech-to-text function used to score audio hypotheses.
pub trait Transcriber {
    /// Codebook the transcriber expects, if it is tied to one.
    fn codebook_id(&self) -> Option<&str> {
        None
    }

    fn transcribe(&self, tokens: &AudioTokenSeq) -> std::result::Result<String, String>;
}

impl<F> Transcriber for F
where
    F: Fn(&AudioTokenSeq) -> std::result::Result<String, String>,
{
    fn transcribe(&self, tokens: &AudioTokenSeq) -> std::result::Result<String, String> {
        self(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrBleuReport {
    /// BLEU over the items that transcribed successfully.
    pub score: f64,
    pub transcripts: Vec<Option<String>>,
    pub failures: Vec<ItemFailure>,
    /// Fraction of items scored.
    pub coverage: f64,
}

impl AsrBleuReport {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Transcribes every audio hypothesis and scores the transcripts with BLEU.
pub fn asr_bleu(corpus: &EvalCorpus<AudioTokenSeq>, transcriber: &dyn Transcriber) -> Result<AsrBleuReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let codebook = &corpus.items[0].0.codebook_id;
    if let Some((h, _)) = corpus.items.iter().find(|(h, _)| &h.codebook_id != codebook) {
        return Err(Error::CodebookMismatch {
            expected: codebook.clone(),
            found: h.codebook_id.clone(),
        });
    }
    if let Some(expected) = transcriber.codebook_id() {
        if expected != codebook {
            return Err(Error::CodebookMismatch {
                expected: expected.to_string(),
                found: codebook.clone(),
            });
        }
    }
    let mut transcripts = Vec::with_capacity(corpus.len());
    let mut failures = Vec::new();
    let mut scored = Vec::new();
    for (i, (h, r)) in corpus.items.iter().enumerate() {
        match transcriber.transcribe(h) {
            Ok(text) => {
                scored.push((text.clone(), r.clone()));
                transcripts.push(Some(text));
            }
            Err(message) => {
                failures.push(ItemFailure { index: i, message });
                transcripts.push(None);
            }
        }
    }
    let coverage = scored.len() as f64 / corpus.len() as f64;
    let score = if scored.is_empty() {
        0.0
    } else {
        corpus_bleu(&EvalCorpus::new(scored, corpus.language.clone())?)?
    };
    Ok(AsrBleuReport {
        score,
        transcripts,
        failures,
        coverage,
    })
}
