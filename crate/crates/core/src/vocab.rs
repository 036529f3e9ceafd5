//! Joint text + audio vocabulary.
//!
//! Ids `[0, t)` are text tokens: 256 raw bytes, one end-of-sequence token,
//! then whole-word tokens for task names and language names. Ids
//! `[t, t + a)` are audio tokens, audio token `k` being id `t + k`.
//!
//! Text is encoded by greedy longest match over the word tokens with a byte
//! fallback, so any byte string round-trips.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Bytes plus the end-of-sequence token.
pub const MIN_TEXT_VOCAB: usize = 257;
pub const EOS_ID: TokenId = 256;

/// Word tokens merged by default, in id order.
pub const DEFAULT_MERGES: &[&str] = &[
    "ASR",
    "AST",
    "S2ST",
    "TTS",
    "MT",
    "English",
    "French",
    "Spanish",
    "German",
    "Italian",
    "Portuguese",
    "Russian",
    "Japanese",
    "Chinese",
    "Synth",
    "Mirror",
    "transcribe",
    "translate",
    "the following",
    "audio",
    "text",
    "into",
];

#[derive(Debug, Clone, PartialEq)]
pub struct JointVocabulary {
    t: usize,
    a: usize,
    merges: Vec<String>,
    /// Codebook whose tokens occupy the audio range, when pinned.
    audio_codebook: Option<String>,
}

/// A token decoded to its modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Text(TokenId),
    Eos,
    Audio(u32),
}

impl JointVocabulary {
    /// Text vocabulary of `t` ids with the default word tokens, plus `a` audio ids.
    pub fn new(t: usize, a: usize) -> Result<Self> {
        let merges = DEFAULT_MERGES.iter().map(|s| s.to_string()).collect();
        Self::with_merges(t, a, merges)
    }

    /// Word tokens beyond the capacity `t - 257` are dropped.
    pub fn with_merges(t: usize, a: usize, mut merges: Vec<String>) -> Result<Self> {
        if t < MIN_TEXT_VOCAB {
            return Err(Error::VocabTooSmall { t, min: MIN_TEXT_VOCAB });
        }
        if a == 0 {
            return Err(Error::Config("audio vocabulary must be nonempty".into()));
        }
        if merges.iter().any(|m| m.len() < 2) {
            return Err(Error::Config("merged tokens must span at least two bytes".into()));
        }
        merges.truncate(t - MIN_TEXT_VOCAB);
        Ok(Self {
            t,
            a,
            merges,
            audio_codebook: None,
        })
    }

    /// Pins the audio range to one codebook.
    pub fn with_codebook(mut self, codebook_id: impl Into<String>) -> Self {
        self.audio_codebook = Some(codebook_id.into());
        self
    }

    pub fn text_size(&self) -> usize {
        self.t
    }

    pub fn audio_size(&self) -> usize {
        self.a
    }

    pub fn total(&self) -> usize {
        self.t + self.a
    }

    pub fn merges(&self) -> &[String] {
        &self.merges
    }

    pub fn audio_codebook(&self) -> Option<&str> {
        self.audio_codebook.as_deref()
    }

    pub fn eos(&self) -> TokenId {
        EOS_ID
    }

    pub fn audio_id(&self, k: u32) -> TokenId {
        debug_assert!((k as usize) < self.a);
        self.t as TokenId + k
    }

    pub fn classify(&self, id: TokenId) -> Result<Token> {
        let i = id as usize;
        if i >= self.total() {
            Err(Error::TokenOutOfRange {
                token: id,
                size: self.total(),
            })
        } else if i >= self.t {
            Ok(Token::Audio(id - self.t as TokenId))
        } else if id == EOS_ID {
            Ok(Token::Eos)
        } else {
            Ok(Token::Text(id))
        }
    }

    pub fn is_audio(&self, id: TokenId) -> bool {
        (id as usize) >= self.t && (id as usize) < self.total()
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            let rest = &bytes[i..];
            let best = self
                .merges
                .iter()
                .enumerate()
                .filter(|(_, m)| rest.starts_with(m.as_bytes()))
                .max_by_key(|(j, m)| (m.len(), std::cmp::Reverse(*j)));
            match best {
                Some((j, m)) => {
                    out.push((MIN_TEXT_VOCAB + j) as TokenId);
                    i += m.len();
                }
                None => {
                    out.push(bytes[i] as TokenId);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    /// Bytes of the text ids; end-of-sequence and audio ids are skipped.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            let i = id as usize;
            if i < 256 {
                out.push(i as u8);
            } else if i > 256 && i < self.t {
                if let Some(m) = self.merges.get(i - MIN_TEXT_VOCAB) {
                    out.extend_from_slice(m.as_bytes());
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Audio token indices (id - t) in order.
    pub fn audio_tokens(&self, ids: &[TokenId]) -> Vec<u32> {
        ids.iter()
            .filter(|&&id| self.is_audio(id))
            .map(|&id| id - self.t as TokenId)
            .collect()
    }

    /// Text manifest: the (t, a) split, the codebook pin and one merged token per line.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "t {}", self.t).unwrap();
        writeln!(s, "a {}", self.a).unwrap();
        if let Some(cb) = &self.audio_codebook {
            writeln!(s, "codebook {cb}").unwrap();
        }
        for m in &self.merges {
            writeln!(s, "merge {}", serde_json::to_string(m).unwrap()).unwrap();
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let (mut t, mut a, mut cb) = (None, None, None);
        let mut merges = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            let parse_count = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Format(format!("bad count {v:?}: {e}")))
            };
            match key {
                "t" => t = Some(parse_count(value)?),
                "a" => a = Some(parse_count(value)?),
                "codebook" => cb = Some(value.trim().to_string()),
                "merge" => merges.push(serde_json::from_str::<String>(value)?),
                other => return Err(Error::Format(format!("unknown manifest key {other:?}"))),
            }
        }
        let t = t.ok_or_else(|| Error::Format("manifest lacks t".into()))?;
        let a = a.ok_or_else(|| Error::Format("manifest lacks a".into()))?;
        if merges.len() > t - MIN_TEXT_VOCAB.min(t) {
            return Err(Error::Format("more merges than text vocabulary slots".into()));
        }
        let mut v = Self::with_merges(t, a, merges)?;
        v.audio_codebook = cb;
        Ok(v)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.manifest())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_manifest(&std::fs::read_to_string(path)?)
    }
}
