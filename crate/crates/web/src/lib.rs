//! Browser bindings for three small demos: log-mel spectrograms, the synthetic
//! speech language round trip (audio -> tokens -> transcript), and mixture
//! sampling weights as a function of the temperature exponent.
//!
//! The plain functions are what the native tests exercise; the `#[wasm_bindgen]`
//! wrappers only convert errors.

use serde::Serialize;
use sonotext::audio::{extract_features, FrameFeatureSequence, FrontendConfig, Waveform};
use sonotext::mixture::{component_weights, MixtureComponent, MixtureSpec};
use sonotext::quantizer::{tokenize, Codebook};
use sonotext::synth::{OracleTranscriber, Side, SynthLanguageSpec, SAMPLE_RATE};
use sonotext::tasks::Task;
use wasm_bindgen::prelude::*;

/// Row-major log-mel features, `frames x bins`.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

#[wasm_bindgen]
impl Spectrogram {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> Vec<f32> {
        self.data.clone()
    }
}

impl From<FrameFeatureSequence> for Spectrogram {
    fn from(f: FrameFeatureSequence) -> Self {
        Spectrogram {
            frames: f.num_frames,
            bins: f.dim,
            data: f.frames,
        }
    }
}

/// Log-mel features of a sum of equal-amplitude sines.
pub fn tone_mix(freqs_hz: &[f64], seconds: f64) -> Result<Spectrogram, String> {
    let cfg = FrontendConfig::default();
    let n = (seconds * cfg.sample_rate as f64).round() as usize;
    let amp = 0.9 / freqs_hz.len().max(1) as f64;
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / cfg.sample_rate as f64;
            freqs_hz
                .iter()
                .map(|f| amp * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum::<f64>() as f32
        })
        .collect();
    let wave = Waveform::new(samples, cfg.sample_rate).map_err(|e| e.to_string())?;
    Ok(extract_features(&wave, &cfg).map_err(|e| e.to_string())?.into())
}

/// Log-mel features of a 16 kHz mono WAV file.
pub fn wav_features(bytes: &[u8]) -> Result<Spectrogram, String> {
    let wave = Waveform::from_wav_bytes(bytes).map_err(|e| e.to_string())?;
    Ok(extract_features(&wave, &FrontendConfig::default())
        .map_err(|e| e.to_string())?
        .into())
}

#[wasm_bindgen(js_name = toneMix)]
pub fn tone_mix_js(freqs_hz: &[f64], seconds: f64) -> Result<Spectrogram, JsError> {
    tone_mix(freqs_hz, seconds).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = wavFeatures)]
pub fn wav_features_js(bytes: &[u8]) -> Result<Spectrogram, JsError> {
    wav_features(bytes).map_err(|e| JsError::new(&e))
}

/// Normalized sampling weights `count^alpha / sum`.
pub fn mixture_weights(counts: &[u32], alpha: f64) -> Result<Vec<f64>, String> {
    let spec = MixtureSpec {
        components: counts
            .iter()
            .enumerate()
            .map(|(i, &count)| MixtureComponent {
                dataset_id: format!("d{i}"),
                chain: vec![Task::Asr],
                count: count as usize,
                weight: None,
            })
            .collect(),
        alpha,
        seed: 0,
    };
    component_weights(&spec).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = mixtureWeights)]
pub fn mixture_weights_js(counts: &[u32], alpha: f64) -> Result<Vec<f64>, JsError> {
    mixture_weights(counts, alpha).map_err(|e| JsError::new(&e))
}

#[derive(Debug, Clone, Serialize)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    pub transcript: String,
    pub translation: String,
    pub frames: usize,
    pub bins: usize,
    pub features: Vec<f32>,
}

/// A generated source/target language pair with its own audio codebook.
#[wasm_bindgen]
pub struct SynthDemo {
    spec: SynthLanguageSpec,
    codebook: Codebook,
    asr: OracleTranscriber,
}

impl SynthDemo {
    pub fn build(vocab_size: usize, codebook_k: usize, seed: u64) -> Result<Self, String> {
        let spec = SynthLanguageSpec::generate(vocab_size, seed).map_err(|e| e.to_string())?;
        let codebook = spec.train_codebook(codebook_k, seed).map_err(|e| e.to_string())?;
        let asr = OracleTranscriber::new(&spec, &codebook, Side::Source).map_err(|e| e.to_string())?;
        Ok(SynthDemo { spec, codebook, asr })
    }

    /// Renders a source sentence, tokenizes it and transcribes the tokens back.
    pub fn utter(&self, sentence: &str) -> Result<Utterance, String> {
        let words = sentence
            .split_whitespace()
            .map(|w| {
                self.spec
                    .word_index(Side::Source, w)
                    .ok_or_else(|| format!("{w:?} is not a word of this language"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if words.is_empty() {
            return Err("type at least one word".into());
        }
        let wave = self.spec.render_sentence(Side::Source, &words);
        debug_assert_eq!(wave.sample_rate, SAMPLE_RATE);
        let feats = extract_features(&wave, &FrontendConfig::default()).map_err(|e| e.to_string())?;
        let seq = tokenize(&feats, &self.codebook).map_err(|e| e.to_string())?;
        let transcript = self.asr.transcribe_tokens(&seq.tokens);
        let translation = self.spec.translate(&transcript).unwrap_or_default();
        Ok(Utterance {
            tokens: seq.tokens,
            transcript,
            translation,
            frames: feats.num_frames,
            bins: feats.dim,
            features: feats.frames,
        })
    }
}

#[wasm_bindgen]
impl SynthDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<SynthDemo, JsError> {
        Self::build(16, 64, seed).map_err(|e| JsError::new(&e))
    }

    /// Source-language words, space separated.
    pub fn words(&self) -> String {
        self.spec.words(Side::Source).join(" ")
    }

    /// JSON: `{tokens, transcript, translation, frames, bins, features}`.
    #[wasm_bindgen(js_name = utter)]
    pub fn utter_js(&self, sentence: &str) -> Result<String, JsError> {
        let u = self.utter(sentence).map_err(|e| JsError::new(&e))?;
        Ok(serde_json::to_string(&u).expect("utterance serializes"))
    }
}
