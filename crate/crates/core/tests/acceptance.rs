//! Acceptance criteria, one test each, with tolerances and time budgets pinned here.
//!
//! Tests take a shared lock so their wall-clock budgets are measured without
//! competing for the CPU, and each writes a single `criterion N: PASS|FAIL` line
//! to stderr (bypassing the harness's output capture).

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{brute_force_bleu, dp_distance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sonotext::audio::{extract_features, FrameFeatureSequence, FrontendConfig, Waveform};
use sonotext::experiments::{
    decode_stages, evaluate_stage, expand, pretrain_text, run_suite_with, stage_text, AblationConfig, RunConfig, Suite,
    ToyWorld, WorldConfig,
};
use sonotext::metrics::{asr_bleu, char_errors, corpus_bleu, edit_distance, evaluate, word_errors, EvalCorpus, Metric};
use sonotext::mixture::{build_stream, DatasetRecord, MixtureComponent, MixtureSpec, RecordStore};
use sonotext::model::{
    loss_and_grad, surgery, train_step, Adafactor, Checkpoint, Mode, Model, ModelConfig, OptimConfig,
};
use sonotext::quantizer::{detokenize, tokenize, train_codebook, train_codebook_traced, AudioTokenSeq, KMeansParams};
use sonotext::synth::TARGET_LANGUAGE;
use sonotext::tasks::{find_stage, Task, TaskTag, TrainingExample};
use sonotext::vocab::TokenId;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, title: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {n}: {} {title} ({:.1}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Runs `body`, reports, and fails the test when any check failed or the budget was exceeded.
fn criterion(n: u32, title: &str, budget: Duration, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let (pass, detail) = match outcome {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over budget of {:.0}s", budget.as_secs_f64())),
        Err(e) => (false, e),
    };
    report(n, title, pass, elapsed, &detail);
    assert!(pass, "criterion {n} ({title}): {detail}");
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------

/// Spectrally varied audio: random tone clusters with noise, one per 200 ms.
fn varied_audio(seconds: f64, seed: u64) -> Waveform {
    let sr = 16_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sr as f64) as usize;
    let mut samples = vec![0f32; n];
    for seg in samples.chunks_mut(sr / 5) {
        let tones: Vec<(f64, f64)> = (0..rng.random_range(1..5))
            .map(|_| (rng.random_range(80.0..7500.0), rng.random_range(0.02..0.25)))
            .collect();
        let noise = rng.random_range(0.0..0.05);
        for (i, s) in seg.iter_mut().enumerate() {
            let t = i as f64 / sr as f64;
            let v: f64 = tones
                .iter()
                .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum();
            *s = (v + noise * rng.random_range(-1.0..1.0)) as f32;
        }
    }
    Waveform::new(samples, sr as u32).unwrap()
}

#[test]
fn criterion_1_token_rate() {
    let cfg = FrontendConfig::default();
    let params = KMeansParams {
        max_iters: 10,
        seed: 1,
        ..KMeansParams::default()
    };
    // Codebook training is setup, outside the timed region.
    let train_feats = extract_features(&varied_audio(60.0, 11), &cfg).unwrap();
    let cb = train_codebook(&[train_feats], &params).unwrap();
    let wave = varied_audio(10.0, 12);
    criterion(1, "token-rate contract", Duration::from_secs(1), || {
        check(params.k == 1024 && cb.k() == 1024, || {
            format!("codebook K = {}", cb.k())
        })?;
        check(wave.samples.len() == 160_000, || "wave is not 10.0 s".into())?;
        let feats = extract_features(&wave, &cfg).map_err(err)?;
        let toks = tokenize(&feats, &cb).map_err(err)?;
        check(toks.token_rate == 25.0, || format!("token rate {}", toks.token_rate))?;
        check(toks.tokens.len() == 248, || {
            format!("expected 248 tokens, got {}", toks.tokens.len())
        })?;
        Ok(format!("{} tokens at 25 Hz, K=1024", toks.tokens.len()))
    });
}

#[test]
fn criterion_2_surgery_invariance() {
    criterion(2, "surgery invariance", Duration::from_secs(10), || {
        let t = 300;
        let cfg = ModelConfig {
            text_vocab: t,
            dropout: 0.1,
            max_len: 128,
            ..ModelConfig::default()
        };
        let text = Model::<f32>::init(cfg, 3).map_err(err)?;
        let joint = surgery(&text, 1024).map_err(err)?;
        check(joint.step == 0, || "surgery changed the step".into())?;
        let v = joint.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..100 {
            let len = rng.random_range(1..64);
            let ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..t as u32)).collect();
            let a = text.forward(&ids, Mode::Eval, 0).map_err(err)?;
            let b = joint.forward(&ids, Mode::Eval, 0).map_err(err)?;
            for p in 0..len {
                let (ta, tb) = (&a[p * t..(p + 1) * t], &b[p * v..p * v + t]);
                check(ta.iter().zip(tb).all(|(x, y)| x.to_bits() == y.to_bits()), || {
                    format!("text logits differ (input {case}, position {p})")
                })?;
                check(b[p * v + t..(p + 1) * v].iter().all(|&x| x == 0.0), || {
                    format!("nonzero audio logit (input {case}, position {p})")
                })?;
            }
        }
        Ok("100 inputs bit-identical, audio logits 0".into())
    });
}

fn blobs(centers: &[Vec<f32>], per: usize, sigma: f64, seed: u64) -> Vec<FrameFeatureSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let dim = centers[0].len();
    let mut frames = Vec::new();
    for c in centers {
        for _ in 0..per {
            frames.extend(c.iter().map(|&x| x + noise.sample(&mut rng) as f32));
        }
    }
    frames
        .chunks(64 * dim)
        .map(|ch| FrameFeatureSequence::new(ch.to_vec(), dim, 25.0).unwrap())
        .collect()
}

fn centers(k: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect()
}

#[test]
fn criterion_3_quantizer_suite() {
    criterion(3, "quantizer suite", Duration::from_secs(60), || {
        for seed in 0..5 {
            let corpus = blobs(&centers(24, 16, 100 + seed), 50, 2.0, seed);
            let p = KMeansParams {
                k: 32,
                seed,
                ..KMeansParams::default()
            };
            let out = train_codebook_traced(&corpus, &p).map_err(err)?;
            for (i, w) in out.history.windows(2).enumerate() {
                check(w[1] <= w[0], || {
                    format!(
                        "corpus {seed}: distortion rose at iteration {} ({} -> {})",
                        i + 1,
                        w[0],
                        w[1]
                    )
                })?;
            }
        }
        let cb = train_codebook(
            &blobs(&centers(40, 16, 7), 20, 2.0, 8),
            &KMeansParams {
                k: 64,
                ..KMeansParams::default()
            },
        )
        .map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let len = rng.random_range(0..100);
            let seq = AudioTokenSeq {
                tokens: (0..len).map(|_| rng.random_range(0..64)).collect(),
                token_rate: 25.0,
                codebook_id: cb.id().to_string(),
            };
            let back = tokenize(&detokenize(&seq, &cb).map_err(err)?, &cb).map_err(err)?;
            check(back == seq, || "tokenize(detokenize(x)) != x".into())?;
        }
        let truth = centers(8, 6, 10);
        let cb = train_codebook(
            &blobs(&truth, 300, 0.05, 11),
            &KMeansParams {
                k: 8,
                seed: 3,
                ..KMeansParams::default()
            },
        )
        .map_err(err)?;
        let mut worst = 0f32;
        for c in &truth {
            let (i, _) = cb.nearest(c);
            let e = cb
                .centroid(i)
                .iter()
                .zip(c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f32>()
                .sqrt();
            worst = worst.max(e);
        }
        check(worst <= 0.05, || format!("blob center off by {worst}"))?;
        Ok(format!(
            "monotone on 5 corpora, 1000 round trips, worst center error {worst:.4}"
        ))
    });
}

fn random_example(rng: &mut ChaCha8Rng, vocab: usize, len: usize, prompt: usize) -> TrainingExample {
    TrainingExample {
        ids: (0..len).map(|_| rng.random_range(0..vocab as u32)).collect(),
        loss_mask: (0..len).map(|i| u8::from(i >= prompt)).collect(),
        stage_spans: Vec::new(),
        task: TaskTag::single(Task::Asr, "English", None).unwrap(),
    }
}

#[test]
fn criterion_4_gradient_check() {
    criterion(4, "gradient check", Duration::from_secs(120), || {
        let cfg = ModelConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            max_len: 32,
            dropout: 0.0,
            text_vocab: 32,
            audio_vocab: 0,
            ..ModelConfig::default()
        };
        let mut model = Model::<f64>::init(cfg, 1).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in &mut model.tensors {
            if t.shape.len() == 1 {
                t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
            }
        }
        let ex = random_example(&mut rng, 32, 14, 5);
        let (_, grads) = model.loss_and_gradients(&ex, Mode::Eval, 0).map_err(err)?;
        let h = 1e-5;
        let mut worst = (0.0f64, String::new());
        for ti in 0..model.tensors.len() {
            let mut num = vec![0.0; grads.tensors[ti].len()];
            for (j, slot) in num.iter_mut().enumerate() {
                let orig = model.tensors[ti].data[j];
                model.tensors[ti].data[j] = orig + h;
                let up = model.loss_and_gradients(&ex, Mode::Eval, 0).map_err(err)?.0;
                model.tensors[ti].data[j] = orig - h;
                let down = model.loss_and_gradients(&ex, Mode::Eval, 0).map_err(err)?.0;
                model.tensors[ti].data[j] = orig;
                *slot = (up - down) / (2.0 * h);
            }
            let g = &grads.tensors[ti];
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = g.iter().zip(&num).map(|(a, b)| a - b).collect();
            let scale = norm(g).max(norm(&num));
            let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
            if rel > worst.0 {
                worst = (rel, model.tensors[ti].name.clone());
            }
            check(rel <= 1e-3, || {
                format!("{}: relative error {rel:e}", model.tensors[ti].name)
            })?;
        }
        // Masked positions: logit gradient rows without a target are exactly zero.
        let logits: Vec<f64> = (0..14 * 32).map(|_| rng.random_range(-4.0..4.0)).collect();
        let (_, dl) = loss_and_grad(&logits, 32, &ex).map_err(err)?;
        for r in (0..4).chain([13]) {
            check(dl[r * 32..(r + 1) * 32].iter().all(|&x| x == 0.0), || {
                format!("row {r} has gradient")
            })?;
        }
        Ok(format!(
            "{} tensors, worst relative error {:.2e} ({})",
            model.tensors.len(),
            worst.0,
            worst.1
        ))
    });
}

/// Sequences of length `len` over `0..4`, as base-4 digits of `code`.
fn decode_seq(code: u32, len: usize, out: &mut [u8; 12]) {
    let mut c = code;
    for slot in out.iter_mut().take(len) {
        *slot = (c % 4) as u8;
        c /= 4;
    }
}

#[test]
fn criterion_5_metric_oracles() {
    criterion(5, "metric oracles", Duration::from_secs(60), || {
        // BLEU against the brute-force oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words = ["a", "b", "c", "d", "e", "f", "g"];
        let mut worst = 0f64;
        for _ in 0..20 {
            let sent = |rng: &mut ChaCha8Rng| {
                let n = rng.random_range(0..15);
                (0..n)
                    .map(|_| words[rng.random_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let pairs: Vec<(String, String)> = (0..rng.random_range(1..30))
                .map(|_| (sent(&mut rng), sent(&mut rng)))
                .collect();
            let got = corpus_bleu(&EvalCorpus::new(pairs.clone(), "English").map_err(err)?).map_err(err)?;
            let want = brute_force_bleu(&pairs);
            worst = worst.max((got - want).abs());
            check((got - want).abs() <= 1e-6, || format!("BLEU {got} vs oracle {want}"))?;
        }
        // Edit distance: every pair over a 4-symbol alphabet with combined length <= 12.
        let (mut a, mut b) = ([0u8; 12], [0u8; 12]);
        let mut pairs = 0u64;
        for la in 0..=12usize {
            for lb in 0..=12 - la {
                for ca in 0..4u32.pow(la as u32) {
                    decode_seq(ca, la, &mut a);
                    for cb in 0..4u32.pow(lb as u32) {
                        decode_seq(cb, lb, &mut b);
                        let (x, y) = (&a[..la], &b[..lb]);
                        let got = edit_distance(x, y);
                        let want = common::dp_distance_fixed(x, y);
                        if got != want {
                            return Err(format!("{x:?} vs {y:?}: {got} != {want}"));
                        }
                        pairs += 1;
                    }
                }
            }
        }
        // The metric entry points, on every pair with combined length <= 6.
        let sym = ["a", "b", "c", "d"];
        for la in 0..=6usize {
            for lb in 0..=6 - la {
                for ca in 0..4u32.pow(la as u32) {
                    decode_seq(ca, la, &mut a);
                    let r_words: Vec<&str> = a[..la].iter().map(|&s| sym[s as usize]).collect();
                    for cb in 0..4u32.pow(lb as u32) {
                        decode_seq(cb, lb, &mut b);
                        let h_words: Vec<&str> = b[..lb].iter().map(|&s| sym[s as usize]).collect();
                        let c =
                            EvalCorpus::new(vec![(h_words.join(" "), r_words.join(" "))], "English").map_err(err)?;
                        let w = word_errors(&c);
                        check(
                            w.edits as usize == dp_distance(&r_words, &h_words) && w.reference_len as usize == la,
                            || format!("WER counts {w:?} for {r_words:?} / {h_words:?}"),
                        )?;
                        let rc: Vec<char> = r_words.join(" ").chars().collect();
                        let hc: Vec<char> = h_words.join(" ").chars().collect();
                        let ch = char_errors(&c);
                        check(ch.edits as usize == dp_distance(&rc, &hc), || {
                            format!("CER counts {ch:?} for {rc:?} / {hc:?}")
                        })?;
                    }
                }
            }
        }
        // Identity corpora.
        let ident = EvalCorpus::new(
            vec![
                ("the quick brown fox jumps".into(), "the quick brown fox jumps".into()),
                ("over the lazy dog today".into(), "over the lazy dog today".into()),
            ],
            "English",
        )
        .map_err(err)?;
        let bleu = evaluate(&ident, Metric::Bleu).map_err(err)?.score;
        let wer = evaluate(&ident, Metric::Wer).map_err(err)?.score;
        check((bleu - 100.0).abs() < 1e-9 && wer == 0.0, || {
            format!("identity BLEU {bleu}, WER {wer}")
        })?;
        Ok(format!(
            "BLEU worst |diff| {worst:.1e} on 20 corpora; {pairs} edit-distance pairs exact"
        ))
    });
}

fn record(id: &str, i: usize) -> DatasetRecord {
    DatasetRecord {
        audio: Some(AudioTokenSeq {
            tokens: vec![(i % 16) as u32, (i / 16 % 16) as u32],
            token_rate: 25.0,
            codebook_id: "cb".into(),
        }),
        transcript: Some(format!("{id} {i}")),
        translated_audio: None,
        translated_transcript: None,
        source_language: "English".into(),
        target_language: None,
        dataset_id: id.into(),
    }
}

#[test]
fn criterion_6_mixture_proportions() {
    criterion(6, "mixture proportions", Duration::from_secs(30), || {
        let store = RecordStore::from_records(
            (0..100)
                .map(|i| record("small", i))
                .chain((0..400).map(|i| record("large", i))),
        );
        let vocab = sonotext::vocab::JointVocabulary::new(300, 16)
            .map_err(err)?
            .with_codebook("cb");
        let comp = |id: &str, count| MixtureComponent {
            dataset_id: id.into(),
            chain: vec![Task::Asr],
            count,
            weight: None,
        };
        // sqrt(100) : sqrt(400) = 1 : 2.
        let spec = MixtureSpec {
            components: vec![comp("small", 100), comp("large", 400)],
            alpha: 0.5,
            seed: 17,
        };
        let n = 100_000;
        let mut counts = [0usize; 2];
        let mut bytes = Vec::new();
        for item in build_stream(&spec, &store, &vocab).map_err(err)?.take(n) {
            counts[item.component] += 1;
            bytes.extend(serde_json::to_vec(&item.example).unwrap());
        }
        let f = [counts[0] as f64 / n as f64, counts[1] as f64 / n as f64];
        check(
            (f[0] - 1.0 / 3.0).abs() <= 0.01 && (f[1] - 2.0 / 3.0).abs() <= 0.01,
            || format!("frequencies {f:?}"),
        )?;
        let mut again = Vec::new();
        for item in build_stream(&spec, &store, &vocab).map_err(err)?.take(n) {
            again.extend(serde_json::to_vec(&item.example).unwrap());
        }
        check(bytes == again, || "two runs differ".into())?;
        // Four consumers on threads, merged back in draw order.
        let shards: Vec<Vec<Vec<u8>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..4u64)
                .map(|k| {
                    let (spec, store, vocab) = (&spec, &store, &vocab);
                    s.spawn(move || {
                        build_stream(spec, store, vocab)
                            .unwrap()
                            .shard(k, 4)
                            .take(n / 4)
                            .map(|i| serde_json::to_vec(&i.example).unwrap())
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let merged: Vec<u8> = (0..n).flat_map(|d| shards[d % 4][d / 4].clone()).collect();
        check(merged == bytes, || "1 vs 4 consumers differ".into())?;
        Ok(format!(
            "frequencies ({:.4}, {:.4}); streams byte-identical",
            f[0], f[1]
        ))
    });
}

fn toy_world(seed: u64) -> ToyWorld {
    ToyWorld::build(&WorldConfig {
        vocab_size: 16,
        max_words: 4,
        train_records: 1000,
        test_records: 100,
        codebook_k: 64,
        seed,
    })
    .unwrap()
}

#[test]
fn criterion_7_toy_asr() {
    const TARGET: f64 = 0.90;
    criterion(7, "end-to-end toy ASR", Duration::from_secs(30 * 60), || {
        let world = toy_world(7);
        let base = ModelConfig {
            layers: 2,
            dim: 128,
            heads: 4,
            ffn_dim: 512,
            max_len: 256,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let run = RunConfig {
            steps: 300,
            seed: 7,
            ..RunConfig::default()
        };
        let text = pretrain_text(&world, &base, &run).map_err(err)?;
        let mut model: Checkpoint = expand(&world, &text).map_err(err)?;
        let store = world.store();
        let spec = MixtureSpec::from_store(&store, &[vec![Task::Asr]], 1.0, 7);
        let mut stream = build_stream(&spec, &store, &world.vocab)
            .map_err(err)?
            .map(|i| i.example);
        let mut opt = Adafactor::new(
            OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            &model,
        );
        let started = Instant::now();
        let mut last = 0.0;
        for step in 1..=20_000u64 {
            let batch: Vec<_> = stream.by_ref().take(16).collect();
            train_step(&mut model, &mut opt, &batch, 7).map_err(err)?;
            if step % 250 == 0 {
                last = evaluate_stage(&model, &world, &[Task::Asr], Task::Asr, 100)
                    .map_err(err)?
                    .exact;
                if last >= TARGET {
                    return Ok(format!("held-out exact match {last:.2} after {step} steps"));
                }
                if started.elapsed() > Duration::from_secs(30 * 60) {
                    break;
                }
            }
        }
        Err(format!("held-out exact match {last:.2} below {TARGET}"))
    });
}

#[test]
fn criterion_8_ablation_directions() {
    criterion(8, "ablation directions", Duration::from_secs(2 * 3600), || {
        let cfg = ablation_config();
        let mut summary = Vec::new();
        let mut failed = Vec::new();
        for suite in Suite::ALL {
            let report = run_suite_with(suite, &cfg, |_| {}).map_err(err)?;
            let _ = std::io::stderr().write_all(report.table().as_bytes());
            summary.push(format!("{} {}/{}", suite.name(), report.agreeing, report.rows.len()));
            if !report.direction_holds {
                failed.push(suite.name());
            }
        }
        check(failed.is_empty(), || {
            format!("direction does not hold for {failed:?} ({})", summary.join(", "))
        })?;
        Ok(summary.join(", "))
    });
}

fn ablation_config() -> AblationConfig {
    let mut cfg = AblationConfig::default();
    cfg.finetune.steps = 1000;
    cfg
}

#[test]
fn criterion_9_asr_bleu_harness() {
    criterion(9, "ASR-BLEU harness", Duration::from_secs(5 * 60), || {
        let world = toy_world(9);
        // Ground-truth target audio scores 100.
        let refs: Vec<String> = world
            .test
            .iter()
            .map(|r| r.translated_transcript.clone().unwrap())
            .collect();
        let audio: Vec<AudioTokenSeq> = world.test.iter().map(|r| r.translated_audio.clone().unwrap()).collect();
        let gt = asr_bleu(
            &EvalCorpus::from_parallel(audio, refs.clone(), TARGET_LANGUAGE).map_err(err)?,
            &world.target_asr,
        )
        .map_err(err)?;
        check(gt.complete() && (gt.score - 100.0).abs() < 1e-9, || {
            format!("ground truth ASR-BLEU {}", gt.score)
        })?;

        let base = ModelConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            max_len: 256,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let text = pretrain_text(
            &world,
            &base,
            &RunConfig {
                steps: 300,
                seed: 9,
                ..RunConfig::default()
            },
        )
        .map_err(err)?;
        // Trained on the chain that is decoded below.
        let full = [Task::Asr, Task::Ast, Task::S2st];
        let model = sonotext::experiments::train_on(
            &world,
            expand(&world, &text).map_err(err)?,
            &[full.to_vec()],
            &RunConfig {
                steps: 2000,
                seed: 9,
                ..RunConfig::default()
            },
        )
        .map_err(err)?;
        let (mut ast_hyps, mut s2st_audio, mut used) = (Vec::new(), Vec::new(), Vec::new());
        for (r, reference) in world.test.iter().zip(&refs).take(60) {
            let segs = decode_stages(&model, &world, r, &full).map_err(err)?;
            let ast = find_stage(&segs, Task::Ast)
                .and_then(|s| stage_text(&world, s, Task::Ast))
                .unwrap_or_default();
            let tokens = find_stage(&segs, Task::S2st)
                .map(|s| s.audio_tokens(&world.vocab))
                .unwrap_or_default();
            ast_hyps.push(ast);
            s2st_audio.push(AudioTokenSeq {
                tokens,
                token_rate: 25.0,
                codebook_id: world.codebook.id().to_string(),
            });
            used.push(reference.clone());
        }
        let text_bleu = corpus_bleu(&EvalCorpus::from_parallel(ast_hyps, used.clone(), TARGET_LANGUAGE).map_err(err)?)
            .map_err(err)?;
        let speech = asr_bleu(
            &EvalCorpus::from_parallel(s2st_audio, used, TARGET_LANGUAGE).map_err(err)?,
            &world.target_asr,
        )
        .map_err(err)?;
        let gap = (speech.score - text_bleu).abs();
        check(gap <= 2.0, || {
            format!("S2ST ASR-BLEU {:.2} vs AST-stage BLEU {text_bleu:.2}", speech.score)
        })?;
        Ok(format!(
            "ground truth 100.00; S2ST ASR-BLEU {:.2} vs AST-stage BLEU {text_bleu:.2}",
            speech.score
        ))
    });
}
