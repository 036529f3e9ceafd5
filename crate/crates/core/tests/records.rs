use proptest::prelude::*;
use proptest::strategy::ValueTree;
use sonotext::mixture::{build_stream, derive_tasks, DatasetRecord, MixtureComponent, MixtureSpec, RecordStore};
use sonotext::quantizer::AudioTokenSeq;
use sonotext::tasks::{parse_stages, serialize_example_styled, stage_output_ids, TagStyle, Task, TaskTag};
use sonotext::vocab::{JointVocabulary, Token};

const CB: &str = "cb0";
const LANGS: [&str; 4] = ["English", "French", "German", "Japanese"];

fn vocab() -> JointVocabulary {
    JointVocabulary::new(300, 64).unwrap().with_codebook(CB)
}

fn audio() -> impl Strategy<Value = AudioTokenSeq> {
    prop::collection::vec(0u32..64, 1..40).prop_map(|tokens| AudioTokenSeq {
        tokens,
        token_rate: 25.0,
        codebook_id: CB.into(),
    })
}

fn text() -> impl Strategy<Value = String> {
    "[a-z0-9 ,.!?'éüß]{1,40}"
}

/// Records with every field, languages distinct.
fn full_record() -> impl Strategy<Value = DatasetRecord> {
    (audio(), text(), audio(), text(), 0usize..4, 1usize..4).prop_map(|(a, t, ta, tt, s, off)| DatasetRecord {
        audio: Some(a),
        transcript: Some(t),
        translated_audio: Some(ta),
        translated_transcript: Some(tt),
        source_language: LANGS[s].into(),
        target_language: Some(LANGS[(s + off) % 4].into()),
        dataset_id: "d".into(),
    })
}

/// `full` with the fields selected by `mask` removed.
fn strip(full: &DatasetRecord, mask: u8) -> DatasetRecord {
    let mut r = full.clone();
    if mask & 1 != 0 {
        r.audio = None;
    }
    if mask & 2 != 0 {
        r.transcript = None;
    }
    if mask & 4 != 0 {
        r.translated_audio = None;
    }
    if mask & 8 != 0 {
        r.translated_transcript = None;
    }
    if r.translated_audio.is_none() && r.translated_transcript.is_none() {
        r.target_language = None;
    }
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn serialized_examples_round_trip_through_parse_stages(rec in full_record()) {
        let v = vocab();
        for tag in derive_tasks(&rec) {
            let ex = serialize_example_styled(&rec, &tag, &v, TagStyle::Bracket).unwrap();
            ex.validate(&v).unwrap();
            // Step-shaped mask.
            let p = ex.prompt_len();
            prop_assert!(p > 0 && ex.loss_mask[p..].iter().all(|&m| m == 1));
            // Every id is in range and classified by range alone.
            for &id in &ex.ids {
                prop_assert!((id as usize) < v.total());
                prop_assert_eq!(matches!(v.classify(id).unwrap(), Token::Audio(_)), id as usize >= v.text_size());
            }
            let mut target = ex.ids[p..].to_vec();
            prop_assert_eq!(target.pop(), Some(v.eos()));
            let segs = parse_stages(&target, &v, tag.chain()).unwrap();
            prop_assert_eq!(segs.len(), tag.chain().len());
            for (seg, &stage) in segs.iter().zip(tag.chain()) {
                prop_assert_eq!(seg.stage, stage);
                prop_assert_eq!(&seg.content, &stage_output_ids(&rec, stage, &tag, &v).unwrap());
            }
        }
    }

    #[test]
    fn alias_and_bracket_examples_differ_only_in_the_tag(rec in full_record()) {
        let v = vocab();
        for tag in derive_tasks(&rec) {
            let b = serialize_example_styled(&rec, &tag, &v, TagStyle::Bracket).unwrap();
            let a = serialize_example_styled(&rec, &tag, &v, TagStyle::Alias).unwrap();
            let (lb, la) = (v.encode(&tag.render()).len(), v.encode(&tag.render_alias()).len());
            prop_assert_eq!(&b.ids[lb..], &a.ids[la..]);
            prop_assert_eq!(&b.loss_mask[lb..], &a.loss_mask[la..]);
            prop_assert_eq!(TaskTag::parse(&tag.render_alias()).unwrap(), tag.clone());
        }
    }

    #[test]
    fn adding_a_field_never_removes_a_task(rec in full_record(), mask in 0u8..16, bit in 0u8..4) {
        let smaller = strip(&rec, mask);
        let larger = strip(&rec, mask & !(1 << bit));
        let small: Vec<String> = derive_tasks(&smaller).iter().map(|t| t.render()).collect();
        let large: Vec<String> = derive_tasks(&larger).iter().map(|t| t.render()).collect();
        for t in &small {
            prop_assert!(large.contains(t), "{} lost when adding field {}", t, bit);
        }
    }
}

#[test]
fn tag_rendering_is_injective_and_parses_back() {
    use std::collections::HashSet;
    let chains: Vec<Vec<Task>> = vec![
        vec![Task::Asr],
        vec![Task::Ast],
        vec![Task::S2st],
        vec![Task::Tts],
        vec![Task::Mt],
        vec![Task::Asr, Task::Ast],
        vec![Task::Asr, Task::Ast, Task::S2st],
    ];
    let mut rendered = HashSet::new();
    let mut count = 0;
    for chain in &chains {
        for src in LANGS {
            for tgt in std::iter::once(None).chain(LANGS.iter().map(|l| Some(l.to_string()))) {
                if let Ok(tag) = TaskTag::new(chain.clone(), src, tgt) {
                    count += 1;
                    assert!(rendered.insert(tag.render()), "duplicate {}", tag.render());
                    assert_eq!(TaskTag::parse(&tag.render()).unwrap(), tag);
                }
            }
        }
    }
    // Two same-language chains over 4 sources; five translating chains over 4 x 4 pairs.
    assert_eq!(count, 2 * 4 + 5 * 16);
}

fn store(n: usize) -> RecordStore {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strat = full_record();
    RecordStore::from_records((0..n).map(|i| {
        let mut r = strat.new_tree(&mut runner).unwrap().current();
        r.dataset_id = if i % 3 == 0 { "small".into() } else { "big".into() };
        r
    }))
}

fn spec(seed: u64) -> MixtureSpec {
    let comp = |id: &str, chain: Vec<Task>, count| MixtureComponent {
        dataset_id: id.into(),
        chain,
        count,
        weight: None,
    };
    MixtureSpec {
        components: vec![
            comp("big", vec![Task::Asr], 400),
            comp("big", vec![Task::Asr, Task::Ast], 400),
            comp("small", vec![Task::Mt], 100),
            comp("small", vec![Task::S2st], 100),
        ],
        alpha: 0.5,
        seed,
    }
}

#[test]
fn every_streamed_example_validates() {
    let (s, v) = (store(60), vocab());
    for item in build_stream(&spec(1), &s, &v).unwrap().take(2000) {
        item.example.validate(&v).unwrap();
    }
}

#[test]
fn shards_partition_the_stream() {
    let (s, v) = (store(60), vocab());
    let whole: Vec<_> = build_stream(&spec(2), &s, &v)
        .unwrap()
        .take(400)
        .map(|i| i.example)
        .collect();
    let mut shards: Vec<_> = (0..4)
        .map(|k| build_stream(&spec(2), &s, &v).unwrap().shard(k, 4).map(|i| i.example))
        .collect();
    let merged: Vec<_> = (0..400).map(|d| shards[d % 4].next().unwrap()).collect();
    assert_eq!(whole, merged);
}

#[test]
fn no_component_is_starved() {
    let (s, v) = (store(60), vocab());
    let stream = build_stream(&spec(3), &s, &v).unwrap();
    let probs = stream.probabilities().to_vec();
    let pmin = probs.iter().cloned().fold(1.0, f64::min);
    let window = (100.0 / pmin).ceil() as usize;
    // A component of probability p is absent from a window of 100/p draws with
    // probability (1-p)^(100/p) < e^-100.
    let draws: Vec<usize> = stream.take(20 * window).map(|i| i.component).collect();
    for w in draws.windows(window).step_by(window / 4) {
        for c in 0..probs.len() {
            assert!(w.contains(&c), "component {c} missing from a window of {window}");
        }
    }
}
