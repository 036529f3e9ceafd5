mod common;

use common::{brute_force_bleu, dp_distance};
use proptest::prelude::*;
use sonotext::metrics::{corpus_bleu, edit_distance, evaluate, normalize, tokenize_13a, wer, EvalCorpus, Metric};

fn corpus(pairs: &[(&str, &str)]) -> EvalCorpus {
    EvalCorpus::new(
        pairs.iter().map(|(h, r)| (h.to_string(), r.to_string())).collect(),
        "English",
    )
    .unwrap()
}

/// Scores produced by the reference `sacrebleu` 2.6.0 `corpus_bleu` with its defaults.
#[test]
fn matches_reference_tool_scores() {
    let cases: &[(&[(&str, &str)], f64)] = &[
        (&[("The cat sat on the mat.", "The cat sat on the mat.")], 100.0),
        (
            &[("the cat is on the mat", "there is a cat on the mat")],
            29.05925408079185,
        ),
        (
            &[
                (
                    "Hello, world! It's 3.5 degrees.",
                    "Hello world! It is 3.5 degrees today.",
                ),
                ("a b", "a b c d"),
            ],
            13.929616460552124,
        ),
        (
            &[("one two three four five", "one two three four six"), ("x y", "x y z")],
            59.939541538078124,
        ),
        (&[("completely different words here", "nothing matches at all")], 0.0),
        (&[("the the the the", "the cat")], 15.97357760615681),
        (
            &[(
                "Dr. Smith paid $1,000.50 (approx)!",
                "Dr Smith paid $1,000.50 approximately!",
            )],
            29.071536848410968,
        ),
    ];
    for (pairs, want) in cases {
        let got = corpus_bleu(&corpus(pairs)).unwrap();
        assert!((got - want).abs() < 1e-9, "{pairs:?}: {got} vs {want}");
    }
    assert_eq!(
        tokenize_13a("Dr. Smith paid $1,000.50 (approx)! It's 3.5-ish"),
        ["Dr", ".", "Smith", "paid", "$", "1,000.50", "(", "approx", ")", "!", "It's", "3.5", "-", "ish"]
    );
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 0..9).prop_map(|w| w.join(" "))
}

fn pairs() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((sentence(), sentence()), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn bleu_agrees_with_brute_force(p in pairs()) {
        let c = EvalCorpus::new(p.clone(), "English").unwrap();
        let got = corpus_bleu(&c).unwrap();
        prop_assert!((0.0..=100.0).contains(&got));
        prop_assert!((got - brute_force_bleu(&p)).abs() < 1e-6, "{} vs {}", got, brute_force_bleu(&p));
    }

    #[test]
    fn duplicating_the_corpus_keeps_bleu_when_every_order_matches(p in pairs()) {
        let once = corpus_bleu(&EvalCorpus::new(p.clone(), "English").unwrap()).unwrap();
        let twice: Vec<_> = p.iter().chain(&p).cloned().collect();
        let twice = corpus_bleu(&EvalCorpus::new(twice, "English").unwrap()).unwrap();
        // With a zero-match order the smoothed precision is 1/(2^k total), which does
        // not scale with duplication; every other term is a ratio of counts.
        let smoothed = (1..=4).any(|order| {
            let (mut hits, mut total) = (0, 0);
            for (h, r) in &p {
                let hw: Vec<&str> = h.split_whitespace().collect();
                let rw: Vec<&str> = r.split_whitespace().collect();
                for g in hw.windows(order) {
                    total += 1;
                    hits += usize::from(rw.windows(order).any(|x| x == g));
                }
            }
            total > 0 && hits == 0
        });
        if !smoothed {
            prop_assert!((once - twice).abs() < 1e-9, "{} vs {}", once, twice);
        }
    }

    #[test]
    fn edit_distance_agrees_with_full_table(
        a in prop::collection::vec(0u8..6, 0..40),
        b in prop::collection::vec(0u8..6, 0..40),
    ) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, dp_distance(&a, &b));
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert!(d >= a.len().abs_diff(b.len()));
    }
}

#[test]
fn wer_normalizes_case_then_punctuation_then_splits() {
    // "Don't" -> "don't" -> "dont"; "END." -> "end".
    assert_eq!(normalize("Don't STOP, now... END."), "dont stop now end");
    let c = corpus(&[("dont stop now end", "Don't STOP, now... END.")]);
    assert_eq!(wer(&c).unwrap(), 0.0);
    // BLEU sees the raw strings.
    assert!(corpus_bleu(&c).unwrap() < 100.0);
}

#[test]
fn identity_scores() {
    let c = corpus(&[
        ("a quick brown fox jumps", "a quick brown fox jumps"),
        ("over the lazy dog", "over the lazy dog"),
    ]);
    assert!((evaluate(&c, Metric::Bleu).unwrap().score - 100.0).abs() < 1e-9);
    assert_eq!(evaluate(&c, Metric::Wer).unwrap().score, 0.0);
    assert_eq!(evaluate(&c, Metric::Cer).unwrap().score, 0.0);
}
