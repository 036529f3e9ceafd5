//! Reference implementations used only by tests. Written for clarity, not speed,
//! and deliberately unlike the library code paths they check.

#![allow(dead_code)]

/// Textbook Levenshtein distance with a full (n+1) x (m+1) table.
pub fn dp_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// All n-grams of `words` as owned vectors, in order, duplicates kept.
fn ngrams(words: &[&str], n: usize) -> Vec<Vec<String>> {
    if words.len() < n {
        return Vec::new();
    }
    (0..=words.len() - n)
        .map(|i| words[i..i + n].iter().map(|w| w.to_string()).collect())
        .collect()
}

/// Corpus BLEU over whitespace-tokenized sentences: clipped n-gram matches up to
/// order four, exponential smoothing of zero-match orders, brevity penalty.
///
/// Counting is brute force: every distinct hypothesis n-gram is counted in both
/// sides by linear scan.
pub fn brute_force_bleu(pairs: &[(String, String)]) -> f64 {
    let mut correct = [0u64; 4];
    let mut total = [0u64; 4];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (h, r) in pairs {
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        hyp_len += hw.len() as u64;
        ref_len += rw.len() as u64;
        for n in 1..=4 {
            let hg = ngrams(&hw, n);
            let rg = ngrams(&rw, n);
            total[n - 1] += hg.len() as u64;
            let mut seen: Vec<&Vec<String>> = Vec::new();
            for g in &hg {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_h = hg.iter().filter(|x| *x == g).count();
                let in_r = rg.iter().filter(|x| *x == g).count();
                correct[n - 1] += in_h.min(in_r) as u64;
            }
        }
    }
    if correct.iter().sum::<u64>() == 0 {
        return 0.0;
    }
    let mut product = 1.0f64;
    let mut halvings = 0;
    for n in 0..4 {
        if total[n] == 0 {
            // An order with no hypothesis n-grams contributes a zero precision.
            return 0.0;
        }
        let p = if correct[n] == 0 {
            halvings += 1;
            1.0 / (2f64.powi(halvings) * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
        product *= p;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * product.powf(0.25)
}

/// The same table as [`dp_distance`] on the stack, for sequences of at most 12 items.
pub fn dp_distance_fixed(a: &[u8], b: &[u8]) -> usize {
    let mut d = [[0u8; 13]; 13];
    for i in 0..=a.len() {
        d[i][0] = i as u8;
    }
    for j in 0..=b.len() {
        d[0][j] = j as u8;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + u8::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()] as usize
}
