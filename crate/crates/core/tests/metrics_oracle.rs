//! Recognition metrics against a full-matrix edit-distance oracle.

use densebam::metrics::{levenshtein, EvalReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dp_oracle(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

/// References of 0..20 tokens, predictions made from them by 0..6 random
/// edits, plus a few hand-picked corner cases.
fn crafted_pairs() -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = vec![
        (vec![], vec![1]),
        (vec![1, 2, 3], vec![3, 2, 1]),
        (vec![1; 10], vec![2; 10]),
        (vec![1, 2, 3, 4], vec![1, 2, 3, 4]),
        (vec![5], vec![5, 5, 5, 5]),
    ];
    while pairs.len() < 200 {
        let len = rng.random_range(1..20);
        let reference: Vec<u8> = (0..len).map(|_| rng.random_range(0..8)).collect();
        let mut pred = reference.clone();
        for _ in 0..rng.random_range(0..6) {
            let op = rng.random_range(0..3);
            if op == 0 || pred.is_empty() {
                let at = rng.random_range(0..=pred.len());
                pred.insert(at, rng.random_range(0..8));
            } else if op == 1 {
                let at = rng.random_range(0..pred.len());
                pred.remove(at);
            } else {
                let at = rng.random_range(0..pred.len());
                pred[at] = rng.random_range(0..8);
            }
        }
        pairs.push((pred, reference));
    }
    pairs
}

#[test]
fn report_matches_the_oracle_on_200_crafted_pairs() {
    let pairs = crafted_pairs();
    assert_eq!(pairs.len(), 200);
    let refs: Vec<(&[u8], &[u8])> = pairs.iter().map(|(p, r)| (&p[..], &r[..])).collect();
    let report = EvalReport::from_pairs(&refs).unwrap();

    let d: Vec<usize> = pairs.iter().map(|(p, r)| dp_oracle(p, r)).collect();
    assert_eq!(report.distances, d);
    let n = pairs.len() as f64;
    let within = |k: usize| 100.0 * d.iter().filter(|&&x| x <= k).count() as f64 / n;
    assert_eq!(report.samples, 200);
    assert_eq!(report.exprate, within(0));
    assert_eq!(report.le1, within(1));
    assert_eq!(report.le2, within(2));
    assert_eq!(report.le3, within(3));
    let ref_tokens: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    assert_eq!(report.wer, 100.0 * d.iter().sum::<usize>() as f64 / ref_tokens as f64);
    // The set mixes exact, near and far predictions.
    assert!(report.exprate > 0.0 && report.le3 < 100.0);
    assert!(report.exprate <= report.le1 && report.le1 <= report.le2 && report.le2 <= report.le3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_matches_oracle(a in prop::collection::vec(0u8..5, 0..15), b in prop::collection::vec(0u8..5, 0..15)) {
        prop_assert_eq!(levenshtein(&a, &b), dp_oracle(&a, &b));
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
    }

    #[test]
    fn nesting_holds_on_every_report(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..4, 0..8), prop::collection::vec(0u8..4, 1..8)),
            1..30,
        ),
    ) {
        let refs: Vec<(&[u8], &[u8])> = pairs.iter().map(|(p, r)| (&p[..], &r[..])).collect();
        let r = EvalReport::from_pairs(&refs).unwrap();
        prop_assert!(r.exprate <= r.le1 && r.le1 <= r.le2 && r.le2 <= r.le3 && r.le3 <= 100.0);
        prop_assert!(r.exprate >= 0.0 && r.wer >= 0.0);
    }
}
