//! Expression-level recognition metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Token edit distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Percentages over a set of (prediction, reference) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub exprate: f64,
    pub wer: f64,
    pub le1: f64,
    pub le2: f64,
    pub le3: f64,
    pub distances: Vec<usize>,
}

impl EvalReport {
    pub fn from_pairs<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<Self> {
        ensure!(!pairs.is_empty(), "cannot evaluate an empty set");
        let distances: Vec<usize> = pairs.iter().map(|(p, r)| levenshtein(p, r)).collect();
        let ref_tokens: usize = pairs.iter().map(|(_, r)| r.len()).sum();
        let n = pairs.len() as f64;
        let pct = |k: usize| 100.0 * distances.iter().filter(|&&d| d <= k).count() as f64 / n;
        let total: usize = distances.iter().sum();
        Ok(Self {
            samples: pairs.len(),
            exprate: pct(0),
            wer: 100.0 * total as f64 / ref_tokens.max(1) as f64,
            le1: pct(1),
            le2: pct(2),
            le3: pct(3),
            distances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_distances() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"abc", b""), 3);
        assert_eq!(levenshtein(b"flaw", b"lawn"), 2);
    }

    #[test]
    fn exact_predictions() {
        let a = [1, 2, 3];
        let r = EvalReport::from_pairs(&[(&a[..], &a[..]), (&a[..2], &a[..2])]).unwrap();
        assert_eq!((r.exprate, r.wer, r.le1, r.le2, r.le3), (100.0, 0.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn one_substitution() {
        let reference = [r"\frac", "1", "2"];
        let hyp = [r"\frac", "1", "3"];
        let r = EvalReport::from_pairs(&[(&hyp[..], &reference[..])]).unwrap();
        assert_eq!(r.distances, vec![1]);
        assert_eq!((r.exprate, r.le1), (0.0, 100.0));
        assert!((r.wer - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(EvalReport::from_pairs::<u8>(&[]).is_err());
    }
}
