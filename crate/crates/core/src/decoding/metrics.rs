//! Sequence metrics on token ids.

use std::collections::HashMap;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU in `[0, 100]` with up to `max_n`-grams.
///
/// Clipped precisions use the maximum count over references; the brevity
/// penalty uses the reference length closest to the hypothesis (shorter on
/// ties). Precisions for `n ≥ 2` whose match count is zero are smoothed to
/// `1 / (c_n + 1)`, where `c_n` is the number of hypothesis `n`-grams; a zero
/// unigram precision gives 0.
pub fn bleu(hypothesis: &[usize], references: &[&[usize]], max_n: usize) -> f64 {
    if hypothesis.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp = ngram_counts(hypothesis, n);
        let total: usize = hyp.values().sum();
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = hypothesis.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(hypothesis.len()), len))
        .expect("non-empty references") as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

/// Distinct `n`-grams over all candidates divided by the total number of
/// `n`-grams; 1 when no candidate is long enough to contain one.
pub fn diversity_ngram(candidates: &[&[usize]], n: usize) -> f64 {
    let mut distinct = std::collections::HashSet::new();
    let mut total = 0usize;
    for c in candidates {
        if c.len() >= n {
            for g in c.windows(n) {
                distinct.insert(g);
                total += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

/// Positional token accuracy: matches at equal positions over the longer
/// of the two lengths.
pub fn token_accuracy(hypothesis: &[usize], reference: &[usize]) -> f64 {
    let longest = hypothesis.len().max(reference.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = hypothesis.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / longest as f64
}

/// MBR risks `1 − BLEU(c, c′)/100` averaged over the other candidates.
/// A single candidate has risk 0.
pub fn mbr_risks(candidates: &[&[usize]]) -> Vec<f64> {
    let k = candidates.len();
    (0..k)
        .map(|i| {
            if k == 1 {
                return 0.0;
            }
            let sum: f64 =
                (0..k).filter(|&j| j != i).map(|j| 1.0 - bleu(candidates[i], &[candidates[j]], 4) / 100.0).sum();
            sum / (k - 1) as f64
        })
        .collect()
}

/// Index of the lowest-risk candidate, lowest index on ties.
pub fn mbr_index(risks: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &r) in risks.iter().enumerate() {
        if best.map_or(true, |(_, b)| r < b) {
            best = Some((i, r));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bleu_cases() {
        assert_eq!(bleu(&[1, 2, 3, 4, 5], &[&[1, 2, 3, 4, 5]], 4), 100.0);
        assert_eq!(bleu(&[7], &[&[7]], 4), 100.0);
        assert_eq!(bleu(&[], &[&[1, 2]], 4), 0.0);
        assert_eq!(bleu(&[9, 9], &[&[1, 2]], 4), 0.0);
        // p = 3/4, 2/3, 1/2 and smoothed 1/2; no brevity penalty
        let expected = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert_relative_eq!(bleu(&[1, 2, 3, 4], &[&[1, 2, 3, 5]], 4), expected, max_relative = 1e-12);
    }

    #[test]
    fn brevity_penalty() {
        // hypothesis is a prefix: all precisions 1, BP = exp(1 - 6/4)
        assert_relative_eq!(
            bleu(&[1, 2, 3, 4], &[&[1, 2, 3, 4, 5, 6]], 4),
            100.0 * (-0.5f64).exp(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn diversity_cases() {
        let a: &[usize] = &[1, 2, 3, 4, 5];
        assert_eq!(diversity_ngram(&[a], 4), 1.0);
        assert_relative_eq!(diversity_ngram(&[a, a, a], 4), 1.0 / 3.0);
        assert_eq!(diversity_ngram(&[a, &[6, 7, 8, 9]], 4), 1.0);
    }

    #[test]
    fn mbr_prefers_the_majority() {
        let a: &[usize] = &[4, 5, 6, 7, 8];
        let b: &[usize] = &[9, 5, 10, 7, 11];
        let risks = mbr_risks(&[a, a, b]);
        assert_eq!(mbr_index(&risks), Some(0));
        assert_eq!(mbr_index(&mbr_risks(&[b, a, a])), Some(1));
        assert_eq!(mbr_index(&mbr_risks(&[a, a, a])), Some(0));
        assert_eq!(mbr_risks(&[a]), vec![0.0]);
    }

    #[test]
    fn accuracy_counts_length_mismatch() {
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_accuracy(&[1, 2], &[1, 2, 3, 4]), 0.5);
    }
}
