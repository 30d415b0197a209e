//! Slow reference implementations used to cross-check the fast paths.
//!
//! Nothing here shares code with the production routines it checks; the
//! `selftest` subcommand and the test suites compare the two.

use crate::conformal::Threshold;

/// `inf{t : F̂(t) ≥ level}` by scanning every candidate value; `FullSet` when
/// no sample value reaches the level.
pub fn brute_force_quantile(scores: &[f64], level: f64) -> Threshold {
    let n = scores.len() as f64;
    let mut candidates = scores.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    for t in candidates {
        let count = scores.iter().filter(|&&s| s <= t).count() as f64;
        // compare counts, not ratios, to stay exact: count/n ≥ level
        if count >= level * n - 1e-9 {
            return Threshold::Finite(t);
        }
    }
    Threshold::FullSet
}

/// Minimum mean Euclidean matching cost over all `n!` permutations (Heap's algorithm).
pub fn exhaustive_assignment_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    assert_eq!(n, b.len());
    if n == 0 {
        return 0.0;
    }
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let cost_of = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| dist(&a[i], &b[j])).sum::<f64>();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = cost_of(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost_of(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / n as f64
}

/// Mean absolute difference of sorted samples; W1 for equal-size measures on the line.
pub fn sorted_pairing_w1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.partial_cmp(q).unwrap());
    y.sort_by(|p, q| p.partial_cmp(q).unwrap());
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

/// Softmax entropy straight from the definition, no stabilization.
pub fn direct_entropy(logits: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    logits
        .iter()
        .map(|v| v.exp() / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}
