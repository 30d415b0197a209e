//! Fast-path versus reference-implementation equivalence checks, run by the
//! `selftest` subcommand.

use rand::Rng;

use crate::conformal::{conformal_level, empirical_quantile};
use crate::error::Result;
use crate::oracle::{brute_force_quantile, direct_entropy, exhaustive_assignment_cost, sorted_pairing_w1};
use crate::rng::RngStream;
use crate::scores::entropy_from_logits;
use crate::transport::{w1_1d, w1_assignment};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Every multiset of size `1..=max_len` over `values`, in nondecreasing order.
pub fn multisets(values: &[f64], max_len: usize) -> Vec<Vec<f64>> {
    fn extend(values: &[f64], start: usize, len: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for i in start..values.len() {
            cur.push(values[i]);
            extend(values, i, len, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for len in 1..=max_len {
        extend(values, 0, len, &mut Vec::new(), &mut out);
    }
    out
}

fn quantile_check() -> Result<CheckOutcome> {
    let mut cases = 0;
    let mut failures = 0;
    for set in multisets(&[1.0, 2.0, 3.0, 4.0, 5.0], 5) {
        for a in 1..=9 {
            let alpha = a as f64 / 10.0;
            for level in [1.0 - alpha, conformal_level(set.len(), alpha)?] {
                cases += 1;
                if empirical_quantile(&set, level)? != brute_force_quantile(&set, level) {
                    failures += 1;
                }
            }
        }
    }
    Ok(CheckOutcome { name: "quantile vs inf-over-CDF scan", cases, failures })
}

fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn assignment_check(instances: usize, stream: &RngStream) -> Result<CheckOutcome> {
    let mut rng = stream.rng();
    let mut failures = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=3);
        let a = random_points(&mut rng, n, d);
        let b = random_points(&mut rng, n, d);
        if (w1_assignment(&a, &b)? - exhaustive_assignment_cost(&a, &b)).abs() > 1e-9 {
            failures += 1;
        }
    }
    Ok(CheckOutcome { name: "assignment vs exhaustive matching", cases: instances, failures })
}

fn line_check(instances: usize, stream: &RngStream) -> Result<CheckOutcome> {
    let mut rng = stream.rng();
    let mut failures = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lift = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
        let reference = sorted_pairing_w1(&a, &b);
        if (w1_1d(&a, &b)? - reference).abs() > 1e-9 || (w1_assignment(&lift(&a), &lift(&b))? - reference).abs() > 1e-9 {
            failures += 1;
        }
    }
    Ok(CheckOutcome { name: "1-D transport: quantile merge, assignment, sorted pairing", cases: instances, failures })
}

fn entropy_check(instances: usize, stream: &RngStream) -> CheckOutcome {
    let mut rng = stream.rng();
    let mut failures = 0;
    for _ in 0..instances {
        let k = rng.random_range(2..=8);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        if (entropy_from_logits(&logits) - direct_entropy(&logits)).abs() > 1e-12 {
            failures += 1;
        }
    }
    CheckOutcome { name: "stabilized vs direct softmax entropy", cases: instances, failures }
}

pub fn run_selftest(seed: u64) -> Result<Vec<CheckOutcome>> {
    let root = RngStream::new(seed, 0).named("selftest");
    Ok(vec![
        quantile_check()?,
        assignment_check(1000, &root.named("assignment"))?,
        line_check(1000, &root.named("line"))?,
        entropy_check(10_000, &root.named("entropy")),
    ])
}
