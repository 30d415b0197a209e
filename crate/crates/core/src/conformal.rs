//! Split-conformal calibration and prediction sets.
//!
//! The threshold at miscoverage `α` from `n` calibration scores is the
//! `⌈(1-α)(n+1)⌉`-th smallest score. When that rank exceeds `n` the threshold
//! is [`Threshold::FullSet`] and every label is admitted. Set membership uses
//! the non-strict test `s(x, y) ≤ q + τ`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, Error, Result};
use crate::scores::{all_scores, LabeledSample, LogitModel};

/// Slack absorbing floating-point error in `(1-α)(n+1)` before the ceiling.
const RANK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    Finite(f64),
    FullSet,
}

impl Threshold {
    /// Whether a label with score `s` is admitted under slack `tau`.
    pub fn admits(&self, s: f64, tau: f64) -> bool {
        match *self {
            Threshold::Finite(q) => s <= q + tau,
            Threshold::FullSet => true,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Threshold::Finite(q) => q,
            Threshold::FullSet => f64::INFINITY,
        }
    }

    pub fn from_value(v: f64) -> Self {
        if v == f64::INFINITY {
            Threshold::FullSet
        } else {
            Threshold::Finite(v)
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Finite(q) => write!(f, "{q}"),
            Threshold::FullSet => write!(f, "FULL_SET"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: Threshold,
    pub alpha: f64,
    pub n: usize,
    /// `⌈(1-α)(n+1)⌉ / n`; exceeds 1 exactly when the threshold is `FullSet`.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub members: Vec<usize>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, y: usize) -> bool {
        self.members.contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub per_alpha: Vec<(f64, f64)>,
    pub integrated: f64,
}

/// `⌈(1-α)(n+1)⌉`
pub fn conformal_rank(n: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    if n == 0 {
        return Err(Error::Empty("calibration scores"));
    }
    let raw = (1.0 - alpha) * (n as f64 + 1.0);
    Ok((raw - RANK_EPS).ceil().max(1.0) as usize)
}

/// `⌈(1-α)(n+1)⌉ / n`, possibly greater than one.
pub fn conformal_level(n: usize, alpha: f64) -> Result<f64> {
    Ok(conformal_rank(n, alpha)? as f64 / n as f64)
}

fn kth_smallest(scores: &[f64], k: usize) -> f64 {
    let mut buf = scores.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    *v
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    Ok(())
}

/// Smallest score `t` with empirical CDF `F̂(t) ≥ level`, i.e. the
/// `⌈level·n⌉`-th order statistic; `FullSet` when `level > 1`.
pub fn empirical_quantile(scores: &[f64], level: f64) -> Result<Threshold> {
    check_scores(scores)?;
    if level.is_nan() || level <= 0.0 {
        return Err(Error::InvalidLevel(level));
    }
    if level > 1.0 {
        return Ok(Threshold::FullSet);
    }
    let n = scores.len();
    let k = ((level * n as f64 - RANK_EPS).ceil() as usize).clamp(1, n);
    Ok(Threshold::Finite(kth_smallest(scores, k)))
}

/// Split-conformal threshold from calibration scores.
pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationResult> {
    check_scores(scores)?;
    let n = scores.len();
    let rank = conformal_rank(n, alpha)?;
    let threshold = if rank > n {
        Threshold::FullSet
    } else {
        Threshold::Finite(kth_smallest(scores, rank))
    };
    Ok(CalibrationResult { threshold, alpha, n, level: rank as f64 / n as f64 })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 {
        Ok(())
    } else {
        Err(Error::NegativeTau(tau))
    }
}

fn set_from_scores(scores: &[f64], threshold: Threshold, tau: f64) -> PredictionSet {
    PredictionSet {
        members: scores
            .iter()
            .enumerate()
            .filter(|&(_, &s)| threshold.admits(s, tau))
            .map(|(y, _)| y)
            .collect(),
    }
}

/// `{y : s(x, y) ≤ q + τ}`
pub fn prediction_set<M: LogitModel>(
    model: &M,
    x: &M::Input,
    cal: &CalibrationResult,
    tau: f64,
) -> Result<PredictionSet> {
    check_tau(tau)?;
    Ok(set_from_scores(&all_scores(&model.logits(x)?), cal.threshold, tau))
}

/// Per-label scores for a batch of inputs, so several thresholds can be
/// evaluated without recomputing logits.
#[derive(Debug, Clone)]
pub struct ScoredBatch {
    scores: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
}

impl ScoredBatch {
    pub fn unlabeled<M: LogitModel>(model: &M, inputs: &[M::Input]) -> Result<Self> {
        let scores = inputs
            .iter()
            .map(|x| model.logits(x).map(|l| all_scores(&l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scores, labels: None })
    }

    pub fn labeled<M: LogitModel>(model: &M, samples: &[LabeledSample<M::Input>]) -> Result<Self> {
        let k = model.num_classes();
        let mut scores = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            if s.y >= k {
                return Err(Error::InvalidLabel { label: s.y, classes: k });
            }
            scores.push(all_scores(&model.logits(&s.x)?));
            labels.push(s.y);
        }
        Ok(Self { scores, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores of the true labels.
    pub fn true_scores(&self) -> Option<Vec<f64>> {
        self.labels
            .as_ref()
            .map(|ls| self.scores.iter().zip(ls).map(|(s, &y)| s[y]).collect())
    }

    pub fn label_scores(&self, labels: &[usize]) -> Vec<f64> {
        self.scores.iter().zip(labels).map(|(s, &y)| s[y]).collect()
    }

    pub fn coverage(&self, threshold: Threshold, tau: f64) -> Result<f64> {
        check_tau(tau)?;
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("coverage requires labels".into()))?;
        if labels.is_empty() {
            return Err(Error::Empty("test sample"));
        }
        let hits = self
            .scores
            .iter()
            .zip(labels)
            .filter(|(s, &y)| threshold.admits(s[y], tau))
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn expected_set_size(&self, threshold: Threshold, tau: f64) -> Result<f64> {
        check_tau(tau)?;
        if self.scores.is_empty() {
            return Err(Error::Empty("inputs"));
        }
        let total: usize = self
            .scores
            .iter()
            .map(|s| s.iter().filter(|&&v| threshold.admits(v, tau)).count())
            .sum();
        Ok(total as f64 / self.scores.len() as f64)
    }
}

/// Fraction of test samples whose true label is in the prediction set.
pub fn coverage<M: LogitModel>(
    model: &M,
    test: &[LabeledSample<M::Input>],
    cal: &CalibrationResult,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    ScoredBatch::labeled(model, test)?.coverage(cal.threshold, tau)
}

/// Mean prediction-set cardinality.
pub fn expected_set_size<M: LogitModel>(
    model: &M,
    inputs: &[M::Input],
    cal: &CalibrationResult,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    ScoredBatch::unlabeled(model, inputs)?.expected_set_size(cal.threshold, tau)
}

/// Right-continuous empirical CDF evaluated at `t`; `sorted` must be ascending.
pub fn ecdf_sorted(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|&v| v <= t) as f64 / sorted.len() as f64
}

fn sorted_copy(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn gap_at(cal: &[f64], p_sorted: &[f64], q_sorted: &[f64], alpha: f64) -> Result<f64> {
    Ok(match calibrate(cal, alpha)?.threshold {
        Threshold::FullSet => 0.0,
        Threshold::Finite(q) => (ecdf_sorted(p_sorted, q) - ecdf_sorted(q_sorted, q)).abs(),
    })
}

/// `|F̂_P(q) - F̂_Q(q)|` with `q` calibrated on `cal_scores_p` at `alpha`.
pub fn coverage_gap_at_alpha(
    cal_scores_p: &[f64],
    test_scores_p: &[f64],
    test_scores_q: &[f64],
    alpha: f64,
) -> Result<f64> {
    check_scores(test_scores_p)?;
    check_scores(test_scores_q)?;
    gap_at(cal_scores_p, &sorted_copy(test_scores_p), &sorted_copy(test_scores_q), alpha)
}

/// `α ∈ {0.01, 0.02, …, 0.99}`
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Trapezoidal integral of the pointwise coverage gap over `alpha_grid`.
pub fn integrated_coverage_gap(
    cal_scores_p: &[f64],
    test_scores_p: &[f64],
    test_scores_q: &[f64],
    alpha_grid: &[f64],
) -> Result<GapEstimate> {
    check_scores(test_scores_p)?;
    check_scores(test_scores_q)?;
    if alpha_grid.is_empty() {
        return Err(Error::Empty("alpha grid"));
    }
    if alpha_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("alpha grid must be strictly increasing".into()));
    }
    let p = sorted_copy(test_scores_p);
    let q = sorted_copy(test_scores_q);
    let per_alpha = alpha_grid
        .iter()
        .map(|&a| gap_at(cal_scores_p, &p, &q, a).map(|g| (a, g)))
        .collect::<Result<Vec<_>>>()?;
    let integrated = per_alpha
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(GapEstimate { per_alpha, integrated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{LinearLogitMap, StoredLogits};
    use proptest::prelude::*;

    #[test]
    fn level_examples() {
        assert_eq!(conformal_level(4, 0.2).unwrap(), 1.0);
        assert_eq!(conformal_level(3, 0.5).unwrap(), 2.0 / 3.0);
        assert_eq!(conformal_level(1, 0.4).unwrap(), 2.0);
        assert_eq!(conformal_level(0, 0.4), Err(Error::Empty("calibration scores")));
        assert_eq!(conformal_level(5, 1.0), Err(Error::InvalidAlpha(1.0)));
        assert!(conformal_level(5, f64::NAN).is_err());
    }

    #[test]
    fn quantile_examples() {
        let s = [0.9, 0.1, 0.5];
        assert_eq!(empirical_quantile(&s, 2.0 / 3.0).unwrap(), Threshold::Finite(0.5));
        assert_eq!(empirical_quantile(&s, 1.0).unwrap(), Threshold::Finite(0.9));
        assert_eq!(empirical_quantile(&[4.0; 3], 0.3).unwrap(), Threshold::Finite(4.0));
        assert_eq!(empirical_quantile(&s, 1.5).unwrap(), Threshold::FullSet);
        assert_eq!(empirical_quantile(&[], 0.5), Err(Error::Empty("scores")));
        assert!(empirical_quantile(&s, 0.0).is_err());
    }

    #[test]
    fn calibrate_examples() {
        let c = calibrate(&[1.0, 2.0, 3.0, 4.0], 0.2).unwrap();
        assert_eq!(c.threshold, Threshold::Finite(4.0));
        assert_eq!(c.level, 1.0);
        let c = calibrate(&[7.0], 0.4).unwrap();
        assert_eq!(c.threshold, Threshold::FullSet);
        assert_eq!(c.level, 2.0);
        let nine: Vec<f64> = (1..=9).rev().map(f64::from).collect();
        let c = calibrate(&nine, 0.2).unwrap();
        assert_eq!(c.threshold, Threshold::Finite(8.0));
        assert_eq!(c.level, 8.0 / 9.0);
    }

    fn cal(threshold: Threshold) -> CalibrationResult {
        CalibrationResult { threshold, alpha: 0.2, n: 10, level: 0.9 }
    }

    #[test]
    fn prediction_set_examples() {
        let m = StoredLogits::new(2).unwrap();
        let x = vec![3.0, 1.0];
        let below = cal(Threshold::Finite(-10.0));
        assert!(prediction_set(&m, &x, &below, 0.0).unwrap().is_empty());
        assert_eq!(prediction_set(&m, &x, &cal(Threshold::FullSet), 0.0).unwrap().members, vec![0, 1]);
        let c = cal(Threshold::Finite(-1.5));
        assert_eq!(prediction_set(&m, &x, &c, 0.0).unwrap().members, vec![0]);
        assert_eq!(prediction_set(&m, &x, &c, 4.0).unwrap().members, vec![0, 1]);
        assert_eq!(prediction_set(&m, &x, &c, -0.1), Err(Error::NegativeTau(-0.1)));
        // non-strict membership
        assert_eq!(prediction_set(&m, &x, &cal(Threshold::Finite(2.0)), 0.0).unwrap().len(), 2);
    }

    #[test]
    fn coverage_and_ess_examples() {
        let m = StoredLogits::new(2).unwrap();
        let test = vec![LabeledSample::new(vec![3.0, 1.0], 0), LabeledSample::new(vec![3.0, 2.5], 1)];
        let inputs: Vec<Vec<f64>> = test.iter().map(|s| s.x.clone()).collect();
        let full = cal(Threshold::FullSet);
        assert_eq!(coverage(&m, &test, &full, 0.0).unwrap(), 1.0);
        assert_eq!(expected_set_size(&m, &inputs, &full, 0.0).unwrap(), 2.0);
        let low = cal(Threshold::Finite(-100.0));
        assert_eq!(coverage(&m, &test, &low, 0.0).unwrap(), 0.0);
        assert_eq!(expected_set_size(&m, &inputs, &low, 0.0).unwrap(), 0.0);
        // scores: point 1 -> (-2, 2), point 2 -> (-0.5, 0.5); q = 0 gives sets {0}, {0}
        let mid = cal(Threshold::Finite(0.0));
        assert_eq!(coverage(&m, &test, &mid, 0.0).unwrap(), 0.5);
        // q = 0.5 gives {0}, {0, 1}
        let wide = cal(Threshold::Finite(0.5));
        assert_eq!(expected_set_size(&m, &inputs, &wide, 0.0).unwrap(), 1.5);
    }

    #[test]
    fn gap_examples() {
        let p = [0.3, 0.1, 0.7, 0.5];
        assert_eq!(coverage_gap_at_alpha(&p, &p, &p, 0.2).unwrap(), 0.0);
        // cal {0,1,1}: rank ceil(0.5*4)=2 -> q = 1
        let cal_p = [0.0, 1.0, 1.0];
        assert_eq!(coverage_gap_at_alpha(&cal_p, &[0.0, 1.0], &[2.0, 3.0], 0.5).unwrap(), 1.0);
        assert_eq!(coverage_gap_at_alpha(&cal_p, &[0.0, 1.0], &[1.0, 3.0], 0.5).unwrap(), 0.5);
    }

    #[test]
    fn integrated_gap_examples() {
        let p: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let grid = default_alpha_grid();
        assert_eq!(integrated_coverage_gap(&p, &p, &p, &grid).unwrap().integrated, 0.0);

        // P test all below any threshold, Q test all above: gap is 1 wherever q is finite
        let cal_p = [0.0, 0.0, 0.0];
        let g = integrated_coverage_gap(&cal_p, &[-1.0], &[5.0], &[0.3, 0.5, 0.7]).unwrap();
        assert!((g.integrated - 0.4).abs() < 1e-15);

        // independent summation over a nonuniform grid
        let cal = [0.1, 0.4, 0.2, 0.9, 0.6, 0.3, 0.8];
        let tp = [0.15, 0.35, 0.55, 0.75];
        let tq = [0.5, 0.6, 0.7, 0.95, 1.2];
        let grid = [0.05, 0.1, 0.25, 0.3, 0.6, 0.9];
        let est = integrated_coverage_gap(&cal, &tp, &tq, &grid).unwrap();
        let mut direct = 0.0;
        for i in 0..grid.len() - 1 {
            let ga = coverage_gap_at_alpha(&cal, &tp, &tq, grid[i]).unwrap();
            let gb = coverage_gap_at_alpha(&cal, &tp, &tq, grid[i + 1]).unwrap();
            direct += 0.5 * (grid[i + 1] - grid[i]) * (ga + gb);
        }
        assert!((est.integrated - direct).abs() < 1e-12);
        assert!(est.per_alpha.iter().all(|&(_, g)| (0.0..=1.0).contains(&g)));
        assert!(integrated_coverage_gap(&cal, &tp, &tq, &[0.5, 0.4]).is_err());
    }

    #[test]
    fn scored_batch_agrees_with_direct_path() {
        let m = LinearLogitMap::new(vec![vec![1.0, -0.5], vec![0.2, 0.9], vec![-1.0, 0.0]], vec![0.0, 0.1, -0.2]).unwrap();
        let test: Vec<_> = (0..20)
            .map(|i| LabeledSample::new(vec![(i as f64 * 0.37).sin() * 2.0, (i as f64 * 0.91).cos() * 2.0], i % 3))
            .collect();
        let batch = ScoredBatch::labeled(&m, &test).unwrap();
        let c = cal(Threshold::Finite(0.3));
        let direct = test
            .iter()
            .filter(|s| prediction_set(&m, &s.x, &c, 0.25).unwrap().contains(s.y))
            .count() as f64
            / 20.0;
        assert_eq!(batch.coverage(c.threshold, 0.25).unwrap(), direct);
    }

    proptest! {
        #[test]
        fn quantile_is_a_sample_element(scores in prop::collection::vec(-5.0..5.0f64, 1..40), level in 0.001..1.0f64) {
            let q = empirical_quantile(&scores, level).unwrap();
            let Threshold::Finite(v) = q else { panic!("finite level gave full set") };
            prop_assert!(scores.contains(&v));
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(empirical_quantile(&scores, 1.0).unwrap(), Threshold::Finite(max));
        }

        #[test]
        fn threshold_monotone_in_level(scores in prop::collection::vec(-5.0..5.0f64, 1..40), a in 0.001..1.0f64, b in 0.001..1.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(empirical_quantile(&scores, lo).unwrap().value() <= empirical_quantile(&scores, hi).unwrap().value());
        }

        #[test]
        fn sets_grow_with_tau(
            logits in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 1..30),
            labels in prop::collection::vec(0usize..3, 30),
            q in -3.0..3.0f64,
            t1 in 0.0..3.0f64,
            dt in 0.0..3.0f64,
        ) {
            let m = StoredLogits::new(3).unwrap();
            let c = cal(Threshold::Finite(q));
            let test: Vec<_> = logits.iter().zip(&labels).map(|(l, &y)| LabeledSample::new(l.clone(), y)).collect();
            for s in &test {
                let small = prediction_set(&m, &s.x, &c, t1).unwrap();
                let big = prediction_set(&m, &s.x, &c, t1 + dt).unwrap();
                prop_assert!(small.members.iter().all(|y| big.contains(*y)));
            }
            let batch = ScoredBatch::labeled(&m, &test).unwrap();
            prop_assert!(batch.coverage(c.threshold, t1).unwrap() <= batch.coverage(c.threshold, t1 + dt).unwrap());
            prop_assert!(batch.expected_set_size(c.threshold, t1).unwrap() <= batch.expected_set_size(c.threshold, t1 + dt).unwrap());
        }
    }
}
