//! Margin-based nonconformity scores and surrogate losses.
//!
//! For a logit vector `m` and label `y`, the multiclass margin is
//! `γ(y) = m[y] - max_{k≠y} m[k]` and the nonconformity score is `s = -γ`.
//! Class labels are 0-based throughout the library; file formats use 1-based
//! labels and convert at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled example. `X` is the model input: a feature vector for
/// [`LinearLogitMap`], or a stored logit vector for [`StoredLogits`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample<X = Vec<f64>> {
    pub x: X,
    pub y: usize,
}

impl<X> LabeledSample<X> {
    pub fn new(x: X, y: usize) -> Self {
        Self { x, y }
    }
}

/// Anything that maps an input to a vector of class logits.
pub trait LogitModel: Sync {
    type Input: Sync;

    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Self::Input) -> Result<Vec<f64>>;
}

/// Affine logit map `x ↦ W x + b` with `K` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLogitMap {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl LinearLogitMap {
    pub fn new(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        if biases.len() != k {
            return Err(Error::SizeMismatch { left: k, right: biases.len() });
        }
        let d = weights[0].len();
        for row in &weights {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: row.len() });
            }
        }
        if weights.iter().flatten().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit map parameters"));
        }
        Ok(Self { weights, biases })
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    /// Lipschitz constant of every margin `x ↦ γ(x, y)` w.r.t. the Euclidean norm.
    ///
    /// `γ(x, y) = min_{k≠y} [(w_y - w_k)·x + (b_y - b_k)]` is a pointwise minimum
    /// of affine maps with slopes `w_y - w_k`, so it is Lipschitz with constant
    /// `max_{k≠y} ‖w_y - w_k‖₂`; maximizing over `y` gives a bound valid for all labels.
    pub fn lipschitz_bound(&self) -> f64 {
        let k = self.weights.len();
        let mut best = 0.0_f64;
        for a in 0..k {
            for b in (a + 1)..k {
                let norm = self.weights[a]
                    .iter()
                    .zip(&self.weights[b])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                best = best.max(norm);
            }
        }
        best
    }
}

impl LogitModel for LinearLogitMap {
    type Input = Vec<f64>;

    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, x: &Vec<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: x.len() });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b)
            .collect())
    }
}

/// Model whose inputs are already logit vectors (externally trained classifiers).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoredLogits {
    classes: usize,
}

impl StoredLogits {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::TooFewClasses(classes));
        }
        Ok(Self { classes })
    }
}

impl LogitModel for StoredLogits {
    type Input = Vec<f64>;

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, x: &Vec<f64>) -> Result<Vec<f64>> {
        if x.len() != self.classes {
            return Err(Error::DimensionMismatch { expected: self.classes, actual: x.len() });
        }
        Ok(x.clone())
    }
}

/// Index of the largest logit; ties go to the smallest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

pub fn margin_from_logits(logits: &[f64], y: usize) -> Result<f64> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::TooFewClasses(k));
    }
    if y >= k {
        return Err(Error::InvalidLabel { label: y, classes: k });
    }
    let competitor = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - competitor)
}

pub fn score_from_logits(logits: &[f64], y: usize) -> Result<f64> {
    margin_from_logits(logits, y).map(|g| -g)
}

/// Scores of every label for one logit vector.
pub fn all_scores(logits: &[f64]) -> Vec<f64> {
    // top two logits determine every margin
    let top = argmax(logits);
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == top { runner_up - v } else { logits[top] - v })
        .collect()
}

/// Shannon entropy (nats) of the temperature-1 softmax.
pub fn entropy_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let h = exps
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| {
            let p = e / z;
            -p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

pub fn predict<M: LogitModel>(model: &M, x: &M::Input) -> Result<usize> {
    Ok(argmax(&model.logits(x)?))
}

pub fn margin<M: LogitModel>(model: &M, x: &M::Input, y: usize) -> Result<f64> {
    margin_from_logits(&model.logits(x)?, y)
}

pub fn score<M: LogitModel>(model: &M, x: &M::Input, y: usize) -> Result<f64> {
    margin(model, x, y).map(|g| -g)
}

pub fn predictive_entropy<M: LogitModel>(model: &M, x: &M::Input) -> Result<f64> {
    Ok(entropy_from_logits(&model.logits(x)?))
}

/// `min{max(1 - γ, 0), 1}`
pub fn ramp_loss(gamma: f64) -> f64 {
    (1.0 - gamma).clamp(0.0, 1.0)
}

/// `max{1 - γ, 0}`
pub fn hinge_loss(gamma: f64) -> f64 {
    (1.0 - gamma).max(0.0)
}

fn mean_loss<M: LogitModel>(
    model: &M,
    samples: &[LabeledSample<M::Input>],
    loss: fn(f64) -> f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("loss sample"));
    }
    let mut total = 0.0;
    for s in samples {
        total += loss(margin(model, &s.x, s.y)?);
    }
    Ok(total / samples.len() as f64)
}

/// Empirical ramp loss `L_r(f, P̂)`.
pub fn population_ramp_loss<M: LogitModel>(model: &M, samples: &[LabeledSample<M::Input>]) -> Result<f64> {
    mean_loss(model, samples, ramp_loss)
}

/// Empirical hinge loss `L_h(f, P̂)`.
pub fn population_hinge_loss<M: LogitModel>(model: &M, samples: &[LabeledSample<M::Input>]) -> Result<f64> {
    mean_loss(model, samples, hinge_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: Vec<Vec<f64>>, b: Vec<f64>) -> LinearLogitMap {
        LinearLogitMap::new(w, b).unwrap()
    }

    #[test]
    fn logits_examples() {
        let id = map(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        assert_eq!(id.logits(&vec![3.0, 1.0]).unwrap(), vec![3.0, 1.0]);
        let bias = map(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, -1.0]);
        assert_eq!(bias.logits(&vec![0.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        let m = map(vec![vec![2.0, 1.0], vec![0.0, 3.0]], vec![0.0, 0.0]);
        assert_eq!(m.logits(&vec![1.0, 1.0]).unwrap(), vec![3.0, 3.0]);
        assert_eq!(
            m.logits(&vec![1.0]),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        );
    }

    #[test]
    fn map_validation() {
        assert_eq!(LinearLogitMap::new(vec![vec![1.0]], vec![0.0]), Err(Error::TooFewClasses(1)));
        assert!(LinearLogitMap::new(vec![vec![1.0], vec![f64::NAN]], vec![0.0, 0.0]).is_err());
        assert!(LinearLogitMap::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[3.0, 1.0]), 0);
        assert_eq!(argmax(&[3.0, 3.0]), 0);
        assert_eq!(argmax(&[-1.0, 0.5, -2.0]), 1);
    }

    #[test]
    fn margin_and_score_examples() {
        assert_eq!(margin_from_logits(&[3.0, 1.0], 0).unwrap(), 2.0);
        assert_eq!(margin_from_logits(&[3.0, 1.0], 1).unwrap(), -2.0);
        assert_eq!(margin_from_logits(&[0.7, 0.7], 0).unwrap(), 0.0);
        assert_eq!(score_from_logits(&[3.0, 1.0], 0).unwrap(), -2.0);
        assert_eq!(score_from_logits(&[3.0, 1.0], 1).unwrap(), 2.0);
        assert_eq!(score_from_logits(&[0.7, 0.7], 1).unwrap(), 0.0);
        assert_eq!(
            margin_from_logits(&[3.0, 1.0], 2),
            Err(Error::InvalidLabel { label: 2, classes: 2 })
        );
    }

    #[test]
    fn loss_examples() {
        assert_eq!(ramp_loss(2.0), 0.0);
        assert_eq!(ramp_loss(-0.5), 1.0);
        assert!((ramp_loss(0.3) - 0.7).abs() < 1e-15);
        assert_eq!(hinge_loss(2.0), 0.0);
        assert_eq!(hinge_loss(-2.0), 3.0);
        assert_eq!(hinge_loss(1.0), 0.0);
    }

    #[test]
    fn population_losses() {
        let model = StoredLogits::new(2).unwrap();
        let s = |a: f64, b: f64, y| LabeledSample::new(vec![a, b], y);
        // margins {2, -2}
        let mixed = vec![s(2.0, 0.0, 0), s(2.0, 0.0, 1)];
        assert_eq!(population_ramp_loss(&model, &mixed).unwrap(), 0.5);
        assert_eq!(population_hinge_loss(&model, &mixed).unwrap(), 1.5);
        let good = vec![s(5.0, 0.0, 0), s(0.0, 1.0, 1)];
        assert_eq!(population_ramp_loss(&model, &good).unwrap(), 0.0);
        let bad = vec![s(5.0, 0.0, 1), s(0.0, 0.0, 1)];
        assert_eq!(population_ramp_loss(&model, &bad).unwrap(), 1.0);
        assert_eq!(population_ramp_loss(&model, &[]), Err(Error::Empty("loss sample")));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_from_logits(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!(entropy_from_logits(&[50.0, -50.0]).abs() < 1e-10);
        // direct formula without max-subtraction
        let z = 1f64.exp() + 2.0;
        let p = [1f64.exp() / z, 1.0 / z, 1.0 / z];
        let direct: f64 = p.iter().map(|q| -q * q.ln()).sum();
        assert!((entropy_from_logits(&[1.0, 0.0, 0.0]) - direct).abs() < 1e-14);
        assert!(entropy_from_logits(&[1e300, -1e300, 0.0]).is_finite());
    }

    #[test]
    fn lipschitz_examples() {
        let m = map(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0; 2]);
        assert!((m.lipschitz_bound() - 2f64.sqrt()).abs() < 1e-15);
        let eq = map(vec![vec![1.0, 2.0]; 3], vec![0.0; 3]);
        assert_eq!(eq.lipschitz_bound(), 0.0);
        let three = map(vec![vec![3.0, 0.0], vec![0.0, 0.0], vec![0.0, 4.0]], vec![0.0; 3]);
        assert!((three.lipschitz_bound() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn all_scores_matches_per_label() {
        let l = [0.3, -1.0, 0.3, 2.0];
        let all = all_scores(&l);
        for (y, s) in all.iter().enumerate() {
            assert_eq!(*s, score_from_logits(&l, y).unwrap());
        }
    }

    fn arb_map() -> impl Strategy<Value = LinearLogitMap> {
        (2usize..5, 1usize..4).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), k),
                prop::collection::vec(-2.0..2.0f64, k),
            )
                .prop_map(|(w, b)| LinearLogitMap::new(w, b).unwrap())
        })
    }

    proptest! {
        #[test]
        fn predicted_label_has_minimal_score(m in arb_map(), seed in prop::collection::vec(-5.0..5.0f64, 3)) {
            let x: Vec<f64> = seed.into_iter().take(m.dim()).chain(std::iter::repeat(0.0)).take(m.dim()).collect();
            let f = predict(&m, &x).unwrap();
            let sf = score(&m, &x, f).unwrap();
            for y in 0..m.num_classes() {
                prop_assert!(sf <= score(&m, &x, y).unwrap());
            }
        }

        #[test]
        fn ramp_below_hinge_and_monotone(g in -10.0..10.0f64, dg in 0.0..5.0f64) {
            prop_assert!(ramp_loss(g) <= hinge_loss(g).min(1.0));
            prop_assert!(ramp_loss(g + dg) <= ramp_loss(g));
            prop_assert!(hinge_loss(g + dg) <= hinge_loss(g));
        }

        #[test]
        fn margin_is_lipschitz(
            m in arb_map(),
            a in prop::collection::vec(-5.0..5.0f64, 3),
            b in prop::collection::vec(-5.0..5.0f64, 3),
        ) {
            let d = m.dim();
            let (x, xp) = (a[..d].to_vec(), b[..d].to_vec());
            let dist = x.iter().zip(&xp).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let lip = m.lipschitz_bound();
            for y in 0..m.num_classes() {
                let diff = (margin(&m, &x, y).unwrap() - margin(&m, &xp, y).unwrap()).abs();
                prop_assert!(diff <= lip * dist + 1e-9);
            }
        }

        #[test]
        fn argmax_shift_invariant(l in prop::collection::vec(-10.0..10.0f64, 2..6), c in -100.0..100.0f64) {
            let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
            // shifting can merge near-ties through rounding; compare only when the gap is resolvable
            let top = argmax(&l);
            let gap = l.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, v)| l[top] - v).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(argmax(&shifted), top);
        }
    }
}
