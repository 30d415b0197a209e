//! Pseudo-labeled calibration on unlabeled target inputs.
//!
//! Hard pseudo-labels use the classifier's prediction `f(x)`. Randomized
//! pseudo-labels keep `f(x)` when the uncertainty `H(x)` is at most `u` and
//! otherwise draw a label uniformly from all classes. Source-tuned
//! pseudo-calibration sweeps `u` over a grid on labeled source data, keeps the
//! largest `u` whose source coverage stays at or above `1-α`, and calibrates
//! the target with that `u`.
//!
//! Randomness is addressed per data point: point `i` draws its uniform label
//! from `stream.child(i)`. The same draw is therefore reused for every `u` at a
//! fixed point, which couples the labelings across the grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, CalibrationResult, Threshold};
use crate::error::{check_alpha, Error, Result};
use crate::rng::RngStream;
use crate::scores::{all_scores, argmax, entropy_from_logits, LabeledSample, LogitModel};

/// Uncertainty function `H(x) ≥ 0` evaluated from logits.
pub trait Uncertainty: Sync {
    fn measure(&self, logits: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PredictiveEntropy;

impl Uncertainty for PredictiveEntropy {
    fn measure(&self, logits: &[f64]) -> f64 {
        entropy_from_logits(logits)
    }
}

/// Strictly increasing grid of uncertainty thresholds; `+∞` is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGrid {
    values: Vec<f64>,
}

impl UncertaintyGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("uncertainty grid"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("uncertainty grid"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("uncertainty grid must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// 32 evenly spaced points on `[0, ln K]` followed by `+∞`.
    pub fn default_for(classes: usize) -> Self {
        let top = (classes.max(2) as f64).ln();
        let mut values: Vec<f64> = (0..32).map(|i| top * i as f64 / 31.0).collect();
        values.push(f64::INFINITY);
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub u: f64,
    /// Empirical source coverage `ĉ(u)` against true labels.
    pub coverage: f64,
    /// Threshold calibrated on the `u`-randomized source pseudo-scores.
    pub threshold: Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub u_star: f64,
    pub coverage_curve: Vec<CoveragePoint>,
    pub source_threshold_at_u_star: Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelRule {
    Hard,
    Randomized { u: f64, stream: RngStream },
}

/// `f(x)`
pub fn hard_pseudo_label<M: LogitModel>(model: &M, x: &M::Input) -> Result<usize> {
    crate::scores::predict(model, x)
}

fn uniform_label(stream: &RngStream, classes: usize) -> usize {
    stream.rng().random_range(0..classes)
}

/// `f(x)` when `h_value ≤ u`, otherwise a uniform label drawn from `stream`.
pub fn randomized_pseudo_label<M: LogitModel>(
    model: &M,
    h_value: f64,
    u: f64,
    x: &M::Input,
    stream: &RngStream,
) -> Result<usize> {
    if h_value <= u {
        hard_pseudo_label(model, x)
    } else {
        Ok(uniform_label(stream, model.num_classes()))
    }
}

/// Per-point quantities needed to pseudo-label a batch under any `u`.
#[derive(Debug, Clone)]
pub struct PseudoBatch {
    scores: Vec<Vec<f64>>,
    predicted: Vec<usize>,
    uncertainty: Vec<f64>,
    uniform: Vec<usize>,
}

impl PseudoBatch {
    pub fn new<M: LogitModel, H: Uncertainty>(
        model: &M,
        inputs: &[M::Input],
        uncertainty: &H,
        stream: &RngStream,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("pseudo-calibration inputs"));
        }
        let k = model.num_classes();
        let n = inputs.len();
        let mut batch = Self {
            scores: Vec::with_capacity(n),
            predicted: Vec::with_capacity(n),
            uncertainty: Vec::with_capacity(n),
            uniform: Vec::with_capacity(n),
        };
        for (i, x) in inputs.iter().enumerate() {
            let logits = model.logits(x)?;
            batch.predicted.push(argmax(&logits));
            batch.uncertainty.push(uncertainty.measure(&logits));
            batch.scores.push(all_scores(&logits));
            batch.uniform.push(uniform_label(&stream.child(i as u64), k));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    pub fn hard_labels(&self) -> &[usize] {
        &self.predicted
    }

    pub fn labels(&self, u: f64) -> Vec<usize> {
        (0..self.len())
            .map(|i| if self.uncertainty[i] <= u { self.predicted[i] } else { self.uniform[i] })
            .collect()
    }

    pub fn hard_scores(&self) -> Vec<f64> {
        self.scores.iter().zip(&self.predicted).map(|(s, &y)| s[y]).collect()
    }

    /// Pseudo-scores `s(x_i, Ỹ_u(x_i))`.
    pub fn scores_at(&self, u: f64) -> Vec<f64> {
        self.scores.iter().zip(self.labels(u)).map(|(s, y)| s[y]).collect()
    }
}

/// Calibrate on target inputs with pseudo-labels from `rule`.
pub fn pseudo_calibrate<M: LogitModel>(
    model: &M,
    target_inputs: &[M::Input],
    alpha: f64,
    rule: &LabelRule,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if target_inputs.is_empty() {
        return Err(Error::Empty("pseudo-calibration inputs"));
    }
    let scores = match *rule {
        LabelRule::Hard => target_inputs
            .iter()
            .map(|x| model.logits(x).map(|l| all_scores(&l)[argmax(&l)]))
            .collect::<Result<Vec<_>>>()?,
        LabelRule::Randomized { u, stream } => {
            PseudoBatch::new(model, target_inputs, &PredictiveEntropy, &stream)?.scores_at(u)
        }
    };
    calibrate(&scores, alpha)
}

fn curve_from_batch(
    batch: &PseudoBatch,
    true_scores: &[f64],
    alpha: f64,
    grid: &UncertaintyGrid,
) -> Result<Vec<CoveragePoint>> {
    let m = true_scores.len() as f64;
    grid.values()
        .iter()
        .map(|&u| {
            let threshold = calibrate(&batch.scores_at(u), alpha)?.threshold;
            let hits = true_scores.iter().filter(|&&s| threshold.admits(s, 0.0)).count();
            Ok(CoveragePoint { u, coverage: hits as f64 / m, threshold })
        })
        .collect()
}

/// `ĉ(u)` for every grid point, computed on the same labeled source sample
/// used to calibrate.
pub fn source_coverage_curve<M: LogitModel>(
    model: &M,
    source: &[LabeledSample<M::Input>],
    alpha: f64,
    grid: &UncertaintyGrid,
    stream: &RngStream,
) -> Result<Vec<CoveragePoint>> {
    check_alpha(alpha)?;
    if source.is_empty() {
        return Err(Error::Empty("source sample"));
    }
    let inputs: Vec<&M::Input> = source.iter().map(|s| &s.x).collect();
    let batch = PseudoBatch::new(&ByRef(model), &inputs, &PredictiveEntropy, stream)?;
    let k = model.num_classes();
    let true_scores = source
        .iter()
        .zip(&batch.scores)
        .map(|(s, sc)| {
            if s.y >= k {
                Err(Error::InvalidLabel { label: s.y, classes: k })
            } else {
                Ok(sc[s.y])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    curve_from_batch(&batch, &true_scores, alpha, grid)
}

/// Largest `u` with `ĉ(u) ≥ 1-α`; the smallest grid value when none qualifies.
pub fn select_u_star(curve: &[CoveragePoint], alpha: f64) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Empty("coverage curve"));
    }
    let target = 1.0 - alpha;
    let qualifying = curve
        .iter()
        .filter(|p| p.coverage >= target)
        .map(|p| p.u)
        .fold(None, |acc: Option<f64>, u| Some(acc.map_or(u, |a| a.max(u))));
    Ok(qualifying.unwrap_or_else(|| curve.iter().map(|p| p.u).fold(f64::INFINITY, f64::min)))
}

/// Source-tuned pseudo-calibration: tune `u` on labeled source data, then
/// calibrate the target with `u★`-randomized pseudo-labels. Source and target
/// draws use independent child streams of `stream`.
pub fn source_tuned_calibrate<M: LogitModel>(
    model: &M,
    source: &[LabeledSample<M::Input>],
    target_inputs: &[M::Input],
    alpha: f64,
    grid: &UncertaintyGrid,
    stream: &RngStream,
) -> Result<(TuningResult, CalibrationResult)> {
    let curve = source_coverage_curve(model, source, alpha, grid, &stream.named("source"))?;
    let u_star = select_u_star(&curve, alpha)?;
    let source_threshold_at_u_star = curve
        .iter()
        .find(|p| p.u == u_star)
        .map(|p| p.threshold)
        .ok_or_else(|| Error::Invariant("u_star not on grid".into()))?;
    let target = pseudo_calibrate(
        model,
        target_inputs,
        alpha,
        &LabelRule::Randomized { u: u_star, stream: stream.named("target") },
    )?;
    Ok((TuningResult { u_star, coverage_curve: curve, source_threshold_at_u_star }, target))
}

/// Adapter letting a batch of borrowed inputs flow through a model.
struct ByRef<'a, M>(&'a M);

impl<'a, M: LogitModel> LogitModel for ByRef<'a, M> {
    type Input = &'a M::Input;

    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn logits(&self, x: &&'a M::Input) -> Result<Vec<f64>> {
        self.0.logits(x)
    }
}
