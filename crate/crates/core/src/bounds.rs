//! Coverage bounds under bounded label-conditional shift.
//!
//! Notation: `L_r`/`L_h` are ramp/hinge losses of the classifier, `L_γ` a
//! Lipschitz constant of its margins, `ρ` a bound on the per-class W∞ shift and
//! `ρ_mix = Σ_y P_Y(y) W1(P_{X|y}, Q_{X|y})`.

use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, ScoredBatch};
use crate::error::{check_alpha, Error, Result};
use crate::scores::{all_scores, argmax, LabeledSample, LogitModel};

/// `Σ_y prior_y · w1_y`
pub fn rho_mix(class_priors: &[f64], per_class_w1: &[f64]) -> Result<f64> {
    if class_priors.is_empty() {
        return Err(Error::Empty("class priors"));
    }
    if class_priors.len() != per_class_w1.len() {
        return Err(Error::SizeMismatch { left: class_priors.len(), right: per_class_w1.len() });
    }
    if class_priors.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidArgument("class priors must be nonnegative".into()));
    }
    let total: f64 = class_priors.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("class priors sum to {total}, not 1")));
    }
    if per_class_w1.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("per-class W1 values must be finite and nonnegative".into()));
    }
    Ok(class_priors.iter().zip(per_class_w1).map(|(p, w)| p * w).sum())
}

/// `W1(s#P, s#Q) ≤ L_γ ρ`
pub fn lemma_w1_score_bound(l_gamma: f64, rho: f64) -> f64 {
    l_gamma * rho
}

/// Histogram plug-in for `sup_t p(t)` with `⌈√n⌉` equal-width bins over `[min, max]`.
pub fn sup_density_estimate(scores: &[f64]) -> Result<f64> {
    let bins = (scores.len() as f64).sqrt().ceil() as usize;
    sup_density_histogram(scores, bins.max(1))
}

/// Largest `count / (n · width)` over `bins` equal-width bins; the last bin is closed.
pub fn sup_density_histogram(scores: &[f64], bins: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::DegenerateScores);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let idx = (((s - lo) / width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let max = *counts.iter().max().expect("bins > 0");
    Ok(max as f64 / (scores.len() as f64 * width))
}

/// `Δ_{P,Q} ≤ (sup p_{s#P}) · W1(s#P, s#Q)`
pub fn eq9_gap_bound(sup_density: f64, w1: f64) -> f64 {
    sup_density * w1
}

/// `max{0, 1-α - L_r(f,P) - L_γ ρ_mix}`: target coverage of hard pseudo-calibration.
pub fn theorem2_lower_bound(alpha: f64, l_r_source: f64, l_gamma: f64, rho_mix: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha - l_r_source - l_gamma * rho_mix).max(0.0))
}

/// `max{0, 1-α - min{L_r(f,Q), L_h(f,Q)/(1+τ/2)}}`: target coverage of the τ-relaxed set.
pub fn corollary1_lower_bound(alpha: f64, l_r_target: f64, l_h_target: f64, tau: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(tau >= 0.0) {
        return Err(Error::NegativeTau(tau));
    }
    let loss = l_r_target.min(l_h_target / (1.0 + tau / 2.0));
    Ok((1.0 - alpha - loss).max(0.0))
}

/// Undercoverage of hard pseudo-calibration on labeled source data:
/// `(1-α) - coverage`. The first half of `source` is calibrated with hard
/// pseudo-labels, the second half is evaluated with true labels. May be negative.
pub fn delta_p_estimate<M: LogitModel>(
    model: &M,
    source: &[LabeledSample<M::Input>],
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    if source.len() < 2 {
        return Err(Error::InvalidArgument("delta_P needs at least two source samples".into()));
    }
    let (cal, eval) = source.split_at(source.len() / 2);
    let pseudo_scores = cal
        .iter()
        .map(|s| model.logits(&s.x).map(|l| all_scores(&l)[argmax(&l)]))
        .collect::<Result<Vec<_>>>()?;
    let threshold = calibrate(&pseudo_scores, alpha)?.threshold;
    let coverage = ScoredBatch::labeled(model, eval)?.coverage(threshold, 0.0)?;
    Ok((1.0 - alpha) - coverage)
}

/// Slack making the relaxed-set bound match the source-corrected level:
/// `τ = 2(L_h(f,Q) / (L_h(f,P) - Δ_P) - 1)`, clipped below at 0.
pub fn tau_design(l_h_source: f64, l_h_target: f64, delta_p: f64) -> Result<f64> {
    let denom = l_h_source - delta_p;
    if !(denom > 0.0) {
        return Err(Error::DegenerateHingeCorrection(denom));
    }
    Ok((2.0 * (l_h_target / denom - 1.0)).max(0.0))
}

/// `|E_P f - E_Q f| ≤ L · W1(P, Q)` with `1e-9` slack.
pub fn kr_check(f_values_p: &[f64], f_values_q: &[f64], lipschitz: f64, w1: f64) -> bool {
    if f_values_p.is_empty() || f_values_q.is_empty() {
        return false;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(f_values_p) - mean(f_values_q)).abs() <= lipschitz * w1 + 1e-9
}

/// Ingredients of the coverage bounds. Target losses are oracle quantities
/// (computed with target labels) and are optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub alpha: f64,
    pub l_r_source: f64,
    pub l_h_source: f64,
    pub l_r_target: Option<f64>,
    pub l_h_target: Option<f64>,
    pub l_gamma: f64,
    pub rho: f64,
    pub rho_mix: f64,
    pub sup_density: f64,
    /// Measured `W1(s#P̂, s#Q̂)`, when both score samples are available.
    pub w1_measured: Option<f64>,
    pub delta_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub alpha: f64,
    /// `L_γ ρ`
    pub w1_score_bound: f64,
    /// `sup p · W1` with the measured score distance.
    pub gap_bound_eq9: Option<f64>,
    /// `sup p · L_γ ρ`
    pub gap_bound_composed: f64,
    pub theorem2_lower: f64,
    /// `(τ, bound)` pairs, present when target losses are known.
    pub corollary1_lower: Vec<(f64, f64)>,
    pub tau_sigma: Option<f64>,
    pub delta_p: Option<f64>,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        let named = [
            ("l_r_source", Some(self.l_r_source)),
            ("l_h_source", Some(self.l_h_source)),
            ("l_r_target", self.l_r_target),
            ("l_h_target", self.l_h_target),
            ("l_gamma", Some(self.l_gamma)),
            ("rho", Some(self.rho)),
            ("rho_mix", Some(self.rho_mix)),
            ("sup_density", Some(self.sup_density)),
            ("w1_measured", self.w1_measured),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative, got {v}")));
                }
            }
        }
        Ok(())
    }

    /// Evaluate every bound; `tau_grid` tabulates the relaxed-set bound.
    pub fn evaluate(&self, tau_grid: &[f64]) -> Result<BoundReport> {
        self.validate()?;
        let corollary1_lower = match (self.l_r_target, self.l_h_target) {
            (Some(lr), Some(lh)) => tau_grid
                .iter()
                .map(|&t| corollary1_lower_bound(self.alpha, lr, lh, t).map(|b| (t, b)))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let tau_sigma = match (self.l_h_target, self.delta_p) {
            (Some(lh), Some(dp)) => Some(tau_design(self.l_h_source, lh, dp)?),
            _ => None,
        };
        Ok(BoundReport {
            alpha: self.alpha,
            w1_score_bound: lemma_w1_score_bound(self.l_gamma, self.rho),
            gap_bound_eq9: self.w1_measured.map(|w| eq9_gap_bound(self.sup_density, w)),
            gap_bound_composed: eq9_gap_bound(self.sup_density, lemma_w1_score_bound(self.l_gamma, self.rho)),
            theorem2_lower: theorem2_lower_bound(self.alpha, self.l_r_source, self.l_gamma, self.rho_mix)?,
            corollary1_lower,
            tau_sigma,
            delta_p: self.delta_p,
        })
    }
}
