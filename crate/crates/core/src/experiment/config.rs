//! Experiment configuration: one self-contained JSON document with defaults
//! for every field.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::UncertaintyGrid;
use crate::synthetic::{ClipMode, ShiftSpec, SourceSpec, TrainConfig};

/// Calibration strategy. `TauAdjusted` is not selectable in `methods`; its
/// rows appear when a τ policy other than `none` is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Source,
    HardPseudo,
    SourceTuned,
    Oracle,
    TauAdjusted,
}

impl Method {
    pub const CALIBRATION: [Method; 4] = [Method::Source, Method::HardPseudo, Method::SourceTuned, Method::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::HardPseudo => "hard_pseudo",
            Method::SourceTuned => "source_tuned",
            Method::Oracle => "oracle",
            Method::TauAdjusted => "tau_adjusted",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Source, Method::HardPseudo, Method::SourceTuned, Method::Oracle, Method::TauAdjusted]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// How the relaxation slack `τ` of the adjusted arm is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    #[default]
    None,
    Fixed(f64),
    /// Per-σ slack from the source-corrected hinge-loss rule.
    TauDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: SourceSpec,
    /// Shift at strength `σ = 1`; strength `σ` scales it by `σ`.
    pub shift: ShiftSpec,
    pub sigmas: Vec<f64>,
    pub alpha: f64,
    /// Training sample for the classifier (drawn once per run).
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    /// Labeled validation batch used for the loss terms of the bounds.
    pub n_loss: usize,
    pub trials: usize,
    pub seed: u64,
    /// Uncertainty grid for source tuning; `null` means 32 points on `[0, ln K]` plus `+∞`.
    pub u_grid: Option<Vec<f64>>,
    pub tau: TauPolicy,
    /// Slacks at which the relaxed-set bound is tabulated.
    pub tau_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
}

fn default_source() -> SourceSpec {
    // equilateral triangle of class means
    let radius = 2.0;
    let class_means = (0..3)
        .map(|k| {
            let angle = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect();
    SourceSpec { class_means, scale: 1.0, priors: vec![1.0 / 3.0; 3] }
}

fn default_shift(source: &SourceSpec) -> ShiftSpec {
    // each class moves one unit toward the centroid, plus clipped noise
    let translations = source
        .class_means
        .iter()
        .map(|m| {
            let len = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.iter().map(|v| -v / len).collect()
        })
        .collect();
    ShiftSpec { translations, noise_scale: 0.3, clip_radius: 0.5, clip_mode: ClipMode::Reject }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let source = default_source();
        let shift = default_shift(&source);
        Self {
            source,
            shift,
            sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.25],
            alpha: 0.2,
            n_train: 2000,
            n_cal: 2000,
            n_test: 5000,
            n_loss: 20_000,
            trials: 200,
            seed: 0,
            u_grid: None,
            tau: TauPolicy::None,
            tau_grid: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            methods: Method::CALIBRATION.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn classes(&self) -> usize {
        self.source.classes()
    }

    pub fn uncertainty_grid(&self) -> Result<UncertaintyGrid> {
        match &self.u_grid {
            Some(v) => UncertaintyGrid::new(v.clone()),
            None => Ok(UncertaintyGrid::default_for(self.classes())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.source.validate()?;
        self.shift.validate(self.source.classes(), self.source.dim())?;
        crate::error::check_alpha(self.alpha)?;
        if self.sigmas.is_empty() {
            return bad("sigma grid must be nonempty".into());
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("sigma values must be finite and nonnegative".into());
        }
        if self.sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return bad("sigma grid must be strictly ascending".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        for (name, n) in [("n_train", self.n_train), ("n_cal", self.n_cal), ("n_test", self.n_test), ("n_loss", self.n_loss)] {
            if n == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.methods.contains(&Method::TauAdjusted) {
            return bad("tau_adjusted is enabled through the tau policy, not the method list".into());
        }
        if self.methods.iter().enumerate().any(|(i, m)| self.methods[..i].contains(m)) {
            return bad("duplicate method".into());
        }
        if let TauPolicy::Fixed(t) = self.tau {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::NegativeTau(t));
            }
        }
        if self.tau_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return bad("tau grid values must be finite and nonnegative".into());
        }
        self.uncertainty_grid()?;
        Ok(())
    }

    /// Methods in record order, including the τ-adjusted arm when enabled.
    pub fn record_methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Method::CALIBRATION.into_iter().filter(|m| self.methods.contains(m)).collect();
        if self.tau != TauPolicy::None {
            out.push(Method::TauAdjusted);
        }
        out
    }
}
