//! Trial data with sealed target labels.
//!
//! Calibration code receives an [`UnlabeledTarget`], which has no label field
//! at all. Labels live in [`TargetSplit`] and come out only through
//! [`TargetSplit::reveal`], whose [`Reveal`] argument names the two permitted
//! consumers: the oracle arm and final evaluation.

use crate::error::{Error, Result};
use crate::scores::LabeledSample;

/// Target inputs without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledTarget {
    inputs: Vec<Vec<f64>>,
}

impl UnlabeledTarget {
    pub fn new(inputs: Vec<Vec<f64>>) -> Self {
        Self { inputs }
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reveal {
    Oracle,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    unlabeled: UnlabeledTarget,
    labels: Option<Vec<usize>>,
}

impl TargetSplit {
    pub fn labeled(samples: Vec<LabeledSample>) -> Self {
        let (inputs, labels): (Vec<_>, Vec<_>) = samples.into_iter().map(|s| (s.x, s.y)).unzip();
        Self { unlabeled: UnlabeledTarget::new(inputs), labels: Some(labels) }
    }

    pub fn unlabeled_only(inputs: Vec<Vec<f64>>) -> Self {
        Self { unlabeled: UnlabeledTarget::new(inputs), labels: None }
    }

    pub fn unlabeled(&self) -> &UnlabeledTarget {
        &self.unlabeled
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unlabeled.is_empty()
    }

    pub fn reveal(&self, purpose: Reveal) -> Result<Vec<LabeledSample>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{purpose:?} needs target labels, but none were provided")))?;
        Ok(self.unlabeled.inputs.iter().cloned().zip(labels).map(|(x, &y)| LabeledSample::new(x, y)).collect())
    }
}

/// Everything one trial's calibration methods and evaluation consume.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub source_cal: Vec<LabeledSample>,
    pub target_cal: TargetSplit,
    pub target_test: TargetSplit,
}
