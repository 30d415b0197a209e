//! Synthetic source/target generation with a certified shift bound, and a
//! small multinomial logistic regression trainer.
//!
//! The source is a mixture of isotropic Gaussians. The target applies, per
//! class `y`, a translation `t_y` plus Gaussian noise truncated to the ball of
//! radius `r`. Every source point is paired with its shifted copy, so
//! `‖x' - x‖ ≤ ‖t_y‖ + r` holds for every pair and `ρ = max_y (‖t_y‖ + r)`
//! bounds the per-class W∞ shift. Labels are never changed, so source and
//! target share class priors.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scores::{LabeledSample, LinearLogitMap};

/// Rejection attempts before the noise draw falls back to radial projection.
const MAX_REJECTIONS: usize = 10_000;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub class_means: Vec<Vec<f64>>,
    /// Standard deviation of the isotropic class-conditional Gaussians.
    pub scale: f64,
    pub priors: Vec<f64>,
}

impl SourceSpec {
    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if let Some(bad) = self.class_means.iter().find(|m| m.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, actual: bad.len() });
        }
        if self.class_means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class means"));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be finite and nonnegative, got {}", self.scale)));
        }
        if self.priors.len() != k {
            return Err(Error::SizeMismatch { left: k, right: self.priors.len() });
        }
        if self.priors.iter().any(|&p| !(p >= 0.0)) || (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("priors must be a probability vector".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Resample until the noise lies inside the ball.
    #[default]
    Reject,
    /// Scale oversized noise back onto the sphere.
    Project,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub translations: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub clip_radius: f64,
    #[serde(default)]
    pub clip_mode: ClipMode,
}

impl ShiftSpec {
    pub fn none(classes: usize, dim: usize) -> Self {
        Self {
            translations: vec![vec![0.0; dim]; classes],
            noise_scale: 0.0,
            clip_radius: 0.0,
            clip_mode: ClipMode::Reject,
        }
    }

    pub fn validate(&self, classes: usize, dim: usize) -> Result<()> {
        if self.translations.len() != classes {
            return Err(Error::SizeMismatch { left: classes, right: self.translations.len() });
        }
        if let Some(bad) = self.translations.iter().find(|t| t.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, actual: bad.len() });
        }
        if self.translations.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("translations"));
        }
        for (name, v) in [("noise_scale", self.noise_scale), ("clip_radius", self.clip_radius)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Shift of strength `sigma`: translations, noise and radius all scale by `sigma`.
    pub fn scaled(&self, sigma: f64) -> Self {
        Self {
            translations: self.translations.iter().map(|t| t.iter().map(|v| v * sigma).collect()).collect(),
            noise_scale: self.noise_scale * sigma,
            clip_radius: self.clip_radius * sigma,
            clip_mode: self.clip_mode,
        }
    }

    /// `‖t_y‖ + r` for each class.
    pub fn per_class_bound(&self) -> Vec<f64> {
        self.translations.iter().map(|t| norm(t) + self.clip_radius).collect()
    }

    /// `ρ = max_y (‖t_y‖ + r)`
    pub fn rho_true(&self) -> f64 {
        self.per_class_bound().into_iter().fold(0.0, f64::max)
    }

    /// `Σ_y P_Y(y) (‖t_y‖ + r)`, an upper bound on `ρ_mix` because every pair
    /// of the explicit coupling moves by at most `‖t_y‖ + r`.
    pub fn rho_mix_bound(&self, priors: &[f64]) -> Result<f64> {
        crate::bounds::rho_mix(priors, &self.per_class_bound())
    }

    fn noise<R: Rng>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        if self.noise_scale == 0.0 || self.clip_radius == 0.0 {
            return vec![0.0; dim];
        }
        let draw = |rng: &mut R| -> Vec<f64> {
            (0..dim).map(|_| self.noise_scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        if self.clip_mode == ClipMode::Reject {
            for _ in 0..MAX_REJECTIONS {
                let e = draw(rng);
                if norm(&e) <= self.clip_radius {
                    return e;
                }
            }
        }
        let e = draw(rng);
        let len = norm(&e);
        if len <= self.clip_radius {
            e
        } else {
            e.iter().map(|v| v * self.clip_radius / len).collect()
        }
    }
}

/// Draw `n` labeled samples from the source mixture.
pub fn generate_source(spec: &SourceSpec, n: usize, stream: &RngStream) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = stream.rng();
    let labels = WeightedIndex::new(&spec.priors).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let y = labels.sample(&mut rng);
            let x = spec.class_means[y]
                .iter()
                .map(|m| m + spec.scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            LabeledSample::new(x, y)
        })
        .collect())
}

/// `x' = x + t_y + ε` with `‖ε‖ ≤ r`; the label is unchanged.
pub fn apply_shift<R: Rng>(sample: &LabeledSample, shift: &ShiftSpec, rng: &mut R) -> Result<LabeledSample> {
    let t = shift
        .translations
        .get(sample.y)
        .ok_or(Error::InvalidLabel { label: sample.y, classes: shift.translations.len() })?;
    if t.len() != sample.x.len() {
        return Err(Error::DimensionMismatch { expected: sample.x.len(), actual: t.len() });
    }
    let eps = shift.noise(sample.x.len(), rng);
    let x = sample.x.iter().zip(t).zip(&eps).map(|((x, t), e)| x + t + e).collect();
    Ok(LabeledSample::new(x, sample.y))
}

/// Shift every sample with one generator positioned at `stream`; output order
/// matches input order so `(samples[i], shifted[i])` are coupled pairs.
pub fn shift_batch(samples: &[LabeledSample], shift: &ShiftSpec, stream: &RngStream) -> Result<Vec<LabeledSample>> {
    let mut rng = stream.rng();
    samples.iter().map(|s| apply_shift(s, shift, &mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub map: LinearLogitMap,
    /// Mean cross-entropy before training and after each epoch.
    pub loss_history: Vec<f64>,
}

fn cross_entropy(w: &[Vec<f64>], b: &[f64], data: &[LabeledSample]) -> f64 {
    let mut total = 0.0;
    for s in data {
        let z: Vec<f64> = w.iter().zip(b).map(|(wk, bk)| wk.iter().zip(&s.x).map(|(p, q)| p * q).sum::<f64>() + bk).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[s.y];
    }
    total / data.len() as f64
}

fn gradient(w: &[Vec<f64>], b: &[f64], data: &[LabeledSample]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = w.len();
    let d = w[0].len();
    let mut gw = vec![vec![0.0; d]; k];
    let mut gb = vec![0.0; k];
    for s in data {
        let z: Vec<f64> = w.iter().zip(b).map(|(wk, bk)| wk.iter().zip(&s.x).map(|(p, q)| p * q).sum::<f64>() + bk).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        for c in 0..k {
            let r = e[c] / sum - if c == s.y { 1.0 } else { 0.0 };
            gb[c] += r;
            for (g, x) in gw[c].iter_mut().zip(&s.x) {
                *g += r * x;
            }
        }
    }
    let n = data.len() as f64;
    gw.iter_mut().flatten().for_each(|g| *g /= n);
    gb.iter_mut().for_each(|g| *g /= n);
    (gw, gb)
}

/// Multinomial logistic regression by full-batch gradient descent from zero
/// weights. A step that would raise the loss is halved until it does not, so
/// the recorded loss never increases.
pub fn train_classifier_with_history(
    source: &[LabeledSample],
    classes: usize,
    config: &TrainConfig,
) -> Result<TrainedClassifier> {
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    let first = source.first().ok_or(Error::Empty("training sample"))?;
    let d = first.x.len();
    let mut seen = vec![false; classes];
    for s in source {
        if s.y >= classes {
            return Err(Error::InvalidLabel { label: s.y, classes });
        }
        if s.x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: s.x.len() });
        }
        seen[s.y] = true;
    }
    if let Some(missing) = seen.iter().position(|&v| !v) {
        return Err(Error::MissingClass(missing));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }

    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    let mut loss = cross_entropy(&w, &b, source);
    let mut history = vec![loss];
    for _ in 0..config.epochs {
        let (gw, gb) = gradient(&w, &b, source);
        let mut step = config.learning_rate;
        let mut accepted = None;
        for _ in 0..60 {
            let nw: Vec<Vec<f64>> = w.iter().zip(&gw).map(|(r, g)| r.iter().zip(g).map(|(p, q)| p - step * q).collect()).collect();
            let nb: Vec<f64> = b.iter().zip(&gb).map(|(p, q)| p - step * q).collect();
            let nl = cross_entropy(&nw, &nb, source);
            if nl <= loss {
                accepted = Some((nw, nb, nl));
                break;
            }
            step *= 0.5;
        }
        if let Some((nw, nb, nl)) = accepted {
            w = nw;
            b = nb;
            loss = nl;
        }
        history.push(loss);
    }
    if history.windows(2).any(|p| p[1] > p[0]) {
        return Err(Error::Invariant("training loss increased".into()));
    }
    Ok(TrainedClassifier { map: LinearLogitMap::new(w, b)?, loss_history: history })
}

pub fn train_classifier(source: &[LabeledSample], classes: usize, config: &TrainConfig) -> Result<LinearLogitMap> {
    train_classifier_with_history(source, classes, config).map(|t| t.map)
}

/// Write `split,label,x_0,...,x_{d-1}` rows; labels are written 1-based.
pub fn write_dataset_csv<W: Write>(out: &mut W, splits: &[(&str, &[LabeledSample])]) -> Result<()> {
    let d = splits.iter().flat_map(|(_, s)| s.first()).map(|s| s.x.len()).next().unwrap_or(0);
    let mut header = String::from("split,label");
    for j in 0..d {
        header.push_str(&format!(",x_{j}"));
    }
    writeln!(out, "{header}")?;
    for (tag, samples) in splits {
        for s in samples.iter() {
            let mut line = format!("{tag},{}", s.y + 1);
            for v in &s.x {
                line.push_str(&format!(",{v}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::predict;

    fn spec() -> SourceSpec {
        SourceSpec {
            class_means: vec![vec![2.0, 0.0], vec![-1.0, 1.7], vec![-1.0, -1.7]],
            scale: 0.8,
            priors: vec![0.5, 0.3, 0.2],
        }
    }

    #[test]
    fn generate_edge_cases() {
        let s = RngStream::new(1, 0);
        assert!(generate_source(&spec(), 0, &s).unwrap().is_empty());
        let still = SourceSpec { scale: 0.0, ..spec() };
        for smp in generate_source(&still, 50, &s).unwrap() {
            assert_eq!(smp.x, still.class_means[smp.y]);
        }
        let onehot = SourceSpec { priors: vec![0.0, 1.0, 0.0], ..spec() };
        assert!(generate_source(&onehot, 100, &s).unwrap().iter().all(|smp| smp.y == 1));
        assert_eq!(generate_source(&spec(), 30, &s).unwrap(), generate_source(&spec(), 30, &s).unwrap());
        let bad = SourceSpec { priors: vec![0.5, 0.5, 0.5], ..spec() };
        assert!(generate_source(&bad, 5, &s).is_err());
    }

    #[test]
    fn shift_edge_cases() {
        let mut rng = RngStream::new(2, 0).rng();
        let smp = LabeledSample::new(vec![0.3, -0.2], 1);
        let id = ShiftSpec::none(3, 2);
        assert_eq!(apply_shift(&smp, &id, &mut rng).unwrap(), smp);
        let mut tr = ShiftSpec::none(3, 2);
        tr.translations[1] = vec![1.0, 0.0];
        let moved = apply_shift(&smp, &tr, &mut rng).unwrap();
        assert_eq!(moved.y, 1);
        assert_eq!(crate::transport::winf_coupled(std::slice::from_ref(&smp.x), &[moved.x]).unwrap(), 1.0);
        // positive noise with zero radius is fully clipped
        let clipped = ShiftSpec { noise_scale: 1.0, ..ShiftSpec::none(3, 2) };
        assert_eq!(apply_shift(&smp, &clipped, &mut rng).unwrap(), smp);
    }

    #[test]
    fn shifted_pairs_respect_bound() {
        for mode in [ClipMode::Reject, ClipMode::Project] {
            let shift = ShiftSpec {
                translations: vec![vec![0.5, 0.5], vec![-1.0, 0.0], vec![0.0, 0.0]],
                noise_scale: 0.7,
                clip_radius: 0.6,
                clip_mode: mode,
            };
            let base = generate_source(&spec(), 100_000, &RngStream::new(3, 0)).unwrap();
            let shifted = shift_batch(&base, &shift, &RngStream::new(3, 1)).unwrap();
            let bounds = shift.per_class_bound();
            for (a, b) in base.iter().zip(&shifted) {
                assert_eq!(a.y, b.y);
                let d: f64 = a.x.iter().zip(&b.x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                assert!(d <= bounds[a.y] + 1e-12);
                assert!(d <= shift.rho_true() + 1e-12);
            }
        }
    }

    #[test]
    fn scaled_shift_and_rho() {
        let shift = ShiftSpec {
            translations: vec![vec![3.0, 4.0], vec![0.0, 1.0]],
            noise_scale: 0.5,
            clip_radius: 1.0,
            clip_mode: ClipMode::Reject,
        };
        assert_eq!(shift.rho_true(), 6.0);
        let half = shift.scaled(0.5);
        assert_eq!(half.rho_true(), 3.0);
        assert_eq!(half.noise_scale, 0.25);
        assert_eq!(shift.rho_mix_bound(&[0.5, 0.5]).unwrap(), 4.0);
        assert_eq!(shift.scaled(0.0).rho_true(), 0.0);
    }

    fn accuracy(map: &LinearLogitMap, data: &[LabeledSample]) -> f64 {
        data.iter().filter(|s| predict(map, &s.x).unwrap() == s.y).count() as f64 / data.len() as f64
    }

    #[test]
    fn trains_separable_data() {
        let two = SourceSpec { class_means: vec![vec![2.0, 0.0], vec![-2.0, 0.0]], scale: 0.5, priors: vec![0.5, 0.5] };
        let data = generate_source(&two, 500, &RngStream::new(4, 0)).unwrap();
        let trained = train_classifier_with_history(&data, 2, &TrainConfig::default()).unwrap();
        assert!(accuracy(&trained.map, &data) >= 0.95);
        assert!(trained.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(trained.loss_history.len(), 201);
    }

    #[test]
    fn chance_level_on_random_labels() {
        let mut rng = RngStream::new(5, 0).rng();
        let data: Vec<LabeledSample> = (0..4000)
            .map(|_| LabeledSample::new(vec![rng.sample(StandardNormal), rng.sample(StandardNormal)], rng.random_range(0..2)))
            .collect();
        let map = train_classifier(&data, 2, &TrainConfig::default()).unwrap();
        let acc = accuracy(&map, &data);
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn far_apart_points_are_separated() {
        let data = vec![
            LabeledSample::new(vec![50.0, 0.0], 0),
            LabeledSample::new(vec![-50.0, 0.0], 1),
            LabeledSample::new(vec![0.0, 50.0], 2),
        ];
        let trained = train_classifier_with_history(&data, 3, &TrainConfig::default()).unwrap();
        assert_eq!(accuracy(&trained.map, &data), 1.0);
        assert!(trained.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn missing_class_rejected() {
        let data = vec![LabeledSample::new(vec![1.0], 0), LabeledSample::new(vec![2.0], 0)];
        assert_eq!(train_classifier(&data, 2, &TrainConfig::default()).unwrap_err(), Error::MissingClass(1));
    }

    #[test]
    fn dataset_csv_layout() {
        let s = vec![LabeledSample::new(vec![0.5, -1.0], 0)];
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &[("source_cal", &s)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "split,label,x_0,x_1\nsource_cal,1,0.5,-1\n");
    }
}
