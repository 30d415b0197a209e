//! The evaluation protocol: per-trial calibration arms, σ sweeps, the τ
//! experiment, bound reports, tuning traces and replay audits.
//!
//! Random streams are addressed by purpose and trial id, never by σ, so every
//! shift level sees the same base samples, noise directions and uniform
//! labels (common random numbers). Work fans out over (σ, trial) pairs and is
//! collected in index order, so output does not depend on the thread count.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    corollary1_lower_bound, delta_p_estimate, sup_density_estimate, tau_design, theorem2_lower_bound, BoundInputs,
    BoundReport,
};
use crate::conformal::{calibrate, ScoredBatch, Threshold};
use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, Method, TauPolicy};
use crate::experiment::data::{Reveal, TargetSplit, TrialData, UnlabeledTarget};
use crate::experiment::output::{aggregate, fmt_sig, AggregateRow, ParsedRecord, TrialRecord};
use crate::logit_table::{LogitTable, SplitTag};
use crate::pseudo::{pseudo_calibrate, source_tuned_calibrate, CoveragePoint, LabelRule, UncertaintyGrid};
use crate::rng::RngStream;
use crate::scores::{population_hinge_loss, population_ramp_loss, LabeledSample, LinearLogitMap, LogitModel};
use crate::synthetic::{generate_source, shift_batch, train_classifier_with_history};
use crate::transport::w1_1d;

/// Names of the bound inputs computed with target labels.
pub const ORACLE_INPUTS: [&str; 3] = ["l_r_target", "l_h_target", "w1_measured"];

/// Per-σ quantities shared by every trial at that shift level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSummary {
    pub sigma: Option<f64>,
    pub rho_true: Option<f64>,
    pub rho_mix: Option<f64>,
    pub thm2_bound: Option<f64>,
    /// Oracle input: ramp loss on a labeled target batch.
    pub l_r_target: Option<f64>,
    /// Oracle input: hinge loss on a labeled target batch.
    pub l_h_target: Option<f64>,
    /// Slack of the τ-adjusted arm, when a τ policy is active.
    pub tau: Option<f64>,
}

impl SigmaSummary {
    fn cor1(&self, alpha: f64, tau: f64) -> Result<Option<f64>> {
        match (self.l_r_target, self.l_h_target) {
            (Some(lr), Some(lh)) => corollary1_lower_bound(alpha, lr, lh, tau).map(Some),
            _ => Ok(None),
        }
    }
}

/// The model plus the settings every arm needs.
pub struct Protocol<'a, M> {
    pub model: &'a M,
    pub alpha: f64,
    pub grid: &'a UncertaintyGrid,
}

impl<M: LogitModel<Input = Vec<f64>>> Protocol<'_, M> {
    fn hard_pseudo(&self, target: &UnlabeledTarget) -> Result<Threshold> {
        Ok(pseudo_calibrate(self.model, target.inputs(), self.alpha, &LabelRule::Hard)?.threshold)
    }

    fn source_tuned(&self, source: &[LabeledSample], target: &UnlabeledTarget, stream: &RngStream) -> Result<(Threshold, f64)> {
        let (tuning, cal) = source_tuned_calibrate(self.model, source, target.inputs(), self.alpha, self.grid, stream)?;
        Ok((cal.threshold, tuning.u_star))
    }

    /// One arm on one trial. `eval` holds the scored, labeled target test split.
    pub fn run_method(
        &self,
        method: Method,
        data: &TrialData,
        eval: &ScoredBatch,
        summary: &SigmaSummary,
        trial: usize,
        stream: &RngStream,
    ) -> Result<TrialRecord> {
        let mut u_star = None;
        let mut tau = None;
        let threshold = match method {
            Method::Source => {
                let scores = ScoredBatch::labeled(self.model, &data.source_cal)?.true_scores().expect("labeled");
                calibrate(&scores, self.alpha)?.threshold
            }
            Method::HardPseudo => self.hard_pseudo(data.target_cal.unlabeled())?,
            Method::SourceTuned => {
                let (q, u) = self.source_tuned(&data.source_cal, data.target_cal.unlabeled(), &stream.named("source_tuned"))?;
                u_star = Some(u);
                q
            }
            Method::Oracle => {
                let labeled = data.target_cal.reveal(Reveal::Oracle)?;
                let scores = ScoredBatch::labeled(self.model, &labeled)?.true_scores().expect("labeled");
                calibrate(&scores, self.alpha)?.threshold
            }
            Method::TauAdjusted => {
                tau = Some(summary.tau.ok_or_else(|| Error::InvalidArgument("tau_adjusted needs a tau policy".into()))?);
                self.hard_pseudo(data.target_cal.unlabeled())?
            }
        };
        let slack = tau.unwrap_or(0.0);
        let record = TrialRecord {
            method,
            sigma: summary.sigma,
            trial,
            threshold,
            u_star,
            tau,
            coverage: eval.coverage(threshold, slack)?,
            ess: eval.expected_set_size(threshold, slack)?,
            thm2_bound: summary.thm2_bound,
            cor1_bound: summary.cor1(self.alpha, slack)?,
        };
        record.check(self.model.num_classes())?;
        Ok(record)
    }

    pub fn run_trial(
        &self,
        methods: &[Method],
        data: &TrialData,
        summary: &SigmaSummary,
        trial: usize,
        stream: &RngStream,
    ) -> Result<Vec<TrialRecord>> {
        let eval = ScoredBatch::labeled(self.model, &data.target_test.reveal(Reveal::Evaluation)?)?;
        methods.iter().map(|&m| self.run_method(m, data, &eval, summary, trial, stream)).collect()
    }
}

/// Raw synthetic samples of one trial, with each target point paired to the
/// source point it was shifted from.
#[derive(Debug, Clone)]
pub struct SyntheticTrial {
    pub source_cal: Vec<LabeledSample>,
    pub source_test: Vec<LabeledSample>,
    pub target_cal_base: Vec<LabeledSample>,
    pub target_cal: Vec<LabeledSample>,
    pub target_test_base: Vec<LabeledSample>,
    pub target_test: Vec<LabeledSample>,
}

impl SyntheticTrial {
    pub fn sealed(&self) -> TrialData {
        TrialData {
            source_cal: self.source_cal.clone(),
            target_cal: TargetSplit::labeled(self.target_cal.clone()),
            target_test: TargetSplit::labeled(self.target_test.clone()),
        }
    }
}

/// Classifier, losses and per-σ summaries for a synthetic run.
pub struct SyntheticSetup {
    pub config: ExperimentConfig,
    pub model: LinearLogitMap,
    pub train_loss_history: Vec<f64>,
    pub l_gamma: f64,
    pub l_r_source: f64,
    pub l_h_source: f64,
    pub delta_p: f64,
    pub summaries: Vec<SigmaSummary>,
    grid: UncertaintyGrid,
    root: RngStream,
    loss_source: Vec<LabeledSample>,
}

impl SyntheticSetup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed, 0);
        let k = config.classes();
        let train = generate_source(&config.source, config.n_train, &root.named("train"))?;
        let trained = train_classifier_with_history(&train, k, &config.train)?;
        let model = trained.map;
        let loss_source = generate_source(&config.source, config.n_loss, &root.named("loss"))?;
        let l_r_source = population_ramp_loss(&model, &loss_source)?;
        let l_h_source = population_hinge_loss(&model, &loss_source)?;
        let delta_p = delta_p_estimate(&model, &loss_source, config.alpha)?;
        let l_gamma = model.lipschitz_bound();
        info!("classifier: L_gamma={l_gamma:.4} L_r(P)={l_r_source:.4} L_h(P)={l_h_source:.4} delta_P={delta_p:.4}");

        let mut setup = Self {
            config: config.clone(),
            model,
            train_loss_history: trained.loss_history,
            l_gamma,
            l_r_source,
            l_h_source,
            delta_p,
            summaries: Vec::new(),
            grid: config.uncertainty_grid()?,
            root,
            loss_source,
        };
        setup.summaries = (0..config.sigmas.len()).map(|i| setup.summarize(i)).collect::<Result<_>>()?;
        Ok(setup)
    }

    /// Labeled target validation batch at shift level `sigma_index`.
    pub fn loss_target(&self, sigma_index: usize) -> Result<Vec<LabeledSample>> {
        let shift = self.config.shift.scaled(self.config.sigmas[sigma_index]);
        shift_batch(&self.loss_source, &shift, &self.root.named("loss_shift"))
    }

    pub fn loss_source(&self) -> &[LabeledSample] {
        &self.loss_source
    }

    fn summarize(&self, sigma_index: usize) -> Result<SigmaSummary> {
        let cfg = &self.config;
        let sigma = cfg.sigmas[sigma_index];
        let shift = cfg.shift.scaled(sigma);
        let rho_mix = shift.rho_mix_bound(&cfg.source.priors)?;
        let target = self.loss_target(sigma_index)?;
        let l_r_target = population_ramp_loss(&self.model, &target)?;
        let l_h_target = population_hinge_loss(&self.model, &target)?;
        info!("sigma={sigma}: oracle inputs L_r(Q)={l_r_target:.4} L_h(Q)={l_h_target:.4} (target labels used)");
        let tau = match cfg.tau {
            TauPolicy::None => None,
            TauPolicy::Fixed(t) => Some(t),
            TauPolicy::TauDesign => Some(tau_design(self.l_h_source, l_h_target, self.delta_p)?),
        };
        Ok(SigmaSummary {
            sigma: Some(sigma),
            rho_true: Some(shift.rho_true()),
            rho_mix: Some(rho_mix),
            thm2_bound: Some(theorem2_lower_bound(cfg.alpha, self.l_r_source, self.l_gamma, rho_mix)?),
            l_r_target: Some(l_r_target),
            l_h_target: Some(l_h_target),
            tau,
        })
    }

    fn trial_stream(&self, trial: usize) -> RngStream {
        self.root.named("trial").child(trial as u64)
    }

    /// Regenerates the raw samples of `(sigma_index, trial)`.
    pub fn trial(&self, sigma_index: usize, trial: usize) -> Result<SyntheticTrial> {
        let cfg = &self.config;
        let s = self.trial_stream(trial);
        let shift = cfg.shift.scaled(cfg.sigmas[sigma_index]);
        let draw = |name: &str, n: usize| generate_source(&cfg.source, n, &s.named(name));
        let target_cal_base = draw("target_cal", cfg.n_cal)?;
        let target_test_base = draw("target_test", cfg.n_test)?;
        Ok(SyntheticTrial {
            source_cal: draw("source_cal", cfg.n_cal)?,
            source_test: draw("source_test", cfg.n_test)?,
            target_cal: shift_batch(&target_cal_base, &shift, &s.named("shift_cal"))?,
            target_test: shift_batch(&target_test_base, &shift, &s.named("shift_test"))?,
            target_cal_base,
            target_test_base,
        })
    }

    pub fn protocol(&self) -> Protocol<'_, LinearLogitMap> {
        Protocol { model: &self.model, alpha: self.config.alpha, grid: &self.grid }
    }

    /// Every record of the configured methods, ordered by (σ, trial, method).
    pub fn run(&self, methods: &[Method]) -> Result<Vec<TrialRecord>> {
        let cfg = &self.config;
        let tasks: Vec<(usize, usize)> =
            (0..cfg.sigmas.len()).flat_map(|i| (0..cfg.trials).map(move |t| (i, t))).collect();
        let protocol = self.protocol();
        let per_task = tasks
            .par_iter()
            .map(|&(i, t)| {
                let data = self.trial(i, t)?.sealed();
                protocol.run_trial(methods, &data, &self.summaries[i], t, &self.trial_stream(t).named("methods"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(per_task.into_iter().flatten().collect())
    }

    /// Tuning trace for trial 0 at every σ: the source coverage curve and
    /// the selected `u★` with its target threshold.
    pub fn tune_trace(&self) -> Result<Vec<TuneTrace>> {
        (0..self.config.sigmas.len())
            .map(|i| {
                let data = self.trial(i, 0)?.sealed();
                let stream = self.trial_stream(0).named("methods").named("source_tuned");
                let (tuning, cal) = source_tuned_calibrate(
                    &self.model,
                    &data.source_cal,
                    data.target_cal.unlabeled().inputs(),
                    self.config.alpha,
                    &self.grid,
                    &stream,
                )?;
                Ok(TuneTrace {
                    sigma: Some(self.config.sigmas[i]),
                    u_star: tuning.u_star,
                    target_threshold: cal.threshold,
                    curve: tuning.coverage_curve,
                })
            })
            .collect()
    }

    /// Bound inputs and evaluated bounds for every σ.
    pub fn bound_reports(&self) -> Result<Vec<SigmaBounds>> {
        let source_scores = ScoredBatch::labeled(&self.model, &self.loss_source)?.true_scores().expect("labeled");
        let sup_density = sup_density_estimate(&source_scores)?;
        (0..self.config.sigmas.len())
            .map(|i| {
                let s = &self.summaries[i];
                let target = self.loss_target(i)?;
                let target_scores = ScoredBatch::labeled(&self.model, &target)?.true_scores().expect("labeled");
                let inputs = BoundInputs {
                    alpha: self.config.alpha,
                    l_r_source: self.l_r_source,
                    l_h_source: self.l_h_source,
                    l_r_target: s.l_r_target,
                    l_h_target: s.l_h_target,
                    l_gamma: self.l_gamma,
                    rho: s.rho_true.expect("synthetic"),
                    rho_mix: s.rho_mix.expect("synthetic"),
                    sup_density,
                    w1_measured: Some(w1_1d(&source_scores, &target_scores)?),
                    delta_p: Some(self.delta_p),
                };
                let report = evaluate_bounds(&inputs, &self.config.tau_grid)?;
                Ok(SigmaBounds { sigma: s.sigma, inputs, report })
            })
            .collect()
    }
}

/// Evaluates the bounds, tolerating a degenerate hinge correction (no τ(σ)).
fn evaluate_bounds(inputs: &BoundInputs, tau_grid: &[f64]) -> Result<BoundReport> {
    match inputs.evaluate(tau_grid) {
        Err(Error::DegenerateHingeCorrection(d)) => {
            warn!("tau design undefined: L_h(f,P) - delta_P = {d}");
            BoundInputs { delta_p: None, ..inputs.clone() }.evaluate(tau_grid).map(|r| BoundReport { delta_p: inputs.delta_p, ..r })
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaBounds {
    pub sigma: Option<f64>,
    pub inputs: BoundInputs,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneTrace {
    pub sigma: Option<f64>,
    pub u_star: f64,
    pub target_threshold: Threshold,
    pub curve: Vec<CoveragePoint>,
}

/// Records plus their aggregate and the per-σ summaries behind the bound columns.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<TrialRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub summaries: Vec<SigmaSummary>,
}

pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutput> {
    let setup = SyntheticSetup::new(config)?;
    let records = setup.run(&config.record_methods())?;
    Ok(SweepOutput { aggregate: aggregate(&records), records, summaries: setup.summaries })
}

/// The sweep restricted to the hard pseudo-calibrated arm and its τ-adjusted
/// counterpart; the τ policy defaults to the design rule.
pub fn tau_experiment_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = config.clone();
    cfg.methods = vec![Method::HardPseudo];
    if cfg.tau == TauPolicy::None {
        cfg.tau = TauPolicy::TauDesign;
    }
    cfg
}

pub fn run_tau_experiment(config: &ExperimentConfig) -> Result<SweepOutput> {
    run_sweep(&tau_experiment_config(config))
}

/// Experiment inputs taken from an ingested logit table. The table carries
/// no shift strength, so records leave `sigma` empty and the generator-based
/// bound (`thm2_bound`) is not available.
pub struct LogitSetup {
    pub config: ExperimentConfig,
    pub table: LogitTable,
    pub data: TrialData,
    /// Labeled source rows used for losses and `Δ_P`: `source_test` when present, else `source_cal`.
    pub source_eval: Vec<LabeledSample>,
    pub summary: SigmaSummary,
    pub l_r_source: f64,
    pub l_h_source: f64,
    pub delta_p: f64,
    grid: UncertaintyGrid,
}

impl LogitSetup {
    pub fn new(config: &ExperimentConfig, table: LogitTable) -> Result<Self> {
        crate::error::check_alpha(config.alpha)?;
        let model = table.model();
        let missing = |tag: SplitTag| Error::InvalidArgument(format!("logit table has no labeled {tag} rows"));
        let source_cal = table.labeled(SplitTag::SourceCal).filter(|v| !v.is_empty()).ok_or(missing(SplitTag::SourceCal))?;
        let target_test = table.labeled(SplitTag::TargetTest).filter(|v| !v.is_empty()).ok_or(missing(SplitTag::TargetTest))?;
        let target_cal = match table.labeled(SplitTag::TargetCal) {
            Some(v) if !v.is_empty() => TargetSplit::labeled(v),
            _ => {
                let inputs = table.inputs(SplitTag::TargetCal);
                if inputs.is_empty() {
                    return Err(Error::InvalidArgument("logit table has no target_cal rows".into()));
                }
                TargetSplit::unlabeled_only(inputs)
            }
        };
        let source_eval = table.labeled(SplitTag::SourceTest).filter(|v| !v.is_empty()).unwrap_or_else(|| source_cal.clone());
        let l_r_source = population_ramp_loss(&model, &source_eval)?;
        let l_h_source = population_hinge_loss(&model, &source_eval)?;
        let delta_p = delta_p_estimate(&model, &source_eval, config.alpha)?;
        let l_r_target = population_ramp_loss(&model, &target_test)?;
        let l_h_target = population_hinge_loss(&model, &target_test)?;
        info!("logits: oracle inputs L_r(Q)={l_r_target:.4} L_h(Q)={l_h_target:.4} from labeled target_test rows");
        let tau = match config.tau {
            TauPolicy::None => None,
            TauPolicy::Fixed(t) => Some(t),
            TauPolicy::TauDesign => Some(tau_design(l_h_source, l_h_target, delta_p)?),
        };
        let summary = SigmaSummary {
            sigma: None,
            rho_true: None,
            rho_mix: None,
            thm2_bound: None,
            l_r_target: Some(l_r_target),
            l_h_target: Some(l_h_target),
            tau,
        };
        Ok(Self {
            config: config.clone(),
            grid: match &config.u_grid {
                Some(v) => UncertaintyGrid::new(v.clone())?,
                None => UncertaintyGrid::default_for(table.classes()),
            },
            data: TrialData { source_cal, target_cal, target_test: TargetSplit::labeled(target_test) },
            table,
            source_eval,
            summary,
            l_r_source,
            l_h_source,
            delta_p,
        })
    }

    /// Record methods, dropping the oracle arm when target_cal is unlabeled.
    pub fn methods(&self) -> Vec<Method> {
        let mut methods = self.config.record_methods();
        if !self.data.target_cal.has_labels() && methods.contains(&Method::Oracle) {
            warn!("target_cal labels are MISSING; skipping the oracle arm");
            methods.retain(|&m| m != Method::Oracle);
        }
        methods
    }

    fn stream(&self) -> RngStream {
        RngStream::new(self.config.seed, 0).named("logits").named("methods")
    }

    /// A single trial: the data are fixed by the table.
    pub fn run(&self) -> Result<Vec<TrialRecord>> {
        let model = self.table.model();
        let protocol = Protocol { model: &model, alpha: self.config.alpha, grid: &self.grid };
        protocol.run_trial(&self.methods(), &self.data, &self.summary, 0, &self.stream())
    }

    pub fn tune_trace(&self) -> Result<TuneTrace> {
        let model = self.table.model();
        let (tuning, cal) = source_tuned_calibrate(
            &model,
            &self.data.source_cal,
            self.data.target_cal.unlabeled().inputs(),
            self.config.alpha,
            &self.grid,
            &self.stream().named("source_tuned"),
        )?;
        Ok(TuneTrace { sigma: None, u_star: tuning.u_star, target_threshold: cal.threshold, curve: tuning.coverage_curve })
    }

    pub fn bound_report(&self) -> Result<SigmaBounds> {
        let model = self.table.model();
        let source_scores = ScoredBatch::labeled(&model, &self.source_eval)?.true_scores().expect("labeled");
        let target = self.data.target_test.reveal(Reveal::Oracle)?;
        let target_scores = ScoredBatch::labeled(&model, &target)?.true_scores().expect("labeled");
        // no generator, so the shift terms are unknown and reported as zero
        let inputs = BoundInputs {
            alpha: self.config.alpha,
            l_r_source: self.l_r_source,
            l_h_source: self.l_h_source,
            l_r_target: self.summary.l_r_target,
            l_h_target: self.summary.l_h_target,
            l_gamma: 0.0,
            rho: 0.0,
            rho_mix: 0.0,
            sup_density: sup_density_estimate(&source_scores)?,
            w1_measured: Some(w1_1d(&source_scores, &target_scores)?),
            delta_p: Some(self.delta_p),
        };
        let report = evaluate_bounds(&inputs, &self.config.tau_grid)?;
        Ok(SigmaBounds { sigma: None, inputs, report })
    }
}

pub fn run_sweep_logits(config: &ExperimentConfig, table: LogitTable) -> Result<SweepOutput> {
    let setup = LogitSetup::new(config, table)?;
    let records = setup.run()?;
    Ok(SweepOutput { aggregate: aggregate(&records), records, summaries: vec![setup.summary] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

fn check_replayed(r: &ParsedRecord, eval: &ScoredBatch, out: &mut ReplayReport) -> Result<()> {
    let tau = r.tau.unwrap_or(0.0);
    let coverage = fmt_sig(eval.coverage(r.threshold, tau)?);
    let ess = fmt_sig(eval.expected_set_size(r.threshold, tau)?);
    out.checked += 1;
    if coverage != r.coverage || ess != r.ess {
        out.mismatches.push(format!(
            "line {}: {} trial {}: recorded coverage/ess {}/{} but recomputed {coverage}/{ess}",
            r.line, r.method, r.trial, r.coverage, r.ess
        ));
    }
    Ok(())
}

/// Recomputes every record's coverage and ESS from its threshold and τ on the
/// regenerated target test split.
pub fn replay_synthetic(config: &ExperimentConfig, records: &[ParsedRecord]) -> Result<ReplayReport> {
    let setup = SyntheticSetup::new(config)?;
    let mut report = ReplayReport { checked: 0, mismatches: Vec::new() };
    let mut cache: Option<((usize, usize), ScoredBatch)> = None;
    for r in records {
        let sigma = r.sigma.ok_or_else(|| Error::Parse { line: r.line, message: "synthetic record without sigma".into() })?;
        let i = config
            .sigmas
            .iter()
            .position(|&s| fmt_sig(s) == fmt_sig(sigma))
            .ok_or_else(|| Error::Parse { line: r.line, message: format!("sigma {sigma} not in the config grid") })?;
        if r.trial >= config.trials {
            return Err(Error::Parse { line: r.line, message: format!("trial {} beyond configured {}", r.trial, config.trials) });
        }
        if cache.as_ref().map(|(k, _)| *k) != Some((i, r.trial)) {
            let test = setup.trial(i, r.trial)?.target_test;
            cache = Some(((i, r.trial), ScoredBatch::labeled(&setup.model, &test)?));
        }
        check_replayed(r, &cache.as_ref().expect("filled").1, &mut report)?;
    }
    Ok(report)
}

pub fn replay_logits(table: &LogitTable, records: &[ParsedRecord]) -> Result<ReplayReport> {
    let test = table
        .labeled(SplitTag::TargetTest)
        .ok_or_else(|| Error::InvalidArgument("logit table has no labeled target_test rows".into()))?;
    let eval = ScoredBatch::labeled(&table.model(), &test)?;
    let mut report = ReplayReport { checked: 0, mismatches: Vec::new() };
    for r in records {
        check_replayed(r, &eval, &mut report)?;
    }
    Ok(report)
}
