//! Trial records, aggregation and CSV formatting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::Threshold;
use crate::error::{Error, Result};
use crate::bounds::corollary1_lower_bound;
use crate::experiment::config::Method;
use crate::experiment::runner::SigmaSummary;

pub const RECORD_HEADER: &str = "method,sigma,trial,threshold,u_star,tau,coverage,ess,thm2_bound,cor1_bound";

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed,
/// `inf`/`-inf` for infinities.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

/// One (method, σ, trial) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    /// `None` for ingested logits, which carry no shift strength.
    pub sigma: Option<f64>,
    pub trial: usize,
    pub threshold: Threshold,
    pub u_star: Option<f64>,
    pub tau: Option<f64>,
    pub coverage: f64,
    pub ess: f64,
    pub thm2_bound: Option<f64>,
    pub cor1_bound: Option<f64>,
}

impl TrialRecord {
    pub fn csv_line(&self) -> String {
        [
            self.method.to_string(),
            opt(self.sigma),
            self.trial.to_string(),
            fmt_sig(self.threshold.value()),
            opt(self.u_star),
            opt(self.tau),
            fmt_sig(self.coverage),
            fmt_sig(self.ess),
            opt(self.thm2_bound),
            opt(self.cor1_bound),
        ]
        .join(",")
    }

    /// Checks the range invariants `coverage ∈ [0,1]`, `ess ∈ [0,K]`.
    pub fn check(&self, classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::Invariant(format!("coverage {} outside [0,1]", self.coverage)));
        }
        if !(0.0..=classes as f64).contains(&self.ess) {
            return Err(Error::Invariant(format!("ess {} outside [0,{classes}]", self.ess)));
        }
        Ok(())
    }
}

pub fn write_records<W: Write>(out: &mut W, records: &[TrialRecord]) -> Result<()> {
    writeln!(out, "{RECORD_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// A records-CSV row with its fields parsed back, for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRecord {
    pub line: usize,
    pub method: Method,
    pub sigma: Option<f64>,
    pub trial: usize,
    pub threshold: Threshold,
    pub tau: Option<f64>,
    pub coverage: String,
    pub ess: String,
}

pub fn read_records(text: &str) -> Result<Vec<ParsedRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == RECORD_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header '{RECORD_HEADER}'") }),
    }
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("bad number '{s}'") })
    };
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end();
        if raw.is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Parse { line, message: format!("expected 10 fields, got {}", f.len()) });
        }
        let optional = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s, line).map(Some) } };
        out.push(ParsedRecord {
            line,
            method: f[0].parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?,
            sigma: optional(f[1])?,
            trial: f[2].parse().map_err(|_| Error::Parse { line, message: format!("bad trial '{}'", f[2]) })?,
            threshold: Threshold::from_value(num(f[3], line)?),
            tau: optional(f[5])?,
            coverage: f[6].to_string(),
            ess: f[7].to_string(),
        });
    }
    Ok(out)
}

/// Mean and standard error over trials for one (method, σ) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub sigma: Option<f64>,
    pub trials: usize,
    pub coverage_mean: f64,
    pub coverage_se: f64,
    pub ess_mean: f64,
    pub ess_se: f64,
    pub thm2_bound: Option<f64>,
    pub cor1_bound: Option<f64>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups records by (method, σ) in first-appearance order. Bound columns
/// are per-σ quantities; the first record's value is reported.
pub fn aggregate(records: &[TrialRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(Method, Option<f64>)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(m, s)| m == r.method && s == r.sigma) {
            keys.push((r.method, r.sigma));
        }
    }
    keys.sort_by(|a, b| {
        a.1.partial_cmp(&b.1).expect("finite sigma").then(a.0.cmp(&b.0))
    });
    keys.into_iter()
        .map(|(method, sigma)| {
            let cell: Vec<&TrialRecord> = records.iter().filter(|r| r.method == method && r.sigma == sigma).collect();
            let (coverage_mean, coverage_se) = mean_se(&cell.iter().map(|r| r.coverage).collect::<Vec<_>>());
            let (ess_mean, ess_se) = mean_se(&cell.iter().map(|r| r.ess).collect::<Vec<_>>());
            AggregateRow {
                method,
                sigma,
                trials: cell.len(),
                coverage_mean,
                coverage_se,
                ess_mean,
                ess_se,
                thm2_bound: cell[0].thm2_bound,
                cor1_bound: cell[0].cor1_bound,
            }
        })
        .collect()
}

pub fn write_aggregate<W: Write>(out: &mut W, rows: &[AggregateRow]) -> Result<()> {
    writeln!(out, "method,sigma,trials,coverage_mean,coverage_se,ess_mean,ess_se,thm2_bound,cor1_bound")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            opt(r.sigma),
            r.trials,
            fmt_sig(r.coverage_mean),
            fmt_sig(r.coverage_se),
            fmt_sig(r.ess_mean),
            fmt_sig(r.ess_se),
            opt(r.thm2_bound),
            opt(r.cor1_bound)
        )?;
    }
    Ok(())
}

/// Per-σ bound curves: generator shift terms, oracle target losses and the
/// relaxed-set bound at every slack of `tau_grid`.
pub fn write_bound_curves<W: Write>(out: &mut W, alpha: f64, summaries: &[SigmaSummary], tau_grid: &[f64]) -> Result<()> {
    let mut header = String::from("sigma,rho_true,rho_mix,thm2_bound,l_r_target,l_h_target,tau");
    for t in tau_grid {
        header.push_str(&format!(",cor1_tau_{}", fmt_sig(*t)));
    }
    writeln!(out, "{header}")?;
    for s in summaries {
        let mut line = [s.sigma, s.rho_true, s.rho_mix, s.thm2_bound, s.l_r_target, s.l_h_target, s.tau]
            .map(opt)
            .join(",");
        for &t in tau_grid {
            let b = match (s.l_r_target, s.l_h_target) {
                (Some(lr), Some(lh)) => Some(corollary1_lower_bound(alpha, lr, lh, t)?),
                _ => None,
            };
            line.push(',');
            line.push_str(&opt(b));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.8), "0.8");
        assert_eq!(fmt_sig(0.80010000049), "0.8001");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_sig(123456789.4), "123456789");
        assert_eq!(fmt_sig(1234567890.0), "1.23456789e9");
        assert_eq!(fmt_sig(1.5e-7), "1.5e-7");
        assert_eq!(fmt_sig(0.0001234), "0.0001234");
        assert_eq!(fmt_sig(3.0), "3");
        assert_eq!(fmt_sig(f64::INFINITY), "inf");
        assert_eq!(fmt_sig(-0.0), "0");
    }

    proptest! {
        #[test]
        fn formatting_keeps_nine_digits(v in -1e12f64..1e12) {
            let back: f64 = fmt_sig(v).parse().unwrap();
            prop_assert!((back - v).abs() <= 5e-9 * v.abs() + 1e-300);
        }
    }

    fn rec(method: Method, sigma: f64, trial: usize, coverage: f64) -> TrialRecord {
        TrialRecord {
            method,
            sigma: Some(sigma),
            trial,
            threshold: Threshold::Finite(-0.25),
            u_star: None,
            tau: None,
            coverage,
            ess: 1.0,
            thm2_bound: Some(0.5),
            cor1_bound: None,
        }
    }

    #[test]
    fn csv_line_layout_and_round_trip() {
        let mut r = rec(Method::SourceTuned, 0.5, 3, 0.81);
        r.u_star = Some(f64::INFINITY);
        r.threshold = Threshold::FullSet;
        assert_eq!(r.csv_line(), "source_tuned,0.5,3,inf,inf,,0.81,1,0.5,");
        let mut buf = Vec::new();
        write_records(&mut buf, &[r.clone()]).unwrap();
        let parsed = read_records(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed[0].threshold, Threshold::FullSet);
        assert_eq!(parsed[0].method, Method::SourceTuned);
        assert_eq!(parsed[0].tau, None);
        assert_eq!(parsed[0].coverage, "0.81");
    }

    #[test]
    fn aggregate_mean_and_standard_error() {
        let records = vec![
            rec(Method::Oracle, 0.0, 0, 0.7),
            rec(Method::Oracle, 0.0, 1, 0.9),
            rec(Method::Source, 0.0, 0, 0.8),
            rec(Method::Source, 0.5, 0, 0.6),
        ];
        let rows = aggregate(&records);
        assert_eq!(rows.len(), 3);
        assert_eq!((rows[0].method, rows[0].sigma), (Method::Source, Some(0.0)));
        let oracle = &rows[1];
        assert!((oracle.coverage_mean - 0.8).abs() < 1e-12);
        // sample sd = 0.1414..., se = sd / sqrt(2) = 0.1
        assert!((oracle.coverage_se - 0.1).abs() < 1e-12);
        assert_eq!(rows[2].coverage_se, 0.0);
    }

    #[test]
    fn range_invariants() {
        assert!(rec(Method::Source, 0.0, 0, 1.01).check(3).is_err());
        let mut r = rec(Method::Source, 0.0, 0, 0.5);
        r.ess = 3.5;
        assert!(r.check(3).is_err());
        r.ess = 3.0;
        assert!(r.check(3).is_ok());
    }
}
