//! `pseudocal`: synthetic shift experiments, bound reports and audits.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/ingestion error,
//! 4 internal invariant violation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use pseudocal::experiment::output::{fmt_sig, read_records, write_aggregate, write_bound_curves, write_records};
use pseudocal::experiment::runner::{
    replay_logits, replay_synthetic, tau_experiment_config, LogitSetup, SweepOutput, SyntheticSetup, TuneTrace,
    ORACLE_INPUTS,
};
use pseudocal::experiment::{aggregate, selftest, ExperimentConfig};
use pseudocal::logit_table::{load_logit_table, LogitRow, LogitTable, SplitTag};
use pseudocal::synthetic::write_dataset_csv;
use pseudocal::Error;

#[derive(Parser)]
#[command(name = "pseudocal", version, about = "Conformal prediction under bounded label-conditional shift")]
struct Cli {
    /// JSON experiment configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Use an ingested logit table instead of the synthetic generator.
    #[arg(long, global = true)]
    logits: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit dataset and logit CSVs for trial 0 at every shift level.
    Gen,
    /// Fit the classifier and dump it as JSON.
    Train,
    /// Full method × σ × trial experiment.
    Sweep,
    /// Hard pseudo-calibration with and without the τ(σ) relaxation.
    Tau,
    /// Bound report as JSON.
    Bounds,
    /// Source-tuning trace (coverage curve and selected threshold).
    Tune,
    /// Recompute coverage and ESS of a records CSV from its thresholds.
    Replay {
        /// Records file; defaults to `<out>/records.csv`.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Compare fast paths with reference implementations.
    Selftest,
}

enum Failure {
    Config(String),
    Data(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Invariant(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invariant(_) => Failure::Invariant(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::Config(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig, logits: Option<&Path>) -> CliResult {
    let doc = json!({
        "config": cfg,
        "logits": logits.map(|p| p.display().to_string()),
        "oracle_inputs": ORACLE_INPUTS,
    });
    let mut f = create(dir, "config.resolved.json")?;
    writeln!(f, "{}", serde_json::to_string_pretty(&doc).expect("serializable"))?;
    Ok(())
}

fn emit_sweep(cli: &Cli, cfg: &ExperimentConfig, out: SweepOutput) -> CliResult {
    write_records(&mut create(&cli.out, "records.csv")?, &out.records)?;
    write_aggregate(&mut create(&cli.out, "aggregate.csv")?, &aggregate(&out.records))?;
    write_bound_curves(&mut create(&cli.out, "bounds_curve.csv")?, cfg.alpha, &out.summaries, &cfg.tau_grid)?;
    write_resolved(&cli.out, cfg, cli.logits.as_deref())?;
    eprintln!("wrote {} records to {}", out.records.len(), cli.out.join("records.csv").display());
    Ok(())
}

fn load_table(path: &Path) -> CliResult<LogitTable> {
    load_logit_table(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn sweep(cli: &Cli, cfg: ExperimentConfig) -> CliResult {
    let out = match &cli.logits {
        Some(path) => {
            let setup = LogitSetup::new(&cfg, load_table(path)?)?;
            let records = setup.run()?;
            SweepOutput { aggregate: aggregate(&records), records, summaries: vec![setup.summary.clone()] }
        }
        None => {
            let setup = SyntheticSetup::new(&cfg)?;
            let records = setup.run(&cfg.record_methods())?;
            SweepOutput { aggregate: aggregate(&records), records, summaries: setup.summaries }
        }
    };
    emit_sweep(cli, &cfg, out)
}

fn gen(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let setup = SyntheticSetup::new(cfg)?;
    for (i, &sigma) in cfg.sigmas.iter().enumerate() {
        let t = setup.trial(i, 0)?;
        write_dataset_csv(
            &mut create(&cli.out, &format!("dataset_sigma{i}.csv"))?,
            &[
                ("source_cal", &t.source_cal),
                ("source_test", &t.source_test),
                ("target_cal", &t.target_cal),
                ("target_test", &t.target_test),
            ],
        )?;
        let mut rows = Vec::new();
        for (tag, samples) in [
            (SplitTag::SourceCal, &t.source_cal),
            (SplitTag::SourceTest, &t.source_test),
            (SplitTag::TargetCal, &t.target_cal),
            (SplitTag::TargetTest, &t.target_test),
        ] {
            for s in samples.iter() {
                use pseudocal::scores::LogitModel;
                // target calibration labels are withheld, as in deployment
                let label = (tag != SplitTag::TargetCal).then_some(s.y);
                rows.push(LogitRow { split: tag, label, logits: setup.model.logits(&s.x)? });
            }
        }
        LogitTable::new(cfg.classes(), rows)?.write(&mut create(&cli.out, &format!("logits_sigma{i}.csv"))?)?;
        eprintln!("sigma {}: wrote dataset_sigma{i}.csv and logits_sigma{i}.csv", fmt_sig(sigma));
    }
    write_resolved(&cli.out, cfg, None)
}

fn train(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let setup = SyntheticSetup::new(cfg)?;
    let doc = json!({
        "weights": setup.model.weights(),
        "biases": setup.model.biases(),
        "lipschitz_bound": setup.l_gamma,
        "train_loss_history": setup.train_loss_history,
        "l_r_source": setup.l_r_source,
        "l_h_source": setup.l_h_source,
    });
    writeln!(create(&cli.out, "classifier.json")?, "{}", serde_json::to_string_pretty(&doc).expect("serializable"))?;
    Ok(())
}

fn bounds(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let per_sigma = match &cli.logits {
        Some(path) => vec![LogitSetup::new(cfg, load_table(path)?)?.bound_report()?],
        None => SyntheticSetup::new(cfg)?.bound_reports()?,
    };
    let doc = json!({
        "oracle_inputs": ORACLE_INPUTS,
        "shift_terms": if cli.logits.is_some() { "unavailable for ingested logits (reported as 0)" } else { "generator-certified" },
        "per_sigma": per_sigma,
    });
    writeln!(create(&cli.out, "bounds.json")?, "{}", serde_json::to_string_pretty(&doc).expect("serializable"))?;
    Ok(())
}

fn tune(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let traces: Vec<TuneTrace> = match &cli.logits {
        Some(path) => vec![LogitSetup::new(cfg, load_table(path)?)?.tune_trace()?],
        None => SyntheticSetup::new(cfg)?.tune_trace()?,
    };
    let mut f = create(&cli.out, "tune_trace.csv")?;
    writeln!(f, "sigma,u,source_coverage,source_threshold,selected,target_threshold")?;
    for t in &traces {
        let sigma = t.sigma.map(fmt_sig).unwrap_or_default();
        for p in &t.curve {
            let selected = p.u == t.u_star;
            let target = if selected { fmt_sig(t.target_threshold.value()) } else { String::new() };
            writeln!(
                f,
                "{sigma},{},{},{},{},{target}",
                fmt_sig(p.u),
                fmt_sig(p.coverage),
                fmt_sig(p.threshold.value()),
                u8::from(selected)
            )?;
        }
    }
    Ok(())
}

fn replay(cli: &Cli, cfg: &ExperimentConfig, records: Option<&Path>) -> CliResult {
    let path = records.map(Path::to_path_buf).unwrap_or_else(|| cli.out.join("records.csv"));
    let text = fs::read_to_string(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let parsed = read_records(&text)?;
    let report = match &cli.logits {
        Some(p) => replay_logits(&load_table(p)?, &parsed)?,
        None => replay_synthetic(cfg, &parsed)?,
    };
    for m in &report.mismatches {
        eprintln!("{m}");
    }
    println!("replayed {} records: {} mismatches", report.checked, report.mismatches.len());
    if report.mismatches.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("{} records do not replay", report.mismatches.len())))
    }
}

fn run_selftest(cfg: &ExperimentConfig) -> CliResult {
    let checks = selftest::run_selftest(cfg.seed)?;
    for c in &checks {
        println!("{} {}: {} cases, {} failures", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.cases, c.failures);
    }
    if checks.iter().all(|c| c.passed()) {
        Ok(())
    } else {
        Err(Failure::Invariant("selftest failed".into()))
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen => gen(cli, &cfg),
        Command::Train => train(cli, &cfg),
        Command::Sweep => sweep(cli, cfg),
        Command::Tau => sweep(cli, tau_experiment_config(&cfg)),
        Command::Bounds => bounds(cli, &cfg),
        Command::Tune => tune(cli, &cfg),
        Command::Replay { records } => replay(cli, &cfg, records.as_deref()),
        Command::Selftest => run_selftest(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
