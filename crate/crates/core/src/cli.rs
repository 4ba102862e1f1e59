//! Command-line workflows: score, verify, eval, calibrate, dataset-adapt.
//!
//! Exit codes: 0 success, 1 some claims failed, 2 configuration or input
//! error. Every run writes `manifest.json` to the output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::backends::{BackendId, CallLedger, ExecutionMode, RunStatsSnapshot};
use crate::config::RunConfig;
use crate::datasets::{
    adapt_felm, adapt_hover, binarize_scifact, load_claims, read_records, sample_subset, save_claims,
    Claim, DatasetManifest, SciFactRecord,
};
use crate::eval::{calibration_report, roc_points, score_distribution_csv, write_csv, ScoredPrediction};
use crate::label::Label;
use crate::router::{calibrate, CalibrationSample, Strategy};
use crate::strategies::{run_ordered, ClaimFailure, OutcomeRecord, Verifier};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "confcheck", version, about = "Confidence-guided claim verification")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// live, record or replay.
    #[arg(long, global = true)]
    pub mode: Option<ExecutionMode>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub output: PathBuf,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certainty, consistency and combined score per claim.
    Score(ScoreArgs),
    /// Score, route and verify each claim.
    Verify(VerifyArgs),
    /// Calibration report over one confidence column of a scores file.
    Eval(EvalArgs),
    /// Grid-search routing thresholds from an outcomes file.
    Calibrate(CalibrateArgs),
    /// Convert an upstream dataset to canonical JSON-lines.
    DatasetAdapt(AdaptArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub k_rationales: Option<usize>,
    /// Seeded subset of this many claims.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Also elicit verbalized confidence.
    #[arg(long)]
    pub verbal: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub k_rationales: Option<usize>,
    #[arg(long)]
    pub deep_budget: Option<usize>,
    #[arg(long)]
    pub search_k: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub sample: Option<usize>,
    /// Run every strategy per claim and write outcomes for `calibrate`.
    #[arg(long)]
    pub all_strategies: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scores file written by `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// verbal, certainty, consistency, pcc or certainty_logistic.
    #[arg(long, default_value = "pcc")]
    pub column: String,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Outcomes file written by `verify --all-strategies`.
    #[arg(long)]
    pub outcomes: PathBuf,
    #[arg(long)]
    pub grid_step: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AdaptFormat {
    Canonical,
    Scifact,
    Hover,
    Felm,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long, value_enum)]
    pub format: AdaptFormat,
    #[arg(long)]
    pub input: PathBuf,
    /// Keep only claims with this hop count (HoVER).
    #[arg(long)]
    pub hops: Option<u32>,
    #[arg(long)]
    pub sample: Option<usize>,
    /// Output file; defaults to `<output>/claims.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure that maps onto an exit code.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Fatal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Fatal(e.into())
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    mode: ExecutionMode,
    template_digest: String,
    backend_ids: Vec<BackendId>,
    stats: RunStatsSnapshot,
    claims: usize,
    failures: usize,
    config: &'a RunConfig,
}

struct Run {
    config: RunConfig,
    output: PathBuf,
}

impl Run {
    fn manifest(
        &self,
        command: &str,
        backend_ids: Vec<BackendId>,
        stats: RunStatsSnapshot,
        claims: usize,
        failures: usize,
    ) -> Result<(), Failure> {
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.config.seed,
            mode: self.config.mode,
            template_digest: self.config.templates().map_err(config_err)?.digest(),
            backend_ids,
            stats,
            claims,
            failures,
            config: &self.config,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(self.output.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.output.join(name);
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), Failure> {
        let mut out = self.create(name)?;
        for row in rows {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    fn load_dataset(&self, path: &Path, sample: Option<usize>) -> Result<Vec<Claim>, Failure> {
        let report = load_claims(&DatasetManifest::for_path(path)).map_err(config_err)?;
        if !report.errors.is_empty() {
            tracing::warn!(count = report.errors.len(), "malformed dataset lines");
            let text = serde_json::to_string_pretty(&report.errors)?;
            std::fs::write(self.output.join("dataset_errors.json"), text + "\n")?;
        }
        match sample {
            Some(n) => Ok(sample_subset(&report.claims, n, self.config.seed).map_err(config_err)?),
            None => Ok(report.claims),
        }
    }
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string(value).expect("JSON values serialize"));
}

pub fn run(cli: Cli) -> i32 {
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: starting runtime: {e}");
            return EXIT_CONFIG;
        }
    };
    match runtime.block_on(dispatch(cli)) {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            EXIT_CONFIG
        }
        Err(Failure::Fatal(e)) => {
            eprintln!("error: {e:#}");
            EXIT_CONFIG
        }
    }
}

async fn dispatch(cli: Cli) -> Result<i32, Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(config_err)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = cli.mode {
        config.mode = mode;
    }
    if let Some(dir) = &cli.cache_dir {
        config.cache_dir = Some(dir.clone());
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        config.parallelism = p;
    }
    match &cli.command {
        Command::Score(a) => {
            override_opt(&mut config.k_rationales, a.k_rationales);
        }
        Command::Verify(a) => {
            override_opt(&mut config.alpha, a.alpha);
            override_opt(&mut config.beta, a.beta);
            override_opt(&mut config.k_rationales, a.k_rationales);
            override_opt(&mut config.deep_budget, a.deep_budget);
            override_opt(&mut config.search_k, a.search_k);
            override_opt(&mut config.bins, a.bins);
        }
        Command::Eval(a) => override_opt(&mut config.bins, a.bins),
        Command::Calibrate(a) => override_opt(&mut config.grid_step, a.grid_step),
        Command::DatasetAdapt(_) => {}
    }
    config.validate().map_err(config_err)?;
    std::fs::create_dir_all(&cli.output)
        .with_context(|| format!("creating {}", cli.output.display()))?;
    let run = Run {
        config,
        output: cli.output.clone(),
    };
    match cli.command {
        Command::Score(a) => cmd_score(&run, a).await,
        Command::Verify(a) => cmd_verify(&run, a).await,
        Command::Eval(a) => cmd_eval(&run, a),
        Command::Calibrate(a) => cmd_calibrate(&run, a),
        Command::DatasetAdapt(a) => cmd_adapt(&run, a),
    }
}

fn override_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn split_results<T>(claims: &[Claim], results: Vec<Result<T, String>>) -> (Vec<T>, Vec<ClaimFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (claim, r) in claims.iter().zip(results) {
        match r {
            Ok(v) => ok.push(v),
            Err(error) => {
                tracing::error!(claim = %claim.id, %error, "claim failed");
                failed.push(ClaimFailure {
                    claim_id: claim.id.clone(),
                    error,
                })
            }
        }
    }
    (ok, failed)
}

async fn cmd_score(run: &Run, args: ScoreArgs) -> Result<i32, Failure> {
    let claims = run.load_dataset(&args.dataset, args.sample)?;
    let backends = run.config.backends().map_err(config_err)?;
    let verifier = Verifier::new(backends, run.config.pipeline(args.verbal).map_err(config_err)?);
    let results = run_ordered(&claims, run.config.parallelism, |claim| {
        let verifier = &verifier;
        async move {
            verifier
                .score(claim)
                .await
                .map(|scored| verifier.signal_record(claim, &scored))
                .map_err(|e| e.to_string())
        }
    })
    .await;
    let (records, failures) = split_results(&claims, results);
    run.write_jsonl("scores.jsonl", &records)?;
    run.write_jsonl("errors.jsonl", &failures)?;
    run.manifest(
        "score",
        verifier.backends.ids().to_vec(),
        verifier.backends.stats.snapshot(),
        claims.len(),
        failures.len(),
    )?;
    print_json(&json!({
        "claims": claims.len(),
        "scored": records.len(),
        "failures": failures.len(),
        "output": run.output.join("scores.jsonl"),
    }));
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

async fn cmd_verify(run: &Run, args: VerifyArgs) -> Result<i32, Failure> {
    let claims = run.load_dataset(&args.dataset, args.sample)?;
    let backends = run.config.backends().map_err(config_err)?;
    let verifier = Verifier::new(backends, run.config.pipeline(false).map_err(config_err)?);

    if args.all_strategies {
        let results = run_ordered(&claims, run.config.parallelism, |claim| {
            let verifier = &verifier;
            async move { verifier.verify_all_strategies(claim).await.map_err(|e| e.to_string()) }
        })
        .await;
        let (records, failures): (Vec<OutcomeRecord>, _) = split_results(&claims, results);
        run.write_jsonl("outcomes.jsonl", &records)?;
        run.write_jsonl("errors.jsonl", &failures)?;
        run.manifest(
            "verify",
            verifier.backends.ids().to_vec(),
            verifier.backends.stats.snapshot(),
            claims.len(),
            failures.len(),
        )?;
        print_json(&json!({
            "claims": claims.len(),
            "outcomes": records.len(),
            "failures": failures.len(),
            "output": run.output.join("outcomes.jsonl"),
        }));
        return Ok(if failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL });
    }

    let results = run_ordered(&claims, run.config.parallelism, |claim| {
        let verifier = &verifier;
        async move { verifier.verify(claim).await.map_err(|e| e.to_string()) }
    })
    .await;
    let (records, failures) = split_results(&claims, results);
    run.write_jsonl("results.jsonl", &records)?;
    run.write_jsonl("errors.jsonl", &failures)?;

    let mut histogram: BTreeMap<Strategy, usize> = Strategy::ALL.into_iter().map(|s| (s, 0)).collect();
    let mut costs = CallLedger::default();
    for r in &records {
        *histogram.entry(r.strategy).or_default() += 1;
        costs.llm_calls += r.llm_calls;
        costs.nli_calls += r.nli_calls;
        costs.search_calls += r.search_calls;
    }
    let unverified = records.iter().filter(|r| r.verdict.is_none()).count();
    let labeled: Vec<_> = records.iter().filter_map(|r| r.gold.map(|g| (r, g))).collect();
    let metrics = if labeled.is_empty() {
        None
    } else {
        let f1 = crate::eval::f1_from_pairs(labeled.iter().map(|(r, g)| (r.verdict, *g)));
        // the combined score rates the model's own verdict
        let preds: Vec<ScoredPrediction> = labeled
            .iter()
            .map(|(r, g)| {
                ScoredPrediction::new(&r.claim_id, r.signals.pcc, r.signals.parametric_verdict(), *g)
            })
            .collect::<Result<_, _>>()?;
        let calibration = calibration_report(&preds, run.config.bins)?;
        Some(json!({
            "f1_true": f1.f1_true,
            "f1_false": f1.f1_false,
            "macro_f1": f1.macro_f1,
            "pcc_calibration": calibration,
        }))
    };
    let mut report = json!({
        "claims": claims.len(),
        "verified": records.len() - unverified,
        "unverified": unverified,
        "failures": failures.len(),
        "strategy_histogram": histogram,
        "costs": costs,
    });
    if let Some(m) = metrics {
        report["metrics"] = m;
    }
    std::fs::write(
        run.output.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    run.manifest(
        "verify",
        verifier.backends.ids().to_vec(),
        verifier.backends.stats.snapshot(),
        claims.len(),
        failures.len(),
    )?;
    print_json(&report);
    let errored = records.iter().any(|r| r.error.is_some());
    Ok(if failures.is_empty() && !errored { EXIT_OK } else { EXIT_PARTIAL })
}

const COLUMNS: [&str; 5] = ["verbal", "certainty", "consistency", "pcc", "certainty_logistic"];

fn read_jsonl(path: &Path) -> Result<Vec<Value>, Failure> {
    let file = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(config_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
                .map_err(config_err)?,
        );
    }
    Ok(out)
}

fn label_field(v: &Value, field: &str) -> Option<Label> {
    v.get(field)?.as_str()?.parse().ok()
}

/// Predictions for one confidence column; unlabeled records are skipped.
pub fn predictions_for_column(records: &[Value], column: &str) -> anyhow::Result<(Vec<ScoredPrediction>, usize)> {
    if !COLUMNS.contains(&column) {
        bail!("MissingColumn: unknown column {column:?} (expected one of {COLUMNS:?})");
    }
    let (conf_field, pred_field) = match column {
        "verbal" => ("verbal_confidence", "verbal_predicted"),
        other => (other, "predicted"),
    };
    let mut preds = Vec::new();
    let mut skipped = 0;
    for (i, r) in records.iter().enumerate() {
        let Some(gold) = label_field(r, "gold").or_else(|| label_field(r, "label")) else {
            skipped += 1;
            continue;
        };
        let id = r.get("id").and_then(Value::as_str).unwrap_or_default();
        let confidence = r
            .get(conf_field)
            .and_then(Value::as_f64)
            .ok_or_else(|| anyhow!("MissingColumn: record {} lacks {conf_field:?}", i + 1))?;
        let predicted = label_field(r, pred_field)
            .ok_or_else(|| anyhow!("MissingColumn: record {} lacks {pred_field:?}", i + 1))?;
        preds.push(ScoredPrediction::new(id, confidence, predicted, gold)?);
    }
    Ok((preds, skipped))
}

fn cmd_eval(run: &Run, args: EvalArgs) -> Result<i32, Failure> {
    let records = read_jsonl(&args.scores)?;
    let (preds, skipped) = predictions_for_column(&records, &args.column).map_err(config_err)?;
    let report = calibration_report(&preds, run.config.bins).map_err(config_err)?;

    std::fs::write(
        run.output.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_csv(
        run.create("reliability_bins.csv")?,
        &["lower", "upper", "count", "mean_confidence", "accuracy"],
        &report.bins,
    )?;
    let roc = roc_points(&preds).unwrap_or_default();
    write_csv(run.create("roc.csv")?, &["fpr", "tpr"], &roc)?;
    score_distribution_csv(run.create("score_distribution.csv")?, &preds)?;
    run.manifest("eval", Vec::new(), RunStatsSnapshot::default(), preds.len(), 0)?;

    let mut out = serde_json::to_value(&report)?;
    out["column"] = json!(args.column);
    out["skipped_unlabeled"] = json!(skipped);
    print_json(&out);
    Ok(EXIT_OK)
}

fn cmd_calibrate(run: &Run, args: CalibrateArgs) -> Result<i32, Failure> {
    let records = read_jsonl(&args.outcomes)?;
    let mut samples = Vec::new();
    for (i, v) in records.into_iter().enumerate() {
        let r: OutcomeRecord = serde_json::from_value(v)
            .with_context(|| format!("outcomes line {}", i + 1))
            .map_err(config_err)?;
        if let Some(gold) = r.gold {
            samples.push(CalibrationSample {
                certainty: r.certainty,
                consistency: r.consistency,
                gold,
                outcomes: r.outcomes,
            });
        }
    }
    let c = calibrate(&samples, run.config.grid_step).map_err(config_err)?;
    write_csv(
        run.create("calibration_surface.csv")?,
        &["alpha", "beta", "macro_f1"],
        &c.surface,
    )?;
    run.manifest("calibrate", Vec::new(), RunStatsSnapshot::default(), samples.len(), 0)?;
    print_json(&json!({
        "alpha": c.thresholds.alpha(),
        "beta": c.thresholds.beta(),
        "macro_f1": c.macro_f1,
    }));
    Ok(EXIT_OK)
}

fn cmd_adapt(run: &Run, args: AdaptArgs) -> Result<i32, Failure> {
    let mut line_errors = 0;
    let claims = match args.format {
        AdaptFormat::Canonical => {
            let report = load_claims(&DatasetManifest::for_path(&args.input)).map_err(config_err)?;
            line_errors = report.errors.len();
            if line_errors > 0 {
                let text = serde_json::to_string_pretty(&report.errors)?;
                std::fs::write(run.output.join("dataset_errors.json"), text + "\n")?;
            }
            report.claims
        }
        AdaptFormat::Scifact => {
            let records = read_records(&args.input)
                .map_err(config_err)?
                .iter()
                .map(SciFactRecord::from_value)
                .collect::<Result<Vec<_>, _>>()
                .map_err(config_err)?;
            binarize_scifact(&records)
        }
        AdaptFormat::Hover => adapt_hover(&read_records(&args.input).map_err(config_err)?, args.hops)
            .map_err(config_err)?,
        AdaptFormat::Felm => adapt_felm(&read_records(&args.input).map_err(config_err)?).map_err(config_err)?,
    };
    let claims = match args.sample {
        Some(n) => sample_subset(&claims, n, run.config.seed).map_err(config_err)?,
        None => claims,
    };
    let out = args.out.unwrap_or_else(|| run.output.join("claims.jsonl"));
    save_claims(&out, &claims)?;
    run.manifest("dataset-adapt", Vec::new(), RunStatsSnapshot::default(), claims.len(), 0)?;
    print_json(&json!({
        "claims": claims.len(),
        "line_errors": line_errors,
        "output": out,
    }));
    Ok(EXIT_OK)
}
