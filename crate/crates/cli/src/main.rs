use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use clever_core::report::write_atomic;
use clever_core::{
    compare_transforms, AttackParams, CleverReport, Dataset, ExperimentConfig, ExperimentSettings,
    Model, ReportFormat, SamplePlan, ScoreOrder, TargetMode, TransformComparison, TransformSpec,
};

/// Attack-agnostic robustness scores for small classifiers.
#[derive(Debug, Parser)]
#[command(name = "clever", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every correctly classified input and write a report.
    Score(ScoreArgs),
    /// Compare average first-order scores across input transforms.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Model document (json).
    #[arg(long)]
    model: PathBuf,
    /// Dataset document (json list of {id, values, label}).
    #[arg(long)]
    data: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "runner_up,random,least_likely"
    )]
    targets: Vec<TargetMode>,
    /// Number of batches.
    #[arg(long, default_value_t = 100)]
    nb: usize,
    /// Samples per batch.
    #[arg(long, default_value_t = 200)]
    ns: usize,
    /// Radius of the sampling ball; also caps the score.
    #[arg(long, default_value_t = 2.0)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many correctly classified inputs.
    #[arg(long)]
    max_inputs: Option<usize>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// identity or bitdepth:k
    #[arg(long, default_value = "identity")]
    transform: TransformSpec,
    #[arg(long, value_delimiter = ',', default_value = "first,second")]
    order: Vec<ScoreOrder>,
    #[arg(long, default_value_t = 100)]
    power_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    power_tol: f64,
    /// Also run the targeted ℓ2 attack for each (input, target).
    #[arg(long)]
    attack: bool,
    #[arg(long, default_value_t = 5)]
    attack_steps: usize,
    #[arg(long, default_value_t = 500)]
    attack_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    attack_const: f64,
    #[arg(long, default_value_t = 0.01)]
    attack_lr: f64,
    #[arg(long, default_value_t = 0.0)]
    confidence: f64,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CompareFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Transforms to compare; the first is the baseline.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "identity,bitdepth:3,bitdepth:8"
    )]
    transforms: Vec<TransformSpec>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CompareFormat::Text)]
    format: CompareFormat,
}

impl Common {
    fn plan(&self) -> Result<SamplePlan> {
        Ok(SamplePlan::new(self.nb, self.ns, self.radius, self.seed)?)
    }
}

fn score(args: ScoreArgs) -> Result<()> {
    let attack = args.attack.then_some(AttackParams {
        binary_search_steps: args.attack_steps,
        max_iterations: args.attack_iters,
        initial_const: args.attack_const,
        learning_rate: args.attack_lr,
        confidence: args.confidence,
    });
    let config = ExperimentConfig {
        model_path: args.common.model.clone(),
        dataset_path: args.common.data.clone(),
        settings: ExperimentSettings {
            transform: args.transform,
            target_modes: args.common.targets.clone(),
            orders: args.order,
            plan: args.common.plan()?,
            power_iters: args.power_iters,
            power_tol: args.power_tol,
            attack,
            max_inputs: args.common.max_inputs,
        },
        output: args.out.clone(),
        format: args.format,
    };
    let report = config.run().with_context(|| {
        format!(
            "scoring {} on {}",
            config.model_path.display(),
            config.dataset_path.display()
        )
    })?;
    if args.out.is_none() {
        print!("{}", report.emit(args.format)?);
    }
    summarize(&report);
    Ok(())
}

fn summarize(report: &CleverReport) {
    eprintln!(
        "{}: {} inputs scored, {} misclassified skipped, {} beyond the input limit, {} rows",
        report.model,
        report.evaluated,
        report.skipped,
        report.truncated,
        report.rows.len()
    );
    for a in &report.aggregates {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        eprintln!(
            "  {:<12} {:<6} avg score {}  avg distortion {}  larger {}%  avg increase {}%",
            a.target_mode.as_str(),
            a.order.to_string(),
            fmt(a.avg_score),
            fmt(a.avg_attack_distortion),
            fmt(a.pct_larger),
            fmt(a.avg_pct_increase),
        );
    }
}

fn comparison_text(cmp: &TransformComparison) -> String {
    let mut out = format!("inputs: {}\n", cmp.inputs);
    out.push_str("target_mode   transform     avg_score     ratio\n");
    for m in &cmp.modes {
        for t in &m.transforms {
            out.push_str(&format!(
                "{:<13} {:<13} {:<13.6} {:.4}\n",
                m.target_mode.as_str(),
                t.transform,
                t.avg_score,
                t.ratio
            ));
        }
    }
    out
}

fn compare(args: CompareArgs) -> Result<()> {
    let model = Model::load(&args.common.model)
        .with_context(|| format!("loading model {}", args.common.model.display()))?;
    let dataset = Dataset::load(&args.common.data, &model)
        .with_context(|| format!("loading dataset {}", args.common.data.display()))?;
    let settings = ExperimentSettings {
        target_modes: args.common.targets.clone(),
        orders: vec![ScoreOrder::First],
        plan: args.common.plan()?,
        max_inputs: args.common.max_inputs,
        ..Default::default()
    };
    let cmp = compare_transforms(&model, &dataset, &args.transforms, &settings)?;
    let text = match args.format {
        CompareFormat::Text => comparison_text(&cmp),
        CompareFormat::Json => serde_json::to_string_pretty(&cmp)? + "\n",
    };
    match &args.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(args) => score(args),
        Command::Compare(args) => compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
