//! `corlab`: command-line driver for the counterfactual routing pipeline.
//!
//! Stages exchange data only through files in the output directory, so any
//! stage can be rerun on its own. Exit status is 0 on success, 2 for input
//! or configuration errors and 3 when a computation produced NaN or
//! infinity.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Parser)]
#[command(name = "corlab", version, about = "Counterfactual routing for small mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic long-tail fact corpus
    GenCorpus,
    /// Train a model on the corpus training split
    Train,
    /// Score the calibration split and split tokens into hard and easy sets
    Calibrate,
    /// Layer perturbation sensitivity and relative knowledge intensity
    AnalyzeLayers,
    /// Counterfactual impact of every expert on the hard tokens
    AnalyzeExperts,
    /// Per-layer budgets and causal priors
    BuildPlan,
    /// Compare routing modes on the fact queries
    Eval,
    /// Accuracy against activation budget, and the prior-weight sweep
    Pareto,
    /// Gate probability against impact, one row per expert
    ExportScatter,
    /// Check depth-bias cancellation on a synthetic residual cascade
    VerifyCascade,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model checkpoint
    #[arg(long, global = true)]
    model: Option<String>,
    /// Output directory (default: current directory)
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    corpus: Option<String>,
    /// Calibration report
    #[arg(long, global = true)]
    calibration: Option<String>,
    /// Layer intensity report
    #[arg(long, global = true)]
    rki: Option<String>,
    /// Expert impact table
    #[arg(long, global = true)]
    cei: Option<String>,
    /// Routing plan
    #[arg(long, global = true)]
    plan: Option<String>,
    /// Prior weight for fused selection
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Relative perturbation of each layer's expert output
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    p_low: Option<f64>,
    #[arg(long, global = true)]
    p_high: Option<f64>,
    #[arg(long, global = true)]
    k_min: Option<usize>,
    #[arg(long, global = true)]
    k_max: Option<usize>,
    /// Worker thread cap
    #[arg(long, global = true)]
    threads: Option<usize>,
}

impl Common {
    fn settings(&self) -> corlab::Result<Settings> {
        let mut s = Settings::load(self.config.as_deref())?;
        s.set("seed", self.seed.map(|v| v.to_string()));
        s.set("model", self.model.clone());
        s.set("out", self.out.clone());
        s.set("corpus", self.corpus.clone());
        s.set("calibration", self.calibration.clone());
        s.set("rki", self.rki.clone());
        s.set("cei", self.cei.clone());
        s.set("plan", self.plan.clone());
        s.set("lambda", self.lambda.map(|v| v.to_string()));
        s.set("delta", self.delta.map(|v| v.to_string()));
        s.set("p_low", self.p_low.map(|v| v.to_string()));
        s.set("p_high", self.p_high.map(|v| v.to_string()));
        s.set("k_min", self.k_min.map(|v| v.to_string()));
        s.set("k_max", self.k_max.map(|v| v.to_string()));
        s.set("threads", self.threads.map(|v| v.to_string()));
        Ok(s)
    }
}

fn run(cli: &Cli) -> corlab::Result<String> {
    let s = cli.common.settings()?;
    if let Some(n) = s.get::<usize>("threads")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| corlab::Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenCorpus => commands::gen_corpus(&s),
        Command::Train => commands::train_cmd(&s),
        Command::Calibrate => commands::calibrate(&s),
        Command::AnalyzeLayers => commands::analyze_layers(&s),
        Command::AnalyzeExperts => commands::analyze_experts(&s),
        Command::BuildPlan => commands::build_plan_cmd(&s),
        Command::Eval => commands::eval_cmd(&s),
        Command::Pareto => commands::pareto(&s),
        Command::ExportScatter => commands::scatter(&s),
        Command::VerifyCascade => commands::cascade(&s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
