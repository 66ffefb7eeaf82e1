use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spreadsim_cli::pipeline::{cmd_attack, cmd_rag_eval, cmd_report, cmd_simulate, cmd_train};
use spreadsim_cli::{CliError, ExperimentConfig};

/// Simulates manipulated-knowledge spread in a community of small language-model agents.
#[derive(Parser, Debug)]
#[command(name = "spreadsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the world and pretrain the base model.
    Train(Common),
    /// Stage I persuasiveness tuning and Stage II knowledge edits.
    Attack(Common),
    /// Run the chat scenarios, control and ablations; write metrics.
    Simulate(Common),
    /// Index transcripts and measure retrieval-driven persistence.
    RagEval(Common),
    /// Summarize all stage outputs into report.md.
    Report(Common),
    /// Print the default configuration as JSON.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; omitted fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, env = "SPREADSIM_OUT")]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides the config).
    #[arg(long)]
    workers: Option<usize>,
    /// Number of chat scenarios (overrides the config).
    #[arg(long)]
    scenarios: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(n) = self.scenarios {
            cfg.community.n_scenarios = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let s = cmd_train(&c.resolve()?)?;
            println!("trained {} parameters; fact recall {:.3}", s.param_count, s.recall_accuracy);
        }
        Command::Attack(c) => {
            let s = cmd_attack(&c.resolve()?)?;
            println!(
                "{} edits; efficacy {:?}; capability drift (I+II) {:?}",
                s.n_edits, s.efficacy, s.capability.drift_stage12
            );
        }
        Command::Simulate(c) => {
            let s = cmd_simulate(&c.resolve()?)?;
            println!(
                "{} scenarios; benign acc new {:?}; control {:?}",
                s.attack.n,
                s.attack.benign.acc_new,
                s.control.as_ref().map(|r| r.benign.acc_new)
            );
        }
        Command::RagEval(c) => {
            let s = cmd_rag_eval(&c.resolve()?)?;
            for r in &s.rows {
                println!("k={} acc_old={:.3} acc_new={:.3}", r.k, r.acc_old, r.acc_new);
            }
        }
        Command::Report(c) => {
            print!("{}", cmd_report(&c.resolve()?)?);
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
