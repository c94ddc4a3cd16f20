use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use plcp_kit::config::ExperimentConfig;
use plcp_kit::experiment::{evaluate_cmd, generate_cmd, metrics_csv, run_experiment, select_m_cmd};
use plcp_kit::io::CsvSchema;
use plcp_kit::rule::PlcpRule;
use plcp_kit::Error;

#[derive(Parser)]
#[command(name = "plcp-kit", version, about = "Partition-learned conformal calibration")]
struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config, defaults to `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw synthetic train/cal/test CSVs.
    Generate(RunArgs),
    /// Fit and evaluate every configured method.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        /// Draw each PLCP threshold from the soft assignment.
        #[arg(long)]
        randomized_assignment: bool,
    },
    /// Choose the group count by doubling and bisection.
    SelectM(RunArgs),
    /// Evaluate a saved rule on a CSV.
    Evaluate {
        #[arg(long)]
        rule: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "y")]
        label: String,
        #[arg(long)]
        classification: bool,
        #[arg(long)]
        point: Option<String>,
        #[arg(long, value_delimiter = ',')]
        probs: Vec<String>,
        #[arg(long)]
        score: Option<String>,
        /// Also write metrics.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(run: &RunArgs) -> plcp_kit::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    let out = run.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

fn execute(cli: Cli) -> plcp_kit::Result<()> {
    match cli.command {
        Command::Generate(run) => {
            let (cfg, out) = load(&run)?;
            let s = generate_cmd(&cfg, &out)?;
            println!("wrote {} train, {} cal, {} test rows to {}", s.train.len(), s.cal.len(), s.test.len(), out.display());
        }
        Command::Experiment { run, randomized_assignment } => {
            let (mut cfg, out) = load(&run)?;
            cfg.randomized_assignment |= randomized_assignment;
            let output = run_experiment(&cfg, &out)?;
            print!("{}", output.metrics_csv);
        }
        Command::SelectM(run) => {
            let (cfg, out) = load(&run)?;
            let report = select_m_cmd(&cfg)?;
            let csv = report.to_csv();
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("select.csv"), &csv)?;
            report.rule.save(&out.join("rule.model"))?;
            print!("{csv}");
        }
        Command::Evaluate { rule, data, label, classification, point, probs, score, out } => {
            let rule = PlcpRule::load(&rule)?;
            let schema = CsvSchema { label, classification, point, probs, score };
            let report = evaluate_cmd(&rule, &data, &schema)?;
            let csv = metrics_csv(&[("plcp".to_string(), report)]);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("metrics.csv"), &csv)?;
            }
            print!("{csv}");
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        "config" => 2,
        "data" => 3,
        "numeric" => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PLCP_KIT_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error[config]: {e}");
        return ExitCode::from(2);
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}
