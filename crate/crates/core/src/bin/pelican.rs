use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pelican::harness::{ExperimentConfig, Pipeline};

#[derive(Parser)]
#[command(name = "pelican", version, about = "Personalized mobility models: training, inversion attacks and the temperature defense")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort into <out>/data
    Synth(Common),
    /// Train the general model on the contributors
    TrainGeneral(Common),
    /// Personalize the general model for every target and method
    Personalize(Common),
    /// Attack the undefended deployments
    Attack(Common),
    /// Attack across the configured temperature sweep
    DefendEval(Common),
    /// Personalize on a short history, then update with the rest
    Update(Common),
    /// Merge stage records into summary.json and plot tables
    Report(Common),
    /// Every stage in order
    Run(Common),
    /// Print a preset configuration as JSON
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults to the desk preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given (desk, smoke)
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn pipeline(&self) -> pelican::Result<Pipeline> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if cfg.output_dir.is_none() {
            cfg.output_dir = Some(PathBuf::from("out"));
        }
        Pipeline::new(cfg)
    }
}

fn execute(cmd: Command) -> pelican::Result<()> {
    match cmd {
        Command::Config { preset } => {
            println!("{}", ExperimentConfig::preset(&preset)?.to_json()?);
            Ok(())
        }
        Command::Synth(c) => c.pipeline()?.stage_synth(),
        Command::TrainGeneral(c) => c.pipeline()?.stage_general(),
        Command::Personalize(c) => c.pipeline()?.stage_personalize(),
        Command::Attack(c) => c.pipeline()?.stage_attack(&[1.0], "attack"),
        Command::DefendEval(c) => {
            let mut p = c.pipeline()?;
            let temps = p.cfg.attack.temperatures.clone();
            p.stage_attack(&temps, "defense")
        }
        Command::Update(c) => c.pipeline()?.stage_update(),
        Command::Report(c) => {
            let mut p = c.pipeline()?;
            p.stage_report()?;
            print_summary(&p);
            Ok(())
        }
        Command::Run(c) => {
            let mut p = c.pipeline()?;
            p.run_all()?;
            print_summary(&p);
            Ok(())
        }
    }
}

fn print_summary(p: &Pipeline) {
    let r = &p.report;
    if let Some(g) = &r.general {
        println!(
            "general: {} locations, test top-1 {:.2}%, {:.1}s CPU",
            g.locations, g.test_accuracy[0], g.cost.cpu_seconds
        );
    }
    let Some(a) = &r.analysis else { return };
    for c in a.cells.iter().filter(|c| c.temperature == 1.0) {
        println!(
            "{} {:<11} {:<8} top-1 {:6.2}%  top-3 {:6.2}%  ({} trials)",
            c.adversary,
            c.strategy.name(),
            c.prior.name(),
            c.at(1).unwrap_or(f64::NAN),
            c.at(3).unwrap_or(f64::NAN),
            c.trials
        );
    }
    for l in a.leakage.iter().filter(|l| (l.adversary, l.strategy, l.prior) == pelican::harness::HEADLINE) {
        if let Some(rel) = l.relative_reduction {
            println!(
                "T={:<5} {} {} {}: leakage reduced {:.1}%",
                l.temperature,
                l.adversary,
                l.strategy.name(),
                l.prior.name(),
                rel
            );
        }
    }
    println!("service accuracy preserved across temperatures: {}", a.service_preserved);
    if let Some(pc) = &a.phase_costs {
        println!("phase-1 / max phase-2 CPU: {:.1}x", pc.ratio);
    }
    if let Some(out) = &p.cfg.output_dir {
        println!("reports in {}", out.join("reports").display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
