use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffquant::config::ExperimentConfig;
use diffquant::error::Error;
use diffquant::harness;

/// Quantization-noise laboratory for toy diffusion samplers.
#[derive(Parser)]
#[command(name = "diffquant", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the network and save it to <out>/model.dqw.
    Train(Common),
    /// Collect calibration rows and persist the fitted quantizer grids.
    Calibrate(Common),
    /// Run the configured variant against its paired FP reference.
    Run(Common),
    /// Run the whole variant matrix (ptq / intra / inter / full) plus FP.
    Ablate(Common),
    /// Verify persisted artifacts and print the resolved config + summary.
    Report(Common),
}

fn print_rows(rows: &[diffquant::metrics::SummaryRow]) {
    println!("run_id,config_label,swd_to_fp,final_cosine,eval_count");
    for r in rows {
        println!(
            "{},{},{},{},{}",
            r.run_id, r.config_label, r.swd_to_fp, r.final_cosine, r.eval_count
        );
    }
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let (path, report) = harness::train_to_disk(&cfg)?;
            println!(
                "trained {} iterations, final batch loss {:.6}",
                report.iters, report.final_loss
            );
            println!("weights written to {}", path.display());
        }
        Command::Calibrate(c) => {
            let cfg = c.load()?;
            let summary = harness::calibrate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            println!("artifacts written to {}", cfg.run.out_dir.display());
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let rows = harness::run_experiment(&cfg)?;
            print_rows(&rows);
            println!("artifacts written to {}", cfg.run.out_dir.display());
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let rows = harness::ablate(&cfg)?;
            print_rows(&rows);
            println!("artifacts written to {}", cfg.run.out_dir.display());
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            let text = harness::report(&cfg, &cfg.run.out_dir)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Unknown flags and malformed invocations: usage error, exit 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's conventional exit 0 for --help/--version.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
