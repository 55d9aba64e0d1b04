use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rdpp::harness::{self, report, HarnessError, Overrides};

#[derive(Debug, Parser)]
#[command(name = "rdpp", version, about = "Repeated deceptive path planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short = 'c', long = "config")]
    config: PathBuf,
    /// Base seed; seeds are base..base+n_seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root.
    #[arg(long, env = "RDPP_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the learnable observer on non-deceptive paths.
    Pretrain(Common),
    /// Run every configured agent against a fresh observer per seed.
    Run(Common),
    /// Capture rates of saved snapshots in the pirate scenario.
    Pirate(Common),
    /// Regenerate SVG plots from run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Directory for the plots (default: `<first dir>/report`).
        #[arg(long, env = "RDPP_OUT")]
        out: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<(harness::LoadedConfig, Overrides), HarnessError> {
    let mut loaded = harness::load_config(&c.config)?;
    let ov = Overrides {
        seed: c.seed,
        jobs: c.jobs,
        out: c.out.clone(),
    };
    ov.apply(&mut loaded);
    Ok((loaded, ov))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Pretrain(c) => {
            let (loaded, ov) = load(&c)?;
            let r = harness::cmd_pretrain(&loaded, &ov)?;
            println!(
                "held-out accuracy {:.3} on {} samples; observer in {}",
                r.heldout_accuracy,
                r.heldout_samples,
                harness::observer_dir(&ov.out_root(&loaded), &loaded.config).display()
            );
        }
        Command::Run(c) => {
            let (loaded, ov) = load(&c)?;
            for run in harness::cmd_run(&loaded, &ov)? {
                let tail: Vec<f64> = run
                    .seeds
                    .iter()
                    .map(|s| {
                        let t = &s.rows[s.rows.len().saturating_sub(report::TAIL)..];
                        t.iter().map(|r| r.p_true).sum::<f64>() / t.len().max(1) as f64
                    })
                    .collect();
                let m = rdpp::metrics::mean_std(&tail);
                println!(
                    "{:<8} seeds {}/{}  final P(true goal) {:.3} +- {:.3}  -> {}",
                    run.agent,
                    run.seeds.len(),
                    run.seeds.len() + run.failures.len(),
                    m.mean,
                    m.std,
                    run.dir.display()
                );
            }
        }
        Command::Pirate(c) => {
            let (loaded, ov) = load(&c)?;
            for r in harness::cmd_pirate(&loaded, &ov)? {
                println!(
                    "{:<8} episode {:>4}  captured {}/{} ({:.3})",
                    r.agent, r.snapshot_episode, r.captures, r.trials, r.rate
                );
            }
        }
        Command::Report { dirs, out } => {
            for p in report::cmd_report(&dirs, out.as_deref())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
