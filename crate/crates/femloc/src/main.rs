use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use femloc::commands;
use femloc::config::ExperimentConfig;
use femloc::report::render;
use femloc::Result;

#[derive(Parser)]
#[command(name = "femloc", version, about = "Federated meta-learning for RSSI fingerprint localization")]
#[command(after_help = "The output root defaults to $FEMLOC_OUT, then ./out.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output root; overrides the config file and $FEMLOC_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed of the federation.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Load, preprocess and split the data into task bundles.
    Preprocess(Common),
    /// Federated meta-training over the training tasks.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
        /// Directory of task bundles (defaults to the preprocess output).
        #[arg(long)]
        bundles: Option<PathBuf>,
    },
    /// RI vs MI adaptation on the held-out tasks.
    MetaTest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bundles: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// ε-accuracy and linearization probes (plain SGD).
    TheoryProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bundles: Option<PathBuf>,
    },
    /// Adaptation-speed table from finished meta-test runs.
    Report(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = Some(std::env::current_dir().unwrap_or_default().join(out));
    }
    if let Some(seed) = common.seed {
        cfg.federation.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(common) => {
            let cfg = load(&common)?;
            let s = commands::cmd_preprocess(&cfg)?;
            for t in &s.tasks {
                println!("{:<12} aps={:<4} support={:<5} query={:<5} dropped={}", t.id, t.aps, t.support, t.query, t.dropped_aps);
            }
            println!("train={:?} test={:?} meta_signal_dim={:?}", s.train, s.test, s.meta_signal_dim);
        }
        Command::MetaTrain { common, rounds, bundles } => {
            let mut cfg = load(&common)?;
            if let Some(r) = rounds {
                cfg.federation.rounds = r;
            }
            let (_, _, s) = commands::cmd_meta_train(&cfg, bundles.as_deref())?;
            println!(
                "rounds={} mean query loss {:?} -> {:?}; checkpoint {}",
                s.rounds_run,
                s.initial_mean_query_loss,
                s.final_mean_query_loss,
                s.checkpoint.display()
            );
        }
        Command::MetaTest { common, checkpoint, bundles, steps } => {
            let mut cfg = load(&common)?;
            if let Some(n) = steps {
                cfg.meta_test.steps = n;
            }
            let s = commands::cmd_meta_test(&cfg, checkpoint.as_deref(), bundles.as_deref())?;
            print!("{}", render(&s.table));
            for k in &s.knn {
                println!("knn k={} {}: mde {:.2} m", k.k, k.task, k.mde_m);
            }
        }
        Command::TheoryProbe { common, checkpoint, bundles } => {
            let cfg = load(&common)?;
            for p in commands::cmd_theory_probe(&cfg, checkpoint.as_deref(), bundles.as_deref())? {
                let r = &p.report;
                println!(
                    "{}: eps={} N_RI={:?} N_MI={:?} zeta={:.4e} delta1={:.4e}",
                    p.problem, r.epsilon, r.random.steps, r.meta.steps, r.zeta_hat, r.delta1_hat
                );
                for (lr, res) in &r.linearization_residuals {
                    println!("  lr={lr:e} residual={res:.3e}");
                }
            }
        }
        Command::Report(common) => {
            let cfg = load(&common)?;
            print!("{}", render(&commands::cmd_report(&cfg)?));
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
