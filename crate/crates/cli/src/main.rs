use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ipa_cli::config::{Algorithm, ExperimentConfig};
use ipa_core::federation::{DpConfig, Order};
use ipa_core::partition::PartitionKind;

#[derive(Parser)]
#[command(name = "ipa", version, about = "Iterative parameter alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a TOML config.
    Run(RunArgs),
    /// Serve one peer of a ring (started by `run --mode ring`).
    Node {
        #[arg(long)]
        config: PathBuf,
        /// Write this peer's per-round evaluations here as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
        /// Target accuracies in percent, comma separated.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Inprocess,
    Ring,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Ring,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Iid,
    Dirichlet,
    Disjoint,
    Cla,
    Pow,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long, value_enum, default_value = "inprocess")]
    mode: Mode,
    /// Seeds both the partition and the federation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_enum)]
    partition: Option<PartitionArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    p: Option<u8>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    target: Option<f64>,
    /// Turn on parameter noise with this standard deviation.
    #[arg(long)]
    dp_sigma: Option<f32>,
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(a) = self.algorithm {
            cfg.algorithm = a;
        }
        if let Some(s) = self.seed {
            cfg.federation.seed = s;
            cfg.partition.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        let fed = &mut cfg.federation;
        if let Some(r) = self.rounds {
            fed.rounds = r;
        }
        if let Some(k) = self.partition {
            cfg.partition.kind = match k {
                PartitionArg::Iid => PartitionKind::Iid,
                PartitionArg::Dirichlet => PartitionKind::Dirichlet,
                PartitionArg::Disjoint => PartitionKind::Disjoint,
                PartitionArg::Cla => PartitionKind::Cla,
                PartitionArg::Pow => PartitionKind::Pow,
            };
        }
        if let Some(a) = self.alpha {
            cfg.partition.alpha = Some(a);
        }
        if let Some(l) = self.lambda {
            fed.align.lambda = l;
        }
        if let Some(p) = self.p {
            fed.align.p = p;
        }
        if let Some(o) = self.order {
            fed.order = match o {
                OrderArg::Ring => Order::Ring,
                OrderArg::Random => Order::RandomPermutation,
            };
        }
        if let Some(e) = self.local_epochs {
            fed.local_epochs = e;
        }
        if let Some(lr) = self.lr {
            fed.sgd.lr = lr;
        }
        if let Some(t) = self.target {
            fed.target_accuracy = Some(t);
        }
        if let Some(s) = self.dp_sigma {
            let seed = fed.seed;
            fed.dp.get_or_insert(DpConfig { noise_seed: seed, ..DpConfig::default() }).sigma = s;
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Run(args) => {
            let mut cfg = ExperimentConfig::load(&args.config)?;
            args.apply(&mut cfg);
            let Some(out) = cfg.out.clone() else {
                bail!("no output directory: pass --out or set `out` in the config");
            };
            let summary = match args.mode {
                Mode::Inprocess => ipa_cli::run_experiment(&cfg, &out)?,
                Mode::Ring => {
                    let exe = std::env::current_exe().context("locating the ipa executable")?;
                    ipa_cli::run_ring(&cfg, &out, &exe)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Node { config, records } => ipa_cli::ring::run_node(&config, records.as_ref())?,
        Cmd::Report { run_dir, targets } => {
            let r = ipa_cli::report(&run_dir, &targets)?;
            print!("{}", r.text);
        }
    }
    Ok(())
}
