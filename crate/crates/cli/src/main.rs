//! `fedcl` command-line runner: single experiments and seed sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcl::config::load_config;
use fedcl::runner::{run_experiment, run_sweep};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "fedcl", version, about = "Federated continual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV, JSON and optional SVG outputs.
    Run(RunArgs),
    /// Run a grid of values on one axis over several seeds and write sweep.csv.
    Sweep(SweepArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// fmtl, sync or async.
    #[arg(long)]
    case: Option<String>,
    /// fedsgd, fedadam, fedadagrad or fedyogi.
    #[arg(long)]
    server: Option<String>,
    /// Server learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Client learning rate.
    #[arg(long)]
    mu: Option<f64>,
    /// Rounds R; must be a multiple of the task count.
    #[arg(long)]
    rounds: Option<usize>,
    /// Tasks T.
    #[arg(long)]
    tasks: Option<usize>,
    /// Clients N.
    #[arg(long)]
    clients: Option<usize>,
    /// Local epochs K per round.
    #[arg(long)]
    local_epochs: Option<usize>,
    /// Dirichlet concentration; switches to Dirichlet partitioning.
    #[arg(long)]
    alpha: Option<f64>,
    /// Probability that a client straggles in a round.
    #[arg(long)]
    drop_prob: Option<f64>,
    /// Also write SVG charts.
    #[arg(long)]
    emit_svg: bool,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// Flat JSON or TOML base config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Key to vary: eta, mu, local_epochs, rounds, clients, alpha, drop_prob, server or case.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Output directory for sweep.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn s(v: impl ToString) -> Value {
    Value::String(v.to_string())
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("seed", self.seed.map(s));
        put("output_dir", self.out.as_ref().map(|p| s(p.display())));
        put("case", self.case.as_ref().map(s));
        put("server", self.server.as_ref().map(s));
        put("server_lr", self.eta.map(s));
        put("client_lr", self.mu.map(s));
        put("rounds", self.rounds.map(s));
        put("tasks", self.tasks.map(s));
        put("clients", self.clients.map(s));
        put("local_epochs", self.local_epochs.map(s));
        put("dirichlet_alpha", self.alpha.map(s));
        put("drop_prob", self.drop_prob.map(s));
        put("emit_svg", self.emit_svg.then_some(Value::Bool(true)));
        o
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(args.config.as_deref(), &args.overrides())?;
            let res = run_experiment(&cfg)?;
            let bwt = res.bwt_f.map_or("undefined".to_string(), |b| format!("{b:.6}"));
            println!(
                "acc {:.6}  bwt_f {bwt}  c2s {} B  s2c {} B  ({:.2} s) -> {}",
                res.acc,
                res.total_c2s_bytes,
                res.total_s2c_bytes,
                res.wall_seconds,
                cfg.output_dir.display()
            );
        }
        Command::Sweep(args) => {
            let mut o = Vec::new();
            if let Some(out) = &args.out {
                o.push(("output_dir".to_string(), s(out.display())));
            }
            let cfg = load_config(args.config.as_deref(), &o)?;
            let path = run_sweep(&cfg, &args.axis, &args.values, &args.seeds)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their causes in the message.
            eprintln!("fedcl: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
