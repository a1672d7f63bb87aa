use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ehmac::config::Config;
use ehmac::mdp::{backward_recursion, DiscretizationSpec, MdpTable};
use ehmac::model::{derive_seed, sample_path, SystemParams};
use ehmac::nn::{train, MlpModel, TrainingDataset};
use ehmac::offline::{generate_dataset, solve_offline};
use ehmac::sim::{
    export_results, mean_stderr, run_experiment, simulate_episode, GreedyPolicy, MdpPolicy,
    NnPolicy, ReplayPolicy, EVALUATION_STREAM,
};
use ehmac::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ehmac",
    version,
    about = "Version-update scheduling over an energy-harvesting multiple-access channel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file (defaults are used when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Output file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the discretized MDP and write the value/policy table
    SolveMdp {
        #[command(flatten)]
        common: Common,
    },
    /// Solve offline problems on training paths and write the dataset
    GenOffline {
        #[command(flatten)]
        common: Common,
        /// Number of paths (overrides `nn.training_paths`)
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Train the policy network on a dataset
    TrainNn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Simulate one policy and write per-episode objectives
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        /// Overrides `experiment.episodes`
        #[arg(long)]
        episodes: Option<usize>,
        /// Precomputed MDP table (solved on the fly otherwise)
        #[arg(long)]
        mdp_table: Option<PathBuf>,
        /// Trained network (required for `--policy nn`)
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the configured sweep for all selected policies
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Overrides `experiment.episodes`
        #[arg(long)]
        episodes: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Mdp,
    Greedy,
    Nn,
    Offline,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    Ok(cfg)
}

fn solve_table(cfg: &Config, params: &SystemParams) -> Result<MdpTable> {
    let model = cfg.model()?;
    let spec = DiscretizationSpec::uniform(cfg.discretization.step, params, &model);
    Ok(backward_recursion(params, &model, &spec)?.table)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SolveMdp { common } => {
            let cfg = load_config(&common)?;
            let params = cfg.params()?;
            solve_table(&cfg, &params)?.save(&common.out)?;
        }
        Command::GenOffline { common, paths } => {
            let cfg = load_config(&common)?;
            let n = paths.unwrap_or(cfg.nn.training_paths);
            let ds = generate_dataset(
                &cfg.model()?,
                &cfg.params()?,
                n,
                cfg.experiment.seed,
                &cfg.solver_options()?,
            )?;
            ds.save(&common.out)?;
            println!("{} records from {n} paths", ds.records.len());
        }
        Command::TrainNn { common, dataset } => {
            let cfg = load_config(&common)?;
            let ds = TrainingDataset::load(&dataset)?;
            let (net, report) = train(&ds, &cfg.train_config()?)?;
            net.save(&common.out)?;
            println!(
                "best validation mse {:.6} at epoch {} ({} train / {} validation records)",
                report.best_validation,
                report.best_epoch + 1,
                report.train_records,
                report.validation_records
            );
        }
        Command::Simulate {
            common,
            policy,
            episodes,
            mdp_table,
            model,
        } => {
            let cfg = load_config(&common)?;
            let params = cfg.params()?;
            let stoch = cfg.model()?;
            let solver = cfg.solver_options()?;
            let episodes = episodes.unwrap_or(cfg.experiment.episodes);
            if episodes == 0 {
                return Err(Error::Config {
                    key: "episodes".into(),
                    msg: "must be at least 1".into(),
                });
            }
            let table = match (policy, mdp_table) {
                (PolicyArg::Mdp, Some(path)) => Some(MdpTable::load(path)?),
                (PolicyArg::Mdp, None) => Some(solve_table(&cfg, &params)?),
                _ => None,
            };
            let net = match (policy, model) {
                (PolicyArg::Nn, Some(path)) => Some(MlpModel::load(path)?),
                (PolicyArg::Nn, None) => {
                    return Err(Error::Config {
                        key: "model".into(),
                        msg: "--policy nn needs --model (see train-nn)".into(),
                    })
                }
                _ => None,
            };
            let mut w = csv::Writer::from_path(&common.out)?;
            w.write_record(["episode", "path_seed", "policy", "objective"])?;
            let mut objectives = Vec::with_capacity(episodes);
            for k in 0..episodes {
                let seed = derive_seed(cfg.experiment.seed, EVALUATION_STREAM, k as u64);
                let path = sample_path(&stoch, &params, seed);
                let (name, ep) = match policy {
                    PolicyArg::Mdp => (
                        "mdp",
                        simulate_episode(
                            &MdpPolicy {
                                table: table.as_ref().unwrap(),
                            },
                            &path,
                            &params,
                        )?,
                    ),
                    PolicyArg::Greedy => (
                        "greedy",
                        simulate_episode(
                            &GreedyPolicy {
                                params: &params,
                                solver: solver.clone(),
                            },
                            &path,
                            &params,
                        )?,
                    ),
                    PolicyArg::Nn => (
                        "nn",
                        simulate_episode(
                            &NnPolicy {
                                model: net.as_ref().unwrap(),
                                params: &params,
                            },
                            &path,
                            &params,
                        )?,
                    ),
                    PolicyArg::Offline => {
                        let sol = solve_offline(&path, &params, &solver).map_err(|e| {
                            Error::PathSolve {
                                seed,
                                source: Box::new(e),
                            }
                        })?;
                        (
                            "offline",
                            simulate_episode(
                                &ReplayPolicy {
                                    actions: sol.actions,
                                },
                                &path,
                                &params,
                            )?,
                        )
                    }
                };
                w.write_record([
                    k.to_string(),
                    seed.to_string(),
                    name.to_string(),
                    format!("{:?}", ep.objective),
                ])?;
                objectives.push(ep.objective);
            }
            w.flush()?;
            let (mean, se) = mean_stderr(&objectives);
            println!("mean cost {mean:.6} (stderr {se:.6}, {episodes} episodes)");
        }
        Command::Experiment { common, episodes } => {
            let cfg = load_config(&common)?;
            let mut exp = cfg.experiment()?;
            if let Some(n) = episodes {
                exp.episodes = n;
            }
            let res = run_experiment(&exp)?;
            export_results(&res, &common.out)?;
            for r in &res.rows {
                println!(
                    "{}={:<4} {:<8} {:.4} +- {:.4}",
                    res.sweep_param,
                    r.sweep_value,
                    r.policy.name(),
                    r.mean_cost,
                    r.stderr
                );
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
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
