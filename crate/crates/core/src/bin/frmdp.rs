use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frmdp::bench::{self, GeneratorSpec};
use frmdp::experiment::{self, ConfigFile};
use frmdp::{solve_optimal, TabularMdp, Tolerances};

#[derive(Parser)]
#[command(name = "frmdp", version, about = "Entropy-regularised MDP flows and bound certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments in a config file.
    Run {
        config: PathBuf,
        /// Exit with status 1 if any bound or check fails.
        #[arg(long)]
        assert_bounds: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output root (default: `runs/` next to the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a random MDP as JSON.
    Gen {
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 1.0)]
        cost_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        concentration: f64,
    },
    /// Validate an MDP file.
    Check {
        mdp: PathBuf,
        /// Also solve for the optimal soft value.
        #[arg(long)]
        solve: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = Tolerances::from_env() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match cli.command {
        Command::Run { config, assert_bounds, jobs, out } => run(&config, assert_bounds, jobs, out),
        Command::Gen { states, actions, seed, gamma, tau, cost_scale, concentration } => {
            let mut spec = GeneratorSpec::new(states, actions, seed).with_gamma_tau(gamma, tau);
            spec.cost_scale = cost_scale;
            spec.transition_concentration = concentration;
            match bench::generate_mdp(&spec).and_then(|m| m.to_json_pretty()) {
                Ok(json) => {
                    println!("{json}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Check { mdp, solve } => check(&mdp, solve),
    }
}

fn run(config: &Path, assert_bounds: bool, jobs: usize, out: Option<PathBuf>) -> ExitCode {
    let configs = match ConfigFile::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out_root = out.unwrap_or_else(|| base.join("runs"));
    let results = match experiment::run_batch(&configs, &base, &out_root, jobs) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut config_error = false;
    let mut failed = false;
    for (cfg, r) in configs.iter().zip(results) {
        match r {
            Ok(outcome) => {
                println!("{}", experiment::describe(&outcome));
                failed |= !outcome.summary.passed;
            }
            Err(e) => {
                eprintln!("{}: error: {e}", cfg.name);
                config_error = true;
            }
        }
    }
    if config_error {
        ExitCode::from(2)
    } else if assert_bounds && failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn check(path: &Path, solve: bool) -> ExitCode {
    let mdp = match TabularMdp::load(path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("invalid: {e}");
            return ExitCode::from(2);
        }
    };
    println!(
        "valid: {} states, {} actions, gamma = {}, tau = {}",
        mdp.n_states(),
        mdp.n_actions(),
        mdp.gamma(),
        mdp.tau()
    );
    if solve {
        if mdp.tau() == 0.0 {
            eprintln!("--solve needs tau > 0");
            return ExitCode::from(2);
        }
        match solve_optimal(&mdp, Tolerances::global().optimal_solve, 1_000_000) {
            Ok(sol) => {
                println!("iterations: {}, residual: {:e}", sol.iterations, sol.residual);
                println!("V*(rho) = {}", sol.v_rho(mdp.rho()));
                let v: Vec<String> = sol.v_star.iter().map(|x| format!("{x}")).collect();
                println!("V* = [{}]", v.join(", "));
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::SUCCESS
}
