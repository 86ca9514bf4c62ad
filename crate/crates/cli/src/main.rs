//! `pat`: train, evaluate and transfer PAT teams from a config file.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime or numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pat_core::env::{oracle_optimal_return, render, GridEnv};
use pat_core::harness::metrics::{aggregate_metrics, records_csv, summary_json};
use pat_core::harness::output::{load_team, seed_dir};
use pat_core::harness::{evaluate, parse_override, run_training, run_transfer, ExperimentConfig, RunResult, CONFIG_KEYS};
use pat_core::Error;

#[derive(Parser)]
#[command(name = "pat", version, about = "Decentralized multi-agent RL with attention-based teacher selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write logs, snapshots and aggregates.
    Train(Common),
    /// Greedy evaluation of snapshots written by `train`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of the training run to evaluate.
        #[arg(long)]
        from: PathBuf,
        /// Episodes per seed; defaults to `eval_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train fresh agents around a pretrained shared selector.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Selector snapshot (`ats.patp`) to import.
        #[arg(long)]
        ats: PathBuf,
    },
    /// Optimal discounted return of a small single-agent game.
    Oracle(Common),
    /// Parse a config, print the resolved values and exit.
    ValidateConfig(Common),
    /// Print the start layout of the configured game.
    Render {
        #[command(flatten)]
        common: Common,
        /// Environment seed.
        #[arg(long, default_value_t = 0)]
        env_seed: u64,
    },
    /// List every accepted config key.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; later overrides win over earlier ones and the file.
    #[arg(long = "set", value_name = "K=V")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds 0..N instead of the configured list.
    #[arg(long)]
    seeds: Option<u64>,
    /// Suppress progress and summary output.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut pairs = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(n) = self.seeds {
            if n == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let list: Vec<String> = (0..n).map(|s| s.to_string()).collect();
            pairs.push(("seeds".into(), list.join(",")));
        }
        if let Some(out) = &self.out {
            pairs.push(("out_dir".into(), out.display().to_string()));
        }
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &pairs),
            None => ExperimentConfig::from_pairs(&pairs),
        }
    }

    fn say(&self, text: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", text.as_ref());
        }
    }
}

fn report(common: &Common, result: &RunResult) {
    for (seed, m) in result.window_means() {
        common.say(format!(
            "seed {seed}: team_reward {:.3} avg_step {:.1} student_freq {:.3}",
            m.team_reward, m.avg_step, m.student_mode_freq
        ));
    }
    for (seed, why) in &result.failed_seeds {
        eprintln!("seed {seed} failed: {why}");
    }
    for (name, s) in &result.summary {
        common.say(format!("{name}: {:.4} ± {:.4} (n={})", s.mean, s.std, s.n_seeds));
    }
}

/// Runs that lost every seed to numeric failure are runtime errors.
fn check_failures(result: &RunResult) -> Result<(), Error> {
    if !result.failed_seeds.is_empty() && result.failed_seeds.len() == result.seeds.len() {
        return Err(Error::NonFinite("every seed".into()));
    }
    Ok(())
}

fn eval_from(common: &Common, from: &Path, episodes: Option<usize>) -> Result<(), Error> {
    let cfg = common.load()?;
    let n = episodes.unwrap_or(cfg.eval_episodes);
    if n == 0 {
        return Err(Error::Config("--episodes must be at least 1".into()));
    }
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let mut team = load_team(&cfg, &seed_dir(from, seed), seed)?;
        let records = evaluate(&cfg, &mut team, n, seed, cfg.episodes)?;
        let mean = records.iter().map(|r| r.team_reward).sum::<f64>() / n as f64;
        common.say(format!("seed {seed}: team_reward {mean:.3} over {n} episodes"));
        per_seed.push((seed, records));
    }
    let summary = aggregate_metrics(&per_seed.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?;
    for (name, s) in &summary {
        common.say(format!("{name}: {:.4} ± {:.4} (n={})", s.mean, s.std, s.n_seeds));
    }
    if let Some(out) = &cfg.out_dir {
        std::fs::create_dir_all(out)?;
        for (seed, records) in &per_seed {
            let dir = seed_dir(out, *seed);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("eval_final.csv"), records_csv(records))?;
        }
        std::fs::write(out.join("eval_summary.json"), summary_json(&summary))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(common) => {
            let result = run_training(&common.load()?)?;
            report(&common, &result);
            check_failures(&result)
        }
        Command::Transfer { common, ats } => {
            let result = run_transfer(&common.load()?, &ats)?;
            report(&common, &result);
            check_failures(&result)
        }
        Command::Eval { common, from, episodes } => eval_from(&common, &from, episodes),
        Command::Oracle(common) => {
            let cfg = common.load()?;
            let v = oracle_optimal_return(&cfg.env)?;
            println!("{v}");
            Ok(())
        }
        Command::ValidateConfig(common) => {
            let cfg = common.load()?;
            common.say(cfg.to_text().trim_end());
            Ok(())
        }
        Command::Render { common, env_seed } => {
            let cfg = common.load()?;
            let (env, _) = GridEnv::reset(&cfg.env, env_seed)?;
            print!("{}", render(&env));
            Ok(())
        }
        Command::Keys => {
            for (k, doc) in CONFIG_KEYS {
                println!("{k:<22} {doc}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) | Error::Io(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
