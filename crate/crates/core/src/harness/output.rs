//! Files written under a run's output directory:
//!
//! ```text
//! manifest.json            resolved config, seeds, version, failures
//! summary.json             metric -> {mean, std, n_seeds}
//! config.txt               resolved config in the input format
//! seed_<s>/metrics.csv     one row per training episode
//! seed_<s>/eval.csv        greedy evaluations (episode = checkpoint)
//! seed_<s>/steps.csv       per-step log when step_log = true
//! seed_<s>/agent_<i>.patp  per-agent parameter snapshot
//! seed_<s>/ats.patp        shared attention snapshot (pat only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::baseline::DQN_NETWORKS;
use super::config::ExperimentConfig;
use super::metrics::{records_csv, step_log_csv, summary_json};
use super::train::Team;
use super::RunResult;
use crate::agent::AGENT_NETWORKS;
use crate::ats::{encode_shared, import_shared};
use crate::error::{Error, Result};
use crate::nn::{load_params, save_params};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn write_team(dir: &Path, team: &Team) -> Result<()> {
    fs::create_dir_all(dir)?;
    match team {
        Team::Pat { agents, ats, .. } => {
            for a in agents {
                save_params(&a.snapshot(), dir.join(format!("agent_{}.patp", a.id)))?;
            }
            fs::write(dir.join("ats.patp"), encode_shared(&ats.params))?;
        }
        Team::Iql { agents } => {
            for a in agents {
                save_params(&a.snapshot(), dir.join(format!("agent_{}.patp", a.id)))?;
            }
        }
    }
    Ok(())
}

/// Rebuilds a team from snapshots written by [`write_team`].
pub fn load_team(cfg: &ExperimentConfig, dir: &Path, seed: u64) -> Result<Team> {
    let mut team = Team::new(cfg, seed, None)?;
    let read = |i: usize| {
        let path = dir.join(format!("agent_{i}.patp"));
        load_params(&path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            other => other,
        })
    };
    match &mut team {
        Team::Pat { agents, ats, .. } => {
            for (i, a) in agents.iter_mut().enumerate() {
                a.restore(&read(i)?)?;
            }
            ats.params = import_shared(dir.join("ats.patp"), &cfg.ats_dims())?;
        }
        Team::Iql { agents } => {
            for (i, a) in agents.iter_mut().enumerate() {
                a.restore(&read(i)?)?;
            }
        }
    }
    Ok(team)
}

pub fn write_run(out: &Path, result: &RunResult) -> Result<()> {
    let cfg = &result.config;
    fs::create_dir_all(out)?;
    for run in &result.seeds {
        let dir = seed_dir(out, run.seed);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("metrics.csv"), records_csv(&run.records))?;
        fs::write(dir.join("eval.csv"), records_csv(&run.evals))?;
        if cfg.step_log {
            fs::write(dir.join("steps.csv"), step_log_csv(&run.step_log))?;
        }
        write_team(&dir, &run.team)?;
    }
    fs::write(out.join("summary.json"), summary_json(&result.summary))?;
    // recorded without `out_dir` so a run directory can be moved or diffed
    let recorded = ExperimentConfig {
        out_dir: None,
        ..cfg.clone()
    };
    fs::write(out.join("config.txt"), recorded.to_text())?;
    let networks: Vec<&str> = match cfg.algorithm {
        super::Algorithm::Pat => AGENT_NETWORKS.to_vec(),
        super::Algorithm::Iql => DQN_NETWORKS.to_vec(),
    };
    let config: serde_json::Map<String, serde_json::Value> =
        recorded.to_pairs().into_iter().map(|(k, v)| (k, json!(v))).collect();
    let manifest = json!({
        "version": VERSION,
        "algorithm": cfg.algorithm.name(),
        "seeds": cfg.seeds,
        "config": config,
        "agent_snapshot_networks": networks,
        "failed_seeds": result
            .failed_seeds
            .iter()
            .map(|(s, why)| json!({"seed": s, "reason": why}))
            .collect::<Vec<_>>(),
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(())
}
