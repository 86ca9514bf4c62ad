//! Experiment orchestration: training runs over seeds, the independent-Q
//! baseline, greedy evaluation, aggregation, transfer, and output files.

pub mod baseline;
pub mod config;
pub mod metrics;
pub mod output;
pub mod train;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub use baseline::{run_baseline_dqn_update, DqnAgent};
pub use config::{parse_override, Algorithm, ExperimentConfig, CONFIG_KEYS};
pub use metrics::{aggregate_metrics, window_means, MetricsRecord, Stat, StepLogRow, StepMode, Summary, WindowMeans};
pub use train::{derive_seed, eval_env_seed, run_episode, train_env_seed, RunCounters, SharedAts, Team, TrainTick};

use crate::ats::{import_shared, AttentionParams};
use crate::error::{Error, Result};

/// Runs `f` over `items`, on the thread pool when `parallel` is enabled.
fn map_seeds<T, F>(items: &[T], f: F) -> Result<Vec<SeedRun>>
where
    T: Sync,
    F: Fn(&T) -> Result<SeedRun> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return items.iter().map(f).collect();
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    /// One record per training episode.
    pub records: Vec<MetricsRecord>,
    /// Greedy evaluation records; `episode` is the checkpoint (episodes
    /// completed when the evaluation ran).
    pub evals: Vec<MetricsRecord>,
    pub step_log: Vec<StepLogRow>,
    pub team: Team,
    pub counters: RunCounters,
    /// Set when the seed aborted on a numeric failure.
    pub failure: Option<String>,
}

impl SeedRun {
    /// Evaluations whose checkpoint lies strictly after
    /// `episodes * (1 - final_window)`.
    pub fn final_window(&self, cfg: &ExperimentConfig) -> Vec<MetricsRecord> {
        let start = cfg.episodes as f64 * (1.0 - cfg.final_window);
        self.evals
            .iter()
            .filter(|r| r.episode as f64 > start + 1e-9)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRun>,
    /// Over the seeds that finished; failed seeds are listed separately.
    pub summary: Summary,
    pub failed_seeds: Vec<(u64, String)>,
}

impl RunResult {
    pub fn window_means(&self) -> Vec<(u64, WindowMeans)> {
        self.seeds
            .iter()
            .filter(|s| s.failure.is_none())
            .filter_map(|s| window_means(&s.final_window(&self.config)).ok().map(|m| (s.seed, m)))
            .collect()
    }
}

/// Greedy evaluation of `team` over `episodes` fixed environment seeds.
pub fn evaluate(cfg: &ExperimentConfig, team: &mut Team, episodes: usize, seed: u64, checkpoint: usize) -> Result<Vec<MetricsRecord>> {
    (0..episodes)
        .map(|k| run_episode(team, cfg, eval_env_seed(seed, k), None, None, checkpoint))
        .collect()
}

/// Trains one seed. Numeric failures end the run early and are recorded in
/// [`SeedRun::failure`]; configuration errors are returned.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, ats: Option<AttentionParams>) -> Result<SeedRun> {
    let team = Team::new(cfg, seed, ats)?;
    let mut run = SeedRun {
        seed,
        records: Vec::with_capacity(cfg.episodes),
        evals: Vec::new(),
        step_log: Vec::new(),
        team,
        counters: RunCounters::default(),
        failure: None,
    };
    for ep in 0..cfg.episodes {
        let tick = TrainTick::at(cfg, ep);
        let log = cfg.step_log.then_some(&mut run.step_log);
        let outcome = run_episode(&mut run.team, cfg, train_env_seed(seed, ep), Some((tick, &mut run.counters)), log, ep)
            .and_then(|rec| {
                run.records.push(rec);
                let done = ep + 1;
                if done % cfg.eval_every == 0 || done == cfg.episodes {
                    let evals = evaluate(cfg, &mut run.team, cfg.eval_episodes, seed, done)?;
                    run.evals.extend(evals);
                }
                Ok(())
            });
        match outcome {
            Ok(()) => {}
            Err(Error::NonFinite(what)) => {
                run.failure = Some(format!("episode {ep}: non-finite value in {what}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

fn finish(cfg: &ExperimentConfig, seeds: Vec<SeedRun>) -> Result<RunResult> {
    let failed_seeds: Vec<(u64, String)> = seeds
        .iter()
        .filter_map(|s| s.failure.clone().map(|f| (s.seed, f)))
        .collect();
    let windows: Vec<Vec<MetricsRecord>> = seeds
        .iter()
        .filter(|s| s.failure.is_none())
        .map(|s| s.final_window(cfg))
        .collect();
    let summary = if windows.is_empty() {
        Summary::new()
    } else {
        aggregate_metrics(&windows)?
    };
    let result = RunResult {
        config: cfg.clone(),
        seeds,
        summary,
        failed_seeds,
    };
    if let Some(dir) = &cfg.out_dir {
        output::write_run(dir, &result)?;
    }
    Ok(result)
}

fn train_all(cfg: &ExperimentConfig, ats: Option<&AttentionParams>) -> Result<RunResult> {
    cfg.validate()?;
    let seeds = map_seeds(&cfg.seeds, |s| train_seed(cfg, *s, ats.cloned()))?;
    finish(cfg, seeds)
}

/// Trains every configured seed in parallel. A configured
/// `pretrained_ats` is imported first, as in [`run_transfer`].
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunResult> {
    match &cfg.pretrained_ats {
        Some(path) => run_transfer(cfg, path),
        None => train_all(cfg, None),
    }
}

/// Imports a shared selector and trains fresh agents around it.
pub fn run_transfer(cfg: &ExperimentConfig, path: impl AsRef<std::path::Path>) -> Result<RunResult> {
    if cfg.algorithm != Algorithm::Pat {
        return Err(Error::Config("transfer requires algorithm = pat".into()));
    }
    cfg.validate()?;
    let ats = import_shared(path, &cfg.ats_dims())?;
    train_all(cfg, Some(&ats))
}

/// Per-seed transfer where each seed gets its own pretrained selector.
pub fn run_transfer_per_seed(cfg: &ExperimentConfig, ats: &[(u64, AttentionParams)]) -> Result<RunResult> {
    cfg.validate()?;
    let seeds = map_seeds(ats, |(s, p)| {
        let bad = p.dims.mismatches(&cfg.ats_dims());
        if !bad.is_empty() {
            return Err(Error::Incompatible(bad.join("; ")));
        }
        train_seed(cfg, *s, Some(p.clone()))
    })?;
    finish(cfg, seeds)
}

#[cfg(test)]
mod tests;
