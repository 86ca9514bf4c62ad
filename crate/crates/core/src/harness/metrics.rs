use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "episode,avg_step,success,team_reward,student_mode_freq";
pub const STEP_LOG_HEADER: &str = "episode,step,agent,mode,action,reward";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub episode: usize,
    /// Episode length in steps.
    pub avg_step: f64,
    /// Landmark coverage; `None` for treasure games.
    pub success: Option<bool>,
    /// Sum of every agent's reward over the episode.
    pub team_reward: f64,
    /// Discounted team reward from the first step.
    pub discounted_return: f64,
    /// Fraction of steps each agent spent in student mode.
    pub student_mode_freq: Vec<f64>,
}

impl MetricsRecord {
    pub fn mean_student_freq(&self) -> f64 {
        if self.student_mode_freq.is_empty() {
            0.0
        } else {
            self.student_mode_freq.iter().sum::<f64>() / self.student_mode_freq.len() as f64
        }
    }

    pub fn csv_row(&self) -> String {
        let success = match self.success {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        format!(
            "{},{},{},{},{}",
            self.episode,
            self.avg_step,
            success,
            self.team_reward,
            self.mean_student_freq()
        )
    }
}

pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Student,
    SelfLearning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLogRow {
    pub episode: usize,
    pub step: usize,
    pub agent: usize,
    pub mode: StepMode,
    pub action: usize,
    pub reward: f64,
}

pub fn step_log_csv(rows: &[StepLogRow]) -> String {
    let mut s = String::with_capacity(32 * (rows.len() + 1));
    s.push_str(STEP_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let mode = match r.mode {
            StepMode::Student => "student",
            StepMode::SelfLearning => "self",
        };
        let _ = writeln!(s, "{},{},{},{},{},{}", r.episode, r.step, r.agent, mode, r.action, r.reward);
    }
    s
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Stat> {
        if values.is_empty() {
            return Err(Error::Usage("cannot aggregate zero seeds".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Stat { mean, std, n_seeds: n })
    }
}

/// Per-seed means of a final window of records.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMeans {
    pub avg_step: f64,
    pub success: Option<f64>,
    pub team_reward: f64,
    pub discounted_return: f64,
    pub student_mode_freq: f64,
}

pub fn window_means(records: &[MetricsRecord]) -> Result<WindowMeans> {
    if records.is_empty() {
        return Err(Error::Usage("empty evaluation window".into()));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let success = if records.iter().all(|r| r.success.is_some()) {
        Some(mean(&|r| if r.success == Some(true) { 1.0 } else { 0.0 }))
    } else {
        None
    };
    Ok(WindowMeans {
        avg_step: mean(&|r| r.avg_step),
        success,
        team_reward: mean(&|r| r.team_reward),
        discounted_return: mean(&|r| r.discounted_return),
        student_mode_freq: mean(&|r| r.mean_student_freq()),
    })
}

/// Metric name to seed statistics, as written to `summary.json`.
pub type Summary = BTreeMap<String, Stat>;

/// Aggregates per-seed final-window series into mean ± sample std.
pub fn aggregate_metrics(per_seed: &[Vec<MetricsRecord>]) -> Result<Summary> {
    if per_seed.is_empty() {
        return Err(Error::Usage("aggregate_metrics needs at least one seed".into()));
    }
    let means: Vec<WindowMeans> = per_seed.iter().map(|s| window_means(s)).collect::<Result<_>>()?;
    let mut out = Summary::new();
    let col = |f: fn(&WindowMeans) -> f64| means.iter().map(f).collect::<Vec<_>>();
    out.insert("avg_step".into(), Stat::of(&col(|m| m.avg_step))?);
    out.insert("team_reward".into(), Stat::of(&col(|m| m.team_reward))?);
    out.insert("discounted_return".into(), Stat::of(&col(|m| m.discounted_return))?);
    out.insert("student_mode_freq".into(), Stat::of(&col(|m| m.student_mode_freq))?);
    if means.iter().all(|m| m.success.is_some()) {
        out.insert("success".into(), Stat::of(&col(|m| m.success.unwrap()))?);
    }
    Ok(out)
}

pub fn summary_json(summary: &Summary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes") + "\n"
}
