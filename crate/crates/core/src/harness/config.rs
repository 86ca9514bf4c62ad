//! Plain-text experiment configuration: one `key = value` per line, `#`
//! starts a comment, unknown keys are errors. Later assignments win, so
//! command-line overrides are applied simply by appending them.

use std::path::{Path, PathBuf};

use crate::agent::AgentConfig;
use crate::ats::AtsDims;
use crate::env::{EnvSpec, GameKind, Pos};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Pat,
    Iql,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pat => "pat",
            Algorithm::Iql => "iql",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pat" => Ok(Algorithm::Pat),
            "iql" | "iql-baseline" | "dqn" => Ok(Algorithm::Iql),
            other => Err(Error::Config(format!("unknown algorithm `{other}` (expected pat or iql)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub agent: AgentConfig,
    pub algorithm: Algorithm,
    pub episodes: usize,
    pub warmup_episodes: usize,
    /// Episodes over which temperature, mode noise and epsilon anneal.
    pub explore_episodes: usize,
    pub update_every: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Fraction of the run whose evaluations enter the aggregates.
    pub final_window: f64,
    pub seeds: Vec<u64>,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub mode_noise: f64,
    pub student_eps_start: f64,
    pub ats_query_dim: usize,
    pub ats_value_dim: usize,
    pub ats_heads: usize,
    pub ats_dropout: f64,
    pub ats_lr: f64,
    pub dqn_lr: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub pretrained_ats: Option<PathBuf>,
    pub freeze_ats: bool,
    pub step_log: bool,
    pub out_dir: Option<PathBuf>,
}

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("game", "grid_treasure | moving_treasure | navigation"),
    ("width", "grid width"),
    ("height", "grid height"),
    ("agents", "team size M"),
    ("max_steps", "episode step cap"),
    ("view_radius", "observation window radius"),
    ("move_prob", "moving-object step probability"),
    ("cover_radius", "landmark cover radius (Chebyshev)"),
    ("gamma", "discount factor"),
    ("reward_collect", "reward for picking up a treasure"),
    ("reward_deposit", "reward per treasure deposited"),
    ("reward_wrong_bank", "penalty for visiting a non-matching bank while carrying"),
    ("reward_step", "per-step cost"),
    ("reward_cover", "reward per covered landmark"),
    ("reward_shaping", "distance shaping coefficient"),
    ("obstacles", "blocked cells, `x,y x,y ...`"),
    ("agent_cells", "fixed start cells, `x,y ...`"),
    ("treasure_cells", "treasure grid cells, `x,y ...`"),
    ("bank_cells", "bank cells, `x,y ...`"),
    ("landmark_cells", "landmark cells, `x,y ...`"),
    ("algorithm", "pat | iql"),
    ("episodes", "training episodes per seed"),
    ("warmup_episodes", "episodes before the student networks train"),
    ("explore_episodes", "annealing span in episodes"),
    ("update_every", "environment steps between gradient updates"),
    ("eval_every", "episodes between greedy evaluations"),
    ("eval_episodes", "episodes per evaluation"),
    ("final_window", "fraction of the run aggregated"),
    ("seeds", "comma-separated seed list"),
    ("hidden_dim", "encoder width D_m"),
    ("mlp_hidden", "actor/critic hidden width"),
    ("bptt", "truncated backpropagation window k"),
    ("mode_threshold", "student-mode threshold"),
    ("replay_capacity", "replay buffer capacity"),
    ("batch_size", "minibatch size"),
    ("tau_soft", "target network blend rate"),
    ("actor_lr", "self actor learning rate"),
    ("critic_lr", "self critic learning rate"),
    ("student_actor_lr", "student actor learning rate"),
    ("student_critic_lr", "student critic learning rate"),
    ("encoder_lr", "encoder learning rate"),
    ("clip_norm", "gradient norm clip, 0 disables"),
    ("temperature_start", "initial softmax temperature"),
    ("temperature_end", "final softmax temperature"),
    ("mode_noise", "initial mode noise half-width"),
    ("student_eps_start", "warm-up student probability at episode 0"),
    ("ats_query_dim", "attention key/query width D_q"),
    ("ats_value_dim", "attention value width D_v"),
    ("ats_heads", "attention heads H"),
    ("ats_dropout", "attention head dropout"),
    ("ats_lr", "attention learning rate"),
    ("dqn_lr", "baseline Q-network learning rate"),
    ("epsilon_start", "initial uniform-exploration probability"),
    ("epsilon_end", "final uniform-exploration probability"),
    ("pretrained_ats", "attention snapshot to import"),
    ("freeze_ats", "keep imported attention fixed"),
    ("step_log", "write per-step logs"),
    ("out_dir", "output directory"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_cells(key: &str, v: &str) -> Result<Vec<Pos>> {
    v.split(|c: char| c.is_whitespace() || c == ';')
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("`{key}`: cell `{pair}` is not `x,y`")))?;
            Ok(Pos::new(parse_num(key, x.trim())?, parse_num(key, y.trim())?))
        })
        .collect()
}

fn fmt_cells(cells: &[Pos]) -> String {
    cells.iter().map(|p| format!("{},{}", p.x, p.y)).collect::<Vec<_>>().join(" ")
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `KEY=VALUE` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{s}` is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    /// Defaults for a game; the harness defaults are desk-scale.
    pub fn new(env: EnvSpec) -> Self {
        let agent = AgentConfig {
            bptt: if env.kind == GameKind::Navigation { 4 } else { 8 },
            gamma: env.gamma,
            ..AgentConfig::default()
        };
        ExperimentConfig {
            env,
            agent,
            algorithm: Algorithm::Pat,
            episodes: 1000,
            warmup_episodes: 100,
            explore_episodes: 800,
            update_every: 1,
            eval_every: 50,
            eval_episodes: 5,
            final_window: 0.1,
            seeds: (0..5).collect(),
            temperature_start: 1.0,
            temperature_end: 0.1,
            mode_noise: 0.1,
            student_eps_start: 0.5,
            ats_query_dim: 32,
            ats_value_dim: 64,
            ats_heads: 4,
            ats_dropout: 0.1,
            ats_lr: 1e-4,
            dqn_lr: 1e-3,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            pretrained_ats: None,
            freeze_ats: false,
            step_log: false,
            out_dir: None,
        }
    }

    /// Builds a config from ordered pairs. The game, grid size and team
    /// size are resolved first since other defaults depend on them.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !CONFIG_KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let kind = GameKind::parse(last("game").unwrap_or("grid_treasure"))?;
        let width = last("width").map(|v| parse_num("width", v)).transpose()?.unwrap_or(8);
        let height = last("height").map(|v| parse_num("height", v)).transpose()?.unwrap_or(8);
        let agents = last("agents").map(|v| parse_num("agents", v)).transpose()?.unwrap_or(4);
        let env = match kind {
            GameKind::Navigation => EnvSpec::navigation(width, height, agents),
            k => EnvSpec::treasure(k, width, height, agents),
        };
        let mut cfg = ExperimentConfig::new(env);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Reads a config file and applies `overrides` on top.
    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.env;
        let a = &mut self.agent;
        match key {
            "game" | "width" | "height" | "agents" => {}
            "max_steps" => e.max_steps = parse_num(key, v)?,
            "view_radius" => e.view_radius = parse_num(key, v)?,
            "move_prob" => e.move_prob = parse_num(key, v)?,
            "cover_radius" => e.cover_radius = parse_num(key, v)?,
            "gamma" => {
                e.gamma = parse_num(key, v)?;
                a.gamma = e.gamma;
            }
            "reward_collect" => e.rewards.collect = parse_num(key, v)?,
            "reward_deposit" => e.rewards.deposit = parse_num(key, v)?,
            "reward_wrong_bank" => e.rewards.wrong_bank = parse_num(key, v)?,
            "reward_step" => e.rewards.step = parse_num(key, v)?,
            "reward_cover" => e.rewards.cover = parse_num(key, v)?,
            "reward_shaping" => e.rewards.shaping = parse_num(key, v)?,
            "obstacles" => e.obstacles = parse_cells(key, v)?,
            "agent_cells" => e.agent_cells = Some(parse_cells(key, v)?),
            "treasure_cells" => e.treasure_cells = Some(parse_cells(key, v)?),
            "bank_cells" => e.bank_cells = Some(parse_cells(key, v)?),
            "landmark_cells" => e.landmark_cells = Some(parse_cells(key, v)?),
            "algorithm" => self.algorithm = Algorithm::parse(v)?,
            "episodes" => self.episodes = parse_num(key, v)?,
            "warmup_episodes" => self.warmup_episodes = parse_num(key, v)?,
            "explore_episodes" => self.explore_episodes = parse_num(key, v)?,
            "update_every" => self.update_every = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "final_window" => self.final_window = parse_num(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "hidden_dim" => a.hidden_dim = parse_num(key, v)?,
            "mlp_hidden" => a.mlp_hidden = parse_num(key, v)?,
            "bptt" => a.bptt = parse_num(key, v)?,
            "mode_threshold" => a.mode_threshold = parse_num(key, v)?,
            "replay_capacity" => a.replay_capacity = parse_num(key, v)?,
            "batch_size" => a.batch_size = parse_num(key, v)?,
            "tau_soft" => a.tau_soft = parse_num(key, v)?,
            "actor_lr" => a.actor_lr = parse_num(key, v)?,
            "critic_lr" => a.critic_lr = parse_num(key, v)?,
            "student_actor_lr" => a.student_actor_lr = parse_num(key, v)?,
            "student_critic_lr" => a.student_critic_lr = parse_num(key, v)?,
            "encoder_lr" => a.encoder_lr = parse_num(key, v)?,
            "clip_norm" => {
                let c: f64 = parse_num(key, v)?;
                a.clip_norm = (c > 0.0).then_some(c);
            }
            "temperature_start" => self.temperature_start = parse_num(key, v)?,
            "temperature_end" => self.temperature_end = parse_num(key, v)?,
            "mode_noise" => self.mode_noise = parse_num(key, v)?,
            "student_eps_start" => self.student_eps_start = parse_num(key, v)?,
            "ats_query_dim" => self.ats_query_dim = parse_num(key, v)?,
            "ats_value_dim" => self.ats_value_dim = parse_num(key, v)?,
            "ats_heads" => self.ats_heads = parse_num(key, v)?,
            "ats_dropout" => self.ats_dropout = parse_num(key, v)?,
            "ats_lr" => self.ats_lr = parse_num(key, v)?,
            "dqn_lr" => self.dqn_lr = parse_num(key, v)?,
            "epsilon_start" => self.epsilon_start = parse_num(key, v)?,
            "epsilon_end" => self.epsilon_end = parse_num(key, v)?,
            "pretrained_ats" => self.pretrained_ats = (!v.is_empty()).then(|| PathBuf::from(v)),
            "freeze_ats" => self.freeze_ats = parse_bool(key, v)?,
            "step_log" => self.step_log = parse_bool(key, v)?,
            "out_dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.seeds.is_empty() {
            return bad("seed list must not be empty");
        }
        if self.episodes < 1 {
            return bad("episodes must be >= 1");
        }
        if self.update_every < 1 || self.eval_every < 1 || self.eval_episodes < 1 {
            return bad("update_every, eval_every and eval_episodes must be >= 1");
        }
        if !(self.final_window > 0.0 && self.final_window <= 1.0) {
            return bad("final_window must lie in (0,1]");
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.student_eps_start) || !(0.0..=1.0).contains(&self.mode_noise) {
            return bad("student_eps_start and mode_noise must lie in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon values must lie in [0,1]");
        }
        if self.algorithm == Algorithm::Pat {
            self.ats_dims().validate()?;
        }
        Ok(())
    }

    pub fn observation_length(&self) -> usize {
        self.env.observation_length()
    }

    /// Attention dimensions implied by the agent topology.
    pub fn ats_dims(&self) -> AtsDims {
        AtsDims {
            d_m: self.agent.hidden_dim,
            d_h: 2 * self.agent.hidden_dim,
            d_q: self.ats_query_dim,
            d_v: self.ats_value_dim,
            p: self.agent.actor_spec().param_count(),
            heads: self.ats_heads,
            dropout: self.ats_dropout,
        }
    }

    /// Every key with its resolved value, in documentation order; parsing
    /// the result reproduces this config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let e = &self.env;
        let a = &self.agent;
        let r = &e.rewards;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("game", e.kind.name().into());
        put("width", e.width.to_string());
        put("height", e.height.to_string());
        put("agents", e.agents.to_string());
        put("max_steps", e.max_steps.to_string());
        put("view_radius", e.view_radius.to_string());
        put("move_prob", e.move_prob.to_string());
        put("cover_radius", e.cover_radius.to_string());
        put("gamma", e.gamma.to_string());
        put("reward_collect", r.collect.to_string());
        put("reward_deposit", r.deposit.to_string());
        put("reward_wrong_bank", r.wrong_bank.to_string());
        put("reward_step", r.step.to_string());
        put("reward_cover", r.cover.to_string());
        put("reward_shaping", r.shaping.to_string());
        put("obstacles", fmt_cells(&e.obstacles));
        for (k, cells) in [
            ("agent_cells", &e.agent_cells),
            ("treasure_cells", &e.treasure_cells),
            ("bank_cells", &e.bank_cells),
            ("landmark_cells", &e.landmark_cells),
        ] {
            if let Some(c) = cells {
                put(k, fmt_cells(c));
            }
        }
        put("algorithm", self.algorithm.name().into());
        put("episodes", self.episodes.to_string());
        put("warmup_episodes", self.warmup_episodes.to_string());
        put("explore_episodes", self.explore_episodes.to_string());
        put("update_every", self.update_every.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("final_window", self.final_window.to_string());
        put("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        put("hidden_dim", a.hidden_dim.to_string());
        put("mlp_hidden", a.mlp_hidden.to_string());
        put("bptt", a.bptt.to_string());
        put("mode_threshold", a.mode_threshold.to_string());
        put("replay_capacity", a.replay_capacity.to_string());
        put("batch_size", a.batch_size.to_string());
        put("tau_soft", a.tau_soft.to_string());
        put("actor_lr", a.actor_lr.to_string());
        put("critic_lr", a.critic_lr.to_string());
        put("student_actor_lr", a.student_actor_lr.to_string());
        put("student_critic_lr", a.student_critic_lr.to_string());
        put("encoder_lr", a.encoder_lr.to_string());
        put("clip_norm", a.clip_norm.unwrap_or(0.0).to_string());
        put("temperature_start", self.temperature_start.to_string());
        put("temperature_end", self.temperature_end.to_string());
        put("mode_noise", self.mode_noise.to_string());
        put("student_eps_start", self.student_eps_start.to_string());
        put("ats_query_dim", self.ats_query_dim.to_string());
        put("ats_value_dim", self.ats_value_dim.to_string());
        put("ats_heads", self.ats_heads.to_string());
        put("ats_dropout", self.ats_dropout.to_string());
        put("ats_lr", self.ats_lr.to_string());
        put("dqn_lr", self.dqn_lr.to_string());
        put("epsilon_start", self.epsilon_start.to_string());
        put("epsilon_end", self.epsilon_end.to_string());
        if let Some(p) = &self.pretrained_ats {
            put("pretrained_ats", p.display().to_string());
        }
        put("freeze_ats", self.freeze_ats.to_string());
        put("step_log", self.step_log.to_string());
        if let Some(p) = &self.out_dir {
            put("out_dir", p.display().to_string());
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
