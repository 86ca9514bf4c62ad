//! Episode loop for PAT teams and the independent-Q baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::baseline::{run_baseline_dqn_update, DqnAgent};
use super::config::{Algorithm, ExperimentConfig};
use super::metrics::{MetricsRecord, StepLogRow, StepMode};
use crate::agent::explore::{argmax, gumbel_vec, sample_softmax};
use crate::agent::{Mode, PatAgent, StudentTransition};
use crate::ats::{advise, head_dropout, update_ats, AtsSample, AttentionParams, Explore, TeacherPacket};
use crate::env::{GameKind, GridEnv, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState};

/// SplitMix64 finalizer over `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_AGENT: u64 = 1;
const STREAM_ATS: u64 = 2;
const STREAM_TEAM: u64 = 3;
const STREAM_TRAIN_ENV: u64 = 4;
pub(crate) const STREAM_EVAL_ENV: u64 = 5;

/// The shared selector and its optimizer.
#[derive(Debug, Clone)]
pub struct SharedAts {
    pub params: AttentionParams,
    pub opt: AdamState,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub enum Team {
    Pat { agents: Vec<PatAgent>, ats: SharedAts, rng: ChaCha8Rng },
    Iql { agents: Vec<DqnAgent> },
}

impl Team {
    /// Fresh networks for `seed`; `ats` replaces the selector's random
    /// initialization when given.
    pub fn new(cfg: &ExperimentConfig, seed: u64, ats: Option<AttentionParams>) -> Result<Team> {
        let m = cfg.env.agents;
        let obs = cfg.observation_length();
        match cfg.algorithm {
            Algorithm::Pat => {
                let agents = (0..m)
                    .map(|i| PatAgent::new(i, obs, cfg.agent.clone(), derive_seed(seed, STREAM_AGENT, i as u64)))
                    .collect::<Result<Vec<_>>>()?;
                let params = match ats {
                    Some(p) => {
                        let bad = p.dims.mismatches(&cfg.ats_dims());
                        if !bad.is_empty() {
                            return Err(Error::Incompatible(bad.join("; ")));
                        }
                        p
                    }
                    None => AttentionParams::init(
                        cfg.ats_dims(),
                        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_ATS, 0)),
                    )?,
                };
                let opt = AdamState::new(
                    &params.params,
                    AdamConfig {
                        clip_norm: cfg.agent.clip_norm,
                        ..AdamConfig::with_lr(cfg.ats_lr)
                    },
                );
                Ok(Team::Pat {
                    agents,
                    ats: SharedAts {
                        params,
                        opt,
                        frozen: cfg.freeze_ats,
                    },
                    rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TEAM, 0)),
                })
            }
            Algorithm::Iql => {
                let agents = (0..m)
                    .map(|i| DqnAgent::new(i, obs, cfg.agent.clone(), cfg.dqn_lr, derive_seed(seed, STREAM_AGENT, i as u64)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Team::Iql { agents })
            }
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Team::Pat { agents, .. } => agents.len(),
            Team::Iql { agents } => agents.len(),
        }
    }

    pub fn ats(&self) -> Option<&AttentionParams> {
        match self {
            Team::Pat { ats, .. } => Some(&ats.params),
            Team::Iql { .. } => None,
        }
    }
}

/// Exploration settings for one training episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainTick {
    pub episode: usize,
    pub temperature: f64,
    pub mode_noise: f64,
    pub epsilon: f64,
    /// Forced student probability while warming up; `None` afterwards.
    pub warmup_student: Option<f64>,
}

impl TrainTick {
    pub fn at(cfg: &ExperimentConfig, episode: usize) -> TrainTick {
        let frac = if cfg.explore_episodes == 0 {
            1.0
        } else {
            (episode as f64 / cfg.explore_episodes as f64).min(1.0)
        };
        let lerp = |a: f64, b: f64| a + (b - a) * frac;
        let warmup_student = (episode < cfg.warmup_episodes)
            .then(|| cfg.student_eps_start * (1.0 - episode as f64 / cfg.warmup_episodes as f64));
        TrainTick {
            episode,
            temperature: lerp(cfg.temperature_start, cfg.temperature_end),
            mode_noise: cfg.mode_noise * (1.0 - frac),
            epsilon: lerp(cfg.epsilon_start, cfg.epsilon_end),
            warmup_student,
        }
    }
}

/// Counters that persist across episodes of one training run.
#[derive(Debug, Clone, Default)]
pub struct RunCounters {
    pub env_steps: u64,
    pub ats_updates: u64,
}

/// Plays one episode. With `train`, the team explores, stores transitions
/// and learns; otherwise it acts greedily without noise or dropout.
pub fn run_episode(
    team: &mut Team,
    cfg: &ExperimentConfig,
    env_seed: u64,
    train: Option<(TrainTick, &mut RunCounters)>,
    log: Option<&mut Vec<StepLogRow>>,
    episode_index: usize,
) -> Result<MetricsRecord> {
    match team {
        Team::Pat { agents, ats, rng } => pat_episode(agents, ats, rng, cfg, env_seed, train, log, episode_index),
        Team::Iql { agents } => iql_episode(agents, cfg, env_seed, train, log, episode_index),
    }
}

struct EpisodeTally {
    steps: usize,
    team_reward: f64,
    discounted: f64,
    discount: f64,
    student_steps: Vec<usize>,
    success: bool,
}

impl EpisodeTally {
    fn new(m: usize) -> Self {
        EpisodeTally {
            steps: 0,
            team_reward: 0.0,
            discounted: 0.0,
            discount: 1.0,
            student_steps: vec![0; m],
            success: false,
        }
    }

    fn add(&mut self, rewards: &[f64], gamma: f64) {
        let total: f64 = rewards.iter().sum();
        self.team_reward += total;
        self.discounted += self.discount * total;
        self.discount *= gamma;
        self.steps += 1;
    }

    fn finish(self, cfg: &ExperimentConfig, episode: usize) -> MetricsRecord {
        let steps = self.steps.max(1) as f64;
        MetricsRecord {
            episode,
            avg_step: self.steps as f64,
            success: (cfg.env.kind == GameKind::Navigation).then_some(self.success),
            team_reward: self.team_reward,
            discounted_return: self.discounted,
            student_mode_freq: self.student_steps.iter().map(|s| *s as f64 / steps).collect(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pat_episode(
    agents: &mut [PatAgent],
    ats: &mut SharedAts,
    rng: &mut ChaCha8Rng,
    cfg: &ExperimentConfig,
    env_seed: u64,
    mut train: Option<(TrainTick, &mut RunCounters)>,
    mut log: Option<&mut Vec<StepLogRow>>,
    episode_index: usize,
) -> Result<MetricsRecord> {
    let m = agents.len();
    let training = train.is_some();
    let tick = train.as_ref().map(|(t, _)| *t);
    let temperature = tick.map_or(cfg.temperature_end, |t| t.temperature);
    let (mut env, mut obs) = GridEnv::reset(&cfg.env, env_seed)?;
    for a in agents.iter_mut() {
        a.begin_episode();
        a.temperature = temperature;
        a.mode_noise = tick.map_or(0.0, |t| t.mode_noise);
    }
    let actor_spec = cfg.agent.actor_spec();
    let critic_spec = cfg.agent.critic_spec();
    let mut prev: Vec<Option<usize>> = vec![None; m];
    let mut pending: Vec<Option<(usize, f64, bool)>> = vec![None; m];
    let mut pending_student: Vec<Option<(Vec<f64>, f64, f64)>> = vec![None; m];
    let mut tally = EpisodeTally::new(m);

    loop {
        if env.is_done() && !training {
            break;
        }
        let mut ms = Vec::with_capacity(m);
        for (i, a) in agents.iter_mut().enumerate() {
            ms.push(a.encode_observation(&obs[i], prev[i])?.0);
        }
        if training {
            for (i, a) in agents.iter_mut().enumerate() {
                if let Some((action, reward, terminal)) = pending[i].take() {
                    a.store_transition(action, reward, terminal)?;
                }
                if let Some((sm, w, reward)) = pending_student[i].take() {
                    a.store_student(StudentTransition {
                        m: sm,
                        w,
                        reward,
                        m_next: ms[i].clone(),
                    });
                }
            }
        }
        if env.is_done() {
            break;
        }

        let packets: Vec<TeacherPacket> = if m > 1 {
            agents
                .iter()
                .map(|a| TeacherPacket {
                    id: a.id,
                    history: a.history_key(),
                    theta: a.actor_theta(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut actions = vec![0; m];
        let mut modes = vec![StepMode::SelfLearning; m];
        let mut students = Vec::new();
        for i in 0..m {
            let a = &mut agents[i];
            let (mode, w) = match tick.and_then(|t| t.warmup_student) {
                Some(eps) => {
                    let w = a.student_probability(&ms[i])?;
                    let mode = if rng.gen::<f64>() < eps { Mode::Student } else { Mode::SelfLearning };
                    (mode, w)
                }
                None => a.decide_mode(&ms[i], training)?,
            };
            let logits = a.self_logits(&ms[i])?;
            let greedy = argmax(&logits);
            let epsilon = tick.map_or(0.0, |t| t.epsilon);
            let self_action = if !training {
                greedy
            } else if a.rng().gen::<f64>() < epsilon {
                a.rng().gen_range(0..NUM_ACTIONS)
            } else {
                sample_softmax(&logits, temperature, a.rng())
            };
            if mode == Mode::Student && m > 1 {
                let teachers: Vec<&TeacherPacket> = packets.iter().filter(|p| p.id != i).collect();
                let explore = training.then_some(Explore {
                    temperature,
                    rng: &mut *rng,
                });
                let advice = advise(&ats.params, &actor_spec, &ms[i], &teachers, explore)?;
                actions[i] = advice.action;
                modes[i] = StepMode::Student;
                tally.student_steps[i] += 1;
                if training {
                    let r = a.student_reward(&ms[i], advice.action, greedy)?;
                    pending_student[i] = Some((ms[i].clone(), w, r));
                    students.push(i);
                }
            } else {
                actions[i] = self_action;
            }
        }

        let out = env.step(&actions)?;
        tally.add(&out.rewards, cfg.env.gamma);
        tally.success |= out.success;
        if let Some(rows) = log.as_deref_mut() {
            for i in 0..m {
                rows.push(StepLogRow {
                    episode: episode_index,
                    step: tally.steps - 1,
                    agent: i,
                    mode: modes[i],
                    action: actions[i],
                    reward: out.rewards[i],
                });
            }
        }
        for i in 0..m {
            pending[i] = Some((actions[i], out.rewards[i], out.terminal));
            prev[i] = Some(actions[i]);
        }
        obs = out.observations;

        if let Some((tick, counters)) = train.as_mut() {
            counters.env_steps += 1;
            if !students.is_empty() && !ats.frozen {
                let samples: Vec<AtsSample> = students
                    .iter()
                    .map(|&i| AtsSample {
                        m: ms[i].clone(),
                        exclude: Some(i),
                        critic: &agents[i].critic.params,
                        critic_spec: &critic_spec,
                        noise: gumbel_vec(NUM_ACTIONS, rng),
                        head_scale: head_dropout(&ats.params.dims, rng),
                    })
                    .collect();
                update_ats(&mut ats.params, &mut ats.opt, &actor_spec, &packets, &samples, temperature)?;
                counters.ats_updates += 1;
            }
            if counters.env_steps % cfg.update_every as u64 == 0 {
                for a in agents.iter_mut() {
                    if a.replay.len() >= a.config.batch_size {
                        let batch = a.sample_self_batch();
                        a.update_self(&batch)?;
                        a.soft_update_targets(a.config.tau_soft)?;
                    }
                    if tick.warmup_student.is_none() && a.student_replay.len() >= a.config.batch_size {
                        let batch = a.sample_student_batch();
                        a.update_student(&batch)?;
                    }
                }
            }
        }
    }
    Ok(tally.finish(cfg, episode_index))
}

fn iql_episode(
    agents: &mut [DqnAgent],
    cfg: &ExperimentConfig,
    env_seed: u64,
    mut train: Option<(TrainTick, &mut RunCounters)>,
    mut log: Option<&mut Vec<StepLogRow>>,
    episode_index: usize,
) -> Result<MetricsRecord> {
    let m = agents.len();
    let training = train.is_some();
    let (mut env, mut obs) = GridEnv::reset(&cfg.env, env_seed)?;
    for a in agents.iter_mut() {
        a.begin_episode();
        if let Some((t, _)) = &train {
            a.epsilon = t.epsilon;
        }
    }
    let mut prev: Vec<Option<usize>> = vec![None; m];
    let mut pending: Vec<Option<(usize, f64, bool)>> = vec![None; m];
    let mut tally = EpisodeTally::new(m);
    loop {
        if env.is_done() && !training {
            break;
        }
        let mut actions = vec![0; m];
        for (i, a) in agents.iter_mut().enumerate() {
            let mt = a.encode_observation(&obs[i], prev[i])?;
            if let Some((action, reward, terminal)) = pending[i].take() {
                a.store_transition(action, reward, terminal)?;
            }
            if !env.is_done() {
                actions[i] = a.act(&mt, training)?;
            }
        }
        if env.is_done() {
            break;
        }
        let out = env.step(&actions)?;
        tally.add(&out.rewards, cfg.env.gamma);
        tally.success |= out.success;
        if let Some(rows) = log.as_deref_mut() {
            for i in 0..m {
                rows.push(StepLogRow {
                    episode: episode_index,
                    step: tally.steps - 1,
                    agent: i,
                    mode: StepMode::SelfLearning,
                    action: actions[i],
                    reward: out.rewards[i],
                });
            }
        }
        for i in 0..m {
            pending[i] = Some((actions[i], out.rewards[i], out.terminal));
            prev[i] = Some(actions[i]);
        }
        obs = out.observations;
        if let Some((_, counters)) = train.as_mut() {
            counters.env_steps += 1;
            if counters.env_steps % cfg.update_every as u64 == 0 {
                for a in agents.iter_mut() {
                    if a.replay.len() >= a.config.batch_size {
                        let batch = a.sample_batch();
                        run_baseline_dqn_update(a, &batch)?;
                    }
                }
            }
        }
    }
    Ok(tally.finish(cfg, episode_index))
}

/// Environment seed for training episode `episode` of run `seed`.
pub fn train_env_seed(seed: u64, episode: usize) -> u64 {
    derive_seed(seed, STREAM_TRAIN_ENV, episode as u64)
}

/// Environment seed for evaluation episode `k`; the same at every checkpoint.
pub fn eval_env_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, STREAM_EVAL_ENV, k as u64)
}
