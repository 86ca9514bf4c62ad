//! One decentralized agent: recurrent encoder, self-learning actor-critic
//! over a discrete action space, and the student actor-critic that chooses
//! between acting on its own policy and acting on team advice.

mod encoder;
pub mod explore;
mod replay;

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use encoder::{encoder_input, unroll_batch, Encoder, History, SparseRow, Unrolled};
pub use replay::ReplayBuffer;

use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::nn::{flatten_params, AdamConfig, AdamState, LstmCellSpec, MlpSpec, OutputActivation, ParamSet, Tape, Var};
use explore::{argmax, gumbel_vec, one_hot, sample_softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Encoder hidden size, also the width of `m`.
    pub hidden_dim: usize,
    /// Hidden width of every actor and critic.
    pub mlp_hidden: usize,
    /// Backpropagation-through-time window `k`.
    pub bptt: usize,
    pub mode_threshold: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub tau_soft: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub student_actor_lr: f64,
    pub student_critic_lr: f64,
    pub encoder_lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden_dim: 32,
            mlp_hidden: 64,
            bptt: 8,
            mode_threshold: 0.5,
            replay_capacity: 50_000,
            batch_size: 64,
            tau_soft: 0.01,
            gamma: 0.95,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            student_actor_lr: 1e-4,
            student_critic_lr: 1e-3,
            encoder_lr: 1e-3,
            clip_norm: Some(10.0),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden_dim == 0 || self.mlp_hidden == 0 {
            return bad("network widths must be positive");
        }
        if self.bptt == 0 {
            return bad("bptt window must be >= 1");
        }
        if !(self.mode_threshold > 0.0 && self.mode_threshold < 1.0) {
            return bad("mode threshold must lie in (0,1)");
        }
        if self.replay_capacity == 0 || self.batch_size == 0 {
            return bad("replay capacity and batch size must be positive");
        }
        if !(self.tau_soft > 0.0 && self.tau_soft <= 1.0) {
            return bad("soft update rate must lie in (0,1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0,1]");
        }
        Ok(())
    }

    /// Self actor topology: `m → hidden → action logits`. Shared by every
    /// agent, so flattened actors are comparable across the team.
    pub fn actor_spec(&self) -> MlpSpec {
        MlpSpec::new(vec![self.hidden_dim, self.mlp_hidden, NUM_ACTIONS], OutputActivation::Identity).unwrap()
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec::new(vec![self.hidden_dim + NUM_ACTIONS, self.mlp_hidden, 1], OutputActivation::Identity).unwrap()
    }

    pub fn student_actor_spec(&self) -> MlpSpec {
        MlpSpec::new(vec![self.hidden_dim, self.mlp_hidden, 1], OutputActivation::Sigmoid).unwrap()
    }

    pub fn student_critic_spec(&self) -> MlpSpec {
        MlpSpec::new(vec![self.hidden_dim + 1, self.mlp_hidden, 1], OutputActivation::Identity).unwrap()
    }
}

/// Encoder output `m_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl Deref for HiddenState {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Student,
    SelfLearning,
}

/// Threshold rule: student iff `clip(w + noise, 0, 1) > threshold`.
pub fn mode_for(w: f64, noise: f64, threshold: f64) -> Mode {
    if (w + noise).clamp(0.0, 1.0) > threshold {
        Mode::Student
    } else {
        Mode::SelfLearning
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub history: History,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentTransition {
    pub m: Vec<f64>,
    /// Student-mode probability emitted by the student actor.
    pub w: f64,
    pub reward: f64,
    pub m_next: Vec<f64>,
}

/// An online network, its target copy, and its optimizer.
#[derive(Debug, Clone)]
pub struct Net {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub target: ParamSet,
    pub opt: AdamState,
}

impl Net {
    fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R, lr: f64, clip: Option<f64>) -> Self {
        let params = spec.init(rng);
        let opt = AdamState::new(
            &params,
            AdamConfig {
                clip_norm: clip,
                ..AdamConfig::with_lr(lr)
            },
        );
        Net {
            target: params.clone(),
            params,
            spec,
            opt,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.spec.eval(&self.params, x)
    }

    pub fn step(&mut self) -> Result<()> {
        self.opt.step(&mut self.params)
    }
}

fn rows_to_flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

#[derive(Debug, Clone)]
pub struct PatAgent {
    pub id: usize,
    pub config: AgentConfig,
    pub encoder: Encoder,
    pub encoder_opt: AdamState,
    pub actor: Net,
    pub critic: Net,
    pub student_actor: Net,
    pub student_critic: Net,
    pub replay: ReplayBuffer<Transition>,
    pub student_replay: ReplayBuffer<StudentTransition>,
    /// Softmax temperature for exploration and the actor relaxation.
    pub temperature: f64,
    /// Half-width of the uniform noise added to `w` during training.
    pub mode_noise: f64,
    rng: ChaCha8Rng,
}

impl PatAgent {
    pub fn new(id: usize, obs_len: usize, config: AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_spec = LstmCellSpec::new(obs_len + NUM_ACTIONS, config.hidden_dim)?;
        let enc_params = enc_spec.init(&mut rng);
        let encoder_opt = AdamState::new(
            &enc_params,
            AdamConfig {
                clip_norm: config.clip_norm,
                ..AdamConfig::with_lr(config.encoder_lr)
            },
        );
        let encoder = Encoder::new(enc_spec, enc_params, config.bptt)?;
        let clip = config.clip_norm;
        let actor = Net::new(config.actor_spec(), &mut rng, config.actor_lr, clip);
        let critic = Net::new(config.critic_spec(), &mut rng, config.critic_lr, clip);
        let student_actor = Net::new(config.student_actor_spec(), &mut rng, config.student_actor_lr, clip);
        let student_critic = Net::new(config.student_critic_spec(), &mut rng, config.student_critic_lr, clip);
        Ok(PatAgent {
            id,
            replay: ReplayBuffer::new(config.replay_capacity),
            student_replay: ReplayBuffer::new(config.replay_capacity),
            config,
            encoder,
            encoder_opt,
            actor,
            critic,
            student_actor,
            student_critic,
            temperature: 1.0,
            mode_noise: 0.1,
            rng,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn begin_episode(&mut self) {
        self.encoder.reset_state();
    }

    pub fn encode_observation(&mut self, obs: &[f64], prev_action: Option<usize>) -> Result<HiddenState> {
        let x = encoder_input(obs, prev_action, NUM_ACTIONS);
        Ok(HiddenState(self.encoder.step(x)?))
    }

    /// `(h, c)` of the episode-persistent encoder; the attention key.
    pub fn history_key(&self) -> Vec<f64> {
        self.encoder.state_key()
    }

    pub fn actor_theta(&self) -> Vec<f64> {
        flatten_params(&self.actor.params).into_data()
    }

    pub fn student_probability(&self, m: &[f64]) -> Result<f64> {
        Ok(self.student_actor.eval(m)?[0])
    }

    pub fn decide_mode(&mut self, m: &[f64], training: bool) -> Result<(Mode, f64)> {
        let w = self.student_probability(m)?;
        let noise = if training && self.mode_noise > 0.0 {
            self.rng.gen_range(-self.mode_noise..=self.mode_noise)
        } else {
            0.0
        };
        Ok((mode_for(w, noise, self.config.mode_threshold), w))
    }

    pub fn self_logits(&self, m: &[f64]) -> Result<Vec<f64>> {
        self.actor.eval(m)
    }

    /// Greedy (`explore = false`) or a draw from `softmax(logits / T)`.
    pub fn act_self(&mut self, m: &[f64], explore: bool) -> Result<usize> {
        let logits = self.self_logits(m)?;
        Ok(if explore {
            sample_softmax(&logits, self.temperature, &mut self.rng)
        } else {
            argmax(&logits)
        })
    }

    pub fn q_value(&self, m: &[f64], action: usize) -> Result<f64> {
        let mut x = m.to_vec();
        x.extend(one_hot(action, NUM_ACTIONS));
        Ok(self.critic.eval(&x)?[0])
    }

    /// Value gain of the advised action over the self action, both scored by
    /// the agent's own critic.
    pub fn student_reward(&self, m: &[f64], advised: usize, self_action: usize) -> Result<f64> {
        Ok(self.q_value(m, advised)? - self.q_value(m, self_action)?)
    }

    /// Stores the transition ending at the most recently encoded input.
    pub fn store_transition(&mut self, action: usize, reward: f64, done: bool) -> Result<()> {
        let history = self.encoder.last_history()?;
        self.replay.push(Transition {
            history,
            action,
            reward,
            done,
        });
        Ok(())
    }

    pub fn store_student(&mut self, t: StudentTransition) {
        self.student_replay.push(t);
    }

    pub fn sample_self_batch(&mut self) -> Vec<Transition> {
        let n = self.config.batch_size;
        self.replay.sample(n, &mut self.rng).into_iter().cloned().collect()
    }

    pub fn sample_student_batch(&mut self) -> Vec<StudentTransition> {
        let n = self.config.batch_size;
        self.student_replay.sample(n, &mut self.rng).into_iter().cloned().collect()
    }

    /// Critic TD loss over a batch. Accumulates gradients into the critic
    /// and encoder parameters and returns `(loss, m_t rows)`.
    pub fn critic_loss(&mut self, batch: &[Transition]) -> Result<(f64, Vec<Vec<f64>>)> {
        let b = batch.len();
        let hd = self.config.hidden_dim;
        let mut tape = Tape::new();
        let enc = tape.params(&self.encoder.params);
        let enc_frozen = tape.frozen(&self.encoder.params);
        let hists: Vec<&History> = batch.iter().map(|t| &t.history).collect();
        let u = unroll_batch(&mut tape, &self.encoder.spec, &enc, &enc_frozen, &hists)?;

        // bootstrap target from the target networks
        let actor_t = tape.frozen(&self.actor.target);
        let logits_next = self.actor.spec.forward(&mut tape, &actor_t, u.m_next)?;
        let next_actions: Vec<f64> = tape
            .value(logits_next)
            .chunks(NUM_ACTIONS)
            .flat_map(|row| one_hot(argmax(row), NUM_ACTIONS))
            .collect();
        let a_next = tape.constant(b, NUM_ACTIONS, next_actions);
        let critic_t = tape.frozen(&self.critic.target);
        let x_next = tape.concat_cols(&[u.m_next, a_next])?;
        let q_next = self.critic.spec.forward(&mut tape, &critic_t, x_next)?;
        let gamma = self.config.gamma;
        let y: Vec<f64> = batch
            .iter()
            .zip(tape.value(q_next))
            .map(|(t, q)| t.reward + if t.done { 0.0 } else { gamma * q })
            .collect();
        let y = tape.constant(b, 1, y);

        let critic = tape.params(&self.critic.params);
        let acts: Vec<f64> = batch.iter().flat_map(|t| one_hot(t.action, NUM_ACTIONS)).collect();
        let a = tape.constant(b, NUM_ACTIONS, acts);
        let x = tape.concat_cols(&[u.m, a])?;
        let q = self.critic.spec.forward(&mut tape, &critic, x)?;
        let diff = tape.sub(y, q)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        critic.accumulate_into(&grads, &mut self.critic.params)?;
        enc.accumulate_into(&grads, &mut self.encoder.params)?;
        let ms = tape.value(u.m).chunks(hd).map(|r| r.to_vec()).collect();
        Ok((tape.scalar(loss), ms))
    }

    fn actor_graph(&self, tape: &mut Tape, ms: &[Vec<f64>], noise: &[f64], trainable: bool) -> Result<(Var, crate::nn::ParamVars)> {
        let b = ms.len();
        if noise.len() != b * NUM_ACTIONS {
            return Err(Error::dim("actor noise", b * NUM_ACTIONS, noise.len()));
        }
        let m = tape.constant(b, self.config.hidden_dim, rows_to_flat(ms));
        let actor = if trainable {
            tape.params(&self.actor.params)
        } else {
            tape.frozen(&self.actor.params)
        };
        let logits = self.actor.spec.forward(tape, &actor, m)?;
        let g = tape.constant(b, NUM_ACTIONS, noise.to_vec());
        let perturbed = tape.add(logits, g)?;
        let scaled = tape.scale(perturbed, 1.0 / self.temperature);
        let relaxed = tape.softmax_rows(scaled);
        let critic = tape.frozen(&self.critic.params);
        let x = tape.concat_cols(&[m, relaxed])?;
        let q = self.critic.spec.forward(tape, &critic, x)?;
        Ok((tape.mean(q), actor))
    }

    /// Batch mean of `Q(m, softmax((μ(m) + g) / T))` for fixed Gumbel noise.
    pub fn actor_objective(&self, ms: &[Vec<f64>], noise: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let (j, _) = self.actor_graph(&mut tape, ms, noise, false)?;
        Ok(tape.scalar(j))
    }

    /// Accumulates `-∇J` into the actor gradients and returns `J`.
    pub fn actor_loss(&mut self, ms: &[Vec<f64>], noise: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let (j, actor) = self.actor_graph(&mut tape, ms, noise, true)?;
        let grads = tape.backward_with(j, -1.0)?;
        actor.accumulate_into(&grads, &mut self.actor.params)?;
        Ok(tape.scalar(j))
    }

    /// One critic/encoder step and one actor step. `None` for an empty batch.
    pub fn update_self(&mut self, batch: &[Transition]) -> Result<Option<(f64, f64)>> {
        if batch.is_empty() {
            return Ok(None);
        }
        let (loss, ms) = self.critic_loss(batch)?;
        self.critic.step()?;
        self.encoder_opt.step(&mut self.encoder.params)?;
        let noise = gumbel_vec(ms.len() * NUM_ACTIONS, &mut self.rng);
        let j = self.actor_loss(&ms, &noise)?;
        self.actor.step()?;
        if !loss.is_finite() || !j.is_finite() {
            return Err(Error::NonFinite(format!("agent {} self update", self.id)));
        }
        Ok(Some((loss, j)))
    }

    /// Student critic TD loss; accumulates student-critic gradients.
    pub fn student_critic_loss(&mut self, batch: &[StudentTransition]) -> Result<f64> {
        let b = batch.len();
        let hd = self.config.hidden_dim;
        let mut tape = Tape::new();
        let m_next = tape.constant(b, hd, batch.iter().flat_map(|t| t.m_next.iter().copied()).collect());
        let sa_t = tape.frozen(&self.student_actor.target);
        let w_next = self.student_actor.spec.forward(&mut tape, &sa_t, m_next)?;
        let sc_t = tape.frozen(&self.student_critic.target);
        let x_next = tape.concat_cols(&[m_next, w_next])?;
        let q_next = self.student_critic.spec.forward(&mut tape, &sc_t, x_next)?;
        let gamma = self.config.gamma;
        let y: Vec<f64> = batch
            .iter()
            .zip(tape.value(q_next))
            .map(|(t, q)| t.reward + gamma * q)
            .collect();
        let y = tape.constant(b, 1, y);
        let m = tape.constant(b, hd, batch.iter().flat_map(|t| t.m.iter().copied()).collect());
        let w = tape.constant(b, 1, batch.iter().map(|t| t.w).collect());
        let sc = tape.params(&self.student_critic.params);
        let x = tape.concat_cols(&[m, w])?;
        let q = self.student_critic.spec.forward(&mut tape, &sc, x)?;
        let diff = tape.sub(y, q)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        sc.accumulate_into(&grads, &mut self.student_critic.params)?;
        Ok(tape.scalar(loss))
    }

    fn student_actor_graph(&self, tape: &mut Tape, ms: &[Vec<f64>], trainable: bool) -> Result<(Var, crate::nn::ParamVars)> {
        let m = tape.constant(ms.len(), self.config.hidden_dim, rows_to_flat(ms));
        let sa = if trainable {
            tape.params(&self.student_actor.params)
        } else {
            tape.frozen(&self.student_actor.params)
        };
        let w = self.student_actor.spec.forward(tape, &sa, m)?;
        let sc = tape.frozen(&self.student_critic.params);
        let x = tape.concat_cols(&[m, w])?;
        let q = self.student_critic.spec.forward(tape, &sc, x)?;
        Ok((tape.mean(q), sa))
    }

    /// Batch mean of `Q̃(m, μ̃(m))`.
    pub fn student_actor_objective(&self, ms: &[Vec<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let (j, _) = self.student_actor_graph(&mut tape, ms, false)?;
        Ok(tape.scalar(j))
    }

    pub fn student_actor_loss(&mut self, ms: &[Vec<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let (j, sa) = self.student_actor_graph(&mut tape, ms, true)?;
        let grads = tape.backward_with(j, -1.0)?;
        sa.accumulate_into(&grads, &mut self.student_actor.params)?;
        Ok(tape.scalar(j))
    }

    pub fn update_student(&mut self, batch: &[StudentTransition]) -> Result<Option<(f64, f64)>> {
        if batch.is_empty() {
            return Ok(None);
        }
        let loss = self.student_critic_loss(batch)?;
        self.student_critic.step()?;
        let ms: Vec<Vec<f64>> = batch.iter().map(|t| t.m.clone()).collect();
        let j = self.student_actor_loss(&ms)?;
        self.student_actor.step()?;
        if !loss.is_finite() || !j.is_finite() {
            return Err(Error::NonFinite(format!("agent {} student update", self.id)));
        }
        Ok(Some((loss, j)))
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        for net in [&mut self.actor, &mut self.critic, &mut self.student_actor, &mut self.student_critic] {
            let online = net.params.clone();
            net.target.blend_from(&online, tau)?;
        }
        Ok(())
    }

    /// All five networks under `encoder/`, `actor/`, `critic/`,
    /// `student_actor/`, `student_critic/` prefixes.
    pub fn snapshot(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("encoder/", &self.encoder.params);
        p.extend_prefixed("actor/", &self.actor.params);
        p.extend_prefixed("critic/", &self.critic.params);
        p.extend_prefixed("student_actor/", &self.student_actor.params);
        p.extend_prefixed("student_critic/", &self.student_critic.params);
        p
    }

    pub fn restore(&mut self, snap: &ParamSet) -> Result<()> {
        let parts: [(&str, &mut ParamSet); 5] = [
            ("encoder/", &mut self.encoder.params),
            ("actor/", &mut self.actor.params),
            ("critic/", &mut self.critic.params),
            ("student_actor/", &mut self.student_actor.params),
            ("student_critic/", &mut self.student_critic.params),
        ];
        for (prefix, dst) in parts {
            let src = snap.strip_prefix(prefix);
            if src.layout() != dst.layout() {
                return Err(Error::Incompatible(format!("snapshot network `{prefix}` has a different topology")));
            }
            *dst = src;
        }
        self.actor.target = self.actor.params.clone();
        self.critic.target = self.critic.params.clone();
        self.student_actor.target = self.student_actor.params.clone();
        self.student_critic.target = self.student_critic.params.clone();
        Ok(())
    }
}

pub const AGENT_NETWORKS: [&str; 5] = ["encoder", "actor", "critic", "student_actor", "student_critic"];
