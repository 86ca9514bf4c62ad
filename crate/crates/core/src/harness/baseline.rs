//! Independent Q-learning baseline: each agent has its own recurrent
//! encoder and a Q-network over `m`, trained by one-step TD with a target
//! copy and an epsilon-greedy behavior policy. No advice, no student nets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::explore::{argmax, one_hot};
use crate::agent::{encoder_input, unroll_batch, AgentConfig, Encoder, History, HiddenState, Net, ReplayBuffer, Transition};
use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, LstmCellSpec, MlpSpec, OutputActivation, ParamSet, Tape};

#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub id: usize,
    pub config: AgentConfig,
    pub encoder: Encoder,
    pub encoder_opt: AdamState,
    pub q: Net,
    pub replay: ReplayBuffer<Transition>,
    pub epsilon: f64,
    rng: ChaCha8Rng,
}

impl DqnAgent {
    pub fn new(id: usize, obs_len: usize, config: AgentConfig, lr: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_spec = LstmCellSpec::new(obs_len + NUM_ACTIONS, config.hidden_dim)?;
        let enc_params = enc_spec.init(&mut rng);
        let adam = |p: &ParamSet, lr: f64| {
            AdamState::new(
                p,
                AdamConfig {
                    clip_norm: config.clip_norm,
                    ..AdamConfig::with_lr(lr)
                },
            )
        };
        let encoder_opt = adam(&enc_params, lr);
        let spec = MlpSpec::new(vec![config.hidden_dim, config.mlp_hidden, NUM_ACTIONS], OutputActivation::Identity)?;
        let params = spec.init(&mut rng);
        let q = Net {
            opt: adam(&params, lr),
            target: params.clone(),
            params,
            spec,
        };
        Ok(DqnAgent {
            id,
            replay: ReplayBuffer::new(config.replay_capacity),
            encoder: Encoder::new(enc_spec, enc_params, config.bptt)?,
            encoder_opt,
            q,
            config,
            epsilon: 1.0,
            rng,
        })
    }

    pub fn begin_episode(&mut self) {
        self.encoder.reset_state();
    }

    pub fn encode_observation(&mut self, obs: &[f64], prev_action: Option<usize>) -> Result<HiddenState> {
        Ok(HiddenState(self.encoder.step(encoder_input(obs, prev_action, NUM_ACTIONS))?))
    }

    pub fn q_values(&self, m: &[f64]) -> Result<Vec<f64>> {
        self.q.eval(m)
    }

    /// Epsilon-greedy when `explore`, greedy otherwise.
    pub fn act(&mut self, m: &[f64], explore: bool) -> Result<usize> {
        if explore && self.rng.gen::<f64>() < self.epsilon {
            return Ok(self.rng.gen_range(0..NUM_ACTIONS));
        }
        Ok(argmax(&self.q_values(m)?))
    }

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

    pub fn sample_batch(&mut self) -> Vec<Transition> {
        let n = self.config.batch_size;
        self.replay.sample(n, &mut self.rng).into_iter().cloned().collect()
    }

    /// TD loss `(r + γ max_a' Q'(m', a') − Q(m, a))²`, batch mean;
    /// accumulates gradients into the Q-network and encoder.
    pub fn td_loss(&mut self, batch: &[Transition]) -> Result<f64> {
        let b = batch.len();
        let mut tape = Tape::new();
        let enc = tape.params(&self.encoder.params);
        let enc_frozen = tape.frozen(&self.encoder.params);
        let hists: Vec<&History> = batch.iter().map(|t| &t.history).collect();
        let u = unroll_batch(&mut tape, &self.encoder.spec, &enc, &enc_frozen, &hists)?;
        let target = tape.frozen(&self.q.target);
        let q_next = self.q.spec.forward(&mut tape, &target, u.m_next)?;
        let gamma = self.config.gamma;
        let y: Vec<f64> = batch
            .iter()
            .zip(tape.value(q_next).chunks(NUM_ACTIONS))
            .map(|(t, row)| {
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                t.reward + if t.done { 0.0 } else { gamma * best }
            })
            .collect();
        let y = tape.constant(b, 1, y);
        let qv = tape.params(&self.q.params);
        let q_all = self.q.spec.forward(&mut tape, &qv, u.m)?;
        let mask = tape.constant(b, NUM_ACTIONS, batch.iter().flat_map(|t| one_hot(t.action, NUM_ACTIONS)).collect());
        let picked = tape.mul(q_all, mask)?;
        let ones = tape.constant(NUM_ACTIONS, 1, vec![1.0; NUM_ACTIONS]);
        let q = tape.matmul(picked, ones)?;
        let diff = tape.sub(y, q)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        qv.accumulate_into(&grads, &mut self.q.params)?;
        enc.accumulate_into(&grads, &mut self.encoder.params)?;
        Ok(tape.scalar(loss))
    }

    pub fn snapshot(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("encoder/", &self.encoder.params);
        p.extend_prefixed("q/", &self.q.params);
        p
    }

    pub fn restore(&mut self, snap: &ParamSet) -> Result<()> {
        for (prefix, dst) in [("encoder/", &mut self.encoder.params), ("q/", &mut self.q.params)] {
            let src = snap.strip_prefix(prefix);
            if src.layout() != dst.layout() {
                return Err(Error::Incompatible(format!("snapshot network `{prefix}` has a different topology")));
            }
            *dst = src;
        }
        self.q.target = self.q.params.clone();
        Ok(())
    }
}

pub const DQN_NETWORKS: [&str; 2] = ["encoder", "q"];

/// One TD step followed by a soft target update. `None` for an empty batch.
pub fn run_baseline_dqn_update(agent: &mut DqnAgent, batch: &[Transition]) -> Result<Option<f64>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let loss = agent.td_loss(batch)?;
    agent.q.step()?;
    agent.encoder_opt.step(&mut agent.encoder.params)?;
    let online = agent.q.params.clone();
    agent.q.target.blend_from(&online, agent.config.tau_soft)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("baseline agent {} update", agent.id)));
    }
    Ok(Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(seed: u64, gamma: f64) -> DqnAgent {
        let cfg = AgentConfig {
            hidden_dim: 4,
            mlp_hidden: 5,
            bptt: 3,
            gamma,
            ..AgentConfig::default()
        };
        DqnAgent::new(0, 3, cfg, 1e-3, seed).unwrap()
    }

    fn fill(a: &mut DqnAgent, n: usize, terminal_last: bool) {
        a.begin_episode();
        let mut prev = None;
        for t in 0..n {
            let obs = [t as f64 * 0.3, 1.0, (t % 2) as f64];
            a.encode_observation(&obs, prev).unwrap();
            if t > 0 {
                a.store_transition(prev.unwrap(), t as f64 * 0.5 - 1.0, terminal_last && t == n - 1).unwrap();
            }
            prev = Some((t * 3) % NUM_ACTIONS);
        }
    }

    fn q_of(a: &DqnAgent, t: &Transition) -> f64 {
        let mut tape = Tape::new();
        let enc = tape.frozen(&a.encoder.params);
        let u = unroll_batch(&mut tape, &a.encoder.spec, &enc, &enc, &[&t.history]).unwrap();
        a.q.eval(tape.value(u.m)).unwrap()[t.action]
    }

    #[test]
    fn zero_gamma_and_terminal_targets_are_rewards() {
        for (gamma, terminal) in [(0.0, false), (0.9, true)] {
            let mut a = agent(1, gamma);
            fill(&mut a, 2, terminal);
            let t = a.replay.iter().next().unwrap().clone();
            let loss = a.td_loss(&[t.clone(), t.clone()]).unwrap();
            assert!((loss - (t.reward - q_of(&a, &t)).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_uses_target_max() {
        let mut a = agent(2, 0.9);
        fill(&mut a, 2, false);
        let t = a.replay.iter().next().unwrap().clone();
        let mut tape = Tape::new();
        let enc = tape.frozen(&a.encoder.params);
        let u = unroll_batch(&mut tape, &a.encoder.spec, &enc, &enc, &[&t.history]).unwrap();
        let next = a.q.spec.eval(&a.q.target, tape.value(u.m_next)).unwrap();
        let y = t.reward + 0.9 * next.iter().cloned().fold(f64::MIN, f64::max);
        let loss = a.td_loss(std::slice::from_ref(&t)).unwrap();
        assert!((loss - (y - q_of(&a, &t)).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut a = agent(3, 0.0);
        fill(&mut a, 6, false);
        let batch: Vec<Transition> = a.replay.iter().cloned().collect();
        let mut probe = a.clone();
        probe.td_loss(&batch).unwrap();
        let eps = 1e-6;
        for which in ["q", "encoder"] {
            let (ana, names) = match which {
                "q" => (&probe.q.params, a.q.params.layout()),
                _ => (&probe.encoder.params, a.encoder.params.layout()),
            };
            let ana: Vec<f64> = ana.iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect();
            let mut num = Vec::new();
            for (name, shape) in names {
                for i in 0..shape.iter().product::<usize>() {
                    let eval = |delta: f64| {
                        let mut x = a.clone();
                        let set = if which == "q" { &mut x.q.params } else { &mut x.encoder.params };
                        set.get_mut(&name).unwrap().value.data_mut()[i] += delta;
                        x.td_loss(&batch).unwrap()
                    };
                    num.push((eval(eps) - eval(-eps)) / (2.0 * eps));
                }
            }
            let diff: f64 = ana.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = ana.iter().chain(&num).map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-4, "{which}: {}", diff / scale);
        }
    }

    #[test]
    fn empty_batch_is_skipped_and_greedy_is_argmax() {
        let mut a = agent(4, 0.9);
        assert_eq!(run_baseline_dqn_update(&mut a, &[]).unwrap(), None);
        let m = [0.1, 0.2, -0.3, 0.4];
        let q = a.q_values(&m).unwrap();
        assert_eq!(a.act(&m, false).unwrap(), argmax(&q));
        a.epsilon = 0.0;
        assert_eq!(a.act(&m, true).unwrap(), argmax(&q));
    }
}
