use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Action, EnvSpec, GameKind, Pos};
use crate::error::{Error, Result};

/// Per-agent observation vectors; see [`EnvSpec::observation_length`].
pub type JointObservation = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct EnvState {
    pub positions: Vec<Pos>,
    /// `held[agent][type]`: treasures currently carried.
    pub held: Vec<Vec<u32>>,
    /// `claimed[agent][grid]`: whether the agent already took from that grid.
    pub claimed: Vec<Vec<bool>>,
    pub remaining: Vec<u32>,
    pub deposited: Vec<u32>,
    pub treasure_pos: Vec<Pos>,
    pub bank_pos: Vec<Pos>,
    pub landmarks: Vec<Pos>,
    pub step: usize,
    pub done: bool,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: JointObservation,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Ended by the game itself rather than the step cap; bootstrapping
    /// stops only on terminal steps.
    pub terminal: bool,
    pub success: bool,
}

/// A stateful environment instance.
#[derive(Debug, Clone)]
pub struct GridEnv {
    spec: EnvSpec,
    state: EnvState,
}

fn all_cells(spec: &EnvSpec) -> Vec<Pos> {
    let mut v = Vec::new();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let p = Pos::new(x, y);
            if !spec.is_obstacle(p) {
                v.push(p);
            }
        }
    }
    v
}

/// Cells agents may start on when no fixed placement is given: free and not
/// occupied by any object.
pub fn start_cells(spec: &EnvSpec, objects: &[Pos]) -> Vec<Pos> {
    all_cells(spec)
        .into_iter()
        .filter(|p| !objects.contains(p))
        .collect()
}

impl GridEnv {
    pub fn reset(spec: &EnvSpec, seed: u64) -> Result<(GridEnv, JointObservation)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = all_cells(spec);
        let take = |fixed: &Option<Vec<Pos>>, n: usize, pool: &mut Vec<Pos>, rng: &mut ChaCha8Rng| -> Result<Vec<Pos>> {
            let cells = match fixed {
                Some(cs) => cs.clone(),
                None => {
                    if pool.len() < n {
                        return Err(Error::Config("not enough free cells for placement".into()));
                    }
                    pool.shuffle(rng);
                    pool[..n].to_vec()
                }
            };
            for c in &cells {
                pool.retain(|p| p != c);
            }
            Ok(cells)
        };
        let (treasure_pos, bank_pos, landmarks) = if spec.kind.has_treasure() {
            let t = take(&spec.treasure_cells, spec.treasure_types, &mut pool, &mut rng)?;
            let b = take(&spec.bank_cells, spec.treasure_types, &mut pool, &mut rng)?;
            (t, b, Vec::new())
        } else {
            let l = take(&spec.landmark_cells, spec.landmarks(), &mut pool, &mut rng)?;
            (Vec::new(), Vec::new(), l)
        };
        let mut objects: Vec<Pos> = treasure_pos.iter().chain(&bank_pos).chain(&landmarks).copied().collect();
        objects.sort();
        if objects.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("objects must occupy distinct cells".into()));
        }
        let positions = take(&spec.agent_cells, spec.agents, &mut pool, &mut rng)?;
        let mut sorted = positions.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("agents must start on distinct cells".into()));
        }
        let types = if spec.kind.has_treasure() { spec.treasure_types } else { 0 };
        let state = EnvState {
            positions,
            held: vec![vec![0; types]; spec.agents],
            claimed: vec![vec![false; types]; spec.agents],
            remaining: vec![spec.grid_capacity(); types],
            deposited: vec![0; types],
            treasure_pos,
            bank_pos,
            landmarks,
            step: 0,
            done: false,
            rng,
        };
        let env = GridEnv {
            spec: spec.clone(),
            state,
        };
        let obs = env.observe();
        Ok((env, obs))
    }

    /// Builds an environment from an explicit state (used by the tabular
    /// oracle and by tests).
    pub fn from_parts(spec: &EnvSpec, mut state: EnvState, seed: u64) -> GridEnv {
        state.rng = ChaCha8Rng::seed_from_u64(seed);
        GridEnv {
            spec: spec.clone(),
            state,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut EnvState {
        &mut self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    fn occupied_by_agent(&self, p: Pos, except: usize) -> bool {
        self.state
            .positions
            .iter()
            .enumerate()
            .any(|(j, q)| j != except && *q == p)
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        let m = self.spec.agents;
        if self.state.done {
            return Err(Error::Usage("step called after episode end".into()));
        }
        if actions.len() != m {
            return Err(Error::dim("joint action", m, actions.len()));
        }
        let acts: Vec<Action> = actions.iter().map(|a| Action::from_index(*a)).collect::<Result<_>>()?;

        // movement, lower index first
        let mut moved = vec![false; m];
        for (i, a) in acts.iter().enumerate() {
            let (dx, dy) = a.delta();
            if (dx, dy) == (0, 0) {
                continue;
            }
            let cur = self.state.positions[i];
            let target = Pos::new(cur.x + dx, cur.y + dy);
            if self.spec.is_free(target) && !self.occupied_by_agent(target, i) {
                self.state.positions[i] = target;
                moved[i] = true;
            }
        }

        let r = self.spec.rewards;
        let mut rewards = vec![-r.step; m];
        let mut success = false;
        match self.spec.kind {
            GameKind::GridTreasure | GameKind::MovingTreasure => {
                for i in 0..m {
                    if !moved[i] {
                        continue;
                    }
                    let p = self.state.positions[i];
                    if let Some(g) = self.state.treasure_pos.iter().position(|q| *q == p) {
                        if self.state.remaining[g] > 0 && !self.state.claimed[i][g] {
                            self.state.remaining[g] -= 1;
                            self.state.claimed[i][g] = true;
                            self.state.held[i][g] += 1;
                            rewards[i] += r.collect;
                        }
                    }
                    if let Some(b) = self.state.bank_pos.iter().position(|q| *q == p) {
                        let units = self.state.held[i][b];
                        if units > 0 {
                            self.state.held[i][b] = 0;
                            self.state.deposited[b] += units;
                            rewards[i] += r.deposit * units as f64;
                        } else if self.state.held[i].iter().any(|h| *h > 0) {
                            rewards[i] -= r.wrong_bank;
                        }
                    }
                }
                if self.spec.kind == GameKind::MovingTreasure {
                    self.move_objects();
                }
            }
            GameKind::Navigation => {
                let pos = &self.state.positions;
                let mut covered = 0;
                let mut dist_sum = 0.0;
                for l in &self.state.landmarks {
                    let mut any = false;
                    for (i, p) in pos.iter().enumerate() {
                        if p.chebyshev(*l) <= self.spec.cover_radius {
                            rewards[i] += r.cover;
                            any = true;
                        }
                    }
                    if any {
                        covered += 1;
                    }
                    dist_sum += pos.iter().map(|p| p.euclid(*l)).fold(f64::INFINITY, f64::min);
                }
                let n = self.state.landmarks.len().max(1) as f64;
                let shaping = r.shaping * dist_sum / n;
                rewards.iter_mut().for_each(|x| *x -= shaping);
                success = covered == self.state.landmarks.len();
            }
        }

        self.state.step += 1;
        let all_deposited = self.spec.kind.has_treasure()
            && self.state.deposited.iter().sum::<u32>() == self.spec.grid_capacity() * self.state.deposited.len() as u32;
        self.state.done = success || all_deposited || self.state.step >= self.spec.max_steps;
        Ok(StepOutcome {
            observations: self.observe(),
            rewards,
            done: self.state.done,
            terminal: success || all_deposited,
            success,
        })
    }

    fn move_objects(&mut self) {
        let dirs = [Action::Up, Action::Down, Action::Left, Action::Right];
        let n_t = self.state.treasure_pos.len();
        for k in 0..n_t + self.state.bank_pos.len() {
            // draws happen unconditionally so the RNG stream stays aligned
            let roll: f64 = self.state.rng.gen();
            let dir = dirs[self.state.rng.gen_range(0..dirs.len())];
            if roll >= self.spec.move_prob {
                continue;
            }
            let cur = if k < n_t { self.state.treasure_pos[k] } else { self.state.bank_pos[k - n_t] };
            let (dx, dy) = dir.delta();
            let target = Pos::new(cur.x + dx, cur.y + dy);
            let blocked = !self.spec.is_free(target)
                || self.state.positions.contains(&target)
                || self.state.treasure_pos.contains(&target)
                || self.state.bank_pos.contains(&target);
            if !blocked {
                if k < n_t {
                    self.state.treasure_pos[k] = target;
                } else {
                    self.state.bank_pos[k - n_t] = target;
                }
            }
        }
    }

    pub fn observe(&self) -> JointObservation {
        (0..self.spec.agents).map(|i| self.observe_agent(i)).collect()
    }

    pub fn observe_agent(&self, i: usize) -> Vec<f64> {
        let spec = &self.spec;
        let st = &self.state;
        let c = spec.channels();
        let r = spec.view_radius as i32;
        let mut obs = vec![0.0; spec.observation_length()];
        let me = st.positions[i];
        let mut k = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let p = Pos::new(me.x + dx, me.y + dy);
                let cell = &mut obs[k * c..(k + 1) * c];
                k += 1;
                if !spec.is_free(p) {
                    cell[0] = 1.0;
                    continue;
                }
                if st.positions.iter().enumerate().any(|(j, q)| j != i && *q == p) {
                    cell[1] = 1.0;
                }
                match spec.kind {
                    GameKind::Navigation => {
                        if st.landmarks.contains(&p) {
                            cell[2] = 1.0;
                        }
                    }
                    _ => {
                        let t = spec.treasure_types;
                        for (g, q) in st.treasure_pos.iter().enumerate() {
                            if *q == p && st.remaining[g] > 0 {
                                cell[2 + g] = 1.0;
                            }
                        }
                        for (b, q) in st.bank_pos.iter().enumerate() {
                            if *q == p {
                                cell[2 + t + b] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        let mut off = spec.window_cells() * c;
        if spec.kind.has_treasure() {
            for t in 0..spec.treasure_types {
                obs[off] = st.held[i][t].min(1) as f64;
                obs[off + 1] = if st.claimed[i][t] { 1.0 } else { 0.0 };
                off += 2;
            }
        }
        let norm = |v: i32, n: i32| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
        obs[off] = norm(me.x, spec.width);
        obs[off + 1] = norm(me.y, spec.height);
        obs
    }

    /// Treasures in grids + carried + deposited; constant over an episode.
    pub fn treasure_total(&self) -> u32 {
        let st = &self.state;
        st.remaining.iter().sum::<u32>()
            + st.held.iter().flatten().sum::<u32>()
            + st.deposited.iter().sum::<u32>()
    }

    pub fn landmarks_covered(&self) -> bool {
        self.state.landmarks.iter().all(|l| {
            self.state
                .positions
                .iter()
                .any(|p| p.chebyshev(*l) <= self.spec.cover_radius)
        })
    }
}
