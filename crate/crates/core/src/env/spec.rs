use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GameKind {
    GridTreasure,
    MovingTreasure,
    Navigation,
}

impl GameKind {
    pub fn name(self) -> &'static str {
        match self {
            GameKind::GridTreasure => "grid_treasure",
            GameKind::MovingTreasure => "moving_treasure",
            GameKind::Navigation => "navigation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grid_treasure" | "gtc" => Ok(GameKind::GridTreasure),
            "moving_treasure" | "mtc" => Ok(GameKind::MovingTreasure),
            "navigation" | "nav" => Ok(GameKind::Navigation),
            other => Err(Error::Config(format!("unknown game kind `{other}`"))),
        }
    }

    pub fn has_treasure(self) -> bool {
        !matches!(self, GameKind::Navigation)
    }
}

/// Grid cell, `x` to the right and `y` downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Pos { x, y }
    }

    pub fn chebyshev(self, o: Pos) -> i32 {
        (self.x - o.x).abs().max((self.y - o.y).abs())
    }

    pub fn euclid(self, o: Pos) -> f64 {
        (((self.x - o.x).pow(2) + (self.y - o.y).pow(2)) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

pub const NUM_ACTIONS: usize = 5;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn from_index(i: usize) -> Result<Self> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("action index {i} out of range 0..{NUM_ACTIONS}")))
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rewards {
    pub collect: f64,
    pub deposit: f64,
    pub wrong_bank: f64,
    pub step: f64,
    pub cover: f64,
    /// Multiplier on the mean nearest-agent landmark distance.
    pub shaping: f64,
}

impl Default for Rewards {
    fn default() -> Self {
        Rewards {
            collect: 1.0,
            deposit: 10.0,
            wrong_bank: 10.0,
            step: 0.01,
            cover: 1.0,
            shaping: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: GameKind,
    pub width: i32,
    pub height: i32,
    pub agents: usize,
    /// One treasure grid and one bank per type.
    pub treasure_types: usize,
    pub rewards: Rewards,
    pub max_steps: usize,
    pub view_radius: usize,
    /// Per-tick probability that a moving object attempts a random step.
    pub move_prob: f64,
    /// Chebyshev radius within which an agent covers a landmark.
    pub cover_radius: i32,
    pub obstacles: Vec<Pos>,
    pub gamma: f64,
    /// Fixed placements; `None` means seeded random placement at reset.
    pub treasure_cells: Option<Vec<Pos>>,
    pub bank_cells: Option<Vec<Pos>>,
    pub landmark_cells: Option<Vec<Pos>>,
    pub agent_cells: Option<Vec<Pos>>,
}

impl EnvSpec {
    /// Treasure game with `agents/2` types, treasure grids spread along the
    /// second row and banks along the second-to-last row.
    pub fn treasure(kind: GameKind, width: i32, height: i32, agents: usize) -> Self {
        let types = (agents / 2).max(1);
        let xs: Vec<i32> = (0..types)
            .map(|t| ((t as i32 + 1) * width) / (types as i32 + 1))
            .collect();
        let treasure_cells = xs.iter().map(|x| Pos::new(*x, 1.min(height - 1))).collect();
        let bank_cells = xs.iter().map(|x| Pos::new(*x, (height - 2).max(0))).collect();
        EnvSpec {
            kind,
            width,
            height,
            agents,
            treasure_types: types,
            rewards: Rewards::default(),
            max_steps: if agents >= 12 { 2000 } else { 1000 },
            view_radius: 2,
            move_prob: 0.5,
            cover_radius: 0,
            obstacles: Vec::new(),
            gamma: 0.95,
            treasure_cells: Some(treasure_cells),
            bank_cells: Some(bank_cells),
            landmark_cells: None,
            agent_cells: None,
        }
    }

    pub fn grid_treasure(width: i32, height: i32, agents: usize) -> Self {
        Self::treasure(GameKind::GridTreasure, width, height, agents)
    }

    pub fn moving_treasure(width: i32, height: i32, agents: usize) -> Self {
        Self::treasure(GameKind::MovingTreasure, width, height, agents)
    }

    pub fn navigation(width: i32, height: i32, agents: usize) -> Self {
        EnvSpec {
            kind: GameKind::Navigation,
            width,
            height,
            agents,
            treasure_types: 0,
            rewards: Rewards::default(),
            max_steps: if agents >= 12 { 1000 } else { 500 },
            view_radius: 2,
            move_prob: 0.0,
            cover_radius: 0,
            obstacles: Vec::new(),
            gamma: 0.95,
            treasure_cells: None,
            bank_cells: None,
            landmark_cells: None,
            agent_cells: None,
        }
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    pub fn is_obstacle(&self, p: Pos) -> bool {
        self.obstacles.contains(&p)
    }

    pub fn is_free(&self, p: Pos) -> bool {
        self.in_bounds(p) && !self.is_obstacle(p)
    }

    /// Treasures each grid starts with.
    pub fn grid_capacity(&self) -> u32 {
        self.agents as u32
    }

    pub fn landmarks(&self) -> usize {
        match self.kind {
            GameKind::Navigation => self.agents,
            _ => 0,
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            GameKind::Navigation => 3,
            _ => 2 + 2 * self.treasure_types,
        }
    }

    pub fn window_cells(&self) -> usize {
        let side = 2 * self.view_radius + 1;
        side * side
    }

    /// `(2r+1)^2 · channels + 2·types + 2`.
    pub fn observation_length(&self) -> usize {
        self.window_cells() * self.channels() + 2 * self.treasure_types_in_obs() + 2
    }

    fn treasure_types_in_obs(&self) -> usize {
        if self.kind.has_treasure() {
            self.treasure_types
        } else {
            0
        }
    }

    pub fn action_space(&self) -> usize {
        NUM_ACTIONS
    }

    /// Conservative per-agent, per-step reward bounds.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let r = &self.rewards;
        match self.kind {
            GameKind::Navigation => {
                let diag = ((self.width.pow(2) + self.height.pow(2)) as f64).sqrt();
                (-r.step - r.shaping * diag, -r.step + r.cover * self.landmarks() as f64)
            }
            _ => (
                -r.step - r.wrong_bank,
                -r.step + r.collect.max(r.deposit * self.agents as f64),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 1 || self.height < 1 {
            return bad("grid must be at least 1x1".into());
        }
        if self.agents < 1 {
            return bad("at least one agent is required".into());
        }
        if self.kind.has_treasure() {
            if self.agents >= 2 && !self.agents.is_multiple_of(2) {
                return bad(format!("treasure games need an even agent count, got {}", self.agents));
            }
            if self.treasure_types < 1 {
                return bad("treasure games need at least one treasure type".into());
            }
        }
        if self.max_steps < 1 {
            return bad("max episode length must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0,1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.move_prob) {
            return bad(format!("move probability {} outside [0,1]", self.move_prob));
        }
        let check_cells = |what: &str, cells: &Option<Vec<Pos>>, want: usize| -> Result<()> {
            if let Some(cs) = cells {
                if cs.len() != want {
                    return Err(Error::Config(format!("{what}: expected {want} cells, got {}", cs.len())));
                }
                for c in cs {
                    if !self.is_free(*c) {
                        return Err(Error::Config(format!("{what}: cell ({},{}) is blocked", c.x, c.y)));
                    }
                }
            }
            Ok(())
        };
        if self.kind.has_treasure() {
            check_cells("treasure cells", &self.treasure_cells, self.treasure_types)?;
            check_cells("bank cells", &self.bank_cells, self.treasure_types)?;
        } else {
            check_cells("landmark cells", &self.landmark_cells, self.landmarks())?;
        }
        check_cells("agent cells", &self.agent_cells, self.agents)?;
        let free = (0..self.width)
            .flat_map(|x| (0..self.height).map(move |y| Pos::new(x, y)))
            .filter(|p| !self.is_obstacle(*p))
            .count();
        let objects = if self.kind.has_treasure() {
            2 * self.treasure_types
        } else {
            self.landmarks()
        };
        if objects + self.agents > free {
            return bad(format!(
                "{} objects and {} agents do not fit in {free} free cells",
                objects, self.agents
            ));
        }
        Ok(())
    }
}
