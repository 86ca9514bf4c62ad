//! Exact value iteration for tiny single-agent instances.

use super::grid::{start_cells, GridEnv};
use super::spec::{EnvSpec, GameKind, Pos, NUM_ACTIONS};
use crate::error::{Error, Result};

pub const MAX_ORACLE_STATES: usize = 100_000;
pub const ORACLE_TOLERANCE: f64 = 1e-9;

struct Table {
    cells: Vec<Pos>,
    types: usize,
    /// `next[s * A + a]`: successor, `None` when the transition terminates.
    next: Vec<Option<usize>>,
    reward: Vec<f64>,
    valid: Vec<bool>,
}

impl Table {
    fn id(&self, cell: usize, claimed: usize, held: usize) -> usize {
        let k = 1 << self.types;
        (cell * k + claimed) * k + held
    }
}

fn refuse(msg: &str) -> Error {
    Error::OracleRefused(msg.into())
}

fn build(spec: &EnvSpec) -> Result<Table> {
    spec.validate()?;
    if spec.agents != 1 {
        return Err(refuse("oracle supports single-agent specs only"));
    }
    let types = match spec.kind {
        GameKind::MovingTreasure => return Err(refuse("moving objects make the state space stochastic")),
        GameKind::GridTreasure => {
            if spec.treasure_cells.is_none() || spec.bank_cells.is_none() {
                return Err(refuse("treasure and bank cells must be fixed"));
            }
            spec.treasure_types
        }
        GameKind::Navigation => {
            if spec.landmark_cells.is_none() {
                return Err(refuse("landmark cells must be fixed"));
            }
            0
        }
    };
    let cells: Vec<Pos> = (0..spec.height)
        .flat_map(|y| (0..spec.width).map(move |x| Pos::new(x, y)))
        .filter(|p| !spec.is_obstacle(*p))
        .collect();
    let n = cells
        .len()
        .checked_mul(1usize.checked_shl(2 * types as u32).unwrap_or(usize::MAX))
        .filter(|n| *n <= MAX_ORACLE_STATES)
        .ok_or_else(|| refuse("state space exceeds 1e5 states"))?;

    let mut template_spec = spec.clone();
    template_spec.agent_cells = Some(vec![cells[0]]);
    let (template, _) = GridEnv::reset(&template_spec, 0)?;
    let k = 1usize << types;
    let mut table = Table {
        cells: cells.clone(),
        types,
        next: vec![None; n * NUM_ACTIONS],
        reward: vec![0.0; n * NUM_ACTIONS],
        valid: vec![false; n],
    };
    let cap = spec.grid_capacity();
    for (ci, cell) in cells.iter().enumerate() {
        for claimed in 0..k {
            for held in 0..k {
                if held & !claimed != 0 {
                    continue;
                }
                let s = table.id(ci, claimed, held);
                let terminal_state = types > 0 && claimed == k - 1 && held == 0;
                if terminal_state {
                    continue;
                }
                table.valid[s] = true;
                for a in 0..NUM_ACTIONS {
                    let mut st = template.state().clone();
                    st.positions = vec![*cell];
                    st.step = 0;
                    st.done = false;
                    for t in 0..types {
                        let c = claimed >> t & 1 == 1;
                        let h = held >> t & 1 == 1;
                        st.claimed[0][t] = c;
                        st.held[0][t] = h as u32;
                        st.remaining[t] = cap - c as u32;
                        st.deposited[t] = (c && !h) as u32;
                    }
                    let mut env = GridEnv::from_parts(spec, st, 0);
                    let out = env.step(&[a])?;
                    table.reward[s * NUM_ACTIONS + a] = out.rewards[0];
                    let ns = env.state();
                    let all_deposited = types > 0 && ns.deposited.iter().all(|d| *d == cap);
                    if out.success || all_deposited {
                        continue;
                    }
                    let nci = cells.iter().position(|p| *p == ns.positions[0]).unwrap();
                    let mut nc = 0;
                    let mut nh = 0;
                    for t in 0..types {
                        nc |= (ns.claimed[0][t] as usize) << t;
                        nh |= ((ns.held[0][t] > 0) as usize) << t;
                    }
                    table.next[s * NUM_ACTIONS + a] = Some(table.id(nci, nc, nh));
                }
            }
        }
    }
    Ok(table)
}

fn iterate(table: &Table, gamma: f64) -> Vec<f64> {
    let n = table.valid.len();
    let mut v = vec![0.0; n];
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..n {
            if !table.valid[s] {
                continue;
            }
            let best = (0..NUM_ACTIONS)
                .map(|a| {
                    let i = s * NUM_ACTIONS + a;
                    table.reward[i] + table.next[i].map_or(0.0, |ns| gamma * v[ns])
                })
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < ORACLE_TOLERANCE {
            return v;
        }
    }
}

/// Optimal expected discounted return from the reset distribution (uniform
/// over start cells unless the agent start is fixed). Ignores the step cap.
pub fn oracle_optimal_return(spec: &EnvSpec) -> Result<f64> {
    let table = build(spec)?;
    let v = iterate(&table, spec.gamma);
    let starts = match &spec.agent_cells {
        Some(cs) => cs.clone(),
        None => {
            let objects: Vec<Pos> = spec
                .treasure_cells
                .iter()
                .flatten()
                .chain(spec.bank_cells.iter().flatten())
                .chain(spec.landmark_cells.iter().flatten())
                .copied()
                .collect();
            start_cells(spec, &objects)
        }
    };
    let total: f64 = starts
        .iter()
        .map(|p| {
            let ci = table.cells.iter().position(|q| q == p).unwrap();
            v[table.id(ci, 0, 0)]
        })
        .sum();
    Ok(total / starts.len() as f64)
}
