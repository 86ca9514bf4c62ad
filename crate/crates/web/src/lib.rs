//! Browser bindings for three small interactive views: stepping a grid
//! game, inspecting attention weights over teachers, and sweeping the
//! student-mode threshold. Each binding is a thin wrapper over a plain
//! function returning JSON so the logic is testable natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use pat_core::agent::{mode_for, Mode};
use pat_core::ats::{advise, attend_weights, AtsDims, AttentionParams, TeacherPacket};
use pat_core::env::{render, EnvSpec, GameKind, GridEnv, NUM_ACTIONS};
use pat_core::nn::{MlpSpec, OutputActivation};

const ACTION_NAMES: [&str; NUM_ACTIONS] = ["up", "down", "left", "right", "stay"];

/// A live game the page steps one joint action at a time.
#[wasm_bindgen]
pub struct GridDemo {
    env: GridEnv,
    rng: ChaCha8Rng,
    totals: Vec<f64>,
}

impl GridDemo {
    pub fn create(game: &str, width: i32, height: i32, agents: usize, seed: u64) -> Result<GridDemo, String> {
        let kind = GameKind::parse(game).map_err(|e| e.to_string())?;
        let spec = match kind {
            GameKind::Navigation => EnvSpec::navigation(width, height, agents),
            _ => EnvSpec::treasure(kind, width, height, agents),
        };
        spec.validate().map_err(|e| e.to_string())?;
        let (env, _) = GridEnv::reset(&spec, seed).map_err(|e| e.to_string())?;
        Ok(GridDemo {
            env,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
            totals: vec![0.0; agents],
        })
    }

    /// Applies `actions` (one per agent) and reports the outcome as JSON.
    pub fn apply(&mut self, actions: &[u8]) -> Result<String, String> {
        if self.env.is_done() {
            return Err("episode finished; reset to play again".into());
        }
        let actions: Vec<usize> = actions.iter().map(|a| *a as usize).collect();
        let out = self.env.step(&actions).map_err(|e| e.to_string())?;
        for (t, r) in self.totals.iter_mut().zip(&out.rewards) {
            *t += r;
        }
        Ok(json!({
            "actions": actions.iter().map(|a| ACTION_NAMES.get(*a).copied().unwrap_or("?")).collect::<Vec<_>>(),
            "rewards": out.rewards,
            "totals": self.totals,
            "done": out.done,
            "success": out.success,
            "step": self.env.state().step,
            "treasure": self.env.treasure_total(),
        })
        .to_string())
    }

    pub fn random_actions(&mut self) -> Vec<u8> {
        (0..self.totals.len()).map(|_| self.rng.gen_range(0..NUM_ACTIONS) as u8).collect()
    }
}

#[wasm_bindgen]
impl GridDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(game: &str, width: i32, height: i32, agents: usize, seed: u64) -> Result<GridDemo, JsError> {
        GridDemo::create(game, width, height, agents, seed).map_err(|e| JsError::new(&e))
    }

    pub fn step(&mut self, actions: &[u8]) -> Result<String, JsError> {
        self.apply(actions).map_err(|e| JsError::new(&e))
    }

    pub fn step_random(&mut self) -> Result<String, JsError> {
        let actions = self.random_actions();
        self.step(&actions)
    }

    pub fn render(&self) -> String {
        render(&self.env)
    }

    pub fn agents(&self) -> usize {
        self.totals.len()
    }
}

/// Attention of one student over `teachers` random teachers, per head,
/// plus the fused greedy advice. `sharpness` scales the query weights,
/// which scales every logit.
pub fn attention_json(seed: u64, teachers: usize, heads: usize, sharpness: f64) -> Result<String, String> {
    if teachers == 0 || teachers > 16 || heads == 0 || heads > 8 {
        return Err("need 1..=16 teachers and 1..=8 heads".into());
    }
    if !sharpness.is_finite() {
        return Err("sharpness must be finite".into());
    }
    let (d_m, hidden) = (6, 8);
    let actor = MlpSpec::new(vec![d_m, hidden, NUM_ACTIONS], OutputActivation::Identity).map_err(|e| e.to_string())?;
    let dims = AtsDims {
        d_m,
        d_h: 2 * d_m,
        d_q: 4,
        d_v: 6,
        p: actor.param_count(),
        heads,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = AttentionParams::init(dims, &mut rng).map_err(|e| e.to_string())?;
    for (name, p) in params.params.iter_mut() {
        if name.starts_with("wq") {
            p.value.data_mut().iter_mut().for_each(|v| *v *= sharpness);
        }
    }
    let mut gauss = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let m = gauss(d_m);
    let packets: Vec<TeacherPacket> = (0..teachers)
        .map(|id| TeacherPacket {
            id,
            history: gauss(2 * d_m),
            theta: gauss(actor.param_count()),
        })
        .collect();
    let refs: Vec<&TeacherPacket> = packets.iter().collect();
    let weights = attend_weights(&params, &m, &refs).map_err(|e| e.to_string())?;
    let advice = advise::<ChaCha8Rng>(&params, &actor, &m, &refs, None).map_err(|e| e.to_string())?;
    Ok(json!({
        "weights": weights,
        "action": ACTION_NAMES[advice.action],
    })
    .to_string())
}

#[wasm_bindgen]
pub fn attention(seed: u64, teachers: usize, heads: usize, sharpness: f64) -> Result<String, JsError> {
    attention_json(seed, teachers, heads, sharpness).map_err(|e| JsError::new(&e))
}

/// Mode for each of `points` thresholds evenly spaced over [0, 1], given
/// the student probability `w` and exploration `noise`.
pub fn mode_sweep_json(w: f64, noise: f64, points: usize) -> String {
    let points = points.clamp(2, 1001);
    let rows: Vec<_> = (0..points)
        .map(|k| {
            let tau = k as f64 / (points - 1) as f64;
            json!({"threshold": tau, "student": mode_for(w, noise, tau) == Mode::Student})
        })
        .collect();
    json!({"effective": (w + noise).clamp(0.0, 1.0), "sweep": rows}).to_string()
}

#[wasm_bindgen]
pub fn mode_sweep(w: f64, noise: f64, points: usize) -> String {
    mode_sweep_json(w, noise, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn grid_demo_steps_and_renders() {
        let mut demo = GridDemo::create("gtc", 6, 6, 2, 3).unwrap();
        let board = demo.env.spec().height as usize;
        let v: Value = serde_json::from_str(&demo.apply(&[4, 4]).unwrap()).unwrap();
        assert_eq!(v["rewards"], json!([-0.01, -0.01]));
        assert_eq!(v["step"], 1);
        assert_eq!(render(&demo.env).lines().count(), board);
        assert!(demo.apply(&[9, 0]).is_err());
        assert!(GridDemo::create("gtc", 6, 6, 3, 0).is_err());
        assert!(GridDemo::create("chess", 6, 6, 2, 0).is_err());
    }

    #[test]
    fn random_play_runs_to_the_cap() {
        let mut demo = GridDemo::create("navigation", 5, 5, 2, 1).unwrap();
        let mut last = Value::Null;
        while !demo.env.is_done() {
            let a = demo.random_actions();
            last = serde_json::from_str(&demo.apply(&a).unwrap()).unwrap();
        }
        assert_eq!(last["done"], true);
        assert!(demo.apply(&[0, 0]).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let v: Value = serde_json::from_str(&attention_json(5, 4, 3, 1.0).unwrap()).unwrap();
        let w = v["weights"].as_array().unwrap();
        assert_eq!(w.len(), 3);
        for row in w {
            let row: Vec<f64> = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            assert_eq!(row.len(), 4);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let flat: Value = serde_json::from_str(&attention_json(5, 4, 1, 0.0).unwrap()).unwrap();
        for x in flat["weights"][0].as_array().unwrap() {
            assert!((x.as_f64().unwrap() - 0.25).abs() < 1e-12);
        }
        assert!(attention_json(5, 0, 1, 1.0).is_err());
    }

    #[test]
    fn sweep_flips_once_at_the_effective_probability() {
        let v: Value = serde_json::from_str(&mode_sweep_json(0.6, 0.1, 11)).unwrap();
        let flags: Vec<bool> = v["sweep"].as_array().unwrap().iter().map(|r| r["student"].as_bool().unwrap()).collect();
        // student iff tau < 0.7
        assert_eq!(flags, [true, true, true, true, true, true, true, false, false, false, false]);
    }
}
