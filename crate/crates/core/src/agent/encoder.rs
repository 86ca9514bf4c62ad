//! Recurrent observation encoder with truncated backpropagation.
//!
//! The online state `(h, c)` persists across a whole episode; `m_t = h_t`.
//! For training, each stored transition keeps the detached state entering a
//! window of the last `k` inputs, so replaying it recomputes `m_t` with
//! gradients that reach at most `k` steps back.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{LstmCellSpec, ParamSet, ParamVars, Tape, Var};

/// Sparse input row: `(index, value)` pairs of the non-zero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl SparseRow {
    pub fn from_dense(x: &[f64]) -> Self {
        SparseRow {
            dim: x.len(),
            entries: x
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
        }
    }

    pub fn write_into(&self, dst: &mut [f64]) {
        for (i, v) in &self.entries {
            dst[*i as usize] = *v;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        self.write_into(&mut d);
        d
    }
}

/// Observation concatenated with the one-hot previous action (zeros at t=0).
pub fn encoder_input(obs: &[f64], prev_action: Option<usize>, num_actions: usize) -> SparseRow {
    let mut x = Vec::with_capacity(obs.len() + num_actions);
    x.extend_from_slice(obs);
    x.extend(std::iter::repeat_n(0.0, num_actions));
    if let Some(a) = prev_action {
        x[obs.len() + a] = 1.0;
    }
    SparseRow::from_dense(&x)
}

/// Replayable encoder context for one transition.
#[derive(Debug, Clone)]
pub struct History {
    /// `(h, c)` entering the window, concatenated.
    pub start: Arc<Vec<f64>>,
    /// Inputs `x_{t-k+1} ..= x_t` (fewer at the start of an episode).
    pub inputs: Vec<Arc<SparseRow>>,
    /// `x_{t+1}`.
    pub next_input: Arc<SparseRow>,
}

#[derive(Debug, Clone)]
struct WindowEntry {
    input: Arc<SparseRow>,
    state_before: Arc<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: LstmCellSpec,
    pub params: ParamSet,
    pub truncation: usize,
    h: Vec<f64>,
    c: Vec<f64>,
    window: VecDeque<WindowEntry>,
}

impl Encoder {
    pub fn new(spec: LstmCellSpec, params: ParamSet, truncation: usize) -> Result<Self> {
        if truncation == 0 {
            return Err(Error::Config("truncation window k must be >= 1".into()));
        }
        let h = vec![0.0; spec.hidden_dim];
        Ok(Encoder {
            spec,
            params,
            truncation,
            c: h.clone(),
            h,
            window: VecDeque::new(),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.hidden_dim
    }

    pub fn reset_state(&mut self) {
        self.h.iter_mut().for_each(|v| *v = 0.0);
        self.c.iter_mut().for_each(|v| *v = 0.0);
        self.window.clear();
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    /// `(h, c)` concatenated.
    pub fn state_key(&self) -> Vec<f64> {
        let mut k = self.h.clone();
        k.extend_from_slice(&self.c);
        k
    }

    /// Advances the online state by one input and returns the new `h`.
    pub fn step(&mut self, input: SparseRow) -> Result<Vec<f64>> {
        if input.dim != self.spec.input_dim {
            return Err(Error::dim("encoder input", self.spec.input_dim, input.dim));
        }
        let before = Arc::new(self.state_key());
        let input = Arc::new(input);
        let mut tape = Tape::new();
        let vars = tape.frozen(&self.params);
        let x = tape.constant(1, input.dim, input.to_dense());
        let h = tape.row(&self.h);
        let c = tape.row(&self.c);
        let (h2, c2) = self.spec.step(&mut tape, &vars, x, h, c)?;
        self.h = tape.value(h2).to_vec();
        self.c = tape.value(c2).to_vec();
        self.window.push_back(WindowEntry {
            input,
            state_before: before,
        });
        while self.window.len() > self.truncation + 1 {
            self.window.pop_front();
        }
        Ok(self.h.clone())
    }

    /// Context for the transition whose next input is the most recent one.
    /// Requires at least two steps since the last reset.
    pub fn last_history(&self) -> Result<History> {
        let n = self.window.len();
        if n < 2 {
            return Err(Error::Usage("history requires two encoded steps".into()));
        }
        let first = n.saturating_sub(self.truncation + 1);
        let inputs: Vec<Arc<SparseRow>> = self
            .window
            .range(first..n - 1)
            .map(|e| e.input.clone())
            .collect();
        Ok(History {
            start: self.window[first].state_before.clone(),
            inputs,
            next_input: self.window[n - 1].input.clone(),
        })
    }
}

/// Output of [`unroll_batch`].
pub struct Unrolled {
    /// `m_t` for every row, differentiable w.r.t. the encoder parameters.
    pub m: Var,
    /// `m_{t+1}` for every row, computed from the detached `m_t` state.
    pub m_next: Var,
}

/// Recomputes `m_t` (with gradient) and `m_{t+1}` (without) for a batch of
/// histories. Shorter histories are right-aligned and pass their state
/// through unchanged on the leading steps.
pub fn unroll_batch(
    tape: &mut Tape,
    spec: &LstmCellSpec,
    vars: &ParamVars,
    frozen: &ParamVars,
    batch: &[&History],
) -> Result<Unrolled> {
    let b = batch.len();
    let hd = spec.hidden_dim;
    let din = spec.input_dim;
    let k = batch.iter().map(|h| h.inputs.len()).max().unwrap_or(0);
    let mut h0 = Vec::with_capacity(b * hd);
    let mut c0 = Vec::with_capacity(b * hd);
    for hist in batch {
        if hist.start.len() != 2 * hd {
            return Err(Error::dim("history start state", 2 * hd, hist.start.len()));
        }
        h0.extend_from_slice(&hist.start[..hd]);
        c0.extend_from_slice(&hist.start[hd..]);
    }
    let mut h = tape.constant(b, hd, h0);
    let mut c = tape.constant(b, hd, c0);
    for step in 0..k {
        let mut x = vec![0.0; b * din];
        let mut mask = vec![0.0; b * hd];
        let mut all_active = true;
        for (r, hist) in batch.iter().enumerate() {
            let offset = k - hist.inputs.len();
            if step >= offset {
                hist.inputs[step - offset].write_into(&mut x[r * din..(r + 1) * din]);
                mask[r * hd..(r + 1) * hd].iter_mut().for_each(|v| *v = 1.0);
            } else {
                all_active = false;
            }
        }
        let xv = tape.constant(b, din, x);
        let (h2, c2) = spec.step(tape, vars, xv, h, c)?;
        if all_active {
            h = h2;
            c = c2;
        } else {
            let keep: Vec<f64> = mask.iter().map(|v| 1.0 - v).collect();
            let mv = tape.constant(b, hd, mask);
            let kv = tape.constant(b, hd, keep);
            let hn = tape.mul(h2, mv)?;
            let ho = tape.mul(h, kv)?;
            let cn = tape.mul(c2, mv)?;
            let co = tape.mul(c, kv)?;
            h = tape.add(hn, ho)?;
            c = tape.add(cn, co)?;
        }
    }
    let hd_ = tape.detach(h);
    let cd_ = tape.detach(c);
    let mut xn = vec![0.0; b * din];
    for (r, hist) in batch.iter().enumerate() {
        hist.next_input.write_into(&mut xn[r * din..(r + 1) * din]);
    }
    let xv = tape.constant(b, din, xn);
    let (h_next, _) = spec.step(tape, frozen, xv, hd_, cd_)?;
    Ok(Unrolled { m: h, m_next: h_next })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(k: usize) -> Encoder {
        let spec = LstmCellSpec::new(4, 3).unwrap();
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(8));
        Encoder::new(spec, p, k).unwrap()
    }

    fn inputs(n: usize, perturb_first: f64) -> Vec<SparseRow> {
        (0..n)
            .map(|t| {
                let mut x = vec![0.0, (t as f64 * 0.37).sin(), 1.0, 0.5 - t as f64 * 0.1];
                if t == 0 {
                    x[0] = perturb_first;
                }
                SparseRow::from_dense(&x)
            })
            .collect()
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let spec = LstmCellSpec::new(4, 3).unwrap();
        let mut e = Encoder::new(spec, spec.zeros(), 2).unwrap();
        for x in inputs(3, 1.0) {
            assert_eq!(e.step(x).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn identical_streams_identical_states() {
        let mut a = encoder(3);
        let mut b = encoder(3);
        for (x, y) in inputs(6, 0.0).into_iter().zip(inputs(6, 0.0)) {
            assert_eq!(a.step(x).unwrap(), b.step(y).unwrap());
        }
    }

    #[test]
    fn replayed_history_reproduces_online_state() {
        let mut e = encoder(3);
        let mut online = Vec::new();
        for x in inputs(7, 0.2) {
            online.push(e.step(x).unwrap());
        }
        let hist = e.last_history().unwrap();
        assert_eq!(hist.inputs.len(), 3);
        let mut tape = Tape::new();
        let vars = tape.params(&e.params);
        let frozen = tape.frozen(&e.params);
        let u = unroll_batch(&mut tape, &e.spec, &vars, &frozen, &[&hist]).unwrap();
        for (a, b) in tape.value(u.m).iter().zip(&online[5]) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in tape.value(u.m_next).iter().zip(&online[6]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn short_and_long_histories_batch_together() {
        let mut e = encoder(4);
        let xs = inputs(6, 0.0);
        e.step(xs[0].clone()).unwrap();
        e.step(xs[1].clone()).unwrap();
        let short = e.last_history().unwrap();
        for x in &xs[2..] {
            e.step(x.clone()).unwrap();
        }
        let long = e.last_history().unwrap();
        assert_eq!(short.inputs.len(), 1);
        assert_eq!(long.inputs.len(), 4);
        let solo = |h: &History| {
            let mut t = Tape::new();
            let v = t.params(&e.params);
            let f = t.frozen(&e.params);
            let u = unroll_batch(&mut t, &e.spec, &v, &f, &[h]).unwrap();
            t.value(u.m).to_vec()
        };
        let mut t = Tape::new();
        let v = t.params(&e.params);
        let f = t.frozen(&e.params);
        let u = unroll_batch(&mut t, &e.spec, &v, &f, &[&short, &long]).unwrap();
        let both = t.value(u.m).to_vec();
        assert_eq!(&both[..3], solo(&short).as_slice());
        for (a, b) in both[3..].iter().zip(solo(&long)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// The state carries information from before the window, but the
    /// gradient w.r.t. inputs outside the window is exactly zero.
    #[test]
    fn truncation_blocks_gradient_but_not_state() {
        let k = 2;
        let run = |perturb: f64| {
            let mut e = encoder(k);
            for x in inputs(6, perturb) {
                e.step(x).unwrap();
            }
            e.h().to_vec()
        };
        assert_ne!(run(0.0), run(0.9));

        // gradient probe: unroll all inputs as leaves, detaching the state
        // exactly as replay does (k steps before the end)
        let e = encoder(k);
        let xs = inputs(6, 0.3);
        let mut tape = Tape::new();
        let vars = tape.frozen(&e.params);
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(1, 4, x.to_dense())).collect();
        let mut h = tape.constant(1, 3, vec![0.0; 3]);
        let mut c = tape.constant(1, 3, vec![0.0; 3]);
        for (t, x) in leaves.iter().enumerate() {
            if t == xs.len() - k {
                h = tape.detach(h);
                c = tape.detach(c);
            }
            let (h2, c2) = e.spec.step(&mut tape, &vars, *x, h, c).unwrap();
            h = h2;
            c = c2;
        }
        let loss = tape.sum(h);
        let g = tape.backward(loss).unwrap();
        for (t, x) in leaves.iter().enumerate() {
            let grad = g.get(*x);
            if t < xs.len() - k {
                assert!(grad.is_none_or(|g| g.iter().all(|v| *v == 0.0)));
            } else {
                assert!(grad.unwrap().iter().any(|v| *v != 0.0));
            }
        }
    }
}
