//! Attention teacher selector shared by the whole team.
//!
//! A student's encoding `m` forms the query; each teacher contributes its
//! recurrent state `(h, c)` as the key and its flattened actor parameters
//! `θ` as the value. Per head the fused value `Σ α_j W_V θ_j` is computed,
//! heads are concatenated, and `W_T` decodes the result back to a full
//! actor parameter vector which is then run on `m` to produce advice.

use std::path::Path;

use rand::Rng;

use crate::agent::explore::{argmax, sample_softmax};
use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::nn::{
    decode_params, encode_params, softmax_in_place, AdamState, Layout, MlpSpec, ParamSet, ParamVars, Tape, Tensor, Var,
};

const HEADER: &str = "__header";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtsDims {
    /// Query input width (student encoding).
    pub d_m: usize,
    /// Key input width (teacher `(h, c)`).
    pub d_h: usize,
    pub d_q: usize,
    pub d_v: usize,
    /// Flattened actor parameter count.
    pub p: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl AtsDims {
    pub fn validate(&self) -> Result<()> {
        if [self.d_m, self.d_h, self.d_q, self.d_v, self.p, self.heads].contains(&0) {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("attention dropout must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes; a function of the dimensions only, never
    /// of the team size.
    pub fn layout(&self) -> Layout {
        let mut out = Vec::with_capacity(3 * self.heads + 1);
        for h in 0..self.heads {
            out.push((format!("wq{h}"), vec![self.d_q, self.d_m]));
            out.push((format!("wk{h}"), vec![self.d_q, self.d_h]));
            out.push((format!("wv{h}"), vec![self.d_v, self.p]));
        }
        out.push(("wt".to_string(), vec![self.p, self.heads * self.d_v]));
        out
    }

    /// Names of the dimensions that differ from `other`, ignoring dropout.
    pub fn mismatches(&self, other: &AtsDims) -> Vec<String> {
        let pairs = [
            ("D_m", self.d_m, other.d_m),
            ("D_h", self.d_h, other.d_h),
            ("D_q", self.d_q, other.d_q),
            ("D_v", self.d_v, other.d_v),
            ("P", self.p, other.p),
            ("H", self.heads, other.heads),
        ];
        pairs
            .iter()
            .filter(|(_, a, b)| a != b)
            .map(|(n, a, b)| format!("{n}: snapshot {a}, expected {b}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dims: AtsDims,
    /// `wq{h}`, `wk{h}`, `wv{h}` per head, then `wt`.
    pub params: ParamSet,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(dims: AtsDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in dims.layout() {
            let bound = 1.0 / (shape[1] as f64).sqrt();
            params.insert(name, Tensor::uniform(&shape, bound, rng));
        }
        Ok(AttentionParams { dims, params })
    }

    fn matrix(&self, name: &str) -> &[f64] {
        self.params.value(name).expect("attention parameter present").data()
    }
}

/// Immutable snapshot of one teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPacket {
    pub id: usize,
    pub history: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdviceResult {
    pub action: usize,
    /// `weights[h][j]` over the packets in the order given.
    pub weights: Vec<Vec<f64>>,
    /// Decoded actor parameters.
    pub fused: Vec<f64>,
}

fn mat_vec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn check_packets(dims: &AtsDims, m: &[f64], packets: &[&TeacherPacket]) -> Result<()> {
    if packets.is_empty() {
        return Err(Error::NoTeachers);
    }
    if m.len() != dims.d_m {
        return Err(Error::dim("attention query", dims.d_m, m.len()));
    }
    for p in packets {
        if p.history.len() != dims.d_h {
            return Err(Error::dim(format!("teacher {} history", p.id), dims.d_h, p.history.len()));
        }
        if p.theta.len() != dims.p {
            return Err(Error::dim(format!("teacher {} parameters", p.id), dims.p, p.theta.len()));
        }
    }
    Ok(())
}

/// Pre-softmax scores `(W_Q m)·(W_K h_j) / √D_q`, one row per head.
pub fn attention_logits(params: &AttentionParams, m: &[f64], packets: &[&TeacherPacket]) -> Result<Vec<Vec<f64>>> {
    let d = params.dims;
    check_packets(&d, m, packets)?;
    let scale = 1.0 / (d.d_q as f64).sqrt();
    Ok((0..d.heads)
        .map(|h| {
            let q = mat_vec(params.matrix(&format!("wq{h}")), d.d_q, m);
            let wk = params.matrix(&format!("wk{h}"));
            packets
                .iter()
                .map(|p| {
                    let k = mat_vec(wk, d.d_q, &p.history);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect()
        })
        .collect())
}

pub fn attend_weights(params: &AttentionParams, m: &[f64], packets: &[&TeacherPacket]) -> Result<Vec<Vec<f64>>> {
    let mut rows = attention_logits(params, m, packets)?;
    for r in &mut rows {
        softmax_in_place(r);
    }
    Ok(rows)
}

/// Exploration settings for [`advise`] during training.
pub struct Explore<'a, R: Rng + ?Sized> {
    pub temperature: f64,
    pub rng: &'a mut R,
}

/// Fuses the teachers' policies and evaluates the decoded actor on `m`.
/// With `explore`, head dropout is active and the action is sampled from
/// `softmax(logits / T)`; otherwise the action is the greedy argmax.
pub fn advise<R: Rng + ?Sized>(
    params: &AttentionParams,
    actor: &MlpSpec,
    m: &[f64],
    packets: &[&TeacherPacket],
    explore: Option<Explore<'_, R>>,
) -> Result<AdviceResult> {
    let d = params.dims;
    if actor.param_count() != d.p {
        return Err(Error::dim("advised actor parameter count", d.p, actor.param_count()));
    }
    let weights = attend_weights(params, m, packets)?;
    let mut explore = explore;
    let keep = 1.0 - d.dropout;
    let mut concat = Vec::with_capacity(d.heads * d.d_v);
    for (h, alpha) in weights.iter().enumerate() {
        let wv = params.matrix(&format!("wv{h}"));
        let mut mixed = vec![0.0; d.p];
        for (a, p) in alpha.iter().zip(packets) {
            for (dst, t) in mixed.iter_mut().zip(&p.theta) {
                *dst += a * t;
            }
        }
        let mut value = mat_vec(wv, d.d_v, &mixed);
        if let Some(e) = explore.as_mut() {
            if d.dropout > 0.0 {
                let factor = if e.rng.gen::<f64>() < d.dropout { 0.0 } else { 1.0 / keep };
                value.iter_mut().for_each(|v| *v *= factor);
            }
        }
        concat.extend(value);
    }
    let fused = mat_vec(params.matrix("wt"), d.p, &concat);
    let decoded = crate::nn::unflatten_params(&actor.layout(), &Tensor::vector(fused.clone()))?;
    let logits = actor.eval(&decoded, m)?;
    let action = match explore {
        Some(e) => sample_softmax(&logits, e.temperature, e.rng),
        None => argmax(&logits),
    };
    Ok(AdviceResult { action, weights, fused })
}

/// One student-mode step contributing to the selector's objective.
pub struct AtsSample<'a> {
    pub m: Vec<f64>,
    /// Index of the student's own packet, excluded from its teachers.
    pub exclude: Option<usize>,
    /// The student's self critic over `[m, action]`.
    pub critic: &'a ParamSet,
    pub critic_spec: &'a MlpSpec,
    /// Gumbel noise for the relaxed advised action.
    pub noise: Vec<f64>,
    /// Per-head dropout factor (`0` or `1/(1-p)`; `1` without dropout).
    pub head_scale: Vec<f64>,
}

fn objective_graph(
    tape: &mut Tape,
    params: &AttentionParams,
    actor: &MlpSpec,
    packets: &[TeacherPacket],
    samples: &[AtsSample<'_>],
    temperature: f64,
    trainable: bool,
) -> Result<(Var, ParamVars)> {
    let d = params.dims;
    if actor.param_count() != d.p {
        return Err(Error::dim("advised actor parameter count", d.p, actor.param_count()));
    }
    let refs: Vec<&TeacherPacket> = packets.iter().collect();
    let n = packets.len();
    let vars = if trainable {
        tape.params(&params.params)
    } else {
        tape.frozen(&params.params)
    };
    let keys = tape.constant(n, d.d_h, packets.iter().flat_map(|p| p.history.iter().copied()).collect());
    let thetas = tape.constant(n, d.p, packets.iter().flat_map(|p| p.theta.iter().copied()).collect());
    // per head: projected keys [n, D_q] and values [n, D_v] shared by all samples
    let mut proj = Vec::with_capacity(d.heads);
    for h in 0..d.heads {
        let k = tape.matmul_nt(keys, vars.get(&format!("wk{h}")))?;
        let v = tape.matmul_nt(thetas, vars.get(&format!("wv{h}")))?;
        proj.push((k, v));
    }
    let scale = 1.0 / (d.d_q as f64).sqrt();
    let mut total: Option<Var> = None;
    for s in samples {
        check_packets(&d, &s.m, &refs)?;
        if s.noise.len() != NUM_ACTIONS || s.head_scale.len() != d.heads {
            return Err(Error::Usage("attention sample noise or head scale has the wrong length".into()));
        }
        let teachers: Vec<usize> = (0..n).filter(|j| Some(*j) != s.exclude).collect();
        if teachers.is_empty() {
            return Err(Error::NoTeachers);
        }
        let m = tape.row(&s.m);
        let mut heads = Vec::with_capacity(d.heads);
        for (h, (k, v)) in proj.iter().enumerate() {
            let q = tape.matmul_nt(m, vars.get(&format!("wq{h}")))?;
            let k = tape.gather_rows(*k, &teachers)?;
            let v = tape.gather_rows(*v, &teachers)?;
            let logits = tape.matmul_nt(q, k)?;
            let logits = tape.scale(logits, scale);
            let alpha = tape.softmax_rows(logits);
            let fused = tape.matmul(alpha, v)?;
            heads.push(tape.scale(fused, s.head_scale[h]));
        }
        let concat = tape.concat_cols(&heads)?;
        let flat = tape.matmul_nt(concat, vars.get("wt"))?;
        let layers = actor.decode_flat(tape, flat)?;
        let logits = actor.forward_layers(tape, &layers, m)?;
        let g = tape.constant(1, NUM_ACTIONS, s.noise.clone());
        let perturbed = tape.add(logits, g)?;
        let perturbed = tape.scale(perturbed, 1.0 / temperature);
        let relaxed = tape.softmax_rows(perturbed);
        let critic = tape.frozen(s.critic);
        let x = tape.concat_cols(&[m, relaxed])?;
        let q = s.critic_spec.forward(tape, &critic, x)?;
        total = Some(match total {
            Some(t) => tape.add(t, q)?,
            None => q,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("empty attention batch".into()))?;
    Ok((tape.scale(total, 1.0 / samples.len() as f64), vars))
}

/// Mean critic value of the relaxed advised actions.
pub fn ats_objective(
    params: &AttentionParams,
    actor: &MlpSpec,
    packets: &[TeacherPacket],
    samples: &[AtsSample<'_>],
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (j, _) = objective_graph(&mut tape, params, actor, packets, samples, temperature, false)?;
    Ok(tape.scalar(j))
}

/// Accumulates `-∇J` into the selector's gradients and returns `J`.
pub fn ats_loss(
    params: &mut AttentionParams,
    actor: &MlpSpec,
    packets: &[TeacherPacket],
    samples: &[AtsSample<'_>],
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (j, vars) = objective_graph(&mut tape, params, actor, packets, samples, temperature, true)?;
    let grads = tape.backward_with(j, -1.0)?;
    vars.accumulate_into(&grads, &mut params.params)?;
    Ok(tape.scalar(j))
}

/// Draws the per-head dropout factors for one training sample.
pub fn head_dropout<R: Rng + ?Sized>(dims: &AtsDims, rng: &mut R) -> Vec<f64> {
    (0..dims.heads)
        .map(|_| {
            if dims.dropout > 0.0 && rng.gen::<f64>() < dims.dropout {
                0.0
            } else {
                1.0 / (1.0 - dims.dropout)
            }
        })
        .collect()
}

/// One ascent step on the pooled objective. `None` for an empty batch.
pub fn update_ats(
    params: &mut AttentionParams,
    opt: &mut AdamState,
    actor: &MlpSpec,
    packets: &[TeacherPacket],
    samples: &[AtsSample<'_>],
    temperature: f64,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let j = ats_loss(params, actor, packets, samples, temperature)?;
    opt.step(&mut params.params)?;
    if !j.is_finite() {
        return Err(Error::NonFinite("attention objective".into()));
    }
    Ok(Some(j))
}

pub fn encode_shared(params: &AttentionParams) -> Vec<u8> {
    let d = params.dims;
    let mut out = ParamSet::new();
    out.insert(
        HEADER,
        Tensor::vector(vec![
            d.d_m as f64,
            d.d_h as f64,
            d.d_q as f64,
            d.d_v as f64,
            d.p as f64,
            d.heads as f64,
            d.dropout,
        ]),
    );
    out.extend_prefixed("", &params.params);
    encode_params(&out)
}

/// Parses a shared-attention snapshot and checks it against `expected`.
/// Dropout is taken from the snapshot.
pub fn decode_shared(bytes: &[u8], expected: &AtsDims) -> Result<AttentionParams> {
    let set = decode_params(bytes)?;
    let header = set
        .value(HEADER)
        .map_err(|_| Error::Decode("attention snapshot has no header".into()))?
        .data()
        .to_vec();
    if header.len() != 7 || header[..6].iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(Error::Decode("malformed attention snapshot header".into()));
    }
    let dims = AtsDims {
        d_m: header[0] as usize,
        d_h: header[1] as usize,
        d_q: header[2] as usize,
        d_v: header[3] as usize,
        p: header[4] as usize,
        heads: header[5] as usize,
        dropout: header[6],
    };
    let bad = dims.mismatches(expected);
    if !bad.is_empty() {
        return Err(Error::Incompatible(bad.join("; ")));
    }
    let mut params = ParamSet::new();
    for (name, p) in set.iter().filter(|(n, _)| n.as_str() != HEADER) {
        params.insert(name.clone(), p.value.clone());
    }
    if dims.layout() != params.layout() {
        return Err(Error::Decode("attention snapshot entries do not match its header".into()));
    }
    Ok(AttentionParams { dims, params })
}

pub fn export_shared(params: &AttentionParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_shared(params))?;
    Ok(())
}

pub fn import_shared(path: impl AsRef<Path>, expected: &AtsDims) -> Result<AttentionParams> {
    decode_shared(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests;
