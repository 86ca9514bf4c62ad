use super::*;
use crate::nn::{flatten_params, unflatten_params, AdamConfig, OutputActivation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn actor_spec() -> MlpSpec {
    MlpSpec::new(vec![3, 4, NUM_ACTIONS], OutputActivation::Identity).unwrap()
}

fn critic_spec() -> MlpSpec {
    MlpSpec::new(vec![3 + NUM_ACTIONS, 4, 1], OutputActivation::Identity).unwrap()
}

fn dims(heads: usize, dropout: f64) -> AtsDims {
    AtsDims {
        d_m: 3,
        d_h: 4,
        d_q: 2,
        d_v: 3,
        p: actor_spec().param_count(),
        heads,
        dropout,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn packets(n: usize, seed: u64) -> Vec<TeacherPacket> {
    let mut r = rng(seed);
    let spec = actor_spec();
    (0..n)
        .map(|id| TeacherPacket {
            id,
            history: (0..4).map(|_| r.gen_range(-1.0..1.0)).collect(),
            theta: flatten_params(&spec.init(&mut r)).into_data(),
        })
        .collect()
}

fn refs(p: &[TeacherPacket]) -> Vec<&TeacherPacket> {
    p.iter().collect()
}

fn greedy(params: &AttentionParams, m: &[f64], p: &[&TeacherPacket]) -> AdviceResult {
    advise::<ChaCha8Rng>(params, &actor_spec(), m, p, None).unwrap()
}

const M: [f64; 3] = [0.4, -0.7, 0.2];

#[test]
fn single_teacher_gets_all_weight() {
    let params = AttentionParams::init(dims(3, 0.0), &mut rng(1)).unwrap();
    let p = packets(1, 2);
    for row in attend_weights(&params, &M, &refs(&p)).unwrap() {
        assert_eq!(row, vec![1.0]);
    }
}

#[test]
fn identical_keys_split_evenly() {
    let params = AttentionParams::init(dims(2, 0.0), &mut rng(3)).unwrap();
    let mut p = packets(2, 4);
    p[1].history = p[0].history.clone();
    for row in attend_weights(&params, &M, &refs(&p)).unwrap() {
        assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn weights_match_straight_line_oracle() {
    let params = AttentionParams::init(dims(2, 0.0), &mut rng(5)).unwrap();
    let p = packets(3, 6);
    let got = attend_weights(&params, &M, &refs(&p)).unwrap();
    for h in 0..2 {
        let wq = params.params.value(&format!("wq{h}")).unwrap().data();
        let wk = params.params.value(&format!("wk{h}")).unwrap().data();
        let mut scores = [0.0; 3];
        for (j, pk) in p.iter().enumerate() {
            let mut dot = 0.0;
            for r in 0..2 {
                let mut q = 0.0;
                for c in 0..3 {
                    q += wq[r * 3 + c] * M[c];
                }
                let mut k = 0.0;
                for c in 0..4 {
                    k += wk[r * 4 + c] * pk.history[c];
                }
                dot += q * k;
            }
            scores[j] = dot / 2f64.sqrt();
        }
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        for j in 0..3 {
            assert!((got[h][j] - (scores[j] - mx).exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn weights_are_normalized_for_random_inputs() {
    let mut r = rng(7);
    for trial in 0..50 {
        let params = AttentionParams::init(dims(1 + trial % 4, 0.0), &mut r).unwrap();
        let mut p = packets(1 + trial % 6, trial as u64);
        let scale = r.gen_range(0.1..50.0);
        p.iter_mut().for_each(|pk| pk.history.iter_mut().for_each(|x| *x *= scale));
        let m: Vec<f64> = (0..3).map(|_| r.gen_range(-5.0..5.0)).collect();
        for row in attend_weights(&params, &m, &refs(&p)).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|a| *a >= 0.0));
        }
    }
}

#[test]
fn scaling_keys_scales_logits() {
    let params = AttentionParams::init(dims(2, 0.0), &mut rng(8)).unwrap();
    let p = packets(3, 9);
    let base = attention_logits(&params, &M, &refs(&p)).unwrap();
    let c = 3.5;
    let mut scaled = p.clone();
    scaled.iter_mut().for_each(|pk| pk.history.iter_mut().for_each(|x| *x *= c));
    let got = attention_logits(&params, &M, &refs(&scaled)).unwrap();
    for (a, b) in base.iter().flatten().zip(got.iter().flatten()) {
        assert!((a * c - b).abs() < 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn no_teachers_is_an_error() {
    let params = AttentionParams::init(dims(1, 0.0), &mut rng(10)).unwrap();
    assert!(matches!(attend_weights(&params, &M, &[]), Err(Error::NoTeachers)));
}

/// One head, `D_v = P`, identity value and decoder maps.
fn pass_through() -> AttentionParams {
    let p = actor_spec().param_count();
    let d = AtsDims {
        d_v: p,
        heads: 1,
        ..dims(1, 0.0)
    };
    let mut params = AttentionParams::init(d, &mut rng(11)).unwrap();
    for name in ["wv0", "wt"] {
        let t = params.params.get_mut(name).unwrap();
        t.value.fill(0.0);
        for i in 0..p {
            t.value.data_mut()[i * p + i] = 1.0;
        }
    }
    params
}

#[test]
fn pass_through_recovers_teacher_policy() {
    let params = pass_through();
    let p = packets(1, 12);
    let advice = greedy(&params, &M, &refs(&p));
    assert_eq!(advice.fused, p[0].theta);
    let teacher = unflatten_params(&actor_spec().layout(), &Tensor::vector(p[0].theta.clone())).unwrap();
    assert_eq!(advice.action, argmax(&actor_spec().eval(&teacher, &M).unwrap()));
}

#[test]
fn permuting_teachers_permutes_weights_only() {
    let params = AttentionParams::init(dims(2, 0.0), &mut rng(13)).unwrap();
    let p = packets(4, 14);
    let a = greedy(&params, &M, &refs(&p));
    let order = [2, 0, 3, 1];
    let permuted: Vec<&TeacherPacket> = order.iter().map(|i| &p[*i]).collect();
    let b = greedy(&params, &M, &permuted);
    assert_eq!(a.action, b.action);
    for (x, y) in a.fused.iter().zip(&b.fused) {
        assert!((x - y).abs() < 1e-12);
    }
    for h in 0..2 {
        for (k, i) in order.iter().enumerate() {
            assert!((b.weights[h][k] - a.weights[h][*i]).abs() < 1e-15);
        }
    }
    assert_eq!(a, greedy(&params, &M, &refs(&p)));
}

#[test]
fn advice_matches_independent_reimplementation() {
    let params = AttentionParams::init(dims(2, 0.0), &mut rng(15)).unwrap();
    let p = packets(2, 16);
    let advice = greedy(&params, &M, &refs(&p));
    let d = params.dims;
    let weights = attend_weights(&params, &M, &refs(&p)).unwrap();
    let mut concat = Vec::new();
    for (h, alpha) in weights.iter().enumerate() {
        let wv = params.params.value(&format!("wv{h}")).unwrap().data();
        for r in 0..d.d_v {
            let mut acc = 0.0;
            for (j, pk) in p.iter().enumerate() {
                let row: f64 = (0..d.p).map(|c| wv[r * d.p + c] * pk.theta[c]).sum();
                acc += alpha[j] * row;
            }
            concat.push(acc);
        }
    }
    let wt = params.params.value("wt").unwrap().data();
    let width = concat.len();
    let v: Vec<f64> = (0..d.p)
        .map(|r| (0..width).map(|c| wt[r * width + c] * concat[c]).sum())
        .collect();
    for (a, b) in advice.fused.iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
    // hand-rolled forward of the decoded actor: w0 [4,3], b0, w1 [5,4], b1
    let (w0, rest) = v.split_at(12);
    let (b0, rest) = rest.split_at(4);
    let (w1, b1) = rest.split_at(20);
    let hidden: Vec<f64> = (0..4)
        .map(|r| ((0..3).map(|c| w0[r * 3 + c] * M[c]).sum::<f64>() + b0[r]).tanh())
        .collect();
    let logits: Vec<f64> = (0..5)
        .map(|r| (0..4).map(|c| w1[r * 4 + c] * hidden[c]).sum::<f64>() + b1[r])
        .collect();
    assert_eq!(advice.action, argmax(&logits));
}

#[test]
fn dropout_only_during_exploration() {
    let params = AttentionParams::init(dims(4, 0.5), &mut rng(17)).unwrap();
    let p = packets(3, 18);
    let a = greedy(&params, &M, &refs(&p));
    assert_eq!(a, greedy(&params, &M, &refs(&p)));
    let mut r = rng(19);
    let mut differs = false;
    for _ in 0..20 {
        let e = advise(&params, &actor_spec(), &M, &refs(&p), Some(Explore { temperature: 1.0, rng: &mut r })).unwrap();
        differs |= e.fused != a.fused;
    }
    assert!(differs);
}

fn samples<'a>(critics: &'a [ParamSet], spec: &'a MlpSpec, n_packets: usize, heads: usize, dropout: f64, seed: u64) -> Vec<AtsSample<'a>> {
    let mut r = rng(seed);
    let d = dims(heads, dropout);
    critics
        .iter()
        .enumerate()
        .map(|(i, critic)| AtsSample {
            m: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            exclude: Some(i % n_packets),
            critic,
            critic_spec: spec,
            noise: crate::agent::explore::gumbel_vec(NUM_ACTIONS, &mut r),
            head_scale: head_dropout(&d, &mut r),
        })
        .collect()
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let cspec = critic_spec();
    let critics: Vec<ParamSet> = (0..3).map(|i| cspec.init(&mut rng(20 + i))).collect();
    let p = packets(3, 23);
    let base = AttentionParams::init(dims(2, 0.3), &mut rng(24)).unwrap();
    let batch = samples(&critics, &cspec, 3, 2, 0.3, 25);
    let temperature = 0.8;
    let mut analytic = base.clone();
    let j = ats_loss(&mut analytic, &actor_spec(), &p, &batch, temperature).unwrap();
    assert!((j - ats_objective(&base, &actor_spec(), &p, &batch, temperature).unwrap()).abs() < 1e-12);
    let eps = 1e-6;
    for (name, param) in analytic.params.iter() {
        let ana: Vec<f64> = param.grad.data().iter().map(|g| -g).collect();
        let mut num = Vec::with_capacity(ana.len());
        for i in 0..ana.len() {
            let mut plus = base.clone();
            plus.params.get_mut(name).unwrap().value.data_mut()[i] += eps;
            let mut minus = base.clone();
            minus.params.get_mut(name).unwrap().value.data_mut()[i] -= eps;
            let f = |x: &AttentionParams| ats_objective(x, &actor_spec(), &p, &batch, temperature).unwrap();
            num.push((f(&plus) - f(&minus)) / (2.0 * eps));
        }
        let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = ana.iter().chain(&num).map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / scale.max(1e-12) < 1e-4, "{name}: rel err {}", diff / scale);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cspec = critic_spec();
    let critics = vec![cspec.init(&mut rng(30))];
    let p = packets(2, 31);
    let mut params = AttentionParams::init(dims(2, 0.0), &mut rng(32)).unwrap();
    let before = params.params.fingerprint();
    let mut opt = AdamState::new(&params.params, AdamConfig::with_lr(0.0));
    let batch = samples(&critics, &cspec, 2, 2, 0.0, 33);
    assert!(update_ats(&mut params, &mut opt, &actor_spec(), &p, &batch, 1.0).unwrap().is_some());
    assert_eq!(params.params.fingerprint(), before);
    assert_eq!(update_ats(&mut params, &mut opt, &actor_spec(), &p, &[], 1.0).unwrap(), None);
}

#[test]
fn updates_shift_attention_to_the_endorsed_teacher() {
    let spec = actor_spec();
    // critic: Q(m, a) = 4 * a[0], realized as tanh units on the action one-hot
    let cspec = critic_spec();
    let mut critic = cspec.zeros();
    critic.get_mut("w0").unwrap().value.data_mut()[3] = 0.5;
    critic.get_mut("w1").unwrap().value.data_mut()[0] = 4.0 / 0.5f64.tanh();
    // teacher 0 strongly prefers action 0, teacher 1 action 1
    let mk = |id: usize, action: usize, key: [f64; 4]| {
        let mut t = spec.zeros();
        t.get_mut("b1").unwrap().value.data_mut()[action] = 3.0;
        TeacherPacket {
            id,
            history: key.to_vec(),
            theta: flatten_params(&t).into_data(),
        }
    };
    let p = vec![mk(0, 0, [1.0, 0.0, 0.5, 0.0]), mk(1, 1, [0.0, 1.0, 0.0, -0.5])];
    let mut params = pass_through();
    let mut opt = AdamState::new(&params.params, AdamConfig::with_lr(0.01));
    let critics = vec![critic; 4];
    let batch: Vec<AtsSample> = samples(&critics, &cspec, 2, 1, 0.0, 40)
        .into_iter()
        .map(|s| AtsSample { exclude: None, ..s })
        .collect();
    let weight0 = |params: &AttentionParams| {
        batch
            .iter()
            .map(|s| attend_weights(params, &s.m, &refs(&p)).unwrap()[0][0])
            .sum::<f64>()
            / batch.len() as f64
    };
    let before = weight0(&params);
    for _ in 0..200 {
        update_ats(&mut params, &mut opt, &spec, &p, &batch, 1.0).unwrap();
    }
    let after = weight0(&params);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn shared_snapshot_round_trip_and_transfer() {
    let d = dims(2, 0.1);
    let params = AttentionParams::init(d, &mut rng(50)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ats.patp");
    export_shared(&params, &path).unwrap();
    let back = import_shared(&path, &d).unwrap();
    assert_eq!(back, params);
    for ((_, a), (_, b)) in back.params.iter().zip(params.params.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }

    // team size never enters the shapes: a larger team attends over 7 teachers
    let p = packets(8, 51);
    let teachers: Vec<&TeacherPacket> = p.iter().skip(1).collect();
    let rows = attend_weights(&back, &M, &teachers).unwrap();
    assert!(rows.iter().all(|r| r.len() == 7));

    let other = AtsDims { d_m: 5, ..d };
    match import_shared(&path, &other) {
        Err(Error::Incompatible(msg)) => assert!(msg.contains("D_m")),
        other => panic!("expected incompatibility, got {other:?}"),
    }
}
