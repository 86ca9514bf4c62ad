use super::*;
use crate::ats::{attend_weights, encode_shared, TeacherPacket};
use crate::env::{GridEnv, NUM_ACTIONS};
use crate::harness::metrics::{records_csv, step_log_csv};
use crate::nn::load_params;

fn tiny(extra: &str) -> ExperimentConfig {
    let text = format!(
        "game = grid_treasure\nwidth = 5\nheight = 5\nagents = 2\nmax_steps = 12\n\
         hidden_dim = 4\nmlp_hidden = 6\nbptt = 2\nbatch_size = 4\n\
         ats_query_dim = 3\nats_value_dim = 4\nats_heads = 2\n\
         episodes = 4\nwarmup_episodes = 1\nexplore_episodes = 3\neval_every = 2\neval_episodes = 2\n\
         seeds = 7\n{extra}"
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn iql_team_has_no_selector_or_student_nets() {
    let cfg = tiny("algorithm = iql\nstep_log = true");
    let run = train_seed(&cfg, 7, None).unwrap();
    assert!(run.team.ats().is_none());
    let Team::Iql { agents } = &run.team else { panic!("expected baseline team") };
    let names: Vec<String> = agents[0].snapshot().iter().map(|(n, _)| n.clone()).collect();
    assert!(names.iter().all(|n| n.starts_with("encoder/") || n.starts_with("q/")));
    assert!(run.step_log.iter().all(|r| r.mode == StepMode::SelfLearning));
    assert!(run.records.iter().all(|r| r.mean_student_freq() == 0.0));
}

#[test]
fn same_seed_gives_identical_logs() {
    for algo in ["pat", "iql"] {
        let cfg = tiny(&format!("algorithm = {algo}\nstep_log = true"));
        let a = train_seed(&cfg, 7, None).unwrap();
        let b = train_seed(&cfg, 7, None).unwrap();
        assert_eq!(records_csv(&a.records), records_csv(&b.records), "{algo}");
        assert_eq!(records_csv(&a.evals), records_csv(&b.evals), "{algo}");
        assert_eq!(step_log_csv(&a.step_log), step_log_csv(&b.step_log), "{algo}");
        let c = train_seed(&cfg, 8, None).unwrap();
        assert_ne!(step_log_csv(&a.step_log), step_log_csv(&c.step_log), "{algo}");
    }
}

#[test]
fn frozen_selector_is_untouched() {
    let cfg = tiny("freeze_ats = true\nwarmup_episodes = 3\nstudent_eps_start = 1.0");
    let fresh = Team::new(&cfg, 7, None).unwrap();
    let run = train_seed(&cfg, 7, None).unwrap();
    assert!(run.records[0].mean_student_freq() > 0.0);
    assert_eq!(run.counters.ats_updates, 0);
    assert_eq!(encode_shared(run.team.ats().unwrap()), encode_shared(fresh.ats().unwrap()));

    let cfg = tiny("warmup_episodes = 3\nstudent_eps_start = 1.0");
    let run = train_seed(&cfg, 7, None).unwrap();
    assert!(run.counters.ats_updates > 0);
    assert_ne!(encode_shared(run.team.ats().unwrap()), encode_shared(fresh.ats().unwrap()));
}

#[test]
fn student_nets_wait_for_warmup_to_end() {
    let cfg = tiny("warmup_episodes = 4\nstudent_eps_start = 1.0");
    let fresh = Team::new(&cfg, 7, None).unwrap();
    let run = train_seed(&cfg, 7, None).unwrap();
    let (Team::Pat { agents: a, .. }, Team::Pat { agents: b, .. }) = (&fresh, &run.team) else {
        panic!("expected pat teams")
    };
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.student_actor.params, y.student_actor.params);
        assert_eq!(x.student_critic.params, y.student_critic.params);
        assert_ne!(x.critic.params, y.critic.params);
    }
}

#[test]
fn transferred_selector_ranks_seven_teachers_at_eight_agents() {
    let small = tiny("");
    let run = train_seed(&small, 7, None).unwrap();
    let ats = run.team.ats().unwrap().clone();

    let big = tiny("agents = 8\nwidth = 8\nheight = 8");
    let mut team = Team::new(&big, 7, Some(ats.clone())).unwrap();
    let Team::Pat { agents, .. } = &mut team else { panic!("expected pat team") };
    let (_, obs) = GridEnv::reset(&big.env, 3).unwrap();
    let ms: Vec<Vec<f64>> = agents
        .iter_mut()
        .enumerate()
        .map(|(i, a)| a.encode_observation(&obs[i], None).unwrap().0)
        .collect();
    let packets: Vec<TeacherPacket> = agents
        .iter()
        .map(|a| TeacherPacket { id: a.id, history: a.history_key(), theta: a.actor_theta() })
        .collect();
    let teachers: Vec<&TeacherPacket> = packets.iter().filter(|p| p.id != 0).collect();
    let w = attend_weights(&ats, &ms[0], &teachers).unwrap();
    for row in &w {
        assert_eq!(row.len(), 7);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let bad = tiny("hidden_dim = 5\nagents = 8\nwidth = 8\nheight = 8");
    assert!(matches!(Team::new(&bad, 7, Some(ats)), Err(Error::Incompatible(_))));
}

#[test]
fn evaluation_is_repeatable_and_sized() {
    let cfg = tiny("");
    let mut run = train_seed(&cfg, 7, None).unwrap();
    let a = evaluate(&cfg, &mut run.team, 1, 7, 4).unwrap();
    let b = evaluate(&cfg, &mut run.team, 1, 7, 4).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a, b);
    assert_eq!(a[0].episode, 4);
}

#[test]
fn checkpoints_and_final_window() {
    let cfg = tiny("episodes = 10\neval_every = 4\nfinal_window = 0.2");
    let run = train_seed(&cfg, 7, None).unwrap();
    let checkpoints: Vec<usize> = run.evals.iter().map(|r| r.episode).collect();
    assert_eq!(checkpoints, vec![4, 4, 8, 8, 10, 10]);
    let window: Vec<usize> = run.final_window(&cfg).iter().map(|r| r.episode).collect();
    assert_eq!(window, vec![10, 10]);
}

#[test]
fn step_log_reproduces_episode_metrics() {
    let cfg = tiny("step_log = true\nwarmup_episodes = 2\nstudent_eps_start = 0.8");
    let run = train_seed(&cfg, 7, None).unwrap();
    let m = cfg.env.agents;
    for rec in &run.records {
        let rows: Vec<&StepLogRow> = run.step_log.iter().filter(|r| r.episode == rec.episode).collect();
        let steps = rows.len() / m;
        assert_eq!(steps as f64, rec.avg_step);
        let reward: f64 = rows.iter().map(|r| r.reward).sum();
        assert!((reward - rec.team_reward).abs() < 1e-9);
        for i in 0..m {
            let student = rows.iter().filter(|r| r.agent == i && r.mode == StepMode::Student).count();
            assert_eq!(student as f64 / steps as f64, rec.student_mode_freq[i]);
        }
        assert!(rows.iter().all(|r| r.action < NUM_ACTIONS));
    }
    assert!(run.records.iter().any(|r| r.mean_student_freq() > 0.0));
}

#[test]
fn run_writes_and_reloads_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&format!("seeds = 1,2\nout_dir = {}", dir.path().display()));
    let result = run_training(&cfg).unwrap();
    assert!(result.failed_seeds.is_empty());
    assert_eq!(result.summary["team_reward"].n_seeds, 2);
    for name in ["manifest.json", "summary.json", "config.txt", "seed_1/metrics.csv", "seed_2/ats.patp"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["algorithm"], "pat");
    assert_eq!(manifest["seeds"], serde_json::json!([1, 2]));

    let reparsed = ExperimentConfig::parse(&std::fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(reparsed, ExperimentConfig { out_dir: None, ..cfg.clone() });

    let seed_dir = output::seed_dir(dir.path(), 1);
    let team = output::load_team(&cfg, &seed_dir, 1).unwrap();
    let Team::Pat { agents, .. } = &team else { panic!("expected pat team") };
    let disk = load_params(seed_dir.join("agent_0.patp")).unwrap();
    assert_eq!(agents[0].snapshot(), disk);
    assert_eq!(team.ats(), result.seeds[0].team.ats());

    let ats_path = seed_dir.join("ats.patp");
    let transfer = tiny("agents = 4\nwidth = 6\nheight = 6");
    let moved = run_transfer(&transfer, &ats_path).unwrap();
    assert_eq!(moved.seeds.len(), 1);
    let iql = tiny("algorithm = iql");
    assert!(matches!(run_transfer(&iql, &ats_path), Err(Error::Config(_))));
    let wrong = tiny("hidden_dim = 6");
    assert!(matches!(run_transfer(&wrong, &ats_path), Err(Error::Incompatible(_))));
}

#[test]
fn derived_seeds_are_distinct_and_stable() {
    let a: Vec<u64> = (0..4).map(|i| derive_seed(1, 1, i)).collect();
    let b: Vec<u64> = (0..4).map(|i| derive_seed(1, 2, i)).collect();
    assert_eq!(a, (0..4).map(|i| derive_seed(1, 1, i)).collect::<Vec<_>>());
    let mut all = a.clone();
    all.extend(&b);
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 8);
}
