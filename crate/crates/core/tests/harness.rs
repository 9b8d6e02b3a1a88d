use dfl_core::bayes::{log_pool, log_pool_uniform, DiagonalGaussian};
use dfl_core::harness::config::{PolicyKind, SimConfig};
use dfl_core::harness::experiment::{run_experiment, train_policy};
use dfl_core::harness::metrics::{emit_metrics, read_csv, RunSummary, METRICS_HEADER};
use dfl_core::harness::world::{World, AUDIT_TOLERANCE};
use dfl_core::threat::ConnectionMatrix;
use dfl_core::wireless::power_feasible;
use dfl_core::policy::checkpoint::encode;
use dfl_core::Error;

fn small(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        rounds: 6,
        ..SimConfig::default()
    }
}

fn honest_only(seed: u64) -> SimConfig {
    SimConfig {
        conventional: 4,
        curious: 2,
        byzantine: 0,
        detection: false,
        policy: PolicyKind::Random,
        ..small(seed)
    }
}

fn assert_same(a: &DiagonalGaussian, b: &DiagonalGaussian, tol: f64) {
    for (x, y) in a.mean().iter().zip(b.mean()) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
    for (x, y) in a.std().iter().zip(b.std()) {
        assert!((x - y).abs() <= tol * y, "{x} vs {y}");
    }
}

#[test]
fn complete_graph_reaches_global_pool_in_one_round() {
    let mut cfg = honest_only(3);
    cfg.wireless.max_power_w = 1e6;
    let mut w = World::new(&cfg, None).unwrap();
    let out = w.run_round().unwrap();
    assert_eq!(out.links, ConnectionMatrix::complete(6));
    let all: Vec<&DiagonalGaussian> = out.posteriors.iter().collect();
    let global = log_pool_uniform(&all).unwrap();
    for p in w.priors() {
        assert_same(p, &global, 1e-12);
    }
}

#[test]
fn zero_budget_isolates_every_device() {
    let mut cfg = small(4);
    cfg.wireless.max_power_w = 1e-30;
    let mut w = World::new(&cfg, None).unwrap();
    for _ in 0..3 {
        let out = w.run_round().unwrap();
        assert_eq!(out.links.link_count(), 0);
        assert_eq!(out.metrics.xi, 1.0);
        assert_eq!(out.metrics.total_energy_j, 0.0);
        for i in w.standard() {
            // a lone device's next prior is its own posterior
            assert_same(&w.devices[i].prior, &out.posteriors[i], 1e-12);
        }
    }
}

#[test]
fn priors_are_the_weighted_pool_of_received_posteriors() {
    let mut w = World::new(&small(5), None).unwrap();
    for _ in 0..5 {
        let before: Vec<DiagonalGaussian> = w.priors().into_iter().cloned().collect();
        let out = w.run_round().unwrap();
        let a = &out.aggregation;
        for i in 0..w.len() {
            if !w.devices[i].role.is_standard() {
                assert_eq!(w.devices[i].prior, before[i]);
                continue;
            }
            let parts: Vec<(&DiagonalGaussian, f64)> = (0..w.len())
                .filter(|&j| a.get(i, j) > 0.0)
                .map(|j| {
                    assert!(j == i || out.links.is_connected(i, j));
                    (&out.posteriors[j], a.get(i, j))
                })
                .collect();
            assert_same(&w.devices[i].prior, &log_pool(&parts).unwrap(), 1e-12);
        }
    }
}

#[test]
fn links_meet_delay_and_power_caps() {
    for seed in 0..5 {
        let mut w = World::new(&small(seed), None).unwrap();
        let cap = w.cfg.wireless.max_delay_s * (1.0 + AUDIT_TOLERANCE);
        let budget = dfl_core::wireless::LinkBudget {
            max_power: w.cfg.wireless.max_power_w * (1.0 + AUDIT_TOLERANCE),
            max_delay: w.cfg.wireless.max_delay_s,
        };
        for _ in 0..6 {
            let out = w.run_round().unwrap();
            assert!(out.metrics.max_delay_s <= cap);
            for row in &out.power {
                assert!(power_feasible(row, &budget));
            }
        }
    }
}

#[test]
fn frozen_disagreement_never_increases_on_a_fixed_ring() {
    let mut cfg = honest_only(6);
    cfg.wireless.max_power_w = 1e6;
    cfg.rounds = 15;
    let mut w = World::new(&cfg, None).unwrap();
    // one trained round to spread the priors out
    let mut prev = w.run_round().unwrap().metrics.disagreement;
    w.freeze_posteriors = true;
    let mut ring = ConnectionMatrix::empty(6);
    for i in 0..6 {
        ring.connect(i, (i + 1) % 6);
    }
    w.fixed_links = Some(ring);
    for _ in 0..14 {
        let d = w.run_round().unwrap().metrics.disagreement;
        assert!(d <= prev * (1.0 + 1e-9) + 1e-15, "{d} > {prev}");
        prev = d;
    }
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(7);
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = run_experiment(&cfg, None).unwrap();
        let files = emit_metrics(&dir.path().join(k.to_string()), "run", &out.metrics, &out.summary).unwrap();
        bytes.push((std::fs::read(files.csv).unwrap(), std::fs::read(files.summary).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn zero_rounds_give_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        rounds: 0,
        ..SimConfig::default()
    };
    let out = run_experiment(&cfg, None).unwrap();
    assert_eq!(out.summary.rounds, 0);
    assert_eq!(out.summary.final_mean_accuracy, None);
    let files = emit_metrics(dir.path(), "empty", &out.metrics, &out.summary).unwrap();
    let text = std::fs::read_to_string(&files.csv).unwrap();
    assert_eq!(text, format!("{}\n", METRICS_HEADER.join(",")));
    assert!(read_csv(&files.csv).unwrap().is_empty());
}

#[test]
fn emitted_metrics_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&small(8), None).unwrap();
    let files = emit_metrics(dir.path(), "run", &out.metrics, &out.summary).unwrap();
    let back = read_csv(&files.csv).unwrap();
    assert_eq!(back.len(), out.metrics.len());
    for (a, b) in out.metrics.iter().zip(&back) {
        for (x, y) in [
            (a.mean_accuracy, b.mean_accuracy),
            (a.xi, b.xi),
            (a.total_energy_j, b.total_energy_j),
            (a.max_delay_s, b.max_delay_s),
            (a.disagreement, b.disagreement),
            (a.reward, b.reward),
        ] {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!(a.median_h.is_nan() && b.median_h.is_nan() || (a.median_h - b.median_h).abs() <= 1e-12);
        assert_eq!(a.device_accuracy, b.device_accuracy);
    }
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(files.summary).unwrap()).unwrap();
    assert_eq!(summary, out.summary);
}

#[test]
fn invalid_config_is_rejected_with_field_name() {
    let cfg = SimConfig {
        radius_m: -1.0,
        ..SimConfig::default()
    };
    match run_experiment(&cfg, None) {
        Err(Error::Config(msg)) => assert!(msg.contains("radius_m"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn gnn_needs_a_checkpoint() {
    let cfg = SimConfig {
        policy: PolicyKind::Gnn,
        ..small(0)
    };
    assert!(matches!(run_experiment(&cfg, None), Err(Error::Config(_))));
}

#[test]
fn trained_policy_drives_a_run() {
    let mut cfg = small(9);
    cfg.rounds = 3;
    cfg.policy_dims.v1 = 4;
    cfg.policy_dims.v2 = 4;
    let report = train_policy(&cfg, 2, None).unwrap();
    assert_eq!(report.episode_rewards.len(), 2);
    assert!(report.checkpoint.actor.is_finite() && report.checkpoint.critic.is_finite());
    let again = train_policy(&cfg, 2, None).unwrap();
    assert_eq!(encode(&report.checkpoint), encode(&again.checkpoint));

    cfg.policy = PolicyKind::Gnn;
    let out = run_experiment(&cfg, Some(&report.checkpoint)).unwrap();
    assert_eq!(out.metrics.len(), 3);
    for m in &out.metrics {
        assert!((0.0..=1.0).contains(&m.xi));
    }
}

#[test]
fn byzantine_devices_never_aggregate() {
    let mut w = World::new(&small(10), None).unwrap();
    for _ in 0..4 {
        let out = w.run_round().unwrap();
        for i in 0..w.len() {
            if !w.devices[i].role.is_standard() {
                assert_eq!(out.aggregation.get(i, i), 1.0);
            }
        }
    }
}
