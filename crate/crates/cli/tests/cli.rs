use std::path::Path;
use std::process::Command as Process;

use dsgd_lab::commands::{compare_claims, sweep_rows, Verdict, MAX_SWEEP_CELLS};
use dsgd_lab::config::{ExperimentConfig, NoiseVariant, ObjectiveKind, TopologyKind};
use dsgd_lab::{execute, resolve_config, run_invocation, CliError, Command, Invocation};
use proptest::prelude::*;

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn pair_config(dir: &Path) -> ExperimentConfig {
    let edges = dir.join("pair.txt");
    std::fs::write(&edges, "0 1 1\n").unwrap();
    let text = format!(
        "topology.kind = edges\ntopology.edges = {}\ntopology.m = 2\ntopology.t = 0.25\n\
         objective.d = 1\nobjective.spread = 1\nobjective.eig_min = 1\nobjective.eig_max = 1\n\
         noise.variant = none\nrun.algorithm = dgd\nrun.gamma = 0.1\noutput.dir = {}\n",
        edges.display(),
        dir.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn small_quadratic(dir: &Path) -> ExperimentConfig {
    let mut c = dsgd_lab::preset("quad-ring").unwrap();
    c.run.iterations = 3000;
    c.run.replicates = 3;
    c.run.burn_in = Some(500);
    c.output.dir = dir.to_path_buf();
    c
}

#[test]
fn graph_info_ring_and_full() {
    let dir = tempfile::tempdir().unwrap();
    let inv = Invocation {
        topology: Some("ring".into()),
        m: Some(4),
        t: Some(0.25),
        out: Some(dir.path().to_path_buf()),
        ..Invocation::default()
    };
    let out = run_invocation(Command::GraphInfo, &inv);
    assert_eq!(out.code, 0);
    let csv = read(&dir.path().join("graph_info.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "m,lambda2,lambda_min,rho,big_lambda,gap");
    let vals: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((vals[1] - 0.5).abs() < 1e-12);
    assert!((vals[4] - 2.0).abs() < 1e-12);

    let full = Invocation {
        topology: Some("full".into()),
        m: Some(8),
        out: Some(dir.path().to_path_buf()),
        ..Invocation::default()
    };
    assert_eq!(run_invocation(Command::GraphInfo, &full).code, 0);
    let csv = read(&dir.path().join("graph_info.csv"));
    let big_lambda: f64 = csv.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(big_lambda, 0.0);
}

#[test]
fn disconnected_graph_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("dis.txt");
    std::fs::write(&edges, "0 1 1\n2 3 1\n").unwrap();
    let inv = Invocation {
        sets: vec!["topology.kind=edges".into(), format!("topology.edges={}", edges.display())],
        m: Some(4),
        t: Some(0.3),
        out: Some(dir.path().to_path_buf()),
        ..Invocation::default()
    };
    let out = run_invocation(Command::GraphInfo, &inv);
    assert_eq!(out.code, 2);
    assert!(out.lines[0].contains("λ₂ = 1"), "{:?}", out.lines);
}

#[test]
fn config_errors_exit_one() {
    let bad_key = Invocation {
        sets: vec!["run.nonsense=1".into()],
        ..Invocation::default()
    };
    assert_eq!(run_invocation(Command::Predict, &bad_key).code, 1);
    let missing = Invocation {
        config: Some("/nonexistent/config.txt".into()),
        ..Invocation::default()
    };
    assert_eq!(run_invocation(Command::Simulate, &missing).code, 1);
    let unknown_preset = Invocation {
        preset: Some("nope".into()),
        ..Invocation::default()
    };
    assert_eq!(run_invocation(Command::Simulate, &unknown_preset).code, 1);
}

#[test]
fn predict_two_client_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pair_config(dir.path());
    let out = execute(Command::Predict, &cfg).unwrap();
    assert_eq!(out.code, 0);
    let csv = read(&dir.path().join("predict.csv"));
    let get = |name: &str| -> f64 {
        csv.lines()
            .find_map(|l| l.strip_prefix(&format!("{name},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((get("theta_det_pred[0]") - 1.0 / 11.0).abs() < 1e-12);
    assert!((get("theta_det_pred[1]") + 1.0 / 11.0).abs() < 1e-12);
    assert!((get("det_bias_bound") - 0.2 * 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn predict_above_step_range_names_condition() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pair_config(dir.path());
    cfg.run.gamma = vec![0.9];
    let out = execute(Command::Predict, &cfg).unwrap();
    assert_eq!(out.code, 2);
    assert!(out.lines.iter().any(|l| l.contains("γ < 2/((1+L/μ)LΛ)")));
}

#[test]
fn predict_fully_connected_has_no_bias() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_quadratic(dir.path());
    cfg.topology.kind = TopologyKind::Full;
    execute(Command::Predict, &cfg).unwrap();
    let csv = read(&dir.path().join("predict.csv"));
    for key in ["Lambda", "theta_det_dist", "det_bias_bound", "rr_bias_bound", "det_residual_bound"] {
        let line = csv.lines().find(|l| l.starts_with(&format!("{key},"))).unwrap();
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{key}");
    }
}

#[test]
fn compare_order_claims_on_two_client_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pair_config(dir.path());
    cfg.run.gamma = vec![0.02, 0.01, 0.005, 0.0025];
    let claims = compare_claims(&cfg).unwrap();
    let find = |id: &str| claims.iter().find(|c| c.id == id).unwrap();
    let b = find("BIAS_ORDER1");
    assert_eq!(b.verdict, Verdict::Pass);
    assert!((0.95..=1.05).contains(&b.observed));
    let rr = find("RR_ORDER2");
    assert_eq!(rr.verdict, Verdict::Pass);
    assert!((1.8..=2.2).contains(&rr.observed));
    assert!(claims.iter().filter(|c| c.id == "DET_BIAS_BOUND").all(|c| c.verdict == Verdict::Pass));
}

#[test]
fn compare_quadratic_ring_preset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_quadratic(dir.path());
    let out = execute(Command::Compare, &cfg).unwrap();
    assert_eq!(out.code, 0, "{:?}", out.lines);
    let csv = read(&dir.path().join("compare.csv"));
    assert!(csv.starts_with("claim,gamma,predicted,observed,tolerance,status,hard\n"));
    assert!(csv.lines().any(|l| l.starts_with("DET_BIAS_BOUND,") && l.contains(",pass,")));
}

#[test]
fn simulate_zero_horizon_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_quadratic(dir.path());
    cfg.run.iterations = 0;
    cfg.run.burn_in = None;
    execute(Command::Simulate, &cfg).unwrap();
    assert_eq!(read(&dir.path().join("aggregate.csv")), "t,mean,std\n");
    assert_eq!(
        read(&dir.path().join("trace_rep000.csv")),
        "t,replicate,dist_opt,dist_det,consensus_err,disagreement_norm\n"
    );
}

#[test]
fn simulate_writes_replicate_traces_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_quadratic(dir.path());
    let out = execute(Command::Simulate, &cfg).unwrap();
    assert_eq!(out.code, 0);
    for r in 0..3 {
        assert!(dir.path().join(format!("trace_rep{r:03}.csv")).exists());
    }
    let agg = read(&dir.path().join("aggregate.csv"));
    assert_eq!(agg.lines().count(), 1 + 3000 / 10 + 1);
    let moments = read(&dir.path().join("moments.csv"));
    assert!(moments.starts_with("k,l,i,j,value,stderr\n"));
    let saved = ExperimentConfig::parse(&read(&dir.path().join("config.txt"))).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn rr_simulation_approaches_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pair_config(dir.path());
    cfg.run.algorithm = dsgd_core::Algorithm::RrDgd;
    cfg.run.iterations = 2000;
    cfg.run.replicates = 1;
    cfg.run.record_every = 2000;
    execute(Command::Simulate, &cfg).unwrap();
    let trace = read(&dir.path().join("trace_rep000.csv"));
    let last = trace.lines().last().unwrap();
    let dist_opt: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    // |2θ(γ/2) − θ(γ)| per client with θ(γ) = cγ/(k + cγ), c = k = 0.5
    let theta = |g: f64| 0.5 * g / (0.5 + 0.5 * g);
    let expected = 2f64.sqrt() * (2.0 * theta(0.05) - theta(0.1)).abs();
    assert!((dist_opt - expected).abs() < 1e-9, "{dist_opt} vs {expected}");
}

#[test]
fn sweep_budget_and_empty_grid() {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.m = (1..=101).collect();
    cfg.sweep.topology = vec![TopologyKind::Full, TopologyKind::Ring];
    assert!(matches!(
        sweep_rows(&cfg),
        Err(CliError::BudgetExceeded { cells: 202, limit }) if limit == MAX_SWEEP_CELLS
    ));
    let inv = Invocation {
        sets: vec!["run.gamma=".into()],
        ..Invocation::default()
    };
    assert_eq!(run_invocation(Command::Sweep, &inv).code, 1);
}

#[test]
fn single_cell_sweep_matches_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_quadratic(dir.path());
    let rows = sweep_rows(&cfg).unwrap();
    let claims = compare_claims(&cfg).unwrap();
    let metric = |name: &str| rows.iter().find(|r| r.metric == name).unwrap();
    let claim = |id: &str| claims.iter().find(|c| c.id == id).unwrap();
    assert_eq!(metric("bias_norm").observed, claim("DET_BIAS_BOUND").observed);
    assert_eq!(metric("rr_bias_norm").observed, claim("RR_BIAS_BOUND").observed);
    assert_eq!(metric("stationary_trace").observed, claim("VARIANCE_TRACE").observed);
    assert_eq!(metric("stationary_trace").predicted, claim("VARIANCE_TRACE").predicted);
}

#[test]
fn seed_override_and_flag_precedence() {
    let inv = Invocation {
        preset: Some("quad-ring".into()),
        sets: vec!["run.seed=3".into(), "topology.m=6".into()],
        m: Some(5),
        seed_override: Some("42".into()),
        ..Invocation::default()
    };
    let cfg = resolve_config(&inv).unwrap();
    assert_eq!(cfg.run.seed, 42);
    assert_eq!(cfg.topology.m, 6);
    let bad = Invocation {
        seed_override: Some("abc".into()),
        ..Invocation::default()
    };
    assert!(resolve_config(&bad).is_err());
}

#[test]
fn binary_exit_codes_and_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_dsgd-lab");
    let status = Process::new(bin)
        .args(["graph-info", "--topology", "ring", "--m", "4", "--t", "0.25", "--out"])
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let status = Process::new(bin)
        .args(["predict", "--set", "run.bogus=1"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(1));

    let run_with_seed = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let status = Process::new(bin)
            .args(["simulate", "--preset", "quad-ring", "--set", "run.iterations=200", "--set", "run.burn_in=100"])
            .arg("--out")
            .arg(&out)
            .env("DSGD_LAB_SEED", seed)
            .output()
            .unwrap()
            .status;
        assert_eq!(status.code(), Some(0));
        read(&out.join("trace_rep000.csv"))
    };
    assert_eq!(run_with_seed("7", "a"), run_with_seed("7", "b"));
    assert_ne!(run_with_seed("7", "a"), run_with_seed("8", "c"));
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (
            prop::sample::select(vec![TopologyKind::Ring, TopologyKind::Full, TopologyKind::Clusters]),
            1usize..64,
            0.01f64..1.0,
            1usize..8,
            0.001f64..1.0,
        ),
        (
            prop::sample::select(vec![ObjectiveKind::Quadratic, ObjectiveKind::Logistic]),
            1usize..5,
            -5.0f64..5.0,
            any::<bool>(),
            any::<u64>(),
        ),
        (
            prop::sample::select(vec![NoiseVariant::None, NoiseVariant::Gaussian, NoiseVariant::Minibatch]),
            0.0f64..10.0,
            prop::collection::vec(1e-6f64..1.0, 0..5),
            proptest::option::of(0u64..1000),
            any::<u64>(),
        ),
        (
            prop::collection::vec(1usize..50, 0..4),
            "[a-z_]{0,8}",
        ),
    )
        .prop_map(|(t, o, r, s)| {
            let mut c = ExperimentConfig::default();
            c.topology.kind = t.0;
            c.topology.m = t.1;
            c.topology.t = t.2;
            c.topology.clusters = t.3;
            c.topology.bridge_weight = t.4;
            c.objective.kind = o.0;
            c.objective.d = o.1;
            c.objective.spread = o.2;
            c.objective.identical = o.3;
            c.objective.seed = o.4;
            c.noise.variant = r.0;
            c.noise.sigma2 = r.1;
            c.run.gamma = r.2;
            c.run.burn_in = r.3;
            c.run.seed = r.4;
            c.sweep.m = s.0;
            c.output.prefix = s.1;
            c
        })
}

proptest! {
    #[test]
    fn config_round_trip(cfg in arb_config()) {
        let text = cfg.serialize();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.serialize(), text);
    }
}
