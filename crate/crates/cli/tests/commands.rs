use std::path::PathBuf;

use smallgain_cli::{exit, run, Command, ScenarioConfig};

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    ScenarioConfig::load(&path).unwrap()
}

fn gain_config(c: f64, lambda: f64) -> ScenarioConfig {
    let band = if c > 0.0 {
        format!("[gain.gamma]\nband = [{{ offset = -1, value = {c} }}, {{ offset = 1, value = {c} }}]\n")
    } else {
        String::new()
    };
    ScenarioConfig::from_toml(&format!(
        "[run]\nschedule = [16, 32, 64, 128]\n\n[gain]\nlambda = {{ tail = {lambda} }}\ngamma_u = {{ tail = 1.0 }}\nalpha_lo = 1.0\nalpha_hi = 1.0\n{band}"
    ))
    .unwrap()
}

fn artifact<'a>(out: &'a smallgain_cli::CommandOutput, name: &str) -> &'a str {
    let bytes = &out.artifacts.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no {name}")).1;
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn analyze_tridiagonal_brackets_toeplitz_limit() {
    let out = run(Command::Analyze, &gain_config(0.2, 1.0)).unwrap();
    assert_eq!(out.exit, exit::PASS);
    let a = &out.report["analysis"];
    assert_eq!(a["status"], "certified");
    let lower = a["bracket"]["lower"].as_f64().unwrap();
    // 2c cos(pi / 129)
    let oracle = 0.4 * (std::f64::consts::PI / 129.0).cos();
    assert!((lower - oracle).abs() < 1e-9, "{lower} vs {oracle}");
    let r_hat = a["r_hat"].as_f64().unwrap();
    assert!(r_hat >= 0.4 - 1e-3 && r_hat <= 0.4 + 1e-12);
}

#[test]
fn analyze_refutes_strong_coupling() {
    let out = run(Command::Analyze, &gain_config(0.6, 1.0)).unwrap();
    assert_eq!(out.exit, exit::FAIL);
    assert_eq!(out.report["analysis"]["status"], "refuted");
    assert!(out.report["analysis"]["certificate"].is_null());
}

#[test]
fn analyze_uncoupled_keeps_full_rate() {
    let out = run(Command::Analyze, &gain_config(0.0, 2.0)).unwrap();
    assert_eq!(out.exit, exit::PASS);
    let cert = &out.report["analysis"]["certificate"];
    let rho = out.report["analysis"]["weights"]["rho"].as_f64().unwrap();
    assert_eq!(rho, 2e-3);
    assert!(cert["lambda_inf"].as_f64().unwrap() >= 2.0 - rho);
    assert_eq!(cert["overshoot"].as_f64().unwrap(), 1.0);
}

#[test]
fn simulate_from_the_target_set_stays_there() {
    let mut cfg = scenario("chain_s2.toml");
    cfg.initial = smallgain_cli::config::InitialState::Zero;
    cfg.run.blocks = 20;
    cfg.run.horizon = 1.0;
    let out = run(Command::Simulate, &cfg).unwrap();
    assert_eq!(out.exit, exit::PASS);
    assert_eq!(out.report["envelope"]["final_distance"].as_f64().unwrap(), 0.0);
    assert!(artifact(&out, "trajectory.csv").starts_with("t,block,coord,value\n"));
    assert!(artifact(&out, "margins.csv").starts_with("t,check,margin\n"));
}

#[test]
fn simulate_without_certificate_reports_analysis_status() {
    let mut cfg = scenario("chain_s2.toml");
    let net = cfg.network.as_mut().unwrap();
    net.gain.gamma = smallgain::gainop::CouplingRule::tridiagonal(1.0);
    cfg.run.blocks = 10;
    cfg.run.horizon = 0.5;
    let out = run(Command::Simulate, &cfg).unwrap();
    assert_eq!(out.exit, exit::FAIL);
    assert!(out.report["envelope"].is_null());
}

#[test]
fn consensus_csv_and_drift() {
    let mut cfg = scenario("consensus.toml");
    cfg.run.blocks = 20;
    cfg.run.horizon = 2.0;
    cfg.run.dt = 1e-2;
    let out = run(Command::Consensus, &cfg).unwrap();
    assert_eq!(out.exit, exit::PASS, "{}", out.report);
    assert!(out.report["average_drift"]["value"].as_f64().unwrap() < 1e-10);
    let csv = artifact(&out, "consensus.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,e_l1,mode,mode_err"));
    assert_eq!(lines.next().unwrap().split(',').count(), 4);
}

#[test]
fn observer_verdict_line() {
    let mut cfg = scenario("observer_s4.toml");
    cfg.run.blocks = 20;
    cfg.run.horizon = 2.0;
    let out = run(Command::Observer, &cfg).unwrap();
    assert_eq!(out.exit, exit::PASS);
    assert_eq!(out.report["verdict_line"], "robust distributed observer: yes");

    let mut open = cfg.clone();
    open.observer.as_mut().unwrap().spec.gain = smallgain::netsim::Mat::scalar(0.0);
    let out = run(Command::Observer, &open).unwrap();
    assert_eq!(out.exit, exit::FAIL);
    assert_eq!(out.report["verdict_line"], "robust distributed observer: no");
}

#[test]
fn timevarying_requires_a_time_dependent_network() {
    let mut cfg = scenario("timevarying_s3.toml");
    let net = cfg.network.as_mut().unwrap();
    net.tail.terms = vec![smallgain::netsim::Term::Linear {
        matrix: smallgain::netsim::Mat::scalar(-1.0),
        source: Default::default(),
        modulation: Default::default(),
    }];
    assert!(run(Command::TimeVarying, &cfg).is_err());
}

#[test]
fn rejects_bad_configs() {
    assert!(ScenarioConfig::from_toml("[run]\nblocks = 4\nbogus = 1\n").is_err());
    assert!(ScenarioConfig::from_toml("[run]\ndt = -1.0\n").is_err());
    assert!(ScenarioConfig::from_toml("[run]\nschedule = [32, 16]\n").is_err());
    assert!(ScenarioConfig::from_toml("[run]\np = 0.5\n").is_err());
    let empty = ScenarioConfig::from_toml("").unwrap();
    assert!(run(Command::Analyze, &empty).is_err());
    assert!(run(Command::Simulate, &empty).is_err());
}

#[test]
fn every_scenario_parses() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 7);
}
