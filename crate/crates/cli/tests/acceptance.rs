//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p smallgain-cli --test acceptance -- --nocapture`
//! to see the lines. The test fails when any criterion outside
//! `UNATTAINABLE` fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use smallgain::apps::clock_augment;
use smallgain::gainop::{compute_mu, perron_root, upper_bound_certificate, CouplingRule, GainOperator, RateRule, TailWeights};
use smallgain::netsim::{embed, integrate, truncate, IntegrateOptions};
use smallgain::seqspace::set_dist;
use smallgain::{Exponent, GainSpec, InputSignal, SetDesc, SetSpec, Trajectory, TruncSeq};
use smallgain_cli::ScenarioConfig;

/// Criteria that cannot hold as stated; see the detail line printed for them.
const UNATTAINABLE: &[usize] = &[2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn smallgain(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_smallgain")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Runs one command on a scenario with `--out` and returns the exit code, stdout and report.
fn run_scenario(cmd: &str, scenario: &str, dir: &Path, extra: &[&str]) -> (i32, String, Value) {
    let config = scenario_path(scenario);
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--fixed-clock"];
    args.extend_from_slice(extra);
    let (code, stdout) = smallgain(&args);
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap_or_else(|_| "null".into());
    (code, stdout, serde_json::from_str(&text).unwrap())
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn exp(p: f64) -> Exponent {
    Exponent::new(p).unwrap()
}

// 1 -------------------------------------------------------------------------

/// `min_{y in A} |x - y|_p` by compass search on a shrinking grid over all
/// free coordinates jointly. The objective is convex and its only kinks sit
/// at block minimisers, so the search reaches the global minimum.
fn brute_distance(x: &[Vec<f64>], sets: &[SetDesc], p: f64) -> f64 {
    let mut y: Vec<Vec<f64>> = Vec::new();
    let mut free: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (i, (xi, s)) in x.iter().zip(sets).enumerate() {
        match s {
            SetDesc::Origin => y.push(vec![0.0; xi.len()]),
            SetDesc::Point { at } => y.push(at.clone()),
            SetDesc::Box { lo, hi } => {
                y.push(lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect());
                for k in 0..xi.len() {
                    free.push((i, k, lo[k], hi[k]));
                }
            }
            _ => unreachable!(),
        }
    }
    let objective = |y: &[Vec<f64>]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    };
    let mut best = objective(&y);
    let mut h = free.iter().map(|f| f.3 - f.2).fold(0.0, f64::max);
    while h > 1e-10 {
        let mut improved = false;
        for &(i, k, lo, hi) in &free {
            for dir in [-1.0, 1.0] {
                let old = y[i][k];
                y[i][k] = (old + dir * h).clamp(lo, hi);
                let v = objective(&y);
                if v < best {
                    best = v;
                    improved = true;
                } else {
                    y[i][k] = old;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..=5);
        let p = [1.0, 2.0, 3.0][rng.gen_range(0..3)];
        let mut x = Vec::new();
        let mut sets = Vec::new();
        for _ in 0..n {
            let d = rng.gen_range(1..=3);
            x.push((0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>());
            sets.push(match rng.gen_range(0..3) {
                0 => SetDesc::Origin,
                1 => SetDesc::Point { at: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect() },
                _ => {
                    let lo: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..1.0)).collect();
                    let hi = lo.iter().map(|l| l + rng.gen_range(0.0..2.0)).collect();
                    SetDesc::Box { lo, hi }
                }
            });
        }
        let spec = SetSpec { prefix: sets.clone(), tail: SetDesc::Origin };
        let got = set_dist(&TruncSeq::from_blocks(x.clone(), exp(p)), &spec).unwrap();
        worst = worst.max((got - brute_distance(&x, &sets, p)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 10.0, format!("200 instances, worst gap {worst:.2e}, {secs:.2} s"))
}

// 2 -------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let c = 0.2;
    let spec = GainSpec {
        lambda: RateRule::constant(1.0),
        gamma: CouplingRule::tridiagonal(c),
        gamma_u: RateRule::constant(1.0),
        alpha_lo: 1.0,
        alpha_hi: 1.0,
        null_blocks: vec![],
    };
    let op = GainOperator::new(spec).unwrap();
    let mut worst = 0.0f64;
    let mut lower_64 = 0.0;
    for n in [2usize, 4, 8, 16, 32, 64] {
        let b = perron_root(&op.psi_truncation(n)).unwrap();
        let exact = 2.0 * c * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        worst = worst.max((b.lower - exact).abs());
        if n == 64 {
            lower_64 = b.lower;
        }
    }
    let certified = upper_bound_certificate(&op, &TailWeights::ones(), 2.0 * c);
    let width = 2.0 * c - lower_64;
    let limit = 1e-3 * 2.0 * c;
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && certified && width < limit && secs < 5.0;
    outcome(
        pass,
        format!(
            "lower bounds match 2c cos(pi/(N+1)) to {worst:.1e}; upper certificate s = 2c {}; \
             N = 64 width {width:.3e} vs limit {limit:.1e} (2c (1 - cos(pi/65)) exceeds the limit for every N < 70); {secs:.2} s",
            if certified { "holds" } else { "fails" }
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let gamma = 0.1;
    let spec = GainSpec {
        lambda: RateRule::constant(1.0),
        gamma: CouplingRule::tridiagonal(gamma),
        gamma_u: RateRule::constant(1.0),
        alpha_lo: 1.0,
        alpha_hi: 1.0,
        null_blocks: vec![],
    };
    let op = GainOperator::new(spec).unwrap();
    let bracket = smallgain::gainop::spectral_radius(&op, &[16, 32, 64, 128], 1e-3).unwrap();
    let rho = 1e-3;
    let mu = compute_mu(&op, bracket.r_hat(), rho).unwrap();
    // fresh evaluation of [mu^T(-Lambda + Gamma)]_j / mu_j with gamma_{i,i+-1} = 0.1
    let w = |i: isize| if i < 0 { 0.0 } else { mu.mu.at(i as usize) };
    let mut worst = f64::INFINITY;
    for j in 0..(mu.checked + 50) as isize {
        let ratio = (-w(j) + gamma * (w(j - 1) + w(j + 1))) / w(j);
        worst = worst.min(-ratio - mu.lambda_inf);
    }
    let lemma = mu.lambda_inf >= (1.0 - mu.r_hat) * 1.0 - rho;
    let reported = mu.margins.iter().all(|m| *m >= 0.0) && mu.tail_margin >= 0.0;

    let dir = tempfile::tempdir().unwrap();
    let (ok_code, _, _) = run_scenario("analyze", "chain_gain.toml", dir.path(), &[]);
    let (refuted_code, _, _) = run_scenario("analyze", "chain_refuted.toml", dir.path(), &[]);
    let pass = worst >= -1e-12 && lemma && reported && ok_code == 0 && refuted_code == 1;
    outcome(
        pass,
        format!(
            "lambda_inf {:.6} >= {:.6}, independent margins >= {worst:.1e}; exit codes {ok_code} (c = 0.1), {refuted_code} (c = 0.6)",
            mu.lambda_inf,
            (1.0 - mu.r_hat) - rho
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (code, _, r) = run_scenario("simulate", "chain_s2.toml", dir.path(), &[]);
    let secs = start.elapsed().as_secs_f64();
    let dt = f(&r["dt"]);
    let composite = r["checks"].as_array().unwrap().iter().find(|c| c["check"] == "composite_dissipation").unwrap();
    let composite_worst = f(&composite["worst"]);
    let lambda_inf = f(&r["analysis"]["certificate"]["lambda_inf"]);
    let fitted = f(&r["envelope"]["fitted"]["a"]);
    let envelope = r["envelope"]["pass"] == true;
    let pass = code == 0
        && r["blocks"] == 200
        && composite_worst >= -10.0 * dt
        && envelope
        && fitted >= lambda_inf / 2.0 - 0.05
        && secs < 30.0;
    outcome(
        pass,
        format!(
            "N = 200, composite margin >= {composite_worst:.2e} (floor {:.0e}), envelope {}, fitted a = {fitted:.3} vs lambda_inf/2 - 0.05 = {:.3}, {secs:.1} s",
            -10.0 * dt,
            if envelope { "holds" } else { "violated" },
            lambda_inf / 2.0 - 0.05
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn read_trajectory(path: &Path) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    Trajectory::read_binary(std::fs::File::open(path).unwrap()).unwrap()
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, r) = run_scenario("simulate", "chain_input.toml", dir.path(), &[]);
    let gamma = f(&r["ultimate_bound"]["input_offset"]);
    let sup_gap = f(&r["envelope"]["envelope"]["worst"]);
    let (times, dims, states) = read_trajectory(&dir.path().join("trajectory.bin"));
    let n = dims.len();
    let last = &states[(times.len() - 1) * n..];
    // -A^{-1} B u for A = tridiag(0.1, -1, 0.1), B = I, u_i = 0.5
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { -1.0 } else if i.abs_diff(j) == 1 { 0.1 } else { 0.0 });
    let steady = -a.lu().solve(&DVector::from_element(n, 0.5)).unwrap();
    let oracle_gap = last.iter().zip(steady.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let steady_norm = steady.norm();
    let pass = code == 0 && sup_gap >= -1e-2 && steady_norm <= gamma + 1e-2 && oracle_gap < 1e-6;
    outcome(
        pass,
        format!(
            "gamma(|u|) = {gamma:.4}, sup_t |x(t)| - gamma >= {:.4}, steady state |x*| = {steady_norm:.4}, terminal state vs -A^-1 B u {oracle_gap:.1e}",
            -sup_gap
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (code, _, r) = run_scenario("timevarying", "timevarying_s3.toml", dir.path(), &[]);
    let runs = r["runs"].as_array().map_or(0, |v| v.len());

    // integrating factor: z(t) = z0 exp(-2 (t - t0) + cos t - cos t0)
    let cfg = ScenarioConfig::load(&scenario_path("timevarying_s3.toml")).unwrap();
    let aug = clock_augment(cfg.network.as_ref().unwrap(), 1.0).unwrap();
    let e = std::f64::consts::E;
    let (mut oracle_gap, mut envelope_gap) = (0.0f64, f64::INFINITY);
    for &t0 in &[0.0, 1.0, std::f64::consts::FRAC_PI_2, 5.0, 7.0] {
        for z0 in [1.0, -0.3, 2.0] {
            let seq = TruncSeq::from_blocks(vec![vec![z0]], exp(2.0));
            let tr = aug.simulate(t0, &seq, &InputSignal::Zero, 1, 10.0, 1e-3).unwrap();
            for k in 0..tr.len() {
                let t = tr.times[k];
                let exact = z0 * (-2.0 * (t - t0) + t.cos() - t0.cos()).exp();
                let z = tr.state(k)[1];
                oracle_gap = oracle_gap.max((z - exact).abs());
                envelope_gap = envelope_gap.min(e * (-(t - t0)).exp() * z0.abs() - z.abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = code == 0 && runs == 15 && oracle_gap < 1e-6 && envelope_gap >= -1e-6 && secs < 5.0;
    outcome(
        pass,
        format!(
            "M = e, a = 1 over {runs} CLI runs (exit {code}); oracle gap {oracle_gap:.1e}, envelope margin >= {envelope_gap:.2e}, {secs:.2} s"
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (code, _, r) = run_scenario("consensus", "consensus.toml", dir.path(), &[]);
    let secs = start.elapsed().as_secs_f64();
    let m = &r["metrics"];
    let drift = f(&r["average_drift"]["value"]);
    let coords = f(&r["coordinate_agreement"]["value"]);
    let fitted = f(&m["fitted"]["a"]);
    let table_min = |key: &str| m[key].as_array().unwrap().iter().map(|b| f(&b["worst_margin"])).fold(f64::INFINITY, f64::min);
    let (modes, partial) = (table_min("modes"), table_min("partial_sums"));
    let pass = code == 0
        && r["agents"] == 100
        && drift < 1e-10
        && m["weighted"]["pass"] == true
        && fitted > 0.0
        && modes >= 0.0
        && partial >= 0.0
        && coords < 1e-6
        && secs < 60.0;
    outcome(
        pass,
        format!(
            "N = 100, drift {drift:.1e}, |e|_1 envelope margin {:.2e}, fitted a = {fitted:.3}, mode/partial tables >= {:.2e}/{:.2e}, coordinates {coords:.1e}, {secs:.1} s",
            f(&m["weighted"]["worst"]),
            modes,
            partial
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, r) = run_scenario("observer", "observer_s4.toml", dir.path(), &[]);
    let secs = start.elapsed().as_secs_f64();
    let (times, dims, states) = read_trajectory(&dir.path().join("trajectory.bin"));
    let n = dims.len();
    let width = 2 * n;
    // e' = M e with M = tridiag(0.2, 0.5 - 2.5, 0.2), solved through the eigendecomposition
    let mm = DMatrix::from_fn(n, n, |i, j| if i == j { -2.0 } else if i.abs_diff(j) == 1 { 0.2 } else { 0.0 });
    let eig = SymmetricEigen::new(mm);
    let err = |k: usize| DVector::from_iterator(n, states[k * width..(k + 1) * width].chunks(2).map(|c| c[0] - c[1]));
    let c0 = eig.eigenvectors.transpose() * err(0);
    let mut gap = 0.0f64;
    for k in 0..times.len() {
        let t = times[k];
        let modal = DVector::from_iterator(n, (0..n).map(|i| c0[i] * (eig.eigenvalues[i] * t).exp()));
        let exact = &eig.eigenvectors * modal;
        gap = gap.max((err(k) - exact).amax());
    }
    let identity = f(&r["observer"]["identity_error"]);
    let verdict = stdout.lines().any(|l| l == "robust distributed observer: yes");
    let pass = code == 0 && n == 100 && gap < 1e-6 && identity < 1e-12 && verdict && secs < 30.0;
    outcome(
        pass,
        format!(
            "N = 100, error vs closed form {gap:.1e}, sqrt(2) diagonal identity {identity:.1e}, verdict line {}, {secs:.1} s",
            if verdict { "yes" } else { "missing" }
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let cfg = ScenarioConfig::load(&scenario_path("chain_s2.toml")).unwrap();
    let net = cfg.network.as_ref().unwrap();
    let n = 50;
    let sys = truncate(net, n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
    let x0 = embed(net, &TruncSeq::from_blocks(x0, net.p), n).unwrap();
    let opts = IntegrateOptions { defect_every: 0, ..Default::default() };
    let terminal = |dt: f64| integrate(&sys, &x0, &InputSignal::Zero, 0.0, 1.0, dt, net.p, opts).unwrap().last_state().to_vec();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut ratios = Vec::new();
    for dt in [1e-2, 5e-3] {
        let (a, b, c) = (terminal(dt), terminal(dt / 2.0), terminal(dt / 4.0));
        ratios.push(diff(&a, &b) / diff(&b, &c));
    }
    let pass = ratios.iter().all(|r| (12.0..=20.0).contains(r));
    outcome(pass, format!("Richardson ratios {:.2} (dt = 1e-2), {:.2} (dt = 5e-3)", ratios[0], ratios[1]))
}

// 10 ------------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let runs = [
        ("analyze", "chain_gain.toml"),
        ("analyze", "chain_refuted.toml"),
        ("simulate", "chain_s2.toml"),
        ("simulate", "chain_input.toml"),
        ("timevarying", "timevarying_s3.toml"),
        ("consensus", "consensus.toml"),
        ("observer", "observer_s4.toml"),
    ];
    let mut differing = Vec::new();
    for (cmd, scenario) in runs {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_scenario(cmd, scenario, a.path(), &["--seed", "42"]);
        run_scenario(cmd, scenario, b.path(), &["--seed", "42"]);
        let ra = std::fs::read(a.path().join("report.json")).unwrap();
        let rb = std::fs::read(b.path().join("report.json")).unwrap();
        if ra != rb {
            differing.push(scenario);
        }
    }
    outcome(differing.is_empty(), format!("{} scenarios run twice, differing reports: {:?}", runs.len(), differing))
}

#[test]
fn acceptance() {
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut unexpected = Vec::new();
    for (id, check) in criteria {
        let o = check();
        println!("criterion {id}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass && !UNATTAINABLE.contains(&id) {
            unexpected.push(id);
        }
    }
    assert!(unexpected.is_empty(), "failing criteria: {unexpected:?}");
}
