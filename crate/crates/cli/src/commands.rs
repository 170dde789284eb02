use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use smallgain::apps::{
    average_drift, build_consensus_error_system, build_observer_composite, clock_augment, consensus_metrics,
    observer_error_decay, observer_sandwich_check, ueiss_check, ConsensusSpec, Verdict,
};
use smallgain::certify::{
    check_coercivity, check_composite_dissipation, check_eiss_envelope, check_local_dissipation,
    check_monotone_comparison, practical_iss_offset, write_margins_csv,
};
use smallgain::gainop::default_rho;
use smallgain::netsim::{check_lipschitz, embed, integrate, strided, truncate, truncation_probe, IntegrateOptions};
use smallgain::seqspace::euclid;
use smallgain::{analyze, Analysis, Certificate, Exponent, GainSpec, InputSignal, MarginSeries, Status, Trajectory, TruncSeq};

use crate::config::{RunConfig, ScenarioConfig};
use crate::{exit, CliError, CommandOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Simulate,
    Consensus,
    Observer,
    TimeVarying,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Simulate => "simulate",
            Command::Consensus => "consensus",
            Command::Observer => "observer",
            Command::TimeVarying => "timevarying",
        }
    }
}

pub fn run(cmd: Command, cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let mut out = match cmd {
        Command::Analyze => cmd_analyze(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Consensus => cmd_consensus(cfg),
        Command::Observer => cmd_observer(cfg),
        Command::TimeVarying => cmd_timevarying(cfg),
    }?;
    if let Value::Object(map) = &mut out.report {
        map.insert("command".into(), Value::from(cmd.name()));
        map.insert("exit_code".into(), Value::from(out.exit));
    }
    Ok(out)
}

fn status_exit(s: Status) -> i32 {
    match s {
        Status::Certified => exit::PASS,
        Status::Refuted => exit::FAIL,
        Status::Inconclusive => exit::INCONCLUSIVE,
    }
}

fn analyse(gain: &GainSpec, p: Exponent, q: Exponent, run: &RunConfig) -> Result<Analysis, CliError> {
    let rho = run.rho.unwrap_or_else(|| default_rho(gain));
    Ok(analyze(gain, p, q, &run.schedule, run.bracket_tol, rho)?)
}

fn analysis_summary(an: &Analysis) -> Value {
    let cert = an.certificate.as_ref().map(|c| {
        json!({
            "lambda_inf": c.lambda_inf,
            "overshoot": c.overshoot,
            "decay": c.decay,
            "mu_lo": c.mu_lo,
            "mu_hi": c.mu_hi,
            "mu_prefix": c.mu.prefix,
            "mu_tail": c.mu.tail,
            "input_gain": c.input_gain,
            "coercivity": [c.coercivity.0, c.coercivity.1],
            "p": c.p.get(),
            "q": c.q.get(),
            "null_blocks": c.null_blocks,
        })
    });
    let weights = an.mu.as_ref().map(|m| {
        let worst = m.margins.iter().copied().filter(|v| v.is_finite()).fold(m.tail_margin, f64::min);
        json!({
            "lambda_target": m.lambda_target,
            "rho": m.rho,
            "s": m.s,
            "terms": m.terms,
            "checked": m.checked,
            "worst_margin": worst,
            "tail_margin": m.tail_margin,
        })
    });
    json!({
        "status": an.status,
        "reason": an.reason,
        "r_hat": an.bracket.r_hat(),
        "bracket": {
            "lower": an.bracket.lower,
            "tail_lower": an.bracket.tail_lower,
            "upper": an.bracket.upper,
            "width": an.bracket.width(),
            "converged": an.bracket.converged,
            "truncations": an.bracket.truncations,
        },
        "gamma_norm_11": an.gamma_norm,
        "weights": weights,
        "certificate": cert,
    })
}

/// `(M, a)` from the config when given, otherwise from the certificate.
fn envelope_constants(cfg: &ScenarioConfig, cert: Option<&Certificate>) -> Option<(f64, f64, &'static str)> {
    cfg.envelope
        .map(|e| (e.overshoot, e.decay, "config"))
        .or_else(|| cert.map(|c| (c.overshoot, c.decay, "certificate")))
}

fn iss_gain(cert: Option<&Certificate>) -> impl Fn(f64) -> f64 + '_ {
    move |r| cert.map_or(0.0, |c| c.iss_gain(r))
}

fn margins_csv(series: &[&MarginSeries], stride: usize) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_margins_csv(&mut buf, series, stride)?;
    Ok(buf)
}

fn trajectory_artifacts(traj: &Trajectory, stride: usize) -> Result<Vec<(String, Vec<u8>)>, CliError> {
    let mut csv = Vec::new();
    traj.write_csv(&mut csv, stride)?;
    let mut bin = Vec::new();
    traj.write_binary(&mut bin)?;
    Ok(vec![("trajectory.csv".into(), csv), ("trajectory.bin".into(), bin)])
}

fn diagnostics(traj: &Trajectory) -> Value {
    let d = &traj.diagnostics;
    json!({
        "steps": d.steps,
        "final_time": traj.times.last(),
        "max_defect": d.max_defect,
        "defect_warnings": d.defect_warnings.len(),
        "overflow": d.overflow,
    })
}

fn cmd_analyze(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let run = &cfg.run;
    let (gain, p, q, source) = if let Some(g) = &cfg.gain {
        (g.clone(), Exponent::new(run.p)?, Exponent::new(run.q)?, "gain")
    } else if let Some(c) = &cfg.consensus {
        let sys = build_consensus_error_system(&c.spec)?;
        (sys.network.gain, sys.network.p, sys.network.q, "consensus")
    } else if let Some(o) = &cfg.observer {
        let net = build_observer_composite(&o.spec)?;
        (net.gain, net.p, net.q, "observer")
    } else if let Some(net) = &cfg.network {
        match &cfg.timevarying {
            Some(tv) => {
                let aug = clock_augment(net, tv.lambda0)?;
                (aug.augmented.gain, aug.augmented.p, aug.augmented.q, "clock_augmented")
            }
            None => (net.gain.clone(), net.p, net.q, "network"),
        }
    } else {
        return Err(CliError::Config("nothing to analyse: give [gain], [network], [consensus] or [observer]".into()));
    };
    let an = analyse(&gain, p, q, run)?;
    let report = json!({ "source": source, "analysis": analysis_summary(&an) });
    Ok(CommandOutput { exit: status_exit(an.status), report, artifacts: vec![] })
}

fn default_blocks(n: usize) -> Vec<usize> {
    let mut v = vec![0, 1.min(n - 1), n / 2, n - 1];
    v.sort_unstable();
    v.dedup();
    v
}

fn cmd_simulate(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let net = cfg.network()?;
    let run = &cfg.run;
    let n = run.blocks;
    let an = analyse(&net.gain, net.p, net.q, run)?;
    let cert = an.certificate.as_ref();
    let sys = truncate(net, n)?;
    let x0 = cfg.initial.build(&net.dims(n), net.p, run.seed)?;
    let traj = integrate(&sys, &embed(net, &x0, n)?, &cfg.input, 0.0, run.horizon, run.dt, net.p, IntegrateOptions::default())?;

    let constants = envelope_constants(cfg, cert);
    let gamma = iss_gain(cert);
    let gain_known = cert.is_some() || cfg.input.is_zero();
    let mut gates: Vec<bool> = vec![!traj.diagnostics.overflow];
    let mut series: Vec<MarginSeries> = Vec::new();

    let envelope = match constants {
        Some((m, a, _)) if gain_known => {
            let r = check_eiss_envelope(&traj, &net.sets, m, a, &gamma, net.q, run.envelope_tol)?;
            gates.push(r.pass);
            Some(r)
        }
        _ => None,
    };
    let practical = match (constants, net.sets.bound(net.p)) {
        (Some((m, a, _)), Some(b)) if gain_known && b > 0.0 => {
            let r = practical_iss_offset(&traj, &net.sets, m, a, &gamma, net.q, run.envelope_tol)?;
            gates.push(r.pass);
            Some(r)
        }
        _ => None,
    };
    if let Some(c) = cert {
        series.push(check_composite_dissipation(c, net, &traj, run.dissipation_tol)?);
        series.push(check_coercivity(c, net, &traj, run.envelope_tol)?);
        if cfg.input.is_zero() {
            let tol = run.dissipation_tol.unwrap_or(run.envelope_tol);
            series.push(check_monotone_comparison(c, net, &traj, tol)?);
        }
    }
    let blocks = run.check_blocks.clone().unwrap_or_else(|| default_blocks(n));
    for &i in blocks.iter().filter(|&&i| i < n) {
        series.push(check_local_dissipation(net, &net.gain, &traj, i, run.dissipation_tol)?);
    }
    gates.extend(series.iter().map(|s| s.pass));

    let mut lipschitz = Vec::new();
    for &i in blocks.iter().filter(|&&i| net.subsystem(i).lipschitz.is_some()) {
        let r = check_lipschitz(net, i, run.lipschitz_radius, run.lipschitz_samples, run.seed)?;
        gates.push(r.pass);
        lipschitz.push(r);
    }
    let probe = match run.probe_factor {
        Some(f) => Some(truncation_probe(net, n, f, &x0, &cfg.input, run.horizon, run.dt)?),
        None => None,
    };

    let pass = gates.iter().all(|g| *g);
    let exit = match constants {
        None => status_exit(an.status),
        Some(_) if !gain_known => exit::INCONCLUSIVE,
        Some(_) => {
            if pass {
                exit::PASS
            } else {
                exit::FAIL
            }
        }
    };
    let ultimate = envelope.as_ref().map(|e| {
        json!({
            "final_distance": e.final_distance,
            "input_offset": e.input_offset,
            "margin": e.input_offset - e.final_distance,
        })
    });
    let report = json!({
        "analysis": analysis_summary(&an),
        "blocks": n,
        "dt": run.dt,
        "horizon": run.horizon,
        "input_sup_norm": cfg.input.sup_norm(&traj.input_dims, net.q)?,
        "envelope_source": constants.map(|c| c.2),
        "envelope": envelope,
        "practical": practical,
        "ultimate_bound": ultimate,
        "checks": series,
        "lipschitz": lipschitz,
        "truncation_probe": probe,
        "diagnostics": diagnostics(&traj),
        "pass": pass,
    });
    let mut artifacts = trajectory_artifacts(&traj, run.stride)?;
    let mut all: Vec<&MarginSeries> = series.iter().collect();
    all.extend(envelope.iter().map(|e| &e.envelope));
    all.extend(practical.iter().map(|e| &e.envelope));
    artifacts.push(("margins.csv".into(), margins_csv(&all, run.stride)?));
    Ok(CommandOutput { exit, report, artifacts })
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cmd_consensus(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let cc = cfg.consensus.as_ref().ok_or_else(|| CliError::Config("missing [consensus] section".into()))?;
    let run = &cfg.run;
    let agents = run.blocks;
    let sys = build_consensus_error_system(&cc.spec)?;
    let p = sys.network.p;
    let an = analyse(&sys.network.gain, p, sys.network.q, run)?;
    let constants = envelope_constants(cfg, an.certificate.as_ref());
    let opts = IntegrateOptions::default();
    let positions: Vec<f64> = sys.random_positions(agents, run.seed).iter().map(|x| cc.spread * x).collect();

    let err = integrate(&sys.truncate(agents), &sys.to_error_coordinates(&positions), &InputSignal::Zero, 0.0, run.horizon, run.dt, p, opts)?;
    let orig = integrate(&sys.original(agents), &positions, &InputSignal::Zero, 0.0, run.horizon, run.dt, p, opts)?;
    let coordinate_gap = (0..err.len().min(orig.len()))
        .map(|k| max_abs_gap(&sys.to_error_coordinates(orig.state(k)), err.state(k)))
        .fold(0.0, f64::max);

    // conservation of the average for the uncoupled-drift variant f = 0
    let still = ConsensusSpec { agent: vec![], gains: Some(sys.network.gain.clone()), ..cc.spec.clone() };
    let still_sys = build_consensus_error_system(&still)?;
    let still_run = integrate(&still_sys.original(agents), &positions, &InputSignal::Zero, 0.0, run.horizon, run.dt, p, opts)?;
    let drift = average_drift(&still_sys, &still_run);

    let mut series = Vec::new();
    for &i in run.check_blocks.clone().unwrap_or_else(|| default_blocks(agents + 1)).iter().filter(|&&i| i >= 1 && i <= agents) {
        series.push(check_local_dissipation(&sys.network, &sys.network.gain, &err, i, run.dissipation_tol)?);
    }

    let metrics = match constants {
        Some((m, a, _)) => Some(consensus_metrics(&err, &sys, m, a, run.envelope_tol)?),
        None => None,
    };
    let drift_ok = drift < cc.drift_tol;
    let coords_ok = coordinate_gap < cc.coordinate_tol;
    let decays = metrics.as_ref().map_or(false, |r| r.fitted.map_or(false, |f| f.a > 0.0));
    let pass = metrics.as_ref().map_or(false, |r| r.pass)
        && decays
        && drift_ok
        && coords_ok
        && series.iter().all(|s| s.pass)
        && !err.diagnostics.overflow;
    let exit = match constants {
        None => status_exit(an.status),
        Some(_) if pass => exit::PASS,
        Some(_) => exit::FAIL,
    };

    let n = cc.spec.dim;
    let modes = cc.modes.min(agents);
    let mut csv = String::from("t,e_l1,mode,mode_err\n");
    for k in strided(err.len(), run.stride) {
        let s = err.state(k);
        let e_l1: f64 = s[n..].chunks(n).map(euclid).sum();
        for i in 1..=modes {
            let dev = euclid(&s[i * n..(i + 1) * n]) / cc.spec.alpha.at(i);
            csv.push_str(&format!("{},{},{},{}\n", err.times[k], e_l1, i, dev));
        }
    }
    let report = json!({
        "analysis": analysis_summary(&an),
        "agents": agents,
        "dt": run.dt,
        "horizon": run.horizon,
        "envelope_source": constants.map(|c| c.2),
        "metrics": metrics,
        "average_drift": { "value": drift, "tolerance": cc.drift_tol, "pass": drift_ok },
        "coordinate_agreement": { "value": coordinate_gap, "tolerance": cc.coordinate_tol, "pass": coords_ok },
        "checks": series,
        "diagnostics": diagnostics(&err),
        "pass": pass,
    });
    let mut all: Vec<&MarginSeries> = series.iter().collect();
    all.extend(metrics.iter().map(|m| &m.weighted));
    let artifacts = vec![
        ("consensus.csv".into(), csv.into_bytes()),
        ("margins.csv".into(), margins_csv(&all, run.stride)?),
    ];
    Ok(CommandOutput { exit, report, artifacts })
}

fn cmd_observer(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let oc = cfg.observer.as_ref().ok_or_else(|| CliError::Config("missing [observer] section".into()))?;
    let run = &cfg.run;
    let n = run.blocks;
    let net = build_observer_composite(&oc.spec)?;
    let an = analyse(&net.gain, net.p, net.q, run)?;
    let sandwich = observer_sandwich_check(&oc.spec, oc.sandwich_samples, run.seed)?;
    let sandwich_ok = sandwich >= -1e-12;
    // a certificate built on wrong coercivity constants is not used
    let cert = an.certificate.as_ref().filter(|_| sandwich_ok);

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let dim = oc.spec.dim;
    let mut x0 = Vec::with_capacity(2 * dim * n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-oc.spread..=oc.spread)).collect();
        let xh: Vec<f64> = if oc.exact_start { x.clone() } else { (0..dim).map(|_| rng.gen_range(-oc.spread..=oc.spread)).collect() };
        x0.extend(x);
        x0.extend(xh);
    }
    let traj = integrate(&truncate(&net, n)?, &x0, &cfg.input, 0.0, run.horizon, run.dt, net.p, IntegrateOptions::default())?;
    let rep = observer_error_decay(&traj, &oc.spec, cert, run.envelope_tol)?;
    let exit = match rep.verdict {
        Verdict::Yes => exit::PASS,
        Verdict::No => exit::FAIL,
        Verdict::Inconclusive => exit::INCONCLUSIVE,
    };
    let mut csv = String::from("t,error_norm\n");
    for k in strided(traj.len(), run.stride) {
        csv.push_str(&format!("{},{}\n", traj.times[k], rep.error_norm[k]));
    }
    let report = json!({
        "analysis": analysis_summary(&an),
        "blocks": n,
        "dt": run.dt,
        "horizon": run.horizon,
        "sandwich": { "worst_relative_margin": sandwich, "pass": sandwich_ok },
        "observer": rep,
        "verdict_line": rep.verdict_line(),
        "diagnostics": diagnostics(&traj),
    });
    let mut artifacts = trajectory_artifacts(&traj, run.stride)?;
    artifacts.push(("observer.csv".into(), csv.into_bytes()));
    artifacts.push(("margins.csv".into(), margins_csv(&[&rep.envelope], run.stride)?));
    Ok(CommandOutput { exit, report, artifacts })
}

fn cmd_timevarying(cfg: &ScenarioConfig) -> Result<CommandOutput, CliError> {
    let tv = cfg.timevarying.as_ref().ok_or_else(|| CliError::Config("missing [timevarying] section".into()))?;
    let net = cfg.network()?;
    let run = &cfg.run;
    let n = run.blocks;
    let aug = clock_augment(net, tv.lambda0)?;
    let an = analyse(&aug.augmented.gain, aug.augmented.p, aug.augmented.q, run)?;
    let cert = an.certificate.as_ref();
    let constants = envelope_constants(cfg, cert);

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let dims = net.dims(n);
    let z0: Vec<TruncSeq> = (0..tv.z0_count)
        .map(|_| {
            let blocks = dims.iter().map(|&d| (0..d).map(|_| rng.gen_range(-tv.spread..=tv.spread)).collect()).collect();
            TruncSeq::from_blocks(blocks, net.p)
        })
        .collect();

    let (report, exit, artifacts) = match constants {
        Some((m, a, source)) if cert.is_some() || cfg.input.is_zero() => {
            let gamma = iss_gain(cert);
            let rep = ueiss_check(&aug, m, a, &gamma, &tv.t0_samples, &z0, &cfg.input, n, run.horizon, run.dt, run.envelope_tol)?;
            let clock_error = rep.runs.iter().map(|r| r.clock_error).fold(0.0, f64::max);
            let runs: Vec<Value> = rep
                .runs
                .iter()
                .map(|r| {
                    json!({
                        "t0": r.t0,
                        "sample": r.sample,
                        "envelope": r.envelope.envelope,
                        "initial_distance": r.envelope.initial_distance,
                        "final_distance": r.envelope.final_distance,
                        "fitted": r.fitted,
                        "clock_error": r.clock_error,
                        "overflow": r.overflow,
                    })
                })
                .collect();
            let report = json!({
                "envelope_source": source,
                "overshoot": rep.overshoot,
                "decay": rep.decay,
                "empirical_decay": rep.empirical_decay,
                "empirical_overshoot": rep.empirical_overshoot,
                "clock_error": clock_error,
                "runs": runs,
                "pass": rep.pass,
            });
            let mut named: Vec<MarginSeries> = Vec::new();
            for r in &rep.runs {
                let mut s = r.envelope.envelope.clone();
                s.check = format!("eiss_envelope[t0={},sample={}]", r.t0, r.sample);
                named.push(s);
            }
            let refs: Vec<&MarginSeries> = named.iter().collect();
            let csv = margins_csv(&refs, run.stride)?;
            (report, if rep.pass { exit::PASS } else { exit::FAIL }, vec![("margins.csv".to_string(), csv)])
        }
        Some(_) => (json!({ "pass": Value::Null }), exit::INCONCLUSIVE, vec![]),
        None => (json!({ "pass": Value::Null }), status_exit(an.status), vec![]),
    };
    let mut report = report;
    if let Value::Object(map) = &mut report {
        map.insert("analysis".into(), analysis_summary(&an));
        map.insert("blocks".into(), Value::from(n));
        map.insert("t0_samples".into(), json!(tv.t0_samples));
        map.insert("lambda0".into(), Value::from(tv.lambda0));
    }
    Ok(CommandOutput { exit, report, artifacts })
}
