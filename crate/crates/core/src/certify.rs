//! Trajectory-level checks of dissipation inequalities and eISS envelopes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gainop::{Certificate, GainSpec};
use crate::netsim::{NetworkSpec, Trajectory};
use crate::seqspace::{lp_norm, set_dist, Exponent, SetSpec, TruncSeq};

/// Default multiplier `c` in the automatic tolerance `c * max|V''| * dt`.
pub const AUTO_TOL_FACTOR: f64 = 10.0;
/// Slack on envelope and bound-table margins.
pub const DEFAULT_ENVELOPE_TOL: f64 = 1e-9;

/// Margins of one inequality along a trajectory; `margin = rhs - lhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSeries {
    pub check: String,
    #[serde(skip)]
    pub times: Vec<f64>,
    #[serde(skip)]
    pub margins: Vec<f64>,
    pub tolerance: f64,
    pub worst: f64,
    pub worst_time: f64,
    pub mean: f64,
    pub samples: usize,
    /// Samples where the forward difference disagrees with the shifted stencil.
    pub flagged: usize,
    pub pass: bool,
}

impl MarginSeries {
    pub(crate) fn new(check: impl Into<String>, times: Vec<f64>, margins: Vec<f64>, tolerance: f64, flagged: usize) -> Result<Self> {
        if let Some(k) = margins.iter().position(|m| !m.is_finite()) {
            return Err(Error::NonFinite(format!("margin at t = {}", times[k])));
        }
        let (mut worst, mut worst_time) = (f64::INFINITY, times.first().copied().unwrap_or(0.0));
        for (t, m) in times.iter().zip(&margins) {
            if *m < worst {
                worst = *m;
                worst_time = *t;
            }
        }
        if margins.is_empty() {
            worst = 0.0;
        }
        let mean = if margins.is_empty() { 0.0 } else { margins.iter().sum::<f64>() / margins.len() as f64 };
        Ok(Self {
            check: check.into(),
            samples: margins.len(),
            pass: worst >= -tolerance,
            times,
            margins,
            tolerance,
            worst,
            worst_time,
            mean,
            flagged,
        })
    }
}

/// Writes `t,check,margin` rows of every `stride`-th sample of each series.
pub fn write_margins_csv<W: Write>(w: W, series: &[&MarginSeries], stride: usize) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "check", "margin"])?;
    for s in series {
        for k in crate::netsim::strided(s.margins.len(), stride) {
            let (t, m) = (s.times[k], s.margins[k]);
            wr.write_record([format!("{t}"), s.check.clone(), format!("{m}")])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// `V_i(x_i)` for block `i`.
pub fn local_v(net: &NetworkSpec, i: usize, block: &[f64]) -> Result<f64> {
    net.subsystem(i).lyapunov.eval(block, net.sets.get(i))
}

/// `V(x) = sum_i mu_i V_i(x_i)` over the stored blocks.
pub fn composite_v(cert: &Certificate, net: &NetworkSpec, x: &TruncSeq) -> Result<f64> {
    let mut v = 0.0;
    for (i, b) in x.blocks().iter().enumerate() {
        let mu = cert.mu(i);
        if mu > 0.0 {
            v += mu * local_v(net, i, b)?;
        }
    }
    Ok(v)
}

fn local_series(net: &NetworkSpec, traj: &Trajectory, i: usize) -> Result<Vec<f64>> {
    let offsets = traj.block_offsets();
    (0..traj.len()).map(|k| local_v(net, i, traj.block(k, i, &offsets))).collect()
}

fn composite_series(cert: &Certificate, net: &NetworkSpec, traj: &Trajectory) -> Result<Vec<f64>> {
    let offsets = traj.block_offsets();
    let blocks = traj.dims.len();
    (0..traj.len())
        .map(|k| {
            let mut v = 0.0;
            for i in 0..blocks {
                let mu = cert.mu(i);
                if mu > 0.0 {
                    v += mu * local_v(net, i, traj.block(k, i, &offsets))?;
                }
            }
            Ok(v)
        })
        .collect()
}

/// Forward-difference derivative estimates, their consistency flags and the
/// automatic tolerance derived from second differences.
struct Dini {
    rates: Vec<f64>,
    flagged: usize,
    auto_tol: f64,
}

fn dini(v: &[f64], h: f64) -> Dini {
    let n = v.len().saturating_sub(1);
    let rates: Vec<f64> = (0..n).map(|k| (v[k + 1] - v[k]) / h).collect();
    let second = |k: usize| (v[k + 2] - 2.0 * v[k + 1] + v[k]) / (h * h);
    let max_curv = (0..v.len().saturating_sub(2)).map(|k| second(k).abs()).fold(0.0, f64::max);
    let mut flagged = 0;
    for k in 0..v.len().saturating_sub(3) {
        // h and 2h forward differences differ by V'' h / 2; compare with V''
        // taken from the stencil one step later.
        let gap = ((v[k + 2] - v[k]) / (2.0 * h) - rates[k]).abs();
        let predicted = second(k + 1).abs() * h / 2.0;
        if gap > 10.0 * predicted + 1e-12 * (1.0 + v[k].abs()) {
            flagged += 1;
        }
    }
    Dini { rates, flagged, auto_tol: AUTO_TOL_FACTOR * max_curv * h }
}

fn resolve_tol(tol: Option<f64>, auto: f64) -> f64 {
    tol.unwrap_or(auto)
}

/// `D+ V_i <= -lambda_i V_i + sum_j gamma_ij V_j + gamma_iu |u_i|^q` along the grid.
/// `tol = None` selects `10 * max|V_i''| * dt`.
pub fn check_local_dissipation(
    net: &NetworkSpec,
    gain: &GainSpec,
    traj: &Trajectory,
    i: usize,
    tol: Option<f64>,
) -> Result<MarginSeries> {
    if i >= traj.dims.len() {
        return Err(Error::Precondition(format!("block {i} outside the truncation")));
    }
    let op = crate::gainop::GainOperator::new(gain.clone())?;
    let vi = local_series(net, traj, i)?;
    let row: Vec<(usize, f64)> = op.gamma_row(i).into_iter().filter(|(j, _)| *j < traj.dims.len()).collect();
    let neighbours: Vec<(f64, Vec<f64>)> =
        row.iter().map(|&(j, g)| local_series(net, traj, j).map(|s| (g, s))).collect::<Result<_>>()?;
    let lambda = op.lambda(i);
    let gu = gain.gamma_u.at(i);
    let q = net.q.get();
    let uo: usize = traj.input_dims[..i].iter().sum();
    let m = traj.input_dims[i];
    let d = dini(&vi, traj.dt);
    let n = d.rates.len();
    let mut margins = Vec::with_capacity(n);
    for k in 0..n {
        let mut rhs = -lambda * vi[k];
        for (g, s) in &neighbours {
            rhs += g * s[k];
        }
        if m > 0 && gu > 0.0 {
            let u = traj.input_at(k)?;
            rhs += gu * crate::seqspace::euclid(&u[uo..uo + m]).powf(q);
        }
        margins.push(rhs - d.rates[k]);
    }
    MarginSeries::new(format!("local_dissipation[{i}]"), traj.times[..n].to_vec(), margins, resolve_tol(tol, d.auto_tol), d.flagged)
}

/// `D+ V <= -lambda_inf V + mu_hi gamma_u_hi |u|_{q,inf}^q` for the composite function.
pub fn check_composite_dissipation(
    cert: &Certificate,
    net: &NetworkSpec,
    traj: &Trajectory,
    tol: Option<f64>,
) -> Result<MarginSeries> {
    let v = composite_series(cert, net, traj)?;
    let ubar = traj.input.sup_norm(&traj.input_dims, net.q)?;
    let forcing = cert.input_gain * ubar.powf(net.q.get());
    let d = dini(&v, traj.dt);
    let margins: Vec<f64> = (0..d.rates.len()).map(|k| -cert.lambda_inf * v[k] + forcing - d.rates[k]).collect();
    let n = margins.len();
    MarginSeries::new("composite_dissipation", traj.times[..n].to_vec(), margins, resolve_tol(tol, d.auto_tol), d.flagged)
}

/// For `u = 0`: `V(phi(t_k)) e^{lambda_inf (t_k - t_0)}` never increases by more than `tol` (relative to `V(x0)`).
pub fn check_monotone_comparison(cert: &Certificate, net: &NetworkSpec, traj: &Trajectory, tol: f64) -> Result<MarginSeries> {
    let v = composite_series(cert, net, traj)?;
    let t0 = traj.times[0];
    let scaled: Vec<f64> = v.iter().zip(&traj.times).map(|(v, t)| v * (cert.lambda_inf * (t - t0)).exp()).collect();
    let scale = v[0].max(f64::MIN_POSITIVE);
    let margins: Vec<f64> = scaled.windows(2).map(|w| (w[0] - w[1]) / scale).collect();
    let n = margins.len();
    MarginSeries::new("monotone_comparison", traj.times[1..=n].to_vec(), margins, tol, 0)
}

/// `mu_lo alpha_lo |x|_A^p <= V(x) <= mu_hi alpha_hi |x|_A^p` at every sample, as relative margins.
pub fn check_coercivity(cert: &Certificate, net: &NetworkSpec, traj: &Trajectory, tol: f64) -> Result<MarginSeries> {
    let v = composite_series(cert, net, traj)?;
    let p = net.p.get();
    let mut margins = Vec::with_capacity(v.len());
    for (k, vk) in v.iter().enumerate() {
        let d = set_dist(&traj.seq(k), &net.sets)?.powf(p);
        let (lo, hi) = (cert.coercivity.0 * d, cert.coercivity.1 * d);
        let scale = hi.max(f64::MIN_POSITIVE);
        margins.push(((vk - lo).min(hi - vk)) / scale);
    }
    MarginSeries::new("coercivity", traj.times.clone(), margins, tol, 0)
}

/// Least-squares fit of `log v = log(M v0) - a (t - t_0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Overshoot relative to the first sample of the window.
    pub m: f64,
    pub a: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub samples: usize,
}

/// Fits an exponential to the samples with `t` inside `window` (all samples when `None`).
pub fn fit_decay(times: &[f64], values: &[f64], window: Option<(f64, f64)>) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| window.map_or(true, |(a, b)| **t >= a && **t <= b))
        .map(|(t, v)| (*t, *v))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Precondition("decay fit needs at least two samples".into()));
    }
    if let Some((t, v)) = pts.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::Precondition(format!("nonpositive sample {v} at t = {t}")));
    }
    let t0 = pts[0].0;
    let v0 = pts[0].1;
    let n = pts.len() as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for &(t, v) in &pts {
        let (t, y) = (t - t0, v.ln());
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let denom = n * stt - st * st;
    let slope = if denom > 0.0 { (n * sty - st * sy) / denom } else { 0.0 };
    let intercept = (sy - slope * st) / n;
    let residual = (pts.iter().map(|&(t, v)| (v.ln() - intercept - slope * (t - t0)).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DecayFit { m: intercept.exp() / v0, a: -slope, residual, samples: pts.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub envelope: MarginSeries,
    pub overshoot: f64,
    pub decay: f64,
    /// `gamma(|u|_{q,inf})`
    pub input_offset: f64,
    /// `(1 + M e^{-at}) ||A||` at `t = t_0`, zero for the plain envelope.
    pub set_offset: f64,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Fit of the distance series, present when it stays positive.
    pub fitted: Option<DecayFit>,
    pub pass: bool,
    #[serde(skip)]
    pub distance: Vec<f64>,
}

fn envelope_report(
    name: &str,
    traj: &Trajectory,
    distance: Vec<f64>,
    m: f64,
    a: f64,
    input_offset: f64,
    set_norm: f64,
    tol: f64,
) -> Result<EnvelopeReport> {
    let t0 = traj.times[0];
    let d0 = distance[0];
    let margins: Vec<f64> = traj
        .times
        .iter()
        .zip(&distance)
        .map(|(t, d)| {
            let e = m * (-a * (t - t0)).exp();
            e * d0 + input_offset + (1.0 + e) * set_norm - d
        })
        .collect();
    let envelope = MarginSeries::new(name, traj.times.clone(), margins, tol, 0)?;
    let fitted = if input_offset == 0.0 && set_norm == 0.0 {
        fit_decay(&traj.times, &distance, None).ok()
    } else {
        None
    };
    Ok(EnvelopeReport {
        pass: envelope.pass,
        envelope,
        overshoot: m,
        decay: a,
        input_offset,
        set_offset: (1.0 + m) * set_norm,
        initial_distance: d0,
        final_distance: *distance.last().unwrap_or(&0.0),
        fitted,
        distance,
    })
}

/// `|phi(t)|_A <= M e^{-a (t - t_0)} |x0|_A + gamma(|u|_{q,inf}) + tol` at every sample.
pub fn check_eiss_envelope(
    traj: &Trajectory,
    sets: &SetSpec,
    m: f64,
    a: f64,
    gamma: &dyn Fn(f64) -> f64,
    q: Exponent,
    tol: f64,
) -> Result<EnvelopeReport> {
    let distance: Vec<f64> = (0..traj.len()).map(|k| set_dist(&traj.seq(k), sets)).collect::<Result<_>>()?;
    let ubar = traj.input.sup_norm(&traj.input_dims, q)?;
    envelope_report("eiss_envelope", traj, distance, m, a, gamma(ubar), 0.0, tol)
}

/// Practical variant for bounded `A`:
/// `|phi(t)|_p <= M e^{-at} |x0|_p + gamma(|u|) + (1 + M e^{-at}) ||A|| + tol`.
pub fn practical_iss_offset(
    traj: &Trajectory,
    sets: &SetSpec,
    m: f64,
    a: f64,
    gamma: &dyn Fn(f64) -> f64,
    q: Exponent,
    tol: f64,
) -> Result<EnvelopeReport> {
    let bound = sets
        .bound(traj.p)
        .ok_or_else(|| Error::Precondition("practical offset needs a bounded set".into()))?;
    let distance: Vec<f64> = (0..traj.len()).map(|k| lp_norm(&traj.seq(k))).collect();
    let ubar = traj.input.sup_norm(&traj.input_dims, q)?;
    envelope_report("practical_iss", traj, distance, m, a, gamma(ubar), bound, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gainop::{assemble_certificate, compute_mu, spectral_radius, CouplingRule, GainOperator, RateRule};
    use crate::netsim::{integrate, truncate, BlockValues, InputSignal, LocalLyapunov, Mat, Modulation, Source, SubsystemSpec, Term};
    use crate::seqspace::SetDesc;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn exp(p: f64) -> Exponent {
        Exponent::new(p).unwrap()
    }

    /// `x_i' = a x_i + c (x_{i-1} + x_{i+1}) + u_i`, `V_i = x_i^2`.
    fn chain(a: f64, c: f64, gain: GainSpec) -> NetworkSpec {
        let lin = |source: Source, v: f64| Term::Linear { matrix: Mat::scalar(v), source, modulation: Modulation::Constant };
        let mut terms = vec![lin(Source::Own, a), Term::Input { matrix: Mat::scalar(1.0), modulation: Modulation::Constant }];
        if c != 0.0 {
            terms.push(lin(Source::Neighbor { offset: -1 }, c));
            terms.push(lin(Source::Neighbor { offset: 1 }, c));
        }
        NetworkSpec {
            prefix: vec![],
            tail: SubsystemSpec {
                dim: 1,
                input_dim: 1,
                terms,
                lyapunov: LocalLyapunov::Quadratic { weight: Mat::scalar(1.0) },
                lipschitz: None,
            },
            gain,
            sets: SetSpec::origin(),
            p: exp(2.0),
            q: exp(2.0),
            clock: false,
        }
    }

    /// Young's inequality gains for the chain with `c = 0.1`.
    fn young_gain(lambda: f64) -> GainSpec {
        GainSpec {
            lambda: RateRule::constant(lambda),
            gamma: CouplingRule::tridiagonal(0.1),
            gamma_u: RateRule::constant(5.0),
            alpha_lo: 1.0,
            alpha_hi: 1.0,
            null_blocks: vec![],
        }
    }

    fn certificate(net: &NetworkSpec) -> Certificate {
        let op = GainOperator::new(net.gain.clone()).unwrap();
        let br = spectral_radius(&op, &[16, 32, 64], 1e-3).unwrap();
        let mu = compute_mu(&op, br.r_hat(), 1e-3).unwrap();
        assemble_certificate(&net.gain, &mu, (br.lower, br.upper), net.p, net.q)
    }

    fn run(net: &NetworkSpec, n: usize, x0: Vec<f64>, u: InputSignal, t: f64, dt: f64) -> Trajectory {
        let sys = truncate(net, n).unwrap();
        integrate(&sys, &x0, &u, 0.0, t, dt, net.p, Default::default()).unwrap()
    }

    #[test]
    fn composite_v_examples() {
        let net = chain(-1.0, 0.1, young_gain(1.6));
        let mut cert = certificate(&net);
        let x = TruncSeq::from_blocks(vec![vec![0.0]; 5], exp(2.0));
        assert_eq!(composite_v(&cert, &net, &x).unwrap(), 0.0);
        cert.mu = crate::gainop::TailWeights { prefix: vec![2.0], tail: 1.0 };
        let x = TruncSeq::from_blocks(vec![vec![3.0]], exp(2.0));
        assert_eq!(composite_v(&cert, &net, &x).unwrap(), 18.0);
    }

    #[test]
    fn decoupled_margin_is_first_order_small() {
        let gain = GainSpec { gamma: CouplingRule::zero(), gamma_u: RateRule::constant(0.0), ..young_gain(2.0) };
        let net = chain(-1.0, 0.0, gain.clone());
        let dt = 1e-3;
        let tr = run(&net, 3, vec![1.0, -0.5, 2.0], InputSignal::Zero, 2.0, dt);
        for i in 0..3 {
            let s = check_local_dissipation(&net, &gain, &tr, i, Some(10.0 * dt)).unwrap();
            assert!(s.pass, "{s:?}");
            // forward difference of x^2 e^{-2t}: error ~ 2 V dt
            assert!(s.worst.abs() <= 2.0 * 4.0 * dt * 1.01);
        }
    }

    #[test]
    fn young_gains_hold_and_under_declared_fail() {
        let net = chain(-1.0, 0.1, young_gain(1.6));
        let x0: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let u = InputSignal::Sinusoid { amplitude: BlockValues::uniform(vec![0.3]), omega: 2.0, phase_step: 0.4 };
        let tr = run(&net, 30, x0.clone(), u.clone(), 3.0, 1e-3);
        for i in 0..30 {
            assert!(check_local_dissipation(&net, &net.gain, &tr, i, None).unwrap().pass, "block {i}");
        }
        // lambda = 3 with gamma = 0.1 contradicts d/dt x^2 ~ -2 x^2
        let bad = young_gain(3.0);
        let tr = run(&net, 30, x0, InputSignal::Zero, 3.0, 1e-3);
        let worst = (0..30)
            .map(|i| check_local_dissipation(&net, &bad, &tr, i, None).unwrap())
            .map(|s| s.worst)
            .fold(f64::INFINITY, f64::min);
        assert!(worst < -0.1, "{worst}");
    }

    #[test]
    fn chain_certificate_covers_trajectory() {
        let net = chain(-1.0, 0.1, young_gain(1.6));
        let cert = certificate(&net);
        let x0: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
        let tr = run(&net, 40, x0, InputSignal::Zero, 4.0, 1e-3);
        let s = check_composite_dissipation(&cert, &net, &tr, Some(1e-2)).unwrap();
        assert!(s.pass && s.flagged == 0, "{s:?}");
        let gamma = |r: f64| cert.iss_gain(r);
        let env = check_eiss_envelope(&tr, &net.sets, cert.overshoot, cert.decay, &gamma, net.q, 1e-9).unwrap();
        assert!(env.pass);
        let fit = env.fitted.unwrap();
        assert!(fit.a >= cert.decay - 0.05, "{fit:?}");
        assert!(check_monotone_comparison(&cert, &net, &tr, 1e-6).unwrap().pass);
        assert!(check_coercivity(&cert, &net, &tr, 1e-12).unwrap().pass);
    }

    #[test]
    fn envelope_from_inside_set_stays_inside() {
        let net = chain(-1.0, 0.1, young_gain(1.6));
        let tr = run(&net, 10, vec![0.0; 10], InputSignal::Zero, 1.0, 1e-2);
        let env = check_eiss_envelope(&tr, &net.sets, 1.0, 0.5, &|_| 0.0, net.q, 1e-12).unwrap();
        assert!(env.pass && env.final_distance == 0.0);
    }

    #[test]
    fn input_ultimate_bound() {
        let net = chain(-1.0, 0.1, young_gain(1.6));
        let cert = certificate(&net);
        let u = InputSignal::Constant { value: BlockValues::uniform(vec![0.5]) };
        let tr = run(&net, 50, vec![0.0; 50], u, 15.0, 1e-2);
        let gamma = |r: f64| cert.iss_gain(r);
        let env = check_eiss_envelope(&tr, &net.sets, cert.overshoot, cert.decay, &gamma, net.q, 1e-2).unwrap();
        assert!(env.pass && env.final_distance < env.input_offset);
        assert!(env.fitted.is_none());
    }

    #[test]
    fn practical_offsets() {
        let net = chain(-1.0, 0.1, young_gain(1.6));
        let tr = run(&net, 4, vec![1.0, 0.0, 0.0, 0.0], InputSignal::Zero, 1.0, 1e-2);
        // origin set: same numbers as the plain envelope
        let a = practical_iss_offset(&tr, &SetSpec::origin(), 1.0, 0.8, &|_| 0.0, net.q, 0.0).unwrap();
        let b = check_eiss_envelope(&tr, &SetSpec::origin(), 1.0, 0.8, &|_| 0.0, net.q, 0.0).unwrap();
        assert_eq!(a.envelope.margins, b.envelope.margins);
        // point set: offset equals |a|_p
        let pts = SetSpec { prefix: vec![SetDesc::Point { at: vec![3.0] }, SetDesc::Point { at: vec![4.0] }], tail: SetDesc::Origin };
        let r = practical_iss_offset(&tr, &pts, 1.0, 0.8, &|_| 0.0, net.q, 0.0).unwrap();
        assert!((r.set_offset - 2.0 * 5.0).abs() < 1e-12);
        let unbounded = SetSpec { prefix: vec![SetDesc::Full], tail: SetDesc::Origin };
        assert!(practical_iss_offset(&tr, &unbounded, 1.0, 0.8, &|_| 0.0, net.q, 0.0).is_err());
    }

    #[test]
    fn fit_decay_examples() {
        let t: Vec<f64> = (0..100).map(|k| k as f64 * 0.05).collect();
        let v: Vec<f64> = t.iter().map(|t| 3.0 * (-2.0 * t).exp()).collect();
        let f = fit_decay(&t, &v, None).unwrap();
        assert!((f.m * v[0] - 3.0).abs() < 1e-12 && (f.a - 2.0).abs() < 1e-12);
        let f = fit_decay(&t, &vec![4.0; 100], None).unwrap();
        assert!(f.a.abs() < 1e-12);
        assert!(fit_decay(&t, &vec![0.0; 100], None).is_err());

        // five decades at rate 1, one percent multiplicative noise
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t: Vec<f64> = (0..500).map(|k| k as f64 * 11.5 / 500.0).collect();
        let v: Vec<f64> = t.iter().map(|t| (-t).exp() * (1.0 + 0.01 * rng.gen_range(-1.0..1.0))).collect();
        let f = fit_decay(&t, &v, None).unwrap();
        assert!((f.a - 1.0).abs() < 0.05);
        let w = fit_decay(&t, &v, Some((2.0, 4.0))).unwrap();
        assert!(w.samples < 500 && (w.a - 1.0).abs() < 0.05);
    }

    #[test]
    fn margins_csv_header() {
        let s = MarginSeries::new("x", vec![0.0, 0.1], vec![1.0, -1.0], 0.5, 0).unwrap();
        assert!(!s.pass && s.worst == -1.0 && s.worst_time == 0.1);
        let mut buf = Vec::new();
        write_margins_csv(&mut buf, &[&s], 1).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,check,margin\n0,x,1\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn coercivity_sandwich(xs in proptest::collection::vec(-5.0f64..5.0, 1..12), scale in 0.5f64..3.0) {
            let mut gain = young_gain(1.6);
            gain.alpha_lo = scale;
            gain.alpha_hi = scale;
            let mut net = chain(-1.0, 0.1, gain);
            net.tail.lyapunov = LocalLyapunov::Quadratic { weight: Mat::scalar(scale) };
            let cert = certificate(&net);
            let x = TruncSeq::from_blocks(xs.iter().map(|v| vec![*v]).collect(), exp(2.0));
            let v = composite_v(&cert, &net, &x).unwrap();
            let d2 = set_dist(&x, &net.sets).unwrap().powi(2);
            prop_assert!(cert.coercivity.0 * d2 <= v * (1.0 + 1e-12) + 1e-300);
            prop_assert!(v <= cert.coercivity.1 * d2 * (1.0 + 1e-12) + 1e-300);
        }

        /// Passing composite dissipation with u = 0 implies the certificate envelope.
        #[test]
        fn dissipation_implies_envelope(xs in proptest::collection::vec(-2.0f64..2.0, 3..10)) {
            let net = chain(-1.0, 0.1, young_gain(1.6));
            let cert = certificate(&net);
            let n = xs.len() + 4;
            let mut x0 = xs.clone();
            x0.resize(n, 0.0);
            let tr = run(&net, n, x0, InputSignal::Zero, 2.0, 1e-2);
            let s = check_composite_dissipation(&cert, &net, &tr, Some(0.0)).unwrap();
            if s.pass {
                let env = check_eiss_envelope(&tr, &net.sets, cert.overshoot, cert.decay, &|_| 0.0, net.q, 1e-9).unwrap();
                prop_assert!(env.pass);
            }
        }
    }
}
