//! Time-varying networks via clock augmentation, weighted average consensus
//! and distributed observers, each as a network transformer plus metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{check_eiss_envelope, fit_decay, DecayFit, EnvelopeReport, MarginSeries};
use crate::error::{Error, Result};
use crate::gainop::{BandEntry, Certificate, CouplingRule, Entry, GainOperator, GainSpec, RateRule};
use crate::netsim::{
    embed, integrate, truncate, InputSignal, IntegrateOptions, LocalLyapunov, Mat, NetworkSpec, OdeSystem, Source,
    SubsystemSpec, Term, Trajectory,
};
use crate::seqspace::{euclid, lp_norm, pair_dist_to_diagonal, Exponent, SetDesc, SetSpec, TruncSeq};

fn exponent(p: f64) -> Exponent {
    Exponent::new(p).expect("valid literal exponent")
}

fn shift_rate(r: &RateRule, head: f64) -> RateRule {
    let mut prefix = vec![head];
    prefix.extend_from_slice(&r.prefix);
    RateRule { prefix, tail: r.tail }
}

/// Gain data of `net` re-indexed so that a new null block occupies index 0.
fn shift_gain(gain: &GainSpec, lambda0: f64) -> Result<GainSpec> {
    let op = GainOperator::new(gain.clone())?;
    let rows = gain.gamma.prefix_rows.max(op.reach());
    let mut explicit = Vec::new();
    for i in 0..rows {
        for (j, v) in op.gamma_row(i) {
            explicit.push(Entry { row: i + 1, col: j + 1, value: v });
        }
    }
    let mut null_blocks = vec![0];
    null_blocks.extend(gain.null_blocks.iter().map(|i| i + 1));
    Ok(GainSpec {
        lambda: shift_rate(&gain.lambda, lambda0),
        gamma: CouplingRule { explicit, prefix_rows: rows + 1, band: gain.gamma.band.clone() },
        gamma_u: shift_rate(&gain.gamma_u, 0.0),
        alpha_lo: gain.alpha_lo,
        alpha_hi: gain.alpha_hi,
        null_blocks,
    })
}

/// A time-varying network and its time-invariant augmentation with a clock
/// block `y' = 1` at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockAugmented {
    pub base: NetworkSpec,
    pub augmented: NetworkSpec,
    pub lambda0: f64,
}

pub const DEFAULT_CLOCK_RATE: f64 = 1.0;

pub fn clock_augment(base: &NetworkSpec, lambda0: f64) -> Result<ClockAugmented> {
    if base.clock {
        return Err(Error::Precondition("network already carries a clock block".into()));
    }
    if !base.is_time_varying() {
        return Err(Error::Precondition("base network has no time-dependent term".into()));
    }
    if !(lambda0 > 0.0) {
        return Err(Error::InvalidSpec("clock rate must be positive".into()));
    }
    base.validate()?;
    let clock = SubsystemSpec {
        dim: 1,
        input_dim: 0,
        terms: vec![Term::Constant { value: vec![1.0] }],
        lyapunov: LocalLyapunov::Zero,
        lipschitz: Some(0.0),
    };
    let mut prefix = vec![clock];
    prefix.extend(base.prefix.iter().cloned());
    let mut sets = vec![SetDesc::Full];
    sets.extend(base.sets.prefix.iter().cloned());
    let augmented = NetworkSpec {
        prefix,
        tail: base.tail.clone(),
        gain: shift_gain(&base.gain, lambda0)?,
        sets: SetSpec { prefix: sets, tail: base.sets.tail.clone() },
        p: base.p,
        q: base.q,
        clock: true,
    };
    augmented.validate()?;
    Ok(ClockAugmented { base: base.clone(), augmented, lambda0 })
}

impl ClockAugmented {
    /// Augmented initial state `(t0, z0)` over `n` base blocks.
    pub fn initial_state(&self, t0: f64, z0: &TruncSeq, n: usize) -> Result<Vec<f64>> {
        let mut flat = vec![t0];
        flat.extend(embed(&self.base, z0, n)?);
        Ok(flat)
    }

    /// Simulates from `(t0, z0)` over `n` base blocks; the integrator clock
    /// starts at `t0` so inputs are read as `u(t0 + s)`.
    pub fn simulate(&self, t0: f64, z0: &TruncSeq, u: &InputSignal, n: usize, horizon: f64, dt: f64) -> Result<Trajectory> {
        let sys = truncate(&self.augmented, n + 1)?;
        let x0 = self.initial_state(t0, z0, n)?;
        integrate(&sys, &x0, u, t0, horizon, dt, self.augmented.p, IntegrateOptions::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeissRun {
    pub t0: f64,
    pub sample: usize,
    pub envelope: EnvelopeReport,
    /// Fit of `|z(t)|_p`; a negative rate means growth.
    pub fitted: Option<DecayFit>,
    /// `max_k |y(t_k) - t_k|`
    pub clock_error: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeissReport {
    pub overshoot: f64,
    pub decay: f64,
    pub runs: Vec<UeissRun>,
    /// Slowest fitted rate over all runs and the overshoot it needs.
    pub empirical_decay: Option<f64>,
    pub empirical_overshoot: Option<f64>,
    pub pass: bool,
}

/// Checks one envelope `(M, a)` against runs from every `t0` and `z0`.
#[allow(clippy::too_many_arguments)]
pub fn ueiss_check(
    aug: &ClockAugmented,
    overshoot: f64,
    decay: f64,
    gamma: &dyn Fn(f64) -> f64,
    t0_samples: &[f64],
    z0_samples: &[TruncSeq],
    u: &InputSignal,
    n: usize,
    horizon: f64,
    dt: f64,
    tol: f64,
) -> Result<UeissReport> {
    let mut runs = Vec::new();
    for &t0 in t0_samples {
        for (sample, z0) in z0_samples.iter().enumerate() {
            let tr = aug.simulate(t0, z0, u, n, horizon, dt)?;
            let clock_error = tr.times.iter().enumerate().map(|(k, t)| (tr.state(k)[0] - t).abs()).fold(0.0, f64::max);
            let envelope = check_eiss_envelope(&tr, &aug.augmented.sets, overshoot, decay, gamma, aug.augmented.q, tol)?;
            let fitted = if u.is_zero() {
                let t_ok: Vec<usize> = (0..envelope.distance.len()).filter(|&k| envelope.distance[k] > 0.0).collect();
                let ts: Vec<f64> = t_ok.iter().map(|&k| tr.times[k]).collect();
                let ds: Vec<f64> = t_ok.iter().map(|&k| envelope.distance[k]).collect();
                fit_decay(&ts, &ds, None).ok()
            } else {
                None
            };
            runs.push(UeissRun { t0, sample, envelope, fitted, clock_error, overflow: tr.diagnostics.overflow });
        }
    }
    let empirical_decay = runs.iter().filter_map(|r| r.fitted.map(|f| f.a)).reduce(f64::min);
    let empirical_overshoot = empirical_decay.map(|a| {
        runs.iter()
            .map(|r| {
                let d = &r.envelope.distance;
                let ts = &r.envelope.envelope.times;
                if d[0] == 0.0 {
                    return 1.0;
                }
                ts.iter().zip(d).map(|(t, v)| v / (d[0] * (-a * (t - r.t0)).exp())).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    });
    let pass = runs.iter().all(|r| r.envelope.pass && !r.overflow);
    Ok(UeissReport { overshoot, decay, runs, empirical_decay, empirical_overshoot, pass })
}

/// `alpha_i` for agents `i >= 1`: explicit prefix, then a geometric tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRule {
    #[serde(default)]
    pub prefix: Vec<f64>,
    pub ratio: f64,
    /// First tail weight; defaults to the value that makes the weights sum to one.
    #[serde(default)]
    pub scale: Option<f64>,
}

impl AlphaRule {
    pub fn geometric(ratio: f64) -> Self {
        Self { prefix: Vec::new(), ratio, scale: None }
    }

    fn head(&self) -> f64 {
        self.scale.unwrap_or_else(|| (1.0 - self.prefix.iter().sum::<f64>()) * (1.0 - self.ratio))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidSpec(format!("geometric ratio {} outside (0, 1)", self.ratio)));
        }
        if self.prefix.iter().any(|a| !(*a > 0.0)) || !(self.head() > 0.0) {
            return Err(Error::InvalidSpec("consensus weights must be positive".into()));
        }
        let total = self.prefix.iter().sum::<f64>() + self.head() / (1.0 - self.ratio);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("consensus weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Weight of agent `i >= 1`.
    pub fn at(&self, i: usize) -> f64 {
        assert!(i >= 1, "agents are numbered from 1");
        let k = i - 1;
        match self.prefix.get(k) {
            Some(v) => *v,
            None => self.head() * self.ratio.powi((k - self.prefix.len()) as i32),
        }
    }

    /// `sum_{i > n} alpha_i` in closed form.
    pub fn tail_mass(&self, n: usize) -> f64 {
        let p = self.prefix.len();
        if n >= p {
            self.head() * self.ratio.powi((n - p) as i32) / (1.0 - self.ratio)
        } else {
            self.prefix[n..].iter().sum::<f64>() + self.head() / (1.0 - self.ratio)
        }
    }

    /// `min_{i <= n} alpha_i`
    pub fn min_first(&self, n: usize) -> f64 {
        (1..=n).map(|i| self.at(i)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEdge {
    pub offset: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Coupling weights `a_ij`: undirected bands between agents `i` and `i + offset`
/// plus directed explicit entries that must come in symmetric pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeRule {
    #[serde(default)]
    pub band: Vec<BandEdge>,
    #[serde(default)]
    pub explicit: Vec<Edge>,
}

impl EdgeRule {
    pub fn validate(&self) -> Result<()> {
        let mut sup = 0.0f64;
        for b in &self.band {
            if b.offset == 0 || !(b.weight > 0.0) {
                return Err(Error::InvalidSpec("band edges need offset >= 1 and positive weight".into()));
            }
            sup = sup.max(b.weight);
        }
        for e in &self.explicit {
            if e.i == 0 || e.j == 0 || e.i == e.j || !(e.weight > 0.0) {
                return Err(Error::InvalidSpec(format!("bad edge ({}, {})", e.i, e.j)));
            }
            if !self.explicit.iter().any(|f| f.i == e.j && f.j == e.i && f.weight == e.weight) {
                return Err(Error::InvalidSpec(format!("a_{}{} has no symmetric partner", e.i, e.j)));
            }
            sup = sup.max(e.weight);
        }
        if (sup - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("sup of coupling weights is {sup}, not 1")));
        }
        Ok(())
    }

    pub fn reach(&self) -> usize {
        self.band.iter().map(|b| b.offset).max().unwrap_or(0)
    }

    /// Neighbours `(j, a_ij)` of agent `i`; always finite.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut add = |j: usize, w: f64| match out.iter_mut().find(|(k, _)| *k == j) {
            Some(slot) => slot.1 += w,
            None => out.push((j, w)),
        };
        for b in &self.band {
            if i > b.offset {
                add(i - b.offset, b.weight);
            }
            add(i + b.offset, b.weight);
        }
        for e in self.explicit.iter().filter(|e| e.i == i) {
            add(e.j, e.weight);
        }
        out.sort_by_key(|(j, _)| *j);
        out
    }
}

/// Agents `x_i' = f(x_i) + B u_i` with diffusive input
/// `u_i = -sigma sum_j alpha_j a_ij (x_i - x_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSpec {
    pub dim: usize,
    /// Common agent dynamics; only own-state linear and scalar terms.
    #[serde(default)]
    pub agent: Vec<Term>,
    pub lipschitz: f64,
    pub b: Mat,
    pub alpha: AlphaRule,
    pub edges: EdgeRule,
    pub sigma: f64,
    /// Declared error-subsystem gains on the indexing `0 = x_a, i = e_i`.
    #[serde(default)]
    pub gains: Option<GainSpec>,
}

impl ConsensusSpec {
    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        self.edges.validate()?;
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidSpec("coupling gain sigma must be positive".into()));
        }
        if self.b.rows() != self.dim || self.b.cols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim * self.dim, found: self.b.rows() * self.b.cols() });
        }
        for t in &self.agent {
            match t {
                Term::Linear { matrix, source: Source::Own, modulation } if modulation.is_constant() => {
                    if matrix.rows() != self.dim || matrix.cols() != self.dim {
                        return Err(Error::DimensionMismatch { expected: self.dim, found: matrix.rows() });
                    }
                }
                Term::Scalar { weights, out, source: Source::Own, modulation, .. } if modulation.is_constant() => {
                    if weights.len() != self.dim || out.len() != self.dim {
                        return Err(Error::DimensionMismatch { expected: self.dim, found: weights.len() });
                    }
                }
                _ => {
                    return Err(Error::InvalidSpec(
                        "agent dynamics take only time-invariant own-state linear or scalar terms".into(),
                    ))
                }
            }
        }
        let bound = SubsystemSpec {
            dim: self.dim,
            input_dim: 0,
            terms: self.agent.clone(),
            lyapunov: LocalLyapunov::Zero,
            lipschitz: None,
        }
        .lipschitz_bound(f64::INFINITY);
        if bound > self.lipschitz * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!(
                "declared common Lipschitz constant {} below the term bound {bound}",
                self.lipschitz
            )));
        }
        let zero = vec![0.0; self.dim];
        if euclid(&self.eval_agent(&zero)) != 0.0 {
            return Err(Error::Precondition("agent dynamics must vanish at 0".into()));
        }
        Ok(())
    }

    fn eval_agent(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in &self.agent {
            match t {
                Term::Linear { matrix, .. } => matrix.mul_add(x, 1.0, &mut out),
                Term::Scalar { func, weights, out: dir, .. } => {
                    let s: f64 = weights.iter().zip(x).map(|(a, b)| a * b).sum();
                    let v = func.eval(s);
                    for (o, d) in out.iter_mut().zip(dir) {
                        *o += v * d;
                    }
                }
                _ => unreachable!("rejected by validate"),
            }
        }
        out
    }

    /// Gains for scalar agents `f(x) = -k x`, `B = b > 0`, `V_i = |e_i|`:
    /// `lambda_i = k + sigma b sum_j alpha_j a_ij`, `gamma_ij = sigma b alpha_i a_ij`.
    /// Valid on the invariant subspace `sum_i e_i = 0` that every state built
    /// from agent positions lies in. Rows past `prefix_rows` use a constant
    /// band that dominates the decaying entries.
    pub fn linear_scalar_gains(&self, prefix_rows: usize) -> Result<GainSpec> {
        let k = match self.agent.as_slice() {
            [Term::Linear { matrix, source: Source::Own, .. }] if self.dim == 1 => -matrix.get(0, 0),
            [] if self.dim == 1 => 0.0,
            _ => return Err(Error::Precondition("gain derivation needs scalar agents f(x) = -k x".into())),
        };
        let b = self.b.get(0, 0);
        if !(b > 0.0) || k < 0.0 {
            return Err(Error::Precondition("gain derivation needs k >= 0 and b > 0".into()));
        }
        let rows = prefix_rows.max(self.edges.explicit.iter().map(|e| e.i.max(e.j)).max().unwrap_or(0) + 1);
        let mut lambda = vec![1.0];
        let mut explicit = Vec::new();
        for i in 1..rows {
            let nb = self.edges.neighbors(i);
            lambda.push(k + self.sigma * b * nb.iter().map(|&(j, a)| self.alpha.at(j) * a).sum::<f64>());
            for (j, a) in nb {
                explicit.push(Entry { row: i, col: j, value: self.sigma * b * self.alpha.at(i) * a });
            }
        }
        let band = self
            .edges
            .band
            .iter()
            .flat_map(|e| {
                let v = self.sigma * b * self.alpha.at(rows) * e.weight;
                [BandEntry { offset: -(e.offset as isize), value: v }, BandEntry { offset: e.offset as isize, value: v }]
            })
            .collect();
        if k == 0.0 {
            return Err(Error::Precondition("f = 0 gives no dissipation in the tail".into()));
        }
        Ok(GainSpec {
            lambda: RateRule { prefix: lambda, tail: k },
            gamma: CouplingRule { explicit, prefix_rows: rows, band },
            gamma_u: RateRule::constant(0.0),
            alpha_lo: 1.0,
            alpha_hi: 1.0,
            null_blocks: vec![0],
        })
    }
}

/// The average/error system on `l^1(N_0, n)`. The dynamics are not banded
/// (every error reads the average velocity), so they live in the truncations
/// built here; [`ConsensusSystem::network`] carries the Lyapunov, gain and set
/// data used by the certificate and checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSystem {
    pub spec: ConsensusSpec,
    pub network: NetworkSpec,
}

pub fn build_consensus_error_system(cs: &ConsensusSpec) -> Result<ConsensusSystem> {
    cs.validate()?;
    let gain = match &cs.gains {
        Some(g) => g.clone(),
        None => cs.linear_scalar_gains(8)?,
    };
    if !gain.is_null(0) {
        return Err(Error::InvalidSpec("block 0 (the average) must be a null block".into()));
    }
    let n = cs.dim;
    let block = |lyapunov| SubsystemSpec { dim: n, input_dim: 0, terms: vec![], lyapunov, lipschitz: None };
    let network = NetworkSpec {
        prefix: vec![block(LocalLyapunov::Zero)],
        tail: block(LocalLyapunov::DistancePower { scale: 1.0, power: 1.0 }),
        gain,
        sets: SetSpec { prefix: vec![SetDesc::Full], tail: SetDesc::Origin },
        p: exponent(1.0),
        q: exponent(1.0),
        clock: false,
    };
    network.gain.validate()?;
    Ok(ConsensusSystem { spec: cs.clone(), network })
}

struct AgentTable {
    alpha: Vec<f64>,
    /// `(j, alpha_j a_ij)` per agent, indices relative to agent 1.
    neighbors: Vec<Vec<(usize, f64)>>,
}

fn agent_table(cs: &ConsensusSpec, agents: usize) -> AgentTable {
    let alpha = (1..=agents).map(|i| cs.alpha.at(i)).collect();
    let neighbors = (1..=agents)
        .map(|i| cs.edges.neighbors(i).into_iter().map(|(j, a)| (j, cs.alpha.at(j) * a)).collect())
        .collect();
    AgentTable { alpha, neighbors }
}

/// Truncation to `x_a` and the first `agents` errors; errors past the
/// truncation read 0, i.e. those agents sit at the average.
pub struct ConsensusErrorSystem<'a> {
    cs: &'a ConsensusSpec,
    agents: usize,
    table: AgentTable,
    /// Boundary agents past the truncation that couple into it.
    boundary: Vec<(f64, Vec<(usize, f64)>)>,
    tail_mass: f64,
    dims: Vec<usize>,
    input_dims: Vec<usize>,
}

impl ConsensusSystem {
    pub fn truncate(&self, agents: usize) -> ConsensusErrorSystem<'_> {
        let cs = &self.spec;
        let boundary = (agents + 1..=agents + cs.edges.reach())
            .map(|j| {
                let nb = cs.edges.neighbors(j).into_iter().filter(|&(k, _)| k <= agents).map(|(k, a)| (k, cs.alpha.at(k) * a)).collect();
                (cs.alpha.at(j), nb)
            })
            .collect();
        ConsensusErrorSystem {
            cs,
            agents,
            table: agent_table(cs, agents),
            boundary,
            tail_mass: cs.alpha.tail_mass(agents),
            dims: vec![cs.dim; agents + 1],
            input_dims: vec![0; agents + 1],
        }
    }

    /// Agent positions in original coordinates; neighbours past the truncation are dropped.
    pub fn original(&self, agents: usize) -> ConsensusOriginal<'_> {
        ConsensusOriginal {
            cs: &self.spec,
            table: agent_table(&self.spec, agents),
            dims: vec![self.spec.dim; agents],
            input_dims: vec![0; agents],
        }
    }

    /// Random agent positions in `[-1, 1]^n`.
    pub fn random_positions(&self, agents: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..agents * self.spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Average of the truncated positions (agents past the truncation assumed at the average).
    pub fn average(&self, positions: &[f64]) -> Vec<f64> {
        let n = self.spec.dim;
        let agents = positions.len() / n;
        let mass = 1.0 - self.spec.alpha.tail_mass(agents);
        let mut xa = vec![0.0; n];
        for i in 0..agents {
            let a = self.spec.alpha.at(i + 1);
            for c in 0..n {
                xa[c] += a * positions[i * n + c];
            }
        }
        xa.iter().map(|v| v / mass).collect()
    }

    /// `(x_a, e_1, ..., e_N)` with `e_i = alpha_i (x_i - x_a)`.
    pub fn to_error_coordinates(&self, positions: &[f64]) -> Vec<f64> {
        let n = self.spec.dim;
        let xa = self.average(positions);
        let mut out = xa.clone();
        for (i, chunk) in positions.chunks(n).enumerate() {
            let a = self.spec.alpha.at(i + 1);
            out.extend(chunk.iter().zip(&xa).map(|(x, m)| a * (x - m)));
        }
        out
    }
}

impl ConsensusErrorSystem<'_> {
    /// Agent velocities `x_i'` for `i <= N` and the average velocity.
    fn velocities(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.cs.dim;
        let xa = &x[..n];
        let dev = |i: usize| -> Vec<f64> {
            // x_i - x_a for agent i >= 1
            if i <= self.agents {
                let a = self.table.alpha[i - 1];
                x[i * n..(i + 1) * n].iter().map(|e| e / a).collect()
            } else {
                vec![0.0; n]
            }
        };
        let coupling = |i: usize, nb: &[(usize, f64)]| -> Vec<f64> {
            let di = dev(i);
            let mut acc = vec![0.0; n];
            for &(j, w) in nb {
                let dj = dev(j);
                for c in 0..n {
                    acc[c] += w * (di[c] - dj[c]);
                }
            }
            let mut u = vec![0.0; n];
            self.cs.b.mul_add(&acc, -self.cs.sigma, &mut u);
            u
        };
        let mut vel = Vec::with_capacity(self.agents * n);
        let mut avg = vec![0.0; n];
        for i in 1..=self.agents {
            let pos: Vec<f64> = dev(i).iter().zip(xa).map(|(d, m)| d + m).collect();
            let f = self.cs.eval_agent(&pos);
            let u = coupling(i, &self.table.neighbors[i - 1]);
            let a = self.table.alpha[i - 1];
            for c in 0..n {
                let v = f[c] + u[c];
                vel.push(v);
                avg[c] += a * v;
            }
        }
        // agents past the truncation sit at x_a
        let f0 = self.cs.eval_agent(xa);
        for c in 0..n {
            avg[c] += self.tail_mass * f0[c];
        }
        for (j, (a, nb)) in (self.agents + 1..).zip(&self.boundary) {
            let u = coupling(j, nb);
            for c in 0..n {
                avg[c] += a * u[c];
            }
        }
        (vel, avg)
    }
}

impl OdeSystem for ConsensusErrorSystem<'_> {
    fn block_dims(&self) -> &[usize] {
        &self.dims
    }

    fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    fn rhs(&self, _t: f64, x: &[f64], _u: &[f64], dx: &mut [f64]) {
        let n = self.cs.dim;
        let (vel, avg) = self.velocities(x);
        dx[..n].copy_from_slice(&avg);
        for i in 1..=self.agents {
            let a = self.table.alpha[i - 1];
            for c in 0..n {
                dx[i * n + c] = a * (vel[(i - 1) * n + c] - avg[c]);
            }
        }
    }
}

pub struct ConsensusOriginal<'a> {
    cs: &'a ConsensusSpec,
    table: AgentTable,
    dims: Vec<usize>,
    input_dims: Vec<usize>,
}

impl OdeSystem for ConsensusOriginal<'_> {
    fn block_dims(&self) -> &[usize] {
        &self.dims
    }

    fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    fn rhs(&self, _t: f64, x: &[f64], _u: &[f64], dx: &mut [f64]) {
        let n = self.cs.dim;
        let agents = self.dims.len();
        for i in 0..agents {
            let xi = &x[i * n..(i + 1) * n];
            let mut acc = vec![0.0; n];
            for &(j, w) in &self.table.neighbors[i] {
                if j <= agents {
                    let xj = &x[(j - 1) * n..j * n];
                    for c in 0..n {
                        acc[c] += w * (xi[c] - xj[c]);
                    }
                }
            }
            let out = &mut dx[i * n..(i + 1) * n];
            out.copy_from_slice(&self.cs.eval_agent(xi));
            self.cs.b.mul_add(&acc, -self.cs.sigma, out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBound {
    pub mode: usize,
    pub worst_margin: f64,
    pub worst_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub overshoot: f64,
    pub decay: f64,
    pub initial_error: f64,
    /// `|e(t)|_1 <= M e^{-at} |e(0)|_1`
    pub weighted: MarginSeries,
    pub fitted: Option<DecayFit>,
    /// Partial sums `sum_{i<=K} |x_i - x_a| <= (M / alpha^m_K) e^{-at} |e(0)|_1`, one row per `K`.
    pub partial_sums: Vec<ModeBound>,
    /// `|x_i - x_a| <= (M / alpha_i) e^{-at} |e(0)|_1`, one row per mode.
    pub modes: Vec<ModeBound>,
    pub pass: bool,
    #[serde(skip)]
    pub e_l1: Vec<f64>,
}

/// The weighted, partial-sum and per-mode consensus bounds along a trajectory
/// of the truncated error system.
pub fn consensus_metrics(traj: &Trajectory, sys: &ConsensusSystem, overshoot: f64, decay: f64, tol: f64) -> Result<ConsensusReport> {
    let n = sys.spec.dim;
    let agents = traj.dims.len() - 1;
    let t0 = traj.times[0];
    let e_l1: Vec<f64> = (0..traj.len())
        .map(|k| traj.state(k)[n..].chunks(n).map(euclid).sum::<f64>())
        .collect();
    let e0 = e_l1[0];
    let env: Vec<f64> = traj.times.iter().map(|t| overshoot * (-decay * (t - t0)).exp() * e0).collect();
    let margins: Vec<f64> = env.iter().zip(&e_l1).map(|(b, v)| b - v).collect();
    let weighted = MarginSeries::new("consensus_weighted", traj.times.clone(), margins, tol, 0)?;
    let positive: Vec<usize> = (0..e_l1.len()).filter(|&k| e_l1[k] > 0.0).collect();
    let fitted = if positive.len() >= 2 {
        let ts: Vec<f64> = positive.iter().map(|&k| traj.times[k]).collect();
        let vs: Vec<f64> = positive.iter().map(|&k| e_l1[k]).collect();
        fit_decay(&ts, &vs, None).ok()
    } else {
        None
    };
    let alpha: Vec<f64> = (1..=agents).map(|i| sys.spec.alpha.at(i)).collect();
    let mut modes: Vec<ModeBound> = (1..=agents).map(|mode| ModeBound { mode, worst_margin: f64::INFINITY, worst_time: t0 }).collect();
    let mut partial: Vec<ModeBound> = modes.clone();
    for k in 0..traj.len() {
        let s = traj.state(k);
        let mut running = 0.0;
        let mut amin = f64::INFINITY;
        for i in 0..agents {
            let dev = euclid(&s[(i + 1) * n..(i + 2) * n]) / alpha[i];
            amin = amin.min(alpha[i]);
            running += dev;
            let m = env[k] / alpha[i] - dev;
            if m < modes[i].worst_margin {
                modes[i].worst_margin = m;
                modes[i].worst_time = traj.times[k];
            }
            let m = env[k] / amin - running;
            if m < partial[i].worst_margin {
                partial[i].worst_margin = m;
                partial[i].worst_time = traj.times[k];
            }
        }
    }
    let pass = weighted.pass
        && modes.iter().all(|m| m.worst_margin >= -tol)
        && partial.iter().all(|m| m.worst_margin >= -tol);
    Ok(ConsensusReport {
        overshoot,
        decay,
        initial_error: e0,
        weighted,
        fitted,
        partial_sums: partial,
        modes,
        pass,
        e_l1,
    })
}

/// `|x_a(t) - x_a(0)|` over a trajectory of the original coordinates.
pub fn average_drift(sys: &ConsensusSystem, traj: &Trajectory) -> f64 {
    let a0 = sys.average(traj.state(0));
    (0..traj.len())
        .map(|k| euclid(&sys.average(traj.state(k)).iter().zip(&a0).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .fold(0.0, f64::max)
}

/// Linear output map term `C x_src`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputTerm {
    pub matrix: Mat,
    #[serde(default)]
    pub source: Source,
}

/// Plants `x_i' = f(x_i, neighbours)` with outputs `y_i = sum C x_src` and
/// Luenberger observers `x_hat_i' = f(x_hat_i, neighbour estimates) + K (y_i - y_hat_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverSpec {
    pub dim: usize,
    pub output_dim: usize,
    pub plant: Vec<Term>,
    pub output: Vec<OutputTerm>,
    pub gain: Mat,
    /// `V_i = (x_i - x_hat_i)^T P (x_i - x_hat_i)`; identity when absent.
    #[serde(default)]
    pub weight: Option<Mat>,
    /// Declared gains relative to the distance to the diagonal.
    pub gains: GainSpec,
    #[serde(default)]
    pub lipschitz: Option<f64>,
}

fn block_diag(m: &Mat) -> Mat {
    let (r, c) = (m.rows(), m.cols());
    let mut data = vec![0.0; 4 * r * c];
    for i in 0..r {
        for j in 0..c {
            data[i * 2 * c + j] = m.get(i, j);
            data[(r + i) * 2 * c + c + j] = m.get(i, j);
        }
    }
    Mat::new(2 * r, 2 * c, data).expect("sizes match")
}

impl ObserverSpec {
    pub fn weight(&self) -> Mat {
        self.weight.clone().unwrap_or_else(|| Mat::identity(self.dim, 1.0))
    }

    fn paired_terms(&self) -> Result<Vec<Term>> {
        let n = self.dim;
        let mut out = Vec::new();
        for t in &self.plant {
            match t {
                Term::Linear { matrix, source, modulation } => {
                    out.push(Term::Linear { matrix: block_diag(matrix), source: *source, modulation: *modulation })
                }
                Term::Scalar { func, weights, out: dir, source, modulation } => {
                    let z = |v: &[f64], first: bool| -> Vec<f64> {
                        let zeros = vec![0.0; v.len()];
                        if first {
                            [v, &zeros].concat()
                        } else {
                            [&zeros, v].concat()
                        }
                    };
                    for first in [true, false] {
                        out.push(Term::Scalar {
                            func: func.clone(),
                            weights: z(weights, first),
                            out: z(dir, first),
                            source: *source,
                            modulation: *modulation,
                        });
                    }
                }
                Term::Input { .. } | Term::Constant { .. } => {
                    return Err(Error::InvalidSpec("observer plants take no inputs or constant drifts".into()))
                }
            }
        }
        if self.gain.rows() != n || self.gain.cols() != self.output_dim {
            return Err(Error::DimensionMismatch { expected: n * self.output_dim, found: self.gain.rows() * self.gain.cols() });
        }
        for o in &self.output {
            if o.matrix.rows() != self.output_dim {
                return Err(Error::DimensionMismatch { expected: self.output_dim, found: o.matrix.rows() });
            }
            let s = o.matrix.cols();
            // K C applied to (x_src - x_hat_src), written into the observer half
            let mut kc = vec![0.0; n * s];
            for i in 0..n {
                for j in 0..s {
                    kc[i * s + j] = (0..self.output_dim).map(|k| self.gain.get(i, k) * o.matrix.get(k, j)).sum();
                }
            }
            let mut data = vec![0.0; 4 * n * s];
            for i in 0..n {
                for j in 0..s {
                    data[(n + i) * 2 * s + j] = kc[i * s + j];
                    data[(n + i) * 2 * s + s + j] = -kc[i * s + j];
                }
            }
            out.push(Term::Linear { matrix: Mat::new(2 * n, 2 * s, data)?, source: o.source, modulation: Default::default() });
        }
        Ok(out)
    }
}

/// Composite plant/observer network on paired blocks `(x_i, x_hat_i)` with the diagonal as target set.
pub fn build_observer_composite(os: &ObserverSpec) -> Result<NetworkSpec> {
    let terms = os.paired_terms()?;
    let net = NetworkSpec {
        prefix: vec![],
        tail: SubsystemSpec {
            dim: 2 * os.dim,
            input_dim: 0,
            terms,
            lyapunov: LocalLyapunov::PairQuadratic { weight: os.weight() },
            lipschitz: os.lipschitz,
        },
        gain: os.gains.clone(),
        sets: SetSpec { prefix: vec![], tail: SetDesc::Diagonal },
        p: exponent(2.0),
        q: exponent(2.0),
        clock: false,
    };
    net.validate()?;
    Ok(net)
}

/// Splits a paired state into plant and observer sequences.
pub fn split_pairs(flat: &[f64], dim: usize) -> (TruncSeq, TruncSeq) {
    let p = exponent(2.0);
    let (mut x, mut xh) = (Vec::new(), Vec::new());
    for c in flat.chunks(2 * dim) {
        x.push(c[..dim].to_vec());
        xh.push(c[dim..].to_vec());
    }
    (TruncSeq::from_blocks(x, p), TruncSeq::from_blocks(xh, p))
}

/// Samples random pairs and checks `alpha_lo d^2 <= V_i <= alpha_hi d^2` with `d` the distance to the diagonal.
pub fn observer_sandwich_check(os: &ObserverSpec, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lyap = LocalLyapunov::PairQuadratic { weight: os.weight() };
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let z: Vec<f64> = (0..2 * os.dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v = lyap.eval(&z, &SetDesc::Diagonal)?;
        let d2 = crate::seqspace::block_dist(&z, &SetDesc::Diagonal)?.powi(2);
        let scale = d2.max(f64::MIN_POSITIVE);
        worst = worst.min((v - os.gains.alpha_lo * d2) / scale).min((os.gains.alpha_hi * d2 - v) / scale);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverReport {
    pub certified: bool,
    pub envelope: MarginSeries,
    pub fitted: Option<DecayFit>,
    pub initial_error: f64,
    pub final_error: f64,
    /// `max_k | |x - x_hat|_2 - sqrt(2) d((x, x_hat), diagonal) |`
    pub identity_error: f64,
    pub verdict: Verdict,
    #[serde(skip)]
    pub error_norm: Vec<f64>,
}

impl ObserverReport {
    pub fn verdict_line(&self) -> String {
        let v = match self.verdict {
            Verdict::Yes => "yes",
            Verdict::No => "no",
            Verdict::Inconclusive => "inconclusive",
        };
        format!("robust distributed observer: {v}")
    }
}

/// Error decay of a composite trajectory against the certificate envelope;
/// `cert = None` means the small-gain test did not certify the observer.
pub fn observer_error_decay(traj: &Trajectory, os: &ObserverSpec, cert: Option<&Certificate>, tol: f64) -> Result<ObserverReport> {
    let mut error_norm = Vec::with_capacity(traj.len());
    let mut identity_error = 0.0f64;
    for k in 0..traj.len() {
        let (x, xh) = split_pairs(traj.state(k), os.dim);
        let e = lp_norm(&x.sub(&xh)?);
        let d = pair_dist_to_diagonal(&x, &xh)?;
        identity_error = identity_error.max((e - std::f64::consts::SQRT_2 * d).abs());
        error_norm.push(e);
    }
    let t0 = traj.times[0];
    let e0 = error_norm[0];
    let (m, a) = cert.map_or((1.0, 0.0), |c| (c.overshoot, c.decay));
    let margins: Vec<f64> =
        traj.times.iter().zip(&error_norm).map(|(t, e)| m * (-a * (t - t0)).exp() * e0 - e).collect();
    let envelope = MarginSeries::new("observer_envelope", traj.times.clone(), margins, tol, 0)?;
    let positive: Vec<usize> = (0..error_norm.len()).filter(|&k| error_norm[k] > 0.0).collect();
    let fitted = if positive.len() >= 2 {
        let ts: Vec<f64> = positive.iter().map(|&k| traj.times[k]).collect();
        let vs: Vec<f64> = positive.iter().map(|&k| error_norm[k]).collect();
        fit_decay(&ts, &vs, None).ok()
    } else {
        None
    };
    let identically_zero = error_norm.iter().all(|e| *e == 0.0);
    let growing = fitted.map_or(false, |f| f.a <= 0.0) || traj.diagnostics.overflow;
    let verdict = if growing {
        Verdict::No
    } else if cert.is_some() && envelope.pass && (identically_zero || fitted.map_or(false, |f| f.a > 0.0)) {
        Verdict::Yes
    } else {
        Verdict::Inconclusive
    };
    Ok(ObserverReport {
        certified: cert.is_some(),
        envelope,
        fitted,
        initial_error: e0,
        final_error: *error_norm.last().unwrap_or(&0.0),
        identity_error,
        verdict,
        error_norm,
    })
}
