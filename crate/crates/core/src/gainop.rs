//! The gain operator `Psi = Lambda^{-1} Gamma` of an infinite network, its
//! spectral-radius bracket, and the weight vector `mu` behind the composite
//! Lyapunov certificate.
//!
//! Coupling matrices are described by an explicit prefix of rows followed by
//! an eventually-Toeplitz tail: every row `i >= prefix_rows` has entries
//! `gamma_{i, i+k}` for the offsets `k` of a finite band. Decay rates follow a
//! prefix plus a constant tail. With these two restrictions all column sums
//! and all tail checks are closed-form.

use std::collections::BTreeMap;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqspace::Exponent;

/// A positive sequence given by a prefix and a constant tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRule {
    #[serde(default)]
    pub prefix: Vec<f64>,
    pub tail: f64,
}

impl RateRule {
    pub fn constant(v: f64) -> Self {
        Self { prefix: Vec::new(), tail: v }
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        self.prefix.get(i).copied().unwrap_or(self.tail)
    }

    pub fn min(&self) -> f64 {
        self.prefix.iter().copied().fold(self.tail, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.prefix.iter().copied().fold(self.tail, f64::max)
    }

    fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.prefix.iter().copied().chain(std::iter::once(self.tail))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEntry {
    pub offset: isize,
    pub value: f64,
}

/// Sparse description of `Gamma = (gamma_ij)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingRule {
    /// Entries of the rows below `prefix_rows`.
    #[serde(default)]
    pub explicit: Vec<Entry>,
    /// Rows `< prefix_rows` take only explicit entries; later rows follow the band.
    #[serde(default)]
    pub prefix_rows: usize,
    #[serde(default)]
    pub band: Vec<BandEntry>,
}

impl CouplingRule {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Pure Toeplitz band from row 0 on.
    pub fn banded(band: &[(isize, f64)]) -> Self {
        Self {
            explicit: Vec::new(),
            prefix_rows: 0,
            band: band.iter().map(|&(offset, value)| BandEntry { offset, value }).collect(),
        }
    }

    pub fn tridiagonal(c: f64) -> Self {
        Self::banded(&[(-1, c), (1, c)])
    }

    fn validate(&self) -> Result<()> {
        for e in &self.explicit {
            if e.row >= self.prefix_rows {
                return Err(Error::UnsupportedTail(format!(
                    "explicit entry in row {} at or beyond prefix_rows = {}",
                    e.row, self.prefix_rows
                )));
            }
            if e.row == e.col {
                return Err(Error::InvalidSpec(format!("diagonal coupling gamma_{{{0},{0}}}", e.row)));
            }
            if !(e.value >= 0.0) || !e.value.is_finite() {
                return Err(Error::InvalidSpec(format!("coupling gain {} must be finite and >= 0", e.value)));
            }
        }
        for b in &self.band {
            if b.offset == 0 {
                return Err(Error::InvalidSpec("band offset 0 would couple a block to itself".into()));
            }
            if !(b.value >= 0.0) || !b.value.is_finite() {
                return Err(Error::InvalidSpec(format!("coupling gain {} must be finite and >= 0", b.value)));
            }
        }
        Ok(())
    }

    fn reach(&self) -> usize {
        self.band.iter().map(|b| b.offset.unsigned_abs()).max().unwrap_or(0)
    }

    fn band_sum(&self) -> f64 {
        self.band.iter().map(|b| b.value).sum()
    }

    fn max_explicit_col(&self) -> usize {
        self.explicit.iter().map(|e| e.col + 1).max().unwrap_or(0)
    }
}

/// Local dissipation data collected across the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSpec {
    /// Decay rates `lambda_i`.
    pub lambda: RateRule,
    #[serde(default)]
    pub gamma: CouplingRule,
    /// Input gains `gamma_iu`.
    pub gamma_u: RateRule,
    /// Uniform coercivity bounds `alpha_lo <= alpha_lo_i <= alpha_hi_i <= alpha_hi`.
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Blocks whose local Lyapunov function vanishes identically (a clock or
    /// an average state). They carry no weight in the composite function.
    #[serde(default)]
    pub null_blocks: Vec<usize>,
}

impl GainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.all().any(|l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidSpec("decay rates must be positive and finite".into()));
        }
        if self.gamma_u.all().any(|g| !(g >= 0.0) || !g.is_finite()) {
            return Err(Error::InvalidSpec("input gains must be finite and >= 0".into()));
        }
        if !(self.alpha_lo > 0.0 && self.alpha_lo <= self.alpha_hi && self.alpha_hi.is_finite()) {
            return Err(Error::InvalidSpec("need 0 < alpha_lo <= alpha_hi < inf".into()));
        }
        self.gamma.validate()
    }

    pub fn lambda_lo(&self) -> f64 {
        self.lambda.min()
    }

    pub fn lambda_hi(&self) -> f64 {
        self.lambda.max()
    }

    pub fn gamma_u_hi(&self) -> f64 {
        self.gamma_u.max()
    }

    pub fn is_null(&self, i: usize) -> bool {
        self.null_blocks.contains(&i)
    }
}

/// Nonnegative weights given by a prefix and a constant tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailWeights {
    pub prefix: Vec<f64>,
    pub tail: f64,
}

impl TailWeights {
    pub fn ones() -> Self {
        Self { prefix: Vec::new(), tail: 1.0 }
    }

    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        self.prefix.get(i).copied().unwrap_or(self.tail)
    }
}

/// Compressed sparse rows of a square truncation.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for (j, v) in r {
                col.push(j);
                val.push(v);
            }
            row_ptr.push(col.len());
        }
        Self { n, row_ptr, col, val }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col[a..b].iter().copied().zip(self.val[a..b].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn max_row_sum(&self) -> f64 {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        m
    }

    fn mul_shifted(&self, x: &[f64], shift: f64, y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = shift * x[i] + self.row(i).map(|(j, v)| v * x[j]).sum::<f64>();
        }
    }

    fn principal(&self, idx: &[usize]) -> Csr {
        let pos: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let rows = idx
            .iter()
            .map(|&i| self.row(i).filter_map(|(j, v)| pos.get(&j).map(|&k| (k, v))).collect())
            .collect();
        Csr::from_rows(rows)
    }
}

/// `Lambda`, `Gamma` and `Psi` as lazily evaluated infinite matrices.
#[derive(Debug, Clone)]
pub struct GainOperator {
    spec: GainSpec,
    /// From this index on every row and column is governed by the tail rules
    /// alone (columns additionally need `reach` extra indices).
    boundary: usize,
    reach: usize,
}

impl GainOperator {
    pub fn new(spec: GainSpec) -> Result<Self> {
        spec.validate()?;
        let boundary = [
            spec.gamma.prefix_rows,
            spec.gamma.max_explicit_col(),
            spec.lambda.prefix.len(),
            spec.gamma_u.prefix.len(),
            spec.null_blocks.iter().map(|i| i + 1).max().unwrap_or(0),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let reach = spec.gamma.reach();
        Ok(Self { spec, boundary, reach })
    }

    pub fn spec(&self) -> &GainSpec {
        &self.spec
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn reach(&self) -> usize {
        self.reach
    }

    #[inline]
    pub fn lambda(&self, i: usize) -> f64 {
        self.spec.lambda.at(i)
    }

    /// Nonzero entries `(j, gamma_ij)` of row `i`.
    pub fn gamma_row(&self, i: usize) -> Vec<(usize, f64)> {
        let g = &self.spec.gamma;
        if i < g.prefix_rows {
            g.explicit.iter().filter(|e| e.row == i && e.value > 0.0).map(|e| (e.col, e.value)).collect()
        } else {
            g.band
                .iter()
                .filter(|b| b.value > 0.0)
                .filter_map(|b| {
                    let j = i as isize + b.offset;
                    (j >= 0).then_some((j as usize, b.value))
                })
                .collect()
        }
    }

    /// Nonzero entries `(i, gamma_ij)` of column `j`.
    pub fn gamma_col(&self, j: usize) -> Vec<(usize, f64)> {
        let g = &self.spec.gamma;
        let mut out: Vec<(usize, f64)> =
            g.explicit.iter().filter(|e| e.col == j && e.value > 0.0).map(|e| (e.row, e.value)).collect();
        for b in g.band.iter().filter(|b| b.value > 0.0) {
            let i = j as isize - b.offset;
            if i >= g.prefix_rows as isize {
                out.push((i as usize, b.value));
            }
        }
        out
    }

    pub fn gamma_col_sum(&self, j: usize) -> f64 {
        self.gamma_col(j).iter().map(|(_, v)| v).sum()
    }

    /// Column sum of `Gamma` shared by every column `j >= boundary + reach`.
    pub fn tail_col_sum(&self) -> f64 {
        self.spec.gamma.band_sum()
    }

    /// `Psi_N`, the leading `n x n` principal truncation of `Psi`.
    pub fn psi_truncation(&self, n: usize) -> Csr {
        let rows = (0..n)
            .map(|i| {
                let l = self.lambda(i);
                self.gamma_row(i).into_iter().filter(|&(j, _)| j < n).map(|(j, v)| (j, v / l)).collect()
            })
            .collect();
        Csr::from_rows(rows)
    }

    /// `r` of the eventually-Toeplitz tail: the nonnegative Toeplitz operator
    /// with symbol `sum_k psi_k z^k` has spectral radius `sum_k psi_k`, and it
    /// is dominated entrywise by `Psi`, so this bounds `r(Psi)` from below.
    pub fn tail_radius(&self) -> f64 {
        self.tail_col_sum() / self.lambda(self.boundary)
    }

    /// `||Gamma||_{1,1}` computed exactly from the structural rule.
    pub fn gamma_norm_11_exact(&self) -> f64 {
        (0..self.boundary + self.reach + 1).map(|j| self.gamma_col_sum(j)).fold(self.tail_col_sum(), f64::max)
    }

    /// `[w^T Psi]_j` for weights with a constant tail.
    fn weighted_psi_col(&self, w: &TailWeights, j: usize) -> f64 {
        self.gamma_col(j).into_iter().map(|(i, v)| w.at(i) * v / self.lambda(i)).sum()
    }

    /// `[w^T Gamma]_j`.
    fn weighted_gamma_col(&self, w: &TailWeights, j: usize) -> f64 {
        self.gamma_col(j).into_iter().map(|(i, v)| w.at(i) * v).sum()
    }

    /// Number of leading indices that must be checked explicitly for a
    /// weight vector with `prefix_len` explicit entries.
    fn explicit_span(&self, prefix_len: usize) -> usize {
        prefix_len.max(self.boundary) + self.reach + 1
    }
}

/// Monotone estimates `sup_{j < N} sum_i gamma_ij` for each `N` of the schedule.
pub fn gamma_norm_11(op: &GainOperator, schedule: &[usize], cap: f64) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(schedule.len());
    let mut running = 0.0f64;
    let mut done = 0usize;
    for &n in schedule {
        for j in done..n {
            running = running.max(op.gamma_col_sum(j));
        }
        done = done.max(n);
        if !running.is_finite() || running > cap {
            return Err(Error::NonSummable(format!("column sum estimate {running} exceeds cap {cap} at N = {n}")));
        }
        out.push((n, running));
    }
    Ok(out)
}

/// Collatz-Wielandt bracket of the Perron root of one truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerronBound {
    pub n: usize,
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `lower` is still a certified bound.
    pub converged: bool,
}

pub const POWER_MAX_ITER: usize = 10_000;
pub const POWER_REL_TOL: f64 = 1e-10;
/// Shift as a fraction of the largest row sum.
pub const POWER_SHIFT: f64 = 0.1;

/// Spectral radius of a nonnegative matrix: the largest Perron root over its
/// strongly connected components. Each component is irreducible, and the
/// shift makes it primitive, so the shifted power iteration converges to a
/// strictly positive vector whose Collatz-Wielandt ratios bracket the root.
pub fn perron_root(m: &Csr) -> Result<PerronBound> {
    let mut g = DiGraph::<(), ()>::with_capacity(m.n, m.nnz());
    let nodes: Vec<_> = (0..m.n).map(|_| g.add_node(())).collect();
    for i in 0..m.n {
        for (j, v) in m.row(i) {
            if v > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut best = PerronBound { n: m.n, lower: 0.0, upper: 0.0, iterations: 0, converged: true };
    for comp in tarjan_scc(&g) {
        let mut idx: Vec<usize> = comp.iter().map(|n| n.index()).collect();
        idx.sort_unstable();
        let sub = m.principal(&idx);
        let b = if idx.len() == 1 {
            let d = sub.row(0).map(|(_, v)| v).sum::<f64>();
            PerronBound { n: 1, lower: d, upper: d, iterations: 0, converged: true }
        } else {
            irreducible_root(&sub)?
        };
        if b.upper > best.upper {
            best.upper = b.upper;
        }
        if b.lower > best.lower {
            best.lower = b.lower;
        }
        best.iterations = best.iterations.max(b.iterations);
        best.converged &= b.converged;
    }
    Ok(best)
}

fn irreducible_root(m: &Csr) -> Result<PerronBound> {
    let shift = POWER_SHIFT * m.max_row_sum();
    let mut x = vec![1.0; m.n];
    let mut y = vec![0.0; m.n];
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    for it in 1..=POWER_MAX_ITER {
        m.mul_shifted(&x, shift, &mut y);
        lo = f64::INFINITY;
        hi = 0.0f64;
        for (yi, xi) in y.iter().zip(&x) {
            let r = yi / xi - shift;
            lo = lo.min(r);
            hi = hi.max(r);
        }
        lo = lo.max(0.0);
        if hi - lo <= POWER_REL_TOL * hi {
            return Ok(PerronBound { n: m.n, lower: lo, upper: hi, iterations: it, converged: true });
        }
        let scale = y.iter().cloned().fold(0.0, f64::max);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / scale;
        }
    }
    log::warn!("power iteration stopped at the cap with spread {:e} (n = {})", hi - lo, m.n);
    Ok(PerronBound { n: m.n, lower: lo, upper: hi, iterations: POWER_MAX_ITER, converged: false })
}

/// Bracket of `r(Psi)`: lower bounds from truncations, an optional upper
/// bound from a positive weight certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralBracket {
    pub truncations: Vec<PerronBound>,
    /// `max_N r(Psi_N)`, a certified lower bound on `r(Psi)`.
    pub lower: f64,
    /// Spectral radius of the Toeplitz tail, a second certified lower bound.
    pub tail_lower: f64,
    pub upper: Option<f64>,
    pub converged: bool,
}

impl SpectralBracket {
    /// Best certified lower bound on `r(Psi)`.
    pub fn r_hat(&self) -> f64 {
        self.lower.max(self.tail_lower)
    }

    /// Width of `[max_N r(Psi_N), upper]`.
    pub fn width(&self) -> Option<f64> {
        self.upper.map(|u| u - self.lower)
    }
}

/// Evaluates `r(Psi_N)` along the schedule and tries to close the bracket
/// from above with the dual Neumann-series weights.
pub fn spectral_radius(op: &GainOperator, schedule: &[usize], tol: f64) -> Result<SpectralBracket> {
    if schedule.is_empty() {
        return Err(Error::InvalidSpec("empty truncation schedule".into()));
    }
    let mut truncations = Vec::with_capacity(schedule.len());
    for &n in schedule {
        truncations.push(perron_root(&op.psi_truncation(n))?);
    }
    let lower = truncations.iter().map(|b| b.lower).fold(0.0, f64::max);
    let settled = match truncations.as_slice() {
        [.., a, b] => (b.lower - a.lower).abs() < tol,
        _ => false,
    } && truncations.iter().all(|b| b.converged);
    let tail_lower = op.tail_radius();
    let r_hat = lower.max(tail_lower);
    let mut upper = Some(column_ratio(op, &TailWeights::ones()));
    if r_hat < 1.0 {
        let s = 0.5 * (1.0 + r_hat);
        if let Ok((w, _)) = dual_series(op, s, 1e-12) {
            let r = column_ratio(op, &w);
            upper = upper.map(|u| u.min(r));
        }
    }
    let upper = upper.filter(|u| u.is_finite());
    Ok(SpectralBracket { truncations, lower, tail_lower, upper, converged: settled && upper.is_some() })
}

/// `sup_j [w^T Psi]_j / w_j` over every index of the infinite operator.
pub fn column_ratio(op: &GainOperator, w: &TailWeights) -> f64 {
    let span = op.explicit_span(w.prefix.len());
    let head = (0..span).filter(|&j| w.at(j) > 0.0).map(|j| op.weighted_psi_col(w, j) / w.at(j));
    let tail = op.tail_col_sum() / op.lambda(span);
    head.fold(tail, f64::max)
}

/// True iff `[mu^T Psi]_i <= s mu_i` at every index, in which case `s`
/// bounds the Perron roots of every truncation and `r(Psi)` itself.
pub fn upper_bound_certificate(op: &GainOperator, mu: &TailWeights, s: f64) -> bool {
    if mu.tail <= 0.0 || mu.prefix.iter().any(|&m| m <= 0.0) {
        return false;
    }
    column_ratio(op, mu) <= s * (1.0 + 1e-12)
}

/// Truncated dual Neumann series `sum_{k<=K} s^{-k} 1^T Psi^k` on the
/// infinite operator, evaluated exactly: once a column lies `K * reach`
/// beyond the structural boundary its value equals the closed-form tail.
/// Returns the weights and the number of terms `K`; fails if the remainder
/// `s^{-K} sup_j [1^T Psi^K]_j` cannot be pushed below `remainder`.
pub fn dual_series(op: &GainOperator, s: f64, remainder: f64) -> Result<(TailWeights, usize)> {
    const MAX_TERMS: usize = 1 << 12;
    let tail_ratio = op.tail_radius();
    let mut terms = 16usize;
    loop {
        let exact = op.boundary + terms * op.reach + 1;
        let domain = exact + terms * op.reach + 1;
        let psi = op.psi_truncation(domain);
        // column view of the truncation
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); domain];
        for i in 0..domain {
            for (j, v) in psi.row(i) {
                cols[j].push((i, v));
            }
        }
        let mut v = vec![1.0; domain];
        let mut acc = vec![1.0; domain];
        let mut next = vec![0.0; domain];
        for _ in 0..terms {
            for (j, nj) in next.iter_mut().enumerate() {
                *nj = cols[j].iter().map(|&(i, p)| v[i] * p).sum::<f64>() / s;
            }
            std::mem::swap(&mut v, &mut next);
            for (a, b) in acc.iter_mut().zip(&v) {
                *a += b;
            }
        }
        let head_rem = v[..exact].iter().cloned().fold(0.0, f64::max);
        let tail_rem = (tail_ratio / s).powi(terms as i32);
        let rem = head_rem.max(tail_rem);
        if rem < remainder {
            let tail = if (tail_ratio / s - 1.0).abs() < 1e-300 {
                (terms + 1) as f64
            } else {
                let q = tail_ratio / s;
                (0..=terms).map(|k| q.powi(k as i32)).sum()
            };
            acc.truncate(exact);
            return Ok((TailWeights { prefix: acc, tail }, terms));
        }
        if terms >= MAX_TERMS || !rem.is_finite() {
            return Err(Error::Verification(format!(
                "series remainder {rem:e} did not fall below {remainder:e} within {terms} terms (s = {s})"
            )));
        }
        terms *= 2;
    }
}

/// Output of the weight construction together with its a-posteriori check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuResult {
    pub mu: TailWeights,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub lambda_inf: f64,
    /// Lemma-style target `(1 - r_hat) lambda_lo - rho`.
    pub lambda_target: f64,
    pub r_hat: f64,
    pub s: f64,
    pub rho: f64,
    pub terms: usize,
    /// Number of leading indices verified one by one; the rest is checked in closed form.
    pub checked: usize,
    /// `-[mu^T(-Lambda + Gamma)]_i / mu_i - lambda_target` per explicit index.
    pub margins: Vec<f64>,
    pub tail_margin: f64,
}

/// `[mu^T(-Lambda + Gamma)]_j / mu_j`, the quantity that must stay below `-lambda_inf`.
pub fn dissipation_ratio(op: &GainOperator, mu: &TailWeights, j: usize) -> f64 {
    -op.lambda(j) + op.weighted_gamma_col(mu, j) / mu.at(j)
}

/// Builds `mu` with `lambda_i mu_i` equal to the scaled dual Neumann series at
/// `s = (1 + r_hat) / 2`, then verifies the componentwise inequality and the
/// bound `lambda_inf >= (1 - r_hat) lambda_lo - rho`.
pub fn compute_mu(op: &GainOperator, r_hat: f64, rho: f64) -> Result<MuResult> {
    if !(r_hat < 1.0) {
        return Err(Error::Precondition(format!("spectral radius lower bound {r_hat} is not below 1")));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidSpec("rho must be positive".into()));
    }
    let spec = op.spec();
    let s = 0.5 * (1.0 + r_hat);
    let (nu, terms) = dual_series(op, s, rho / spec.lambda_hi())?;

    let span = op.explicit_span(nu.prefix.len());
    let mut mu = TailWeights {
        prefix: (0..span).map(|i| nu.at(i) / op.lambda(i)).collect(),
        tail: nu.tail / op.lambda(span),
    };
    let live = |i: &usize| !spec.is_null(*i);
    let top = (0..span).filter(live).map(|i| mu.at(i)).fold(mu.tail, f64::max);
    for m in mu.prefix.iter_mut() {
        *m /= top;
    }
    mu.tail /= top;

    let mu_lo = (0..span).filter(live).map(|i| mu.at(i)).fold(mu.tail, f64::min);
    let mu_hi = (0..span).filter(live).map(|i| mu.at(i)).fold(mu.tail, f64::max);
    if !(mu_lo > 0.0) {
        return Err(Error::Verification(format!("mu lower bound {mu_lo} is not positive")));
    }

    let lambda_target = (1.0 - r_hat) * spec.lambda_lo() - rho;
    let tail_ratio = -op.lambda(span) + op.tail_col_sum();
    let mut lambda_inf = -tail_ratio;
    let mut margins = Vec::with_capacity(span);
    for j in 0..span {
        let r = dissipation_ratio(op, &mu, j);
        if live(&j) {
            lambda_inf = lambda_inf.min(-r);
            margins.push(-r - lambda_target);
        } else {
            margins.push(f64::INFINITY);
        }
    }
    let tail_margin = -tail_ratio - lambda_target;
    if !(lambda_inf > 0.0) || lambda_inf < lambda_target {
        let worst = margins.iter().cloned().enumerate().fold((0, f64::INFINITY), |a, (i, m)| if m < a.1 { (i, m) } else { a });
        return Err(Error::Verification(format!(
            "lambda_inf = {lambda_inf} below target {lambda_target} (worst index {}, margin {:e}, tail margin {:e})",
            worst.0, worst.1, tail_margin
        )));
    }
    Ok(MuResult {
        mu,
        mu_lo,
        mu_hi,
        lambda_inf,
        lambda_target,
        r_hat,
        s,
        rho,
        terms,
        checked: span,
        margins,
        tail_margin,
    })
}

/// Composite eISS Lyapunov certificate `V = sum_i mu_i V_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub mu: TailWeights,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub lambda_inf: f64,
    pub p: Exponent,
    pub q: Exponent,
    /// `mu_hi * gamma_u_hi`
    pub input_gain: f64,
    /// `(mu_lo * alpha_lo, mu_hi * alpha_hi)`
    pub coercivity: (f64, f64),
    pub bracket: (f64, Option<f64>),
    /// Envelope overshoot `M = (mu_hi alpha_hi / (mu_lo alpha_lo))^{1/p}`.
    pub overshoot: f64,
    /// Envelope decay `a = lambda_inf / p`.
    pub decay: f64,
    #[serde(default)]
    pub null_blocks: Vec<usize>,
}

impl Certificate {
    #[inline]
    pub fn mu(&self, i: usize) -> f64 {
        if self.null_blocks.contains(&i) {
            0.0
        } else {
            self.mu.at(i)
        }
    }

    /// Lyapunov-comparison ISS gain `gamma(r) = (mu_hi g_u / (lambda_inf mu_lo alpha_lo))^{1/p} r^{q/p}`.
    pub fn iss_gain(&self, r: f64) -> f64 {
        let p = self.p.get();
        (self.input_gain / (self.lambda_inf * self.coercivity.0)).powf(1.0 / p) * r.powf(self.q.get() / p)
    }
}

pub fn assemble_certificate(gain: &GainSpec, mu: &MuResult, bracket: (f64, Option<f64>), p: Exponent, q: Exponent) -> Certificate {
    let lo = mu.mu_lo * gain.alpha_lo;
    let hi = mu.mu_hi * gain.alpha_hi;
    Certificate {
        mu: mu.mu.clone(),
        mu_lo: mu.mu_lo,
        mu_hi: mu.mu_hi,
        lambda_inf: mu.lambda_inf,
        p,
        q,
        input_gain: mu.mu_hi * gain.gamma_u_hi(),
        coercivity: (lo, hi),
        bracket,
        overshoot: (hi / lo).powf(1.0 / p.get()),
        decay: mu.lambda_inf / p.get(),
        null_blocks: gain.null_blocks.clone(),
    }
}

/// Default slack is `DEFAULT_RHO_FACTOR * lambda_lo`.
pub const DEFAULT_RHO_FACTOR: f64 = 1e-3;
/// Successive truncation roots closer than this count as converged.
pub const DEFAULT_BRACKET_TOL: f64 = 1e-3;
pub const DEFAULT_SCHEDULE: [usize; 4] = [16, 32, 64, 128];

pub fn default_rho(gain: &GainSpec) -> f64 {
    DEFAULT_RHO_FACTOR * gain.lambda_lo()
}

/// Outcome of the small-gain pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Certified,
    /// A certified lower bound on `r(Psi)` is at least 1.
    Refuted,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub status: Status,
    pub gamma_norm: Vec<(usize, f64)>,
    pub bracket: SpectralBracket,
    pub mu: Option<MuResult>,
    pub certificate: Option<Certificate>,
    pub reason: Option<String>,
}

/// `gamma_norm_11 -> spectral_radius -> compute_mu -> assemble_certificate`.
pub fn analyze(gain: &GainSpec, p: Exponent, q: Exponent, schedule: &[usize], tol: f64, rho: f64) -> Result<Analysis> {
    let op = GainOperator::new(gain.clone())?;
    let gamma_norm = gamma_norm_11(&op, schedule, f64::MAX)?;
    let bracket = spectral_radius(&op, schedule, tol)?;
    let r_hat = bracket.r_hat();
    if r_hat >= 1.0 {
        return Ok(Analysis {
            status: Status::Refuted,
            reason: Some(format!("spectral radius lower bound {r_hat} >= 1")),
            gamma_norm,
            bracket,
            mu: None,
            certificate: None,
        });
    }
    match compute_mu(&op, r_hat, rho) {
        Ok(mu) => {
            let cert = assemble_certificate(gain, &mu, (bracket.lower, bracket.upper), p, q);
            Ok(Analysis { status: Status::Certified, gamma_norm, bracket, mu: Some(mu), certificate: Some(cert), reason: None })
        }
        Err(e @ (Error::Verification(_) | Error::NoConvergence { .. })) => Ok(Analysis {
            status: Status::Inconclusive,
            reason: Some(e.to_string()),
            gamma_norm,
            bracket,
            mu: None,
            certificate: None,
        }),
        Err(e) => Err(e),
    }
}
