//! Subsystem dynamics, zero-boundary truncation of infinite interconnections,
//! and fixed-step RK4 integration.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gainop::GainSpec;
use crate::seqspace::{aggregate, euclid, lp_norm, Exponent, SetSpec, TruncSeq};

/// Dense row-major matrix, written as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = scale;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `out += scale * self * x`
    #[inline]
    pub fn mul_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o += scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn frobenius(&self) -> f64 {
        euclid(&self.data)
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.rows];
        self.mul_add(x, 1.0, &mut y);
        y.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Mat {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::InvalidSpec("ragged matrix".into()));
        }
        Mat::new(r, c, rows.into_iter().flatten().collect())
    }
}

impl From<Mat> for Vec<Vec<f64>> {
    fn from(m: Mat) -> Self {
        m.data.chunks(m.cols.max(1)).take(m.rows).map(|c| c.to_vec()).collect()
    }
}

/// Where a term reads its state from, relative to the owning block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    #[default]
    Own,
    Neighbor { offset: isize },
}

/// Time factor multiplying a term: `bias + amplitude * sin(omega * t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulation {
    Constant,
    Sinusoid { bias: f64, amplitude: f64, omega: f64, #[serde(default)] phase: f64 },
}

impl Default for Modulation {
    fn default() -> Self {
        Modulation::Constant
    }
}

impl Modulation {
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Modulation::Constant => 1.0,
            Modulation::Sinusoid { bias, amplitude, omega, phase } => bias + amplitude * (omega * t + phase).sin(),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match *self {
            Modulation::Constant => 1.0,
            Modulation::Sinusoid { bias, amplitude, .. } => bias.abs() + amplitude.abs(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Modulation::Constant)
    }
}

/// Scalar nonlinearities with known Lipschitz constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    Saturation { level: f64 },
    Sin,
    Cubic,
    /// Piecewise-linear interpolation, constant outside the table.
    Lookup { xs: Vec<f64>, ys: Vec<f64> },
}

impl Nonlinearity {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Nonlinearity::Saturation { level } => s.clamp(-level, *level),
            Nonlinearity::Sin => s.sin(),
            Nonlinearity::Cubic => s * s * s,
            Nonlinearity::Lookup { xs, ys } => {
                if s <= xs[0] {
                    return ys[0];
                }
                let k = xs.partition_point(|&x| x < s);
                if k >= xs.len() {
                    return ys[ys.len() - 1];
                }
                let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
                y0 + (y1 - y0) * (s - x0) / (x1 - x0)
            }
        }
    }

    /// Lipschitz constant on `|s| <= radius`.
    pub fn lipschitz(&self, radius: f64) -> f64 {
        match self {
            Nonlinearity::Saturation { .. } | Nonlinearity::Sin => 1.0,
            Nonlinearity::Cubic => 3.0 * radius * radius,
            Nonlinearity::Lookup { xs, ys } => xs
                .windows(2)
                .zip(ys.windows(2))
                .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
                .fold(0.0, f64::max),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Nonlinearity::Saturation { level } if !(*level > 0.0) => {
                Err(Error::InvalidSpec("saturation level must be positive".into()))
            }
            Nonlinearity::Lookup { xs, ys } => {
                if xs.len() < 2 || xs.len() != ys.len() || xs.windows(2).any(|w| !(w[0] < w[1])) {
                    Err(Error::InvalidSpec("lookup table needs >= 2 strictly increasing abscissae".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// One additive piece of a block right-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    /// `m(t) * M x_src`
    Linear {
        matrix: Mat,
        #[serde(default)]
        source: Source,
        #[serde(default)]
        modulation: Modulation,
    },
    /// `m(t) * B u_i`
    Input {
        matrix: Mat,
        #[serde(default)]
        modulation: Modulation,
    },
    /// `m(t) * out * phi(weights . x_src)`
    Scalar {
        func: Nonlinearity,
        weights: Vec<f64>,
        out: Vec<f64>,
        #[serde(default)]
        source: Source,
        #[serde(default)]
        modulation: Modulation,
    },
    /// A constant drift; only the clock block uses it.
    Constant { value: Vec<f64> },
}

impl Term {
    fn source(&self) -> Option<Source> {
        match self {
            Term::Linear { source, .. } | Term::Scalar { source, .. } => Some(*source),
            _ => None,
        }
    }

    fn modulation(&self) -> Modulation {
        match self {
            Term::Linear { modulation, .. } | Term::Input { modulation, .. } | Term::Scalar { modulation, .. } => {
                *modulation
            }
            Term::Constant { .. } => Modulation::Constant,
        }
    }
}

/// Local Lyapunov function `V_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalLyapunov {
    /// `x^T P x`
    Quadratic { weight: Mat },
    /// `scale * |x|_{A_i}^power`
    DistancePower { scale: f64, power: f64 },
    /// `(x - x_hat)^T P (x - x_hat)` on a paired block `(x, x_hat)`.
    PairQuadratic { weight: Mat },
    Zero,
}

impl LocalLyapunov {
    pub fn eval(&self, x: &[f64], set: &crate::seqspace::SetDesc) -> Result<f64> {
        Ok(match self {
            LocalLyapunov::Quadratic { weight } => weight.quad_form(x),
            LocalLyapunov::DistancePower { scale, power } => scale * crate::seqspace::block_dist(x, set)?.powf(*power),
            LocalLyapunov::PairQuadratic { weight } => {
                let h = x.len() / 2;
                let e: Vec<f64> = (0..h).map(|k| x[k] - x[h + k]).collect();
                weight.quad_form(&e)
            }
            LocalLyapunov::Zero => 0.0,
        })
    }
}

/// One subsystem `x_i' = f_i(x_i, neighbours, u_i, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub dim: usize,
    #[serde(default)]
    pub input_dim: usize,
    pub terms: Vec<Term>,
    pub lyapunov: LocalLyapunov,
    /// Declared Lipschitz constant of `f_i` in the joint argument.
    #[serde(default)]
    pub lipschitz: Option<f64>,
}

impl SubsystemSpec {
    pub fn is_time_varying(&self) -> bool {
        self.terms.iter().any(|t| !t.modulation().is_constant())
    }

    pub fn neighbor_offsets(&self) -> Vec<isize> {
        let mut v: Vec<isize> = self
            .terms
            .iter()
            .filter_map(|t| match t.source() {
                Some(Source::Neighbor { offset }) => Some(offset),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Upper bound of the Lipschitz constant of `f_i` jointly in
    /// `(x_i, neighbours, u_i)` on the ball of the given radius.
    pub fn lipschitz_bound(&self, radius: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| match t {
                Term::Linear { matrix, modulation, .. } | Term::Input { matrix, modulation } => {
                    modulation.sup_abs() * matrix.frobenius()
                }
                Term::Scalar { func, weights, out, modulation, .. } => {
                    let w = euclid(weights);
                    modulation.sup_abs() * euclid(out) * w * func.lipschitz(w * radius)
                }
                Term::Constant { .. } => 0.0,
            })
            .sum()
    }

    fn validate(&self, neighbor_dim: impl Fn(isize) -> usize) -> Result<()> {
        let n = self.dim;
        if n == 0 {
            return Err(Error::InvalidSpec("subsystem dimension must be positive".into()));
        }
        for t in &self.terms {
            match t {
                Term::Linear { matrix, source, .. } => {
                    let src = match source {
                        Source::Own => n,
                        Source::Neighbor { offset } => {
                            if *offset == 0 {
                                return Err(Error::InvalidSpec("neighbor offset 0".into()));
                            }
                            neighbor_dim(*offset)
                        }
                    };
                    if matrix.rows() != n || matrix.cols() != src {
                        return Err(Error::DimensionMismatch { expected: n * src, found: matrix.rows() * matrix.cols() });
                    }
                }
                Term::Input { matrix, .. } => {
                    if matrix.rows() != n || matrix.cols() != self.input_dim {
                        return Err(Error::DimensionMismatch {
                            expected: n * self.input_dim,
                            found: matrix.rows() * matrix.cols(),
                        });
                    }
                }
                Term::Scalar { func, weights, out, source, .. } => {
                    func.validate()?;
                    let src = match source {
                        Source::Own => n,
                        Source::Neighbor { offset } => neighbor_dim(*offset),
                    };
                    if weights.len() != src || out.len() != n {
                        return Err(Error::DimensionMismatch { expected: src, found: weights.len() });
                    }
                }
                Term::Constant { value } => {
                    if value.len() != n {
                        return Err(Error::DimensionMismatch { expected: n, found: value.len() });
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn eval(&self, tau: f64, x: &[f64], state: &BlockView<'_>, index: usize, u: &[f64], out: &mut [f64]) {
        for t in &self.terms {
            match t {
                Term::Linear { matrix, source, modulation } => {
                    let src = state.source(index, *source, x);
                    if let Some(src) = src {
                        matrix.mul_add(src, modulation.value(tau), out);
                    }
                }
                Term::Input { matrix, modulation } => matrix.mul_add(u, modulation.value(tau), out),
                Term::Scalar { func, weights, out: dir, source, modulation } => {
                    if let Some(src) = state.source(index, *source, x) {
                        let s: f64 = weights.iter().zip(src).map(|(a, b)| a * b).sum();
                        let v = modulation.value(tau) * func.eval(s);
                        for (o, d) in out.iter_mut().zip(dir) {
                            *o += v * d;
                        }
                    }
                }
                Term::Constant { value } => {
                    for (o, v) in out.iter_mut().zip(value) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Read-only view of a flat truncated state.
struct BlockView<'a> {
    state: &'a [f64],
    offsets: &'a [usize],
    dims: &'a [usize],
    first: usize,
}

impl<'a> BlockView<'a> {
    /// State read by a term of block `i`: the block itself, a neighbour, or
    /// `None` for neighbours outside the truncation (zero boundary).
    #[inline]
    fn source(&self, i: usize, source: Source, own: &'a [f64]) -> Option<&'a [f64]> {
        match source {
            Source::Own => Some(own),
            Source::Neighbor { offset } => {
                let j = i as isize + offset;
                if j < self.first as isize || j as usize >= self.dims.len() {
                    None
                } else {
                    let j = j as usize;
                    Some(&self.state[self.offsets[j]..self.offsets[j] + self.dims[j]])
                }
            }
        }
    }
}

/// A finite ODE `x' = F(t, x, u)` with a block structure.
pub trait OdeSystem: Sync {
    fn block_dims(&self) -> &[usize];
    fn input_dims(&self) -> &[usize];
    fn rhs(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]);

    fn dim(&self) -> usize {
        self.block_dims().iter().sum()
    }
}

/// An infinite network: prefix subsystems followed by a repeated tail
/// subsystem whose neighbour pattern shifts with the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub prefix: Vec<SubsystemSpec>,
    pub tail: SubsystemSpec,
    pub gain: GainSpec,
    pub sets: SetSpec,
    pub p: Exponent,
    pub q: Exponent,
    /// Block 0 is a clock `y' = 1` whose state replaces `t` in every modulation.
    #[serde(default)]
    pub clock: bool,
}

impl NetworkSpec {
    #[inline]
    pub fn subsystem(&self, i: usize) -> &SubsystemSpec {
        self.prefix.get(i).unwrap_or(&self.tail)
    }

    pub fn is_time_varying(&self) -> bool {
        self.prefix.iter().chain(std::iter::once(&self.tail)).any(|s| s.is_time_varying())
    }

    pub fn dims(&self, n: usize) -> Vec<usize> {
        (0..n).map(|i| self.subsystem(i).dim).collect()
    }

    pub fn input_dims(&self, n: usize) -> Vec<usize> {
        (0..n).map(|i| self.subsystem(i).input_dim).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.gain.validate()?;
        self.sets.validate()?;
        let limit = self.prefix.len() + 64;
        for i in 0..limit.max(1) {
            let sub = self.subsystem(i);
            sub.validate(|off| {
                let j = i as isize + off;
                if j < 0 {
                    sub.dim
                } else {
                    self.subsystem(j as usize).dim
                }
            })?;
        }
        Ok(())
    }
}

/// Zero-boundary truncation to the first `n` blocks.
#[derive(Debug, Clone)]
pub struct TruncatedNetwork<'a> {
    net: &'a NetworkSpec,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    input_dims: Vec<usize>,
    input_offsets: Vec<usize>,
}

pub fn truncate(net: &NetworkSpec, n: usize) -> Result<TruncatedNetwork<'_>> {
    if n < net.prefix.len() {
        return Err(Error::Precondition(format!(
            "truncation {n} shorter than the explicit prefix ({})",
            net.prefix.len()
        )));
    }
    net.validate()?;
    let dims = net.dims(n);
    let input_dims = net.input_dims(n);
    let offsets = prefix_sums(&dims);
    let input_offsets = prefix_sums(&input_dims);
    Ok(TruncatedNetwork { net, dims, offsets, input_dims, input_offsets })
}

fn prefix_sums(v: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    v.iter()
        .map(|d| {
            let o = acc;
            acc += d;
            o
        })
        .collect()
}

impl TruncatedNetwork<'_> {
    pub fn blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn network(&self) -> &NetworkSpec {
        self.net
    }
}

impl OdeSystem for TruncatedNetwork<'_> {
    fn block_dims(&self) -> &[usize] {
        &self.dims
    }

    fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    fn rhs(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let first = usize::from(self.net.clock);
        let tau = if self.net.clock { x[0] } else { t };
        let view = BlockView { state: x, offsets: &self.offsets, dims: &self.dims, first };
        for i in 0..self.dims.len() {
            let (o, n) = (self.offsets[i], self.dims[i]);
            let (uo, m) = (self.input_offsets[i], self.input_dims[i]);
            let out = &mut dx[o..o + n];
            out.iter_mut().for_each(|v| *v = 0.0);
            self.net.subsystem(i).eval(tau, &x[o..o + n], &view, i, &u[uo..uo + m], out);
        }
    }
}

/// Per-block values with a repeated tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockValues {
    #[serde(default)]
    pub prefix: Vec<Vec<f64>>,
    pub tail: Vec<f64>,
}

impl BlockValues {
    pub fn uniform(v: Vec<f64>) -> Self {
        Self { prefix: Vec::new(), tail: v }
    }

    pub fn block(&self, i: usize) -> &[f64] {
        self.prefix.get(i).unwrap_or(&self.tail)
    }

    /// Flattened values for the given block input dimensions; blocks without
    /// inputs are skipped.
    fn flat(&self, dims: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(dims.iter().sum());
        for (i, &m) in dims.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let b = self.block(i);
            if b.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: b.len() });
            }
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    fn lq(&self, dims: &[usize], q: Exponent) -> Result<f64> {
        let mut terms = Vec::new();
        for (i, &m) in dims.iter().enumerate() {
            if m > 0 {
                let b = self.block(i);
                if b.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, found: b.len() });
                }
                terms.push(euclid(b));
            }
        }
        Ok(aggregate(terms, q))
    }
}

/// External input `u(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSignal {
    Zero,
    Constant { value: BlockValues },
    /// `values[k]` on `[breaks[k], breaks[k+1])`, zero before `breaks[0]`.
    Piecewise { breaks: Vec<f64>, values: Vec<BlockValues> },
    /// `u_i(t) = amplitude_i * sin(omega t + i * phase_step)`.
    Sinusoid { amplitude: BlockValues, omega: f64, #[serde(default)] phase_step: f64 },
}

impl Default for InputSignal {
    fn default() -> Self {
        InputSignal::Zero
    }
}

impl InputSignal {
    pub fn eval(&self, t: f64, dims: &[usize]) -> Result<Vec<f64>> {
        let total: usize = dims.iter().sum();
        match self {
            InputSignal::Zero => Ok(vec![0.0; total]),
            InputSignal::Constant { value } => value.flat(dims),
            InputSignal::Piecewise { breaks, values } => {
                if breaks.len() != values.len() {
                    return Err(Error::InvalidSpec("piecewise input needs one value per break".into()));
                }
                let k = breaks.partition_point(|&b| b <= t);
                if k == 0 {
                    Ok(vec![0.0; total])
                } else {
                    values[k - 1].flat(dims)
                }
            }
            InputSignal::Sinusoid { amplitude, omega, phase_step } => {
                let mut out = Vec::with_capacity(total);
                for (i, &m) in dims.iter().enumerate() {
                    if m == 0 {
                        continue;
                    }
                    let s = (omega * t + i as f64 * phase_step).sin();
                    let a = amplitude.block(i);
                    if a.len() != m {
                        return Err(Error::DimensionMismatch { expected: m, found: a.len() });
                    }
                    out.extend(a.iter().map(|v| v * s));
                }
                Ok(out)
            }
        }
    }

    /// Upper bound on `|u|_{q,inf}` over the given blocks.
    pub fn sup_norm(&self, dims: &[usize], q: Exponent) -> Result<f64> {
        match self {
            InputSignal::Zero => Ok(0.0),
            InputSignal::Constant { value } => value.lq(dims, q),
            InputSignal::Piecewise { values, .. } => {
                values.iter().map(|v| v.lq(dims, q)).try_fold(0.0f64, |a, b| b.map(|b| a.max(b)))
            }
            InputSignal::Sinusoid { amplitude, .. } => amplitude.lq(dims, q),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, InputSignal::Zero)
    }
}

pub const DEFAULT_DT: f64 = 1e-3;

/// Indices `0, stride, 2 stride, ...` plus the last index.
pub fn strided(len: usize, stride: usize) -> impl Iterator<Item = usize> {
    let stride = stride.max(1);
    (0..len).filter(move |k| k % stride == 0 || *k + 1 == len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub defect_every: usize,
    /// Local defect above this triggers a warning record.
    pub defect_warn: f64,
    /// Any state component beyond this magnitude counts as divergence.
    pub overflow: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { defect_every: 50, defect_warn: 1e-6, overflow: 1e150 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub max_defect: f64,
    pub defect_warnings: Vec<(f64, f64)>,
    pub overflow: bool,
}

/// Time-sampled solution of a truncated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub dims: Vec<usize>,
    pub input_dims: Vec<usize>,
    states: Vec<f64>,
    pub dt: f64,
    pub p: Exponent,
    pub input: InputSignal,
    pub diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.states[k * d..(k + 1) * d]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn seq(&self, k: usize) -> TruncSeq {
        TruncSeq::from_flat(self.state(k), &self.dims, self.p).expect("trajectory layout")
    }

    pub fn block_offsets(&self) -> Vec<usize> {
        prefix_sums(&self.dims)
    }

    pub fn block<'a>(&'a self, k: usize, i: usize, offsets: &[usize]) -> &'a [f64] {
        &self.state(k)[offsets[i]..offsets[i] + self.dims[i]]
    }

    pub fn input_at(&self, k: usize) -> Result<Vec<f64>> {
        self.input.eval(self.times[k], &self.input_dims)
    }

    /// Writes `t,block,coord,value` rows.
    /// Long-format CSV of every `stride`-th sample; the last sample is always written.
    pub fn write_csv<W: Write>(&self, w: W, stride: usize) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "block", "coord", "value"])?;
        let offsets = self.block_offsets();
        for k in strided(self.len(), stride) {
            let t = format!("{}", self.times[k]);
            for (i, &n) in self.dims.iter().enumerate() {
                for c in 0..n {
                    let v = self.state(k)[offsets[i] + c];
                    wr.write_record([t.as_str(), &i.to_string(), &c.to_string(), &format!("{v}")])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Compact little-endian layout: magic `SGTR`, version, sample count,
    /// block count, block dims, then per sample the time followed by the state.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"SGTR")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.dims.len() as u64)?;
        for &d in &self.dims {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for k in 0..self.len() {
            w.write_f64::<LittleEndian>(self.times[k])?;
            for &v in self.state(k) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Reads the binary layout back into `(times, dims, flat states)`.
    pub fn read_binary<R: Read>(mut r: R) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SGTR" {
            return Err(Error::InvalidSpec("not a trajectory file".into()));
        }
        let _version = r.read_u32::<LittleEndian>()?;
        let samples = r.read_u64::<LittleEndian>()? as usize;
        let blocks = r.read_u64::<LittleEndian>()? as usize;
        let dims: Vec<usize> = (0..blocks).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<_>>()?;
        let dim: usize = dims.iter().sum();
        let mut times = Vec::with_capacity(samples);
        let mut states = Vec::with_capacity(samples * dim);
        for _ in 0..samples {
            times.push(r.read_f64::<LittleEndian>()?);
            for _ in 0..dim {
                states.push(r.read_f64::<LittleEndian>()?);
            }
        }
        Ok((times, dims, states))
    }
}

fn rk4_step<S: OdeSystem + ?Sized>(
    sys: &S,
    input: &InputSignal,
    t: f64,
    h: f64,
    x: &[f64],
    scratch: &mut [Vec<f64>; 5],
    out: &mut [f64],
) -> Result<()> {
    let idims = sys.input_dims();
    let u0 = input.eval(t, idims)?;
    let um = input.eval(t + 0.5 * h, idims)?;
    let u1 = input.eval(t + h, idims)?;
    let [k1, k2, k3, k4, tmp] = scratch;
    sys.rhs(t, x, &u0, k1);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    sys.rhs(t + 0.5 * h, tmp, &um, k2);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    sys.rhs(t + 0.5 * h, tmp, &um, k3);
    for i in 0..x.len() {
        tmp[i] = x[i] + h * k3[i];
    }
    sys.rhs(t + h, tmp, &u1, k4);
    for i in 0..x.len() {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

/// Classical RK4 on a fixed grid `t0, t0 + dt, ..., t0 + T`, every step recorded.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    input: &InputSignal,
    t0: f64,
    horizon: f64,
    dt: f64,
    p: Exponent,
    opts: IntegrateOptions,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::InvalidSpec(format!("need dt > 0 and T >= 0 (dt = {dt}, T = {horizon})")));
    }
    let dim = sys.dim();
    if x0.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    let steps = (horizon / dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity((steps + 1) * dim);
    times.push(t0);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut next = vec![0.0; dim];
    let mut half = vec![0.0; dim];
    let mut probe = vec![0.0; dim];
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; dim]);
    let mut diag = Diagnostics::default();
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        rk4_step(sys, input, t, dt, &x, &mut scratch, &mut next)?;
        if next.iter().any(|v| !v.is_finite()) {
            if k == 0 {
                return Err(Error::NonFinite(format!("right-hand side at t = {t}")));
            }
            diag.overflow = true;
            break;
        }
        if opts.defect_every > 0 && k % opts.defect_every == 0 {
            rk4_step(sys, input, t, 0.5 * dt, &x, &mut scratch, &mut half)?;
            rk4_step(sys, input, t + 0.5 * dt, 0.5 * dt, &half, &mut scratch, &mut probe)?;
            let defect = next.iter().zip(&probe).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            diag.max_defect = diag.max_defect.max(defect);
            if defect > opts.defect_warn {
                diag.defect_warnings.push((t, defect));
            }
        }
        std::mem::swap(&mut x, &mut next);
        times.push(t0 + (k + 1) as f64 * dt);
        states.extend_from_slice(&x);
        diag.steps += 1;
        if x.iter().any(|v| v.abs() > opts.overflow) {
            diag.overflow = true;
            break;
        }
    }
    if diag.overflow {
        log::warn!("integration stopped early at t = {}", times.last().copied().unwrap_or(t0));
    }
    Ok(Trajectory {
        times,
        dims: sys.block_dims().to_vec(),
        input_dims: sys.input_dims().to_vec(),
        states,
        dt,
        p,
        input: input.clone(),
        diagnostics: diag,
    })
}

/// Zero-extends a truncated initial state to the first `n` blocks of `net`.
pub fn embed(net: &NetworkSpec, x0: &TruncSeq, n: usize) -> Result<Vec<f64>> {
    if x0.len() > n {
        return Err(Error::Precondition(format!("initial state has {} blocks, truncation {n}", x0.len())));
    }
    let dims = net.dims(n);
    let mut flat = Vec::with_capacity(dims.iter().sum());
    for (i, &d) in dims.iter().enumerate() {
        match x0.block(i) {
            Some(b) if b.len() == d => flat.extend_from_slice(b),
            Some(b) => return Err(Error::DimensionMismatch { expected: d, found: b.len() }),
            None => flat.extend(std::iter::repeat(0.0).take(d)),
        }
    }
    Ok(flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n: usize,
    pub n_large: usize,
    /// `sup_t |x_N(t) - x_{factor N}(t)|_p` over the first `n` blocks.
    pub sup_distance: f64,
    pub at_time: f64,
}

/// Sensitivity to the zero-boundary truncation: integrates at `n` and
/// `factor * n` blocks and compares the shared blocks.
#[allow(clippy::too_many_arguments)]
pub fn truncation_probe(
    net: &NetworkSpec,
    n: usize,
    factor: usize,
    x0: &TruncSeq,
    input: &InputSignal,
    horizon: f64,
    dt: f64,
) -> Result<ProbeReport> {
    let large = n * factor.max(1);
    let small_sys = truncate(net, n)?;
    let large_sys = truncate(net, large)?;
    let opts = IntegrateOptions { defect_every: 0, ..Default::default() };
    let a = integrate(&small_sys, &embed(net, x0, n)?, input, 0.0, horizon, dt, net.p, opts)?;
    let b = integrate(&large_sys, &embed(net, x0, large)?, input, 0.0, horizon, dt, net.p, opts)?;
    let dims = net.dims(n);
    let width: usize = dims.iter().sum();
    let mut report = ProbeReport { n, n_large: large, sup_distance: 0.0, at_time: 0.0 };
    for k in 0..a.len().min(b.len()) {
        let diff: Vec<f64> = a.state(k).iter().zip(&b.state(k)[..width]).map(|(x, y)| x - y).collect();
        let d = lp_norm(&TruncSeq::from_flat(&diff, &dims, net.p)?);
        if d > report.sup_distance {
            report.sup_distance = d;
            report.at_time = a.times[k];
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub block: usize,
    pub declared: f64,
    pub worst_ratio: f64,
    pub pass: bool,
}

/// Samples random pairs on a ball and compares difference quotients of the
/// block right-hand side with the declared Lipschitz constant.
pub fn check_lipschitz(net: &NetworkSpec, block: usize, radius: f64, samples: usize, seed: u64) -> Result<LipschitzReport> {
    let sub = net.subsystem(block);
    let declared = sub
        .lipschitz
        .ok_or_else(|| Error::Precondition(format!("block {block} declares no Lipschitz constant")))?;
    let reach = sub.neighbor_offsets().iter().map(|o| o.unsigned_abs()).max().unwrap_or(0);
    let n = block + reach + 1;
    let sys = truncate(net, n.max(net.prefix.len()))?;
    let dims = sys.block_dims().to_vec();
    let offsets = prefix_sums(&dims);
    let (o, d) = (offsets[block], dims[block]);
    let m = sub.input_dim;
    let idims = sys.input_dims().to_vec();
    let uo = prefix_sums(&idims)[block];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = sys.dim();
    let utotal: usize = idims.iter().sum();
    let mut worst = 0.0f64;
    let mut fx = vec![0.0; total];
    let mut fy = vec![0.0; total];
    for _ in 0..samples {
        let x: Vec<f64> = (0..total).map(|_| rng.gen_range(-radius..radius)).collect();
        let y: Vec<f64> = (0..total).map(|_| rng.gen_range(-radius..radius)).collect();
        let ux: Vec<f64> = (0..utotal).map(|_| rng.gen_range(-radius..radius)).collect();
        let uy: Vec<f64> = (0..utotal).map(|_| rng.gen_range(-radius..radius)).collect();
        let t = rng.gen_range(0.0..10.0);
        sys.rhs(t, &x, &ux, &mut fx);
        sys.rhs(t, &y, &uy, &mut fy);
        let df: Vec<f64> = (o..o + d).map(|k| fx[k] - fy[k]).collect();
        // only the coordinates block `block` actually reads
        let mut dz2 = 0.0;
        let mut read = vec![block as isize];
        read.extend(sub.neighbor_offsets().iter().map(|off| block as isize + off));
        for j in read {
            if j >= 0 && (j as usize) < dims.len() && !(net.clock && j == 0) {
                let j = j as usize;
                for k in offsets[j]..offsets[j] + dims[j] {
                    dz2 += (x[k] - y[k]).powi(2);
                }
            }
        }
        for k in uo..uo + m {
            dz2 += (ux[k] - uy[k]).powi(2);
        }
        if dz2 > 0.0 {
            worst = worst.max(euclid(&df) / dz2.sqrt());
        }
    }
    Ok(LipschitzReport { block, declared, worst_ratio: worst, pass: worst <= declared + 1e-9 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gainop::{CouplingRule, RateRule};
    use crate::seqspace::SetDesc;

    fn exp(p: f64) -> Exponent {
        Exponent::new(p).unwrap()
    }

    fn gain() -> GainSpec {
        GainSpec {
            lambda: RateRule::constant(1.0),
            gamma: CouplingRule::zero(),
            gamma_u: RateRule::constant(1.0),
            alpha_lo: 1.0,
            alpha_hi: 1.0,
            null_blocks: vec![],
        }
    }

    pub(crate) fn chain(a: f64, c: f64) -> NetworkSpec {
        let lin = |offset: Option<isize>, v: f64| Term::Linear {
            matrix: Mat::scalar(v),
            source: offset.map_or(Source::Own, |offset| Source::Neighbor { offset }),
            modulation: Modulation::Constant,
        };
        let mut terms = vec![lin(None, a), Term::Input { matrix: Mat::scalar(1.0), modulation: Modulation::Constant }];
        if c != 0.0 {
            terms.push(lin(Some(-1), c));
            terms.push(lin(Some(1), c));
        }
        NetworkSpec {
            prefix: vec![],
            tail: SubsystemSpec {
                dim: 1,
                input_dim: 1,
                terms,
                lyapunov: LocalLyapunov::Quadratic { weight: Mat::scalar(1.0) },
                lipschitz: Some(a.abs() + 2.0 * c.abs() + 1.0),
            },
            gain: gain(),
            sets: SetSpec::origin(),
            p: exp(2.0),
            q: exp(2.0),
            clock: false,
        }
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let net = chain(-1.0, 0.0);
        let sys = truncate(&net, 1).unwrap();
        let tr = integrate(&sys, &[1.0], &InputSignal::Zero, 0.0, 1.0, 1e-3, exp(2.0), Default::default()).unwrap();
        assert_eq!(tr.len(), 1001);
        assert!((tr.last_state()[0] - (-1.0f64).exp()).abs() < 1e-8);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn decoupled_truncation_is_exact() {
        let net = chain(-0.5, 0.0);
        let x0 = TruncSeq::from_blocks(vec![vec![1.0], vec![-2.0], vec![0.5]], exp(2.0));
        let r = truncation_probe(&net, 3, 3, &x0, &InputSignal::Zero, 1.0, 1e-2).unwrap();
        assert_eq!(r.sup_distance, 0.0);
    }

    #[test]
    fn banded_first_derivative_independent_of_truncation() {
        let net = chain(-1.0, 0.3);
        let n = 10;
        let small = truncate(&net, n).unwrap();
        let large = truncate(&net, 2 * n).unwrap();
        let mut x = vec![0.0; n];
        for (i, v) in x.iter_mut().enumerate().take(n - 1) {
            *v = (i as f64 + 1.0).sin();
        }
        let mut xl = x.clone();
        xl.resize(2 * n, 0.0);
        let (mut ds, mut dl) = (vec![0.0; n], vec![0.0; 2 * n]);
        small.rhs(0.0, &x, &vec![0.0; n], &mut ds);
        large.rhs(0.0, &xl, &vec![0.0; 2 * n], &mut dl);
        assert_eq!(&ds[..n - 1], &dl[..n - 1]);
    }

    #[test]
    fn zero_tail_stays_zero_beyond_reach() {
        // one-directional coupling towards lower indices: block i reads i+1 only
        let mut net = chain(-1.0, 0.0);
        net.tail.terms.push(Term::Linear {
            matrix: Mat::scalar(0.4),
            source: Source::Neighbor { offset: 1 },
            modulation: Modulation::Constant,
        });
        let sys = truncate(&net, 8).unwrap();
        let x0 = vec![1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let tr = integrate(&sys, &x0, &InputSignal::Zero, 0.0, 2.0, 1e-2, exp(2.0), Default::default()).unwrap();
        assert!(tr.last_state()[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_is_an_equilibrium() {
        let net = chain(-1.0, 0.1);
        let sys = truncate(&net, 20).unwrap();
        let tr = integrate(&sys, &vec![0.0; 20], &InputSignal::Zero, 0.0, 1.0, 1e-2, exp(2.0), Default::default()).unwrap();
        assert!(tr.last_state().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overflow_truncates_record() {
        let net = chain(50.0, 0.0);
        let sys = truncate(&net, 1).unwrap();
        let opts = IntegrateOptions { overflow: 1e10, ..Default::default() };
        let tr = integrate(&sys, &[1.0], &InputSignal::Zero, 0.0, 10.0, 1e-2, exp(2.0), opts).unwrap();
        assert!(tr.diagnostics.overflow);
        assert!(tr.len() < 1001);
    }

    #[test]
    fn rejects_bad_arguments() {
        let net = chain(-1.0, 0.0);
        let sys = truncate(&net, 2).unwrap();
        assert!(integrate(&sys, &[1.0], &InputSignal::Zero, 0.0, 1.0, 1e-2, exp(2.0), Default::default()).is_err());
        assert!(integrate(&sys, &[1.0, 0.0], &InputSignal::Zero, 0.0, 1.0, 0.0, exp(2.0), Default::default()).is_err());
        let mut bad = chain(-1.0, 0.0);
        bad.tail.terms.push(Term::Linear { matrix: Mat::scalar(1.0), source: Source::Neighbor { offset: 0 }, modulation: Modulation::Constant });
        assert!(truncate(&bad, 3).is_err());
    }

    #[test]
    fn input_norms() {
        let dims = [1usize, 1, 1, 1];
        let u = InputSignal::Constant { value: BlockValues::uniform(vec![0.5]) };
        assert!((u.sup_norm(&dims, exp(2.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(u.eval(3.0, &dims).unwrap(), vec![0.5; 4]);
        let pw = InputSignal::Piecewise {
            breaks: vec![1.0, 2.0],
            values: vec![BlockValues::uniform(vec![1.0]), BlockValues::uniform(vec![-3.0])],
        };
        assert_eq!(pw.eval(0.5, &dims).unwrap(), vec![0.0; 4]);
        assert_eq!(pw.eval(1.5, &dims).unwrap(), vec![1.0; 4]);
        assert_eq!(pw.eval(2.5, &dims).unwrap(), vec![-3.0; 4]);
        assert!((pw.sup_norm(&dims, exp(1.0)).unwrap() - 12.0).abs() < 1e-15);
        let s = InputSignal::Sinusoid { amplitude: BlockValues::uniform(vec![2.0]), omega: 3.0, phase_step: 0.7 };
        let bound = s.sup_norm(&dims, exp(2.0)).unwrap();
        for k in 0..200 {
            let v = s.eval(k as f64 * 0.037, &dims).unwrap();
            assert!(euclid(&v) <= bound + 1e-12);
        }
    }

    #[test]
    fn nonlinear_terms_and_lipschitz_sampling() {
        let mut net = chain(-1.0, 0.2);
        net.tail.terms.push(Term::Scalar {
            func: Nonlinearity::Saturation { level: 0.5 },
            weights: vec![1.0],
            out: vec![0.3],
            source: Source::Neighbor { offset: 1 },
            modulation: Modulation::Sinusoid { bias: 1.0, amplitude: 0.5, omega: 2.0, phase: 0.0 },
        });
        net.tail.terms.push(Term::Scalar {
            func: Nonlinearity::Lookup { xs: vec![-1.0, 0.0, 2.0], ys: vec![1.0, 0.0, 1.0] },
            weights: vec![1.0],
            out: vec![0.1],
            source: Source::Own,
            modulation: Modulation::Constant,
        });
        let bound = net.tail.lipschitz_bound(3.0);
        net.tail.lipschitz = Some(bound);
        let rep = check_lipschitz(&net, 3, 3.0, 1000, 7).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.worst_ratio > 0.5);

        net.tail.lipschitz = Some(0.2);
        assert!(!check_lipschitz(&net, 3, 3.0, 1000, 7).unwrap().pass);
    }

    #[test]
    fn lookup_interpolates() {
        let f = Nonlinearity::Lookup { xs: vec![0.0, 1.0, 3.0], ys: vec![0.0, 2.0, 0.0] };
        assert_eq!(f.eval(-1.0), 0.0);
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(2.0), 1.0);
        assert_eq!(f.eval(5.0), 0.0);
        assert_eq!(f.lipschitz(1.0), 2.0);
    }

    #[test]
    fn binary_and_csv_export() {
        let net = chain(-1.0, 0.1);
        let sys = truncate(&net, 3).unwrap();
        let tr = integrate(&sys, &[1.0, 0.0, -1.0], &InputSignal::Zero, 0.0, 0.05, 1e-2, exp(2.0), Default::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_binary(&mut buf).unwrap();
        let (times, dims, states) = Trajectory::read_binary(buf.as_slice()).unwrap();
        assert_eq!(times, tr.times);
        assert_eq!(dims, tr.dims);
        assert_eq!(&states[3..6], tr.state(1));
        let mut csv = Vec::new();
        tr.write_csv(&mut csv, 1).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,block,coord,value\n"));
        assert_eq!(text.lines().count(), 1 + 6 * 3);
    }

    fn chain_matrix(n: usize, a: f64, c: f64) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                a
            } else if i.abs_diff(j) == 1 {
                c
            } else {
                0.0
            }
        })
    }

    /// Taylor series with scaling and squaring; entries here are O(1).
    fn expm(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
        let n = m.nrows();
        let scaled = m / 16.0;
        let mut term = nalgebra::DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..4 {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn chain_matches_matrix_exponential() {
        let n = 50;
        let net = chain(-1.0, 0.1);
        let sys = truncate(&net, n).unwrap();
        let mut x0 = vec![0.0; n];
        x0[0] = 1.0;
        let tr = integrate(&sys, &x0, &InputSignal::Zero, 0.0, 1.0, 1e-3, exp(2.0), Default::default()).unwrap();
        let reference = expm(&chain_matrix(n, -1.0, 0.1)).column(0).into_owned();
        let err = tr.last_state().iter().zip(reference.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_input_reaches_linear_steady_state() {
        let n = 20;
        let net = chain(-1.0, 0.1);
        let sys = truncate(&net, n).unwrap();
        let u = InputSignal::Constant { value: BlockValues::uniform(vec![0.5]) };
        let tr = integrate(&sys, &vec![0.0; n], &u, 0.0, 40.0, 1e-2, exp(2.0), Default::default()).unwrap();
        let a = chain_matrix(n, -1.0, 0.1);
        let b = nalgebra::DVector::from_element(n, 0.5);
        let steady = -a.lu().solve(&b).unwrap();
        let err = tr.last_state().iter().zip(steady.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let net = chain(-1.0, 0.1);
        let sys = truncate(&net, 10).unwrap();
        let x0: Vec<f64> = (0..10).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let end = |dt: f64| {
            integrate(&sys, &x0, &InputSignal::Zero, 0.0, 2.0, dt, exp(2.0), Default::default()).unwrap().last_state().to_vec()
        };
        let dist = |a: &[f64], b: &[f64]| euclid(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        let (a, b, c) = (end(0.1), end(0.05), end(0.025));
        let ratio = dist(&a, &b) / dist(&b, &c);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn probe_shrinks_with_truncation() {
        let net = chain(-1.0, 0.1);
        let x0 = TruncSeq::from_blocks(vec![vec![1.0]; 4], exp(2.0));
        let sweep: Vec<f64> = [6, 10, 16]
            .iter()
            .map(|&n| truncation_probe(&net, n, 2, &x0, &InputSignal::Zero, 3.0, 1e-2).unwrap().sup_distance)
            .collect();
        assert!(sweep[0] > sweep[1] && sweep[1] > sweep[2], "{sweep:?}");
        assert!(sweep[0] > 0.0);
    }

    #[test]
    fn sets_with_diagonal_validate() {
        let s = SetSpec { prefix: vec![], tail: SetDesc::Diagonal };
        assert!(s.validate().is_ok());
    }
}
