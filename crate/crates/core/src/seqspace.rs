//! Truncated elements of block sequence spaces `l^p(N, (n_i))` and distances
//! to product sets.
//!
//! Every sequence is a finite prefix of explicit blocks followed by an
//! implicit zero tail. Block norms are Euclidean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent of an `l^p` space, restricted to `[1, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Exponent(f64);

impl Exponent {
    pub fn new(p: f64) -> Result<Self> {
        if p.is_finite() && p >= 1.0 {
            Ok(Self(p))
        } else {
            Err(Error::InvalidExponent(p))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Exponent {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        Self::new(p)
    }
}

impl From<Exponent> for f64 {
    fn from(p: Exponent) -> f64 {
        p.0
    }
}

/// Block dimensions `(n_i)`: an explicit prefix and a constant tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    #[serde(default)]
    pub prefix: Vec<usize>,
    pub tail: usize,
}

impl BlockDims {
    pub fn uniform(n: usize) -> Self {
        Self { prefix: Vec::new(), tail: n }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tail == 0 || self.prefix.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec("block dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Dimension of block `i` (zero-based).
    #[inline]
    pub fn dim(&self, i: usize) -> usize {
        self.prefix.get(i).copied().unwrap_or(self.tail)
    }

    pub fn first(&self, count: usize) -> Vec<usize> {
        (0..count).map(|i| self.dim(i)).collect()
    }
}

#[inline]
pub fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `(sum_i t_i^p)^{1/p}` for nonnegative block contributions `t_i`.
pub fn aggregate<I: IntoIterator<Item = f64>>(terms: I, p: Exponent) -> f64 {
    let p = p.get();
    if p == 1.0 {
        return terms.into_iter().sum();
    }
    let terms: Vec<f64> = terms.into_iter().collect();
    // scale by the largest term so large p does not overflow
    let scale = terms.iter().cloned().fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = terms.iter().map(|t| (t / scale).powf(p)).sum();
    scale * s.powf(1.0 / p)
}

/// A finite truncation of an element of `l^p(N, (n_i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncSeq {
    blocks: Vec<Vec<f64>>,
    p: Exponent,
}

impl TruncSeq {
    pub fn new(dims: &BlockDims, blocks: Vec<Vec<f64>>, p: Exponent) -> Result<Self> {
        dims.validate()?;
        for (i, b) in blocks.iter().enumerate() {
            if b.len() != dims.dim(i) {
                return Err(Error::DimensionMismatch { expected: dims.dim(i), found: b.len() });
            }
        }
        Ok(Self { blocks, p })
    }

    /// Builds a sequence from blocks whose lengths define the dims.
    pub fn from_blocks(blocks: Vec<Vec<f64>>, p: Exponent) -> Self {
        Self { blocks, p }
    }

    pub fn from_flat(flat: &[f64], dims: &[usize], p: Exponent) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if total != flat.len() {
            return Err(Error::DimensionMismatch { expected: total, found: flat.len() });
        }
        let mut blocks = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &n in dims {
            blocks.push(flat[off..off + n].to_vec());
            off += n;
        }
        Ok(Self { blocks, p })
    }

    pub fn zeros(dims: &BlockDims, count: usize, p: Exponent) -> Self {
        Self { blocks: (0..count).map(|i| vec![0.0; dims.dim(i)]).collect(), p }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn p(&self) -> Exponent {
        self.p
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> Option<&[f64]> {
        self.blocks.get(i).map(|b| b.as_slice())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    /// Appends `count` explicit zero blocks of dimension taken from `dims`.
    pub fn extend_zeros(&mut self, dims: &BlockDims, count: usize) {
        let start = self.blocks.len();
        for i in start..start + count {
            self.blocks.push(vec![0.0; dims.dim(i)]);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn sub(&self, other: &TruncSeq) -> Result<TruncSeq> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: other.len() });
        }
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        Ok(TruncSeq { blocks, p: self.p })
    }
}

/// `|x|_p` with Euclidean block norms.
pub fn lp_norm(x: &TruncSeq) -> f64 {
    aggregate(x.blocks.iter().map(|b| euclid(b)), x.p)
}

/// A closed nonempty subset of `R^{n_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetDesc {
    Origin,
    Full,
    Point { at: Vec<f64> },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `{(x, x_hat) : x = x_hat}` on a paired block of even dimension.
    Diagonal,
}

impl SetDesc {
    pub fn validate(&self) -> Result<()> {
        match self {
            SetDesc::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(Error::InvalidSpec("box bounds differ in length".into()));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                    return Err(Error::EmptySet("box with lo > hi or non-finite bound".into()));
                }
                Ok(())
            }
            SetDesc::Point { at } if at.iter().any(|a| !a.is_finite()) => {
                Err(Error::InvalidSpec("non-finite point".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn contains_zero(&self) -> bool {
        match self {
            SetDesc::Origin | SetDesc::Full | SetDesc::Diagonal => true,
            SetDesc::Point { at } => at.iter().all(|&a| a == 0.0),
            SetDesc::Box { lo, hi } => lo.iter().zip(hi).all(|(l, h)| *l <= 0.0 && 0.0 <= *h),
        }
    }

    /// `sup_{a in A_i} |a|`, or `None` for unbounded sets.
    pub fn radius(&self) -> Option<f64> {
        match self {
            SetDesc::Origin => Some(0.0),
            SetDesc::Point { at } => Some(euclid(at)),
            SetDesc::Box { lo, hi } => {
                let corner: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| l.abs().max(h.abs())).collect();
                Some(euclid(&corner))
            }
            SetDesc::Full | SetDesc::Diagonal => None,
        }
    }

    /// Some element of the set, used to build members of the product set.
    pub fn element(&self, n: usize) -> Vec<f64> {
        match self {
            SetDesc::Point { at } => at.clone(),
            SetDesc::Box { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| 0.0f64.clamp(*l, *h)).collect()
            }
            _ => vec![0.0; n],
        }
    }
}

/// Exact Euclidean distance from `x` to the set `a`.
pub fn block_dist(x: &[f64], a: &SetDesc) -> Result<f64> {
    let mismatch = |n: usize| Error::DimensionMismatch { expected: n, found: x.len() };
    match a {
        SetDesc::Origin => Ok(euclid(x)),
        SetDesc::Full => Ok(0.0),
        SetDesc::Point { at } => {
            if at.len() != x.len() {
                return Err(mismatch(at.len()));
            }
            Ok(x.iter().zip(at).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        }
        SetDesc::Box { lo, hi } => {
            if lo.len() != x.len() {
                return Err(mismatch(lo.len()));
            }
            let s: f64 = x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| {
                    let d = v - v.clamp(*l, *h);
                    d * d
                })
                .sum();
            Ok(s.sqrt())
        }
        SetDesc::Diagonal => {
            if x.len() % 2 != 0 {
                return Err(mismatch(x.len() + 1));
            }
            let half = x.len() / 2;
            let d: Vec<f64> = (0..half).map(|k| x[k] - x[half + k]).collect();
            Ok(euclid(&d) / std::f64::consts::SQRT_2)
        }
    }
}

/// The product set `X ∩ (A_1 × A_2 × ...)` given by a prefix and a tail rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSpec {
    #[serde(default)]
    pub prefix: Vec<SetDesc>,
    pub tail: SetDesc,
}

impl SetSpec {
    pub fn origin() -> Self {
        Self { prefix: Vec::new(), tail: SetDesc::Origin }
    }

    /// Checks every descriptor and that the product set meets `X`: the tail
    /// must contain 0, so any prefix selection extends by zeros.
    pub fn validate(&self) -> Result<()> {
        for d in self.prefix.iter().chain(std::iter::once(&self.tail)) {
            d.validate()?;
        }
        if !self.tail.contains_zero() {
            return Err(Error::EmptySet("tail set must contain 0 for the product set to meet l^p".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, i: usize) -> &SetDesc {
        self.prefix.get(i).unwrap_or(&self.tail)
    }

    /// `||A|| = sup_{a in A} |a|_p`, or `None` when unbounded.
    pub fn bound(&self, p: Exponent) -> Option<f64> {
        if self.tail.radius() != Some(0.0) {
            return None;
        }
        let radii: Option<Vec<f64>> = self.prefix.iter().map(|d| d.radius()).collect();
        radii.map(|r| aggregate(r, p))
    }

    /// Some member of `A` restricted to the first `count` blocks.
    pub fn element(&self, dims: &[usize], p: Exponent) -> TruncSeq {
        TruncSeq::from_blocks(dims.iter().enumerate().map(|(i, &n)| self.get(i).element(n)).collect(), p)
    }
}

/// `|x|_A` computed block-wise: `(sum_i |x_i|_{A_i}^p)^{1/p}`, including the
/// zero blocks of `x` that still face a prefix descriptor.
pub fn set_dist(x: &TruncSeq, a: &SetSpec) -> Result<f64> {
    a.validate()?;
    let mut terms = Vec::with_capacity(x.len().max(a.prefix.len()));
    for (i, b) in x.blocks.iter().enumerate() {
        terms.push(block_dist(b, a.get(i))?);
    }
    for d in a.prefix.iter().skip(x.len()) {
        if let SetDesc::Point { at } = d {
            terms.push(euclid(at));
        } else if let SetDesc::Box { lo, hi } = d {
            let z = vec![0.0; lo.len()];
            terms.push(block_dist(&z, &SetDesc::Box { lo: lo.clone(), hi: hi.clone() })?);
        }
    }
    Ok(aggregate(terms, x.p))
}

/// Distance of `(x, y)` to the diagonal `{(z, z)}` in the paired norm
/// `sqrt(|x|_p^2 + |y|_p^2)`; the infimum sits at the midpoint.
pub fn pair_dist_to_diagonal(x: &TruncSeq, y: &TruncSeq) -> Result<f64> {
    if x.p != y.p {
        return Err(Error::InvalidSpec("exponents differ".into()));
    }
    Ok(lp_norm(&x.sub(y)?) / std::f64::consts::SQRT_2)
}
