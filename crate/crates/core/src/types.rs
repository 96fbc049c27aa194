//! Value types shared across the cache policies, kernels and harness.

use std::ops::Deref;

use crate::error::{Error, Result};

/// A finite `d`-dimensional vector. Keys, values and queries all use this.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(index) = components.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn from_raw(components: Vec<f64>) -> Self {
        debug_assert!(components.iter().all(|c| c.is_finite()));
        Self(components)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(components: Vec<f64>) -> Result<Self> {
        Self::new(components)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Insertion counter assigned to every token a cache ingests.
///
/// Identities survive migration between segments; merged residual slots keep
/// the identity of the first token fused into them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntryId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub id: EntryId,
    pub key: Vector,
    pub value: Vector,
    /// Number of original tokens represented by this entry.
    pub fusion_count: u64,
    /// Decayed contribution score. Always 0 for residual slots.
    pub score: f64,
    /// 1-based position of the first token represented by this entry.
    pub origin_pos: usize,
}

impl CacheEntry {
    pub fn new(id: EntryId, key: Vector, value: Vector, origin_pos: usize) -> Self {
        Self {
            id,
            key,
            value,
            fusion_count: 1,
            score: 0.0,
            origin_pos,
        }
    }

    pub fn is_merged(&self) -> bool {
        self.fusion_count > 1
    }
}

/// Token budgets for the context, residual and proximity segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Budgets {
    context: usize,
    residual: usize,
    proximity: usize,
}

impl Budgets {
    pub fn new(context: usize, residual: usize, proximity: usize) -> Result<Self> {
        if proximity == 0 {
            return Err(Error::ZeroProximity);
        }
        Ok(Self {
            context,
            residual,
            proximity,
        })
    }

    /// Builds budgets from signed inputs, rejecting negatives.
    pub fn from_signed(context: i64, residual: i64, proximity: i64) -> Result<Self> {
        let check = |field, value: i64| {
            usize::try_from(value).map_err(|_| Error::NegativeBudget { field, value })
        };
        Self::new(
            check("context", context)?,
            check("residual", residual)?,
            check("proximity", proximity)?,
        )
    }

    /// Splits `total` slots in the default proximity : context : residual
    /// ratio of 3 : 4 : 2. The proximity segment always gets at least one slot.
    pub fn split(total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::ZeroProximity);
        }
        let residual = total * 2 / 9;
        let context = total * 4 / 9;
        Self::new(context, residual, total - context - residual)
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn residual(&self) -> usize {
        self.residual
    }

    pub fn proximity(&self) -> usize {
        self.proximity
    }

    pub fn total(&self) -> usize {
        self.context + self.residual + self.proximity
    }
}

pub const DEFAULT_DECAY: f64 = 0.98;
pub const DEFAULT_COMPENSATION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub head_dim: usize,
    /// Geometric decay applied to contribution scores each step.
    pub decay: f64,
    /// Weight of the `ln(fusion_count)` logit bonus.
    pub compensation: f64,
    pub budgets: Budgets,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(head_dim: usize, budgets: Budgets) -> Self {
        Self {
            head_dim,
            decay: DEFAULT_DECAY,
            compensation: DEFAULT_COMPENSATION,
            budgets,
            seed: 0,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn with_compensation(mut self, compensation: f64) -> Self {
        self.compensation = compensation;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 {
            return Err(Error::ZeroHeadDim);
        }
        check_decay(self.decay)?;
        check_compensation(self.compensation)?;
        if self.budgets.proximity == 0 {
            return Err(Error::ZeroProximity);
        }
        Ok(())
    }
}

pub(crate) fn check_decay(decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::DecayOutOfRange(decay));
    }
    Ok(())
}

pub(crate) fn check_compensation(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::CompensationOutOfRange(alpha));
    }
    Ok(())
}
