//! Online contribution scores: `s <- decay * s + a` per step, where `a` is
//! the attention weight the entry received at that step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{check_decay, EntryId};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTracker {
    decay: f64,
    scores: HashMap<EntryId, f64>,
}

impl ScoreTracker {
    pub fn new(decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self {
            decay,
            scores: HashMap::new(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Starts tracking `id` with a score of 0. Re-registering is a no-op.
    pub fn register(&mut self, id: EntryId) {
        self.scores.entry(id).or_insert(0.0);
    }

    pub fn remove(&mut self, id: EntryId) -> Option<f64> {
        self.scores.remove(&id)
    }

    pub fn score(&self, id: EntryId) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn contains(&self, id: EntryId) -> bool {
        self.scores.contains_key(&id)
    }

    /// Applies one decay step. Every tracked entry is decayed; entries listed
    /// in `weights` additionally receive their weight. Validation happens
    /// before any score changes.
    pub fn update<I>(&mut self, weights: I) -> Result<()>
    where
        I: IntoIterator<Item = (EntryId, f64)>,
    {
        let weights: Vec<(EntryId, f64)> = weights.into_iter().collect();
        for &(id, w) in &weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::NegativeWeight { id: id.0, weight: w });
            }
            if !self.scores.contains_key(&id) {
                return Err(Error::UnknownEntry(id.0));
            }
        }
        if self.decay != 1.0 {
            for s in self.scores.values_mut() {
                *s *= self.decay;
            }
        }
        for (id, w) in weights {
            if let Some(s) = self.scores.get_mut(&id) {
                *s += w;
            }
        }
        Ok(())
    }
}

/// Unrolled score: `sum_tau decay^(T - tau) * a_tau` over a weight history
/// whose last element is the current step.
pub fn closed_form_score(weight_history: &[f64], decay: f64) -> Result<f64> {
    check_decay(decay)?;
    let last = weight_history.len();
    let mut total = 0.0;
    for (tau, &a) in weight_history.iter().enumerate() {
        if !a.is_finite() || a < 0.0 {
            return Err(Error::NegativeWeight {
                id: tau as u64,
                weight: a,
            });
        }
        let age = (last - 1 - tau) as i32;
        total += decay.powi(age) * a;
    }
    Ok(total)
}
