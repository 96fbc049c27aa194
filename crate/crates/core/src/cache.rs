//! Tripartite compressed KV cache.
//!
//! Every new token enters the proximity segment. When proximity overflows its
//! oldest token moves to the context segment; when context overflows its
//! lowest-scored token moves to the residual segment; when the residual
//! segment overflows, that token is fused into the residual slot whose key
//! has the largest dot product with its own key. Slots keep running means of
//! the keys and values fused into them along with a fusion count, and
//! attention over the cache adds `alpha * ln(fusion_count)` to each logit.

use std::collections::{HashMap, VecDeque};

use crate::attention::{compensated_attention, AttentionResult};
use crate::error::{Error, Result};
use crate::scoring::ScoreTracker;
use crate::types::{Budgets, CacheEntry, EntryId, RunConfig, Vector};

/// Original `(key, value, position)` triples fused into one residual slot.
pub type MergeLog = Vec<(Vector, Vector, usize)>;

#[derive(Debug, Clone)]
pub struct ZeroMergeCache {
    config: RunConfig,
    context: Vec<CacheEntry>,
    residual: Vec<CacheEntry>,
    proximity: VecDeque<CacheEntry>,
    tracker: ScoreTracker,
    steps: usize,
    next_id: u64,
    fusions: usize,
    audit: Option<HashMap<EntryId, MergeLog>>,
}

impl ZeroMergeCache {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            tracker: ScoreTracker::new(config.decay)?,
            config,
            context: Vec::new(),
            residual: Vec::new(),
            proximity: VecDeque::new(),
            steps: 0,
            next_id: 0,
            fusions: 0,
            audit: None,
        })
    }

    /// Records the original tokens behind every residual slot, for checking
    /// merged keys and values against their exact means.
    pub fn with_merge_audit(mut self) -> Self {
        self.audit = Some(HashMap::new());
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn budgets(&self) -> Budgets {
        self.config.budgets
    }

    /// Number of tokens ingested so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Total number of merge operations performed.
    pub fn fusions(&self) -> usize {
        self.fusions
    }

    pub fn len(&self) -> usize {
        self.context.len() + self.residual.len() + self.proximity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(context, residual, proximity)` occupancy.
    pub fn occupancy(&self) -> (usize, usize, usize) {
        (self.context.len(), self.residual.len(), self.proximity.len())
    }

    pub fn context(&self) -> &[CacheEntry] {
        &self.context
    }

    pub fn residual(&self) -> &[CacheEntry] {
        &self.residual
    }

    pub fn proximity(&self) -> &VecDeque<CacheEntry> {
        &self.proximity
    }

    pub fn tracker(&self) -> &ScoreTracker {
        &self.tracker
    }

    pub fn merge_log(&self, slot: EntryId) -> Option<&MergeLog> {
        self.audit.as_ref()?.get(&slot)
    }

    /// Entries in concatenation order (context, residual, proximity) without
    /// copying.
    pub fn iter(&self) -> impl Iterator<Item = &CacheEntry> + '_ {
        self.context
            .iter()
            .chain(&self.residual)
            .chain(&self.proximity)
    }

    /// Owned copy of the cache in concatenation order, with current scores.
    pub fn snapshot(&self) -> Vec<CacheEntry> {
        self.iter()
            .map(|e| {
                let mut e = e.clone();
                e.score = self.tracker.score(e.id).unwrap_or(0.0);
                e
            })
            .collect()
    }

    /// Processes one decoding step: the new token joins the proximity segment,
    /// `q` attends over the whole cache with fusion compensation, scores are
    /// updated from the resulting weights and then the overflow cascade runs.
    /// Returned weights follow the pre-cascade concatenation order.
    pub fn step(&mut self, q: &Vector, k: Vector, v: Vector) -> Result<AttentionResult> {
        let dim = self.config.head_dim;
        q.check_dim(dim)?;
        k.check_dim(dim)?;
        v.check_dim(dim)?;

        self.push_proximity(k, v);
        let result = compensated_attention(q, self.iter(), self.config.compensation)?;

        let n_context = self.context.len();
        let n_residual = self.residual.len();
        let context_weights = self.context.iter().map(|e| e.id).zip(&result.weights);
        let proximity_weights = self
            .proximity
            .iter()
            .map(|e| e.id)
            .zip(&result.weights[n_context + n_residual..]);
        self.tracker
            .update(context_weights.chain(proximity_weights).map(|(id, &w)| (id, w)))?;

        self.cascade();
        Ok(result)
    }

    /// Inserts a token without attending, then runs the overflow cascade.
    pub fn ingest(&mut self, k: Vector, v: Vector) -> Result<()> {
        let dim = self.config.head_dim;
        k.check_dim(dim)?;
        v.check_dim(dim)?;
        self.push_proximity(k, v);
        self.cascade();
        Ok(())
    }

    fn push_proximity(&mut self, k: Vector, v: Vector) {
        self.steps += 1;
        let id = EntryId(self.next_id);
        self.next_id += 1;
        self.tracker.register(id);
        self.proximity
            .push_back(CacheEntry::new(id, k, v, self.steps));
    }

    fn cascade(&mut self) {
        let budgets = self.config.budgets;
        if self.proximity.len() <= budgets.proximity() {
            return;
        }
        let oldest = self.proximity.pop_front().expect("proximity overflowed");
        self.context.push(oldest);
        if self.context.len() <= budgets.context() {
            return;
        }

        let victim = lowest_score(&self.context, &self.tracker);
        let mut migrant = self.context.remove(victim);
        self.tracker.remove(migrant.id);
        migrant.score = 0.0;

        if self.residual.len() < budgets.residual() {
            if let Some(audit) = self.audit.as_mut() {
                audit.insert(
                    migrant.id,
                    vec![(migrant.key.clone(), migrant.value.clone(), migrant.origin_pos)],
                );
            }
            self.residual.push(migrant);
            return;
        }
        if self.residual.is_empty() {
            // No residual capacity: plain eviction.
            return;
        }

        let slot = select_merge_slot(&self.residual, &migrant.key).expect("non-empty residual");
        let target = &mut self.residual[slot];
        if let Some(audit) = self.audit.as_mut() {
            audit
                .entry(target.id)
                .or_default()
                .push((migrant.key.clone(), migrant.value.clone(), migrant.origin_pos));
        }
        *target = merge_into_slot(target, &migrant.key, &migrant.value);
        self.fusions += 1;
    }
}

/// Index of the lowest-scored entry; ties go to the earliest-inserted entry.
fn lowest_score(entries: &[CacheEntry], tracker: &ScoreTracker) -> usize {
    let mut best = 0;
    let mut best_key = (f64::INFINITY, EntryId(u64::MAX));
    for (i, e) in entries.iter().enumerate() {
        let key = (tracker.score(e.id).unwrap_or(0.0), e.id);
        if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best = i;
            best_key = key;
        }
    }
    best
}

/// Residual slot whose key has the largest dot product with `key`; ties go
/// to the lowest index.
pub fn select_merge_slot(residual: &[CacheEntry], key: &Vector) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, slot) in residual.iter().enumerate() {
        let d = slot.key.dot(key);
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::Empty)
}

/// Running-mean fusion of one token into a slot.
pub fn merge_into_slot(slot: &CacheEntry, k: &Vector, v: &Vector) -> CacheEntry {
    debug_assert!(slot.fusion_count >= 1);
    let w = slot.fusion_count as f64;
    let fuse = |acc: &Vector, x: &Vector| {
        Vector::from_raw(
            acc.iter()
                .zip(x.iter())
                .map(|(a, b)| (w * a + b) / (w + 1.0))
                .collect(),
        )
    };
    CacheEntry {
        id: slot.id,
        key: fuse(&slot.key, k),
        value: fuse(&slot.value, v),
        fusion_count: slot.fusion_count + 1,
        score: slot.score,
        origin_pos: slot.origin_pos,
    }
}

/// Independent caches for several attention heads, each with its own budgets.
#[derive(Debug, Clone)]
pub struct MultiHeadCache {
    heads: Vec<ZeroMergeCache>,
}

impl MultiHeadCache {
    pub fn uniform(heads: usize, config: RunConfig) -> Result<Self> {
        Self::with_budgets(config, vec![config.budgets; heads])
    }

    pub fn with_budgets(config: RunConfig, budgets: Vec<Budgets>) -> Result<Self> {
        let heads = budgets
            .into_iter()
            .map(|b| ZeroMergeCache::new(RunConfig { budgets: b, ..config }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[ZeroMergeCache] {
        &self.heads
    }

    pub fn head(&self, index: usize) -> Option<&ZeroMergeCache> {
        self.heads.get(index)
    }

    /// Steps every head with its own `(q, k, v)`.
    pub fn step(&mut self, inputs: Vec<(Vector, Vector, Vector)>) -> Result<Vec<AttentionResult>> {
        if inputs.len() != self.heads.len() {
            return Err(Error::DimensionMismatch {
                expected: self.heads.len(),
                actual: inputs.len(),
            });
        }
        self.heads
            .iter_mut()
            .zip(inputs)
            .map(|(head, (q, k, v))| head.step(&q, k, v))
            .collect()
    }
}
