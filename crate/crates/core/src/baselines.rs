//! Comparison cache policies sharing a single step interface.

use std::collections::VecDeque;
use std::fmt;

use crate::attention::{entry_attention, AttentionResult};
use crate::cache::ZeroMergeCache;
use crate::error::{Error, Result};
use crate::types::{check_decay, Budgets, CacheEntry, EntryId, RunConfig, Vector};

/// A streaming KV-cache policy for one attention head.
pub trait CachePolicy: Send {
    fn step(&mut self, q: &Vector, k: Vector, v: Vector) -> Result<AttentionResult>;

    /// Current contents in attention order.
    fn entries(&self) -> Vec<CacheEntry>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maximum number of entries, or `None` for unbounded policies.
    fn capacity(&self) -> Option<usize>;

    /// Fusion counts of the current entries, in attention order.
    fn fusion_counts(&self) -> Vec<u64> {
        vec![1; self.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    Full,
    Window { window: usize },
    SinkWindow { sink: usize, window: usize },
    HeavyHitter { budget: usize, window: usize },
    ZeroMerge { budgets: Budgets },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Window { .. } => "window",
            PolicyKind::SinkWindow { .. } => "sink-window",
            PolicyKind::HeavyHitter { .. } => "heavy-hitter",
            PolicyKind::ZeroMerge { .. } => "zeromerge",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicyKind::Window { window }
            | PolicyKind::SinkWindow { window, .. }
            | PolicyKind::HeavyHitter { window, .. }
                if window == 0 =>
            {
                Err(Error::InvalidPolicy("window must be at least 1".into()))
            }
            PolicyKind::ZeroMerge { budgets } if budgets.proximity() == 0 => Err(Error::ZeroProximity),
            _ => Ok(()),
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        match *self {
            PolicyKind::Full => None,
            PolicyKind::Window { window } => Some(window),
            PolicyKind::SinkWindow { sink, window } => Some(sink + window),
            PolicyKind::HeavyHitter { budget, window } => Some(budget + window),
            PolicyKind::ZeroMerge { budgets } => Some(budgets.total()),
        }
    }

    /// Instantiates the policy. `config.head_dim` applies to all policies;
    /// `decay` drives heavy-hitter and zeromerge scores, `compensation` only
    /// zeromerge. A zeromerge policy uses its own budgets, not `config.budgets`.
    pub fn build(&self, config: &RunConfig) -> Result<Box<dyn CachePolicy>> {
        self.validate()?;
        let dim = config.head_dim;
        Ok(match *self {
            PolicyKind::Full => Box::new(FullCache::new(dim)),
            PolicyKind::Window { window } => Box::new(WindowCache::new(dim, window)?),
            PolicyKind::SinkWindow { sink, window } => {
                Box::new(SinkWindowCache::new(dim, sink, window)?)
            }
            PolicyKind::HeavyHitter { budget, window } => {
                Box::new(HeavyHitterCache::new(dim, budget, window, config.decay)?)
            }
            PolicyKind::ZeroMerge { budgets } => {
                Box::new(ZeroMergeCache::new(RunConfig { budgets, ..*config })?)
            }
        })
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Full => write!(f, "full"),
            PolicyKind::Window { window } => write!(f, "window(w={window})"),
            PolicyKind::SinkWindow { sink, window } => write!(f, "sink-window(s={sink},w={window})"),
            PolicyKind::HeavyHitter { budget, window } => {
                write!(f, "heavy-hitter(h={budget},w={window})")
            }
            PolicyKind::ZeroMerge { budgets } => write!(
                f,
                "zeromerge(c={},r={},p={})",
                budgets.context(),
                budgets.residual(),
                budgets.proximity()
            ),
        }
    }
}

fn check_dims(dim: usize, q: &Vector, k: &Vector, v: &Vector) -> Result<()> {
    for x in [q, k, v] {
        if x.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: x.dim(),
            });
        }
    }
    Ok(())
}

fn require_window(window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::InvalidPolicy("window must be at least 1".into()));
    }
    Ok(())
}

/// Keeps every token.
#[derive(Debug, Clone)]
pub struct FullCache {
    dim: usize,
    entries: Vec<CacheEntry>,
}

impl FullCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }
}

impl CachePolicy for FullCache {
    fn step(&mut self, q: &Vector, k: Vector, v: Vector) -> Result<AttentionResult> {
        check_dims(self.dim, q, &k, &v)?;
        let pos = self.entries.len() + 1;
        self.entries
            .push(CacheEntry::new(EntryId(pos as u64 - 1), k, v, pos));
        entry_attention(q, &self.entries)
    }

    fn entries(&self) -> Vec<CacheEntry> {
        self.entries.clone()
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn capacity(&self) -> Option<usize> {
        None
    }
}

/// Keeps the newest `window` tokens. Eviction happens before attending, so
/// the query only sees the retained window.
#[derive(Debug, Clone)]
pub struct WindowCache {
    dim: usize,
    window: usize,
    steps: usize,
    entries: VecDeque<CacheEntry>,
}

impl WindowCache {
    pub fn new(dim: usize, window: usize) -> Result<Self> {
        require_window(window)?;
        Ok(Self {
            dim,
            window,
            steps: 0,
            entries: VecDeque::with_capacity(window + 1),
        })
    }
}

impl CachePolicy for WindowCache {
    fn step(&mut self, q: &Vector, k: Vector, v: Vector) -> Result<AttentionResult> {
        check_dims(self.dim, q, &k, &v)?;
        self.steps += 1;
        self.entries
            .push_back(CacheEntry::new(EntryId(self.steps as u64 - 1), k, v, self.steps));
        if self.entries.len() > self.window {
            self.entries.pop_front();
        }
        entry_attention(q, &self.entries)
    }

    fn entries(&self) -> Vec<CacheEntry> {
        self.entries.iter().cloned().collect()
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn capacity(&self) -> Option<usize> {
        Some(self.window)
    }
}

/// Keeps the first `sink` tokens forever plus the newest `window`.
#[derive(Debug, Clone)]
pub struct SinkWindowCache {
    sinks: Vec<CacheEntry>,
    window: WindowCache,
    sink: usize,
}

impl SinkWindowCache {
    pub fn new(dim: usize, sink: usize, window: usize) -> Result<Self> {
        Ok(Self {
            sinks: Vec::with_capacity(sink),
            window: WindowCache::new(dim, window)?,
            sink,
        })
    }
}

impl CachePolicy for SinkWindowCache {
    fn step(&mut self, q: &Vector, k: Vector, v: Vector) -> Result<AttentionResult> {
        check_dims(self.window.dim, q, &k, &v)?;
        let w = &mut self.window;
        w.steps += 1;
        let entry = CacheEntry::new(EntryId(w.steps as u64 - 1), k, v, w.steps);
        if self.sinks.len() < self.sink {
            self.sinks.push(entry);
        } else {
            w.entries.push_back(entry);
        }
        if w.entries.len() > w.window {
            w.entries.pop_front();
        }
        entry_attention(q, self.sinks.iter().chain(&w.entries))
    }

    fn entries(&self) -> Vec<CacheEntry> {
        self.sinks
            .iter()
            .chain(&self.window.entries)
            .cloned()
            .collect()
    }

    fn len(&self) -> usize {
        self.sinks.len() + self.window.entries.len()
    }

    fn capacity(&self) -> Option<usize> {
        Some(self.sink + self.window.window)
    }
}

/// Heavy-hitter eviction: a recent window plus up to `budget` older tokens
/// ranked by decayed cumulative attention. Tokens leaving the recent window
/// join the heavy set; when it overflows, the lowest-scored token (oldest on
/// ties) is dropped for good.
#[derive(Debug, Clone)]
pub struct HeavyHitterCache {
    dim: usize,
    budget: usize,
    window: usize,
    decay: f64,
    steps: usize,
    heavy: Vec<CacheEntry>,
    recent: VecDeque<CacheEntry>,
}

impl HeavyHitterCache {
    pub fn new(dim: usize, budget: usize, window: usize, decay: f64) -> Result<Self> {
        require_window(window)?;
        check_decay(decay)?;
        Ok(Self {
            dim,
            budget,
            window,
            decay,
            steps: 0,
            heavy: Vec::new(),
            recent: VecDeque::new(),
        })
    }
}

impl CachePolicy for HeavyHitterCache {
    fn step(&mut self, q: &Vector, k: Vector, v: Vector) -> Result<AttentionResult> {
        check_dims(self.dim, q, &k, &v)?;
        self.steps += 1;
        self.recent
            .push_back(CacheEntry::new(EntryId(self.steps as u64 - 1), k, v, self.steps));
        let result = entry_attention(q, self.heavy.iter().chain(&self.recent))?;
        for (e, &a) in self
            .heavy
            .iter_mut()
            .chain(self.recent.iter_mut())
            .zip(&result.weights)
        {
            e.score = self.decay * e.score + a;
        }

        if self.recent.len() > self.window {
            let oldest = self.recent.pop_front().expect("window overflowed");
            self.heavy.push(oldest);
            if self.heavy.len() > self.budget {
                let mut victim = 0;
                for (i, e) in self.heavy.iter().enumerate() {
                    let best = &self.heavy[victim];
                    if e.score < best.score || (e.score == best.score && e.id < best.id) {
                        victim = i;
                    }
                }
                self.heavy.remove(victim);
            }
        }
        Ok(result)
    }

    fn entries(&self) -> Vec<CacheEntry> {
        self.heavy.iter().chain(&self.recent).cloned().collect()
    }

    fn len(&self) -> usize {
        self.heavy.len() + self.recent.len()
    }

    fn capacity(&self) -> Option<usize> {
        Some(self.budget + self.window)
    }
}

impl CachePolicy for ZeroMergeCache {
    fn step(&mut self, q: &Vector, k: Vector, v: Vector) -> Result<AttentionResult> {
        ZeroMergeCache::step(self, q, k, v)
    }

    fn entries(&self) -> Vec<CacheEntry> {
        self.snapshot()
    }

    fn len(&self) -> usize {
        ZeroMergeCache::len(self)
    }

    fn capacity(&self) -> Option<usize> {
        Some(self.budgets().total())
    }

    fn fusion_counts(&self) -> Vec<u64> {
        self.iter().map(|e| e.fusion_count).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Step = (Vector, Vector, Vector);

    fn random_steps(seed: u64, n: usize, dim: usize) -> Vec<Step> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vec = |rng: &mut ChaCha8Rng| {
            Vector::new((0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        (0..n)
            .map(|_| (vec(&mut rng), vec(&mut rng), vec(&mut rng)))
            .collect()
    }

    fn run(policy: &mut dyn CachePolicy, steps: &[Step]) -> Vec<AttentionResult> {
        steps
            .iter()
            .map(|(q, k, v)| policy.step(q, k.clone(), v.clone()).unwrap())
            .collect()
    }

    fn positions(policy: &dyn CachePolicy) -> Vec<usize> {
        policy.entries().iter().map(|e| e.origin_pos).collect()
    }

    fn same_contents(a: &dyn CachePolicy, b: &dyn CachePolicy) -> bool {
        let (a, b) = (a.entries(), b.entries());
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.key == y.key && x.value == y.value && x.origin_pos == y.origin_pos)
    }

    #[test]
    fn full_grows_linearly() {
        let steps = random_steps(1, 12, 3);
        let mut full = FullCache::new(3);
        let out = run(&mut full, &steps);
        assert_eq!(out[0].output, steps[0].2);
        assert_eq!(full.len(), 12);
        assert_eq!(full.capacity(), None);
    }

    #[test]
    fn wide_window_equals_full() {
        let steps = random_steps(2, 10, 3);
        let full = run(&mut FullCache::new(3), &steps);
        let win = run(&mut WindowCache::new(3, 10).unwrap(), &steps);
        assert_eq!(full, win);
    }

    #[test]
    fn unit_window_returns_newest_value() {
        let steps = random_steps(3, 8, 2);
        let mut w = WindowCache::new(2, 1).unwrap();
        for (q, k, v) in &steps {
            let r = w.step(q, k.clone(), v.clone()).unwrap();
            assert_eq!(r.output, *v);
        }
    }

    #[test]
    fn window_matches_zeromerge_without_context() {
        let steps = random_steps(4, 30, 4);
        let cfg = RunConfig::new(4, Budgets::new(0, 0, 5).unwrap());
        let mut zm = ZeroMergeCache::new(cfg).unwrap();
        let mut w = WindowCache::new(4, 5).unwrap();
        for (q, k, v) in &steps {
            CachePolicy::step(&mut zm, q, k.clone(), v.clone()).unwrap();
            w.step(q, k.clone(), v.clone()).unwrap();
            assert!(same_contents(&zm, &w));
        }
    }

    #[test]
    fn sink_window_examples() {
        let steps = random_steps(5, 10, 2);
        let mut sw = SinkWindowCache::new(2, 2, 3).unwrap();
        run(&mut sw, &steps);
        assert_eq!(positions(&sw), vec![1, 2, 8, 9, 10]);

        let mut s0 = SinkWindowCache::new(2, 0, 3).unwrap();
        let mut w = WindowCache::new(2, 3).unwrap();
        assert_eq!(run(&mut s0, &steps), run(&mut w, &steps));

        let mut big = SinkWindowCache::new(2, 10, 1).unwrap();
        assert_eq!(run(&mut big, &steps), run(&mut FullCache::new(2), &steps));
    }

    #[test]
    fn heavy_hitter_wide_budget_equals_full() {
        let steps = random_steps(6, 10, 3);
        let mut hh = HeavyHitterCache::new(3, 6, 4, 1.0).unwrap();
        assert_eq!(run(&mut hh, &steps), run(&mut FullCache::new(3), &steps));
    }

    #[test]
    fn heavy_hitter_ties_evict_oldest() {
        // Identical keys give identical weights; with decay 0 the heavy set
        // entries tie on score, so the earliest one goes first.
        let x = Vector::new(vec![1.0, 0.0]).unwrap();
        let mut hh = HeavyHitterCache::new(2, 2, 1, 0.0).unwrap();
        for _ in 0..4 {
            hh.step(&x, x.clone(), x.clone()).unwrap();
        }
        assert_eq!(positions(&hh), vec![2, 3, 4]);
    }

    #[test]
    fn heavy_hitter_matches_zeromerge_without_residual() {
        for seed in 0..10 {
            let steps = random_steps(100 + seed, 40, 4);
            let cfg = RunConfig::new(4, Budgets::new(3, 0, 4).unwrap()).with_decay(0.9);
            let mut zm = ZeroMergeCache::new(cfg).unwrap();
            let mut hh = HeavyHitterCache::new(4, 3, 4, 0.9).unwrap();
            for (q, k, v) in &steps {
                let a = CachePolicy::step(&mut zm, q, k.clone(), v.clone()).unwrap();
                let b = hh.step(q, k.clone(), v.clone()).unwrap();
                assert_eq!(a, b);
                assert!(same_contents(&zm, &hh));
            }
        }
    }

    #[test]
    fn kinds_build_and_validate() {
        let cfg = RunConfig::new(2, Budgets::new(1, 1, 1).unwrap());
        assert!(PolicyKind::Window { window: 0 }.build(&cfg).is_err());
        assert!(PolicyKind::HeavyHitter { budget: 0, window: 0 }.build(&cfg).is_err());
        let kinds = [
            PolicyKind::Full,
            PolicyKind::Window { window: 3 },
            PolicyKind::SinkWindow { sink: 1, window: 2 },
            PolicyKind::HeavyHitter { budget: 1, window: 2 },
            PolicyKind::ZeroMerge {
                budgets: Budgets::new(1, 1, 1).unwrap(),
            },
        ];
        let steps = random_steps(7, 20, 2);
        for kind in kinds {
            let mut p = kind.build(&cfg).unwrap();
            for (q, k, v) in &steps {
                let r = p.step(q, k.clone(), v.clone()).unwrap();
                assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if let Some(cap) = kind.capacity() {
                    assert!(p.len() <= cap, "{kind}");
                }
            }
            assert_eq!(p.capacity(), kind.capacity());
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = Vector::new(vec![1.0]).unwrap();
        let cfg = RunConfig::new(2, Budgets::new(1, 1, 1).unwrap());
        for kind in [
            PolicyKind::Full,
            PolicyKind::Window { window: 1 },
            PolicyKind::SinkWindow { sink: 1, window: 1 },
            PolicyKind::HeavyHitter { budget: 1, window: 1 },
        ] {
            let mut p = kind.build(&cfg).unwrap();
            assert!(p.step(&x, x.clone(), x.clone()).is_err());
        }
    }
}
