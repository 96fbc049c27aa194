//! Runs cache policies against a full-attention reference and reports
//! fidelity, occupancy and timing; also hosts the randomized check that
//! compensated weights never fall below the uncompressed attention weights.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::full_attention;
use crate::baselines::{CachePolicy, FullCache, PolicyKind};
use crate::cache::ZeroMergeCache;
use crate::error::{Error, Result};
use crate::types::{Budgets, RunConfig, Vector};
use crate::workload::{gen_gaussian, gen_heavy_hitter, Trace};

/// Slack allowed when comparing compensated and exact weights.
pub const THEOREM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    pub l2_rel: f64,
    pub cosine: f64,
}

/// Relative L2 error and cosine similarity of `approx` against `reference`.
/// A zero-norm reference is an error rather than a silent zero. A zero-norm
/// `approx` has cosine 0.
pub fn attention_error(reference: &Vector, approx: &Vector) -> Result<ErrorMetrics> {
    if reference.dim() != approx.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            actual: approx.dim(),
        });
    }
    let ref_norm = reference.norm();
    if ref_norm == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    let diff: f64 = reference
        .iter()
        .zip(approx.iter())
        .map(|(r, a)| (a - r) * (a - r))
        .sum::<f64>()
        .sqrt();
    let approx_norm = approx.norm();
    let cosine = if approx_norm == 0.0 {
        0.0
    } else {
        (reference.dot(approx) / (ref_norm * approx_norm)).clamp(-1.0, 1.0)
    };
    Ok(ErrorMetrics {
        l2_rel: diff / ref_norm,
        cosine,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based step index.
    pub step: usize,
    pub cache_entries: usize,
    /// `NaN` when the reference output had zero norm.
    pub l2_rel_error: f64,
    pub cosine_sim: f64,
    /// Attention mass on entries with fusion count 1.
    pub uncompressed_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean_l2_rel_error: f64,
    pub max_l2_rel_error: f64,
    pub mean_cosine_sim: f64,
    pub peak_cache_entries: usize,
    /// Largest `|sum(weights) - 1|` seen across both the policy and reference.
    pub max_weight_sum_error: f64,
    /// Steps whose reference output had zero norm and were left out of the means.
    pub degenerate_steps: usize,
    pub wall_time_per_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub policy: String,
    pub per_step: Vec<StepMetrics>,
    pub summary: Summary,
}

fn weight_sum_error(weights: &[f64]) -> f64 {
    (weights.iter().sum::<f64>() - 1.0).abs()
}

/// Steps `policy` over `trace` alongside a full cache and records per-step
/// metrics.
pub fn run_policy(trace: &Trace, policy: &PolicyKind, config: &RunConfig) -> Result<MetricsReport> {
    if trace.head_dim != config.head_dim {
        return Err(Error::DimensionMismatch {
            expected: config.head_dim,
            actual: trace.head_dim,
        });
    }
    config.validate()?;
    let mut cache = policy.build(config)?;
    let mut reference = FullCache::new(config.head_dim);
    let capacity = cache.capacity();

    let mut per_step = Vec::with_capacity(trace.len());
    let mut max_weight_sum_error: f64 = 0.0;
    let mut elapsed = 0.0;
    for (i, rec) in trace.steps.iter().enumerate() {
        let counts = cache.fusion_counts();
        let started = Instant::now();
        let approx = cache.step(&rec.q, rec.k.clone(), rec.v.clone())?;
        elapsed += started.elapsed().as_secs_f64();
        let exact = reference.step(&rec.q, rec.k.clone(), rec.v.clone())?;

        let entries = cache.len();
        debug_assert!(capacity.is_none_or(|c| entries <= c));
        max_weight_sum_error = max_weight_sum_error
            .max(weight_sum_error(&approx.weights))
            .max(weight_sum_error(&exact.weights));
        let uncompressed_mass = approx
            .weights
            .iter()
            .enumerate()
            .filter(|(j, _)| counts.get(*j).copied().unwrap_or(1) == 1)
            .map(|(_, w)| w)
            .sum();
        let (l2_rel_error, cosine_sim) = match attention_error(&exact.output, &approx.output) {
            Ok(m) => (m.l2_rel, m.cosine),
            Err(Error::ZeroNormReference) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        per_step.push(StepMetrics {
            step: i + 1,
            cache_entries: entries,
            l2_rel_error,
            cosine_sim,
            uncompressed_mass,
        });
    }

    let valid: Vec<&StepMetrics> = per_step.iter().filter(|m| !m.l2_rel_error.is_nan()).collect();
    let n = valid.len().max(1) as f64;
    let summary = Summary {
        mean_l2_rel_error: valid.iter().map(|m| m.l2_rel_error).sum::<f64>() / n,
        max_l2_rel_error: valid.iter().map(|m| m.l2_rel_error).fold(0.0, f64::max),
        mean_cosine_sim: valid.iter().map(|m| m.cosine_sim).sum::<f64>() / n,
        peak_cache_entries: per_step.iter().map(|m| m.cache_entries).max().unwrap_or(0),
        max_weight_sum_error,
        degenerate_steps: per_step.len() - valid.len(),
        wall_time_per_step: elapsed / per_step.len().max(1) as f64,
    };
    Ok(MetricsReport {
        policy: policy.to_string(),
        per_step,
        summary,
    })
}

/// Runs several policies over one trace, one thread per policy. Reports come
/// back in input order.
pub fn run_policies(
    trace: &Trace,
    policies: &[PolicyKind],
    config: &RunConfig,
) -> Result<Vec<MetricsReport>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = policies
            .iter()
            .map(|p| scope.spawn(move || run_policy(trace, p, config)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("policy run panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremReport {
    /// Number of (step, uncompressed entry) comparisons made.
    pub trials: usize,
    pub violations: usize,
    /// Smallest `compensated - exact` weight difference observed.
    pub worst_margin: f64,
}

impl TheoremReport {
    fn empty() -> Self {
        Self {
            trials: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
        }
    }

    fn absorb(&mut self, other: &TheoremReport) {
        self.trials += other.trials;
        self.violations += other.violations;
        self.worst_margin = self.worst_margin.min(other.worst_margin);
    }
}

/// Replays `trace` through a compressed cache and, at every step, compares the
/// compensated weight of each entry with fusion count 1 against the weight
/// the same token gets under full attention over the entire history.
pub fn verify_theorem1(trace: &Trace, config: &RunConfig) -> Result<TheoremReport> {
    if trace.head_dim != config.head_dim {
        return Err(Error::DimensionMismatch {
            expected: config.head_dim,
            actual: trace.head_dim,
        });
    }
    let mut cache = ZeroMergeCache::new(*config)?;
    let mut keys = Vec::with_capacity(trace.len());
    let mut values = Vec::with_capacity(trace.len());
    let mut report = TheoremReport::empty();

    for (t, rec) in trace.steps.iter().enumerate() {
        // Attention order is the pre-step cache followed by the new token.
        let mut attended: Vec<(usize, u64)> =
            cache.iter().map(|e| (e.origin_pos, e.fusion_count)).collect();
        attended.push((t + 1, 1));

        keys.push(rec.k.clone());
        values.push(rec.v.clone());
        let compressed = cache.step(&rec.q, rec.k.clone(), rec.v.clone())?;
        let exact = full_attention(&rec.q, &keys, &values)?;

        for (&(pos, w), &a_hat) in attended.iter().zip(&compressed.weights) {
            if w != 1 {
                continue;
            }
            let margin = a_hat - exact.weights[pos - 1];
            report.trials += 1;
            report.worst_margin = report.worst_margin.min(margin);
            if margin < -THEOREM_TOLERANCE {
                report.violations += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignReport {
    /// Randomized (trace, budget, compensation) configurations run.
    pub trials: usize,
    /// Individual weight comparisons across all configurations.
    pub checks: usize,
    pub violations: usize,
    pub worst_margin: f64,
}

/// One randomized configuration of the verification campaign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignTrial {
    pub head_dim: usize,
    pub steps: usize,
    pub compensation: f64,
    pub decay: f64,
    pub budgets: Budgets,
    pub heavy_hitter: bool,
    pub n_hot: usize,
    pub gain: f64,
    pub seed: u64,
}

impl CampaignTrial {
    pub fn trace(&self) -> Result<Trace> {
        if self.heavy_hitter {
            gen_heavy_hitter(self.steps, self.head_dim, self.n_hot, self.gain, self.seed)
        } else {
            gen_gaussian(self.steps, self.head_dim, self.seed)
        }
    }

    pub fn config(&self) -> RunConfig {
        RunConfig::new(self.head_dim, self.budgets)
            .with_compensation(self.compensation)
            .with_decay(self.decay)
            .with_seed(self.seed)
    }
}

pub const CAMPAIGN_DIMS: [usize; 3] = [4, 16, 64];
pub const CAMPAIGN_STEPS: [usize; 3] = [32, 128, 256];
pub const CAMPAIGN_ALPHAS: [f64; 3] = [0.1, 0.5, 1.0];
const CAMPAIGN_DECAYS: [f64; 4] = [0.5, 0.9, 0.98, 1.0];

/// Deterministic list of campaign configurations. The (dim, steps, alpha,
/// generator) grid is cycled in order; budgets are drawn between 5% and 50%
/// of the trace length with a random split that keeps proximity >= 1.
pub fn campaign_trials(count: usize, seed: u64) -> Vec<CampaignTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let head_dim = CAMPAIGN_DIMS[i % 3];
            let steps = CAMPAIGN_STEPS[(i / 3) % 3];
            let compensation = CAMPAIGN_ALPHAS[(i / 9) % 3];
            let heavy_hitter = (i / 27) % 2 == 1;
            let frac = rng.gen_range(0.05..=0.5);
            let total = ((frac * steps as f64).round() as usize).max(1);
            let proximity = rng.gen_range(1..=total);
            let context = rng.gen_range(0..=total - proximity);
            let residual = total - proximity - context;
            let budgets = Budgets::new(context, residual, proximity).expect("proximity >= 1");
            CampaignTrial {
                head_dim,
                steps,
                compensation,
                decay: CAMPAIGN_DECAYS[rng.gen_range(0..CAMPAIGN_DECAYS.len())],
                budgets,
                heavy_hitter,
                n_hot: rng.gen_range(0..=8),
                gain: rng.gen_range(0.0..4.0),
                seed: rng.gen(),
            }
        })
        .collect()
}

pub fn theorem1_campaign(count: usize, seed: u64) -> Result<CampaignReport> {
    let mut total = TheoremReport::empty();
    for trial in campaign_trials(count, seed) {
        let report = verify_theorem1(&trial.trace()?, &trial.config())?;
        total.absorb(&report);
    }
    Ok(CampaignReport {
        trials: count,
        checks: total.trials,
        violations: total.violations,
        worst_margin: total.worst_margin,
    })
}

pub const CSV_HEADER: &str = "step,cache_entries,l2_rel_error,cosine_sim,uncompressed_mass";

/// Shortest round-trip formatting; exponent form outside `[1e-4, 1e15)`.
fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn summary_lines(report: &MetricsReport, out: &mut String) {
    let s = &report.summary;
    let _ = writeln!(out, "# policy={}", report.policy);
    let _ = writeln!(out, "# steps={}", report.per_step.len());
    let _ = writeln!(out, "# mean_l2_rel_error={}", num(s.mean_l2_rel_error));
    let _ = writeln!(out, "# max_l2_rel_error={}", num(s.max_l2_rel_error));
    let _ = writeln!(out, "# mean_cosine_sim={}", num(s.mean_cosine_sim));
    let _ = writeln!(out, "# peak_cache_entries={}", s.peak_cache_entries);
    let _ = writeln!(out, "# max_weight_sum_error={}", num(s.max_weight_sum_error));
    let _ = writeln!(out, "# degenerate_steps={}", s.degenerate_steps);
}

fn step_row(m: &StepMetrics) -> String {
    format!(
        "{},{},{},{},{}",
        m.step,
        m.cache_entries,
        num(m.l2_rel_error),
        num(m.cosine_sim),
        num(m.uncompressed_mass)
    )
}

/// Renders a report as CSV. Wall-clock timing is left out so output is
/// reproducible byte for byte.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for m in &report.per_step {
        out.push_str(&step_row(m));
        out.push('\n');
    }
    out.push_str("# summary:\n");
    summary_lines(report, &mut out);
    out
}

pub fn write_report_csv(report: &MetricsReport, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, report_csv(report))
}

/// Outcome of comparing zeromerge against a window-only cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityCheck {
    pub zeromerge_mean_l2: f64,
    pub window_mean_l2: f64,
}

impl FidelityCheck {
    pub fn from_reports(policies: &[PolicyKind], reports: &[MetricsReport]) -> Option<Self> {
        let find = |name: &str| {
            policies
                .iter()
                .position(|p| p.name() == name)
                .map(|i| reports[i].summary.mean_l2_rel_error)
        };
        Some(Self {
            zeromerge_mean_l2: find("zeromerge")?,
            window_mean_l2: find("window")?,
        })
    }

    pub fn passed(&self) -> bool {
        self.zeromerge_mean_l2 <= self.window_mean_l2
    }
}

/// Merged CSV for several reports: a leading `policy` column, then each
/// report's summary trailer and the zeromerge-vs-window check when both ran.
pub fn comparison_csv(policies: &[PolicyKind], reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "policy,{CSV_HEADER}");
    for r in reports {
        for m in &r.per_step {
            let _ = writeln!(out, "{},{}", r.policy, step_row(m));
        }
    }
    out.push_str("# summary:\n");
    for r in reports {
        summary_lines(r, &mut out);
    }
    if let Some(check) = FidelityCheck::from_reports(policies, reports) {
        let _ = writeln!(
            out,
            "# assert zeromerge_mean_l2_rel_error <= window_mean_l2_rel_error: {} ({} vs {})",
            if check.passed() { "pass" } else { "FAIL" },
            num(check.zeromerge_mean_l2),
            num(check.window_mean_l2)
        );
    }
    out
}

/// Fixed-width table of per-policy summaries.
pub fn summary_table(reports: &[MetricsReport], with_timing: bool) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{:<34} {:>14} {:>14} {:>12} {:>6}",
        "policy", "mean_l2_rel", "max_l2_rel", "mean_cos", "peak"
    );
    if with_timing {
        let _ = write!(out, " {:>12}", "us/step");
    }
    out.push('\n');
    for r in reports {
        let s = &r.summary;
        let _ = write!(
            out,
            "{:<34} {:>14.6e} {:>14.6e} {:>12.6} {:>6}",
            r.policy, s.mean_l2_rel_error, s.max_l2_rel_error, s.mean_cosine_sim, s.peak_cache_entries
        );
        if with_timing {
            let _ = write!(out, " {:>12.2}", s.wall_time_per_step * 1e6);
        }
        out.push('\n');
    }
    out
}
