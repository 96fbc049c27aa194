//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or verification failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::PolicyKind;
use crate::harness::{
    comparison_csv, report_csv, run_policies, run_policy, summary_table, theorem1_campaign,
    verify_theorem1, FidelityCheck,
};
use crate::types::{Budgets, RunConfig, DEFAULT_COMPENSATION, DEFAULT_DECAY};
use crate::workload::{gen_gaussian, gen_heavy_hitter, read_trace, write_trace, Trace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

const DEFAULT_POLICIES: &str = "full,window,sink-window,heavy-hitter,zeromerge";
const DEFAULT_SINK: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "zeromerge", version, about = "KV-cache compression benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic KVTR trace.
    TraceGen(TraceGenArgs),
    /// Run one policy over a trace and write per-step metrics as CSV.
    Bench(RunArgs),
    /// Run several policies over a trace and write a merged CSV.
    Compare(RunArgs),
    /// Check that compensated weights never undercut exact weights.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TraceKindArg {
    Gaussian,
    HeavyHitter,
}

#[derive(Debug, Args)]
struct TraceGenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<TraceKindArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n_hot: Option<usize>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    #[arg(long, allow_negative_numbers = true)]
    bc: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    br: Option<i64>,
    #[arg(long, allow_negative_numbers = true)]
    bp: Option<i64>,
    /// Total budget as a fraction of trace length, split 3:4:2 (proximity :
    /// context : residual) unless --bc/--br/--bp are given.
    #[arg(long)]
    budget_frac: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    sink: Option<usize>,
    #[arg(long)]
    hh_budget: Option<usize>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Single policy (bench).
    #[arg(long)]
    policy: Option<String>,
    /// Comma-separated policy list (compare).
    #[arg(long)]
    policies: Option<String>,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include wall-clock time per step in the printed summary table.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Verify a single trace instead of running the randomized campaign.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

type CliResult<T> = Result<T, CliError>;

/// `key=value` settings from a config file; flag values take precedence.
#[derive(Debug, Default)]
struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("--config: cannot read {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!("--config: line {} is not key=value: {line}", n + 1))
            })?;
            let key = key.trim().trim_start_matches("--").replace('_', "-");
            if !allowed.contains(&key.as_str()) {
                return Err(usage(format!(
                    "--config: unknown key `{key}` on line {}",
                    n + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Flag value if given, else the parsed config value.
    fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("--{key}: invalid value `{raw}` in config: {e}"))),
        }
    }
}

const BUDGET_KEYS: [&str; 10] = [
    "bc",
    "br",
    "bp",
    "budget-frac",
    "window",
    "sink",
    "hh-budget",
    "decay",
    "alpha",
    "seed",
];

struct ResolvedBudget {
    explicit: Option<(Option<i64>, Option<i64>, Option<i64>)>,
    budget_frac: Option<f64>,
    window: Option<usize>,
    sink: Option<usize>,
    hh_budget: Option<usize>,
    decay: f64,
    alpha: f64,
}

impl ResolvedBudget {
    fn resolve(args: &BudgetArgs, file: &FileConfig) -> CliResult<Self> {
        let bc = file.get("bc", args.bc)?;
        let br = file.get("br", args.br)?;
        let bp = file.get("bp", args.bp)?;
        let explicit = (bc.is_some() || br.is_some() || bp.is_some()).then_some((bc, br, bp));
        let budget_frac = file.get("budget-frac", args.budget_frac)?;
        if let Some(f) = budget_frac {
            if !(f > 0.0 && f <= 1.0) {
                return Err(usage(format!("--budget-frac must lie in (0, 1], got {f}")));
            }
        }
        let decay = file.get("decay", args.decay)?.unwrap_or(DEFAULT_DECAY);
        if !(0.0..=1.0).contains(&decay) {
            return Err(usage(format!("--decay must lie in [0, 1], got {decay}")));
        }
        let alpha = file.get("alpha", args.alpha)?.unwrap_or(DEFAULT_COMPENSATION);
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(usage(format!("--alpha must lie in (0, 1], got {alpha}")));
        }
        let window = file.get("window", args.window)?;
        if window == Some(0) {
            return Err(usage("--window must be at least 1"));
        }
        Ok(Self {
            explicit,
            budget_frac,
            window,
            sink: file.get("sink", args.sink)?,
            hh_budget: file.get("hh-budget", args.hh_budget)?,
            decay,
            alpha,
        })
    }

    /// Zeromerge budgets from --bc/--br/--bp, else from --budget-frac.
    fn budgets(&self, trace_len: usize) -> CliResult<Budgets> {
        if let Some((bc, br, bp)) = self.explicit {
            let bp = bp.ok_or_else(|| usage("--bp is required when --bc or --br is given"))?;
            let bc = bc.unwrap_or(0);
            let br = br.unwrap_or(0);
            if bp < 1 {
                return Err(usage(format!("--bp must be at least 1, got {bp}")));
            }
            if bc < 0 {
                return Err(usage(format!("--bc must be non-negative, got {bc}")));
            }
            if br < 0 {
                return Err(usage(format!("--br must be non-negative, got {br}")));
            }
            return Budgets::from_signed(bc, br, bp).map_err(|e| usage(e.to_string()));
        }
        if let Some(frac) = self.budget_frac {
            let total = ((frac * trace_len as f64).round() as usize).max(1);
            return Budgets::split(total).map_err(|e| usage(e.to_string()));
        }
        Err(usage("a cache budget is required: give --bc/--br/--bp or --budget-frac"))
    }

    fn policy(&self, name: &str, trace_len: usize) -> CliResult<PolicyKind> {
        let total = || self.budgets(trace_len).map(|b| b.total());
        let kind = match name {
            "full" => PolicyKind::Full,
            "window" => PolicyKind::Window {
                window: match self.window {
                    Some(w) => w,
                    None => total()?,
                },
            },
            "sink-window" => {
                let (sink, window) = match (self.sink, self.window) {
                    (Some(s), Some(w)) => (s, w),
                    (sink, None) => {
                        let total = total()?;
                        let sink = sink.unwrap_or(DEFAULT_SINK.min(total.saturating_sub(1)));
                        if sink >= total {
                            return Err(usage(format!(
                                "--sink ({sink}) leaves no room for a window in a budget of {total}"
                            )));
                        }
                        (sink, total - sink)
                    }
                    (None, Some(w)) => (DEFAULT_SINK, w),
                };
                PolicyKind::SinkWindow { sink, window }
            }
            "heavy-hitter" | "h2o" => {
                let (budget, window) = match (self.hh_budget, self.window) {
                    (Some(h), Some(w)) => (h, w),
                    (hh, win) => {
                        let b = self.budgets(trace_len)?;
                        let window = win.unwrap_or(b.proximity());
                        let budget = hh.unwrap_or(b.total().saturating_sub(window));
                        (budget, window)
                    }
                };
                PolicyKind::HeavyHitter { budget, window }
            }
            "zeromerge" => PolicyKind::ZeroMerge {
                budgets: self.budgets(trace_len)?,
            },
            other => {
                return Err(usage(format!(
                    "--policy: unknown policy `{other}` (expected full, window, sink-window, heavy-hitter, zeromerge)"
                )))
            }
        };
        kind.validate().map_err(|e| usage(format!("--policy {name}: {e}")))?;
        Ok(kind)
    }
}

fn load_trace(path: Option<PathBuf>) -> CliResult<Trace> {
    let path = path.ok_or_else(|| usage("--trace is required"))?;
    if !path.exists() {
        return Err(usage(format!("--trace: file not found: {}", path.display())));
    }
    read_trace(&path).map_err(|e| runtime(format!("reading {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| runtime(format!("writing {}: {e}", path.display()))),
        None => stdout.write_all(text.as_bytes()).map_err(runtime),
    }
}

fn trace_gen(args: TraceGenArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let file = FileConfig::load(
        args.config.as_deref(),
        &["kind", "steps", "dim", "n-hot", "gain", "seed", "out"],
    )?;
    let kind = match file.get::<String>("kind", None)? {
        _ if args.kind.is_some() => args.kind.unwrap(),
        None => TraceKindArg::Gaussian,
        Some(raw) => TraceKindArg::from_str(&raw, true)
            .map_err(|_| usage(format!("--kind: invalid value `{raw}` in config")))?,
    };
    let steps = file
        .get("steps", args.steps)?
        .ok_or_else(|| usage("--steps is required"))?;
    let dim = file.get("dim", args.dim)?.ok_or_else(|| usage("--dim is required"))?;
    let seed = file.get("seed", args.seed)?.unwrap_or(0);
    let out: PathBuf = file
        .get("out", args.out)?
        .ok_or_else(|| usage("--out is required"))?;
    if steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    if dim == 0 {
        return Err(usage("--dim must be positive"));
    }
    let trace = match kind {
        TraceKindArg::Gaussian => gen_gaussian(steps, dim, seed),
        TraceKindArg::HeavyHitter => {
            let n_hot = file.get("n-hot", args.n_hot)?.unwrap_or(4);
            let gain = file.get("gain", args.gain)?.unwrap_or(3.0);
            if n_hot > steps {
                return Err(usage(format!("--n-hot ({n_hot}) exceeds --steps ({steps})")));
            }
            if gain.is_nan() || gain < 0.0 {
                return Err(usage(format!("--gain must be non-negative, got {gain}")));
            }
            gen_heavy_hitter(steps, dim, n_hot, gain, seed)
        }
    }
    .map_err(runtime)?;
    write_trace(&trace, &out).map_err(|e| runtime(format!("writing {}: {e}", out.display())))?;
    writeln!(stdout, "wrote {} steps (d={}) to {}", steps, dim, out.display()).map_err(runtime)?;
    Ok(())
}

const RUN_KEYS: [&str; 4] = ["trace", "policy", "policies", "out"];

fn run_keys() -> Vec<&'static str> {
    RUN_KEYS.iter().chain(&BUDGET_KEYS).copied().collect()
}

fn bench(args: RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref(), &run_keys())?;
    let budget = ResolvedBudget::resolve(&args.budget, &file)?;
    let seed = file.get("seed", args.seed)?.unwrap_or(0);
    let trace = load_trace(file.get("trace", args.trace)?)?;
    let name: String = file.get("policy", args.policy)?.unwrap_or_else(|| "zeromerge".into());
    let policy = budget.policy(&name, trace.len())?;
    let config = run_config(&trace, &budget, &policy, seed)?;

    let report = run_policy(&trace, &policy, &config).map_err(runtime)?;
    let out: Option<PathBuf> = file.get("out", args.out)?;
    emit(out.as_deref(), &report_csv(&report), stdout)?;
    if out.is_some() {
        write!(stdout, "{}", summary_table(&[report], args.timing)).map_err(runtime)?;
    }
    Ok(())
}

fn run_config(trace: &Trace, budget: &ResolvedBudget, policy: &PolicyKind, seed: u64) -> CliResult<RunConfig> {
    let budgets = match policy {
        PolicyKind::ZeroMerge { budgets } => *budgets,
        _ => Budgets::new(0, 0, 1).expect("valid"),
    };
    Ok(RunConfig::new(trace.head_dim, budgets)
        .with_decay(budget.decay)
        .with_compensation(budget.alpha)
        .with_seed(seed))
}

fn compare(args: RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref(), &run_keys())?;
    let budget = ResolvedBudget::resolve(&args.budget, &file)?;
    let seed = file.get("seed", args.seed)?.unwrap_or(0);
    let trace = load_trace(file.get("trace", args.trace)?)?;
    let list: String = file
        .get("policies", args.policies.or(args.policy))?
        .unwrap_or_else(|| DEFAULT_POLICIES.into());
    let policies = list
        .split(',')
        .map(|name| budget.policy(name.trim(), trace.len()))
        .collect::<CliResult<Vec<_>>>()?;
    if policies.is_empty() {
        return Err(usage("--policies must name at least one policy"));
    }
    let config = RunConfig::new(trace.head_dim, Budgets::new(0, 0, 1).expect("valid"))
        .with_decay(budget.decay)
        .with_compensation(budget.alpha)
        .with_seed(seed);

    let reports = run_policies(&trace, &policies, &config).map_err(runtime)?;
    let out: Option<PathBuf> = file.get("out", args.out)?;
    emit(out.as_deref(), &comparison_csv(&policies, &reports), stdout)?;
    if out.is_some() {
        write!(stdout, "{}", summary_table(&reports, args.timing)).map_err(runtime)?;
        if let Some(check) = FidelityCheck::from_reports(&policies, &reports) {
            writeln!(
                stdout,
                "zeromerge <= window (mean l2_rel): {}",
                if check.passed() { "pass" } else { "FAIL" }
            )
            .map_err(runtime)?;
        }
    }
    Ok(())
}

fn verify(args: VerifyArgs, stdout: &mut dyn Write) -> CliResult<bool> {
    let keys: Vec<&str> = ["trials", "trace"].iter().chain(&BUDGET_KEYS).copied().collect();
    let file = FileConfig::load(args.config.as_deref(), &keys)?;
    let seed = file.get("seed", args.seed)?.unwrap_or(0);

    let (trials, checks, violations, worst) = match file.get("trace", args.trace)? {
        Some(path) => {
            let budget = ResolvedBudget::resolve(&args.budget, &file)?;
            let trace = load_trace(Some(path))?;
            let config = RunConfig::new(trace.head_dim, budget.budgets(trace.len())?)
                .with_decay(budget.decay)
                .with_compensation(budget.alpha)
                .with_seed(seed);
            let r = verify_theorem1(&trace, &config).map_err(runtime)?;
            (1, r.trials, r.violations, r.worst_margin)
        }
        None => {
            let trials = file.get("trials", args.trials)?.unwrap_or(1000);
            if trials == 0 {
                return Err(usage("--trials must be positive"));
            }
            let r = theorem1_campaign(trials, seed).map_err(runtime)?;
            (r.trials, r.checks, r.violations, r.worst_margin)
        }
    };
    writeln!(
        stdout,
        "trials: {trials}\nchecks: {checks}\nviolations: {violations}\nworst_margin: {worst:e}"
    )
    .map_err(runtime)?;
    Ok(violations == 0)
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == EXIT_OK { stdout } else { stderr };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let result = match cli.command {
        Command::TraceGen(a) => trace_gen(a, stdout).map(|_| true),
        Command::Bench(a) => bench(a, stdout).map(|_| true),
        Command::Compare(a) => compare(a, stdout).map(|_| true),
        Command::Verify(a) => verify(a, stdout),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Runtime(_) => EXIT_FAILURE,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("zeromerge").chain(args.iter().copied());
        let code = run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = run_args(&["bench", "--bogus", "1"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--bogus"));
    }

    #[test]
    fn missing_subcommand_is_usage_error() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn zero_proximity_names_flag() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("t.kvtr");
        let t = trace.to_str().unwrap();
        assert_eq!(
            run_args(&["trace-gen", "--steps", "10", "--dim", "2", "--out", t]).0,
            EXIT_OK
        );
        let (code, _, err) = run_args(&["bench", "--trace", t, "--bc", "4", "--br", "2", "--bp", "0"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--bp"), "{err}");
        let (code, _, err) = run_args(&["bench", "--trace", t, "--bc", "-1", "--bp", "2"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--bc"), "{err}");
    }

    #[test]
    fn missing_trace_is_usage_error() {
        let (code, _, err) = run_args(&["bench", "--trace", "/nonexistent/x.kvtr", "--bp", "1"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--trace"));
    }

    #[test]
    fn config_file_with_flag_override() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("t.kvtr");
        let cfg = dir.path().join("run.conf");
        let out = dir.path().join("o.csv");
        fs::write(
            &cfg,
            format!(
                "# run\ntrace={}\npolicy=zeromerge\nbc=4\nbr=2\nbp=3\nalpha=0.5\n",
                trace.display()
            ),
        )
        .unwrap();
        let t = trace.to_str().unwrap();
        run_args(&["trace-gen", "--steps", "20", "--dim", "2", "--out", t]);
        let (code, _, err) = run_args(&[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--bp",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        let csv = fs::read_to_string(&out).unwrap();
        assert!(csv.contains("# policy=zeromerge(c=4,r=2,p=5)"));
        assert!(csv.contains("# peak_cache_entries=11"));

        fs::write(&cfg, "frobnicate=1\n").unwrap();
        let (code, _, err) = run_args(&["bench", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("frobnicate"));

        fs::write(&cfg, "alpha=lots\n").unwrap();
        let (code, _, err) = run_args(&["bench", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--alpha"));
    }

    #[test]
    fn alpha_and_decay_validated() {
        let (code, _, err) = run_args(&["verify", "--trials", "1", "--trace", "x", "--alpha", "0"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--alpha"));
    }

    #[test]
    fn policy_defaults_from_budget() {
        let b = ResolvedBudget {
            explicit: None,
            budget_frac: Some(0.05),
            window: None,
            sink: None,
            hh_budget: None,
            decay: DEFAULT_DECAY,
            alpha: DEFAULT_COMPENSATION,
        };
        let zm = b.policy("zeromerge", 512).unwrap();
        assert_eq!(zm.capacity(), Some(26));
        assert_eq!(b.policy("window", 512).unwrap(), PolicyKind::Window { window: 26 });
        assert_eq!(
            b.policy("sink-window", 512).unwrap(),
            PolicyKind::SinkWindow { sink: 4, window: 22 }
        );
        let PolicyKind::ZeroMerge { budgets } = zm else { unreachable!() };
        assert_eq!(
            b.policy("heavy-hitter", 512).unwrap(),
            PolicyKind::HeavyHitter {
                budget: 26 - budgets.proximity(),
                window: budgets.proximity()
            }
        );
        assert!(b.policy("lru", 512).is_err());
    }
}
