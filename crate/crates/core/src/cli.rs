//! Command-line front end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::azema_yor::{
    ay_max_law, build_schedule, reconcile_levels, AySchedule, ScheduleError, ScheduleOptions,
};
use crate::figures;
use crate::markovian::{
    build_policy, geometric_policy, policy_by_truncation, MarkovianPolicy, PolicyError,
    PolicyOptions, TruncationOptions,
};
use crate::measure::{
    CasinoMode, LatticeMeasure, MeasureError, MeasureSpec, MixedGeometric, DEFAULT_VALIDATION_TOL,
};
use crate::montecarlo::{compare, simulate, CompareOptions, SimConfig, SimError, SimRule};
use crate::oracle::{
    ay_exact, dominance_check, markovian_exact, tv_to_measure, OracleError, OracleOptions,
    StoppedLaw,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Measure(_) => "measure",
            CliError::Policy(_) => "policy",
            CliError::Schedule(_) => "schedule",
            CliError::Oracle(_) => "oracle",
            CliError::Simulation(_) => "simulation",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"kind": self.kind(), "message": self.to_string()}})
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sep-walk",
    version,
    about = "Embed centered integer laws in a simple random walk with randomized stopping rules",
    after_help = "Set SEP_WALK_THREADS to cap worker threads."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Write the machine-readable result here instead of stdout
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleKind {
    Markovian,
    Ay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Closed-form r_i from the target's tail functionals
    Direct,
    /// Limit of policies for two-point truncations
    Truncation,
    /// Closed form for the mixed geometric family
    ClosedForm,
}

#[derive(Debug, Clone, Args)]
pub struct DistArgs {
    /// Target measure as JSON
    #[arg(long)]
    pub dist: PathBuf,
    /// Tail mass below which countable supports are cut (default 1e-12)
    #[arg(long)]
    pub tail_tol: Option<f64>,
    /// Allowed deviation of total mass from 1 and of the mean from 0
    #[arg(long, default_value_t = DEFAULT_VALIDATION_TOL)]
    pub validation_tol: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the state-indexed coin policy r_i
    BuildMarkovian {
        #[command(flatten)]
        dist: DistArgs,
        #[arg(long, value_enum, default_value_t = Method::Direct)]
        method: Method,
        /// Convergence tolerance for the truncation method
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Half-width of the window on which truncation convergence is judged
        #[arg(long, default_value_t = 50)]
        window: i64,
    },
    /// Build the maximum-indexed drawdown schedule
    BuildAy {
        #[command(flatten)]
        dist: DistArgs,
        /// Cap on the running maximum for supports unbounded above
        #[arg(long, default_value_t = 10_000)]
        max_level: i64,
    },
    /// Exact stopped law from a measure and rule, or from a saved policy/schedule
    Exact {
        #[arg(long)]
        dist: Option<PathBuf>,
        #[arg(long, value_enum)]
        rule: Option<RuleKind>,
        #[arg(long, conflicts_with_all = ["dist", "schedule"])]
        policy: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["dist", "policy"])]
        schedule: Option<PathBuf>,
        #[arg(long)]
        tail_tol: Option<f64>,
        /// Largest n for which P(S* >= n) is solved under the coin policy
        #[arg(long, default_value_t = 4096)]
        max_law_levels: i64,
    },
    /// Monte Carlo run, judged against the exact law
    Simulate {
        #[command(flatten)]
        dist: DistArgs,
        #[arg(long, value_enum, default_value_t = RuleKind::Markovian)]
        rule: RuleKind,
        #[arg(long, default_value_t = 100_000)]
        paths: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = crate::montecarlo::DEFAULT_MAX_STEPS)]
        max_steps: u64,
        /// Largest tolerated fraction of censored paths
        #[arg(long, default_value_t = 0.0)]
        censoring_limit: f64,
        /// Record this many paths in the report
        #[arg(long, default_value_t = 0)]
        trace_paths: usize,
        /// Chi-square significance level
        #[arg(long, default_value_t = 1e-3)]
        alpha: f64,
        /// TV must stay below c / sqrt(paths)
        #[arg(long, default_value_t = 5.0)]
        tv_c: f64,
    },
    /// Run the exact-oracle checks and print a pass/fail ledger
    Verify {
        #[command(flatten)]
        dist: DistArgs,
        /// TV tolerance for the embedding checks
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_level: i64,
    },
    /// Worked examples
    Example {
        #[command(subcommand)]
        which: Example,
    },
}

#[derive(Debug, Subcommand)]
pub enum Example {
    /// Casino gambling law: coin-policy table and drawdown schedule
    Casino {
        #[arg(long, value_enum, default_value_t = ModeArg::AsPrinted)]
        mode: ModeArg,
        /// Also write tree-node CSV for both rules
        #[arg(long)]
        figure: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        figure_depth: usize,
    },
    /// Two-sided geometric law with closed-form policy
    Geometric {
        #[arg(long, default_value = "5/12", value_parser = parse_fraction)]
        q_plus: f64,
        #[arg(long, default_value = "13/24", value_parser = parse_fraction)]
        q_minus: f64,
        /// Defaults to q_plus
        #[arg(long, value_parser = parse_fraction)]
        gamma_plus: Option<f64>,
        /// Defaults to q_minus
        #[arg(long, value_parser = parse_fraction)]
        gamma_minus: Option<f64>,
        #[arg(long)]
        figure: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        figure_depth: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    AsPrinted,
    Recentered,
}

/// `a/b` or a decimal.
pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            if b == 0.0 {
                return Err("zero denominator".into());
            }
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err("not finite".into())
    }
}

/// Result of a command: the machine-readable payload, a human summary, and
/// whether every requested check passed.
#[derive(Debug)]
pub struct Outcome {
    pub payload: String,
    pub summary: String,
    pub ok: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn load_measure(path: &Path, tail_tol: Option<f64>) -> Result<LatticeMeasure, CliError> {
    let spec: MeasureSpec = read_json(path)?;
    let m = LatticeMeasure::from_spec(&spec)?;
    Ok(match tail_tol {
        Some(t) if t > 0.0 && t < 1.0 => m.with_tail_tol(t),
        Some(_) => return Err(CliError::Usage("--tail-tol must lie in (0, 1)".into())),
        None => m,
    })
}

fn load_valid(d: &DistArgs) -> Result<LatticeMeasure, CliError> {
    let m = load_measure(&d.dist, d.tail_tol)?;
    m.validate(d.validation_tol)?;
    Ok(m)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

fn policy_csv(p: &MarkovianPolicy) -> String {
    let mut s = String::from("site,r,g\n");
    for (i, r) in p.sites() {
        let _ = writeln!(s, "{i},{r},{}", p.g(i));
    }
    s
}

fn schedule_csv(sch: &AySchedule) -> String {
    let mut s = String::from("n,k,x,rho,gamma,f\n");
    for l in &sch.levels {
        for (j, st) in l.stops.iter().enumerate() {
            let f = l.f.get(j + 1).copied().unwrap_or(f64::NAN);
            let _ = writeln!(s, "{},{},{},{},{},{}", l.n, j + 1, st.x, st.rho, l.gamma, f);
        }
    }
    s
}

fn law_summary(label: &str, law: &StoppedLaw, m: Option<&LatticeMeasure>) -> String {
    let mut s = format!(
        "{label}: {} sites, mass {:.12}",
        law.law.len(),
        law.total_mass()
    );
    if let Some(e) = law.e_tau {
        let _ = write!(s, ", E[tau] = {e:.9}");
    }
    if let Some(m) = m {
        let _ = write!(s, ", TV to target = {:.3e}", tv_to_measure(&law.law, m));
    }
    let _ = write!(s, ", error bound {:.3e}", law.error_bound);
    s
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::BuildMarkovian {
            dist,
            method,
            tol,
            window,
        } => build_markovian_cmd(cli, dist, *method, *tol, *window),
        Command::BuildAy { dist, max_level } => build_ay_cmd(cli, dist, *max_level),
        Command::Exact {
            dist,
            rule,
            policy,
            schedule,
            tail_tol,
            max_law_levels,
        } => exact_cmd(
            cli,
            dist.as_deref(),
            *rule,
            policy.as_deref(),
            schedule.as_deref(),
            *tail_tol,
            *max_law_levels,
        ),
        Command::Simulate {
            dist,
            rule,
            paths,
            seed,
            max_steps,
            censoring_limit,
            trace_paths,
            alpha,
            tv_c,
        } => {
            let m = load_valid(dist)?;
            let mut cfg = SimConfig::new(build_rule(&m, *rule)?, *paths, *seed);
            cfg.max_steps = *max_steps;
            cfg.censoring_limit = *censoring_limit;
            cfg.trace_paths = *trace_paths;
            simulate_cmd(
                cli,
                &m,
                cfg,
                CompareOptions {
                    alpha: *alpha,
                    c: *tv_c,
                },
            )
        }
        Command::Verify {
            dist,
            tol,
            max_level,
        } => {
            let m = load_valid(dist)?;
            verify_cmd(cli, &m, *tol, *max_level)
        }
        Command::Example { which } => example_cmd(cli, which),
    }
}

fn degenerate_note(m: &LatticeMeasure) -> Option<String> {
    m.is_degenerate().then(|| {
        "DegenerateMeasure: target is the point mass at 0; the rule stops at time 0".into()
    })
}

fn build_markovian_cmd(
    cli: &Cli,
    dist: &DistArgs,
    method: Method,
    tol: f64,
    window: i64,
) -> Result<Outcome, CliError> {
    let m = load_valid(dist)?;
    let opts = PolicyOptions::for_measure(&m);
    let note = degenerate_note(&m);
    let policy = if note.is_some() {
        MarkovianPolicy::trivial()
    } else {
        match method {
            Method::Direct => build_policy(&m, &opts)?,
            Method::Truncation => {
                let run = policy_by_truncation(
                    &m,
                    &TruncationOptions {
                        window,
                        tol,
                        policy: opts,
                        ..Default::default()
                    },
                )?;
                run.policy
            }
            Method::ClosedForm => match m.to_spec() {
                MeasureSpec::MixedGeometric {
                    gamma_plus,
                    q_plus,
                    gamma_minus,
                    q_minus,
                    ..
                } => geometric_policy(
                    &MixedGeometric {
                        gamma_plus,
                        q_plus,
                        gamma_minus,
                        q_minus,
                    },
                    &opts,
                )?,
                _ => {
                    return Err(CliError::Usage(
                        "closed-form method needs a mixed_geometric measure".into(),
                    ))
                }
            },
        }
    };
    let payload = match cli.format {
        Format::Json => {
            let mut v = serde_json::to_value(&policy).expect("serialisable");
            if let Some(n) = &note {
                v["note"] = json!(n);
            }
            to_json(&v)
        }
        Format::Csv => policy_csv(&policy),
    };
    let mut summary = format!(
        "policy on [{}, {}], provenance {:?}, truncated mass {:.3e}\n",
        policy.hull.0, policy.hull.1, policy.provenance, policy.truncated_mass
    );
    let (lo, hi) = (policy.hull.0.max(-5), policy.hull.1.min(10));
    for i in lo..=hi {
        let _ = writeln!(summary, "  r_{i:<4} = {:.6}", policy.r(i));
    }
    if let Some(n) = note {
        summary.push_str(&n);
        summary.push('\n');
    }
    Ok(Outcome {
        payload,
        summary,
        ok: true,
    })
}

fn schedule_for(m: &LatticeMeasure, max_level: i64) -> Result<AySchedule, CliError> {
    if m.is_degenerate() {
        return Ok(AySchedule::trivial());
    }
    let opts = ScheduleOptions {
        max_level,
        ..ScheduleOptions::for_measure(m)
    };
    Ok(build_schedule(m, &opts)?)
}

fn policy_for(m: &LatticeMeasure) -> Result<MarkovianPolicy, CliError> {
    if m.is_degenerate() {
        return Ok(MarkovianPolicy::trivial());
    }
    Ok(build_policy(m, &PolicyOptions::for_measure(m))?)
}

fn schedule_table(s: &AySchedule, upto: i64) -> String {
    let mut out = String::from("  n  m_n  levels (x, rho)                      Gamma\n");
    for l in s.levels.iter().take_while(|l| l.n <= upto) {
        let mut lv: Vec<String> = l
            .stops
            .iter()
            .take(6)
            .map(|st| format!("({}, {:.4})", st.x, st.rho))
            .collect();
        if l.stops.len() > 6 {
            lv.push(format!("... {} more", l.stops.len() - 6));
        }
        let _ = writeln!(
            out,
            "{:>3}  {:>3}  {:<36} {:.6}",
            l.n,
            l.m(),
            lv.join(" "),
            l.gamma
        );
    }
    out
}

fn build_ay_cmd(cli: &Cli, dist: &DistArgs, max_level: i64) -> Result<Outcome, CliError> {
    let m = load_valid(dist)?;
    let note = degenerate_note(&m);
    let s = schedule_for(&m, max_level)?;
    let payload = match cli.format {
        Format::Json => {
            let mut v = serde_json::to_value(&s).expect("serialisable");
            if let Some(n) = &note {
                v["note"] = json!(n);
            }
            to_json(&v)
        }
        Format::Csv => schedule_csv(&s),
    };
    let mut summary = format!(
        "schedule: xbar {:?}, top {}, lower residual {:.3e}, upper residual {:.3e}\n",
        s.xbar, s.top, s.lower_residual, s.upper_residual
    );
    summary.push_str(&schedule_table(&s, 10));
    for n in [&s.note, &note].into_iter().flatten() {
        summary.push_str(n);
        summary.push('\n');
    }
    Ok(Outcome {
        payload,
        summary,
        ok: true,
    })
}

fn exact_cmd(
    cli: &Cli,
    dist: Option<&Path>,
    rule: Option<RuleKind>,
    policy: Option<&Path>,
    schedule: Option<&Path>,
    tail_tol: Option<f64>,
    max_law_levels: i64,
) -> Result<Outcome, CliError> {
    let oopts = OracleOptions { max_law_levels };
    let (law, m) = match (dist, policy, schedule) {
        (None, Some(p), None) => {
            let p: MarkovianPolicy = read_json(p)?;
            (markovian_exact(&p, &oopts)?, None)
        }
        (None, None, Some(s)) => {
            let s: AySchedule = read_json(s)?;
            (ay_exact(&s), None)
        }
        (Some(d), None, None) => {
            let m = load_measure(d, tail_tol)?;
            m.validate(DEFAULT_VALIDATION_TOL)?;
            let law = match rule.unwrap_or(RuleKind::Markovian) {
                RuleKind::Markovian => markovian_exact(&policy_for(&m)?, &oopts)?,
                RuleKind::Ay => ay_exact(&schedule_for(&m, 10_000)?),
            };
            (law, Some(m))
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --dist, --policy, --schedule".into(),
            ))
        }
    };
    let payload = match cli.format {
        Format::Json => to_json(&law),
        Format::Csv => law.to_csv(),
    };
    Ok(Outcome {
        payload,
        summary: law_summary("exact law", &law, m.as_ref()) + "\n",
        ok: true,
    })
}

fn build_rule(m: &LatticeMeasure, rule: RuleKind) -> Result<SimRule, CliError> {
    Ok(match rule {
        RuleKind::Markovian => SimRule::Markovian(policy_for(m)?),
        RuleKind::Ay => SimRule::AzemaYor(schedule_for(m, 10_000)?),
    })
}

fn simulate_cmd(
    cli: &Cli,
    m: &LatticeMeasure,
    cfg: SimConfig,
    copts: CompareOptions,
) -> Result<Outcome, CliError> {
    let exact = match &cfg.rule {
        SimRule::Markovian(p) => markovian_exact(p, &OracleOptions::default())?,
        SimRule::AzemaYor(s) => ay_exact(s),
    };
    let report = simulate(&cfg, m)?;
    let verdict = compare(&report, &exact, &copts);
    let reliable = report.ensure_reliable();
    let payload = match cli.format {
        Format::Json => {
            let mut v = json!({"report": report, "verdict": verdict});
            if let Err(e) = &reliable {
                v["error"] = json!({"kind": "simulation", "message": e.to_string()});
            } else if !verdict.pass {
                v["error"] = json!({"kind": "check_failed", "message": "stopped law disagrees with the exact law"});
            }
            to_json(&v)
        }
        Format::Csv => report.to_csv(),
    };
    let mut summary = format!(
        "{} paths ({} censored), mean tau {:.6}, mean S {:.6}, TV to target {:.3e}, chi2 p {:.4}\n",
        report.paths,
        report.censored,
        report.mean_tau,
        report.mean_s,
        report.tv_vs_target,
        report.chi2_p
    );
    let _ = writeln!(
        summary,
        "verdict vs exact law: {} (TV {:.3e} < {:.3e}, p {:.4} > {})",
        if verdict.pass { "PASS" } else { "FAIL" },
        verdict.tv,
        verdict.tv_threshold,
        verdict.chi2.p_value,
        copts.alpha
    );
    if let Err(e) = &reliable {
        let _ = writeln!(summary, "unreliable: {e}");
    }
    Ok(Outcome {
        payload,
        summary,
        ok: verdict.pass && reliable.is_ok(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    fn new(name: &str, value: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            pass: value <= threshold,
            value,
            threshold,
            note: None,
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Oracle checks for one measure.
pub fn verify_checks(m: &LatticeMeasure, tol: f64, max_level: i64) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    if m.is_degenerate() {
        checks.push(Check::new("degenerate target stops at 0", 0.0, 0.0));
        return Ok(checks);
    }
    let bounded = m.is_bounded();
    let policy = build_policy(m, &PolicyOptions::for_measure(m))?;
    let mk = markovian_exact(&policy, &OracleOptions::default())?;
    let schedule = build_schedule(
        m,
        &ScheduleOptions {
            max_level,
            ..ScheduleOptions::for_measure(m)
        },
    )?;
    let ay = ay_exact(&schedule);

    checks.push(Check::new(
        "markovian TV to target",
        tv_to_measure(&mk.law, m),
        tol + mk.error_bound,
    ));
    checks.push(Check::new(
        "azema-yor TV to target",
        tv_to_measure(&ay.law, m),
        tol + ay.error_bound,
    ));

    let arr = mk.arrivals.as_ref().expect("markovian arrivals");
    // a capped hull cannot carry the target's local times near its edge, so
    // compare with the local times of the law the capped rule realizes
    let capped = policy.truncated_mass > m.tail_tol();
    let realized = if capped {
        local_times(&mk.law, arr.keys().copied())
    } else {
        BTreeMap::new()
    };
    let mut decomposition: f64 = 0.0;
    for (&i, &a) in arr {
        let r = policy.r(i);
        if i >= policy.hull.0 && i <= policy.hull.1 && r < 1.0 {
            let target = if capped { realized[&i] } else { policy.g(i) };
            decomposition = decomposition.max((a * (1.0 - r) - target).abs());
        }
        let (slo, shi) = m.support_bounds();
        let forced_edge = capped
            && ((i == policy.hull.0 && slo != Some(i)) || (i == policy.hull.1 && shi != Some(i)));
        if !forced_edge {
            decomposition = decomposition.max((a * r - m.pmf(i)).abs());
        }
    }
    let mut c = Check::new(
        "arrival decomposition a(1-r) = g, a r = p",
        decomposition,
        1e-10 + mk.error_bound,
    );
    if capped {
        c = c.with_note(format!(
            "hull capped at [{}, {}] with {:.1e} target mass outside; local times taken from the realized law",
            policy.hull.0, policy.hull.1, policy.truncated_mass
        ));
    }
    checks.push(c);

    let abs_moment = m.call(0) + m.put(0);
    let a0 = arr.get(&0).copied().unwrap_or(0.0);
    checks.push(Check::new(
        "visits to 0 equal E|S|",
        (a0 * (1.0 - policy.r(0)) - abs_moment).abs(),
        1e-12 + mk.error_bound,
    ));

    if bounded {
        let (lo, hi) = m.support_bounds();
        let second: f64 = m
            .masses(lo.expect("bounded"), hi.expect("bounded"))
            .iter()
            .map(|(&i, &p)| (i * i) as f64 * p)
            .sum();
        for (name, law) in [("markovian", &mk), ("azema-yor", &ay)] {
            checks.push(Check::new(
                &format!("{name} E[tau] = E[S^2]"),
                (law.e_tau.unwrap_or(f64::NAN) - second).abs(),
                1e-9,
            ));
        }
    }

    let mut gap: f64 = 0.0;
    for n in 0..=schedule.top {
        gap = gap.max((ay_max_law(&schedule, n) - m.hl_bound(n)).abs());
        gap = gap.max((ay.max_law_at(n) - m.hl_bound(n)).abs());
    }
    checks.push(Check::new("azema-yor max law = maximal bound", gap, 1e-12));

    let dom = dominance_check(&mk, &ay);
    let mut c = Check::new(
        "markovian max law <= azema-yor max law",
        dom.max_excess.max(0.0),
        1e-12,
    );
    if let Some((n, a, b)) = dom.first_violation {
        c = c.with_note(format!("first violation at n = {n}: {a} > {b}"));
    }
    checks.push(c);

    let recon = reconcile_levels(m, &schedule, 2048);
    let bad = recon.iter().filter(|r| !r.agree()).count();
    let mut c = Check::new("level sets: analytic = grid", bad as f64, 0.0);
    if let Some(r) = recon.iter().find(|r| !r.agree()) {
        c = c.with_note(format!("n = {}: {:?} vs {:?}", r.n, r.analytic, r.grid));
    }
    checks.push(c);

    let p2: MarkovianPolicy = serde_json::from_str(
        &serde_json::to_string(&policy).expect("serialisable"),
    )
    .map_err(|source| CliError::Parse {
        path: "<policy>".into(),
        source,
    })?;
    let s2: AySchedule = serde_json::from_str(
        &serde_json::to_string(&schedule).expect("serialisable"),
    )
    .map_err(|source| CliError::Parse {
        path: "<schedule>".into(),
        source,
    })?;
    let same = markovian_exact(&p2, &OracleOptions::default())? == mk && ay_exact(&s2) == ay;
    checks.push(Check::new(
        "json round trip reproduces laws",
        if same { 0.0 } else { 1.0 },
        0.0,
    ));
    Ok(checks)
}

/// `E|X - i| - |i|` under `law` for every integer between the extreme
/// `sites`, built from positive-part recursions so nothing cancels.
fn local_times(law: &BTreeMap<i64, f64>, sites: impl Iterator<Item = i64>) -> BTreeMap<i64, f64> {
    let sites: Vec<i64> = sites.collect();
    let (Some(&lo), Some(&hi)) = (sites.first(), sites.last()) else {
        return BTreeMap::new();
    };
    let mean: f64 = law.iter().map(|(&x, &p)| x as f64 * p).sum();
    let mass = |i: i64| law.get(&i).copied().unwrap_or(0.0);
    let above_hi: f64 = law
        .range(hi + 1..)
        .map(|(&x, &p)| (x - hi) as f64 * p)
        .sum();
    let below_lo: f64 = law.range(..lo).map(|(&x, &p)| (lo - x) as f64 * p).sum();
    let (mut call, mut tail) = (above_hi, law.range(hi + 1..).map(|(_, &p)| p).sum::<f64>());
    let mut out = BTreeMap::new();
    for i in (lo..=hi).rev() {
        if i < hi {
            tail += mass(i + 1);
            call += tail;
        }
        if i >= 0 {
            out.insert(i, 2.0 * call - mean);
        }
    }
    let (mut put, mut head) = (below_lo, law.range(..lo).map(|(_, &p)| p).sum::<f64>());
    for i in lo..=hi.min(-1) {
        if i > lo {
            head += mass(i - 1);
            put += head;
        }
        out.insert(i, 2.0 * put + mean);
    }
    out
}

fn verify_cmd(
    cli: &Cli,
    m: &LatticeMeasure,
    tol: f64,
    max_level: i64,
) -> Result<Outcome, CliError> {
    let checks = verify_checks(m, tol, max_level)?;
    let ok = checks.iter().all(|c| c.pass);
    let payload = match cli.format {
        Format::Json => {
            let mut v = json!({"pass": ok, "checks": checks});
            if !ok {
                let failed: Vec<&str> = checks
                    .iter()
                    .filter(|c| !c.pass)
                    .map(|c| c.name.as_str())
                    .collect();
                v["error"] = json!({"kind": "check_failed", "message": failed.join("; ")});
            }
            to_json(&v)
        }
        Format::Csv => {
            let mut s = String::from("check,pass,value,threshold\n");
            for c in &checks {
                let _ = writeln!(
                    s,
                    "\"{}\",{},{:e},{:e}",
                    c.name, c.pass, c.value, c.threshold
                );
            }
            s
        }
    };
    let mut summary = String::new();
    for c in &checks {
        let _ = writeln!(
            summary,
            "{} {:<44} {:.3e} (limit {:.1e}){}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.note
                .as_deref()
                .map(|n| format!("  {n}"))
                .unwrap_or_default()
        );
    }
    Ok(Outcome {
        payload,
        summary,
        ok,
    })
}

fn write_figure(
    path: &Path,
    policy: &MarkovianPolicy,
    schedule: &AySchedule,
    depth: usize,
) -> Result<(), CliError> {
    let mut nodes = figures::markovian_tree(policy, depth);
    nodes.extend(figures::ay_tree(schedule, depth));
    std::fs::write(path, figures::to_csv(&nodes)).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn example_cmd(cli: &Cli, which: &Example) -> Result<Outcome, CliError> {
    let start = Instant::now();
    match which {
        Example::Casino {
            mode,
            figure,
            figure_depth,
        } => {
            let mode = match mode {
                ModeArg::AsPrinted => CasinoMode::AsPrinted,
                ModeArg::Recentered => CasinoMode::Recentered,
            };
            let m = LatticeMeasure::casino(mode);
            let policy = build_policy(&m, &PolicyOptions::for_measure(&m))?;
            let schedule = build_schedule(&m, &ScheduleOptions::for_measure(&m))?;
            if let Some(f) = figure {
                write_figure(f, &policy, &schedule, *figure_depth)?;
            }
            Ok(example_outcome(
                cli,
                "casino",
                &policy,
                &schedule,
                -1..=10,
                7,
                start,
            ))
        }
        Example::Geometric {
            q_plus,
            q_minus,
            gamma_plus,
            gamma_minus,
            figure,
            figure_depth,
        } => {
            let g = MixedGeometric {
                gamma_plus: gamma_plus.unwrap_or(*q_plus),
                q_plus: *q_plus,
                gamma_minus: gamma_minus.unwrap_or(*q_minus),
                q_minus: *q_minus,
            };
            let m =
                LatticeMeasure::mixed_geometric(g.gamma_plus, g.q_plus, g.gamma_minus, g.q_minus)?;
            m.validate(DEFAULT_VALIDATION_TOL)?;
            let policy = geometric_policy(&g, &PolicyOptions::for_measure(&m))?;
            let schedule = build_schedule(&m, &ScheduleOptions::for_measure(&m))?;
            if let Some(f) = figure {
                write_figure(f, &policy, &schedule, *figure_depth)?;
            }
            Ok(example_outcome(
                cli,
                "geometric",
                &policy,
                &schedule,
                -5..=5,
                5,
                start,
            ))
        }
    }
}

fn example_outcome(
    cli: &Cli,
    name: &str,
    policy: &MarkovianPolicy,
    schedule: &AySchedule,
    sites: std::ops::RangeInclusive<i64>,
    levels: i64,
    start: Instant,
) -> Outcome {
    let r: Vec<(i64, f64)> = sites.map(|i| (i, policy.r(i))).collect();
    let shown: Vec<&crate::azema_yor::LevelSchedule> = schedule
        .levels
        .iter()
        .take_while(|l| l.n <= levels)
        .collect();
    let payload = match cli.format {
        Format::Json => {
            let lv: Vec<Value> = shown
                .iter()
                .map(|l| {
                    json!({
                        "n": l.n,
                        "m": l.m(),
                        "levels": l.stops.iter().map(|s| (s.x, s.rho)).collect::<Vec<_>>(),
                        "Gamma": l.gamma,
                    })
                })
                .collect();
            to_json(&json!({
                "example": name,
                "r": r,
                "schedule": lv,
                "schedule_top": schedule.top,
                "schedule_note": schedule.note,
            }))
        }
        Format::Csv => {
            let mut s = String::from("table,n,k,site,value\n");
            for (i, v) in &r {
                let _ = writeln!(s, "r,,,{i},{v}");
            }
            for l in &shown {
                for (j, st) in l.stops.iter().enumerate() {
                    let _ = writeln!(s, "rho,{},{},{},{}", l.n, j + 1, st.x, st.rho);
                }
            }
            s
        }
    };
    let mut summary = format!("{name}: coin policy\n");
    for (i, v) in &r {
        let _ = writeln!(summary, "  r_{i:<3} = {v:.4}");
    }
    summary.push_str("drawdown schedule\n");
    summary.push_str(&schedule_table(schedule, levels));
    let _ = writeln!(summary, "elapsed {:.3} s", start.elapsed().as_secs_f64());
    Outcome {
        payload,
        summary,
        ok: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("5/12").unwrap(), 5.0 / 12.0);
        assert_eq!(parse_fraction("0.25").unwrap(), 0.25);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn verify_three_point_passes() {
        let m = LatticeMeasure::atoms(vec![(-1, 0.5), (0, 0.25), (2, 0.25)]).unwrap();
        let checks = verify_checks(&m, 1e-9, 100).unwrap();
        for c in &checks {
            assert!(c.pass, "{c:?}");
        }
    }
}
