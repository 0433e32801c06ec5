//! Seeded path simulation under either stopping rule.
//!
//! Every path owns a ChaCha8 stream selected by its index, so a run is a pure
//! function of its configuration regardless of thread count.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::azema_yor::AySchedule;
use crate::markovian::MarkovianPolicy;
use crate::measure::LatticeMeasure;
use crate::numerics::{chi_square_test, total_variation, ChiSquareOutcome};
use crate::oracle::{tv_to_measure, StoppedLaw};

pub const DEFAULT_MAX_STEPS: u64 = 10_000_000;
const CHUNK: u64 = 4096;
const TRACE_LEN: usize = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("{censored} of {paths} paths hit max_steps (limit {limit})")]
    ExcessCensoring {
        censored: u64,
        paths: u64,
        limit: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Source of `+1` / `-1` steps.
pub trait StepSource {
    fn step(&mut self) -> i64;
}

/// Source of stopping coins; `tails(p)` is true with probability `p`.
pub trait CoinSource {
    fn tails(&mut self, p: f64) -> bool;
}

/// What a Markovian rule may look at: the current site, nothing else.
pub trait StateRule {
    fn stop_probability(&self, state: i64) -> f64;
}

impl StateRule for MarkovianPolicy {
    fn stop_probability(&self, state: i64) -> f64 {
        self.r(state)
    }
}

/// Random stream for one path.
pub struct PathRng {
    rng: ChaCha8Rng,
    bits: u64,
    left: u32,
}

impl PathRng {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        PathRng {
            rng,
            bits: 0,
            left: 0,
        }
    }
}

impl StepSource for PathRng {
    fn step(&mut self) -> i64 {
        if self.left == 0 {
            self.bits = self.rng.next_u64();
            self.left = 64;
        }
        let b = self.bits & 1;
        self.bits >>= 1;
        self.left -= 1;
        if b == 1 {
            1
        } else {
            -1
        }
    }
}

impl CoinSource for PathRng {
    fn tails(&mut self, p: f64) -> bool {
        if p >= 1.0 {
            true
        } else if p <= 0.0 {
            false
        } else {
            self.rng.gen::<f64>() < p
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathOutcome {
    pub stopped_at: i64,
    pub tau: u64,
    pub max: i64,
    pub censored: bool,
}

/// Run one path: a fresh coin at every visit, biased by the current site only.
pub fn run_markovian<R, D>(
    rule: &R,
    src: &mut D,
    max_steps: u64,
    mut trace: Option<&mut Vec<i64>>,
) -> PathOutcome
where
    R: StateRule + ?Sized,
    D: StepSource + CoinSource,
{
    let (mut s, mut max, mut t) = (0i64, 0i64, 0u64);
    loop {
        if let Some(tr) = trace.as_deref_mut() {
            if tr.len() < TRACE_LEN {
                tr.push(s);
            }
        }
        if src.tails(rule.stop_probability(s)) {
            return PathOutcome {
                stopped_at: s,
                tau: t,
                max,
                censored: false,
            };
        }
        if t == max_steps {
            return PathOutcome {
                stopped_at: s,
                tau: t,
                max,
                censored: true,
            };
        }
        s += src.step();
        max = max.max(s);
        t += 1;
    }
}

/// Path state for the drawdown rule: the running maximum and which of its
/// level coins have already been tossed (and shown heads).
#[derive(Debug, Clone)]
pub struct AyWalker<'a> {
    schedule: &'a AySchedule,
    max: i64,
    tossed: Vec<bool>,
}

/// What the rule does at the current site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Stop,
    Continue,
    /// Toss the coin for level `k` (0-based) with tails probability `rho`.
    Coin {
        k: usize,
        rho: f64,
    },
}

impl<'a> AyWalker<'a> {
    pub fn new(schedule: &'a AySchedule) -> Self {
        let mut w = AyWalker {
            schedule,
            max: 0,
            tossed: Vec::new(),
        };
        w.reset_coins();
        w
    }

    pub fn running_max(&self) -> i64 {
        self.max
    }

    fn reset_coins(&mut self) {
        let len = self.schedule.level(self.max).map_or(0, |l| l.stops.len());
        self.tossed = vec![false; len];
    }

    /// Record that the walk is at `state`; a new maximum discards old coins.
    pub fn advance(&mut self, state: i64) {
        if state > self.max {
            self.max = state;
            self.reset_coins();
        }
    }

    /// Next action at `state`, without consuming anything.
    pub fn decision(&self, state: i64) -> Decision {
        if self.max >= self.schedule.top {
            return Decision::Stop;
        }
        let level = &self.schedule.levels[self.max as usize];
        for (k, stop) in level.stops.iter().enumerate() {
            if state > stop.x {
                break;
            }
            if !self.tossed[k] {
                return if stop.rho >= 1.0 {
                    Decision::Stop
                } else {
                    Decision::Coin { k, rho: stop.rho }
                };
            }
        }
        Decision::Continue
    }

    /// Mark coin `k` of the current level as tossed with heads.
    pub fn mark_heads(&mut self, k: usize) {
        self.tossed[k] = true;
    }

    /// Toss whatever coins are due at `state`; true means stop.
    pub fn visit<C: CoinSource>(&mut self, state: i64, coins: &mut C) -> bool {
        self.advance(state);
        debug_assert!(self.touched_before_crossing(state));
        loop {
            match self.decision(state) {
                Decision::Stop => return true,
                Decision::Continue => return false,
                Decision::Coin { k, rho } => {
                    if coins.tails(rho) {
                        return true;
                    }
                    self.mark_heads(k);
                }
            }
        }
    }

    /// Every level strictly above `state` has had its coin tossed.
    fn touched_before_crossing(&self, state: i64) -> bool {
        match self.schedule.level(self.max) {
            Some(level) => level
                .stops
                .iter()
                .zip(&self.tossed)
                .all(|(s, &t)| s.x <= state || t),
            None => true,
        }
    }
}

/// Run one path under the drawdown rule.
pub fn run_ay<D: StepSource + CoinSource>(
    schedule: &AySchedule,
    src: &mut D,
    max_steps: u64,
    mut trace: Option<&mut Vec<i64>>,
) -> PathOutcome {
    let mut walker = AyWalker::new(schedule);
    let (mut s, mut t) = (0i64, 0u64);
    loop {
        if let Some(tr) = trace.as_deref_mut() {
            if tr.len() < TRACE_LEN {
                tr.push(s);
            }
        }
        if walker.visit(s, src) {
            return PathOutcome {
                stopped_at: s,
                tau: t,
                max: walker.running_max(),
                censored: false,
            };
        }
        if t == max_steps {
            return PathOutcome {
                stopped_at: s,
                tau: t,
                max: walker.running_max(),
                censored: true,
            };
        }
        s += src.step();
        t += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rule", rename_all = "snake_case")]
pub enum SimRule {
    Markovian(MarkovianPolicy),
    AzemaYor(AySchedule),
}

impl SimRule {
    pub fn name(&self) -> &'static str {
        match self {
            SimRule::Markovian(_) => "markovian",
            SimRule::AzemaYor(_) => "azema_yor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub paths: u64,
    pub seed: u64,
    pub max_steps: u64,
    pub rule: SimRule,
    /// Worker threads; `None` uses the ambient pool.
    pub threads: Option<usize>,
    /// Largest tolerated fraction of censored paths.
    pub censoring_limit: f64,
    /// Record the first this-many paths (up to a fixed length).
    pub trace_paths: usize,
}

impl SimConfig {
    pub fn new(rule: SimRule, paths: u64, seed: u64) -> Self {
        SimConfig {
            paths,
            seed,
            max_steps: DEFAULT_MAX_STEPS,
            rule,
            threads: None,
            censoring_limit: 0.0,
            trace_paths: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub rule: String,
    pub paths: u64,
    pub seed: u64,
    pub max_steps: u64,
    pub counts: BTreeMap<i64, u64>,
    pub empirical_law: BTreeMap<i64, f64>,
    /// Fraction of all paths with `S*_tau >= n`, censored paths included at
    /// their observed maximum.
    pub empirical_max_law: BTreeMap<i64, f64>,
    pub mean_tau: f64,
    #[serde(rename = "mean_S")]
    pub mean_s: f64,
    #[serde(rename = "std_S")]
    pub std_s: f64,
    pub tv_vs_target: f64,
    pub chi2: ChiSquareOutcome,
    pub chi2_p: f64,
    pub censored: u64,
    pub censoring_limit: f64,
    pub censoring_limit_exceeded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<Vec<i64>>,
}

impl SimReport {
    pub fn uncensored(&self) -> u64 {
        self.paths - self.censored
    }

    pub fn ensure_reliable(&self) -> Result<(), SimError> {
        if self.censoring_limit_exceeded {
            Err(SimError::ExcessCensoring {
                censored: self.censored,
                paths: self.paths,
                limit: self.censoring_limit,
            })
        } else {
            Ok(())
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,key,value\n");
        for (k, v) in &self.counts {
            out.push_str(&format!("count,{k},{v}\n"));
        }
        for (k, v) in &self.empirical_law {
            out.push_str(&format!("law,{k},{v:e}\n"));
        }
        for (k, v) in &self.empirical_max_law {
            out.push_str(&format!("max_law,{k},{v:e}\n"));
        }
        for (name, v) in [
            ("mean_tau", self.mean_tau),
            ("mean_S", self.mean_s),
            ("std_S", self.std_s),
            ("tv_vs_target", self.tv_vs_target),
            ("chi2_p", self.chi2_p),
        ] {
            out.push_str(&format!("{name},,{v:e}\n"));
        }
        out.push_str(&format!("censored,,{}\n", self.censored));
        out
    }
}

#[derive(Debug, Clone, Default)]
struct Tally {
    counts: BTreeMap<i64, u64>,
    max_hist: BTreeMap<i64, u64>,
    sum_tau: u128,
    sum_s: i128,
    sum_s2: u128,
    censored: u64,
    traces: Vec<(u64, Vec<i64>)>,
}

impl Tally {
    fn merge(&mut self, other: Tally) {
        for (k, v) in other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.max_hist {
            *self.max_hist.entry(k).or_insert(0) += v;
        }
        self.sum_tau += other.sum_tau;
        self.sum_s += other.sum_s;
        self.sum_s2 += other.sum_s2;
        self.censored += other.censored;
        self.traces.extend(other.traces);
    }
}

fn run_chunk(cfg: &SimConfig, start: u64, end: u64) -> Tally {
    let mut tally = Tally::default();
    for path in start..end {
        let mut rng = PathRng::new(cfg.seed, path);
        let mut trace = ((path as usize) < cfg.trace_paths).then(Vec::new);
        let out = match &cfg.rule {
            SimRule::Markovian(p) => run_markovian(p, &mut rng, cfg.max_steps, trace.as_mut()),
            SimRule::AzemaYor(s) => run_ay(s, &mut rng, cfg.max_steps, trace.as_mut()),
        };
        *tally.max_hist.entry(out.max).or_insert(0) += 1;
        if out.censored {
            tally.censored += 1;
        } else {
            *tally.counts.entry(out.stopped_at).or_insert(0) += 1;
            tally.sum_tau += out.tau as u128;
            tally.sum_s += out.stopped_at as i128;
            tally.sum_s2 += (out.stopped_at as i128 * out.stopped_at as i128) as u128;
        }
        if let Some(tr) = trace {
            tally.traces.push((path, tr));
        }
    }
    tally
}

pub fn simulate(cfg: &SimConfig, target: &LatticeMeasure) -> Result<SimReport, SimError> {
    if cfg.paths == 0 || cfg.max_steps == 0 {
        return Err(SimError::InvalidConfig(
            "paths and max_steps must be >= 1".into(),
        ));
    }
    let chunks = cfg.paths.div_ceil(CHUNK);
    let work = || {
        (0..chunks)
            .into_par_iter()
            .map(|c| run_chunk(cfg, c * CHUNK, ((c + 1) * CHUNK).min(cfg.paths)))
            .collect::<Vec<Tally>>()
    };
    let parts = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    };
    let mut tally = Tally::default();
    for part in parts {
        tally.merge(part);
    }
    Ok(summarize(cfg, tally, target))
}

fn summarize(cfg: &SimConfig, tally: Tally, target: &LatticeMeasure) -> SimReport {
    let done = cfg.paths - tally.censored;
    let nf = done.max(1) as f64;
    let empirical_law: BTreeMap<i64, f64> = tally
        .counts
        .iter()
        .map(|(&k, &v)| (k, v as f64 / nf))
        .collect();
    let mut empirical_max_law = BTreeMap::new();
    let mut above = 0u64;
    let top = tally.max_hist.keys().next_back().copied().unwrap_or(0);
    for n in (0..=top).rev() {
        above += tally.max_hist.get(&n).copied().unwrap_or(0);
        empirical_max_law.insert(n, above as f64 / cfg.paths as f64);
    }
    let mean_s = tally.sum_s as f64 / nf;
    let var = if done > 1 {
        (tally.sum_s2 as f64 - nf * mean_s * mean_s) / (nf - 1.0)
    } else {
        0.0
    };
    let expected = expected_masses(target, done);
    let chi2 = chi_square_test(&tally.counts, &expected, 5.0);
    let censored_fraction = tally.censored as f64 / cfg.paths as f64;
    let mut traces = tally.traces;
    traces.sort_by_key(|t| t.0);
    SimReport {
        rule: cfg.rule.name().to_string(),
        paths: cfg.paths,
        seed: cfg.seed,
        max_steps: cfg.max_steps,
        counts: tally.counts,
        tv_vs_target: tv_to_measure(&empirical_law, target),
        empirical_law,
        empirical_max_law,
        mean_tau: tally.sum_tau as f64 / nf,
        mean_s,
        std_s: var.max(0.0).sqrt(),
        chi2,
        chi2_p: chi2.p_value,
        censored: tally.censored,
        censoring_limit: cfg.censoring_limit,
        censoring_limit_exceeded: censored_fraction > cfg.censoring_limit,
        traces: traces.into_iter().map(|t| t.1).collect(),
    }
}

/// Target masses at every site that could carry at least five expected counts.
fn expected_masses(m: &LatticeMeasure, paths: u64) -> BTreeMap<i64, f64> {
    let tol = (5.0 / paths.max(1) as f64).min(1e-3);
    let (lo, hi) = m.effective_bounds(tol);
    m.masses(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub alpha: f64,
    /// TV must fall below `c / sqrt(paths)`.
    pub c: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            alpha: 1e-3,
            c: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub chi2: ChiSquareOutcome,
    pub tv: f64,
    pub tv_threshold: f64,
}

/// Goodness of fit of a simulation against an exact law.
pub fn compare(report: &SimReport, exact: &StoppedLaw, opts: &CompareOptions) -> Verdict {
    let chi2 = chi_square_test(&report.counts, &exact.law, 5.0);
    let tv = total_variation(&report.empirical_law, &exact.law);
    let tv_threshold = opts.c / (report.uncensored().max(1) as f64).sqrt();
    Verdict {
        pass: chi2.p_value > opts.alpha && tv < tv_threshold,
        chi2,
        tv,
        tv_threshold,
    }
}
