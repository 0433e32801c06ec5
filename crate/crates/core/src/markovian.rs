//! Markovian randomized stopping: at each visit to site `i` the walk stops
//! with probability `r_i`, independently of everything else.

use serde::{Deserialize, Serialize};

use crate::measure::{
    truncate, Family, LatticeMeasure, MeasureError, MixedGeometric, DEFAULT_TAIL_TOL,
};
use crate::numerics::Accumulator;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("truncation did not converge by n = {n}; last change {residual:e}")]
    NoConvergenceWithinBudget { n: i64, residual: f64 },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    DirectFormula,
    TruncationLimit,
    ClosedFormGeometric,
    Trivial,
}

/// Stopping probabilities on a hull `[lo, hi]`; outside it the walk stops surely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolicyFile", try_from = "PolicyFile")]
pub struct MarkovianPolicy {
    pub hull: (i64, i64),
    r: Vec<f64>,
    /// Expected number of unstopped visits to each site, `a_i (1 - r_i)`.
    g: Vec<f64>,
    g_err: Vec<f64>,
    pub provenance: Provenance,
    pub tail_tol: f64,
    /// Target mass lying outside the hull.
    pub truncated_mass: f64,
}

impl MarkovianPolicy {
    pub fn from_parts(
        hull: (i64, i64),
        r: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self, PolicyError> {
        let (lo, hi) = hull;
        if hi < lo || (hi - lo + 1) as usize != r.len() {
            return Err(PolicyError::InvalidPolicy(format!(
                "hull [{lo}, {hi}] does not match {} entries",
                r.len()
            )));
        }
        if let Some(k) = r.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(PolicyError::InvalidPolicy(format!(
                "r at site {} is {}, outside [0, 1]",
                lo + k as i64,
                r[k]
            )));
        }
        let n = r.len();
        Ok(MarkovianPolicy {
            hull,
            r,
            g: vec![f64::NAN; n],
            g_err: vec![f64::NAN; n],
            provenance,
            tail_tol: DEFAULT_TAIL_TOL,
            truncated_mass: 0.0,
        })
    }

    /// Stop at 0 surely.
    pub fn trivial() -> Self {
        MarkovianPolicy {
            hull: (0, 0),
            r: vec![1.0],
            g: vec![0.0],
            g_err: vec![0.0],
            provenance: Provenance::Trivial,
            tail_tol: DEFAULT_TAIL_TOL,
            truncated_mass: 0.0,
        }
    }

    pub fn r(&self, i: i64) -> f64 {
        if i < self.hull.0 || i > self.hull.1 {
            1.0
        } else {
            self.r[(i - self.hull.0) as usize]
        }
    }

    /// Target `g_i` used to build `r_i`; `NaN` when the policy was loaded.
    pub fn g(&self, i: i64) -> f64 {
        if i < self.hull.0 || i > self.hull.1 {
            0.0
        } else {
            self.g[(i - self.hull.0) as usize]
        }
    }

    /// Interval containing the exact `r_i` given the error in `g_i`.
    pub fn r_interval(&self, i: i64, m: &LatticeMeasure) -> (f64, f64) {
        let r = self.r(i);
        if i < self.hull.0 || i > self.hull.1 {
            return (r, r);
        }
        let k = (i - self.hull.0) as usize;
        let (g, e, p) = (self.g[k], self.g_err[k], m.pmf(i));
        if !g.is_finite() || !e.is_finite() || p == 0.0 {
            return (r, r);
        }
        let lo = p / (p + g + e);
        let hi = if p + g - e > 0.0 {
            p / (p + g - e)
        } else {
            1.0
        };
        (lo.min(r), hi.max(r))
    }

    pub fn sites(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        (self.hull.0..=self.hull.1).zip(self.r.iter().copied())
    }

    /// Restrict or extend to `[lo, hi]`; sites outside the old hull get `r = 1`.
    pub fn window(&self, lo: i64, hi: i64) -> Vec<f64> {
        (lo..=hi).map(|i| self.r(i)).collect()
    }

    fn mirrored(&self) -> Self {
        let mut out = self.clone();
        out.hull = (-self.hull.1, -self.hull.0);
        out.r.reverse();
        out.g.reverse();
        out.g_err.reverse();
        out
    }
}

/// On-disk form: `{"r": [[i, r_i], ...], "hull": [lo, hi], ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyFile {
    r: Vec<(i64, f64)>,
    hull: (i64, i64),
    provenance: Provenance,
    #[serde(default = "default_tail_tol")]
    tail_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<Vec<(i64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g_err: Option<Vec<(i64, f64)>>,
    #[serde(default)]
    truncated_mass: f64,
}

fn default_tail_tol() -> f64 {
    DEFAULT_TAIL_TOL
}

impl From<MarkovianPolicy> for PolicyFile {
    fn from(p: MarkovianPolicy) -> Self {
        let known = p.g.iter().chain(&p.g_err).all(|x| x.is_finite());
        let g = known.then(|| (p.hull.0..=p.hull.1).zip(p.g.iter().copied()).collect());
        let g_err = known.then(|| (p.hull.0..=p.hull.1).zip(p.g_err.iter().copied()).collect());
        PolicyFile {
            r: p.sites().collect(),
            hull: p.hull,
            provenance: p.provenance,
            tail_tol: p.tail_tol,
            g,
            g_err,
            truncated_mass: p.truncated_mass,
        }
    }
}

impl TryFrom<PolicyFile> for MarkovianPolicy {
    type Error = PolicyError;

    fn try_from(f: PolicyFile) -> Result<Self, Self::Error> {
        let (lo, hi) = f.hull;
        if hi < lo {
            return Err(PolicyError::InvalidPolicy("empty hull".into()));
        }
        let mut r = vec![f64::NAN; (hi - lo + 1) as usize];
        for (i, v) in f.r {
            if i < lo || i > hi {
                return Err(PolicyError::InvalidPolicy(format!("site {i} outside hull")));
            }
            r[(i - lo) as usize] = v;
        }
        if let Some(k) = r.iter().position(|v| v.is_nan()) {
            return Err(PolicyError::InvalidPolicy(format!(
                "no r given for site {}",
                lo + k as i64
            )));
        }
        let mut p = MarkovianPolicy::from_parts(f.hull, r, f.provenance)?;
        p.tail_tol = f.tail_tol;
        p.truncated_mass = f.truncated_mass;
        for (src, dst) in [(f.g, &mut p.g), (f.g_err, &mut p.g_err)] {
            for (i, v) in src.unwrap_or_default() {
                if (lo..=hi).contains(&i) {
                    dst[(i - lo) as usize] = v;
                }
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOptions {
    /// Mass allowed outside the hull on each side of a countable support.
    pub tail_tol: f64,
    /// Cap on hull width for countable supports.
    pub max_sites: usize,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        PolicyOptions {
            tail_tol: DEFAULT_TAIL_TOL,
            max_sites: 1 << 20,
        }
    }
}

impl PolicyOptions {
    pub fn for_measure(m: &LatticeMeasure) -> Self {
        PolicyOptions {
            tail_tol: m.tail_tol(),
            ..Default::default()
        }
    }
}

fn hull_for(m: &LatticeMeasure, opts: &PolicyOptions) -> (i64, i64) {
    let (lo, hi) = m.effective_bounds(opts.tail_tol);
    let half = (opts.max_sites / 2) as i64;
    (lo.max(-half).min(0), hi.min(half).max(0))
}

/// `r_i = mu(i) / (mu(i) + g_i)` with `g_i = 2 E[(S-i)^+]` for `i >= 0` and
/// `g_i = 2 E[(i-S)^+]` for `i <= 0`.
pub fn build_policy(
    m: &LatticeMeasure,
    opts: &PolicyOptions,
) -> Result<MarkovianPolicy, PolicyError> {
    if m.is_degenerate() {
        return Err(MeasureError::DegenerateMeasure.into());
    }
    let (lo, hi) = hull_for(m, opts);
    let n = (hi - lo + 1) as usize;
    let mut g = vec![0.0; n];
    let mut g_err = vec![0.0; n];
    let eps = f64::EPSILON;
    let tail_err = m.tail_error();
    match m.family() {
        Family::Atoms(_) => {
            // call(i) = call(i+1) + mu([i+1, inf)), put(i) = put(i-1) + mu((-inf, i-1])
            let mut call = Accumulator::default();
            call.add(m.call(hi));
            for i in (0..=hi).rev() {
                if i < hi {
                    call.add(m.upper_mass(i + 1));
                }
                let k = (i - lo) as usize;
                g[k] = 2.0 * call.value();
                g_err[k] = 4.0 * eps * g[k] * (1 + hi - i) as f64;
            }
            let mut put = Accumulator::default();
            put.add(m.put(lo));
            for i in lo..=0 {
                if i > lo {
                    put.add(m.lower_mass(i - 1));
                }
                let k = (i - lo) as usize;
                if i < 0 {
                    g[k] = 2.0 * put.value();
                    g_err[k] = 4.0 * eps * g[k] * (1 + i - lo) as f64;
                }
            }
        }
        _ => {
            for i in lo..=hi {
                let k = (i - lo) as usize;
                let (v, scale) = if i >= 0 {
                    let c = m.call(i);
                    (c, c.abs() + (i as f64).abs() + 1.0)
                } else {
                    let p = m.put(i);
                    (p, p.abs() + (i as f64).abs() + 1.0)
                };
                g[k] = 2.0 * v.max(0.0);
                g_err[k] = 2.0 * (16.0 * eps * scale + tail_err * (i.abs() as f64 + 1.0));
            }
        }
    }
    let mut r: Vec<f64> = (lo..=hi)
        .map(|i| {
            let p = m.pmf(i);
            let gi = g[(i - lo) as usize];
            if p + gi > 0.0 {
                p / (p + gi)
            } else {
                1.0
            }
        })
        .collect();
    let (slo, shi) = m.support_bounds();
    if slo != Some(lo) {
        r[0] = 1.0;
    }
    if shi != Some(hi) {
        r[n - 1] = 1.0;
    }
    let truncated_mass = m.lower_mass(lo - 1).max(0.0) + m.upper_mass(hi + 1).max(0.0);
    Ok(MarkovianPolicy {
        hull: (lo, hi),
        r,
        g,
        g_err,
        provenance: Provenance::DirectFormula,
        tail_tol: opts.tail_tol,
        truncated_mass: if m.is_bounded() { 0.0 } else { truncated_mass },
    })
}

/// Closed-form policy for the two-sided geometric family:
/// `r_i = q^2 / ((1-q)^2 + 1)` away from 0 on each side.
pub fn geometric_policy(
    g: &MixedGeometric,
    opts: &PolicyOptions,
) -> Result<MarkovianPolicy, PolicyError> {
    let m = LatticeMeasure::mixed_geometric(g.gamma_plus, g.q_plus, g.gamma_minus, g.q_minus)?;
    let (lo, hi) = hull_for(&m, opts);
    let side = |q: f64| q * q / ((1.0 - q) * (1.0 - q) + 1.0);
    let zero = 1.0 - g.gamma_plus - g.gamma_minus;
    let r0 = if g.gamma_plus == 0.0 {
        1.0
    } else {
        zero / (zero + 2.0 * g.gamma_plus / g.q_plus)
    };
    let (slo, shi) = m.support_bounds();
    let r: Vec<f64> = (lo..=hi)
        .map(|i| {
            if (i == lo && slo != Some(lo)) || (i == hi && shi != Some(hi)) {
                1.0
            } else if i > 0 {
                side(g.q_plus)
            } else if i < 0 {
                side(g.q_minus)
            } else {
                r0
            }
        })
        .collect();
    let mut p = MarkovianPolicy::from_parts((lo, hi), r, Provenance::ClosedFormGeometric)?;
    p.tail_tol = opts.tail_tol;
    p.truncated_mass = m.lower_mass(lo - 1) + m.upper_mass(hi + 1);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationOptions {
    /// Convergence is judged on `|i| <= window`.
    pub window: i64,
    /// Stop once successive policies differ by less than this on the window.
    pub tol: f64,
    pub max_n: i64,
    pub policy: PolicyOptions,
}

impl Default for TruncationOptions {
    fn default() -> Self {
        TruncationOptions {
            window: 50,
            tol: 1e-10,
            max_n: 5000,
            policy: PolicyOptions::default(),
        }
    }
}

/// One rung of the truncation ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationStep {
    pub n: i64,
    pub a_n: i64,
    /// `r^n_i` for `i = -window..=window`.
    pub r_window: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationRun {
    pub policy: MarkovianPolicy,
    pub history: Vec<TruncationStep>,
    pub residual: f64,
}

/// Build policies for the bounded truncations `mu_n`, `n = 1, 2, ...`, until
/// they settle on the window. A bounded measure needs one step.
pub fn policy_by_truncation(
    m: &LatticeMeasure,
    opts: &TruncationOptions,
) -> Result<TruncationRun, PolicyError> {
    let w = opts.window;
    if m.is_bounded() {
        let policy = build_policy(m, &opts.policy)?;
        let (lo, hi) = m.support_bounds();
        let step = TruncationStep {
            n: hi.unwrap_or(0),
            a_n: lo.unwrap_or(0),
            r_window: policy.window(-w, w),
        };
        return Ok(TruncationRun {
            policy,
            history: vec![step],
            residual: 0.0,
        });
    }
    let (lo, hi) = m.support_bounds();
    if lo.is_none() && hi.is_some() {
        let reflected = m.reflected().ok_or_else(|| {
            PolicyError::InvalidPolicy("cannot reflect this measure family".into())
        })?;
        let mut run = policy_by_truncation(&reflected, opts)?;
        run.policy = run.policy.mirrored();
        for step in &mut run.history {
            step.r_window.reverse();
        }
        return Ok(run);
    }
    let mut history: Vec<TruncationStep> = Vec::new();
    let mut last: Option<MarkovianPolicy> = None;
    let mut residual = f64::INFINITY;
    for n in 1..=opts.max_n {
        let t = truncate(m, n)?;
        let mn = t.to_measure()?;
        let policy = build_policy(&mn, &opts.policy)?;
        let r_window = policy.window(-w, w);
        let gap = |prev: &TruncationStep| -> f64 {
            prev.r_window
                .iter()
                .zip(&r_window)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        // consecutive n often share a_n, which hides slow movement near the
        // left edge, so also compare with the last step that moved a_n
        if let Some(prev) = history.last() {
            residual = gap(prev);
            match history.iter().rev().find(|s| s.a_n != t.a_n) {
                Some(moved) => residual = residual.max(gap(moved)),
                None => residual = f64::INFINITY,
            }
        }
        history.push(TruncationStep {
            n,
            a_n: t.a_n,
            r_window,
        });
        let mut policy = policy;
        policy.provenance = Provenance::TruncationLimit;
        last = Some(policy);
        // require the window to sit strictly inside the truncated hull
        if residual < opts.tol && n > w && -t.a_n > w {
            break;
        }
    }
    if residual >= opts.tol {
        return Err(PolicyError::NoConvergenceWithinBudget {
            n: opts.max_n,
            residual,
        });
    }
    Ok(TruncationRun {
        policy: last.expect("at least one step"),
        history,
        residual,
    })
}
