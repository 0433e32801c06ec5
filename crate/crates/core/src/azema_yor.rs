//! Randomized Azéma–Yor schedule: while the running maximum equals `n`, the
//! walk may stop on first touching each of a descending list of levels
//! `x^n_1 > ... > x^n_{m+1}`, with a one-shot coin of bias `rho^n_k` per level.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::measure::{Barrier, LatticeMeasure, MeasureError, DEFAULT_TAIL_TOL};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopLevel {
    pub x: i64,
    pub rho: f64,
}

/// Stop levels and diagnostics for one value `n` of the running maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSchedule {
    pub n: i64,
    /// Strictly decreasing in `x`; the last entry has `rho = 1`.
    pub stops: Vec<StopLevel>,
    /// `P(tau >= H_n)`.
    pub gamma: f64,
    /// `f_0 = 1, f_1, ..., f_{m+1}`.
    pub f: Vec<f64>,
}

impl LevelSchedule {
    /// `m_n`, one less than the number of levels.
    pub fn m(&self) -> usize {
        self.stops.len() - 1
    }

    /// `P(reach n+1 before stopping | H_n)` from the `f` values.
    pub fn survival(&self) -> f64 {
        let n1 = (self.n + 1) as f64;
        let stopped: f64 = self
            .stops
            .iter()
            .enumerate()
            .map(|(j, s)| (self.f[j] - self.f[j + 1]) / (n1 - s.x as f64))
            .sum();
        (1.0 - stopped).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScheduleFile", try_from = "ScheduleFile")]
pub struct AySchedule {
    /// Top of the support, if finite.
    pub xbar: Option<i64>,
    /// The walk stops on reaching `top`; equals `xbar` unless cut short.
    pub top: i64,
    /// Indexed by `n = 0..top`.
    pub levels: Vec<LevelSchedule>,
    /// Mass below the last kept level of a countable `n = 0` list.
    pub lower_residual: f64,
    /// `P(tau >= H_top)` when `top < xbar`, i.e. mass folded onto `top`.
    pub upper_residual: f64,
    /// Why construction stopped before `xbar`, if it did.
    pub note: Option<String>,
}

impl AySchedule {
    /// Stop at time 0.
    pub fn trivial() -> Self {
        AySchedule {
            xbar: Some(0),
            top: 0,
            levels: Vec::new(),
            lower_residual: 0.0,
            upper_residual: 0.0,
            note: None,
        }
    }

    pub fn level(&self, n: i64) -> Option<&LevelSchedule> {
        if n < 0 {
            return None;
        }
        self.levels.get(n as usize)
    }

    /// `P(S*_tau >= n)` read off the schedule.
    pub fn max_law(&self, n: i64) -> f64 {
        if n <= 0 {
            return 1.0;
        }
        if n > self.top {
            return 0.0;
        }
        if n < self.top {
            return self.levels[n as usize].gamma;
        }
        let prev = &self.levels[(n - 1) as usize];
        prev.gamma * prev.survival()
    }
}

/// On-disk form: `{"xbar": .., "levels": {"n": [[x, rho], ...]}, "diagnostics": {..}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleFile {
    xbar: Option<i64>,
    #[serde(default)]
    top: Option<i64>,
    levels: BTreeMap<i64, Vec<(i64, f64)>>,
    #[serde(default)]
    diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Diagnostics {
    #[serde(rename = "Gamma", default)]
    gamma: BTreeMap<i64, f64>,
    #[serde(default)]
    f: BTreeMap<i64, Vec<f64>>,
    #[serde(default)]
    lower_residual: f64,
    #[serde(default)]
    upper_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

impl From<AySchedule> for ScheduleFile {
    fn from(s: AySchedule) -> Self {
        let mut diagnostics = Diagnostics {
            lower_residual: s.lower_residual,
            upper_residual: s.upper_residual,
            note: s.note,
            ..Default::default()
        };
        let mut levels = BTreeMap::new();
        for l in s.levels {
            levels.insert(l.n, l.stops.iter().map(|s| (s.x, s.rho)).collect());
            diagnostics.gamma.insert(l.n, l.gamma);
            diagnostics.f.insert(l.n, l.f);
        }
        ScheduleFile {
            xbar: s.xbar,
            top: Some(s.top),
            levels,
            diagnostics,
        }
    }
}

impl TryFrom<ScheduleFile> for AySchedule {
    type Error = ScheduleError;

    fn try_from(file: ScheduleFile) -> Result<Self, Self::Error> {
        let bad = |msg: String| ScheduleError::InvalidSchedule(msg);
        let top = match (file.top, file.xbar) {
            (Some(t), _) => t,
            (None, Some(x)) => x,
            (None, None) => file.levels.keys().next_back().map_or(0, |n| n + 1),
        };
        if top < 0 {
            return Err(bad("negative top level".into()));
        }
        let mut levels = Vec::with_capacity(top as usize);
        for n in 0..top {
            let list = file
                .levels
                .get(&n)
                .ok_or_else(|| bad(format!("missing level {n}")))?;
            if list.is_empty() {
                return Err(bad(format!("level {n} is empty")));
            }
            let stops: Vec<StopLevel> = list.iter().map(|&(x, rho)| StopLevel { x, rho }).collect();
            if stops.windows(2).any(|w| w[0].x <= w[1].x) {
                return Err(bad(format!("level {n} is not strictly decreasing")));
            }
            if stops
                .iter()
                .any(|s| !(0.0..=1.0).contains(&s.rho) || s.x > n)
            {
                return Err(bad(format!(
                    "level {n} has a bias outside [0, 1] or a level above {n}"
                )));
            }
            let gamma = file.diagnostics.gamma.get(&n).copied().unwrap_or(f64::NAN);
            let f = file.diagnostics.f.get(&n).cloned().unwrap_or_default();
            levels.push(LevelSchedule { n, stops, gamma, f });
        }
        Ok(AySchedule {
            xbar: file.xbar,
            top,
            levels,
            lower_residual: file.diagnostics.lower_residual,
            upper_residual: file.diagnostics.upper_residual,
            note: file.diagnostics.note,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleOptions {
    /// Cap on the running maximum when the support is unbounded above.
    pub max_level: i64,
    /// Cut countable lists and vanishing upper levels below this mass.
    pub tail_tol: f64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            max_level: 10_000,
            tail_tol: DEFAULT_TAIL_TOL,
        }
    }
}

impl ScheduleOptions {
    pub fn for_measure(m: &LatticeMeasure) -> Self {
        ScheduleOptions {
            tail_tol: m.tail_tol(),
            ..Default::default()
        }
    }
}

fn tie(y: f64) -> f64 {
    1e-12 * y.abs().max(1.0)
}

/// Levels for maximum `n`: atoms `x <= n` whose `psi`-interval meets
/// `[n, n+1]`, in decreasing order. `None` for the countable `n = 0` list.
pub fn level_set(m: &LatticeMeasure, n: i64) -> Option<Vec<i64>> {
    let start = match m.inverse_barycenter(n as f64) {
        Barrier::NegInfinity => return None,
        Barrier::Site(b) => b,
        Barrier::Above(_) => return Some(Vec::new()),
    };
    let mut out = vec![start];
    let mut cur = start;
    let ceiling = (n + 1) as f64;
    while let Some(a) = m.next_atom_above(cur) {
        if a > n || m.psi(a) > ceiling + tie(ceiling) {
            break;
        }
        out.push(a);
        cur = a;
    }
    out.reverse();
    Some(out)
}

/// The same set by evaluating `b` at `n + j/resolution`, `j = 0..=resolution`.
pub fn level_set_grid(m: &LatticeMeasure, n: i64, resolution: u32) -> Vec<i64> {
    let set: BTreeSet<i64> = (0..=resolution)
        .filter_map(|j| {
            let y = n as f64 + j as f64 / resolution as f64;
            match m.inverse_barycenter(y) {
                Barrier::Site(b) if b <= n => Some(b),
                _ => None,
            }
        })
        .collect();
    set.into_iter().rev().collect()
}

/// Build the schedule. The point mass at 0 is rejected.
pub fn build_schedule(
    m: &LatticeMeasure,
    opts: &ScheduleOptions,
) -> Result<AySchedule, ScheduleError> {
    if m.is_degenerate() {
        return Err(MeasureError::DegenerateMeasure.into());
    }
    let (_, xbar) = m.support_bounds();
    let end = xbar.unwrap_or(opts.max_level);
    let mut levels: Vec<LevelSchedule> = Vec::new();
    let mut lower_residual = 0.0;
    let mut note = None;
    let mut prev_bottom = i64::MIN;
    for n in 0..end {
        let level = match level_set(m, n) {
            None => {
                let (level, residual) = countable_level(m, opts.tail_tol);
                lower_residual = residual;
                level
            }
            Some(xs) => match finite_level(m, n, &xs) {
                Some(l) => l,
                None => {
                    note = Some(format!("barycenter inconsistent at level {n}"));
                    break;
                }
            },
        };
        let bottom = level.stops.last().expect("nonempty").x;
        if bottom < prev_bottom {
            note = Some(format!("barycenter inverse decreased at level {n}"));
            break;
        }
        prev_bottom = bottom;
        let vanishing = xbar.is_none() && n > 0 && level.gamma < opts.tail_tol;
        levels.push(level);
        if vanishing {
            note = Some(format!("P(tau >= H_n) below tail tolerance at n = {n}"));
            break;
        }
    }
    let top = levels.len() as i64;
    let mut schedule = AySchedule {
        xbar,
        top,
        levels,
        lower_residual,
        upper_residual: 0.0,
        note,
    };
    if xbar != Some(top) {
        schedule.upper_residual = schedule.max_law(top);
        if schedule.note.is_none() {
            schedule.note = Some(format!("cut at max_level {top}"));
        }
    }
    Ok(schedule)
}

fn finite_level(m: &LatticeMeasure, n: i64, xs: &[i64]) -> Option<LevelSchedule> {
    let last = *xs.last()?;
    let nf = n as f64;
    let n1 = nf + 1.0;
    let bar = m.upper_mass(last);
    let psi = m.psi(last);
    let gamma = if n == 0 {
        1.0
    } else {
        bar * (psi - last as f64) / (nf - last as f64)
    };
    if !(gamma > 0.0 && gamma <= 1.0 + 1e-12)
        || bar.is_nan()
        || bar <= 0.0
        || xs.iter().any(|&x| m.upper_mass(x) <= 0.0)
    {
        return None;
    }
    let len = xs.len();
    // g[k] for k = 1..=len, stored at g[k-1]
    let mut g = vec![0.0; len];
    for k in 2..len {
        let x = xs[k - 1];
        g[k - 1] = (n1 - x as f64) * m.pmf(x) / gamma;
    }
    if len >= 2 {
        let x = last as f64;
        let correction = if n == 0 && psi.abs() < 1e-12 {
            // b(0) is the bottom of the support: mu_bar = 1, psi = mean = 0
            0.0
        } else {
            bar * (nf - psi) / (nf - x)
        };
        g[len - 1] = ((n1 - x) / gamma * (m.pmf(last) - correction)).max(0.0);
    }
    let mut f = vec![0.0; len + 1];
    f[0] = 1.0;
    for k in (1..len).rev() {
        f[k] = f[k + 1] + g[k];
    }
    let stops = rhos(xs, &f);
    Some(LevelSchedule { n, stops, gamma, f })
}

/// `n = 0` when the support is unbounded below: every atom at or below
/// `min(b(1), 0)`, cut once the remaining weight drops under `tail_tol`.
fn countable_level(m: &LatticeMeasure, tail_tol: f64) -> (LevelSchedule, f64) {
    let b1 = m.inverse_barycenter(1.0).site().unwrap_or(0).min(0);
    let first = if m.pmf(b1) > 0.0 {
        b1
    } else {
        m.prev_atom_below(b1).expect("support unbounded below")
    };
    let tail_weight = |x: i64| m.lower_mass(x - 1) - m.lower_moment(x - 1);
    let mut xs = vec![first];
    let mut f = vec![1.0, tail_weight(first)];
    while *f.last().expect("nonempty") >= tail_tol {
        let next = m
            .prev_atom_below(*xs.last().expect("nonempty"))
            .expect("unbounded below");
        xs.push(next);
        f.push(tail_weight(next));
    }
    let residual = *f.last().expect("nonempty");
    *f.last_mut().expect("nonempty") = 0.0;
    let stops = rhos(&xs, &f);
    (
        LevelSchedule {
            n: 0,
            stops,
            gamma: 1.0,
            f,
        },
        residual,
    )
}

fn rhos(xs: &[i64], f: &[f64]) -> Vec<StopLevel> {
    let len = xs.len();
    xs.iter()
        .enumerate()
        .map(|(j, &x)| {
            let k = j + 1;
            let rho = if k == len || f[k - 1] <= 0.0 {
                1.0
            } else {
                (1.0 - f[k] / f[k - 1]).clamp(0.0, 1.0)
            };
            StopLevel { x, rho }
        })
        .collect()
}

/// `P(S*_tau >= n)` under the schedule.
pub fn ay_max_law(s: &AySchedule, n: i64) -> f64 {
    s.max_law(n)
}

/// Analytic and grid level sets for one `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReconciliation {
    pub n: i64,
    pub analytic: Vec<i64>,
    pub grid: Vec<i64>,
}

impl LevelReconciliation {
    pub fn agree(&self) -> bool {
        self.analytic == self.grid
    }
}

/// Compare both level-set routes for `n = 1..top` (the countable `n = 0`
/// list has no finite grid counterpart and is skipped when unbounded).
pub fn reconcile_levels(
    m: &LatticeMeasure,
    s: &AySchedule,
    resolution: u32,
) -> Vec<LevelReconciliation> {
    s.levels
        .iter()
        .filter_map(|l| {
            let analytic = level_set(m, l.n)?;
            Some(LevelReconciliation {
                n: l.n,
                analytic,
                grid: level_set_grid(m, l.n, resolution),
            })
        })
        .collect()
}
