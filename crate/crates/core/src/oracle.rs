//! Exact stopped laws, without sampling. The Markovian rule is an absorbing
//! chain solved by tridiagonal elimination; the Azéma–Yor rule is a product of
//! gambler's-ruin probabilities level by level.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::azema_yor::AySchedule;
use crate::markovian::MarkovianPolicy;
use crate::measure::LatticeMeasure;
use crate::numerics::{compensated_sum, Accumulator};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("balance equations are singular near site {site}")]
    SingularSystem { site: i64 },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Law of `S_tau`, tail of `S*_tau`, and `E[tau]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppedLaw {
    pub law: BTreeMap<i64, f64>,
    /// `P(S*_tau >= n)`; absent keys beyond the last one are zero.
    pub max_law: BTreeMap<i64, f64>,
    pub e_tau: Option<f64>,
    /// Expected number of coin tosses at each site (Markovian rule).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrivals: Option<BTreeMap<i64, f64>>,
    /// Bound on the total mass misplaced by truncation and roundoff.
    pub error_bound: f64,
}

impl StoppedLaw {
    pub fn max_law_at(&self, n: i64) -> f64 {
        if n <= 0 {
            return 1.0;
        }
        self.max_law.get(&n).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.law.values().copied())
    }

    /// Rows `kind,key,value` for CSV output.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,key,value\n");
        for (k, v) in &self.law {
            out.push_str(&format!("law,{k},{v:e}\n"));
        }
        for (k, v) in &self.max_law {
            out.push_str(&format!("max_law,{k},{v:e}\n"));
        }
        if let Some(arr) = &self.arrivals {
            for (k, v) in arr {
                out.push_str(&format!("arrivals,{k},{v:e}\n"));
            }
        }
        if let Some(e) = self.e_tau {
            out.push_str(&format!("e_tau,,{e:e}\n"));
        }
        out.push_str(&format!("error_bound,,{:e}\n", self.error_bound));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Largest `n` for which the Markovian `P(S* >= n)` is solved.
    pub max_law_levels: i64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            max_law_levels: 4096,
        }
    }
}

/// Solve `a_i = 1{i = 0} + sum_{j = i +- 1} a_j (1 - r_j) / 2` on `[lo, hi]`
/// with `a = 0` outside. Sites `lo` and `hi` must stop surely.
fn arrivals(r: &[f64], lo: i64) -> Result<Vec<f64>, OracleError> {
    let n = r.len();
    let c: Vec<f64> = r.iter().map(|x| 1.0 - x).collect();
    let zero = (-lo) as usize;
    // Thomas elimination on sub_i = -c_{i-1}/2, diag = 1, sup_i = -c_{i+1}/2
    let mut w = vec![0.0; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let sub = if i > 0 { -0.5 * c[i - 1] } else { 0.0 };
        let sup = if i + 1 < n { -0.5 * c[i + 1] } else { 0.0 };
        let rhs = if i == zero { 1.0 } else { 0.0 };
        let (wp, dp) = if i > 0 {
            (w[i - 1], d[i - 1])
        } else {
            (0.0, 0.0)
        };
        let pivot = 1.0 - sub * wp;
        if pivot.is_nan() || pivot <= 1e-300 || !pivot.is_finite() {
            return Err(OracleError::SingularSystem {
                site: lo + i as i64,
            });
        }
        w[i] = sup / pivot;
        d[i] = (rhs - sub * dp) / pivot;
    }
    let mut a = vec![0.0; n];
    for i in (0..n).rev() {
        a[i] = d[i] - if i + 1 < n { w[i] * a[i + 1] } else { 0.0 };
        if !a[i].is_finite() {
            return Err(OracleError::SingularSystem {
                site: lo + i as i64,
            });
        }
    }
    Ok(a)
}

/// Stopping probabilities on the solve domain: the policy hull padded by one
/// surely-stopping site on each side, and always containing 0.
fn solve_domain(p: &MarkovianPolicy) -> (i64, Vec<f64>) {
    let lo = p.hull.0.min(0) - 1;
    let hi = p.hull.1.max(0) + 1;
    (lo, (lo..=hi).map(|i| p.r(i)).collect())
}

pub fn markovian_exact(
    p: &MarkovianPolicy,
    opts: &OracleOptions,
) -> Result<StoppedLaw, OracleError> {
    let (lo, r) = solve_domain(p);
    if let Some(k) = r.iter().position(|x| !(0.0..=1.0).contains(x)) {
        return Err(OracleError::InvalidPolicy(format!(
            "r at {} is {}",
            lo + k as i64,
            r[k]
        )));
    }
    let a = arrivals(&r, lo)?;
    let mut law = BTreeMap::new();
    let mut arr = BTreeMap::new();
    let mut e_tau = Accumulator::default();
    for (k, (&ai, &ri)) in a.iter().zip(&r).enumerate() {
        let site = lo + k as i64;
        if ai != 0.0 {
            arr.insert(site, ai);
        }
        let q = ri * ai;
        if q > 0.0 {
            law.insert(site, q);
        }
        e_tau.add(ai * (1.0 - ri));
    }
    let top = (lo + r.len() as i64 - 1).min(opts.max_law_levels);
    let tail: Vec<(i64, f64)> = (1..=top)
        .into_par_iter()
        .map(|n| {
            // make n absorbing and drop everything above it
            let mut sub: Vec<f64> = r[..=(n - lo) as usize].to_vec();
            *sub.last_mut().expect("nonempty") = 1.0;
            let reach = arrivals(&sub, lo).map(|a| *a.last().expect("nonempty"));
            reach.map(|v| (n, v))
        })
        .collect::<Result<_, _>>()?;
    let mut max_law: BTreeMap<i64, f64> = BTreeMap::from([(0, 1.0)]);
    max_law.extend(tail.into_iter().filter(|&(_, v)| v > 0.0));
    let roundoff = 64.0 * f64::EPSILON * r.len() as f64;
    Ok(StoppedLaw {
        law,
        max_law,
        e_tau: Some(e_tau.value()),
        arrivals: Some(arr),
        error_bound: p.truncated_mass + roundoff,
    })
}

/// Level-by-level recursion. With `x_0 = n`, the walk goes from `x_{j-1}` to
/// `x_j` before `n+1` with probability `(n+1-x_{j-1})/(n+1-x_j)`, then stops
/// there with probability `rho_j`.
pub fn ay_exact(s: &AySchedule) -> StoppedLaw {
    let mut law: BTreeMap<i64, f64> = BTreeMap::new();
    let mut max_law: BTreeMap<i64, f64> = BTreeMap::new();
    let mut e_tau = Accumulator::default();
    let mut alive = 1.0;
    for level in &s.levels {
        let n = level.n;
        max_law.insert(n, alive);
        let n1 = (n + 1) as f64;
        let mut at_prev = 1.0;
        let mut prev = n;
        let mut up = Accumulator::default();
        for stop in &level.stops {
            let (xp, x) = (prev as f64, stop.x as f64);
            e_tau.add(alive * at_prev * (xp - x) * (n1 - xp));
            up.add(at_prev * (xp - x) / (n1 - x));
            let reach = at_prev * (n1 - xp) / (n1 - x);
            let stopped = reach * stop.rho;
            if stopped > 0.0 {
                *law.entry(stop.x).or_insert(0.0) += alive * stopped;
            }
            at_prev = reach * (1.0 - stop.rho);
            prev = stop.x;
        }
        alive *= up.value();
    }
    max_law.insert(s.top, alive);
    if alive > 0.0 {
        *law.entry(s.top).or_insert(0.0) += alive;
    }
    max_law.retain(|_, v| *v > 0.0);
    StoppedLaw {
        law,
        max_law,
        e_tau: Some(e_tau.value()),
        arrivals: None,
        error_bound: s.lower_residual + s.upper_residual + 1e-15 * (s.top as f64 + 1.0),
    }
}

/// `P(S*_a >= n) <= P(S*_b >= n) + 1e-12` for every `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceReport {
    pub holds: bool,
    /// `(n, a, b)` at the first violation.
    pub first_violation: Option<(i64, f64, f64)>,
    pub checked: usize,
    /// Largest `a - b` seen.
    pub max_excess: f64,
}

pub fn dominance_check(a: &StoppedLaw, b: &StoppedLaw) -> DominanceReport {
    let keys: std::collections::BTreeSet<i64> =
        a.max_law.keys().chain(b.max_law.keys()).copied().collect();
    let mut first_violation = None;
    let mut max_excess = f64::NEG_INFINITY;
    for &n in &keys {
        let (pa, pb) = (a.max_law_at(n), b.max_law_at(n));
        max_excess = max_excess.max(pa - pb);
        if pa > pb + 1e-12 && first_violation.is_none() {
            first_violation = Some((n, pa, pb));
        }
    }
    DominanceReport {
        holds: first_violation.is_none(),
        first_violation,
        checked: keys.len(),
        max_excess,
    }
}

/// Total variation between a stopped law and the target measure, counting
/// target mass outside the law's sites.
pub fn tv_to_measure(law: &BTreeMap<i64, f64>, m: &LatticeMeasure) -> f64 {
    let (Some(&lo), Some(&hi)) = (law.keys().next(), law.keys().next_back()) else {
        return 0.5 * (m.lower_mass(-1) + m.upper_mass(0)).max(0.0);
    };
    let mut diff = Accumulator::default();
    for i in lo..=hi {
        let q = law.get(&i).copied().unwrap_or(0.0);
        diff.add((q - m.pmf(i)).abs());
    }
    diff.add((m.lower_mass(lo - 1) + m.upper_mass(hi + 1)).max(0.0));
    0.5 * diff.value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::azema_yor::{build_schedule, ScheduleOptions};
    use crate::markovian::{build_policy, PolicyOptions, Provenance};
    use crate::measure::CasinoMode;
    use crate::numerics::total_variation;

    fn three_point() -> LatticeMeasure {
        LatticeMeasure::atoms(vec![(-1, 0.5), (0, 0.25), (2, 0.25)]).unwrap()
    }

    /// `u(x) = P_x(reach n before stopping)` is harmonic for the killed walk,
    /// so with `u(L) = 0` at the first sure stop below 0 and `u(L+1) = 1`,
    /// `u(x+1) = 2 u(x) / (1 - r_x) - u(x-1)` and `P_0(S* >= n) = u(0)/u(n)`.
    fn max_law_by_recursion(p: &MarkovianPolicy) -> BTreeMap<i64, f64> {
        let mut out = BTreeMap::new();
        if p.r(0) == 1.0 {
            return out;
        }
        let mut bottom = -1;
        while p.r(bottom) < 1.0 {
            bottom -= 1;
        }
        let mut u: BTreeMap<i64, f64> = BTreeMap::from([(bottom, 0.0), (bottom + 1, 1.0)]);
        let mut x = bottom + 1;
        loop {
            let c = 1.0 - p.r(x);
            if c == 0.0 {
                break;
            }
            u.insert(x + 1, 2.0 * u[&x] / c - u[&(x - 1)]);
            if x + 1 > 0 {
                out.insert(x + 1, u[&0] / u[&(x + 1)]);
            }
            x += 1;
        }
        out
    }

    #[test]
    fn three_point_markovian() {
        let p = build_policy(&three_point(), &PolicyOptions::default()).unwrap();
        let law = markovian_exact(&p, &OracleOptions::default()).unwrap();
        assert!((law.law[&-1] - 0.5).abs() < 1e-15);
        assert!((law.law[&0] - 0.25).abs() < 1e-15);
        assert!((law.law[&2] - 0.25).abs() < 1e-15);
        assert!((law.e_tau.unwrap() - 1.5).abs() < 1e-14);
        let rec = max_law_by_recursion(&p);
        for (n, v) in &law.max_law {
            if *n >= 1 {
                assert!((v - rec[n]).abs() < 1e-14, "n = {n}");
            }
        }
        for (n, v) in &rec {
            assert!((law.max_law_at(*n) - v).abs() < 1e-14, "n = {n}");
        }
    }

    #[test]
    fn uniform_pair_one_step() {
        let m = LatticeMeasure::atoms(vec![(-1, 0.5), (1, 0.5)]).unwrap();
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        let law = markovian_exact(&p, &OracleOptions::default()).unwrap();
        assert_eq!(law.law, BTreeMap::from([(-1, 0.5), (1, 0.5)]));
        assert_eq!(law.e_tau, Some(1.0));
        let s = build_schedule(&m, &ScheduleOptions::default()).unwrap();
        assert_eq!(ay_exact(&s).law, BTreeMap::from([(-1, 0.5), (1, 0.5)]));
    }

    #[test]
    fn three_point_ay() {
        let s = build_schedule(&three_point(), &ScheduleOptions::default()).unwrap();
        let law = ay_exact(&s);
        assert_eq!(law.law, BTreeMap::from([(-1, 0.5), (0, 0.25), (2, 0.25)]));
        assert_eq!(law.max_law, BTreeMap::from([(0, 1.0), (1, 0.5), (2, 0.25)]));
        assert_eq!(law.e_tau, Some(1.5));
    }

    #[test]
    fn within_level_masses_match_f_route() {
        let m = LatticeMeasure::atoms(vec![(-3, 0.2), (-1, 0.25), (0, 0.2), (2, 0.2), (3, 0.15)])
            .unwrap();
        let s = build_schedule(&m, &ScheduleOptions::default()).unwrap();
        let law = ay_exact(&s);
        let mut via_f: BTreeMap<i64, f64> = BTreeMap::new();
        for l in &s.levels {
            let g = l.gamma;
            for (j, st) in l.stops.iter().enumerate() {
                let v = (l.f[j] - l.f[j + 1]) / ((l.n + 1 - st.x) as f64) * g;
                *via_f.entry(st.x).or_insert(0.0) += v;
            }
        }
        *via_f.entry(s.top).or_insert(0.0) += s.max_law(s.top);
        via_f.retain(|_, v| *v > 0.0);
        assert!(total_variation(&law.law, &via_f) < 1e-14);
        assert!(tv_to_measure(&law.law, &m) < 1e-12);
    }

    #[test]
    fn casino_ay_recovers_inner_masses() {
        let m = LatticeMeasure::casino(CasinoMode::AsPrinted);
        let s = build_schedule(&m, &ScheduleOptions::default()).unwrap();
        let law = ay_exact(&s);
        assert!((law.law[&-1] - 0.6216).abs() < 1e-6, "{}", law.law[&-1]);
        assert!((law.law[&1] - 0.3297).abs() < 1e-6, "{}", law.law[&1]);
    }

    #[test]
    fn casino_markovian_matches_target() {
        let m = LatticeMeasure::casino(CasinoMode::Recentered).with_tail_tol(1e-10);
        let p = build_policy(&m, &PolicyOptions::for_measure(&m)).unwrap();
        let law = markovian_exact(
            &p,
            &OracleOptions {
                max_law_levels: 200,
            },
        )
        .unwrap();
        assert!(tv_to_measure(&law.law, &m) < 1e-8);
    }

    #[test]
    fn stop_at_start() {
        let p = MarkovianPolicy::from_parts((0, 0), vec![1.0], Provenance::Trivial).unwrap();
        let law = markovian_exact(&p, &OracleOptions::default()).unwrap();
        assert_eq!(law.law, BTreeMap::from([(0, 1.0)]));
        assert_eq!(law.e_tau, Some(0.0));
    }

    #[test]
    fn dominance_on_three_point() {
        let m = three_point();
        let mk = markovian_exact(
            &build_policy(&m, &PolicyOptions::default()).unwrap(),
            &OracleOptions::default(),
        )
        .unwrap();
        let ay = ay_exact(&build_schedule(&m, &ScheduleOptions::default()).unwrap());
        assert!(dominance_check(&mk, &ay).holds);
        let same = dominance_check(&ay, &ay);
        assert!(same.holds && same.max_excess == 0.0);
        let rev = dominance_check(&ay, &mk);
        assert!(!rev.holds);
    }
}
