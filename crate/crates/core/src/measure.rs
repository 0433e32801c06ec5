//! Centered integer-valued target laws, their tail functionals, barycenter
//! function and inverse, and the two-point truncation used to approximate
//! countable supports.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{compensated_sum, Accumulator, CasinoTail};

pub const DEFAULT_TAIL_TOL: f64 = 1e-12;
pub const DEFAULT_VALIDATION_TOL: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeasureError {
    #[error("measure is not centered: mean {mean:e} exceeds tolerance {tol:e}")]
    NonCentered { mean: f64, tol: f64 },
    #[error("total mass {mass} differs from 1 by more than {tol:e}")]
    MassDeficit { mass: f64, tol: f64 },
    #[error("first absolute moment is infinite")]
    InfiniteFirstMoment,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("negative mass {mass} at site {site}")]
    NegativeMass { site: i64, mass: f64 },
    #[error("measure is the point mass at 0; stop immediately")]
    DegenerateMeasure,
}

/// Finite list of atoms, sorted by site, with prefix and suffix sums.
#[derive(Debug, Clone)]
pub struct AtomTable {
    sites: Vec<i64>,
    masses: Vec<f64>,
    /// `prefix_mass[k] = sum of masses[..k]`
    prefix_mass: Vec<f64>,
    prefix_moment: Vec<f64>,
    /// `suffix_mass[k] = sum of masses[k..]`
    suffix_mass: Vec<f64>,
    suffix_moment: Vec<f64>,
}

impl AtomTable {
    fn new(mut atoms: Vec<(i64, f64)>) -> Result<Self, MeasureError> {
        atoms.sort_by_key(|a| a.0);
        let mut merged: Vec<(i64, f64)> = Vec::with_capacity(atoms.len());
        for (site, mass) in atoms {
            if !mass.is_finite() {
                return Err(MeasureError::InvalidParameter(format!(
                    "mass at {site} is not finite"
                )));
            }
            if mass < 0.0 {
                return Err(MeasureError::NegativeMass { site, mass });
            }
            match merged.last_mut() {
                Some(last) if last.0 == site => last.1 += mass,
                _ => merged.push((site, mass)),
            }
        }
        merged.retain(|a| a.1 > 0.0);
        if merged.is_empty() {
            return Err(MeasureError::InvalidParameter("no positive atoms".into()));
        }
        let sites: Vec<i64> = merged.iter().map(|a| a.0).collect();
        let masses: Vec<f64> = merged.iter().map(|a| a.1).collect();
        let n = sites.len();
        let mut prefix_mass = vec![0.0; n + 1];
        let mut prefix_moment = vec![0.0; n + 1];
        let (mut pm, mut pmo) = (Accumulator::default(), Accumulator::default());
        for k in 0..n {
            pm.add(masses[k]);
            pmo.add(sites[k] as f64 * masses[k]);
            prefix_mass[k + 1] = pm.value();
            prefix_moment[k + 1] = pmo.value();
        }
        let mut suffix_mass = vec![0.0; n + 1];
        let mut suffix_moment = vec![0.0; n + 1];
        let (mut sm, mut smo) = (Accumulator::default(), Accumulator::default());
        for k in (0..n).rev() {
            sm.add(masses[k]);
            smo.add(sites[k] as f64 * masses[k]);
            suffix_mass[k] = sm.value();
            suffix_moment[k] = smo.value();
        }
        Ok(AtomTable {
            sites,
            masses,
            prefix_mass,
            prefix_moment,
            suffix_mass,
            suffix_moment,
        })
    }

    pub fn atoms(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.sites.iter().copied().zip(self.masses.iter().copied())
    }

    /// Number of atoms at or below `j`.
    fn count_le(&self, j: i64) -> usize {
        self.sites.partition_point(|&s| s <= j)
    }

    fn pmf(&self, i: i64) -> f64 {
        match self.sites.binary_search(&i) {
            Ok(k) => self.masses[k],
            Err(_) => 0.0,
        }
    }

    fn lower_mass(&self, j: i64) -> f64 {
        self.prefix_mass[self.count_le(j)]
    }

    fn lower_moment(&self, j: i64) -> f64 {
        self.prefix_moment[self.count_le(j)]
    }

    fn upper_mass(&self, x: i64) -> f64 {
        self.suffix_mass[self.count_le(x - 1)]
    }

    fn upper_moment(&self, x: i64) -> f64 {
        self.suffix_moment[self.count_le(x - 1)]
    }

    fn call(&self, i: i64) -> f64 {
        let k = self.count_le(i);
        compensated_sum((k..self.sites.len()).map(|j| (self.sites[j] - i) as f64 * self.masses[j]))
    }

    fn put(&self, i: i64) -> f64 {
        let k = self.count_le(i - 1);
        compensated_sum((0..k).map(|j| (i - self.sites[j]) as f64 * self.masses[j]))
    }
}

/// Two-sided geometric law with an atom at 0:
/// `mu(n) = gamma_plus q_plus (1-q_plus)^(n-1)` for `n >= 1`, mirrored for
/// `n <= -1`, and `mu(0) = 1 - gamma_plus - gamma_minus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedGeometric {
    pub gamma_plus: f64,
    pub q_plus: f64,
    pub gamma_minus: f64,
    pub q_minus: f64,
}

impl MixedGeometric {
    fn s_plus(&self) -> f64 {
        1.0 - self.q_plus
    }

    fn s_minus(&self) -> f64 {
        1.0 - self.q_minus
    }

    fn zero_mass(&self) -> f64 {
        1.0 - self.gamma_plus - self.gamma_minus
    }

    /// `mu([j, inf))` for `j >= 1`.
    fn right_tail(&self, j: i64) -> f64 {
        self.gamma_plus * self.s_plus().powf((j - 1) as f64)
    }

    /// `sum_{k >= j} k mu(k)` for `j >= 1`.
    fn right_moment(&self, j: i64) -> f64 {
        if self.gamma_plus == 0.0 {
            return 0.0;
        }
        self.right_tail(j) * (j as f64 + self.s_plus() / self.q_plus)
    }

    /// `mu((-inf, -j])` for `j >= 1`.
    fn left_tail(&self, j: i64) -> f64 {
        self.gamma_minus * self.s_minus().powf((j - 1) as f64)
    }

    /// `sum_{k <= -j} k mu(k)` for `j >= 1`.
    fn left_moment(&self, j: i64) -> f64 {
        if self.gamma_minus == 0.0 {
            return 0.0;
        }
        -self.left_tail(j) * (j as f64 + self.s_minus() / self.q_minus)
    }

    fn mean(&self) -> f64 {
        let plus = if self.gamma_plus == 0.0 {
            0.0
        } else {
            self.gamma_plus / self.q_plus
        };
        let minus = if self.gamma_minus == 0.0 {
            0.0
        } else {
            self.gamma_minus / self.q_minus
        };
        plus - minus
    }

    fn pmf(&self, n: i64) -> f64 {
        match n.cmp(&0) {
            std::cmp::Ordering::Equal => self.zero_mass(),
            std::cmp::Ordering::Greater => {
                self.gamma_plus * self.q_plus * self.s_plus().powf((n - 1) as f64)
            }
            std::cmp::Ordering::Less => {
                self.gamma_minus * self.q_minus * self.s_minus().powf((-n - 1) as f64)
            }
        }
    }

    fn lower_mass(&self, j: i64) -> f64 {
        if j <= -1 {
            return self.left_tail(-j);
        }
        let mut m = self.gamma_minus + self.zero_mass();
        if j >= 1 {
            m += self.gamma_plus - self.right_tail(j + 1);
        }
        m
    }

    fn lower_moment(&self, j: i64) -> f64 {
        if j <= -1 {
            return self.left_moment(-j);
        }
        let mut m = self.left_moment(1);
        if j >= 1 {
            m += self.right_moment(1) - self.right_moment(j + 1);
        }
        m
    }

    fn upper_mass(&self, x: i64) -> f64 {
        if x >= 1 {
            return self.right_tail(x);
        }
        let mut m = self.gamma_plus + self.zero_mass();
        if x <= -1 {
            m += self.gamma_minus - self.left_tail(1 - x);
        }
        m
    }

    fn upper_moment(&self, x: i64) -> f64 {
        if x >= 1 {
            return self.right_moment(x);
        }
        let mut m = self.right_moment(1);
        if x <= -1 {
            m += self.left_moment(1) - self.left_moment(1 - x);
        }
        m
    }

    fn call(&self, i: i64) -> f64 {
        if i >= 0 {
            if self.gamma_plus == 0.0 {
                return 0.0;
            }
            self.gamma_plus * self.s_plus().powf(i as f64) / self.q_plus
        } else {
            self.mean() - i as f64 + self.put(i)
        }
    }

    fn put(&self, i: i64) -> f64 {
        if i <= 0 {
            if self.gamma_minus == 0.0 {
                return 0.0;
            }
            self.gamma_minus * self.s_minus().powf((-i) as f64) / self.q_minus
        } else {
            self.call(i) + i as f64 - self.mean()
        }
    }
}

/// How the printed casino weights are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CasinoMode {
    /// The rounded published weights, with the unbounded side taken from the
    /// nominal identities (mass 1, mean 0).
    #[default]
    AsPrinted,
    /// Weight at -1 adjusted to zero the mean, then everything renormalised.
    Recentered,
}

/// The casino example: atoms at -1 and 1 plus a power-law right tail
/// `c (h(n) - h(n+1))` for `n >= 2`.
#[derive(Debug, Clone)]
pub struct CasinoCpt {
    pub mode: CasinoMode,
    p_minus_one: f64,
    p_one: f64,
    c: f64,
    tail: Arc<CasinoTail>,
}

impl CasinoCpt {
    pub const PRINTED_MINUS_ONE: f64 = 0.6216;
    pub const PRINTED_ONE: f64 = 0.3297;
    pub const PRINTED_C: f64 = 0.4465;

    pub fn new(mode: CasinoMode) -> Self {
        let tail = Arc::new(CasinoTail::new());
        let (p_minus_one, p_one, c) = match mode {
            CasinoMode::AsPrinted => (Self::PRINTED_MINUS_ONE, Self::PRINTED_ONE, Self::PRINTED_C),
            CasinoMode::Recentered => {
                let c = Self::PRINTED_C;
                let p_one = Self::PRINTED_ONE;
                let p_minus_one = p_one + c * (2.0 * tail.h(2) + tail.tail_sum(3));
                let total = p_minus_one + p_one + c * tail.h(2);
                (p_minus_one / total, p_one / total, c / total)
            }
        };
        CasinoCpt {
            mode,
            p_minus_one,
            p_one,
            c,
            tail,
        }
    }

    fn pmf(&self, n: i64) -> f64 {
        match n {
            -1 => self.p_minus_one,
            1 => self.p_one,
            n if n >= 2 => self.c * (self.tail.h(n) - self.tail.h(n + 1)),
            _ => 0.0,
        }
    }

    fn lower_mass(&self, j: i64) -> f64 {
        match j {
            j if j < -1 => 0.0,
            -1 | 0 => self.p_minus_one,
            1 => self.p_minus_one + self.p_one,
            j => self.p_minus_one + self.p_one + self.c * (self.tail.h(2) - self.tail.h(j + 1)),
        }
    }

    fn lower_moment(&self, j: i64) -> f64 {
        match j {
            j if j < -1 => 0.0,
            -1 | 0 => -self.p_minus_one,
            1 => -self.p_minus_one + self.p_one,
            j => {
                let t = &self.tail;
                -self.p_minus_one
                    + self.p_one
                    + self.c * (2.0 * t.h(2) + t.partial_sum(j) - j as f64 * t.h(j + 1))
            }
        }
    }

    /// Literal total mass and mean of the weights.
    pub fn literal_mass_and_mean(&self) -> (f64, f64) {
        let t = &self.tail;
        let mass = self.p_minus_one + self.p_one + self.c * t.h(2);
        let mean = -self.p_minus_one + self.p_one + self.c * (2.0 * t.h(2) + t.tail_sum(3));
        (mass, mean)
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    Atoms(AtomTable),
    MixedGeometric(MixedGeometric),
    CasinoCpt(CasinoCpt),
}

/// A probability law on the integers with finite first moment.
///
/// Families bounded on exactly one side evaluate their unbounded side from
/// the bounded one through the nominal identities `mu(Z) = 1`, `E[S] = 0`:
/// `mu([x, inf)) = 1 - mu((-inf, x-1])`, `sum_{k >= x} k mu(k) = -sum_{k < x} k mu(k)`.
/// Families given by a finite list or closed form on both sides use literal
/// sums.
#[derive(Debug, Clone)]
pub struct LatticeMeasure {
    family: Family,
    tail_tol: f64,
}

/// Serialised description of a measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeasureSpec {
    Atoms {
        atoms: Vec<(i64, f64)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_tol: Option<f64>,
    },
    MixedGeometric {
        gamma_plus: f64,
        q_plus: f64,
        gamma_minus: f64,
        q_minus: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_tol: Option<f64>,
    },
    CasinoCpt {
        #[serde(default)]
        mode: CasinoMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_tol: Option<f64>,
    },
}

impl LatticeMeasure {
    pub fn atoms(atoms: Vec<(i64, f64)>) -> Result<Self, MeasureError> {
        Ok(LatticeMeasure {
            family: Family::Atoms(AtomTable::new(atoms)?),
            tail_tol: DEFAULT_TAIL_TOL,
        })
    }

    pub fn mixed_geometric(
        gamma_plus: f64,
        q_plus: f64,
        gamma_minus: f64,
        q_minus: f64,
    ) -> Result<Self, MeasureError> {
        let params = [gamma_plus, q_plus, gamma_minus, q_minus];
        if params.iter().any(|p| !p.is_finite()) {
            return Err(MeasureError::InvalidParameter(
                "non-finite parameter".into(),
            ));
        }
        for (g, q) in [(gamma_plus, q_plus), (gamma_minus, q_minus)] {
            if g < 0.0 {
                return Err(MeasureError::InvalidParameter(
                    "gamma must be nonnegative".into(),
                ));
            }
            if g > 0.0 && q <= 0.0 {
                return Err(MeasureError::InfiniteFirstMoment);
            }
            if q > 1.0 {
                return Err(MeasureError::InvalidParameter(
                    "q must lie in (0, 1]".into(),
                ));
            }
        }
        let zero = 1.0 - gamma_plus - gamma_minus;
        if zero < -1e-15 {
            return Err(MeasureError::NegativeMass {
                site: 0,
                mass: zero,
            });
        }
        Ok(LatticeMeasure {
            family: Family::MixedGeometric(MixedGeometric {
                gamma_plus,
                q_plus,
                gamma_minus,
                q_minus,
            }),
            tail_tol: DEFAULT_TAIL_TOL,
        })
    }

    pub fn casino(mode: CasinoMode) -> Self {
        LatticeMeasure {
            family: Family::CasinoCpt(CasinoCpt::new(mode)),
            tail_tol: DEFAULT_TAIL_TOL,
        }
    }

    pub fn from_spec(spec: &MeasureSpec) -> Result<Self, MeasureError> {
        let (m, tol) = match spec {
            MeasureSpec::Atoms { atoms, tail_tol } => (Self::atoms(atoms.clone())?, *tail_tol),
            MeasureSpec::MixedGeometric {
                gamma_plus,
                q_plus,
                gamma_minus,
                q_minus,
                tail_tol,
            } => (
                Self::mixed_geometric(*gamma_plus, *q_plus, *gamma_minus, *q_minus)?,
                *tail_tol,
            ),
            MeasureSpec::CasinoCpt { mode, tail_tol } => (Self::casino(*mode), *tail_tol),
        };
        match tol {
            Some(t) if !(t > 0.0 && t < 1.0) => Err(MeasureError::InvalidParameter(
                "tail_tol must lie in (0, 1)".into(),
            )),
            Some(t) => Ok(m.with_tail_tol(t)),
            None => Ok(m),
        }
    }

    pub fn to_spec(&self) -> MeasureSpec {
        let tail_tol = (self.tail_tol != DEFAULT_TAIL_TOL).then_some(self.tail_tol);
        match &self.family {
            Family::Atoms(t) => MeasureSpec::Atoms {
                atoms: t.atoms().collect(),
                tail_tol,
            },
            Family::MixedGeometric(g) => MeasureSpec::MixedGeometric {
                gamma_plus: g.gamma_plus,
                q_plus: g.q_plus,
                gamma_minus: g.gamma_minus,
                q_minus: g.q_minus,
                tail_tol,
            },
            Family::CasinoCpt(c) => MeasureSpec::CasinoCpt {
                mode: c.mode,
                tail_tol,
            },
        }
    }

    pub fn with_tail_tol(mut self, tol: f64) -> Self {
        self.tail_tol = tol;
        self
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    fn nominal_upper(&self) -> bool {
        matches!(self.family, Family::CasinoCpt(_))
    }

    /// `mu({i})`.
    pub fn pmf(&self, i: i64) -> f64 {
        match &self.family {
            Family::Atoms(t) => t.pmf(i),
            Family::MixedGeometric(g) => g.pmf(i),
            Family::CasinoCpt(c) => c.pmf(i),
        }
    }

    /// `mu((-inf, j])`.
    pub fn lower_mass(&self, j: i64) -> f64 {
        match &self.family {
            Family::Atoms(t) => t.lower_mass(j),
            Family::MixedGeometric(g) => g.lower_mass(j),
            Family::CasinoCpt(c) => c.lower_mass(j),
        }
    }

    /// `sum_{k <= j} k mu(k)`.
    pub fn lower_moment(&self, j: i64) -> f64 {
        match &self.family {
            Family::Atoms(t) => t.lower_moment(j),
            Family::MixedGeometric(g) => g.lower_moment(j),
            Family::CasinoCpt(c) => c.lower_moment(j),
        }
    }

    /// `mu([x, inf))`, written `bar mu(x)` elsewhere.
    pub fn upper_mass(&self, x: i64) -> f64 {
        if self.nominal_upper() {
            return 1.0 - self.lower_mass(x - 1);
        }
        match &self.family {
            Family::Atoms(t) => t.upper_mass(x),
            Family::MixedGeometric(g) => g.upper_mass(x),
            Family::CasinoCpt(_) => unreachable!(),
        }
    }

    /// `sum_{k >= x} k mu(k)`.
    pub fn upper_moment(&self, x: i64) -> f64 {
        if self.nominal_upper() {
            return -self.lower_moment(x - 1);
        }
        match &self.family {
            Family::Atoms(t) => t.upper_moment(x),
            Family::MixedGeometric(g) => g.upper_moment(x),
            Family::CasinoCpt(_) => unreachable!(),
        }
    }

    /// `E[(S - i)^+]`.
    pub fn call(&self, i: i64) -> f64 {
        match &self.family {
            Family::Atoms(t) => t.call(i),
            Family::MixedGeometric(g) => g.call(i),
            Family::CasinoCpt(_) => self.put(i) - i as f64,
        }
    }

    /// `E[(i - S)^+]`.
    pub fn put(&self, i: i64) -> f64 {
        match &self.family {
            Family::Atoms(t) => t.put(i),
            Family::MixedGeometric(g) => g.put(i),
            Family::CasinoCpt(_) => i as f64 * self.lower_mass(i - 1) - self.lower_moment(i - 1),
        }
    }

    /// Smallest and largest support points; `None` marks an unbounded side.
    pub fn support_bounds(&self) -> (Option<i64>, Option<i64>) {
        match &self.family {
            Family::Atoms(t) => (t.sites.first().copied(), t.sites.last().copied()),
            Family::MixedGeometric(g) => {
                let zero = g.zero_mass() > 0.0;
                let lo = if g.gamma_minus > 0.0 && g.q_minus < 1.0 {
                    None
                } else if g.gamma_minus > 0.0 {
                    Some(-1)
                } else if zero {
                    Some(0)
                } else {
                    Some(1)
                };
                let hi = if g.gamma_plus > 0.0 && g.q_plus < 1.0 {
                    None
                } else if g.gamma_plus > 0.0 {
                    Some(1)
                } else if zero {
                    Some(0)
                } else {
                    Some(-1)
                };
                (lo, hi)
            }
            Family::CasinoCpt(_) => (Some(-1), None),
        }
    }

    pub fn is_bounded(&self) -> bool {
        let (lo, hi) = self.support_bounds();
        lo.is_some() && hi.is_some()
    }

    /// Smallest atom strictly above `x`, if any.
    pub fn next_atom_above(&self, x: i64) -> Option<i64> {
        if let Family::Atoms(t) = &self.family {
            return t.sites.get(t.count_le(x)).copied();
        }
        let (_, hi) = self.support_bounds();
        let mut k = x + 1;
        loop {
            if let Some(h) = hi {
                if k > h {
                    return None;
                }
            }
            if self.pmf(k) > 0.0 {
                return Some(k);
            }
            k += 1;
        }
    }

    /// Largest atom strictly below `x`, if any.
    pub fn prev_atom_below(&self, x: i64) -> Option<i64> {
        if let Family::Atoms(t) = &self.family {
            let k = t.count_le(x - 1);
            return if k == 0 { None } else { Some(t.sites[k - 1]) };
        }
        let (lo, _) = self.support_bounds();
        let mut k = x - 1;
        loop {
            if let Some(l) = lo {
                if k < l {
                    return None;
                }
            }
            if self.pmf(k) > 0.0 {
                return Some(k);
            }
            k -= 1;
        }
    }

    /// Sites between which all but `tol` of the mass lies on each side:
    /// `mu((-inf, lo)) < tol` and `mu((hi, inf)) < tol`, clipped to the support.
    pub fn effective_bounds(&self, tol: f64) -> (i64, i64) {
        let (lo, hi) = self.support_bounds();
        let lo = lo.unwrap_or_else(|| {
            // smallest k <= 0 with mu((-inf, k-1]) < tol
            let mut step = 1i64;
            while self.lower_mass(-step - 1) >= tol {
                step *= 2;
            }
            let (mut a, mut b) = (-step, 0i64);
            while b - a > 1 {
                let mid = a + (b - a) / 2;
                if self.lower_mass(mid - 1) < tol {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            if self.lower_mass(b - 1) < tol {
                b
            } else {
                a
            }
        });
        let hi = hi.unwrap_or_else(|| {
            let mut step = 1i64;
            while self.upper_mass(step + 1) >= tol {
                step *= 2;
            }
            let (mut a, mut b) = (0i64, step);
            while b - a > 1 {
                let mid = a + (b - a) / 2;
                if self.upper_mass(mid + 1) < tol {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            if self.upper_mass(a + 1) < tol {
                a
            } else {
                b
            }
        });
        (lo, hi)
    }

    /// Mass and mean as literally summed, or as closed forms where the
    /// support is infinite.
    pub fn literal_mass_and_mean(&self) -> (f64, f64) {
        match &self.family {
            Family::Atoms(t) => (t.prefix_mass[t.sites.len()], t.prefix_moment[t.sites.len()]),
            Family::MixedGeometric(g) => (g.gamma_plus + g.gamma_minus + g.zero_mass(), g.mean()),
            Family::CasinoCpt(c) => c.literal_mass_and_mean(),
        }
    }

    /// Bound on truncation error in the tail functionals.
    pub fn tail_error(&self) -> f64 {
        match &self.family {
            Family::CasinoCpt(c) => c.tail.error_bound(),
            _ => 0.0,
        }
    }

    /// Check positivity, unit mass and zero mean within `tol`.
    pub fn validate(&self, tol: f64) -> Result<ValidationReport, MeasureError> {
        let (mass, mean) = self.literal_mass_and_mean();
        if !mass.is_finite() || !mean.is_finite() {
            return Err(MeasureError::InfiniteFirstMoment);
        }
        if let Family::MixedGeometric(g) = &self.family {
            if g.zero_mass() < 0.0 {
                return Err(MeasureError::NegativeMass {
                    site: 0,
                    mass: g.zero_mass(),
                });
            }
        }
        if (mass - 1.0).abs() > tol {
            return Err(MeasureError::MassDeficit { mass, tol });
        }
        if mean.abs() > tol {
            return Err(MeasureError::NonCentered { mean, tol });
        }
        let degenerate = self.is_degenerate();
        Ok(ValidationReport {
            mass,
            mean,
            tol,
            degenerate,
            support: self.support_bounds(),
        })
    }

    /// True for the point mass at 0.
    pub fn is_degenerate(&self) -> bool {
        self.support_bounds() == (Some(0), Some(0))
    }

    /// `psi(x) = E[S | S >= x]` at an integer `x`.
    pub fn psi(&self, x: i64) -> f64 {
        let (lo, hi) = self.support_bounds();
        if let Some(h) = hi {
            if x >= h {
                return x as f64;
            }
        }
        let x = match lo {
            Some(l) if x < l => l,
            _ => x,
        };
        let mass = self.upper_mass(x);
        if mass <= 0.0 {
            return x as f64;
        }
        self.upper_moment(x) / mass
    }

    /// `psi(x+)`, the value on `(x, x+1]`.
    pub fn psi_right(&self, x: i64) -> f64 {
        match self.support_bounds().1 {
            Some(h) if x >= h => x as f64,
            _ => self.psi(x + 1),
        }
    }

    /// `b(y) = sup { x : psi(x) <= y }` for `y >= 0`.
    pub fn inverse_barycenter(&self, y: f64) -> Barrier {
        assert!(y >= 0.0 && y.is_finite(), "barycenter inverse needs y >= 0");
        let (lo, hi) = self.support_bounds();
        if y == 0.0 {
            return match lo {
                Some(l) => Barrier::Site(l),
                None => Barrier::NegInfinity,
            };
        }
        if let Some(h) = hi {
            if y >= h as f64 {
                return if y.fract() == 0.0 {
                    Barrier::Site(y as i64)
                } else {
                    Barrier::Above(y)
                };
            }
        }
        let tie = 1e-12 * y.abs().max(1.0);
        let fits = |x: i64| self.psi(x) <= y + tie;
        // psi(x) > x below the top of the support, so the answer is < y
        let top = y.ceil() as i64 - 1;
        let bottom = match lo {
            Some(l) => l,
            None => {
                let mut k = -1i64;
                while !fits(k) {
                    if k < -(1i64 << 40) {
                        return Barrier::NegInfinity;
                    }
                    k *= 2;
                }
                k
            }
        };
        if top < bottom || !fits(bottom) {
            return Barrier::Site(bottom);
        }
        let (mut a, mut b) = (bottom, top);
        while a < b {
            let mid = a + (b - a + 1) / 2;
            if fits(mid) {
                a = mid;
            } else {
                b = mid - 1;
            }
        }
        // land on an atom: psi is constant between atoms
        if self.pmf(a) == 0.0 {
            if let Some(p) = self.prev_atom_below(a) {
                if self.psi(p) == self.psi(a) {
                    return Barrier::Site(p);
                }
            }
        }
        Barrier::Site(a)
    }

    /// `mu_bar(b)(psi(b) - b)/(n - b)` with `b = b(n)`; equals 1 at `n = 0`.
    pub fn hl_bound(&self, n: i64) -> f64 {
        if n <= 0 {
            return 1.0;
        }
        match self.inverse_barycenter(n as f64) {
            Barrier::NegInfinity => 1.0,
            Barrier::Above(_) => 0.0,
            Barrier::Site(b) if b >= n => self.upper_mass(n),
            Barrier::Site(b) => self.upper_mass(b) * (self.psi(b) - b as f64) / (n - b) as f64,
        }
    }

    /// Materialise the mass function over `[lo, hi]`.
    pub fn masses(&self, lo: i64, hi: i64) -> BTreeMap<i64, f64> {
        (lo..=hi)
            .filter_map(|i| {
                let p = self.pmf(i);
                (p > 0.0).then_some((i, p))
            })
            .collect()
    }

    /// Reflect `S -> -S`. Only finite atom lists and the geometric family.
    pub fn reflected(&self) -> Option<LatticeMeasure> {
        let family = match &self.family {
            Family::Atoms(t) => {
                Family::Atoms(AtomTable::new(t.atoms().map(|(s, p)| (-s, p)).collect()).ok()?)
            }
            Family::MixedGeometric(g) => Family::MixedGeometric(MixedGeometric {
                gamma_plus: g.gamma_minus,
                q_plus: g.q_minus,
                gamma_minus: g.gamma_plus,
                q_minus: g.q_plus,
            }),
            Family::CasinoCpt(_) => return None,
        };
        Some(LatticeMeasure {
            family,
            tail_tol: self.tail_tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub mass: f64,
    pub mean: f64,
    pub tol: f64,
    pub degenerate: bool,
    pub support: (Option<i64>, Option<i64>),
}

/// Value of the barycenter inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Barrier {
    /// `b(0)` for a measure unbounded below.
    NegInfinity,
    Site(i64),
    /// `b(y) = y` for non-integer `y` at or beyond the top of the support.
    Above(f64),
}

impl Barrier {
    pub fn site(self) -> Option<i64> {
        match self {
            Barrier::Site(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Barrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Barrier::NegInfinity => write!(f, "-inf"),
            Barrier::Site(s) => write!(f, "{s}"),
            Barrier::Above(y) => write!(f, "{y}"),
        }
    }
}

/// One breakpoint of `psi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarycenterRow {
    pub site: i64,
    pub mass_above: f64,
    pub psi_left: f64,
    pub psi_right: f64,
}

/// `psi` tabulated at the atoms inside a window, with the measure it was
/// computed from.
#[derive(Debug, Clone)]
pub struct BarycenterTable {
    pub measure: LatticeMeasure,
    pub rows: Vec<BarycenterRow>,
    /// True when the window does not reach an end of the support.
    pub clipped: bool,
}

impl BarycenterTable {
    pub fn new(measure: &LatticeMeasure, max_sites: usize) -> Self {
        let (lo, hi) = measure.effective_bounds(measure.tail_tol());
        let (slo, shi) = measure.support_bounds();
        let half = (max_sites / 2).max(1) as i64;
        let lo_c = lo.max(-half);
        let hi_c = hi.min(half);
        let clipped = slo != Some(lo_c) || shi != Some(hi_c);
        let rows = (lo_c..=hi_c)
            .filter(|&i| measure.pmf(i) > 0.0)
            .map(|i| BarycenterRow {
                site: i,
                mass_above: measure.upper_mass(i),
                psi_left: measure.psi(i),
                psi_right: measure.psi_right(i),
            })
            .collect();
        BarycenterTable {
            measure: measure.clone(),
            rows,
            clipped,
        }
    }

    pub fn inverse(&self, y: f64) -> Barrier {
        self.measure.inverse_barycenter(y)
    }
}

/// Two-point truncation `mu_n`: mass of `mu` at or beyond `n` and at or below
/// `-A_n` is moved onto `{n}` and `{-A_n}`, keeping the mean at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncatedMeasure {
    pub n: i64,
    /// Left endpoint `-A_n`.
    pub a_n: i64,
    pub masses: Vec<(i64, f64)>,
    /// `mu` already lives inside `(-A_n, n)`; nothing was moved.
    pub identity: bool,
}

impl TruncatedMeasure {
    pub fn to_measure(&self) -> Result<LatticeMeasure, MeasureError> {
        LatticeMeasure::atoms(self.masses.clone())
    }
}

/// Truncate a measure on the right at `n >= 1`.
pub fn truncate(m: &LatticeMeasure, n: i64) -> Result<TruncatedMeasure, MeasureError> {
    if n < 1 {
        return Err(MeasureError::InvalidParameter(
            "truncation level must be >= 1".into(),
        ));
    }
    let (lo, hi) = m.support_bounds();
    if hi.is_some_and(|h| h < n) {
        let (lo, hi) = (lo.expect("bounded"), hi.expect("bounded"));
        return Ok(TruncatedMeasure {
            n,
            a_n: lo.min(0),
            masses: m.masses(lo, hi).into_iter().collect(),
            identity: true,
        });
    }
    // Smallest k >= 1 whose two-point closure of the tails is admissible. Both
    // endpoint masses come from tail functionals, never from 1 - (window mass).
    let limit = lo.map(|l| 1 - l).unwrap_or(i64::MAX / 4);
    let (up_mass, up_moment, call_n) = (m.upper_mass(n), m.upper_moment(n), m.call(n));
    let mut k = 1i64;
    loop {
        let right = up_moment + k as f64 * up_mass - m.put(-k);
        if right > 0.0 {
            let denom = (n + k) as f64;
            let left = n as f64 * m.lower_mass(-k) - m.lower_moment(-k) - call_n;
            let mut masses: Vec<(i64, f64)> = Vec::with_capacity((n + k + 1) as usize);
            masses.push((-k, (left / denom).max(0.0)));
            masses.extend((1 - k..n).map(|i| (i, m.pmf(i))).filter(|a| a.1 > 0.0));
            masses.push((n, right / denom));
            return Ok(TruncatedMeasure {
                n,
                a_n: -k,
                masses,
                identity: false,
            });
        }
        if k > limit {
            return Err(MeasureError::InvalidParameter(format!(
                "no left endpoint balances the right tail at n = {n}"
            )));
        }
        k += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_point() -> LatticeMeasure {
        LatticeMeasure::atoms(vec![(-1, 0.5), (0, 0.25), (2, 0.25)]).unwrap()
    }

    fn geometric() -> LatticeMeasure {
        LatticeMeasure::mixed_geometric(5.0 / 12.0, 5.0 / 12.0, 13.0 / 24.0, 13.0 / 24.0).unwrap()
    }

    #[test]
    fn atom_functionals() {
        let m = three_point();
        assert_eq!(m.lower_mass(-1), 0.5);
        assert_eq!(m.upper_mass(1), 0.25);
        assert_eq!(m.upper_moment(0), 0.5);
        assert_eq!(m.call(0), 0.5);
        assert_eq!(m.put(0), 0.5);
        assert_eq!(m.call(2), 0.0);
        assert_eq!(m.put(-1), 0.0);
        assert_eq!(m.support_bounds(), (Some(-1), Some(2)));
    }

    #[test]
    fn three_point_barycenter() {
        let m = three_point();
        assert_eq!(m.psi(-1), 0.0);
        assert_eq!(m.psi(0), 1.0);
        assert_eq!(m.psi(1), 2.0);
        assert_eq!(m.psi(2), 2.0);
        assert_eq!(m.inverse_barycenter(0.0), Barrier::Site(-1));
        assert_eq!(m.inverse_barycenter(0.5), Barrier::Site(-1));
        assert_eq!(m.inverse_barycenter(1.0), Barrier::Site(0));
        assert_eq!(m.inverse_barycenter(1.5), Barrier::Site(0));
        assert_eq!(m.inverse_barycenter(2.0), Barrier::Site(2));
        assert_eq!(m.inverse_barycenter(2.5), Barrier::Above(2.5));
        assert_eq!(m.hl_bound(0), 1.0);
        assert_eq!(m.hl_bound(1), 0.5);
        assert_eq!(m.hl_bound(2), 0.25);
        assert_eq!(m.hl_bound(3), 0.0);
    }

    #[test]
    fn geometric_closed_forms_match_sums() {
        let m = geometric();
        let far = 400;
        for j in -6..=6 {
            let lm: f64 = compensated_sum((-far..=j).map(|k| m.pmf(k)));
            let lmo: f64 = compensated_sum((-far..=j).map(|k| k as f64 * m.pmf(k)));
            let um: f64 = compensated_sum((j..=far).map(|k| m.pmf(k)));
            let umo: f64 = compensated_sum((j..=far).map(|k| k as f64 * m.pmf(k)));
            let call: f64 = compensated_sum((j..=far).map(|k| (k - j).max(0) as f64 * m.pmf(k)));
            let put: f64 = compensated_sum((-far..=j).map(|k| (j - k).max(0) as f64 * m.pmf(k)));
            assert!((m.lower_mass(j) - lm).abs() < 1e-14);
            assert!((m.lower_moment(j) - lmo).abs() < 1e-14);
            assert!((m.upper_mass(j) - um).abs() < 1e-14);
            assert!((m.upper_moment(j) - umo).abs() < 1e-14);
            assert!((m.call(j) - call).abs() < 1e-14, "call {j}");
            assert!((m.put(j) - put).abs() < 1e-14, "put {j}");
        }
        let (mass, mean) = m.literal_mass_and_mean();
        assert!((mass - 1.0).abs() < 1e-15 && mean.abs() < 1e-15);
        assert_eq!(m.support_bounds(), (None, None));
    }

    #[test]
    fn geometric_rejects_bad_parameters() {
        assert_eq!(
            LatticeMeasure::mixed_geometric(0.5, 0.0, 0.5, 0.5).unwrap_err(),
            MeasureError::InfiniteFirstMoment
        );
        assert!(matches!(
            LatticeMeasure::mixed_geometric(0.7, 0.5, 0.7, 0.5),
            Err(MeasureError::NegativeMass { .. })
        ));
        let skew = LatticeMeasure::mixed_geometric(0.3, 0.5, 0.3, 0.25).unwrap();
        assert!(matches!(
            skew.validate(1e-6),
            Err(MeasureError::NonCentered { .. })
        ));
    }

    #[test]
    fn casino_as_printed_literal_totals() {
        let m = LatticeMeasure::casino(CasinoMode::AsPrinted);
        let (mass, mean) = m.literal_mass_and_mean();
        assert!((mass - 1.000_412_465_704).abs() < 1e-11);
        assert!((mean + 3.306_611_955_95e-4).abs() < 1e-12);
        assert!(m.validate(DEFAULT_VALIDATION_TOL).is_ok());
        assert!(m.validate(1e-4).is_err());
    }

    #[test]
    fn casino_recentered_is_exact() {
        let m = LatticeMeasure::casino(CasinoMode::Recentered);
        let (mass, mean) = m.literal_mass_and_mean();
        assert!((mass - 1.0).abs() < 1e-14 && mean.abs() < 1e-14);
        // nominal and literal upper tails agree once the weights are exact
        let c = match m.family() {
            Family::CasinoCpt(c) => c.clone(),
            _ => unreachable!(),
        };
        for x in [2, 5, 40] {
            let literal = c.c * c.tail.h(x);
            assert!((m.upper_mass(x) - literal).abs() < 1e-14);
        }
    }

    #[test]
    fn casino_barycenter_values() {
        let m = LatticeMeasure::casino(CasinoMode::AsPrinted);
        assert!((m.psi(1) - 1.642_706).abs() < 1e-6);
        assert!((m.psi(2) - 5.993_840).abs() < 1e-6);
        assert!((m.psi(3) - 10.1496).abs() < 1e-4);
        assert_eq!(m.psi(-1), 0.0);
        assert_eq!(m.inverse_barycenter(0.0), Barrier::Site(-1));
        assert_eq!(m.inverse_barycenter(1.0), Barrier::Site(-1));
        assert_eq!(m.inverse_barycenter(2.0), Barrier::Site(1));
        assert_eq!(m.inverse_barycenter(6.0), Barrier::Site(2));
    }

    #[test]
    fn inverse_on_unbounded_below() {
        let m = geometric();
        assert_eq!(m.inverse_barycenter(0.0), Barrier::NegInfinity);
        for y in [0.3, 1.0, 2.7, 9.0] {
            let b = m.inverse_barycenter(y).site().unwrap();
            assert!(m.psi(b) <= y + 1e-12);
            assert!(m.psi(b + 1) > y);
        }
    }

    #[test]
    fn effective_bounds_cover_mass() {
        let m = geometric();
        let (lo, hi) = m.effective_bounds(1e-12);
        assert!(m.lower_mass(lo - 1) < 1e-12 && m.lower_mass(lo) >= 1e-12);
        assert!(m.upper_mass(hi + 1) < 1e-12 && m.upper_mass(hi) >= 1e-12);
    }

    #[test]
    fn truncation_preserves_mass_and_mean() {
        let m = geometric();
        for n in [1, 3, 10] {
            let t = truncate(&m, n).unwrap();
            let mass: f64 = t.masses.iter().map(|a| a.1).sum();
            let mean: f64 = t.masses.iter().map(|a| a.0 as f64 * a.1).sum();
            assert!((mass - 1.0).abs() < 1e-13, "n = {n}");
            assert!(mean.abs() < 1e-13, "n = {n}");
            assert!(t.masses.iter().all(|a| a.1 >= 0.0));
            assert_eq!(t.masses.last().unwrap().0, n);
            assert_eq!(t.masses.first().unwrap().0, t.a_n);
        }
    }

    #[test]
    fn truncation_of_small_support_is_identity() {
        let t = truncate(&three_point(), 5).unwrap();
        assert!(t.identity);
        assert_eq!(t.masses, vec![(-1, 0.5), (0, 0.25), (2, 0.25)]);
    }

    #[test]
    fn rejects_negative_and_empty() {
        assert!(matches!(
            LatticeMeasure::atoms(vec![(1, -0.1), (0, 1.1)]),
            Err(MeasureError::NegativeMass { .. })
        ));
        assert!(LatticeMeasure::atoms(vec![]).is_err());
        let dirac = LatticeMeasure::atoms(vec![(0, 1.0)]).unwrap();
        assert!(dirac.validate(1e-9).unwrap().degenerate);
    }

    #[test]
    fn spec_round_trip() {
        for m in [
            three_point(),
            geometric(),
            LatticeMeasure::casino(CasinoMode::Recentered),
        ] {
            let json = serde_json::to_string(&m.to_spec()).unwrap();
            let spec: MeasureSpec = serde_json::from_str(&json).unwrap();
            let back = LatticeMeasure::from_spec(&spec).unwrap();
            for i in -5..=5 {
                assert_eq!(m.pmf(i), back.pmf(i));
            }
        }
        let spec: MeasureSpec = serde_json::from_str(r#"{"type":"casino_cpt"}"#).unwrap();
        assert_eq!(
            spec,
            MeasureSpec::CasinoCpt {
                mode: CasinoMode::AsPrinted,
                tail_tol: None
            }
        );
    }
}
