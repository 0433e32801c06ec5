//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use proptest::prelude::*;
use sep_walk::measure::LatticeMeasure;

/// A centered measure with integer weights over a common denominator.
#[derive(Debug, Clone)]
pub struct IntMeasure {
    pub weights: BTreeMap<i64, u64>,
    pub den: u64,
}

impl IntMeasure {
    /// Scale each side so the first moments cancel, then add weight at 0.
    pub fn balanced(neg: &BTreeMap<i64, u64>, pos: &BTreeMap<i64, u64>, zero: u64) -> Self {
        let m_neg: u64 = neg.iter().map(|(&i, &w)| i.unsigned_abs() * w).sum();
        let m_pos: u64 = pos.iter().map(|(&i, &w)| i.unsigned_abs() * w).sum();
        let mut weights = BTreeMap::new();
        for (&i, &w) in neg {
            weights.insert(i, w * m_pos);
        }
        for (&i, &w) in pos {
            weights.insert(i, w * m_neg);
        }
        if zero > 0 {
            weights.insert(0, zero);
        }
        let den = weights.values().sum();
        IntMeasure { weights, den }
    }

    pub fn mass(&self, i: i64) -> f64 {
        self.weights
            .get(&i)
            .map_or(0.0, |&w| w as f64 / self.den as f64)
    }

    pub fn atoms(&self) -> Vec<(i64, f64)> {
        self.weights.keys().map(|&i| (i, self.mass(i))).collect()
    }

    pub fn measure(&self) -> LatticeMeasure {
        LatticeMeasure::atoms(self.atoms()).expect("valid atoms")
    }

    pub fn rational(&self, i: i64) -> BigRational {
        let w = self.weights.get(&i).copied().unwrap_or(0);
        BigRational::new(BigInt::from(w), BigInt::from(self.den))
    }

    pub fn lo(&self) -> i64 {
        *self.weights.keys().next().expect("nonempty")
    }

    pub fn hi(&self) -> i64 {
        *self.weights.keys().next_back().expect("nonempty")
    }

    /// `sum |i| mu(i)`.
    pub fn abs_moment(&self) -> f64 {
        self.atoms().iter().map(|&(i, p)| i.abs() as f64 * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms().iter().map(|&(i, p)| (i * i) as f64 * p).sum()
    }

    /// `inf_{x < n} E[(X - x)^+] / (n - x)`, scanning integer `x`.
    pub fn max_bound(&self, n: i64) -> f64 {
        if n <= 0 {
            return 1.0;
        }
        let call = |x: i64| -> f64 {
            self.atoms()
                .iter()
                .map(|&(i, p)| (i - x).max(0) as f64 * p)
                .sum()
        };
        (self.lo().min(0)..n)
            .map(|x| call(x) / (n - x) as f64)
            .fold(1.0, f64::min)
    }

    /// Coin biases straight from their definition, in exact arithmetic:
    /// `r_i = p_i / (p_i + 2 E[(X - i)^+])` for `i >= 0`, with the put for `i < 0`.
    pub fn exact_r(&self) -> BTreeMap<i64, BigRational> {
        let two = BigRational::from_integer(BigInt::from(2));
        (self.lo()..=self.hi())
            .map(|i| {
                let mut g = BigRational::zero();
                for &j in self.weights.keys() {
                    let d = if i >= 0 { j - i } else { i - j };
                    if d > 0 {
                        g += self.rational(j) * BigRational::from_integer(BigInt::from(d));
                    }
                }
                g *= &two;
                let p = self.rational(i);
                let r = if p.is_zero() && g.is_zero() {
                    BigRational::one()
                } else {
                    &p / (&p + &g)
                };
                (i, r)
            })
            .collect()
    }
}

/// Stopped law of the coin rule `r` (sites outside the map stop surely),
/// solved exactly by tridiagonal elimination over the rationals.
pub fn exact_law(r: &BTreeMap<i64, BigRational>) -> BTreeMap<i64, BigRational> {
    let lo = *r.keys().next().expect("nonempty");
    let hi = *r.keys().next_back().expect("nonempty");
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let cont = |i: i64| -> BigRational {
        match r.get(&i) {
            Some(v) => BigRational::one() - v,
            None => BigRational::zero(),
        }
    };
    let n = (hi - lo + 1) as usize;
    // a_i - (1/2)(1 - r_{i-1}) a_{i-1} - (1/2)(1 - r_{i+1}) a_{i+1} = [i == 0]
    let mut c_prime = vec![BigRational::zero(); n];
    let mut d_prime = vec![BigRational::zero(); n];
    for k in 0..n {
        let i = lo + k as i64;
        let sub = -(&half * cont(i - 1));
        let sup = -(&half * cont(i + 1));
        let rhs = if i == 0 {
            BigRational::one()
        } else {
            BigRational::zero()
        };
        let (denom, d) = if k == 0 {
            (BigRational::one(), rhs)
        } else {
            (
                BigRational::one() - &sub * &c_prime[k - 1],
                rhs - &sub * &d_prime[k - 1],
            )
        };
        c_prime[k] = &sup / &denom;
        d_prime[k] = d / &denom;
    }
    let mut a = vec![BigRational::zero(); n];
    a[n - 1] = d_prime[n - 1].clone();
    for k in (0..n - 1).rev() {
        a[k] = &d_prime[k] - &c_prime[k] * &a[k + 1];
    }
    (lo..=hi)
        .zip(a)
        .map(|(i, a)| (i, a * r.get(&i).cloned().unwrap_or_else(BigRational::one)))
        .collect()
}

pub fn to_f64(q: &BigRational) -> f64 {
    q.to_f64().expect("finite")
}

pub fn abs_diff(a: &BigRational, b: &BigRational) -> BigRational {
    (a - b).abs()
}

/// Random centered measures with support in `[-10, 10]`.
pub fn centered() -> impl Strategy<Value = IntMeasure> {
    (
        prop::collection::btree_map(-10i64..=-1, 1u64..=20, 1..=5),
        prop::collection::btree_map(1i64..=10, 1u64..=20, 1..=5),
        prop_oneof![Just(0u64), 1u64..=400],
    )
        .prop_map(|(neg, pos, zero)| IntMeasure::balanced(&neg, &pos, zero))
}

pub fn three_point() -> LatticeMeasure {
    LatticeMeasure::atoms(vec![(-1, 0.5), (0, 0.25), (2, 0.25)]).expect("valid atoms")
}
