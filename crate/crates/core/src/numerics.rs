//! Small numerical helpers: the slowly decaying tail sum behind the casino
//! measure, compensated summation, and the goodness-of-fit statistics used by
//! the Monte Carlo harness.

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Exponent of the increment `x^a - (x-1)^a`.
const CASINO_ALPHA: f64 = 0.6;
/// Power applied to the increment.
const CASINO_POWER: f64 = 10.0 / 3.0;
/// Below this index the tail sum is accumulated term by term.
const DIRECT_LIMIT: usize = 4096;
/// Coefficients of the large-x expansion kept.
const SERIES_TERMS: usize = 10;

/// `x^0.6 - (x-1)^0.6` for `x >= 1`, without the cancellation of the naive form.
fn increment(x: f64) -> f64 {
    if x <= 1.0 {
        return 1.0;
    }
    -x.powf(CASINO_ALPHA) * (CASINO_ALPHA * (-1.0 / x).ln_1p()).exp_m1()
}

/// `h(x) = (x^0.6 - (x-1)^0.6)^(10/3)`; the casino masses are `c (h(n) - h(n+1))`.
pub fn casino_h(x: f64) -> f64 {
    increment(x).powf(CASINO_POWER)
}

/// Tail sums `H(N) = sum_{k >= N} h(k)` for the casino increment function.
///
/// Terms below [`DIRECT_LIMIT`] are tabulated. Beyond it, `h` is expanded as
/// `C x^{-4/3} (1 + b_1/x + b_2/x^2 + ...)` and the tail is evaluated with
/// Euler–Maclaurin using the exact integral of that expansion.
#[derive(Debug, Clone)]
pub struct CasinoTail {
    /// `h(k)` for `k = 0..=DIRECT_LIMIT + 1` (entries 0 and 1 unused by callers).
    h: Vec<f64>,
    /// `suffix[k] = H(k)` for `k <= DIRECT_LIMIT`.
    suffix: Vec<f64>,
    /// Expansion coefficients `b_j`.
    series: [f64; SERIES_TERMS],
    scale: f64,
}

impl CasinoTail {
    pub fn new() -> Self {
        let series = expansion_coefficients();
        let scale = CASINO_ALPHA.powf(CASINO_POWER);
        let mut tail = CasinoTail {
            h: Vec::new(),
            suffix: Vec::new(),
            series,
            scale,
        };
        let h: Vec<f64> = (0..=DIRECT_LIMIT + 1).map(|k| casino_h(k as f64)).collect();
        let mut suffix = vec![0.0; DIRECT_LIMIT + 1];
        let mut acc = tail.asymptotic_tail((DIRECT_LIMIT + 1) as f64);
        let mut comp = 0.0;
        for k in (0..=DIRECT_LIMIT).rev() {
            // Neumaier step
            let t = acc + h[k];
            if acc.abs() >= h[k].abs() {
                comp += (acc - t) + h[k];
            } else {
                comp += (h[k] - t) + acc;
            }
            acc = t;
            suffix[k] = acc + comp;
        }
        tail.h = h;
        tail.suffix = suffix;
        tail
    }

    /// `h(k)`, tabulated when available.
    pub fn h(&self, k: i64) -> f64 {
        if k >= 0 && (k as usize) < self.h.len() {
            self.h[k as usize]
        } else {
            casino_h(k as f64)
        }
    }

    /// `H(n) = sum_{k >= n} h(k)` for `n >= 2`.
    pub fn tail_sum(&self, n: i64) -> f64 {
        assert!(n >= 2, "tail sum defined for n >= 2");
        if (n as usize) <= DIRECT_LIMIT {
            self.suffix[n as usize]
        } else {
            self.asymptotic_tail(n as f64)
        }
    }

    /// `sum_{k=3}^{j} h(k)`, zero for `j < 3`.
    pub fn partial_sum(&self, j: i64) -> f64 {
        if j < 3 {
            return 0.0;
        }
        if ((j + 1) as usize) <= DIRECT_LIMIT {
            return self.suffix[3] - self.suffix[(j + 1) as usize];
        }
        self.suffix[3] - self.asymptotic_tail((j + 1) as f64)
    }

    /// Rough bound on the error of [`CasinoTail::tail_sum`]: the first
    /// omitted Euler–Maclaurin term at the switch-over point.
    pub fn error_bound(&self) -> f64 {
        let n = (DIRECT_LIMIT + 1) as f64;
        let d5: f64 = [4.0, 7.0, 10.0, 13.0, 16.0]
            .iter()
            .map(|k| k / 3.0)
            .product();
        self.scale * d5 * n.powf(-19.0 / 3.0) / 30240.0 + f64::EPSILON * self.suffix[3]
    }

    fn series_eval(&self, x: f64, shift: f64, weights: impl Fn(f64) -> f64) -> f64 {
        let z = 1.0 / x;
        let mut zj = 1.0;
        let mut acc = 0.0;
        for (j, b) in self.series.iter().enumerate() {
            let e = 4.0 / 3.0 + j as f64;
            acc += b * weights(e) * zj;
            zj *= z;
        }
        self.scale * acc * x.powf(-(4.0 / 3.0) - shift)
    }

    fn asymptotic_tail(&self, n: f64) -> f64 {
        // integral of C x^{-e}, e = 4/3 + j, from n to infinity: n^{1-e}/(e-1)
        let integral = self.series_eval(n, -1.0, |e| 1.0 / (e - 1.0));
        let f = casino_h(n);
        let d1 = self.series_eval(n, 1.0, |e| -e);
        let d3 = self.series_eval(n, 3.0, |e| -e * (e + 1.0) * (e + 2.0));
        integral + f / 2.0 - d1 / 12.0 + d3 / 720.0
    }
}

impl Default for CasinoTail {
    fn default() -> Self {
        Self::new()
    }
}

/// Coefficients `b_j` with `h(x) = 0.6^{10/3} x^{-4/3} sum_j b_j x^{-j}`.
fn expansion_coefficients() -> [f64; SERIES_TERMS] {
    // 1 - (1 - z)^a = sum_{k>=1} e_k z^k, e_k = -binom(a, k) (-1)^k
    let mut binom = 1.0;
    let mut e = [0.0; SERIES_TERMS + 1];
    for (k, slot) in e.iter_mut().enumerate().skip(1) {
        binom *= (CASINO_ALPHA - (k as f64 - 1.0)) / k as f64;
        *slot = -binom * if k % 2 == 0 { 1.0 } else { -1.0 };
    }
    // A(z) = (1 - (1-z)^a) / (a z), a_0 = 1
    let a: Vec<f64> = (0..SERIES_TERMS).map(|k| e[k + 1] / CASINO_ALPHA).collect();
    // B = A^p by Miller's recurrence
    let p = CASINO_POWER;
    let mut b = [0.0; SERIES_TERMS];
    b[0] = 1.0;
    for n in 1..SERIES_TERMS {
        let mut s = 0.0;
        for k in 1..=n {
            s += ((p + 1.0) * k as f64 - n as f64) * a[k] * b[n - k];
        }
        b[n] = s / n as f64;
    }
    b
}

/// Running Neumaier-compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Accumulator::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Total variation distance between two mass functions on the integers.
/// Sites missing from one side count as zero mass there.
pub fn total_variation(a: &BTreeMap<i64, f64>, b: &BTreeMap<i64, f64>) -> f64 {
    let mut diff = 0.0;
    for (site, pa) in a {
        diff += (pa - b.get(site).copied().unwrap_or(0.0)).abs();
    }
    for (site, pb) in b {
        if !a.contains_key(site) {
            diff += pb.abs();
        }
    }
    0.5 * diff
}

/// Result of a chi-square goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChiSquareOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of observed counts against expected probabilities.
///
/// Sites whose expected count is at least `min_expected` get their own bin;
/// every other site, observed or not, is pooled into one remainder bin whose
/// probability is `1 - sum(binned)`.
pub fn chi_square_test(
    observed: &BTreeMap<i64, u64>,
    expected: &BTreeMap<i64, f64>,
    min_expected: f64,
) -> ChiSquareOutcome {
    let total: u64 = observed.values().sum();
    if total == 0 {
        return ChiSquareOutcome {
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
        };
    }
    let n = total as f64;
    let mut statistic = 0.0;
    let mut bins = 0usize;
    let mut binned_prob = 0.0;
    let mut binned_count = 0u64;
    for (site, &p) in expected {
        if n * p >= min_expected {
            let o = observed.get(site).copied().unwrap_or(0);
            let e = n * p;
            statistic += (o as f64 - e).powi(2) / e;
            bins += 1;
            binned_prob += p;
            binned_count += o;
        }
    }
    let rest_prob = (1.0 - binned_prob).max(0.0);
    let rest_count = total - binned_count;
    let rest_expected = n * rest_prob;
    if rest_expected >= min_expected {
        statistic += (rest_count as f64 - rest_expected).powi(2) / rest_expected;
        bins += 1;
    } else if rest_count as f64 > min_expected.max(rest_expected * 10.0) {
        // mass where none was expected; force a rejection
        statistic = f64::INFINITY;
        bins += 1;
    }
    let dof = bins.saturating_sub(1);
    let p_value = if statistic.is_infinite() {
        0.0
    } else if dof == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
        (1.0 - dist.cdf(statistic)).clamp(0.0, 1.0)
    };
    ChiSquareOutcome {
        statistic,
        dof,
        p_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_tail(n: i64, upto: i64) -> f64 {
        compensated_sum((n..upto).map(|k| casino_h(k as f64)))
    }

    #[test]
    fn increment_matches_naive_form_for_small_x() {
        for x in [2.0, 3.0, 10.0, 57.0] {
            let naive: f64 = f64::powf(x, 0.6) - f64::powf(x - 1.0, 0.6);
            assert!((increment(x) - naive).abs() < 1e-14);
        }
    }

    #[test]
    fn series_reproduces_h_far_out() {
        let tail = CasinoTail::new();
        for x in [2000.0, 1.0e5, 1.0e8] {
            let s = tail.series_eval(x, 0.0, |_| 1.0);
            assert!((s / casino_h(x) - 1.0).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn tail_sum_consistent_across_switch_over() {
        // H(n) - H(m) must equal the direct partial sum in between.
        let tail = CasinoTail::new();
        let n = 4000;
        let m = 60_000;
        let direct = brute_tail(n, m);
        let diff = tail.tail_sum(n) - tail.tail_sum(m);
        assert!((direct - diff).abs() < 1e-13, "{direct} vs {diff}");
    }

    #[test]
    fn tail_sum_three_matches_high_precision_value() {
        // Reference from an independent 30-digit Euler–Maclaurin evaluation.
        let tail = CasinoTail::new();
        assert!((tail.tail_sum(3) - 0.433_022_189_017_535_3).abs() < 1e-13);
    }

    #[test]
    fn tv_of_disjoint_point_masses_is_one() {
        let a = BTreeMap::from([(0, 1.0)]);
        let b = BTreeMap::from([(1, 1.0)]);
        assert_eq!(total_variation(&a, &b), 1.0);
        assert_eq!(total_variation(&a, &a), 0.0);
    }

    #[test]
    fn chi_square_accepts_exact_counts() {
        let observed = BTreeMap::from([(-1, 500u64), (1, 500)]);
        let expected = BTreeMap::from([(-1, 0.5), (1, 0.5)]);
        let out = chi_square_test(&observed, &expected, 5.0);
        assert_eq!(out.dof, 1);
        assert!(out.statistic.abs() < 1e-12);
        assert!((out.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_rejects_gross_mismatch() {
        let observed = BTreeMap::from([(-1, 900u64), (1, 100)]);
        let expected = BTreeMap::from([(-1, 0.5), (1, 0.5)]);
        assert!(chi_square_test(&observed, &expected, 5.0).p_value < 1e-10);
    }
}
