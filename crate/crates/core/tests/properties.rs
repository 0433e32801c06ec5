mod common;

use common::{abs_diff, centered, exact_law, to_f64, IntMeasure};
use num_rational::BigRational;
use num_traits::{FromPrimitive, Zero};
use proptest::prelude::*;
use sep_walk::azema_yor::{ay_max_law, build_schedule, AySchedule, ScheduleOptions};
use sep_walk::markovian::{build_policy, MarkovianPolicy, PolicyOptions};
use sep_walk::oracle::{ay_exact, dominance_check, markovian_exact, tv_to_measure, OracleOptions};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 128,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn both_rules_embed_the_target(im in centered()) {
        let m = im.measure();
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        let s = build_schedule(&m, &ScheduleOptions::default()).unwrap();
        let mk = markovian_exact(&p, &OracleOptions::default()).unwrap();
        let ay = ay_exact(&s);
        prop_assert!(tv_to_measure(&mk.law, &m) < 1e-9);
        prop_assert!(tv_to_measure(&ay.law, &m) < 1e-9);
    }

    #[test]
    fn arrivals_split_into_stops_and_passes(im in centered()) {
        let m = im.measure();
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        let law = markovian_exact(&p, &OracleOptions::default()).unwrap();
        for (&i, &a) in law.arrivals.as_ref().unwrap() {
            let r = p.r(i);
            prop_assert!((a * r - im.mass(i)).abs() < 1e-10, "site {i}");
            if r < 1.0 {
                prop_assert!((a * (1.0 - r) - p.g(i)).abs() < 1e-10, "site {i}");
            }
        }
    }

    #[test]
    fn local_time_and_duration_identities(im in centered()) {
        let m = im.measure();
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        prop_assert!((p.g(0) - im.abs_moment()).abs() < 1e-12);
        let mk = markovian_exact(&p, &OracleOptions::default()).unwrap();
        let ay = ay_exact(&build_schedule(&m, &ScheduleOptions::default()).unwrap());
        prop_assert!((mk.e_tau.unwrap() - im.second_moment()).abs() < 1e-9);
        prop_assert!((ay.e_tau.unwrap() - im.second_moment()).abs() < 1e-9);
    }

    #[test]
    fn drawdown_rule_attains_the_maximal_bound(im in centered()) {
        let m = im.measure();
        let s = build_schedule(&m, &ScheduleOptions::default()).unwrap();
        let ay = ay_exact(&s);
        for n in 0..=im.hi() + 1 {
            let bound = im.max_bound(n);
            prop_assert!((ay_max_law(&s, n) - bound).abs() < 1e-12, "n = {n}");
            prop_assert!((ay.max_law_at(n) - bound).abs() < 1e-12, "n = {n}");
            prop_assert!((m.hl_bound(n) - bound).abs() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn coin_rule_maximum_is_dominated(im in centered()) {
        let m = im.measure();
        let mk = markovian_exact(&build_policy(&m, &PolicyOptions::default()).unwrap(), &OracleOptions::default()).unwrap();
        let ay = ay_exact(&build_schedule(&m, &ScheduleOptions::default()).unwrap());
        let d = dominance_check(&mk, &ay);
        prop_assert!(d.holds, "{d:?}");
        for n in 0..=im.hi() + 1 {
            prop_assert!(mk.max_law_at(n) <= ay.max_law_at(n) + 1e-12);
        }
    }

    #[test]
    fn biases_match_exact_arithmetic(im in centered()) {
        let m = im.measure();
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        let r = im.exact_r();
        for (&i, q) in &r {
            prop_assert!((p.r(i) - to_f64(q)).abs() < 1e-12, "site {i}");
        }
        // the exact biases embed the target with no error at all
        let law = exact_law(&r);
        for (&i, q) in &law {
            prop_assert!(abs_diff(q, &im.rational(i)).is_zero(), "site {i}");
        }
    }

    #[test]
    fn float_policy_law_checked_in_exact_arithmetic(im in centered()) {
        let m = im.measure();
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        let r: std::collections::BTreeMap<i64, BigRational> = p
            .sites()
            .map(|(i, v)| (i, BigRational::from_f64(v).unwrap()))
            .collect();
        let exact = exact_law(&r);
        let law = markovian_exact(&p, &OracleOptions::default()).unwrap();
        for (&i, q) in &exact {
            let got = law.law.get(&i).copied().unwrap_or(0.0);
            prop_assert!((got - to_f64(q)).abs() < 1e-12, "site {i}");
        }
    }

    #[test]
    fn levels_chain_and_weights_decrease(im in centered()) {
        let m = im.measure();
        let s = build_schedule(&m, &ScheduleOptions::default()).unwrap();
        prop_assert_eq!(s.top, im.hi());
        let mut prev_bottom = i64::MIN;
        for l in &s.levels {
            prop_assert!(l.stops.windows(2).all(|w| w[0].x > w[1].x));
            prop_assert!(l.stops.iter().all(|st| st.x <= l.n && (0.0..=1.0).contains(&st.rho)));
            prop_assert_eq!(l.stops.last().unwrap().rho, 1.0);
            prop_assert!(l.f.windows(2).all(|w| w[0] >= w[1] - 1e-12));
            let bottom = l.stops.last().unwrap().x;
            prop_assert!(bottom >= prev_bottom);
            prev_bottom = bottom;
        }
    }

    #[test]
    fn serialized_rules_reproduce_laws(im in centered()) {
        let m = im.measure();
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        let s = build_schedule(&m, &ScheduleOptions::default()).unwrap();
        let p2: MarkovianPolicy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        let s2: AySchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        let o = OracleOptions::default();
        prop_assert_eq!(markovian_exact(&p, &o).unwrap(), markovian_exact(&p2, &o).unwrap());
        prop_assert_eq!(ay_exact(&s), ay_exact(&s2));
    }
}

#[test]
fn balanced_fixture_is_centered() {
    let neg = [(-3, 2), (-1, 5)].into_iter().collect();
    let pos = [(2, 1), (7, 3)].into_iter().collect();
    let im = IntMeasure::balanced(&neg, &pos, 11);
    let mean: i128 = im
        .weights
        .iter()
        .map(|(&i, &w)| i as i128 * w as i128)
        .sum();
    assert_eq!(mean, 0);
    assert_eq!(im.den, im.weights.values().sum::<u64>());
}
