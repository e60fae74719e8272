//! Slack report for the theory's sufficient conditions on `d, N, K, K',
//! sigma0, sigma1, sigma_p, q_V, eta`.
//!
//! Every inequality has the shape `value >= C * base` or
//! `value <= base / C`. The constant `C` is user-supplied, so the report
//! gives slacks rather than a single verdict.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 0.01;

/// Quantities the conditions constrain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionInputs {
    pub d: usize,
    pub prefix_len: usize,
    pub num_train: usize,
    pub num_tasks: usize,
    pub num_common: usize,
    pub sigma0: f64,
    pub sigma1: f64,
    pub noise_sd: f64,
    pub q_v: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `value >= C * base`
    AtLeast,
    /// `value <= base / C`
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub item: u8,
    pub name: String,
    pub relation: Relation,
    pub value: f64,
    /// The `C`-free side of the bound.
    pub base: f64,
    /// `C * base` or `base / C`.
    pub bound: f64,
    /// `value - bound` for lower bounds, `bound - value` for upper bounds.
    /// Non-negative exactly when the inequality holds.
    pub slack: f64,
    /// False whenever the bound is undefined (non-finite).
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item: u8,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub c: f64,
    pub delta: f64,
    pub checks: Vec<InequalityCheck>,
    pub items: Vec<ItemSummary>,
}

impl ConditionReport {
    pub fn item_holds(&self, item: u8) -> bool {
        self.items.iter().any(|s| s.item == item && s.holds)
    }

    pub fn all_hold(&self) -> bool {
        self.items.iter().all(|s| s.holds)
    }
}

fn check(item: u8, name: &str, relation: Relation, value: f64, base: f64, c: f64) -> InequalityCheck {
    let bound = match relation {
        Relation::AtLeast => c * base,
        Relation::AtMost => base / c,
    };
    let slack = match relation {
        Relation::AtLeast => value - bound,
        Relation::AtMost => bound - value,
    };
    let holds = bound.is_finite() && value.is_finite() && slack >= 0.0;
    InequalityCheck {
        item,
        name: name.to_string(),
        relation,
        value,
        base,
        bound,
        slack,
        holds,
    }
}

/// Evaluate all six condition items at constant `c` and failure probability `delta`.
pub fn check_theory_conditions(inp: &ConditionInputs, c: f64, delta: f64) -> Result<ConditionReport> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("constant C must be positive, got {c}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let d = inp.d as f64;
    let m = inp.prefix_len as f64;
    let n = inp.num_train as f64;
    let k = inp.num_tasks as f64;
    let kp = inp.num_common as f64;
    let log_inv_delta = (1.0 / delta).ln();
    let log_kp2 = (kp * kp / delta).ln();
    use Relation::{AtLeast, AtMost};

    let checks = vec![
        check(1, "d >= C M^2 log(K'^2 N^2 M^2 / delta)", AtLeast, d, m * m * (kp * kp * n * n * m * m / delta).ln(), c),
        check(2, "N >= C K log(1/delta)", AtLeast, n, k * log_inv_delta, c),
        check(2, "N >= C K K' log(1/delta) / M", AtLeast, n, k * kp * log_inv_delta / m, c),
        check(3, "K >= C log(1/delta)", AtLeast, k, log_inv_delta, c),
        check(3, "K' >= C M", AtLeast, kp, m, c),
        check(3, "K' >= C K", AtLeast, kp, k, c),
        check(4, "sigma1 <= d^(-1/2) / C", AtMost, inp.sigma1, d.powf(-0.5), c),
        check(4, "sigma1 <= sqrt(q_V log(K'^2/delta)) / C", AtMost, inp.sigma1, (inp.q_v * log_kp2).sqrt(), c),
        check(
            4,
            "sigma0 <= d^(-1/4) log(K'^2/delta)^(-1/4) log(M)^(1/2) / C",
            AtMost,
            inp.sigma0,
            d.powf(-0.25) * log_kp2.powf(-0.25) * m.ln().sqrt(),
            c,
        ),
        check(4, "sigma0 <= d^(-1/2) / C", AtMost, inp.sigma0, d.powf(-0.5), c),
        check(5, "sigma_p <= d^(-1/2) / C", AtMost, inp.noise_sd, d.powf(-0.5), c),
        check(
            6,
            "q_V >= C sigma1^2 d / log(sigma0^-2 d^-1 log((M-1)/0.06))",
            AtLeast,
            inp.q_v,
            inp.sigma1 * inp.sigma1 * d / (((m - 1.0) / 0.06).ln() / (inp.sigma0 * inp.sigma0 * d)).ln(),
            c,
        ),
        check(
            6,
            "q_V <= sigma1^2 d / (C log(d^(-1/2) sqrt(log(K'^2/delta))))",
            AtMost,
            inp.q_v,
            inp.sigma1 * inp.sigma1 * d / (d.powf(-0.5) * log_kp2.sqrt()).ln(),
            c,
        ),
        check(
            6,
            "eta <= sigma1^2 d^(1/2) K sqrt(log(K'^2/delta)) / (q_V C)",
            AtMost,
            inp.eta,
            inp.sigma1 * inp.sigma1 * d.sqrt() * k * log_kp2.sqrt() / inp.q_v,
            c,
        ),
        check(
            6,
            "eta <= sigma1 d^(1/2) M^4 / (C (M-1)^2)",
            AtMost,
            inp.eta,
            inp.sigma1 * d.sqrt() * m.powi(4) / ((m - 1.0) * (m - 1.0)),
            c,
        ),
    ];
    let items = (1..=6)
        .map(|item| ItemSummary {
            item,
            holds: checks.iter().filter(|ch| ch.item == item).all(|ch| ch.holds),
        })
        .collect();
    Ok(ConditionReport {
        c,
        delta,
        checks,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper() -> ConditionInputs {
        ConditionInputs {
            d: 3000,
            prefix_len: 30,
            num_train: 200,
            num_tasks: 2,
            num_common: 100,
            sigma0: 1e-3,
            sigma1: 5e-3,
            noise_sd: 1e-2,
            q_v: 1e-5,
            eta: 5.0,
        }
    }

    #[test]
    fn paper_config_report() {
        let r = check_theory_conditions(&paper(), 1.0, DEFAULT_DELTA).unwrap();
        assert_eq!(r.checks.len(), 15);
        assert_eq!(r.items.len(), 6);
        // d = 3000 against 900 log(...) ~ 2.2e4: fails even at C = 1
        assert!(!r.item_holds(1));
        // sigma_p = 0.01 <= 3000^(-1/2) ~ 0.018
        assert!(r.item_holds(5));
        for ch in &r.checks {
            assert_eq!(ch.holds, ch.slack >= 0.0 && ch.bound.is_finite());
        }
    }

    #[test]
    fn tiny_dimension_fails_item_one() {
        let mut inp = paper();
        inp.d = 1;
        let r = check_theory_conditions(&inp, 1.0, 0.01).unwrap();
        assert!(!r.item_holds(1));
    }

    #[test]
    fn large_q_v_fails_item_six() {
        let mut inp = paper();
        inp.q_v = 1.0;
        let r = check_theory_conditions(&inp, 1.0, 0.01).unwrap();
        let upper = r
            .checks
            .iter()
            .find(|c| c.name.starts_with("q_V <="))
            .unwrap();
        // sigma1^2 d / log(d^-1/2 sqrt(log(1e4/0.01))) by hand
        let base = 25e-6 * 3000.0 / ((3000f64).powf(-0.5) * (1e6f64).ln().sqrt()).ln();
        assert!((upper.base - base).abs() < 1e-15);
        assert!(!r.item_holds(6));
    }

    #[test]
    fn single_prefix_token_is_undefined_not_passing() {
        let mut inp = paper();
        inp.prefix_len = 1;
        let r = check_theory_conditions(&inp, 1.0, 0.01).unwrap();
        let lower = r.checks.iter().find(|c| c.name.starts_with("q_V >=")).unwrap();
        assert!(!lower.holds);
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(check_theory_conditions(&paper(), 0.0, 0.01).is_err());
        assert!(check_theory_conditions(&paper(), 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn raising_c_never_turns_a_failure_into_a_pass(
            d in 1usize..10_000,
            m in 1usize..50,
            n in 1usize..1000,
            k in 1usize..10,
            kp in 1usize..200,
            s0 in 1e-5f64..1e-1,
            s1 in 1e-5f64..1e-1,
            sp in 1e-4f64..1e-1,
            qv in 1e-7f64..1.0,
            eta in 1e-2f64..100.0,
            c1 in 0.1f64..10.0,
            factor in 1.0f64..10.0,
        ) {
            let inp = ConditionInputs {
                d, prefix_len: m, num_train: n, num_tasks: k, num_common: kp,
                sigma0: s0, sigma1: s1, noise_sd: sp, q_v: qv, eta,
            };
            let lo = check_theory_conditions(&inp, c1, 0.01).unwrap();
            let hi = check_theory_conditions(&inp, c1 * factor, 0.01).unwrap();
            for (a, b) in lo.checks.iter().zip(hi.checks.iter()) {
                // a larger C tightens the bound whenever the C-free side is positive
                if a.base > 0.0 && b.holds {
                    prop_assert!(a.holds, "{} passes at C={} but fails at C={}", a.name, c1 * factor, c1);
                }
            }
        }
    }
}
