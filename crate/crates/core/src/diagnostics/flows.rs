//! Discrete recurrences and the closed-form continuous flows that bound them.
//!
//! `verify_flow` iterates a recurrence and checks the bound at every step.
//! Two bounds differ from their textbook statements:
//!
//! * `Sqrt`: the flow solving `x' = d / x` is `sqrt(2 d (t - t1) + c1^2)`.
//!   The form without the factor 2 is not an upper envelope of the
//!   iterate once shifted by `d / c1`.
//! * `ExpInv`: the lower bound needs `a <= b c` on top of `a < 2c`; with
//!   `a` large against `b c` the first step already outruns the flow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for comparing an iterate with its bound.
pub const BOUND_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Linear,
    Power,
    Sqrt,
    LinDecay,
    QuadExp,
    ExpInv,
}

impl FlowKind {
    pub const ALL: [FlowKind; 6] = [
        FlowKind::Linear,
        FlowKind::Power,
        FlowKind::Sqrt,
        FlowKind::LinDecay,
        FlowKind::QuadExp,
        FlowKind::ExpInv,
    ];
}

/// A recurrence with its parameters. `t0` is the first index and `start`
/// the value there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowSpec {
    /// `a_{t+1} = a_t + b`, started at `t = 0`.
    Linear { b: f64, start: f64 },
    /// `b_{t+1} = b_t + a b_t / (c t + d)`.
    Power { a: f64, c: f64, d: f64, t0: u64, start: f64 },
    /// `c_{t+1} = c_t + d / c_t`.
    Sqrt { d: f64, t0: u64, start: f64 },
    /// `e_{t+1} = e_t - b e_t` on `0 <= t <= t3`.
    LinDecay { b: f64, t3: u64, start: f64 },
    /// `f_{t+1} = f_t + a (t - t3) f_t` from `t = t3`.
    QuadExp { a: f64, t3: u64, start: f64 },
    /// `g_{t+1} = g_t + a g_t / (b t + c)^2`.
    ExpInv { a: f64, b: f64, c: f64, t0: u64, start: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowBounds {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: u64,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowVerification {
    pub kind: FlowKind,
    pub steps_checked: u64,
    pub violations: u64,
    pub first_violation: Option<Violation>,
}

impl FlowVerification {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn constraint(ok: bool, condition: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::FlowConstraint {
            condition: condition.to_string(),
        })
    }
}

fn finite(xs: &[f64]) -> Result<()> {
    constraint(xs.iter().all(|x| x.is_finite()), "parameters are finite")
}

impl FlowSpec {
    pub fn kind(&self) -> FlowKind {
        match self {
            FlowSpec::Linear { .. } => FlowKind::Linear,
            FlowSpec::Power { .. } => FlowKind::Power,
            FlowSpec::Sqrt { .. } => FlowKind::Sqrt,
            FlowSpec::LinDecay { .. } => FlowKind::LinDecay,
            FlowSpec::QuadExp { .. } => FlowKind::QuadExp,
            FlowSpec::ExpInv { .. } => FlowKind::ExpInv,
        }
    }

    pub fn first_index(&self) -> u64 {
        match *self {
            FlowSpec::Linear { .. } | FlowSpec::LinDecay { .. } => 0,
            FlowSpec::Power { t0, .. } | FlowSpec::Sqrt { t0, .. } | FlowSpec::ExpInv { t0, .. } => t0,
            FlowSpec::QuadExp { t3, .. } => t3,
        }
    }

    /// Parameter conditions under which the bound is guaranteed.
    pub fn validate(&self) -> Result<()> {
        match *self {
            FlowSpec::Linear { b, start } => {
                finite(&[b, start])?;
                constraint(b >= 0.0, "b >= 0")
            }
            FlowSpec::Power { a, c, d, start, .. } => {
                finite(&[a, c, d, start])?;
                constraint(c > 0.0, "c > 0")?;
                constraint(a > c, "a > c")?;
                constraint(d > 0.0, "d > 0")?;
                constraint(start > 0.0, "b_t0 > 0")
            }
            FlowSpec::Sqrt { d, start, .. } => {
                finite(&[d, start])?;
                constraint(d > 0.0, "d > 0")?;
                constraint(start > 0.0, "c_t0 > 0")
            }
            FlowSpec::LinDecay { b, start, .. } => {
                finite(&[b, start])?;
                constraint(b > 0.0, "b > 0")?;
                constraint(b <= 1.0, "b <= 1")?;
                constraint(start > 0.0, "e_0 > 0")
            }
            FlowSpec::QuadExp { a, start, .. } => {
                finite(&[a, start])?;
                constraint(a > 0.0, "a > 0")?;
                constraint(start > 0.0, "f_t3 > 0")
            }
            FlowSpec::ExpInv { a, b, c, start, .. } => {
                finite(&[a, b, c, start])?;
                constraint(a > 0.0, "a > 0")?;
                constraint(b > 0.0, "b > 0")?;
                constraint(c > 0.0, "c > 0")?;
                constraint(a < 2.0 * c, "a < 2c")?;
                constraint(a <= b * c, "a <= b c")?;
                constraint(start > 0.0, "g_t0 > 0")
            }
        }
    }

    /// One step of the recurrence from index `t`.
    pub fn step(&self, t: u64, x: f64) -> f64 {
        let tf = t as f64;
        match *self {
            FlowSpec::Linear { b, .. } => x + b,
            FlowSpec::Power { a, c, d, .. } => x + a * x / (c * tf + d),
            FlowSpec::Sqrt { d, .. } => x + d / x,
            FlowSpec::LinDecay { b, .. } => x - b * x,
            FlowSpec::QuadExp { a, t3, .. } => x + a * (tf - t3 as f64) * x,
            FlowSpec::ExpInv { a, b, c, .. } => x + a * x / ((b * tf + c) * (b * tf + c)),
        }
    }

    pub fn start(&self) -> f64 {
        match *self {
            FlowSpec::Linear { start, .. }
            | FlowSpec::Power { start, .. }
            | FlowSpec::Sqrt { start, .. }
            | FlowSpec::LinDecay { start, .. }
            | FlowSpec::QuadExp { start, .. }
            | FlowSpec::ExpInv { start, .. } => start,
        }
    }
}

/// Closed-form bounds at index `t` (at or after the first index).
pub fn flow_bound(spec: &FlowSpec, t: u64) -> Result<FlowBounds> {
    spec.validate()?;
    if t < spec.first_index() {
        return Err(Error::InvalidArgument(format!(
            "t = {t} precedes the first index {}",
            spec.first_index()
        )));
    }
    let tf = t as f64;
    Ok(match *spec {
        FlowSpec::Linear { b, start } => {
            let v = b * tf + start;
            FlowBounds {
                lower: Some(v),
                upper: Some(v),
            }
        }
        FlowSpec::Power { a, c, d, t0, start } => {
            let r = a / c;
            let shift = d / c;
            FlowBounds {
                lower: None,
                upper: Some(start * ((tf + shift) / (t0 as f64 + shift)).powf(r)),
            }
        }
        FlowSpec::Sqrt { d, t0, start } => {
            let x = (2.0 * d * (tf - t0 as f64) + start * start).sqrt();
            FlowBounds {
                lower: Some(x),
                upper: Some(d / start + x),
            }
        }
        FlowSpec::LinDecay { b, t3, start } => FlowBounds {
            lower: Some(start - b * start * t3 as f64),
            upper: None,
        },
        FlowSpec::QuadExp { a, t3, start } => {
            let s = tf - 1.0 - t3 as f64;
            FlowBounds {
                lower: Some(start + a * start * (s * s - 1.0) / 2.0),
                upper: Some(start * (a * tf * tf / 2.0).exp()),
            }
        }
        FlowSpec::ExpInv { a, b, c, t0, start } => {
            let e = -a / (b * (b * tf + c)) + a / (b * (b * t0 as f64 + c));
            FlowBounds {
                lower: Some(start * e.exp()),
                upper: None,
            }
        }
    })
}

fn within(value: f64, bounds: FlowBounds) -> bool {
    let tol = |b: f64| BOUND_RTOL * b.abs().max(value.abs()).max(f64::MIN_POSITIVE);
    let lower_ok = bounds.lower.is_none_or(|l| value >= l - tol(l));
    let upper_ok = bounds.upper.is_none_or(|u| value <= u + tol(u));
    lower_ok && upper_ok && value.is_finite()
}

/// Iterate the recurrence for `horizon` steps and check the bound at
/// every index, including the first. `LinDecay` stops at `t3`.
pub fn verify_flow(spec: &FlowSpec, horizon: u64) -> Result<FlowVerification> {
    spec.validate()?;
    let t_first = spec.first_index();
    let mut t_last = t_first + horizon;
    if let FlowSpec::LinDecay { t3, .. } = *spec {
        t_last = t_last.min(t3);
    }
    let mut x = spec.start();
    let mut out = FlowVerification {
        kind: spec.kind(),
        steps_checked: 0,
        violations: 0,
        first_violation: None,
    };
    let mut t = t_first;
    loop {
        let bounds = flow_bound(spec, t)?;
        out.steps_checked += 1;
        if !within(x, bounds) {
            out.violations += 1;
            out.first_violation.get_or_insert(Violation {
                t,
                value: x,
                lower: bounds.lower,
                upper: bounds.upper,
            });
        }
        if t == t_last {
            break;
        }
        x = spec.step(t, x);
        t += 1;
    }
    Ok(out)
}

/// Draw a parameter tuple satisfying [`FlowSpec::validate`] for `kind`.
/// Ranges keep every iterate and bound finite over a horizon of a few
/// thousand steps.
pub fn sample_admissible<R: Rng + ?Sized>(kind: FlowKind, horizon: u64, rng: &mut R) -> FlowSpec {
    let start = rng.random_range(0.01..10.0);
    let t0 = rng.random_range(0..100u64);
    match kind {
        FlowKind::Linear => FlowSpec::Linear {
            b: rng.random_range(0.0..10.0),
            start: rng.random_range(-10.0..10.0),
        },
        FlowKind::Power => {
            let c = rng.random_range(0.1..5.0);
            let a = c + rng.random_range(1e-6..3.0);
            FlowSpec::Power {
                a,
                c,
                d: rng.random_range(0.1..10.0),
                t0,
                start,
            }
        }
        FlowKind::Sqrt => FlowSpec::Sqrt {
            d: rng.random_range(0.01..10.0),
            t0,
            start: rng.random_range(0.1..10.0),
        },
        FlowKind::LinDecay => FlowSpec::LinDecay {
            // (0, 1]
            b: 1.0 - rng.random_range(0.0..1.0),
            t3: rng.random_range(1..=horizon.max(1)),
            start,
        },
        FlowKind::QuadExp => FlowSpec::QuadExp {
            a: 10f64.powf(rng.random_range(-6.0..-3.0)),
            t3: t0,
            start,
        },
        FlowKind::ExpInv => {
            let b: f64 = rng.random_range(0.01..2.0);
            let c: f64 = rng.random_range(0.1..10.0);
            let cap = (b * c).min(2.0 * c * (1.0 - 1e-12));
            FlowSpec::ExpInv {
                a: cap * (1.0 - rng.random_range(0.0..1.0)),
                b,
                c,
                t0,
                start,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn linear_with_zero_step_is_constant() {
        let s = FlowSpec::Linear { b: 0.0, start: 3.5 };
        assert_eq!(flow_bound(&s, 77).unwrap().lower, Some(3.5));
        assert!(verify_flow(&s, 1000).unwrap().passed());
    }

    #[test]
    fn sqrt_brackets_iterate_by_direct_iteration() {
        let s = FlowSpec::Sqrt { d: 1.0, t0: 0, start: 1.0 };
        let mut c = 1.0f64;
        for t in 0..=1000u64 {
            let x = (2.0 * t as f64 + 1.0).sqrt();
            assert!(x <= c * (1.0 + 1e-12) && c <= 1.0 + x);
            c += 1.0 / c;
        }
        let v = verify_flow(&s, 1000).unwrap();
        assert!(v.passed());
        assert_eq!(v.steps_checked, 1001);
    }

    #[test]
    fn sqrt_bound_without_factor_two_fails() {
        // iterate against sqrt(d (t - t1) + c1^2) + d / c1 at d = 1, c1 = 1
        let mut c = 1.0f64;
        for _ in 0..1000 {
            c += 1.0 / c;
        }
        let literal_upper = 1.0 + (1000.0f64 + 1.0).sqrt();
        assert!(c > literal_upper, "{c} vs {literal_upper}");
        assert!((c - 44.7).abs() < 0.1);
    }

    #[test]
    fn quad_exp_small_rate() {
        let s = FlowSpec::QuadExp { a: 1e-4, t3: 0, start: 1.0 };
        let mut f = 1.0f64;
        for t in 0..=500u64 {
            let tf = t as f64;
            assert!(f >= 1.0 + 1e-4 * ((tf - 1.0).powi(2) - 1.0) / 2.0);
            assert!(f <= (1e-4 * tf * tf / 2.0).exp());
            f += 1e-4 * tf * f;
        }
        assert!(verify_flow(&s, 500).unwrap().passed());
    }

    #[test]
    fn exp_inv_needs_a_below_bc() {
        // admissible under a < 2c alone, but a > b c
        let mut g = 1.0f64;
        let (a, b, c) = (1.0f64, 0.001f64, 1.0f64);
        g += a * g / (c * c);
        let lower = (-a / (b * (b + c)) + a / (b * c)).exp();
        assert!(g < lower, "{g} vs {lower}");
        let s = FlowSpec::ExpInv { a, b, c, t0: 0, start: 1.0 };
        assert!(matches!(s.validate(), Err(Error::FlowConstraint { condition }) if condition == "a <= b c"));
    }

    #[test]
    fn lin_decay_needs_b_at_most_one() {
        let s = FlowSpec::LinDecay { b: 2.5, t3: 10, start: 1.0 };
        assert!(s.validate().is_err());
        let ok = FlowSpec::LinDecay { b: 1.0, t3: 10, start: 1.0 };
        assert!(verify_flow(&ok, 100).unwrap().passed());
        assert_eq!(verify_flow(&ok, 100).unwrap().steps_checked, 11);
    }

    #[test]
    fn constraint_names_reported() {
        let s = FlowSpec::Power { a: 1.0, c: 2.0, d: 1.0, t0: 0, start: 1.0 };
        match s.validate() {
            Err(Error::FlowConstraint { condition }) => assert_eq!(condition, "a > c"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sampled_tuples_are_admissible() {
        let mut r = rng::stream(0, 0);
        for kind in FlowKind::ALL {
            for _ in 0..200 {
                let s = sample_admissible(kind, 1000, &mut r);
                s.validate().unwrap();
                assert_eq!(s.kind(), kind);
            }
        }
    }

    fn power_spec() -> impl Strategy<Value = FlowSpec> {
        (0.1f64..5.0, 1e-6f64..3.0, 0.1f64..10.0, 0u64..100, 0.01f64..10.0)
            .prop_map(|(c, gap, d, t0, start)| FlowSpec::Power { a: c + gap, c, d, t0, start })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn power_bound_holds(spec in power_spec()) {
            prop_assert!(verify_flow(&spec, 300).unwrap().passed());
        }

        #[test]
        fn sqrt_bound_holds(d in 0.01f64..10.0, t0 in 0u64..100, start in 0.1f64..10.0) {
            let spec = FlowSpec::Sqrt { d, t0, start };
            prop_assert!(verify_flow(&spec, 300).unwrap().passed());
        }
    }
}
