//! Double-double arithmetic (about 32 significant digits) for the
//! finite-difference oracle, where f64 roundoff divided by the step would
//! swamp small gradient entries.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Dd {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn ldexp(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let y = self.hi.sqrt();
        let s = Dd::new(y);
        let r = self - s * s;
        s + Dd::new(r.hi / (2.0 * y))
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        const SQUARINGS: i32 = 10;
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).ldexp(-SQUARINGS);
        // Taylor series; |r| < 4e-4 so 12 terms reach far below 1e-32
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=12 {
            term = term * r / Dd::new(n as f64);
            sum = sum + term;
        }
        for _ in 0..SQUARINGS {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    /// Natural log by Newton iteration on `exp`.
    pub fn ln(self) -> Dd {
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn max(self, other: Dd) -> Dd {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Dd {
        Dd::new(x)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Dd::renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        Dd::renorm(q1, q2) + Dd::new(q3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // reference digits from a 50-digit evaluation; exp loses a few digits to squaring
    #[test]
    fn exp_one() {
        let e = Dd::ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-28);
    }

    #[test]
    fn exp_negative_and_log_roundtrip() {
        let x = Dd::new(-2.5);
        let y = x.exp();
        // exp(-2.5) = 0.08208499862389879516952867446715...
        let err = (y - Dd { hi: 0.082_084_998_623_898_8, lo: 0.0 }).to_f64();
        assert!((err - (-4.804_734_666_105_929e-18)).abs() < 1e-29, "{err:e}");
        let back = y.ln();
        assert!((back - x).to_f64().abs() < 1e-28);
    }

    #[test]
    fn ln_two() {
        let l = Dd::new(2.0).ln();
        assert!((l - LN2).to_f64().abs() < 1e-31);
    }

    #[test]
    fn sqrt_and_division() {
        let two = Dd::new(2.0);
        let s = two.sqrt();
        assert!((s * s - two).to_f64().abs() < 1e-31);
        let third = Dd::ONE / Dd::new(3.0);
        assert!((third * Dd::new(3.0) - Dd::ONE).to_f64().abs() < 1e-31);
    }
}
